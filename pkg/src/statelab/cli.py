"""Experiment driver: train, posttrain, eval, sweep, inspect-checkpoint.

Configuration is a JSON file mirroring ExperimentConfig; --set key=value flags
override individual fields (dotted paths, JSON-typed values). All emitted
curves are CSV; every run directory gets a run_manifest.json with the config
snapshot, a version stamp, and content hashes of the emitted files.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O
error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, runtime
from .checkpoint import describe, file_hash, load_checkpoint, save_checkpoint
from .metrics import (
    bucket_curve,
    default_effrem_grid,
    effective_remembrance,
    length_generalizes,
    positionwise_perplexity,
    state_statistics,
    write_effrem_csv,
    write_position_curve_csv,
    write_statestats_csv,
)
from .model import ModelConfig, init_parameters, make_logits_fn, make_step_fn
from .tasks import (
    BYTE_VOCAB_SIZE,
    CopyTaskConfig,
    PasskeyConfig,
    copy_eval,
    copy_train_stream,
    passkey_eval,
    passkey_train_stream,
    text_ingest,
)
from .training import (
    DivergenceError,
    InterventionSpec,
    TrainConfig,
    post_train,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

# sweep axis -> intervention kinds it applies to (None = any)
SWEEP_AXES: dict[str, tuple[str, ...] | None] = {
    "sigma": ("random_noise",),
    "p_zero": ("state_passing",),
    "chunk_len": ("tbtt",),
    "warmup_frac": None,
}


class ConfigError(ValueError):
    pass


# --- configuration ---------------------------------------------------------------


@dataclass
class TaskSpec:
    kind: str = "text"  # text | copy | passkey
    corpus_path: str | None = None
    split_frac: float = 0.9
    copy: CopyTaskConfig = field(default_factory=CopyTaskConfig)
    passkey: PasskeyConfig = field(default_factory=PasskeyConfig)

    def validate(self) -> None:
        if self.kind not in ("text", "copy", "passkey"):
            raise ConfigError(f"task.kind must be text|copy|passkey, got {self.kind!r}")
        if self.kind == "text":
            if not self.corpus_path:
                raise ConfigError("task.corpus_path required for the text task")
            if not Path(self.corpus_path).exists():
                raise ConfigError(f"task.corpus_path does not exist: {self.corpus_path}")


@dataclass
class EvalConfig:
    T_eval: int = 1024
    n_sequences: int = 128
    bucket_width: int = 32
    slack: float = 1.0
    effrem_T: int = 512
    effrem_grid: list[int] | None = None
    effrem_sequences: int = 8
    statestats_stride: int = 16
    copy_samples: int = 200
    passkey_lengths: list[int] = field(default_factory=lambda: [256, 512, 1024])
    passkey_depths: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    passkey_n_per_cell: int = 20


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    intervention: InterventionSpec
    task: TaskSpec
    eval: EvalConfig
    output_dir: str = "runs/run"
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.intervention.validate()
        self.task.validate()
        if self.task.kind == "text" and self.eval.T_eval < self.train.context_len:
            raise ConfigError("eval.T_eval must be >= train.context_len")


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def config_snapshot(config: ExperimentConfig) -> dict:
    """Config as stored in checkpoints: excludes output_dir so that identical
    configurations produce byte-identical checkpoint files wherever they run."""
    d = asdict(config)
    d.pop("output_dir", None)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = json.loads(json.dumps(d))  # deep copy, tuples normalized to lists
    try:
        seed = int(d.get("seed", 0))
        train_d = dict(d["train"])
        train_d.setdefault("seed", seed)
        task_d = dict(d.get("task", {}))
        copy_d = dict(task_d.pop("copy", {}))
        if "train_len_range" in copy_d:
            copy_d["train_len_range"] = tuple(copy_d["train_len_range"])
        passkey_d = dict(task_d.pop("passkey", {}))
        config = ExperimentConfig(
            model=ModelConfig(**d["model"]),
            train=TrainConfig(**train_d),
            intervention=InterventionSpec(**d.get("intervention", {})),
            task=TaskSpec(copy=CopyTaskConfig(**copy_d),
                          passkey=PasskeyConfig(**passkey_d), **task_d),
            eval=EvalConfig(**d.get("eval", {})),
            output_dir=d.get("output_dir", "runs/run"),
            seed=seed,
        )
    except (KeyError, TypeError) as err:
        raise ConfigError(f"bad experiment config: {err}") from err
    config.validate()
    return config


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply --set dotted.path=value pairs; values parse as JSON, else string."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def load_config(path: str | None, overrides: list[str],
                output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
    else:
        raise ConfigError("--config is required")
    apply_overrides(d, overrides)
    if output_dir is not None:
        d["output_dir"] = output_dir
    if seed is not None:
        d["seed"] = seed
        d.setdefault("train", {})["seed"] = seed
    return config_from_dict(d)


# --- run manifest ---------------------------------------------------------------


def _git_rev() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_run_manifest(out_dir: Path, config_dict: dict, files: list[Path],
                       started: float, extra: dict | None = None) -> Path:
    manifest = {
        "config": config_dict,
        "version": __version__,
        "git": _git_rev(),
        "strict_deterministic": runtime.strict_mode_enabled(),
        "started_utc": datetime.datetime.fromtimestamp(
            started, datetime.timezone.utc).isoformat(),
        "ended_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": {f.name: file_hash(f) for f in files if f.exists()},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- task plumbing ----------------------------------------------------------------


def check_vocab(config: ExperimentConfig) -> None:
    if config.task.kind == "copy":
        expect = config.task.copy.vocab_size
    else:
        expect = BYTE_VOCAB_SIZE
    if config.model.vocab_size != expect:
        raise ConfigError(
            f"model.vocab_size {config.model.vocab_size} does not match task "
            f"{config.task.kind!r} vocabulary {expect}"
        )


def build_train_stream(config: ExperimentConfig):
    t = config.task
    batch = config.train.batch_sequences
    if t.kind == "copy":
        return copy_train_stream(t.copy, batch, config.seed)
    if t.kind == "passkey":
        pk = replace(t.passkey, context_len=config.train.context_len + 1)
        return passkey_train_stream(pk, batch, config.seed)
    corpus = text_ingest(t.corpus_path, config.train.context_len,
                         t.split_frac, config.seed)
    if config.intervention.kind == "tbtt":
        chunk = config.intervention.chunk_len or config.train.context_len
        return corpus.tbtt_stream(batch, chunk)
    return corpus.train_stream(batch)


def eval_corpus(config: ExperimentConfig):
    if config.task.kind != "text":
        raise ConfigError(f"eval requires the text task, got {config.task.kind!r}")
    return text_ingest(config.task.corpus_path, config.train.context_len,
                       config.task.split_frac, config.seed)


# --- subcommands --------------------------------------------------------------------


def run_train(config: ExperimentConfig) -> Path:
    """Train per config; returns the checkpoint path."""
    config.validate()
    check_vocab(config)
    started = time.time()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_parameters(config.model, config.seed)
    stream = build_train_stream(config)
    log_path = out / "train_log.csv"
    result = train(params, stream, config.train, config.intervention,
                   log_path=log_path)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, result.params, seed=config.seed,
                    meta={"experiment": config_snapshot(config)})
    write_run_manifest(out, config_to_dict(config), [ckpt, log_path], started)
    return ckpt


def run_posttrain(checkpoint: str | Path, intervention: InterventionSpec,
                  steps: int, output_dir: str | Path,
                  overrides: list[str] | None = None,
                  seed: int | None = None) -> Path:
    """Post-train a checkpoint with a tenth of its original peak lr."""
    started = time.time()
    data = load_checkpoint(checkpoint)
    if "experiment" not in data.meta:
        raise ConfigError(f"{checkpoint}: no experiment config in checkpoint meta")
    d = data.meta["experiment"]
    if overrides:
        apply_overrides(d, overrides)
    config = config_from_dict(d)
    config.intervention = intervention
    if seed is not None:
        config.seed = seed
        config.train = replace(config.train, seed=seed)
    config.validate()
    check_vocab(config)

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    params = data.params
    if steps > 0:
        stream = build_train_stream(config)
        result = post_train(params, stream, config.train, steps, intervention,
                            log_path=log_path, seed=config.seed)
        params = result.params
    ckpt = out / "model.ckpt"
    parent = file_hash(checkpoint)
    snapshot = config_snapshot(config)
    snapshot["posttrain"] = {"steps": steps, "intervention": asdict(intervention)}
    save_checkpoint(ckpt, params, seed=config.seed,
                    meta={"experiment": snapshot}, parent_hash=parent)
    files = [ckpt] + ([log_path] if steps > 0 else [])
    write_run_manifest(out, snapshot, files, started)
    return ckpt


def run_eval(checkpoint: str | Path, which: str, output_dir: str | Path,
             overrides: list[str] | None = None) -> dict:
    """Evaluate a checkpoint; emits CSVs and returns a result summary."""
    started = time.time()
    data = load_checkpoint(checkpoint)
    if "experiment" not in data.meta:
        raise ConfigError(f"{checkpoint}: no experiment config in checkpoint meta")
    d = data.meta["experiment"]
    if overrides:
        apply_overrides(d, overrides)
    config = config_from_dict(d)
    params = data.params
    ev = config.eval
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"which": which}
    files: list[Path] = []

    if which == "ppl":
        corpus = eval_corpus(config)
        rows = corpus.eval_windows(ev.n_sequences, ev.T_eval)
        curve = positionwise_perplexity(make_logits_fn(params), rows, ev.T_eval)
        path = out / "ppl.csv"
        write_position_curve_csv(path, curve)
        files.append(path)
        scored = bucket_curve(curve, ev.bucket_width) if ev.bucket_width > 1 else curve
        T = int(scored.positions.max())
        for slack in sorted({ev.slack, 1.0, 1.05}):
            v = length_generalizes(scored, config.train.context_len, T, slack=slack)
            summary[f"verdict@{slack:g}"] = {
                "p_star": v.p_star, "t_star": v.t_star,
                "generalizes": v.generalizes,
                "first_violation": v.first_violation,
            }
            print(f"length-generalization (slack {slack:g}): "
                  f"generalizes={v.generalizes} p*={v.p_star:.6g} t*={v.t_star} "
                  f"first_violation={v.first_violation}")
    elif which == "effrem":
        corpus = eval_corpus(config)
        rows = corpus.eval_windows(ev.effrem_sequences, ev.effrem_T)
        grid = ev.effrem_grid or default_effrem_grid(ev.effrem_T)
        curve = effective_remembrance(make_logits_fn(params), rows, grid)
        path = out / "effrem.csv"
        write_effrem_csv(path, curve)
        files.append(path)
        summary["grid"] = [int(t) for t in curve.grid]
    elif which == "statestats":
        corpus = eval_corpus(config)
        rows = corpus.eval_windows(ev.n_sequences, ev.T_eval)
        curve = state_statistics(params, rows, ev.T_eval, ev.statestats_stride)
        path = out / "statestats.csv"
        write_statestats_csv(path, curve)
        files.append(path)
    elif which == "copy":
        acc = copy_eval(make_step_fn(params), config.task.copy,
                        ev.copy_samples, config.seed)
        path = out / "copy.csv"
        with open(path, "w") as f:
            f.write("n_samples,eval_len,character_accuracy\n")
            f.write(f"{ev.copy_samples},{config.task.copy.eval_len},{acc:.9g}\n")
        files.append(path)
        summary["character_accuracy"] = acc
        print(f"copy character accuracy: {acc:.4f}")
    elif which == "passkey":
        grid = passkey_eval(make_step_fn(params), ev.passkey_lengths,
                            ev.passkey_depths, ev.passkey_n_per_cell,
                            config.task.passkey, config.seed)
        path = out / "passkey.csv"
        with open(path, "w") as f:
            f.write("length,depth,accuracy\n")
            for (length, depth), acc in sorted(grid.items()):
                f.write(f"{length},{depth:.9g},{acc:.9g}\n")
        files.append(path)
        summary["grid"] = {f"{k[0]}@{k[1]:g}": v for k, v in grid.items()}
        print("passkey accuracy grid:")
        for (length, depth), acc in sorted(grid.items()):
            print(f"  length {length:>6} depth {depth:.2f}: {acc:.3f}")
    else:
        raise ConfigError(f"unknown eval target {which!r}")

    write_run_manifest(out, config_to_dict(config), files, started,
                       extra={"eval_summary": summary})
    return summary


def run_sweep(config: ExperimentConfig, axis: str, values: list[float],
              output_dir: str | Path) -> Path:
    """One full train+ppl-eval run per axis value, plus a verdict summary CSV."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    allowed = SWEEP_AXES[axis]
    if allowed is not None and config.intervention.kind not in allowed:
        raise ConfigError(
            f"axis {axis!r} applies to interventions {allowed}, "
            f"not {config.intervention.kind!r}"
        )
    started = time.time()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub = replace(config)
        if axis == "warmup_frac":
            sub.train = replace(config.train, warmup_frac=float(value))
        elif axis == "chunk_len":
            sub.intervention = replace(config.intervention, chunk_len=int(value))
        else:
            sub.intervention = replace(config.intervention, **{axis: float(value)})
        run_dir = out / f"{axis}={value:g}"
        sub.output_dir = str(run_dir)
        ckpt = run_train(sub)
        summary = run_eval(ckpt, "ppl", run_dir)
        child_hash = file_hash(run_dir / "run_manifest.json")
        v = summary[f"verdict@{sub.eval.slack:g}"]
        rows.append((value, run_dir.name, child_hash, v))
    summary_path = out / "sweep_summary.csv"
    with open(summary_path, "w") as f:
        f.write(f"{axis},run_dir,manifest_sha256,p_star,t_star,generalizes,first_violation\n")
        for value, name, child_hash, v in rows:
            fv = "" if v["first_violation"] is None else v["first_violation"]
            f.write(f"{value:g},{name},{child_hash},{v['p_star']:.9g},"
                    f"{v['t_star']},{v['generalizes']},{fv}\n")
    write_run_manifest(out, config_to_dict(config), [summary_path], started,
                       extra={"sweep_axis": axis, "sweep_values": list(values)})
    return summary_path


# --- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="statelab", description=__doc__)
    ap.add_argument("--threads", type=int, default=None,
                    help=f"BLAS thread count (default: ${runtime.THREADS_ENV_VAR} or all)")
    ap.add_argument("--strict-deterministic", action="store_true",
                    help="single-threaded numerics; outputs independent of core count")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], dest="overrides")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("posttrain", help="post-train a checkpoint (peak lr / 10)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--intervention", required=True,
                   choices=("zero", "random_noise", "fitted_noise", "state_passing", "tbtt"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--p-zero", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--chunk-len", type=int, default=None)
    p.add_argument("--set", action="append", default=[], dest="overrides")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", required=True,
                   choices=("ppl", "effrem", "statestats", "copy", "passkey"))
    p.add_argument("--set", action="append", default=[], dest="overrides")
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("sweep", help="train/eval once per axis value")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated numeric values")
    p.add_argument("--set", action="append", default=[], dest="overrides")
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("--checkpoint", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        runtime.configure(args.threads, args.strict_deterministic)
        if args.command == "train":
            config = load_config(args.config, args.overrides, args.output_dir, args.seed)
            ckpt = run_train(config)
            print(f"checkpoint: {ckpt}")
        elif args.command == "posttrain":
            spec = InterventionSpec(kind=args.intervention, sigma=args.sigma,
                                    p_zero=args.p_zero, beta=args.beta,
                                    chunk_len=args.chunk_len)
            ckpt = run_posttrain(args.checkpoint, spec, args.steps,
                                 args.output_dir, args.overrides, args.seed)
            print(f"checkpoint: {ckpt}")
        elif args.command == "eval":
            run_eval(args.checkpoint, args.which, args.output_dir, args.overrides)
        elif args.command == "sweep":
            config = load_config(args.config, args.overrides)
            values = [float(v) for v in args.values.split(",") if v]
            if not values:
                raise ConfigError("--values must list at least one number")
            path = run_sweep(config, args.axis, values, args.output_dir)
            print(f"summary: {path}")
        elif args.command == "inspect-checkpoint":
            print(describe(args.checkpoint))
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
