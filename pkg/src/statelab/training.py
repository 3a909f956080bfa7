"""Optimization recipe and the four state-initialization interventions.

The training loop is deliberately plain: build an initial state per the
intervention, take loss/grads with the initial state held constant, clip by
global norm, apply bias-corrected Adam with decoupled weight decay under a
warmup+cosine schedule, then refresh whatever auxiliary state the intervention
keeps (state bank, carried chunk states, or fitted-noise moments) from the
detached final states. Validation paths elsewhere always evaluate from the
zero initial state; interventions touch training only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState, Parameters, loss_and_grad
from .rng import substream

Array = np.ndarray

INTERVENTION_KINDS = ("zero", "random_noise", "fitted_noise", "state_passing", "tbtt")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class DataExhaustedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int
    batch_size_tokens: int
    context_len: int
    peak_lr: float
    warmup_frac: float = 0.10
    final_lr: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.warmup_frac < 1.0):
            raise ValueError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        for name in ("steps", "batch_size_tokens", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")

    @property
    def batch_sequences(self) -> int:
        return max(1, self.batch_size_tokens // self.context_len)


@dataclass
class InterventionSpec:
    kind: str = "zero"
    sigma: float = 0.0        # random_noise
    beta: float = 0.1         # fitted_noise moving average
    p_zero: float = 0.1       # state_passing zero-reset probability
    chunk_len: int | None = None  # tbtt training chunk length

    def validate(self) -> None:
        if self.kind not in INTERVENTION_KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must be in [0, 1]")
        if not (0.0 <= self.p_zero <= 1.0):
            raise ValueError("p_zero must be in [0, 1]")


@dataclass
class FittedNoiseStats:
    """Per-(layer, head) running mean/variance of final states."""

    mu: Array   # [layers, heads], float64
    var: Array  # [layers, heads], float64

    @staticmethod
    def zeros(config: ModelConfig) -> "FittedNoiseStats":
        shape = (config.n_layers, config.n_heads)
        return FittedNoiseStats(np.zeros(shape), np.zeros(shape))


@dataclass
class StateBank:
    """Detached final states of the previously processed batch (or empty)."""

    states: ModelState | None = None


@dataclass
class OptimizerState:
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0


def init_optimizer(params: Parameters) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
    )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to final_lr at the last step."""
    warmup = config.warmup_frac * config.steps
    if step <= warmup:
        return config.peak_lr * step / warmup
    progress = (step - warmup) / (config.steps - warmup)
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.final_lr + (config.peak_lr - config.final_lr) * cos


def global_grad_norm(grads: dict[str, Array]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(grads: dict[str, Array], max_norm: float = 1.0) -> dict[str, Array]:
    """Global-norm clipping, in place."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def adam_step(
    params: Parameters,
    grads: dict[str, Array],
    opt_state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> tuple[Parameters, OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Weight decay applies to matrices only; gains and biases are exempt.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(opt_state.step, f"non-finite gradient in {k}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    opt_state.step += 1
    t = opt_state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    eps = 1e-8
    for k, p in params.tensors.items():
        g = grads[k]
        m = opt_state.m[k]
        v = opt_state.v[k]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if config.weight_decay and p.ndim >= 2:
            update = update + config.weight_decay * p
        p -= lr * update
    return params, opt_state


def derangement(rng: np.random.Generator, n: int) -> Array:
    """Random permutation with no fixed points (identity when n == 1)."""
    if n == 1:
        return np.array([0])
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_initial_state(
    spec: InterventionSpec,
    bank: StateBank,
    stats: FittedNoiseStats,
    rng: np.random.Generator,
    batch_size: int,
    model_config: ModelConfig,
    dtype=np.float32,
) -> ModelState:
    spec.validate()
    if spec.kind == "zero":
        return ModelState.zeros(model_config, batch_size, dtype=dtype)

    if spec.kind == "random_noise":
        shape = (batch_size, model_config.n_heads, model_config.d_head, model_config.d_state)
        layers = [
            (spec.sigma * rng.standard_normal(shape)).astype(dtype)
            for _ in range(model_config.n_layers)
        ]
        return ModelState(layers)

    if spec.kind == "fitted_noise":
        shape = (batch_size, model_config.n_heads, model_config.d_head, model_config.d_state)
        layers = []
        sd = np.sqrt(stats.var)
        for li in range(model_config.n_layers):
            noise = rng.standard_normal(shape)
            h = noise * sd[li][None, :, None, None] + stats.mu[li][None, :, None, None]
            layers.append(h.astype(dtype))
        return ModelState(layers)

    if spec.kind == "state_passing":
        if bank.states is None:
            return ModelState.zeros(model_config, batch_size, dtype=dtype)
        if bank.states.batch != batch_size:
            raise ValueError(
                f"state bank batch {bank.states.batch} != requested batch {batch_size}"
            )
        perm = derangement(rng, batch_size)
        keep = rng.random(batch_size) >= spec.p_zero
        layers = []
        for h in bank.states.layers:
            shuffled = h[perm].astype(dtype, copy=True)
            shuffled[~keep] = 0.0
            layers.append(shuffled)
        return ModelState(layers)

    if spec.kind == "tbtt":
        if bank.states is None:
            return ModelState.zeros(model_config, batch_size, dtype=dtype)
        if bank.states.batch != batch_size:
            raise ValueError(
                f"carried state batch {bank.states.batch} != requested batch {batch_size}"
            )
        return bank.states.copy()

    raise ValueError(f"unknown intervention kind {spec.kind!r}")


def update_fitted_stats(
    stats: FittedNoiseStats, final_states: ModelState, beta: float = 0.1
) -> FittedNoiseStats:
    """mu <- (1-beta) Mean(h_T) + beta mu, likewise for the (population) variance.

    Mean/Variance reduce over batch, head channel, and state expansion axes,
    leaving one scalar pair per (layer, head).
    """
    for li, h in enumerate(final_states.layers):
        h64 = h.astype(np.float64)
        mean = h64.mean(axis=(0, 2, 3))
        var = h64.var(axis=(0, 2, 3))
        stats.mu[li] = (1.0 - beta) * mean + beta * stats.mu[li]
        stats.var[li] = (1.0 - beta) * var + beta * stats.var[li]
    return stats


LOG_COLUMNS = ("step", "lr", "loss", "grad_norm", "wall_ms")


def write_train_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(LOG_COLUMNS) + "\n")
        for r in rows:
            f.write(f"{r['step']},{r['lr']:.9g},{r['loss']:.9g},"
                    f"{r['grad_norm']:.9g},{r['wall_ms']:.9g}\n")


@dataclass
class TrainResult:
    params: Parameters
    log: list[dict] = field(default_factory=list)
    bank: StateBank = field(default_factory=StateBank)
    stats: FittedNoiseStats | None = None


def train(
    params: Parameters,
    data_stream,
    train_config: TrainConfig,
    intervention: InterventionSpec,
    log_path: str | Path | None = None,
    chunk_len: int = 64,
) -> TrainResult:
    """Run the optimize loop; returns trained parameters and the step log.

    data_stream yields batches with .tokens/.targets/.mask arrays of width
    context_len (tbtt: in-document chunk order with .doc_start flags).
    """
    train_config.validate()
    intervention.validate()
    model_config = params.config
    opt = init_optimizer(params)
    bank = StateBank()
    stats = FittedNoiseStats.zeros(model_config)
    rng = substream(train_config.seed, "intervention")
    rows: list[dict] = []

    for step in range(train_config.steps):
        t0 = time.perf_counter()
        try:
            batch = next(data_stream)
        except StopIteration:
            raise DataExhaustedError(f"data stream exhausted at step {step}") from None

        batch_size = batch.tokens.shape[0]
        init = make_initial_state(intervention, bank, stats, rng, batch_size,
                                  model_config, dtype=params.dtype)
        if intervention.kind == "tbtt" and batch.doc_start is not None:
            for h in init.layers:
                h[batch.doc_start] = 0.0

        try:
            loss, grads, finals = loss_and_grad(
                params, batch.tokens, batch.targets, batch.mask, init,
                chunk_len=chunk_len,
            )
        except FloatingPointError as err:
            raise DivergenceError(step, str(err)) from err
        if not math.isfinite(loss):
            raise DivergenceError(step, f"loss is {loss}")
        grad_norm = global_grad_norm(grads)
        clip_gradients(grads, train_config.grad_clip)
        lr = lr_at(step, train_config)
        adam_step(params, grads, opt, lr, train_config)

        if intervention.kind in ("state_passing", "tbtt"):
            bank.states = finals
        if intervention.kind == "fitted_noise":
            update_fitted_stats(stats, finals, beta=intervention.beta)

        rows.append(dict(step=step, lr=lr, loss=loss, grad_norm=grad_norm,
                         wall_ms=(time.perf_counter() - t0) * 1e3))

    if log_path is not None:
        write_train_log(log_path, rows)
    return TrainResult(params=params, log=rows, bank=bank,
                       stats=stats if intervention.kind == "fitted_noise" else None)


def post_train(
    params: Parameters,
    data_stream,
    base_config: TrainConfig,
    steps: int,
    intervention: InterventionSpec,
    log_path: str | Path | None = None,
    seed: int | None = None,
    chunk_len: int = 64,
) -> TrainResult:
    """Same loop as train, with a tenth of the peak learning rate."""
    if steps == 0:
        return TrainResult(params=params)
    cfg = replace(base_config, steps=steps, peak_lr=base_config.peak_lr / 10.0,
                  seed=base_config.seed if seed is None else seed)
    return train(params, data_stream, cfg, intervention, log_path=log_path,
                 chunk_len=chunk_len)
