"""Measurement stack: position-wise perplexity, the length-generalization
verdict, effective remembrance under three distances, and state statistics
over time.

Model access goes through a stateless `logits_fn(tokens) -> logits` callable
(see model.make_logits_fn), so reference predictors used as oracles in tests
- uniform, constant-logit, sliding-window - plug in without fake parameters.
Evaluation always runs from the zero initial state.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Parameters, forward_states

Array = np.ndarray


@dataclass
class PositionCurve:
    positions: Array  # strictly increasing ints
    value: Array      # perplexity per position
    counts: Array     # samples averaged per position


@dataclass
class LengthGenVerdict:
    p_star: float
    t_star: int
    generalizes: bool
    first_violation: int | None
    slack: float = 1.0


@dataclass
class EffRemCurve:
    grid: Array                  # positions t
    values: dict[str, Array]     # per distance kind, aligned with grid


@dataclass
class StateStatsCurve:
    positions: Array
    global_norm: Array                # [n_positions]
    per_layer_head_std: Array         # [n_layers, n_heads, n_positions]


def _softmax(logits: Array) -> Array:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


# --- position-wise perplexity ----------------------------------------------------


def positionwise_perplexity(logits_fn, dataset: Array, T_eval: int,
                            batch_size: int = 32) -> PositionCurve:
    """exp of the dataset-mean negative log-likelihood at each position.

    dataset: [n, >= T_eval+1] token rows; position t means predicting token
    t+1 from the t+1 leading tokens, so the curve has positions 0..T_eval-1.
    """
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty [n, T] token array")
    if dataset.shape[1] < T_eval + 1:
        raise ValueError(
            f"dataset rows have {dataset.shape[1]} tokens; need >= {T_eval + 1}"
        )
    n = dataset.shape[0]
    nll_sum = np.zeros(T_eval, dtype=np.float64)
    for lo in range(0, n, batch_size):
        rows = dataset[lo:lo + batch_size]
        logits = logits_fn(rows[:, :T_eval])
        targets = rows[:, 1:T_eval + 1]
        m = logits.max(axis=-1, keepdims=True)
        logZ = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
        nll_sum += (logZ - picked).sum(axis=0, dtype=np.float64)
    mean_nll = nll_sum / n
    return PositionCurve(
        positions=np.arange(T_eval),
        value=np.exp(mean_nll),
        counts=np.full(T_eval, n, dtype=np.int64),
    )


def bucket_curve(curve: PositionCurve, width: int) -> PositionCurve:
    """Average the curve into aligned position bins of the given width.

    Per-bucket perplexity is exp of the count-weighted mean NLL, i.e. the same
    aggregate the raw curve uses, just over a coarser position partition. The
    bucket is labeled by its last position.
    """
    if width < 1:
        raise ValueError("bucket width must be >= 1")
    pos = curve.positions
    log_v = np.log(curve.value)
    labels, values, counts = [], [], []
    for b0 in range(int(pos.min()) // width * width, int(pos.max()) + 1, width):
        sel = (pos >= b0) & (pos < b0 + width)
        if not np.any(sel):
            continue
        w = curve.counts[sel]
        labels.append(min(b0 + width - 1, int(pos.max())))
        values.append(np.exp(np.average(log_v[sel], weights=w)))
        counts.append(int(w.sum()))
    return PositionCurve(positions=np.array(labels), value=np.array(values),
                         counts=np.array(counts))


def length_generalizes(curve: PositionCurve, T_train: int, T: int,
                       slack: float = 1.0) -> LengthGenVerdict:
    """p_star = best perplexity within the training context; generalizes iff the
    curve never exceeds slack*p_star from that point through position T."""
    pos = curve.positions
    if T_train > pos.max():
        raise ValueError(f"T_train {T_train} exceeds curve max position {pos.max()}")
    if T > pos.max():
        raise ValueError(f"curve does not cover T={T} (max position {pos.max()})")
    in_train = pos <= T_train
    p_star = float(curve.value[in_train].min())
    t_star = int(pos[in_train][np.argmin(curve.value[in_train])])
    window = (pos >= t_star) & (pos <= T)
    bad = window & (curve.value > slack * p_star)
    if np.any(bad):
        return LengthGenVerdict(p_star=p_star, t_star=t_star, generalizes=False,
                                first_violation=int(pos[bad][0]), slack=slack)
    return LengthGenVerdict(p_star=p_star, t_star=t_star, generalizes=True,
                            first_violation=None, slack=slack)


# --- distances ---------------------------------------------------------------------

DISTANCE_KINDS = ("tv", "js", "cosine")


def distance(p: Array, q: Array, kind: str) -> float:
    """TV, Jensen-Shannon distance (base-2 logs, range [0,1]), or cosine distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0):
            raise ValueError(f"{name}: negative probability entry")
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name}: probabilities sum to {v.sum()!r}, not 1")
    if np.array_equal(p, q):
        return 0.0
    if kind == "tv":
        return float(0.5 * np.abs(p - q).sum())
    if kind == "js":
        m = 0.5 * (p + q)
        def kl(a, b):
            sel = a > 0
            return float(np.sum(a[sel] * np.log2(a[sel] / b[sel])))
        jsd = 0.5 * kl(p, m) + 0.5 * kl(q, m)
        return float(np.sqrt(np.clip(jsd, 0.0, 1.0)))
    if kind == "cosine":
        denom = np.sqrt(np.sum(p * p) * np.sum(q * q))
        return float(np.clip(1.0 - np.dot(p, q) / denom, 0.0, 2.0))
    raise ValueError(f"unknown distance kind {kind!r}")


# --- effective remembrance ----------------------------------------------------------


def default_effrem_grid(T: int) -> list[int]:
    """Powers of two plus the endpoints; each point costs one forward pass."""
    grid = {0, T}
    p = 1
    while p < T:
        grid.add(p)
        p *= 2
    return sorted(grid)


def effective_remembrance(logits_fn, sequences: Array, grid: list[int],
                          kinds: tuple[str, ...] = DISTANCE_KINDS) -> EffRemCurve:
    """Distance between next-token distributions given the full context x_{0:T}
    vs. the suffix x_{t:T}, averaged over sequences (rows of `sequences`).

    T is the last index of each row; every suffix is evaluated from the zero
    initial state with one forward pass per grid point.
    """
    if sequences.ndim == 1:
        sequences = sequences[None, :]
    n, width = sequences.shape
    T = width - 1
    grid = sorted(set(int(t) for t in grid))
    if grid[0] < 0 or grid[-1] > T:
        raise ValueError(f"grid must lie within [0, {T}], got {grid[0]}..{grid[-1]}")
    q_full = _softmax(logits_fn(sequences)[:, -1])
    values = {k: np.zeros(len(grid)) for k in kinds}
    for gi, t in enumerate(grid):
        q_suffix = _softmax(logits_fn(sequences[:, t:])[:, -1])
        for k in kinds:
            values[k][gi] = np.mean([distance(q_full[i], q_suffix[i], k)
                                     for i in range(n)])
    return EffRemCurve(grid=np.array(grid), values=values)


# --- state statistics ----------------------------------------------------------------


def state_statistics(params: Parameters, dataset: Array, T_eval: int, stride: int,
                     batch_size: int = 16) -> StateStatsCurve:
    """State norm and per-(layer, head) entry std at sampled positions.

    Sampled positions are stride-1, 2*stride-1, ...; the underlying states are
    computed with the model's canonical chunking, so curves taken at different
    strides agree exactly at shared positions. Norms/stds are per sequence,
    then averaged over the dataset.
    """
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty [n, T] token array")
    if dataset.shape[1] < T_eval:
        raise ValueError(f"dataset rows have {dataset.shape[1]} tokens; need >= {T_eval}")
    positions = list(range(stride - 1, T_eval, stride))
    cfg = params.config
    n = dataset.shape[0]
    n_pos = len(positions)
    norm_acc = np.zeros(n_pos, dtype=np.float64)
    std_acc = np.zeros((cfg.n_layers, cfg.n_heads, n_pos), dtype=np.float64)
    for lo in range(0, n, batch_size):
        rows = dataset[lo:lo + batch_size, :T_eval]
        per_layer = forward_states(params, rows, positions)
        sq_sum = np.zeros((rows.shape[0], n_pos), dtype=np.float64)
        for li, H in enumerate(per_layer):  # H: [b, n_pos, heads, P, N]
            H64 = H.astype(np.float64)
            sq_sum += (H64 ** 2).sum(axis=(2, 3, 4))
            std_acc[li] += H64.std(axis=(3, 4)).sum(axis=0).T
        norm_acc += np.sqrt(sq_sum).sum(axis=0)
    return StateStatsCurve(
        positions=np.array(positions),
        global_norm=norm_acc / n,
        per_layer_head_std=std_acc / n,
    )


# --- CSV emission ----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_position_curve_csv(path: str | Path, curve: PositionCurve) -> None:
    with open(path, "w") as f:
        f.write("position,perplexity,count\n")
        for p, v, c in zip(curve.positions, curve.value, curve.counts):
            f.write(f"{int(p)},{_fmt(v)},{int(c)}\n")


def write_effrem_csv(path: str | Path, curve: EffRemCurve) -> None:
    kinds = [k for k in DISTANCE_KINDS if k in curve.values]
    with open(path, "w") as f:
        f.write("t," + ",".join(kinds) + "\n")
        for i, t in enumerate(curve.grid):
            f.write(f"{int(t)}," + ",".join(_fmt(curve.values[k][i]) for k in kinds) + "\n")


def write_statestats_csv(path: str | Path, curve: StateStatsCurve) -> None:
    n_layers, n_heads, _ = curve.per_layer_head_std.shape
    cols = [f"std_l{l}_h{h}" for l in range(n_layers) for h in range(n_heads)]
    with open(path, "w") as f:
        f.write("position,global_norm," + ",".join(cols) + "\n")
        for i, p in enumerate(curve.positions):
            stds = curve.per_layer_head_std[:, :, i].reshape(-1)
            f.write(f"{int(p)},{_fmt(curve.global_norm[i])},"
                    + ",".join(_fmt(s) for s in stds) + "\n")
