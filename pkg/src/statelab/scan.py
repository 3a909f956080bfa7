"""Diagonal linear recurrence: exact forward, chunked, and backward evaluation.

The recurrence, per batch element and head, with per-step scalar decay:

    h_t = a_t * h_{t-1} + x_t B_t^T      state h_t: [P, N]  (outer-product update)
    y_t = h_t C_t                        output y_t: [P]    (contraction over N)

`scan_sequential` is the reference step-by-step evaluation. `scan_chunked`
splits time into chunks; inside a chunk the solution is written in closed form
with log-space cumulative decay products (so long chunks neither overflow nor
produce NaNs), and the carried state enters through `initial_state_contribution`,
which is exact by linearity of the recurrence in h_init.

All functions are pure and compute in the dtype of their inputs: float64 for
tests, float32 on the training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CHUNK_LEN = 64

Array = np.ndarray


class ShapeError(ValueError):
    """Array extents inconsistent with the recurrence contract."""


class NonFiniteError(FloatingPointError):
    """A produced array contains NaN or Inf."""


@dataclass
class ScanInputs:
    """Per-step drive of the recurrence.

    x: [batch, T, heads, P]   input sequence per head
    a: [batch, T, heads]      scalar decay per head, in (0, 1]
    B: [batch, T, heads, N]   input projection
    C: [batch, T, heads, N]   output projection
    """

    x: Array
    a: Array
    B: Array
    C: Array

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        batch, T, heads, P = self.x.shape
        N = self.B.shape[-1]
        return batch, T, heads, P, N


@dataclass
class StateTensor:
    """Recurrent state h: [batch, heads, P, N]."""

    h: Array

    @staticmethod
    def zeros(batch: int, heads: int, P: int, N: int, dtype=np.float64) -> "StateTensor":
        return StateTensor(np.zeros((batch, heads, P, N), dtype=dtype))


@dataclass
class ScanOutput:
    y: Array  # [batch, T, heads, P]
    final_state: StateTensor


@dataclass
class ScanGradients:
    d_x: Array
    d_a: Array
    d_B: Array
    d_C: Array
    d_h_init: StateTensor


def _expect(name: str, axis: int, expected: int, actual: int) -> None:
    if expected != actual:
        raise ShapeError(f"{name}: axis {axis} expected extent {expected}, got {actual}")


def validate_inputs(inputs: ScanInputs, h_init: StateTensor) -> None:
    x, a, B, C = inputs.x, inputs.a, inputs.B, inputs.C
    if x.ndim != 4:
        raise ShapeError(f"x: expected 4 axes [batch, T, heads, P], got {x.ndim}")
    if a.ndim != 3:
        raise ShapeError(f"a: expected 3 axes [batch, T, heads], got {a.ndim}")
    batch, T, heads, P = x.shape
    if T < 1:
        raise ShapeError(f"x: axis 1 (T) must be >= 1, got {T}")
    for name, arr in (("a", a), ("B", B), ("C", C)):
        _expect(name, 0, batch, arr.shape[0])
        _expect(name, 1, T, arr.shape[1])
        _expect(name, 2, heads, arr.shape[2])
    if B.ndim != 4 or C.ndim != 4:
        raise ShapeError("B, C: expected 4 axes [batch, T, heads, N]")
    N = B.shape[3]
    _expect("C", 3, N, C.shape[3])
    h = h_init.h
    if h.shape != (batch, heads, P, N):
        raise ShapeError(
            f"h_init: expected shape {(batch, heads, P, N)}, got {h.shape}"
        )
    amin, amax = float(a.min()), float(a.max())
    if amin <= 0.0 or amax > 1.0:
        raise ValueError(f"a: decays must lie in (0, 1], found range [{amin}, {amax}]")


def _check_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise NonFiniteError(f"{name}: non-finite value at index {idx}")


def scan_sequential(inputs: ScanInputs, h_init: StateTensor) -> ScanOutput:
    """Step-by-step reference evaluation of the recurrence."""
    validate_inputs(inputs, h_init)
    x, a, B, C = inputs.x, inputs.a, inputs.B, inputs.C
    batch, T, heads, P, N = inputs.dims
    h = h_init.h.copy()
    y = np.empty((batch, T, heads, P), dtype=x.dtype)
    for t in range(T):
        h = a[:, t, :, None, None] * h + x[:, t, :, :, None] * B[:, t, :, None, :]
        y[:, t] = (h * C[:, t, :, None, :]).sum(axis=-1)
    return ScanOutput(y=y, final_state=StateTensor(h))


# --- chunk-local closed forms -------------------------------------------------
#
# Within a chunk of length L, with cum[t] = sum_{r<=t} log a_r:
#   ratio(t, s) = prod_{r=s+1..t} a_r = exp(cum[t] - cum[s])   (t >= s)
#   h_t = exp(cum[t]) h_in + sum_{s<=t} ratio(t, s) x_s B_s^T
#   y_t = C_t . h_t
# Masked entries are set to -inf *before* exp so the dead triangle is exactly 0
# and never overflows.


def _cumlog(a_chunk: Array) -> Array:
    # a_chunk: [b, L, h] -> cum: [b, h, L]
    la = np.log(a_chunk.transpose(0, 2, 1))
    return np.cumsum(la, axis=-1)


def _ratio_lower(cum: Array) -> Array:
    # R[b, h, t, s] = exp(cum[t] - cum[s]) for t >= s, else 0
    d = cum[:, :, :, None] - cum[:, :, None, :]
    L = cum.shape[-1]
    d = np.where(np.tril(np.ones((L, L), dtype=bool)), d, -np.inf)
    return np.exp(d)


def _ratio_upper(cum: Array) -> Array:
    # M[b, h, t, s] = exp(cum[s] - cum[t]) for s >= t, else 0
    d = cum[:, :, None, :] - cum[:, :, :, None]
    L = cum.shape[-1]
    d = np.where(np.triu(np.ones((L, L), dtype=bool)), d, -np.inf)
    return np.exp(d)


def _chunk_outputs(x, a, B, C, h_in, cum) -> Array:
    """y for one chunk given the entering state. All args chunk-local."""
    R = _ratio_lower(cum)
    G = np.einsum("bthn,bshn->bhts", C, B, optimize=True) * R
    y = np.einsum("bhts,bshp->bthp", G, x, optimize=True)
    p = np.exp(cum)  # [b, h, t]: prod_{0..t}
    y += np.einsum("bht,bhpn,bthn->bthp", p, h_in, C, optimize=True)
    return y


def _chunk_final_state(x, B, h_in, cum) -> Array:
    w_end = np.exp(cum[:, :, -1:] - cum)  # [b, h, s]: prod_{s+1..L-1}
    state = np.einsum("bhs,bshp,bshn->bhpn", w_end, x, B, optimize=True)
    p_all = np.exp(cum[:, :, -1])
    return state + p_all[:, :, None, None] * h_in


def _chunk_all_states(x, B, h_in, cum) -> Array:
    """States h_t for every position of one chunk: [b, L, h, P, N]."""
    b, L, h, P = x.shape
    N = B.shape[-1]
    R = _ratio_lower(cum)  # [b, h, L, L]
    U = x[:, :, :, :, None] * B[:, :, :, None, :]  # [b, L, h, P, N]
    U = U.transpose(0, 2, 1, 3, 4).reshape(b, h, L, P * N)
    H = R @ U  # [b, h, L, P*N]
    H += np.exp(cum)[:, :, :, None] * h_in.reshape(b, h, 1, P * N)
    return H.reshape(b, h, L, P, N).transpose(0, 2, 1, 3, 4)


def initial_state_contribution(
    a: Array, C: Array, h_init: StateTensor
) -> tuple[Array, StateTensor]:
    """Additive contribution of a non-zero initial state.

    Returns (y_contrib, state_contrib) with
        y_contrib[t] = C_t . (prod_{s<=t} a_s) h_init
        state_contrib = (prod_{s<T} a_s) h_init
    so that scan(inputs, h_init) = scan(inputs, 0) + this contribution.
    """
    if a.ndim != 3:
        raise ShapeError(f"a: expected 3 axes [batch, T, heads], got {a.ndim}")
    batch, T, heads = a.shape
    _expect("C", 0, batch, C.shape[0])
    _expect("C", 1, T, C.shape[1])
    _expect("C", 2, heads, C.shape[2])
    h = h_init.h
    if h.ndim != 4 or h.shape[0] != batch or h.shape[1] != heads or h.shape[3] != C.shape[3]:
        raise ShapeError(
            f"h_init: expected shape ({batch}, {heads}, P, {C.shape[3]}), got {h.shape}"
        )
    cum = _cumlog(a)
    p = np.exp(cum)  # [b, h, t]
    y_contrib = np.einsum("bht,bhpn,bthn->bthp", p, h, C, optimize=True)
    state_contrib = p[:, :, -1][:, :, None, None] * h
    return y_contrib, StateTensor(state_contrib)


def scan_chunked(
    inputs: ScanInputs, h_init: StateTensor, chunk_len: int = DEFAULT_CHUNK_LEN
) -> ScanOutput:
    """Chunked evaluation; agrees with scan_sequential for every chunk_len."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    validate_inputs(inputs, h_init)
    x, a, B, C = inputs.x, inputs.a, inputs.B, inputs.C
    batch, T, heads, P, N = inputs.dims
    y = np.empty((batch, T, heads, P), dtype=x.dtype)
    h = h_init.h
    for t0 in range(0, T, chunk_len):
        t1 = min(t0 + chunk_len, T)
        sl = slice(t0, t1)
        cum = _cumlog(a[:, sl])
        y[:, sl] = _chunk_outputs(x[:, sl], a[:, sl], B[:, sl], C[:, sl], h, cum)
        h = _chunk_final_state(x[:, sl], B[:, sl], h, cum)
    return ScanOutput(y=y, final_state=StateTensor(h))


def chunk_boundary_states(
    inputs: ScanInputs, h_init: StateTensor, chunk_len: int = DEFAULT_CHUNK_LEN
) -> list[Array]:
    """State entering each chunk: element k is h before chunk k (k=0 -> h_init)."""
    x, a, B = inputs.x, inputs.a, inputs.B
    T = x.shape[1]
    h = h_init.h
    boundaries = [h]
    for t0 in range(0, T, chunk_len):
        t1 = min(t0 + chunk_len, T)
        sl = slice(t0, t1)
        cum = _cumlog(a[:, sl])
        h = _chunk_final_state(x[:, sl], B[:, sl], h, cum)
        boundaries.append(h)
    return boundaries


def collect_states(
    inputs: ScanInputs,
    h_init: StateTensor,
    positions: list[int],
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> Array:
    """States h_t at the requested positions: [batch, len(positions), heads, P, N].

    Always computed with the same internal chunking, so the values at a given
    position do not depend on which positions are sampled.
    """
    validate_inputs(inputs, h_init)
    x, a, B = inputs.x, inputs.a, inputs.B
    batch, T, heads, P, N = inputs.dims
    wanted = sorted(set(int(t) for t in positions))
    if wanted and (wanted[0] < 0 or wanted[-1] >= T):
        raise ShapeError(f"positions must lie in [0, {T}), got {wanted[0]}..{wanted[-1]}")
    out = np.empty((batch, len(wanted), heads, P, N), dtype=x.dtype)
    order = {t: i for i, t in enumerate(wanted)}
    h = h_init.h
    for t0 in range(0, T, chunk_len):
        t1 = min(t0 + chunk_len, T)
        sl = slice(t0, t1)
        cum = _cumlog(a[:, sl])
        hits = [t for t in wanted if t0 <= t < t1]
        if hits:
            H = _chunk_all_states(x[:, sl], B[:, sl], h, cum)
            for t in hits:
                out[:, order[t]] = H[:, t - t0]
        h = _chunk_final_state(x[:, sl], B[:, sl], h, cum)
    result_order = [order[int(t)] for t in positions]
    return out[:, result_order]


def scan_backward(
    inputs: ScanInputs,
    h_init: StateTensor,
    grad_y: Array,
    grad_final_state: StateTensor,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> ScanGradients:
    """Exact adjoint of the recurrence.

    Gradients of <grad_y, y> + <grad_final_state, h_{T-1}> with respect to
    every input including h_init. The adjoint state lambda_t = dL/dh_t obeys
    the reversed recurrence

        lambda_t = g_t C_t^T + a_{t+1} lambda_{t+1}

    which is evaluated chunk by chunk with the same closed forms as the
    forward pass (transposed decay-ratio matrix).
    """
    validate_inputs(inputs, h_init)
    x, a, B, C = inputs.x, inputs.a, inputs.B, inputs.C
    batch, T, heads, P, N = inputs.dims
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y: expected shape {x.shape}, got {grad_y.shape}")
    if grad_final_state.h.shape != h_init.h.shape:
        raise ShapeError(
            f"grad_final_state: expected shape {h_init.h.shape}, got {grad_final_state.h.shape}"
        )

    boundaries = chunk_boundary_states(inputs, h_init, chunk_len)
    d_x = np.empty_like(x)
    d_a = np.empty_like(a)
    d_B = np.empty_like(B)
    d_C = np.empty_like(C)

    lam_in = grad_final_state.h  # dL/dh_{last} contribution from beyond the chunk
    starts = list(range(0, T, chunk_len))
    for k in reversed(range(len(starts))):
        t0 = starts[k]
        t1 = min(t0 + chunk_len, T)
        sl = slice(t0, t1)
        L = t1 - t0
        xc, ac, Bc, Cc, gc = x[:, sl], a[:, sl], B[:, sl], C[:, sl], grad_y[:, sl]
        cum = _cumlog(ac)

        # adjoint states for every position of the chunk
        M = _ratio_upper(cum)  # [b, h, t, s] for s >= t
        V = gc[:, :, :, :, None] * Cc[:, :, :, None, :]  # [b, L, h, P, N]
        V = V.transpose(0, 2, 1, 3, 4).reshape(batch, heads, L, P * N)
        Lam = M @ V
        w_end = np.exp(cum[:, :, -1:] - cum)  # ratio(L-1, t)
        Lam += w_end[:, :, :, None] * lam_in.reshape(batch, heads, 1, P * N)
        Lam = Lam.reshape(batch, heads, L, P, N).transpose(0, 2, 1, 3, 4)

        # forward states within the chunk (recomputed from the boundary state)
        H = _chunk_all_states(xc, Bc, boundaries[k], cum)
        H_prev = np.concatenate([boundaries[k][:, None], H[:, :-1]], axis=1)

        d_x[:, sl] = np.einsum("bthpn,bthn->bthp", Lam, Bc, optimize=True)
        d_B[:, sl] = np.einsum("bthpn,bthp->bthn", Lam, xc, optimize=True)
        d_C[:, sl] = np.einsum("bthp,bthpn->bthn", gc, H, optimize=True)
        d_a[:, sl] = np.einsum("bthpn,bthpn->bth", Lam, H_prev, optimize=True)

        # carry dL/dh_{t0-1} = a_{t0} * lambda_{t0} into the previous chunk
        lam_in = ac[:, 0, :, None, None] * Lam[:, 0]

    d_h_init = lam_in
    for name, arr in (("d_x", d_x), ("d_a", d_a), ("d_B", d_B), ("d_C", d_C), ("d_h_init", d_h_init)):
        _check_finite(name, arr)
    return ScanGradients(d_x=d_x, d_a=d_a, d_B=d_B, d_C=d_C, d_h_init=StateTensor(d_h_init))
