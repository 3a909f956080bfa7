"""Residual stack of diagonal-recurrence mixer blocks with an LM head.

Block layout, per layer:

    u  -> rmsnorm -> project to (x, a=sigmoid, B, C) -> scan -> out proj -> + u
       -> rmsnorm -> MLP (4x, gelu) ------------------------------------> + .

Per-layer recurrent states are exposed for injection and extraction: forward
accepts a ModelState and returns the final ModelState, which makes the model
chunk-composable (splitting a sequence anywhere and carrying the state
reproduces full-sequence logits).

Everything is dtype-generic: parameters created as float32 train in single
precision; tests cast to float64 for tight gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import substream
from .scan import (
    DEFAULT_CHUNK_LEN,
    ScanInputs,
    StateTensor,
    collect_states,
    scan_backward,
    scan_chunked,
)

Array = np.ndarray

NORM_EPS = 1e-6
DECAY_CLIP = 15.0  # |preactivation| cap: keeps sigmoid away from exact 0/1 in float32
GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_K = 0.044715


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_state: int
    vocab_size: int
    tie_embeddings: bool = True
    decay_bias_init: float = 3.0

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_state", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, Array]

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            config=replace(self.config),
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
        )

    def copy(self) -> "Parameters":
        return Parameters(
            config=replace(self.config),
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class ModelState:
    """One recurrent state tensor per layer, each [batch, heads, P, N]."""

    layers: list[Array]

    @staticmethod
    def zeros(config: ModelConfig, batch: int, dtype=np.float32) -> "ModelState":
        shape = (batch, config.n_heads, config.d_head, config.d_state)
        return ModelState([np.zeros(shape, dtype=dtype) for _ in range(config.n_layers)])

    def copy(self) -> "ModelState":
        return ModelState([h.copy() for h in self.layers])

    @property
    def batch(self) -> int:
        return self.layers[0].shape[0]


@dataclass
class ForwardOutput:
    logits: Array  # [batch, T, vocab]
    final_states: ModelState


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> Parameters:
    """Deterministic initialization; decay bias set so mean decay ~ sigmoid(bias)."""
    config.validate()
    rng = substream(seed, "init")
    D, H, P, N, V = (config.d_model, config.n_heads, config.d_head,
                     config.d_state, config.vocab_size)

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    t: dict[str, Array] = {}
    t["embed"] = normal((V, D), D)
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        t[f"{pre}.norm1"] = np.ones(D, dtype=dtype)
        t[f"{pre}.wx"] = normal((D, D), D)
        t[f"{pre}.wa"] = normal((D, H), D)
        t[f"{pre}.ba"] = np.full(H, config.decay_bias_init, dtype=dtype)
        t[f"{pre}.wb"] = normal((D, H * N), D)
        t[f"{pre}.wc"] = normal((D, H * N), D)
        t[f"{pre}.wo"] = normal((D, D), D)
        t[f"{pre}.norm2"] = np.ones(D, dtype=dtype)
        t[f"{pre}.w1"] = normal((D, 4 * D), D)
        t[f"{pre}.w2"] = normal((4 * D, D), 4 * D)
    t["norm_f"] = np.ones(D, dtype=dtype)
    if not config.tie_embeddings:
        t["head"] = normal((V, D), D)
    return Parameters(config=config, tensors=t)


def _rmsnorm(u: Array, gain: Array):
    inv = 1.0 / np.sqrt(np.mean(u * u, axis=-1, keepdims=True) + NORM_EPS)
    n = u * inv
    return n * gain, n, inv


def _rmsnorm_backward(d_out: Array, n: Array, inv: Array, gain: Array):
    d_gain = np.einsum("btd,btd->d", d_out, n, optimize=True)
    dg = d_out * gain
    d_u = inv * (dg - n * np.mean(dg * n, axis=-1, keepdims=True))
    return d_u, d_gain


def _gelu(x: Array):
    t = np.tanh(GELU_C * (x + GELU_K * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(d_out: Array, x: Array, t: Array) -> Array:
    du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return d_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_tokens(tokens: Array, vocab_size: int) -> None:
    if tokens.ndim != 2:
        raise ValueError(f"tokens: expected [batch, T], got {tokens.ndim} axes")
    tmin, tmax = int(tokens.min()), int(tokens.max())
    if tmin < 0 or tmax >= vocab_size:
        raise ValueError(
            f"token id out of range [0, {vocab_size}): found {tmin if tmin < 0 else tmax}"
        )


def _forward_internal(
    params: Parameters,
    tokens: Array,
    initial_states: ModelState | None,
    chunk_len: int,
    keep_cache: bool,
):
    cfg = params.config
    t = params.tensors
    _check_tokens(tokens, cfg.vocab_size)
    batch, T = tokens.shape
    D, H, P, N = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_state
    dtype = params.dtype
    if initial_states is None:
        initial_states = ModelState.zeros(cfg, batch, dtype=dtype)
    if len(initial_states.layers) != cfg.n_layers:
        raise ValueError(
            f"initial_states: expected {cfg.n_layers} layers, got {len(initial_states.layers)}"
        )

    u = t["embed"][tokens]  # [b, T, D]
    finals = []
    cache: list[dict] = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        u_in = u
        r1, n1, inv1 = _rmsnorm(u_in, t[f"{pre}.norm1"])
        r1f = r1.reshape(batch * T, D)
        xh = (r1f @ t[f"{pre}.wx"]).reshape(batch, T, H, P)
        z = (r1f @ t[f"{pre}.wa"]).reshape(batch, T, H) + t[f"{pre}.ba"]
        z_in = np.abs(z) < DECAY_CLIP
        a = _sigmoid(np.clip(z, -DECAY_CLIP, DECAY_CLIP))
        Bm = (r1f @ t[f"{pre}.wb"]).reshape(batch, T, H, N)
        Cm = (r1f @ t[f"{pre}.wc"]).reshape(batch, T, H, N)
        inputs = ScanInputs(x=xh, a=a, B=Bm, C=Cm)
        h0 = StateTensor(initial_states.layers[i].astype(dtype, copy=False))
        out = scan_chunked(inputs, h0, chunk_len=chunk_len)
        finals.append(out.final_state.h)
        y = out.y.reshape(batch, T, D)
        u_mid = u_in + (y.reshape(batch * T, D) @ t[f"{pre}.wo"]).reshape(batch, T, D)
        r2, n2, inv2 = _rmsnorm(u_mid, t[f"{pre}.norm2"])
        hpre = r2.reshape(batch * T, D) @ t[f"{pre}.w1"]
        hact, tanh_c = _gelu(hpre)
        u = u_mid + (hact @ t[f"{pre}.w2"]).reshape(batch, T, D)
        if keep_cache:
            cache.append(dict(n1=n1, inv1=inv1, r1=r1, a=a, z_in=z_in,
                              scan_inputs=inputs, h0=h0, y=y,
                              n2=n2, inv2=inv2, r2=r2, hpre=hpre, hact=hact,
                              tanh_c=tanh_c, u_mid=u_mid))
    rf, nf, invf = _rmsnorm(u, t["norm_f"])
    head = t["embed"] if cfg.tie_embeddings else t["head"]
    logits = (rf.reshape(batch * T, D) @ head.T).reshape(batch, T, cfg.vocab_size)
    top = dict(nf=nf, invf=invf, rf=rf, layers=cache) if keep_cache else None
    return logits, ModelState(finals), top


def forward(
    params: Parameters,
    tokens: Array,
    initial_states: ModelState | None = None,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> ForwardOutput:
    logits, finals, _ = _forward_internal(params, tokens, initial_states, chunk_len, False)
    return ForwardOutput(logits=logits, final_states=finals)


def cross_entropy(logits: Array, targets: Array, loss_mask: Array):
    """Masked mean cross-entropy; returns (loss, d_logits)."""
    mask = loss_mask.astype(bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss_mask has no true entries")
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    Z = ex.sum(axis=-1, keepdims=True)
    logZ = np.log(Z) + m
    b_idx, t_idx = np.nonzero(mask)
    tgt = targets[b_idx, t_idx]
    nll = logZ[b_idx, t_idx, 0] - logits[b_idx, t_idx, tgt]
    loss = float(nll.sum() / count)
    d_logits = np.zeros_like(logits)
    d_logits[b_idx, t_idx] = ex[b_idx, t_idx] / Z[b_idx, t_idx]
    d_logits[b_idx, t_idx, tgt] -= 1.0
    d_logits /= count
    return loss, d_logits


def loss_and_grad(
    params: Parameters,
    tokens: Array,
    targets: Array,
    loss_mask: Array,
    initial_states: ModelState | None = None,
    chunk_len: int = DEFAULT_CHUNK_LEN,
):
    """Masked-mean cross-entropy loss, parameter gradients, detached final states.

    Initial states are treated as constants: no gradient flows into them
    (the truncated-backpropagation / state-passing contract).
    """
    cfg = params.config
    t = params.tensors
    logits, finals, cache = _forward_internal(params, tokens, initial_states, chunk_len, True)
    loss, d_logits = cross_entropy(logits, targets, loss_mask)

    batch, T = tokens.shape
    D, H, P, N, V = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_state, cfg.vocab_size
    grads: dict[str, Array] = {k: np.zeros_like(v) for k, v in t.items()}

    head = t["embed"] if cfg.tie_embeddings else t["head"]
    dl = d_logits.reshape(batch * T, V)
    rf2 = cache["rf"].reshape(batch * T, D)
    d_head = dl.T @ rf2
    d_rf = (dl @ head).reshape(batch, T, D)
    if cfg.tie_embeddings:
        grads["embed"] += d_head
    else:
        grads["head"] += d_head

    d_u, d_gf = _rmsnorm_backward(d_rf, cache["nf"], cache["invf"], t["norm_f"])
    grads["norm_f"] += d_gf

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}"
        c = cache["layers"][i]
        # MLP half: u = u_mid + gelu(r2 @ w1) @ w2
        d_m = d_u.reshape(batch * T, D)
        grads[f"{pre}.w2"] += c["hact"].T @ d_m
        d_hact = d_m @ t[f"{pre}.w2"].T
        d_hpre = _gelu_backward(d_hact, c["hpre"], c["tanh_c"])
        grads[f"{pre}.w1"] += c["r2"].reshape(batch * T, D).T @ d_hpre
        d_r2 = (d_hpre @ t[f"{pre}.w1"].T).reshape(batch, T, D)
        d_u_mid, d_g2 = _rmsnorm_backward(d_r2, c["n2"], c["inv2"], t[f"{pre}.norm2"])
        grads[f"{pre}.norm2"] += d_g2
        d_u_mid = d_u_mid + d_u  # residual branch

        # mixer half: u_mid = u_in + scan(...).y @ wo
        d_o = d_u_mid.reshape(batch * T, D)
        grads[f"{pre}.wo"] += c["y"].reshape(batch * T, D).T @ d_o
        d_y = (d_o @ t[f"{pre}.wo"].T).reshape(batch, T, H, P)
        zero_final = StateTensor(np.zeros_like(c["h0"].h))
        sg = scan_backward(c["scan_inputs"], c["h0"], d_y, zero_final, chunk_len=chunk_len)
        # d_h_init is discarded: initial states are constants under this loss.
        a = c["a"]
        d_z = sg.d_a * a * (1.0 - a) * c["z_in"]
        r1f = c["r1"].reshape(batch * T, D)
        d_xf = sg.d_x.reshape(batch * T, H * P)
        d_zf = d_z.reshape(batch * T, H)
        d_Bf = sg.d_B.reshape(batch * T, H * N)
        d_Cf = sg.d_C.reshape(batch * T, H * N)
        grads[f"{pre}.wx"] += r1f.T @ d_xf
        grads[f"{pre}.wa"] += r1f.T @ d_zf
        grads[f"{pre}.ba"] += d_zf.sum(axis=0)
        grads[f"{pre}.wb"] += r1f.T @ d_Bf
        grads[f"{pre}.wc"] += r1f.T @ d_Cf
        d_r1 = (d_xf @ t[f"{pre}.wx"].T + d_zf @ t[f"{pre}.wa"].T
                + d_Bf @ t[f"{pre}.wb"].T + d_Cf @ t[f"{pre}.wc"].T).reshape(batch, T, D)
        d_u_in, d_g1 = _rmsnorm_backward(d_r1, c["n1"], c["inv1"], t[f"{pre}.norm1"])
        grads[f"{pre}.norm1"] += d_g1
        d_u = d_u_in + d_u_mid  # residual branch

    np.add.at(grads["embed"], tokens.reshape(-1), d_u.reshape(batch * T, D))
    return loss, grads, ModelState([f.copy() for f in finals.layers])


def forward_states(
    params: Parameters,
    tokens: Array,
    positions: list[int],
    initial_states: ModelState | None = None,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> list[Array]:
    """Per-layer recurrent states at the given positions.

    Returns a list over layers of [batch, len(positions), heads, P, N].
    State computation uses the model's canonical chunking, so sampled values
    are independent of which positions are requested.
    """
    cfg = params.config
    t = params.tensors
    _check_tokens(tokens, cfg.vocab_size)
    batch, T = tokens.shape
    D, H, P, N = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_state
    dtype = params.dtype
    if initial_states is None:
        initial_states = ModelState.zeros(cfg, batch, dtype=dtype)
    u = t["embed"][tokens]
    per_layer = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        r1, _, _ = _rmsnorm(u, t[f"{pre}.norm1"])
        r1f = r1.reshape(batch * T, D)
        xh = (r1f @ t[f"{pre}.wx"]).reshape(batch, T, H, P)
        z = (r1f @ t[f"{pre}.wa"]).reshape(batch, T, H) + t[f"{pre}.ba"]
        a = _sigmoid(np.clip(z, -DECAY_CLIP, DECAY_CLIP))
        Bm = (r1f @ t[f"{pre}.wb"]).reshape(batch, T, H, N)
        Cm = (r1f @ t[f"{pre}.wc"]).reshape(batch, T, H, N)
        inputs = ScanInputs(x=xh, a=a, B=Bm, C=Cm)
        h0 = StateTensor(initial_states.layers[i].astype(dtype, copy=False))
        per_layer.append(collect_states(inputs, h0, positions, chunk_len=chunk_len))
        out = scan_chunked(inputs, h0, chunk_len=chunk_len)
        y = out.y.reshape(batch, T, D)
        u_mid = u + (y.reshape(batch * T, D) @ t[f"{pre}.wo"]).reshape(batch, T, D)
        r2, _, _ = _rmsnorm(u_mid, t[f"{pre}.norm2"])
        hpre = r2.reshape(batch * T, D) @ t[f"{pre}.w1"]
        hact, _ = _gelu(hpre)
        u = u_mid + (hact @ t[f"{pre}.w2"]).reshape(batch, T, D)
    return per_layer


def make_logits_fn(params: Parameters, chunk_len: int = DEFAULT_CHUNK_LEN):
    """Stateless full-sequence adapter used by the metrics stack."""

    def logits_fn(tokens: Array) -> Array:
        return forward(params, tokens, chunk_len=chunk_len).logits

    return logits_fn


def make_step_fn(params: Parameters, chunk_len: int = DEFAULT_CHUNK_LEN):
    """Stateful adapter: step(tokens, state) -> (logits, new_state)."""

    def step_fn(tokens: Array, state: ModelState | None):
        out = forward(params, tokens, initial_states=state, chunk_len=chunk_len)
        return out.logits, out.final_states

    return step_fn
