import numpy as np
import pytest

from statelab.scan import ScanInputs, StateTensor


def random_scan_instance(seed, batch=1, T=4, heads=1, P=2, N=3, dtype=np.float64,
                         a_lo=0.05, a_hi=0.98):
    """Seeded random recurrence instance with decays strictly inside (0, 1)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, T, heads, P)).astype(dtype)
    a = rng.uniform(a_lo, a_hi, size=(batch, T, heads)).astype(dtype)
    B = rng.standard_normal((batch, T, heads, N)).astype(dtype)
    C = rng.standard_normal((batch, T, heads, N)).astype(dtype)
    h = rng.standard_normal((batch, heads, P, N)).astype(dtype)
    return ScanInputs(x=x, a=a, B=B, C=C), StateTensor(h)


def loop_oracle(inputs, h_init):
    """Element-by-element evaluation in extended precision (float80 on x86)."""
    x = inputs.x.astype(np.longdouble)
    a = inputs.a.astype(np.longdouble)
    B = inputs.B.astype(np.longdouble)
    C = inputs.C.astype(np.longdouble)
    batch, T, heads, P = x.shape
    N = B.shape[-1]
    h = h_init.h.astype(np.longdouble).copy()
    y = np.zeros((batch, T, heads, P), dtype=np.longdouble)
    for b in range(batch):
        for t in range(T):
            for hd in range(heads):
                for p in range(P):
                    for n in range(N):
                        h[b, hd, p, n] = (
                            a[b, t, hd] * h[b, hd, p, n]
                            + x[b, t, hd, p] * B[b, t, hd, n]
                        )
                for p in range(P):
                    acc = np.longdouble(0.0)
                    for n in range(N):
                        acc += h[b, hd, p, n] * C[b, t, hd, n]
                    y[b, t, hd, p] = acc
    return y, h


@pytest.fixture
def small_instance():
    return random_scan_instance(seed=7, batch=1, T=4, heads=1, P=2, N=3)
