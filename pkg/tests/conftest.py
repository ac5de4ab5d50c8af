import numpy as np
import pytest

from mddaformer import tensor as T

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def naive_conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """Six nested loops in float64; slow on purpose."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            g = o // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cg):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, c, ky, kx] * xp[i, g * cg + c, y * stride + ky, xx * stride + kx]
                    out[i, o, y, xx] = acc
    return out


def naive_matmul(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
