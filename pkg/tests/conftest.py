import sys

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b):
    """Six nested loops, zero padding, same-size output."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    pad = k // 2
    y = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - pad, j + v - pad
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += x[c, ii, jj] * w[o, c, u, v]
                y[o, i, j] = acc
    return y


def shift_conv(x, w, b):
    """Same-size conv as a sum of k*k shifted, padded copies (no im2col)."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    y = np.broadcast_to(np.asarray(b, dtype=float)[:, None, None], (c_out, h, wd)).copy()
    for u in range(k):
        for v in range(k):
            y += np.einsum("oc,chw->ohw", w[:, :, u, v], xp[:, u:u + h, v:v + wd])
    return y


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
