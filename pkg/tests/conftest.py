import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def conv2d_loops(x, w, b, dilation, padding):
    """Direct quadruple-loop cross-correlation used as an oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = h + 2 * padding - dilation * (k - 1)
    wo = wd + 2 * padding - dilation * (k - 1)
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for x_ in range(wo):
                    acc = 0.0 if b is None else b[oi]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += w[oi, ci, i, j] * xp[ni, ci, y + i * dilation, x_ + j * dilation]
                    out[ni, oi, y, x_] = acc
    return out
