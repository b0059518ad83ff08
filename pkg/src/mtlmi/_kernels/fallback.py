"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable.

Both functions loop only over the (small) kernel window; the heavy axes are
handled by strided slicing, so this fallback is usable, just slower than the
compiled core on large batches.
"""

import numpy as np

BACKEND = "numpy"


def im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unfold a padded NCHW batch into (N, C*kh*kw, out_h*out_w) columns."""
    n, c, hp, wp = padded.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i : i + oh * stride : stride,
                                      j : j + ow * stride : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
           kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add columns back into a padded NCHW gradient (inverse of im2col)."""
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh * stride : stride,
                j : j + ow * stride : stride] += cols6[:, :, i, j]
    return out
