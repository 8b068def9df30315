"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, ho, wo):
    """Unfold a padded input into a (N*Ho*Wo, C*k*k) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
    """Scatter-add a patch-matrix gradient back onto the padded input grid."""
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    blocks = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for u in range(k):
        for v in range(k):
            out[:, :, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride] += blocks[
                :, :, u, v
            ]
    return out
