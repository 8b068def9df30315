# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for NCHW double-precision convolution.

Loop orders match ``_fallback`` so both backends produce bit-identical sums.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    """Unfold a padded input into a (N*Ho*Wo, C*k*k) patch matrix."""
    cdef Py_ssize_t n_img = xp.shape[0], chans = xp.shape[1]
    cdef Py_ssize_t kk = k * k
    cdef Py_ssize_t row_len = chans * kk
    out_arr = np.empty((n_img * ho * wo, row_len), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, i, j, c, u, v, row, base, hi, wj
    for n in range(n_img):
        for i in range(ho):
            hi = i * stride
            for j in range(wo):
                wj = j * stride
                row = (n * ho + i) * wo + j
                for c in range(chans):
                    base = c * kk
                    for u in range(k):
                        for v in range(k):
                            out[row, base + u * k + v] = xp[n, c, hi + u, wj + v]
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n_img, Py_ssize_t chans,
           Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    """Scatter-add a patch-matrix gradient back onto the padded input grid.

    Written as a gather per padded pixel, accumulating in ascending (u, v)
    order; results land channel-last and are transposed to NCHW at the end.
    """
    acc_arr = np.zeros((n_img, hp, wp, chans), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t kk = k * k
    cdef Py_ssize_t n, c, u, v, y, x, iy, jx, row, off
    for n in range(n_img):
        for y in range(hp):
            for x in range(wp):
                for u in range(k):
                    iy = y - u
                    if iy < 0 or iy % stride != 0 or iy // stride >= ho:
                        continue
                    for v in range(k):
                        jx = x - v
                        if jx < 0 or jx % stride != 0 or jx // stride >= wo:
                            continue
                        row = (n * ho + iy // stride) * wo + jx // stride
                        off = u * k + v
                        for c in range(chans):
                            acc[n, y, x, c] += cols[row, c * kk + off]
    return np.ascontiguousarray(acc_arr.transpose(0, 3, 1, 2))
