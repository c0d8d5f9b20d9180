"""Pure-numpy im2col / col2im used when the compiled kernels are unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw, out):
    _, Ho, Wo = out.shape[:3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * sh + 1 : sh, : (Wo - 1) * sw + 1 : sw]
    out[...] = win.transpose(0, 2, 3, 1, 4, 5)


def col2im(cols, sh, sw, dxp):
    _, Ho, Wo, _, kh, kw = cols.shape
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky : ky + (Ho - 1) * sh + 1 : sh, kx : kx + (Wo - 1) * sw + 1 : sw] += (
                cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
