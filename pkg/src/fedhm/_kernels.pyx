# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im gather-scatter loops.

Accumulation order in ``col2im`` matches the numpy fallback (kernel offset
outermost) so both backends are bit-identical.
"""

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] xp, int kh, int kw, int sh, int sw,
           real[:, :, :, :, :, ::1] out):
    cdef Py_ssize_t B = out.shape[0], Ho = out.shape[1], Wo = out.shape[2]
    cdef Py_ssize_t C = out.shape[3]
    cdef Py_ssize_t b, i, j, c, ky, kx, row
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        for ky in range(kh):
                            row = i * sh + ky
                            for kx in range(kw):
                                out[b, i, j, c, ky, kx] = xp[b, c, row, j * sw + kx]


def col2im(const real[:, :, :, :, :, ::1] cols, int sh, int sw,
           real[:, :, :, ::1] dxp):
    cdef Py_ssize_t B = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    cdef Py_ssize_t C = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    cdef Py_ssize_t b, i, j, c, ky, kx
    with nogil:
        for ky in range(kh):
            for kx in range(kw):
                for b in range(B):
                    for c in range(C):
                        for i in range(Ho):
                            for j in range(Wo):
                                dxp[b, c, i * sh + ky, j * sw + kx] += cols[b, i, j, c, ky, kx]
