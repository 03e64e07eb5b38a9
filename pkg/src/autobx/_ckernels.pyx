# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: volume slicing and circle Hough voting."""

import numpy as np

from libc.math cimport floor


def trilinear_sample(const unsigned char[:, :, ::1] volume,
                     const double[:, ::1] coords,
                     double fill=0.0):
    """Sample ``volume`` at fractional voxel indices ``coords`` (N x 3).

    Points outside ``[0, n - 1]`` on any axis get ``fill``.
    """
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t nx = volume.shape[0], ny = volume.shape[1], nz = volume.shape[2]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    cdef Py_ssize_t p, i0, j0, k0
    cdef double x, y, z, fx, fy, fz, c00, c01, c10, c11, c0, c1
    for p in range(n):
        x = coords[p, 0]
        y = coords[p, 1]
        z = coords[p, 2]
        if not (x >= 0.0 and y >= 0.0 and z >= 0.0
                and x <= nx - 1 and y <= ny - 1 and z <= nz - 1):
            res[p] = fill
            continue
        i0 = <Py_ssize_t>floor(x)
        j0 = <Py_ssize_t>floor(y)
        k0 = <Py_ssize_t>floor(z)
        if i0 >= nx - 1:
            i0 = nx - 2
        if j0 >= ny - 1:
            j0 = ny - 2
        if k0 >= nz - 1:
            k0 = nz - 2
        fx = x - i0
        fy = y - j0
        fz = z - k0
        c00 = volume[i0, j0, k0] * (1.0 - fx) + volume[i0 + 1, j0, k0] * fx
        c01 = volume[i0, j0, k0 + 1] * (1.0 - fx) + volume[i0 + 1, j0, k0 + 1] * fx
        c10 = volume[i0, j0 + 1, k0] * (1.0 - fx) + volume[i0 + 1, j0 + 1, k0] * fx
        c11 = volume[i0, j0 + 1, k0 + 1] * (1.0 - fx) + volume[i0 + 1, j0 + 1, k0 + 1] * fx
        c0 = c00 * (1.0 - fy) + c10 * fy
        c1 = c01 * (1.0 - fy) + c11 * fy
        res[p] = c0 * (1.0 - fz) + c1 * fz
    return out


def hough_center_votes(const double[::1] rows, const double[::1] cols,
                       const double[::1] grad_rows, const double[::1] grad_cols,
                       long r_min, long r_max, long height, long width,
                       bint both_directions=True):
    """Accumulate circle-centre votes along each edge pixel's gradient.

    Every edge pixel votes once per integer radius in ``[r_min, r_max]`` at
    ``pixel + r * gradient`` (and ``pixel - r * gradient`` when
    ``both_directions``). Gradients must be unit length.
    """
    acc = np.zeros((height, width), dtype=np.int32)
    cdef int[:, ::1] a = acc
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t e
    cdef long r, vr, vc
    cdef double gr, gc, pr, pc
    for e in range(n):
        pr = rows[e]
        pc = cols[e]
        gr = grad_rows[e]
        gc = grad_cols[e]
        for r in range(r_min, r_max + 1):
            vr = <long>floor(pr + r * gr + 0.5)
            vc = <long>floor(pc + r * gc + 0.5)
            if 0 <= vr < height and 0 <= vc < width:
                a[vr, vc] += 1
            if both_directions:
                vr = <long>floor(pr - r * gr + 0.5)
                vc = <long>floor(pc - r * gc + 0.5)
                if 0 <= vr < height and 0 <= vc < width:
                    a[vr, vc] += 1
    return acc
