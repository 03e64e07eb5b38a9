"""Pure numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np


def trilinear_sample(volume, coords, fill=0.0):
    volume = np.asarray(volume)
    coords = np.asarray(coords, dtype=np.float64)
    nx, ny, nz = volume.shape
    out = np.full(coords.shape[0], fill, dtype=np.float64)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    inside = (
        (x >= 0) & (y >= 0) & (z >= 0) & (x <= nx - 1) & (y <= ny - 1) & (z <= nz - 1)
    )
    if not inside.any():
        return out
    x, y, z = x[inside], y[inside], z[inside]
    i0 = np.minimum(np.floor(x).astype(np.intp), nx - 2)
    j0 = np.minimum(np.floor(y).astype(np.intp), ny - 2)
    k0 = np.minimum(np.floor(z).astype(np.intp), nz - 2)
    fx, fy, fz = x - i0, y - j0, z - k0
    v = volume.astype(np.float64, copy=False)

    def lerp_x(j, k):
        return v[i0, j, k] * (1.0 - fx) + v[i0 + 1, j, k] * fx

    c00 = lerp_x(j0, k0)
    c01 = lerp_x(j0, k0 + 1)
    c10 = lerp_x(j0 + 1, k0)
    c11 = lerp_x(j0 + 1, k0 + 1)
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    out[inside] = c0 * (1.0 - fz) + c1 * fz
    return out


def hough_center_votes(rows, cols, grad_rows, grad_cols, r_min, r_max, height, width,
                       both_directions=True):
    acc = np.zeros((height, width), dtype=np.int32)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.size == 0:
        return acc
    radii = np.arange(r_min, r_max + 1, dtype=np.float64)[None, :]
    signs = (1.0, -1.0) if both_directions else (1.0,)
    for s in signs:
        vr = np.floor(rows[:, None] + s * radii * np.asarray(grad_rows)[:, None] + 0.5)
        vc = np.floor(cols[:, None] + s * radii * np.asarray(grad_cols)[:, None] + 0.5)
        vr = vr.astype(np.intp).ravel()
        vc = vc.astype(np.intp).ravel()
        ok = (vr >= 0) & (vr < height) & (vc >= 0) & (vc < width)
        np.add.at(acc, (vr[ok], vc[ok]), 1)
    return acc
