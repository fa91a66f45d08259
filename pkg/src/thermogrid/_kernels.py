"""Numba ray-marching kernels for batched forward and backward rendering.

Both kernels march rays identically: uniform samples at
``t_near + (k + 0.5) * step`` with ``delta = step``, or a single midpoint
sample with ``delta = t_far - t_near`` when the interval is shorter than
one step. Cells whose 8 corner densities are all zero are skipped when
``skip_empty`` is set.
"""

import math

import numpy as np
from numba import config, njit, prange

# TBB in this environment is too old for numba; prefer OpenMP, then workqueue
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2_0 = 1.0925484305920792
SH_C2_1 = -1.0925484305920792
SH_C2_2 = 0.31539156525252005
SH_C2_3 = -1.0925484305920792
SH_C2_4 = 0.5462742152960396


@njit(cache=True, inline="always")
def _sh_basis(dx, dy, dz, out):
    out[0] = SH_C0
    out[1] = -SH_C1 * dy
    out[2] = SH_C1 * dz
    out[3] = -SH_C1 * dx
    out[4] = SH_C2_0 * dx * dy
    out[5] = SH_C2_1 * dy * dz
    out[6] = SH_C2_2 * (2.0 * dz * dz - dx * dx - dy * dy)
    out[7] = SH_C2_3 * dx * dz
    out[8] = SH_C2_4 * (dx * dx - dy * dy)


@njit(cache=True, inline="always")
def _stencil(px, py, pz, lo, scale, nx, ny, nz, idx, w):
    gx = min(max((px - lo[0]) * scale[0], 0.0), float(nx))
    gy = min(max((py - lo[1]) * scale[1], 0.0), float(ny))
    gz = min(max((pz - lo[2]) * scale[2], 0.0), float(nz))
    i = min(int(math.floor(gx)), nx - 1)
    j = min(int(math.floor(gy)), ny - 1)
    k = min(int(math.floor(gz)), nz - 1)
    fx = gx - i
    fy = gy - j
    fz = gz - k
    sx = nx + 1
    sxy = (nx + 1) * (ny + 1)
    base = i + sx * j + sxy * k
    idx[0] = base
    idx[1] = base + 1
    idx[2] = base + sx
    idx[3] = base + sx + 1
    idx[4] = base + sxy
    idx[5] = base + sxy + 1
    idx[6] = base + sxy + sx
    idx[7] = base + sxy + sx + 1
    gx0 = 1.0 - fx
    gy0 = 1.0 - fy
    gz0 = 1.0 - fz
    w[0] = gx0 * gy0 * gz0
    w[1] = fx * gy0 * gz0
    w[2] = gx0 * fy * gz0
    w[3] = fx * fy * gz0
    w[4] = gx0 * gy0 * fz
    w[5] = fx * gy0 * fz
    w[6] = gx0 * fy * fz
    w[7] = fx * fy * fz


@njit(cache=True, inline="always")
def _bg_stencil(dx, dy, dz, H, W, tex, tw):
    lon = math.atan2(dy, dx)
    lat = math.acos(min(max(dz, -1.0), 1.0))
    u = (lon + math.pi) / (2.0 * math.pi) * W - 0.5
    v = lat / math.pi * H - 0.5
    u0 = math.floor(u)
    v0 = math.floor(v)
    fu = u - u0
    fv = v - v0
    iu0 = int(u0) % W
    iu1 = (iu0 + 1) % W
    iv0 = min(max(int(v0), 0), H - 1)
    iv1 = min(max(int(v0) + 1, 0), H - 1)
    tex[0] = iv0 * W + iu0
    tex[1] = iv0 * W + iu1
    tex[2] = iv1 * W + iu0
    tex[3] = iv1 * W + iu1
    tw[0] = (1.0 - fu) * (1.0 - fv)
    tw[1] = fu * (1.0 - fv)
    tw[2] = (1.0 - fu) * fv
    tw[3] = fu * fv


@njit(cache=True, inline="always")
def _n_samples(t0, t1, step):
    length = t1 - t0
    if length < step:
        return 1, length, t0
    return int(math.floor(length / step + 1e-9)), step, t0


@njit(parallel=True, cache=True)
def render_forward(density, sh, temp, nx, ny, nz, lo, scale, origins, dirs,
                   t_near, t_far, hit, step, bg, skip_empty,
                   out_rgb, out_thermal, out_trans):
    n_rays = origins.shape[0]
    H = bg.shape[0]
    W = bg.shape[1]
    bg_flat = bg.reshape(H * W, 3)
    for r in prange(n_rays):
        idx = np.empty(8, np.int64)
        w = np.empty(8)
        basis = np.empty(9)
        tex = np.empty(4, np.int64)
        tw = np.empty(4)
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        th = 0.0
        if hit[r]:
            _sh_basis(dx, dy, dz, basis)
            n, delta, t_start = _n_samples(t_near[r], t_far[r], step)
            for s in range(n):
                t = t_start + (s + 0.5) * delta
                _stencil(origins[r, 0] + t * dx, origins[r, 1] + t * dy,
                         origins[r, 2] + t * dz, lo, scale, nx, ny, nz, idx, w)
                if skip_empty:
                    empty = True
                    for c in range(8):
                        if density[idx[c]] != 0.0:
                            empty = False
                            break
                    if empty:
                        continue
                sigma = 0.0
                tval = 0.0
                for c in range(8):
                    sigma += w[c] * density[idx[c]]
                    tval += w[c] * temp[idx[c]]
                att = math.exp(-sigma * delta)
                weight = trans * (1.0 - att)
                col0 = 0.0
                col1 = 0.0
                col2 = 0.0
                for c in range(8):
                    row = idx[c]
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for b in range(9):
                        a0 += basis[b] * sh[row, b]
                        a1 += basis[b] * sh[row, 9 + b]
                        a2 += basis[b] * sh[row, 18 + b]
                    col0 += w[c] * a0
                    col1 += w[c] * a1
                    col2 += w[c] * a2
                c0 += weight * col0
                c1 += weight * col1
                c2 += weight * col2
                th += weight * tval
                trans *= att
        _bg_stencil(dx, dy, dz, H, W, tex, tw)
        for q in range(4):
            c0 += trans * tw[q] * bg_flat[tex[q], 0]
            c1 += trans * tw[q] * bg_flat[tex[q], 1]
            c2 += trans * tw[q] * bg_flat[tex[q], 2]
        out_rgb[r, 0] = c0
        out_rgb[r, 1] = c1
        out_rgb[r, 2] = c2
        out_thermal[r] = th
        out_trans[r] = trans


@njit(cache=True)
def render_backward(density, sh, temp, nx, ny, nz, lo, scale, origins, dirs,
                    t_near, t_far, hit, step, skip_empty,
                    rgb_raw, thermal, grad_rgb, grad_thermal, thermal_density_grad,
                    g_density, g_sh, g_temp, g_bg):
    """Scatter d(loss)/d(parameters) given per-ray upstream gradients.

    ``rgb_raw``/``thermal`` are the cached unclamped forward outputs; the
    suffix sum of later contributions is recovered as ``total - prefix``.
    Rays are processed sequentially so accumulation order is fixed.
    """
    n_rays = origins.shape[0]
    H = g_bg.shape[0]
    W = g_bg.shape[1]
    g_bg_flat = g_bg.reshape(H * W, 3)
    idx = np.empty(8, np.int64)
    w = np.empty(8)
    basis = np.empty(9)
    tex = np.empty(4, np.int64)
    tw = np.empty(4)
    for r in range(n_rays):
        gc0 = grad_rgb[r, 0]
        gc1 = grad_rgb[r, 1]
        gc2 = grad_rgb[r, 2]
        gt = grad_thermal[r]
        gt_sigma = gt if thermal_density_grad else 0.0
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        trans = 1.0
        if hit[r] and (gc0 != 0.0 or gc1 != 0.0 or gc2 != 0.0 or gt != 0.0):
            _sh_basis(dx, dy, dz, basis)
            n, delta, t_start = _n_samples(t_near[r], t_far[r], step)
            p0 = 0.0
            p1 = 0.0
            p2 = 0.0
            pt = 0.0
            for s in range(n):
                t = t_start + (s + 0.5) * delta
                _stencil(origins[r, 0] + t * dx, origins[r, 1] + t * dy,
                         origins[r, 2] + t * dz, lo, scale, nx, ny, nz, idx, w)
                if skip_empty:
                    empty = True
                    for c in range(8):
                        if density[idx[c]] != 0.0:
                            empty = False
                            break
                    if empty:
                        continue
                sigma = 0.0
                tval = 0.0
                for c in range(8):
                    sigma += w[c] * density[idx[c]]
                    tval += w[c] * temp[idx[c]]
                att = math.exp(-sigma * delta)
                weight = trans * (1.0 - att)
                col0 = 0.0
                col1 = 0.0
                col2 = 0.0
                for c in range(8):
                    row = idx[c]
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for b in range(9):
                        a0 += basis[b] * sh[row, b]
                        a1 += basis[b] * sh[row, 9 + b]
                        a2 += basis[b] * sh[row, 18 + b]
                    col0 += w[c] * a0
                    col1 += w[c] * a1
                    col2 += w[c] * a2
                p0 += weight * col0
                p1 += weight * col1
                p2 += weight * col2
                pt += weight * tval
                t_next = trans * att
                g_sigma = delta * (
                    gc0 * (t_next * col0 - (rgb_raw[r, 0] - p0))
                    + gc1 * (t_next * col1 - (rgb_raw[r, 1] - p1))
                    + gc2 * (t_next * col2 - (rgb_raw[r, 2] - p2))
                    + gt_sigma * (t_next * tval - (thermal[r] - pt))
                )
                gtemp = weight * gt
                wc0 = weight * gc0
                wc1 = weight * gc1
                wc2 = weight * gc2
                for c in range(8):
                    row = idx[c]
                    g_density[row] += w[c] * g_sigma
                    g_temp[row] += w[c] * gtemp
                    for b in range(9):
                        wb = w[c] * basis[b]
                        g_sh[row, b] += wb * wc0
                        g_sh[row, 9 + b] += wb * wc1
                        g_sh[row, 18 + b] += wb * wc2
                trans = t_next
        elif hit[r]:
            # zero upstream gradient: nothing to scatter
            continue
        _bg_stencil(dx, dy, dz, H, W, tex, tw)
        for q in range(4):
            g_bg_flat[tex[q], 0] += trans * tw[q] * gc0
            g_bg_flat[tex[q], 1] += trans * tw[q] * gc1
            g_bg_flat[tex[q], 2] += trans * tw[q] * gc2

