"""Compiled inner loops shared by the projectors and the hash-grid field.

All kernels are single-threaded and iterate in a fixed order, so results are
bitwise reproducible.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _trilinear(vol, x, y, z):
    nz, ny, nx = vol.shape
    fx0 = math.floor(x)
    fy0 = math.floor(y)
    fz0 = math.floor(z)
    ix = int(fx0)
    iy = int(fy0)
    iz = int(fz0)
    if ix < -1 or iy < -1 or iz < -1 or ix >= nx or iy >= ny or iz >= nz:
        return 0.0
    fx = x - fx0
    fy = y - fy0
    fz = z - fz0
    acc = 0.0
    for c in range(8):
        dx = (c >> 2) & 1
        dy = (c >> 1) & 1
        dz = c & 1
        jx = ix + dx
        jy = iy + dy
        jz = iz + dz
        if jx < 0 or jy < 0 or jz < 0 or jx >= nx or jy >= ny or jz >= nz:
            continue
        w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
        acc += w * vol[jz, jy, jx]
    return acc


@njit(cache=True)
def march_forward(vol, lo, voxel, origins, dirs, t0, t1, n_samples, out):
    """out[r] = sum_i vol(o + t_i d) * dt over midpoint samples of [t0, t1]."""
    n_rays = dirs.shape[0]
    for r in range(n_rays):
        a = t0[r]
        b = t1[r]
        if not b > a:
            out[r] = 0.0
            continue
        dt = (b - a) / n_samples
        ox = (origins[r, 0] - lo[0]) / voxel
        oy = (origins[r, 1] - lo[1]) / voxel
        oz = (origins[r, 2] - lo[2]) / voxel
        dx = dirs[r, 0] / voxel
        dy = dirs[r, 1] / voxel
        dz = dirs[r, 2] / voxel
        acc = 0.0
        for i in range(n_samples):
            t = a + (i + 0.5) * dt
            acc += _trilinear(vol, ox + t * dx, oy + t * dy, oz + t * dz)
        out[r] = acc * dt


@njit(cache=True)
def march_adjoint(values, lo, voxel, origins, dirs, t0, t1, n_samples, vol):
    """Adjoint of :func:`march_forward`: accumulates ``values`` into ``vol``."""
    nz, ny, nx = vol.shape
    n_rays = dirs.shape[0]
    for r in range(n_rays):
        a = t0[r]
        b = t1[r]
        if not b > a:
            continue
        dt = (b - a) / n_samples
        g = values[r] * dt
        if g == 0.0:
            continue
        ox = (origins[r, 0] - lo[0]) / voxel
        oy = (origins[r, 1] - lo[1]) / voxel
        oz = (origins[r, 2] - lo[2]) / voxel
        ddx = dirs[r, 0] / voxel
        ddy = dirs[r, 1] / voxel
        ddz = dirs[r, 2] / voxel
        for i in range(n_samples):
            t = a + (i + 0.5) * dt
            x = ox + t * ddx
            y = oy + t * ddy
            z = oz + t * ddz
            fx0 = math.floor(x)
            fy0 = math.floor(y)
            fz0 = math.floor(z)
            ix = int(fx0)
            iy = int(fy0)
            iz = int(fz0)
            if ix < -1 or iy < -1 or iz < -1 or ix >= nx or iy >= ny or iz >= nz:
                continue
            fx = x - fx0
            fy = y - fy0
            fz = z - fz0
            for c in range(8):
                cx = (c >> 2) & 1
                cy = (c >> 1) & 1
                cz = c & 1
                jx = ix + cx
                jy = iy + cy
                jz = iz + cz
                if jx < 0 or jy < 0 or jz < 0 or jx >= nx or jy >= ny or jz >= nz:
                    continue
                w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                vol[jz, jy, jx] += w * g


@njit(cache=True)
def fdk_backproject_view(q, lo, voxel, source_dist, u_hat, toward_source, da, scale, vol):
    """Accumulate one filtered view into ``vol`` (virtual detector at isocenter).

    ``q`` is (rows, cols) sampled at pitch ``da`` on the isocenter plane.
    """
    nz, ny, nx = vol.shape
    rows, cols = q.shape
    cu = (cols - 1) / 2.0
    cv = (rows - 1) / 2.0
    for k in range(nz):
        z = lo[2] + k * voxel
        for j in range(ny):
            y = lo[1] + j * voxel
            for i in range(nx):
                x = lo[0] + i * voxel
                s = x * toward_source[0] + y * toward_source[1]
                L = source_dist - s
                m = source_dist / L
                a = (x * u_hat[0] + y * u_hat[1]) * m / da + cu
                b = z * m / da + cv
                fa = math.floor(a)
                fb = math.floor(b)
                ia = int(fa)
                ib = int(fb)
                if ia < -1 or ib < -1 or ia >= cols or ib >= rows:
                    continue
                wa = a - fa
                wb = b - fb
                val = 0.0
                if ib >= 0:
                    if ia >= 0:
                        val += (1.0 - wa) * (1.0 - wb) * q[ib, ia]
                    if ia + 1 < cols:
                        val += wa * (1.0 - wb) * q[ib, ia + 1]
                if ib + 1 < rows:
                    if ia >= 0:
                        val += (1.0 - wa) * wb * q[ib + 1, ia]
                    if ia + 1 < cols:
                        val += wa * wb * q[ib + 1, ia + 1]
                vol[k, j, i] += scale * m * m * val


# -- multiresolution hash grid ---------------------------------------------

@njit(cache=True)
def hash_encode(points, resolutions, primes, tables, out):
    """Trilinearly interpolated hash-table features for points in [0, 1]^3.

    ``tables`` is (L, T, F); ``out`` is (N, L*F).
    """
    n = points.shape[0]
    L = tables.shape[0]
    T = tables.shape[1]
    F = tables.shape[2]
    mask = np.uint64(T - 1)
    p0 = primes[0]
    p1 = primes[1]
    p2 = primes[2]
    for i in range(n):
        for l in range(L):
            N = resolutions[l]
            px = points[i, 0] * N
            py = points[i, 1] * N
            pz = points[i, 2] * N
            cx = math.floor(px)
            cy = math.floor(py)
            cz = math.floor(pz)
            fx = px - cx
            fy = py - cy
            fz = pz - cz
            ix = np.uint64(np.int64(cx))
            iy = np.uint64(np.int64(cy))
            iz = np.uint64(np.int64(cz))
            for f in range(F):
                out[i, l * F + f] = 0.0
            for c in range(8):
                dx = (c >> 2) & 1
                dy = (c >> 1) & 1
                dz = c & 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                h = (((ix + np.uint64(dx)) * p0) ^ ((iy + np.uint64(dy)) * p1)
                     ^ ((iz + np.uint64(dz)) * p2)) & mask
                for f in range(F):
                    out[i, l * F + f] += w * tables[l, h, f]


@njit(cache=True)
def hash_encode_backward(points, resolutions, primes, grad_out, grad_tables):
    """Accumulate d(loss)/d(tables) given d(loss)/d(features)."""
    n = points.shape[0]
    L = grad_tables.shape[0]
    T = grad_tables.shape[1]
    F = grad_tables.shape[2]
    mask = np.uint64(T - 1)
    p0 = primes[0]
    p1 = primes[1]
    p2 = primes[2]
    for i in range(n):
        for l in range(L):
            N = resolutions[l]
            px = points[i, 0] * N
            py = points[i, 1] * N
            pz = points[i, 2] * N
            cx = math.floor(px)
            cy = math.floor(py)
            cz = math.floor(pz)
            fx = px - cx
            fy = py - cy
            fz = pz - cz
            ix = np.uint64(np.int64(cx))
            iy = np.uint64(np.int64(cy))
            iz = np.uint64(np.int64(cz))
            for c in range(8):
                dx = (c >> 2) & 1
                dy = (c >> 1) & 1
                dz = c & 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                h = (((ix + np.uint64(dx)) * p0) ^ ((iy + np.uint64(dy)) * p1)
                     ^ ((iz + np.uint64(dz)) * p2)) & mask
                for f in range(F):
                    grad_tables[l, h, f] += w * grad_out[i, l * F + f]
