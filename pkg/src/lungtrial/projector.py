"""Siddon-style ray tracing and fan-beam backprojection kernels.

Grids are centred on the origin: axis ``a`` spans
``[-n_a * d_a / 2, +n_a * d_a / 2]`` mm and voxel ``i`` covers
``[lo + i * d, lo + (i + 1) * d]``. Traversal is the incremental parametric
form (Jacobs/Amanatides-Woo): the ray ``P(a) = S + a (E - S)`` is clipped to
the grid box, then stepped voxel to voxel by always advancing to the nearest
next plane crossing.

The fan-beam kernels work on a stack of slices stored ``[ix, iy, iz]``: each
in-plane ray is traversed once and its segment lengths applied to every z
slice, which is exact because the in-plane geometry is identical across
slices.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_EPS = 1e-12


@numba.njit(cache=True, nogil=True)
def _clip(s, r, lo, hi, amin, amax):
    if abs(r) < _EPS:
        if s <= lo or s >= hi:
            return 1.0, 0.0
        return amin, amax
    a1 = (lo - s) / r
    a2 = (hi - s) / r
    if a1 > a2:
        a1, a2 = a2, a1
    return max(amin, a1), min(amax, a2)


@numba.njit(cache=True, nogil=True)
def _start(s, r, lo, d, n, a):
    i = math.floor((s + a * r - lo) / d)
    i = max(i, 0)
    i = min(i, n - 1)
    if r > _EPS:
        return i, 1, (lo + (i + 1) * d - s) / r, d / r
    if r < -_EPS:
        return i, -1, (lo + i * d - s) / r, -d / r
    return i, 0, np.inf, np.inf


@numba.njit(cache=True, nogil=True)
def trace_2d(sx, sy, ex, ey, nx, ny, dx, dy, idx_i, idx_j, seg):
    """Voxels crossed by the segment S->E and their chord lengths (mm).

    Writes into the preallocated ``idx_i, idx_j, seg`` and returns the count.
    """
    rx, ry = ex - sx, ey - sy
    length = math.sqrt(rx * rx + ry * ry)
    x0, y0 = -0.5 * nx * dx, -0.5 * ny * dy
    amin, amax = _clip(sx, rx, x0, -x0, 0.0, 1.0)
    amin, amax = _clip(sy, ry, y0, -y0, amin, amax)
    if amax <= amin:
        return 0
    # enter at the voxel containing a point just inside the clipped segment
    a_in = amin + 1e-9 * (amax - amin)
    i, si, ax, dax = _start(sx, rx, x0, dx, nx, a_in)
    j, sj, ay, day = _start(sy, ry, y0, dy, ny, a_in)
    a = amin
    n = 0
    while a < amax and 0 <= i < nx and 0 <= j < ny:
        if ax <= ay:
            a_next = min(ax, amax)
            step = 0
        else:
            a_next = min(ay, amax)
            step = 1
        if a_next > a:
            idx_i[n] = i
            idx_j[n] = j
            seg[n] = (a_next - a) * length
            n += 1
        a = a_next
        if step == 0:
            i += si
            ax += dax
        else:
            j += sj
            ay += day
    return n


@numba.njit(cache=True, nogil=True)
def trace_3d(sx, sy, sz, ex, ey, ez, nx, ny, nz, dx, dy, dz, idx_i, idx_j, idx_k, seg):
    """3-D analogue of :func:`trace_2d`."""
    rx, ry, rz = ex - sx, ey - sy, ez - sz
    length = math.sqrt(rx * rx + ry * ry + rz * rz)
    x0, y0, z0 = -0.5 * nx * dx, -0.5 * ny * dy, -0.5 * nz * dz
    amin, amax = _clip(sx, rx, x0, -x0, 0.0, 1.0)
    amin, amax = _clip(sy, ry, y0, -y0, amin, amax)
    amin, amax = _clip(sz, rz, z0, -z0, amin, amax)
    if amax <= amin:
        return 0
    a_in = amin + 1e-9 * (amax - amin)
    i, si, ax, dax = _start(sx, rx, x0, dx, nx, a_in)
    j, sj, ay, day = _start(sy, ry, y0, dy, ny, a_in)
    k, sk, az, daz = _start(sz, rz, z0, dz, nz, a_in)
    a = amin
    n = 0
    while a < amax and 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
        if ax <= ay and ax <= az:
            a_next = min(ax, amax)
            step = 0
        elif ay <= az:
            a_next = min(ay, amax)
            step = 1
        else:
            a_next = min(az, amax)
            step = 2
        if a_next > a:
            idx_i[n] = i
            idx_j[n] = j
            idx_k[n] = k
            seg[n] = (a_next - a) * length
            n += 1
        a = a_next
        if step == 0:
            i += si
            ax += dax
        elif step == 1:
            j += sj
            ay += day
        else:
            k += sk
            az += daz
    return n


@numba.njit(cache=True, nogil=True)
def _project_rays_stack(mu, src, dst, dx, dy, out):
    # mu: (nx, ny, nz) float64; src/dst: (nrays, 2); out: (nrays, nz)
    nx, ny, nz = mu.shape
    cap = 2 * (nx + ny) + 4
    ii = np.empty(cap, np.int64)
    jj = np.empty(cap, np.int64)
    ss = np.empty(cap, np.float64)
    for r in range(src.shape[0]):
        n = trace_2d(src[r, 0], src[r, 1], dst[r, 0], dst[r, 1], nx, ny, dx, dy, ii, jj, ss)
        for z in range(nz):
            out[r, z] = 0.0
        for t in range(n):
            w = ss[t]
            col = mu[ii[t], jj[t]]
            for z in range(nz):
                out[r, z] += w * col[z]


def project_rays_stack(mu_xyz: np.ndarray, src: np.ndarray, dst: np.ndarray,
                       spacing_xy: tuple[float, float]) -> np.ndarray:
    """Line integrals of every slice of ``mu_xyz`` along in-plane rays.

    Returns an array of shape ``(n_rays, nz)``; ``mu`` units per mm.
    """
    mu = np.ascontiguousarray(mu_xyz, dtype=np.float64)
    if mu.ndim == 2:
        mu = mu[:, :, None]
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 2)
    out = np.empty((src.shape[0], mu.shape[2]))
    _project_rays_stack(mu, src, dst, float(spacing_xy[0]), float(spacing_xy[1]), out)
    return out


@numba.njit(cache=True, nogil=True)
def _project_rays_3d(mu, src, dst, dx, dy, dz, out):
    nx, ny, nz = mu.shape
    cap = 2 * (nx + ny + nz) + 6
    ii = np.empty(cap, np.int64)
    jj = np.empty(cap, np.int64)
    kk = np.empty(cap, np.int64)
    ss = np.empty(cap, np.float64)
    for r in range(src.shape[0]):
        n = trace_3d(src[r, 0], src[r, 1], src[r, 2], dst[r, 0], dst[r, 1], dst[r, 2],
                     nx, ny, nz, dx, dy, dz, ii, jj, kk, ss)
        acc = 0.0
        for t in range(n):
            acc += ss[t] * mu[ii[t], jj[t], kk[t]]
        out[r] = acc


def project_rays_3d(mu_xyz: np.ndarray, src: np.ndarray, dst: np.ndarray,
                    spacing: tuple[float, float, float]) -> np.ndarray:
    """Line integrals through a 3-D volume for rays ``src[r] -> dst[r]``."""
    mu = np.ascontiguousarray(mu_xyz, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape[0] == 1 and dst.shape[0] > 1:
        src = np.ascontiguousarray(np.broadcast_to(src, dst.shape))
    out = np.empty(dst.shape[0])
    _project_rays_3d(mu, src, dst, *(float(s) for s in spacing), out)
    return out


def trace_ray_2d(src, dst, dims, spacing):
    """(i, j, length_mm) arrays for one in-plane ray; convenience wrapper."""
    nx, ny = dims
    cap = 2 * (nx + ny) + 4
    ii, jj, ss = np.empty(cap, np.int64), np.empty(cap, np.int64), np.empty(cap)
    n = trace_2d(float(src[0]), float(src[1]), float(dst[0]), float(dst[1]),
                 nx, ny, float(spacing[0]), float(spacing[1]), ii, jj, ss)
    return ii[:n], jj[:n], ss[:n]


@numba.njit(cache=True, nogil=True)
def _fan_backproject_stack(q, betas, source_radius, dgamma, nx, ny, px, dbeta, out):
    # q: (nviews, nch, nz) filtered projections; out: (nx, ny, nz)
    nviews, nch, nz = q.shape
    cmid = 0.5 * (nch - 1)
    for v in range(nviews):
        cb, sb = math.cos(betas[v]), math.sin(betas[v])
        sxp, syp = source_radius * cb, source_radius * sb
        for ix in range(nx):
            x = (ix - 0.5 * (nx - 1)) * px
            for iy in range(ny):
                y = (iy - 0.5 * (ny - 1)) * px
                wx, wy = x - sxp, y - syp
                # central ray direction is (-cb, -sb)
                dot = -cb * wx - sb * wy
                crs = -cb * wy + sb * wx
                gam = math.atan2(crs, dot)
                c = gam / dgamma + cmid
                c0 = math.floor(c)
                if c0 < 0 or c0 + 1 > nch - 1:
                    continue
                t = c - c0
                w = dbeta / (wx * wx + wy * wy)
                w0 = w * (1.0 - t)
                w1 = w * t
                qa = q[v, c0]
                qb = q[v, c0 + 1]
                col = out[ix, iy]
                for z in range(nz):
                    col[z] += w0 * qa[z] + w1 * qb[z]


def fan_backproject_stack(q: np.ndarray, betas: np.ndarray, source_radius: float,
                          dgamma: float, recon_shape: tuple[int, int], pixel_mm: float) -> np.ndarray:
    """Distance-weighted (1/L^2) fan-beam backprojection over all views."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim == 2:
        q = q[:, :, None]
    out = np.zeros((recon_shape[0], recon_shape[1], q.shape[2]))
    dbeta = 2.0 * math.pi / len(betas)
    _fan_backproject_stack(q, np.asarray(betas, np.float64), float(source_radius), float(dgamma),
                           int(recon_shape[0]), int(recon_shape[1]), float(pixel_mm), dbeta, out)
    return out
