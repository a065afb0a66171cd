"""Compiled multilinear interpolation kernels (sequential, deterministic).

Data is ``(C, *dims)``, points are ``(d, M)`` in normalized coordinates.
Positions are snapped to lattice points within ``snap`` voxels and clamped
to the grid; the derivative along a clamped axis is zero.
"""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _locate(p, h, n, snap):
    u = p / h
    r = np.floor(u + 0.5)
    if abs(u - r) < snap:
        u = r
    inside = 1.0 if (u >= 0.0 and u <= n - 1) else 0.0
    if u < 0.0:
        u = 0.0
    elif u > n - 1:
        u = n - 1.0
    i0 = int(np.floor(u))
    if i0 > n - 2:
        i0 = n - 2
    return i0, u - i0, inside


@njit(cache=True)
def interp3(data, pts, hx, hy, hz, snap, want_grad):
    C, nx, ny, nz = data.shape
    M = pts.shape[1]
    out = np.empty((C, M))
    grad = np.zeros((C, 3, M)) if want_grad else np.zeros((C, 3, 0))
    for m in range(M):
        i, tx, ix = _locate(pts[0, m], hx, nx, snap)
        j, ty, iy = _locate(pts[1, m], hy, ny, snap)
        k, tz, iz = _locate(pts[2, m], hz, nz, snap)
        sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        for c in range(C):
            v000 = data[c, i, j, k]
            v001 = data[c, i, j, k + 1]
            v010 = data[c, i, j + 1, k]
            v011 = data[c, i, j + 1, k + 1]
            v100 = data[c, i + 1, j, k]
            v101 = data[c, i + 1, j, k + 1]
            v110 = data[c, i + 1, j + 1, k]
            v111 = data[c, i + 1, j + 1, k + 1]
            out[c, m] = (sx * (sy * (sz * v000 + tz * v001) + ty * (sz * v010 + tz * v011))
                         + tx * (sy * (sz * v100 + tz * v101) + ty * (sz * v110 + tz * v111)))
            if want_grad:
                grad[c, 0, m] = ix / hx * ((sy * (sz * v100 + tz * v101) + ty * (sz * v110 + tz * v111))
                                           - (sy * (sz * v000 + tz * v001) + ty * (sz * v010 + tz * v011)))
                grad[c, 1, m] = iy / hy * ((sx * (sz * v010 + tz * v011) + tx * (sz * v110 + tz * v111))
                                           - (sx * (sz * v000 + tz * v001) + tx * (sz * v100 + tz * v101)))
                grad[c, 2, m] = iz / hz * ((sx * (sy * v001 + ty * v011) + tx * (sy * v101 + ty * v111))
                                           - (sx * (sy * v000 + ty * v010) + tx * (sy * v100 + ty * v110)))
    return out, grad


@njit(cache=True)
def scatter3(g, pts, nx, ny, nz, hx, hy, hz, snap):
    C, M = g.shape
    out = np.zeros((C, nx, ny, nz))
    for m in range(M):
        i, tx, _ = _locate(pts[0, m], hx, nx, snap)
        j, ty, _ = _locate(pts[1, m], hy, ny, snap)
        k, tz, _ = _locate(pts[2, m], hz, nz, snap)
        sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        for c in range(C):
            w = g[c, m]
            out[c, i, j, k] += w * sx * sy * sz
            out[c, i, j, k + 1] += w * sx * sy * tz
            out[c, i, j + 1, k] += w * sx * ty * sz
            out[c, i, j + 1, k + 1] += w * sx * ty * tz
            out[c, i + 1, j, k] += w * tx * sy * sz
            out[c, i + 1, j, k + 1] += w * tx * sy * tz
            out[c, i + 1, j + 1, k] += w * tx * ty * sz
            out[c, i + 1, j + 1, k + 1] += w * tx * ty * tz
    return out


@njit(cache=True)
def interp2(data, pts, hx, hy, snap, want_grad):
    C, nx, ny = data.shape
    M = pts.shape[1]
    out = np.empty((C, M))
    grad = np.zeros((C, 2, M)) if want_grad else np.zeros((C, 2, 0))
    for m in range(M):
        i, tx, ix = _locate(pts[0, m], hx, nx, snap)
        j, ty, iy = _locate(pts[1, m], hy, ny, snap)
        sx, sy = 1.0 - tx, 1.0 - ty
        for c in range(C):
            v00 = data[c, i, j]
            v01 = data[c, i, j + 1]
            v10 = data[c, i + 1, j]
            v11 = data[c, i + 1, j + 1]
            out[c, m] = sx * (sy * v00 + ty * v01) + tx * (sy * v10 + ty * v11)
            if want_grad:
                grad[c, 0, m] = ix / hx * ((sy * v10 + ty * v11) - (sy * v00 + ty * v01))
                grad[c, 1, m] = iy / hy * ((sx * v01 + tx * v11) - (sx * v00 + tx * v10))
    return out, grad


@njit(cache=True)
def scatter2(g, pts, nx, ny, hx, hy, snap):
    C, M = g.shape
    out = np.zeros((C, nx, ny))
    for m in range(M):
        i, tx, _ = _locate(pts[0, m], hx, nx, snap)
        j, ty, _ = _locate(pts[1, m], hy, ny, snap)
        sx, sy = 1.0 - tx, 1.0 - ty
        for c in range(C):
            w = g[c, m]
            out[c, i, j] += w * sx * sy
            out[c, i, j + 1] += w * sx * ty
            out[c, i + 1, j] += w * tx * sy
            out[c, i + 1, j + 1] += w * tx * ty
    return out


# ---------------------------------------------------------------------------
# advection right-hand side -(D phi) v; 2D inputs carry a trailing axis of size 1


@njit(cache=True, inline="always")
def _stencil(i, n, h):
    """Neighbour indices and scale of the first-difference stencil at ``i``."""
    if i == 0:
        return 1, 0, 1.0 / h
    if i == n - 1:
        return n - 1, n - 2, 1.0 / h
    return i + 1, i - 1, 0.5 / h


@njit(cache=True)
def advection_rhs(phi, v, h):
    C, nx, ny, nz = phi.shape
    D = v.shape[0]
    out = np.zeros_like(phi)
    for i in range(nx):
        ip, im, sx = _stencil(i, nx, h[0])
        for j in range(ny):
            jp, jm, sy = _stencil(j, ny, h[1])
            for k in range(nz):
                vx = v[0, i, j, k]
                vy = v[1, i, j, k]
                for c in range(C):
                    acc = vx * sx * (phi[c, ip, j, k] - phi[c, im, j, k])
                    acc += vy * sy * (phi[c, i, jp, k] - phi[c, i, jm, k])
                    if D == 3:
                        kp, km, sz = _stencil(k, nz, h[2])
                        acc += v[2, i, j, k] * sz * (phi[c, i, j, kp] - phi[c, i, j, km])
                    out[c, i, j, k] = -acc
    return out


@njit(cache=True)
def advection_rhs_adjoint(g, phi, v, h, want_phi, want_v):
    C, nx, ny, nz = phi.shape
    D = v.shape[0]
    gphi = np.zeros_like(phi) if want_phi else np.zeros((C, 0, 0, 0))
    gv = np.zeros_like(v) if want_v else np.zeros((D, 0, 0, 0))
    for i in range(nx):
        ip, im, sx = _stencil(i, nx, h[0])
        for j in range(ny):
            jp, jm, sy = _stencil(j, ny, h[1])
            for k in range(nz):
                kp, km, sz = 0, 0, 0.0
                if D == 3:
                    kp, km, sz = _stencil(k, nz, h[2])
                for c in range(C):
                    gc = g[c, i, j, k]
                    if want_v:
                        gv[0, i, j, k] -= gc * sx * (phi[c, ip, j, k] - phi[c, im, j, k])
                        gv[1, i, j, k] -= gc * sy * (phi[c, i, jp, k] - phi[c, i, jm, k])
                        if D == 3:
                            gv[2, i, j, k] -= gc * sz * (phi[c, i, j, kp] - phi[c, i, j, km])
                    if want_phi:
                        w = gc * v[0, i, j, k] * sx
                        gphi[c, ip, j, k] -= w
                        gphi[c, im, j, k] += w
                        w = gc * v[1, i, j, k] * sy
                        gphi[c, i, jp, k] -= w
                        gphi[c, i, jm, k] += w
                        if D == 3:
                            w = gc * v[2, i, j, k] * sz
                            gphi[c, i, j, kp] -= w
                            gphi[c, i, j, km] += w
    return gphi, gv
