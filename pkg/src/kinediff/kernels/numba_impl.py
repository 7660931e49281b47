"""Numba-compiled twins of the numpy kernels.

Same algorithms as ``numpy_impl``, written with explicit loops so nopython
mode compiles them. Importing this module requires numba.
"""

from __future__ import annotations

import numpy as np
from numba import njit

KIND_REVOLUTE = 0
KIND_PRISMATIC = 1


@njit(cache=True)
def axis_angle_matrix(axis, theta):
    c = np.cos(theta)
    s = np.sin(theta)
    ux, uy, uz = axis[0], axis[1], axis[2]
    r = np.empty((3, 3))
    r[0, 0] = c + ux * ux * (1.0 - c)
    r[0, 1] = ux * uy * (1.0 - c) - uz * s
    r[0, 2] = ux * uz * (1.0 - c) + uy * s
    r[1, 0] = uy * ux * (1.0 - c) + uz * s
    r[1, 1] = c + uy * uy * (1.0 - c)
    r[1, 2] = uy * uz * (1.0 - c) - ux * s
    r[2, 0] = uz * ux * (1.0 - c) - uy * s
    r[2, 1] = uz * uy * (1.0 - c) + ux * s
    r[2, 2] = c + uz * uz * (1.0 - c)
    return r


@njit(cache=True)
def _mat3_mul(a, b):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]
    return out


@njit(cache=True)
def _mat3_vec(a, v):
    out = np.empty(3)
    for i in range(3):
        out[i] = a[i, 0] * v[0] + a[i, 1] * v[1] + a[i, 2] * v[2]
    return out


@njit(cache=True)
def chain_fk(origin_pos, origin_rot, axes, kinds, thetas, base_rot, base_pos):
    n = thetas.shape[0]
    pre_rot = np.empty((n, 3, 3))
    pre_pos = np.empty((n, 3))
    post_rot = np.empty((n, 3, 3))
    post_pos = np.empty((n, 3))
    rot = base_rot.copy()
    pos = base_pos.copy()
    for i in range(n):
        pos = _mat3_vec(rot, origin_pos[i]) + pos
        rot = _mat3_mul(rot, origin_rot[i])
        pre_rot[i] = rot
        pre_pos[i] = pos
        if kinds[i] == KIND_REVOLUTE:
            rot = _mat3_mul(rot, axis_angle_matrix(axes[i], thetas[i]))
        else:
            pos = pos + _mat3_vec(rot, axes[i] * thetas[i])
        post_rot[i] = rot
        post_pos[i] = pos
    return pre_rot, pre_pos, post_rot, post_pos


@njit(cache=True)
def segment_distance(p0, p1, q0, q1):
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
    e = d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]
    f = d2[0] * r[0] + d2[1] * r[1] + d2[2] * r[2]
    eps = 1e-14
    if a <= eps and e <= eps:
        return np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    if a <= eps:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = d1[0] * r[0] + d1[1] * r[1] + d1[2] * r[2]
        if e <= eps:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]
            denom = a * e - b * b
            if denom > eps:
                s = min(max((b * f - c * e) / denom, 0.0), 1.0)
            else:
                s = 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
    cx = p0[0] + d1[0] * s - (q0[0] + d2[0] * t)
    cy = p0[1] + d1[1] * s - (q0[1] + d2[1] * t)
    cz = p0[2] + d1[2] * s - (q0[2] + d2[2] * t)
    return np.sqrt(cx * cx + cy * cy + cz * cz)


@njit(cache=True)
def min_segment_pair_distance(a0, a1, b0, b1):
    best = np.inf
    for i in range(a0.shape[0]):
        for j in range(b0.shape[0]):
            d = segment_distance(a0[i], a1[i], b0[j], b1[j])
            if d < best:
                best = d
    return best


def warmup():
    """Trigger JIT compilation on tiny inputs."""
    o = np.zeros((1, 3))
    r = np.eye(3)[None, :, :].copy()
    chain_fk(o, r, np.array([[0.0, 0.0, 1.0]]), np.zeros(1, dtype=np.int64),
             np.zeros(1), np.eye(3), np.zeros(3))
    seg = np.zeros((1, 3))
    min_segment_pair_distance(seg, seg + 1.0, seg + 2.0, seg + 3.0)
