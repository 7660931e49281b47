"""Pure-numpy reference implementations of the hot kinematic kernels.

These are the fallback path when numba is disabled or unavailable. The
numba twin in ``numba_impl`` must follow the same operation order so both
paths agree to float64 round-off.
"""

from __future__ import annotations

import numpy as np

KIND_REVOLUTE = 0
KIND_PRISMATIC = 1


def axis_angle_matrix(axis: np.ndarray, theta: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
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


def chain_fk(origin_pos, origin_rot, axes, kinds, thetas, base_rot, base_pos):
    """Walk a serial chain of movable joints.

    Returns per joint the world frame just after the joint's fixed origin
    (``pre``: the joint's own frame) and just after its motion (``post``:
    the child link frame). The running transform starts at the base pose.
    """
    n = thetas.shape[0]
    pre_rot = np.empty((n, 3, 3))
    pre_pos = np.empty((n, 3))
    post_rot = np.empty((n, 3, 3))
    post_pos = np.empty((n, 3))
    rot = base_rot.copy()
    pos = base_pos.copy()
    for i in range(n):
        pos = rot @ origin_pos[i] + pos
        rot = rot @ origin_rot[i]
        pre_rot[i] = rot
        pre_pos[i] = pos
        if kinds[i] == KIND_REVOLUTE:
            rot = rot @ axis_angle_matrix(axes[i], thetas[i])
        else:
            pos = pos + rot @ (axes[i] * thetas[i])
        post_rot[i] = rot
        post_pos[i] = pos
    return pre_rot, pre_pos, post_rot, post_pos


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1].

    Clamped closest-point parameterization; zero iff the segments touch.
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    eps = 1e-14
    if a <= eps and e <= eps:
        return float(np.sqrt(r @ r))
    if a <= eps:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = float(d1 @ r)
        if e <= eps:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = float(d1 @ d2)
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
    closest = p0 + d1 * s - (q0 + d2 * t)
    return float(np.sqrt(closest @ closest))


def min_segment_pair_distance(a0, a1, b0, b1) -> float:
    """Minimum distance over all segment pairs (rows of a vs rows of b)."""
    best = np.inf
    for i in range(a0.shape[0]):
        for j in range(b0.shape[0]):
            d = segment_distance(a0[i], a1[i], b0[j], b1[j])
            if d < best:
                best = d
    return float(best)
