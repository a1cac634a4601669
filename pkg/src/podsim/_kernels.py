"""Compiled inner loops: trilinear lookup, RK4 stepping and boundary handoff.

A *region* is one block, or several face-adjacent blocks merged into a single
logical block.  It is passed as parallel arrays: ``origins``/``uppers``/
``spacings`` of shape ``(m, 3)`` and ``samples`` of shape
``(m, nx, ny, nz, 3)``.  Members are searched in order, so callers list them
by ascending block id.

Vectors inside the loops are plain scalar triples to keep the hot path free
of allocations.
"""

import math

import numpy as np
from numba import njit

EXITED = 0
OUT_OF_BOUNDS = 1
ZERO_VELOCITY = 2
MAX_STEPS = 3
BISECTION_CAP = 4


@njit(cache=True, error_model="numpy", inline="always")
def _cell(f, top):
    if f < 0.0:
        f = 0.0
    elif f > top:
        f = float(top)
    i = int(f)
    if i > top - 1:
        i = top - 1
    return i, f - i


@njit(cache=True, error_model="numpy", inline="always")
def _trilinear_m(samples, m, origins, spacings, x, y, z):
    """Trilinear velocity from member ``m``; coordinates are clamped to the grid."""
    i, tx = _cell((x - origins[m, 0]) / spacings[m, 0], samples.shape[1] - 1)
    j, ty = _cell((y - origins[m, 1]) / spacings[m, 1], samples.shape[2] - 1)
    k, tz = _cell((z - origins[m, 2]) / spacings[m, 2], samples.shape[3] - 1)
    ux = 1.0 - tx
    uy = 1.0 - ty
    uz = 1.0 - tz
    w0 = ux * uy * uz
    w1 = tx * uy * uz
    w2 = ux * ty * uz
    w3 = tx * ty * uz
    w4 = ux * uy * tz
    w5 = tx * uy * tz
    w6 = ux * ty * tz
    w7 = tx * ty * tz
    i1 = i + 1
    j1 = j + 1
    k1 = k + 1
    s = samples[m]
    v0 = (s[i, j, k, 0] * w0 + s[i1, j, k, 0] * w1 + s[i, j1, k, 0] * w2 + s[i1, j1, k, 0] * w3
          + s[i, j, k1, 0] * w4 + s[i1, j, k1, 0] * w5 + s[i, j1, k1, 0] * w6
          + s[i1, j1, k1, 0] * w7)
    v1 = (s[i, j, k, 1] * w0 + s[i1, j, k, 1] * w1 + s[i, j1, k, 1] * w2 + s[i1, j1, k, 1] * w3
          + s[i, j, k1, 1] * w4 + s[i1, j, k1, 1] * w5 + s[i, j1, k1, 1] * w6
          + s[i1, j1, k1, 1] * w7)
    v2 = (s[i, j, k, 2] * w0 + s[i1, j, k, 2] * w1 + s[i, j1, k, 2] * w2 + s[i1, j1, k, 2] * w3
          + s[i, j, k1, 2] * w4 + s[i1, j, k1, 2] * w5 + s[i, j1, k1, 2] * w6
          + s[i1, j1, k1, 2] * w7)
    return v0, v1, v2


@njit(cache=True, error_model="numpy")
def trilinear(samples, origin, spacing, p):
    """Trilinear lookup in one block's ``(nx, ny, nz, 3)`` samples."""
    out = np.empty(3)
    out[0], out[1], out[2] = _trilinear_m(samples.reshape((1,) + samples.shape),
                                          0, origin.reshape(1, 3), spacing.reshape(1, 3),
                                          p[0], p[1], p[2])
    return out


@njit(cache=True, error_model="numpy", inline="always")
def _member3(origins, uppers, x, y, z, tol):
    for m in range(origins.shape[0]):
        if (origins[m, 0] - tol <= x <= uppers[m, 0] + tol
                and origins[m, 1] - tol <= y <= uppers[m, 1] + tol
                and origins[m, 2] - tol <= z <= uppers[m, 2] + tol):
            return m
    return -1


@njit(cache=True, error_model="numpy")
def find_member(origins, uppers, p, tol):
    return _member3(origins, uppers, p[0], p[1], p[2], tol)


@njit(cache=True, error_model="numpy", inline="always")
def _vel3(origins, uppers, spacings, samples, x, y, z, tol):
    """(ok, vx, vy, vz); ``tol`` lets points a hair outside use the clamped lookup."""
    m = _member3(origins, uppers, x, y, z, tol)
    if m < 0:
        return False, 0.0, 0.0, 0.0
    vx, vy, vz = _trilinear_m(samples, m, origins, spacings, x, y, z)
    return True, vx, vy, vz


@njit(cache=True, error_model="numpy")
def _rk4_3(origins, uppers, spacings, samples, x, y, z, h):
    """(stage, x', y', z'); stage 0 on success, else the failing stage 1-5."""
    ok, a0, a1, a2 = _vel3(origins, uppers, spacings, samples, x, y, z, 0.0)
    if not ok:
        return 1, x, y, z
    return _rk4_from(origins, uppers, spacings, samples, x, y, z, h, a0, a1, a2)


@njit(cache=True, error_model="numpy")
def _rk4_from(origins, uppers, spacings, samples, x, y, z, h, a0, a1, a2):
    # RK4 with the first stage velocity already known
    ok, b0, b1, b2 = _vel3(origins, uppers, spacings, samples,
                           x + 0.5 * h * a0, y + 0.5 * h * a1, z + 0.5 * h * a2, 0.0)
    if not ok:
        return 2, x, y, z
    ok, c0, c1, c2 = _vel3(origins, uppers, spacings, samples,
                           x + 0.5 * h * b0, y + 0.5 * h * b1, z + 0.5 * h * b2, 0.0)
    if not ok:
        return 3, x, y, z
    ok, d0, d1, d2 = _vel3(origins, uppers, spacings, samples,
                           x + h * c0, y + h * c1, z + h * c2, 0.0)
    if not ok:
        return 4, x, y, z
    nx = x + h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
    ny = y + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
    nz = z + h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
    if _member3(origins, uppers, nx, ny, nz, 0.0) < 0:
        return 5, nx, ny, nz
    return 0, nx, ny, nz


@njit(cache=True, error_model="numpy")
def rk4(origins, uppers, spacings, samples, p, h, out):
    """Classic RK4 step.  Returns 0 on success, else the failing stage (1-5).

    Stages 1-4 are the four velocity evaluations; 5 means the combined update
    itself lands outside the region.
    """
    stage, x, y, z = _rk4_3(origins, uppers, spacings, samples, p[0], p[1], p[2], h)
    out[0], out[1], out[2] = x, y, z
    return stage


@njit(cache=True, error_model="numpy")
def _bdist3(origins, uppers, x, y, z):
    m = _member3(origins, uppers, x, y, z, 0.0)
    if m < 0:
        return 0.0
    best = np.inf
    for a in range(3):
        ext = uppers[m, a] - origins[m, a]
        nudge = 1e-9 * ext
        c = x if a == 0 else (y if a == 1 else z)
        for side in range(2):
            face = origins[m, a] if side == 0 else uppers[m, a]
            d = abs(c - face)
            if d >= best:
                continue
            probe = face - nudge if side == 0 else face + nudge
            px = probe if a == 0 else x
            py = probe if a == 1 else y
            pz = probe if a == 2 else z
            if _member3(origins, uppers, px, py, pz, 0.0) >= 0:
                continue  # face shared with another member
            best = d
    return best


@njit(cache=True, error_model="numpy")
def boundary_distance(origins, uppers, p):
    """Distance from ``p`` to the region's outer boundary.

    Faces shared with another member of the region are not boundary.
    """
    return _bdist3(origins, uppers, p[0], p[1], p[2])


@njit(cache=True, error_model="numpy")
def _push3(origins, uppers, spacings, samples, x, y, z, h, eps, eps_push, v_zero, max_iter):
    """(code, evals, x', y', z') for :func:`push_across`."""
    ok, v0, v1, v2 = _vel3(origins, uppers, spacings, samples, x, y, z, eps)
    if not ok:
        return BISECTION_CAP, 0, x, y, z
    speed = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
    if speed < v_zero:
        return ZERO_VELOCITY, 0, x, y, z
    qx, qy, qz = x, y, z
    lo = 0.0
    hi = h
    evals = 0
    # every trial starts at p, so the first RK4 stage is shared unless p lies outside
    inside, s0, s1, s2 = _vel3(origins, uppers, spacings, samples, x, y, z, 0.0)
    if _bdist3(origins, uppers, x, y, z) > eps:
        while True:
            if evals >= max_iter:
                return BISECTION_CAP, evals, qx, qy, qz
            mid = 0.5 * (lo + hi)
            evals += 1
            if inside:
                stage, tx, ty, tz = _rk4_from(origins, uppers, spacings, samples, x, y, z, mid,
                                              s0, s1, s2)
            else:
                stage, tx, ty, tz = 1, x, y, z
            if stage == 0:
                lo = mid
                qx, qy, qz = tx, ty, tz
            else:
                hi = mid
            if lo > 0.0 and _bdist3(origins, uppers, qx, qy, qz) <= eps:
                break
            if (hi - lo) * speed <= eps:
                break
    ok, w0, w1, w2 = _vel3(origins, uppers, spacings, samples, qx, qy, qz, eps)
    if not ok:
        return BISECTION_CAP, evals, qx, qy, qz
    s = math.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
    if s < v_zero:
        return ZERO_VELOCITY, evals, qx, qy, qz
    return (EXITED, evals, qx + eps_push * w0 / s, qy + eps_push * w1 / s,
            qz + eps_push * w2 / s)


@njit(cache=True, error_model="numpy")
def push_across(origins, uppers, spacings, samples, p, h, eps, eps_push, v_zero,
                max_iter, out):
    """Bisect the step toward the boundary, then take a small Euler push.

    Returns ``(code, evals)`` where code is EXITED when ``out`` holds the
    pushed position, ZERO_VELOCITY if the flow stalls, BISECTION_CAP if the
    iteration limit is hit.  ``evals`` counts trial RK4 steps.
    """
    code, evals, x, y, z = _push3(origins, uppers, spacings, samples, p[0], p[1], p[2], h,
                                  eps, eps_push, v_zero, max_iter)
    out[0], out[1], out[2] = x, y, z
    return code, evals


@njit(cache=True, error_model="numpy")
def _inside_box(lo, hi, x, y, z):
    return lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1] and lo[2] <= z <= hi[2]


@njit(cache=True, error_model="numpy")
def _advect3(origins, uppers, spacings, samples, glo, ghi, x, y, z, steps, max_steps,
             h, v_zero, eps, eps_push, bisect, max_iter):
    """(code, steps, evals, x, y, z) after advancing until exit or termination."""
    evals = 0
    while True:
        if steps >= max_steps:
            return MAX_STEPS, steps, evals, x, y, z
        ok, v0, v1, v2 = _vel3(origins, uppers, spacings, samples, x, y, z, eps)
        if not ok:
            return EXITED, steps, evals, x, y, z
        if math.sqrt(v0 * v0 + v1 * v1 + v2 * v2) < v_zero:
            return ZERO_VELOCITY, steps, evals, x, y, z
        if _member3(origins, uppers, x, y, z, 0.0) >= 0:
            stage, nx, ny, nz = _rk4_from(origins, uppers, spacings, samples, x, y, z, h,
                                          v0, v1, v2)
            if stage == 0:
                x, y, z = nx, ny, nz
                steps += 1
                continue
        if bisect:
            code, n, nx, ny, nz = _push3(origins, uppers, spacings, samples, x, y, z, h, eps,
                                         eps_push, v_zero, max_iter)
            evals += n
            if code == ZERO_VELOCITY:
                return ZERO_VELOCITY, steps, evals, nx, ny, nz
            if code == BISECTION_CAP:
                return BISECTION_CAP, steps, evals, x, y, z
        else:
            nx, ny, nz = x + h * v0, y + h * v1, z + h * v2
        x, y, z = nx, ny, nz
        steps += 1
        if _member3(origins, uppers, x, y, z, 0.0) >= 0:
            continue
        if not _inside_box(glo, ghi, x, y, z):
            return OUT_OF_BOUNDS, steps, evals, x, y, z
        if steps >= max_steps:
            return MAX_STEPS, steps, evals, x, y, z
        return EXITED, steps, evals, x, y, z


@njit(cache=True, error_model="numpy")
def advect_one(origins, uppers, spacings, samples, glo, ghi, p, steps, max_steps,
               h, v_zero, eps, eps_push, bisect, max_iter, out):
    """Advance one particle until it terminates or leaves the region.

    Returns ``(code, steps, evals)``; ``out`` receives the final position.
    """
    code, steps, evals, x, y, z = _advect3(origins, uppers, spacings, samples, glo, ghi,
                                           p[0], p[1], p[2], steps, max_steps, h, v_zero,
                                           eps, eps_push, bisect, max_iter)
    out[0], out[1], out[2] = x, y, z
    return code, steps, evals


@njit(cache=True, error_model="numpy")
def advect_many(origins, uppers, spacings, samples, glo, ghi, positions, steps,
                max_steps, h, v_zero, eps, eps_push, bisect, max_iter):
    """Batch driver over :func:`advect_one`; updates positions/steps in place.

    Returns per-particle codes, steps executed and bisection evaluations.
    """
    n = positions.shape[0]
    codes = np.empty(n, np.int64)
    executed = np.empty(n, np.int64)
    evals = np.empty(n, np.int64)
    for i in range(n):
        start = steps[i]
        code, s, e, x, y, z = _advect3(origins, uppers, spacings, samples, glo, ghi,
                                       positions[i, 0], positions[i, 1], positions[i, 2],
                                       start, max_steps, h, v_zero, eps, eps_push, bisect,
                                       max_iter)
        positions[i, 0], positions[i, 1], positions[i, 2] = x, y, z
        steps[i] = s
        codes[i] = code
        executed[i] = s - start
        evals[i] = e
    return codes, executed, evals
