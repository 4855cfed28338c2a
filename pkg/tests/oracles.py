"""Independent reference computations used as test oracles.

Nothing here imports the package's numerical code paths; each helper is a
deliberately plain re-derivation (explicit loops, explicit matrices).
"""

from __future__ import annotations

import math

import numpy as np


def rot(theta: float) -> np.ndarray:
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


def compose(pose, delta) -> np.ndarray:
    """SE(2) composition via homogeneous 3x3 matrices."""
    def mat(p):
        m = np.eye(3)
        m[:2, :2] = rot(p[2])
        m[:2, 2] = p[:2]
        return m

    m = mat(pose) @ mat(delta)
    return np.array([m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0])])


def dead_reckon(deltas, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    poses = [np.asarray(origin, dtype=float)]
    for d in deltas:
        poses.append(compose(poses[-1], d))
    return np.array(poses)


def monomial_row(x: float, y: float) -> list[float]:
    return [x, x * x, x ** 3, y, y * y, y ** 3, 1.0, x * y, x * y * y, x * x * y]


def offsets(points, d: float):
    """Perpendicular offsets with an explicit per-point loop."""
    pts = [np.asarray(p, dtype=float) for p in points]
    n = len(pts)
    plus, minus = [], []
    for k in range(n):
        a = pts[max(k - 1, 0)]
        b = pts[min(k + 1, n - 1)]
        t = (b - a) / np.linalg.norm(b - a)
        nrm = np.array([-t[1], t[0]])
        plus.append(pts[k] + d * nrm)
        minus.append(pts[k] - d * nrm)
    return np.array(pts), np.array(plus), np.array(minus)


def normal_equations_fit(groups, targets):
    """Least squares through an explicit A^T A solve in centroid/RMS-scaled coordinates.

    ``groups`` are point arrays and ``targets`` their constant level values.
    Returns a callable f(x, y) and the fitted values at the stacked points.
    """
    stacked = np.vstack(groups)
    t = np.concatenate([np.full(len(g), lv) for g, lv in zip(groups, targets)])
    mean = stacked.mean(axis=0)
    scale = math.sqrt(((stacked - mean) ** 2).sum(axis=1).mean())

    def rows(pts):
        q = (np.atleast_2d(pts) - mean) / scale
        return np.array([monomial_row(x, y) for x, y in q])

    A = rows(stacked)
    # pseudo-inverse of the normal matrix handles exact rank deficiency
    c = np.linalg.pinv(A.T @ A, rcond=1e-13) @ (A.T @ t)

    def f(x, y):
        pts = np.column_stack([np.ravel(x), np.ravel(y)])
        return (rows(pts) @ c).reshape(np.shape(x))

    return f, A @ c, t


def three_l(points, d: float, g: float):
    """Relaxed 3L fit of an ordered point sequence: f, fitted values, targets, eps."""
    gam, plus, minus = offsets(points, d)
    f, fitted, t = normal_equations_fit([gam, plus, minus], [0.0, d * g, -d * g])
    r = fitted - t
    return f, fitted, t, float(r @ r)


def max_pair_bruteforce(points) -> tuple[int, int]:
    best, pair = -1.0, (0, 0)
    n = len(points)
    for i in range(n):
        for j in range(i + 1, n):
            d = math.dist(points[i], points[j])
            if d > best:
                best, pair = d, (i, j)
    return pair


def central_diff4(fn, x: float, y: float, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central-difference gradient."""
    def d1(g):
        return (-g(2 * h) + 8 * g(h) - 8 * g(-h) + g(-2 * h)) / (12 * h)

    return np.array([d1(lambda e: fn(x + e, y)), d1(lambda e: fn(x, y + e))])


def numeric_jacobian(fn, v: np.ndarray, h: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    f0 = np.asarray(fn(v))
    J = np.zeros((f0.size, v.size))
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        J[:, i] = (np.asarray(fn(v + e)) - np.asarray(fn(v - e))).ravel() / (2 * h)
    return J


def bicycle_substepped(s, u, t_s: float, L: float = 4.0, substeps: int = 10) -> np.ndarray:
    """Bicycle model integrated with small Euler substeps (no clamping)."""
    x, y, psi, v, d = (float(q) for q in s)
    a, dd = u
    h = t_s / substeps
    for _ in range(substeps):
        x, y, psi, v, d = (
            x + h * v * math.cos(psi),
            y + h * v * math.sin(psi),
            psi + h * v * math.tan(d) / L,
            v + h * a,
            d + h * dd,
        )
    return np.array([x, y, psi, v, d])


def rect_distance(px: float, py: float, center, theta: float, extent) -> float:
    """Planar distance from a point to a filled rotated rectangle."""
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = px - center[0], py - center[1]
    u, v = c * dx + s * dy, -s * dx + c * dy
    ou = max(abs(u) - extent[0] / 2, 0.0)
    ov = max(abs(v) - extent[1] / 2, 0.0)
    return math.hypot(ou, ov)


def gradient_rows(x: float, y: float) -> tuple[list[float], list[float]]:
    gx = [1.0, 2 * x, 3 * x * x, 0.0, 0.0, 0.0, 0.0, y, y * y, 2 * x * y]
    gy = [0.0, 0.0, 0.0, 1.0, 2 * y, 3 * y * y, 0.0, x, 2 * x * y, x * x]
    return gx, gy


def fixed_gradient_three_l(points, d: float, g: float, anchors=(0, -1)) -> float:
    """3L least squares with the gradient pinned to exactly ``g`` along the normal
    at a few anchor points (equality constraints via the KKT system).

    Returns the squared error of the same stacked level-set objective.
    """
    gam, plus, minus = offsets(points, d)
    stacked = np.vstack([gam, plus, minus])
    t = np.concatenate([np.zeros(len(gam)), np.full(len(gam), d * g), np.full(len(gam), -d * g)])
    A = np.array([monomial_row(x, y) for x, y in stacked])
    G, h = [], []
    for k in anchors:
        nrm = (plus[k] - gam[k]) / d
        gx, gy = gradient_rows(*gam[k])
        G.append(nrm[0] * np.array(gx) + nrm[1] * np.array(gy))
        h.append(g)
    G, h = np.array(G), np.array(h)
    m = len(G)
    K = np.block([[2 * A.T @ A, G.T], [G, np.zeros((m, m))]])
    rhs = np.concatenate([2 * A.T @ t, h])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    c = sol[:10]
    assert np.allclose(G @ c, h, atol=1e-6 * g), "anchor constraints not met"
    r = A @ c - t
    return float(r @ r)
