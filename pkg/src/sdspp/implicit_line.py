"""Bi-cubic implicit curves fitted to sampled line points with relaxed 3L targets.

The fitted function is ``f(x, y) = Q(x, y) . c`` with monomials ordered as
``[x, x^2, x^3, y, y^2, y^3, 1, xy, xy^2, x^2 y]``.  Fitting stacks the line
points (target 0) with two offset lines at +/- ``d_3l`` (targets
+/- ``d_3l * grad_norm_des``) and solves the resulting linear least-squares
problem.  Points may come from several observations (segments); offsets are
built per segment because the accumulated set has no global ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

MONOMIALS = ("x", "x^2", "x^3", "y", "y^2", "y^3", "1", "xy", "xy^2", "x^2y")
# (power of x, power of y) of every monomial, in coefficient order
_POWERS = np.array([(1, 0), (2, 0), (3, 0), (0, 1), (0, 2), (0, 3), (0, 0), (1, 1), (1, 2), (2, 1)])

RIDGE_CONDITION = 1e10
RIDGE_LAMBDA = 1e-8
RESIDUAL_CAP = 10.0  # capped residual entry, in units of d_3l * grad_norm_des


class DegenerateFitError(ValueError):
    """The stacked monomial matrix cannot support a cubic fit."""


@dataclass(frozen=True)
class ImplicitCubic:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(10)
        object.__setattr__(self, "c", c)

    def __call__(self, x, y):
        return evaluate(self, x, y)

    def negated(self) -> "ImplicitCubic":
        return ImplicitCubic(-self.c)


@dataclass(frozen=True)
class OffsetLines:
    gamma: np.ndarray
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    d_3l: float
    grad_norm_des: float

    @property
    def level(self) -> float:
        return self.d_3l * self.grad_norm_des


@dataclass(frozen=True)
class BoundaryPair:
    """Boundary functions; each is zero on its offset line and positive toward the line."""

    f_left: ImplicitCubic
    f_right: ImplicitCubic
    positive_side: str = "line"


def monomials(x, y) -> np.ndarray:
    """Monomial rows ``Q(x, y)`` with a trailing axis of length 10."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x2, y2 = x * x, y * y
    return np.stack(
        [x, x2, x2 * x, y, y2, y2 * y, np.ones_like(x), x * y, x * y2, x2 * y], axis=-1
    )


def evaluate(c, x, y):
    """Evaluate the implicit cubic at (x, y); broadcasts over arrays."""
    coeffs = c.c if isinstance(c, ImplicitCubic) else np.asarray(c, dtype=float)
    out = monomials(x, y) @ coeffs
    return float(out) if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------
# offset construction


def _stencil(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the (previous, next) points used for each tangent."""
    prev = np.arange(n) - 1
    nxt = np.arange(n) + 1
    prev[0] = 0
    nxt[-1] = n - 1
    return prev, nxt


def _segment_stencil(segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = segments.size
    idx = np.arange(n)
    prev = idx - 1
    nxt = idx + 1
    first = np.ones(n, dtype=bool)
    first[1:] = segments[1:] != segments[:-1]
    last = np.ones(n, dtype=bool)
    last[:-1] = segments[:-1] != segments[1:]
    prev[first] = idx[first]
    nxt[last] = idx[last]
    return prev, nxt


def _left_normals(tangents: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(tangents, axis=-1, keepdims=True)
    return np.stack([-tangents[..., 1], tangents[..., 0]], axis=-1) / norm


def build_offset_lines(points, d_3l: float, grad_norm_des: float, segments=None) -> OffsetLines:
    """Offset every point by +/- ``d_3l`` along its left-of-travel normal.

    Interior tangents use the neighbours on both sides, endpoints the single
    available neighbour.  With ``segments`` each run of equal ids is treated as
    its own ordered sequence.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise ValueError("need at least 4 (x, y) points")
    if segments is None:
        prev, nxt = _stencil(len(pts))
        seg = np.zeros(len(pts), dtype=int)
    else:
        seg = np.asarray(segments)
        prev, nxt = _segment_stencil(seg)
    same_seg = seg[1:] == seg[:-1]
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(steps[same_seg] <= 1e-12):
        raise ValueError("coincident consecutive points")
    if np.any(prev == nxt):
        raise ValueError("every segment needs at least two points")
    normals = _left_normals(pts[nxt] - pts[prev])
    return OffsetLines(
        gamma=pts.copy(),
        gamma_plus=pts + d_3l * normals,
        gamma_minus=pts - d_3l * normals,
        d_3l=float(d_3l),
        grad_norm_des=float(grad_norm_des),
    )


# ----------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class _Frame:
    """Affine whitening ``u = W (p - mean)`` applied before building monomials."""

    mean: np.ndarray
    W: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.mean) @ self.W.T


def _whitening_frame(pts: np.ndarray) -> _Frame:
    mean = pts.mean(axis=0)
    centred = pts - mean
    cov = centred.T @ centred / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    scale = np.sqrt(np.maximum(evals, 1e-12 * max(evals.max(), 1e-300)))
    if not np.all(scale > 0):
        raise DegenerateFitError("all points coincide")
    return _Frame(mean, (evecs / scale).T)


def _to_raw(c_scaled: np.ndarray, frame: _Frame) -> np.ndarray:
    """Re-express a cubic fitted in whitened coordinates in raw coordinates."""
    shift = -frame.W @ frame.mean
    # u and v as 2-D polynomials in (x, y): P[i, j] multiplies x^i y^j
    lin = []
    for r in range(2):
        p = np.zeros((2, 2))
        p[0, 0] = shift[r]
        p[1, 0] = frame.W[r, 0]
        p[0, 1] = frame.W[r, 1]
        lin.append(p)
    pow_u = [np.ones((1, 1))]
    pow_v = [np.ones((1, 1))]
    for _ in range(3):
        pow_u.append(convolve2d(pow_u[-1], lin[0]))
        pow_v.append(convolve2d(pow_v[-1], lin[1]))
    total = np.zeros((4, 4))
    for coeff, (i, j) in zip(c_scaled, _POWERS):
        term = convolve2d(pow_u[i], pow_v[j])
        total[: term.shape[0], : term.shape[1]] += coeff * term
    return np.array([total[i, j] for i, j in _POWERS])


# ----------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class _System:
    """Stacked least-squares system in whitened coordinates."""

    frame: _Frame
    A: np.ndarray
    t: np.ndarray
    c: np.ndarray
    ridge: float

    @property
    def residual(self) -> np.ndarray:
        return self.A @ self.c - self.t


def _solve(A: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, float]:
    if not np.any(t):
        raise DegenerateFitError("all level-set targets are zero")
    s = np.linalg.svd(A, compute_uv=False)
    if not np.all(np.isfinite(s)) or s[0] == 0:
        raise DegenerateFitError("stacked monomial matrix is zero or non-finite")
    if np.sum(s > 1e-12 * s[0]) < 4:
        raise DegenerateFitError(f"stacked monomial matrix has rank {np.sum(s > 1e-12 * s[0])}")
    if s[-1] == 0 or s[0] / s[-1] > RIDGE_CONDITION:
        c = np.linalg.solve(A.T @ A + RIDGE_LAMBDA * np.eye(10), A.T @ t)
        return c, RIDGE_LAMBDA
    return np.linalg.pinv(A) @ t, 0.0


def _system(stacked: np.ndarray, targets: np.ndarray, frame: _Frame | None = None) -> _System:
    if frame is None:
        frame = _whitening_frame(stacked)
    A = monomials(*frame.apply(stacked).T)
    c, ridge = _solve(A, targets)
    return _System(frame, A, targets, c, ridge)


def _stack(lines: OffsetLines, order: tuple[str, str, str], levels: tuple[float, float, float]):
    groups = {"gamma": lines.gamma, "plus": lines.gamma_plus, "minus": lines.gamma_minus}
    stacked = np.vstack([groups[k] for k in order])
    n = len(lines.gamma)
    targets = np.concatenate([np.full(n, lv * lines.level) for lv in levels])
    return stacked, targets


def _line_system(lines: OffsetLines) -> _System:
    stacked, targets = _stack(lines, ("gamma", "plus", "minus"), (0.0, 1.0, -1.0))
    return _system(stacked, targets)


def fit_implicit_cubic(lines: OffsetLines) -> tuple[ImplicitCubic, float]:
    """Relaxed 3L fit; returns the cubic and the squared fitting error ``eps_3l``."""
    sys_ = _line_system(lines)
    r = sys_.residual
    return ImplicitCubic(_to_raw(sys_.c, sys_.frame)), float(r @ r)


def fit_boundary_pair(lines: OffsetLines) -> BoundaryPair:
    """Fit boundary functions that vanish on the offset lines.

    ``f_left`` is 0 on the left offset, ``level`` on the line and ``2 level``
    on the right offset; ``f_right`` mirrors it.  Both are positive on the
    line side and negative beyond their boundary.
    """
    if not lines.level > 0:
        raise ValueError("boundary fit needs d_3l > 0 and grad_norm_des > 0 (boundaries coincide)")
    left = _system(*_stack(lines, ("plus", "gamma", "minus"), (0.0, 1.0, 2.0)))
    right = _system(*_stack(lines, ("minus", "gamma", "plus"), (0.0, 1.0, 2.0)))
    return BoundaryPair(
        ImplicitCubic(_to_raw(left.c, left.frame)), ImplicitCubic(_to_raw(right.c, right.frame))
    )


# ----------------------------------------------------------------------
# implicit-function factor


def _capped(n: int, d_3l: float, grad_norm_des: float) -> np.ndarray:
    return np.full(3 * n, RESIDUAL_CAP * max(d_3l * grad_norm_des, 1e-9))


def line_factor_residual(points, d_3l: float, grad_norm_des: float, segments=None) -> np.ndarray:
    """Stacked 3L residuals (line, left offset, right offset) of one line feature."""
    pts = np.asarray(points, dtype=float)
    try:
        sys_ = _line_system(build_offset_lines(pts, d_3l, grad_norm_des, segments))
    except (DegenerateFitError, ValueError, np.linalg.LinAlgError):
        return _capped(len(pts), d_3l, grad_norm_des)
    r = sys_.residual
    if not np.all(np.isfinite(r)):
        return _capped(len(pts), d_3l, grad_norm_des)
    return r


def line_factor_jacobian(
    points, d_3l: float, grad_norm_des: float, segments=None, h: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Residual and central-difference Jacobian w.r.t. the flattened points.

    Every perturbation re-solves the fit.  Moving point k only changes the
    monomial rows of k and of the offsets of its stencil neighbours, so each
    re-fit is a low-rank update of the normal equations, done for all
    perturbations at once.  Whitening is held at the unperturbed frame; the
    residual does not depend on it because the cubic family is closed under
    affine maps.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    try:
        lines = build_offset_lines(pts, d_3l, grad_norm_des, segments)
        sys_ = _line_system(lines)
    except (DegenerateFitError, ValueError, np.linalg.LinAlgError):
        return _capped(n, d_3l, grad_norm_des), np.zeros((3 * n, 2 * n))
    r0 = sys_.residual
    seg = np.zeros(n, dtype=int) if segments is None else np.asarray(segments)
    prev, nxt = _segment_stencil(seg)
    A, t, c = sys_.A, sys_.t, sys_.c
    M = A.T @ A + sys_.ridge * np.eye(10)
    b = A.T @ t

    # perturbation p moves point k = p // 2 along axis p % 2
    P = 2 * n
    k = np.arange(P) // 2
    axis = np.arange(P) % 2
    # offset rows affected by moving k: stencil neighbours j in {k-1, k, k+1}
    cand = np.stack([k - 1, k, k + 1], axis=1)
    cand_ok = (cand >= 0) & (cand < n)
    cand = np.clip(cand, 0, n - 1)
    affected = cand_ok & ((cand == k[:, None]) | (prev[cand] == k[:, None]) | (nxt[cand] == k[:, None]))
    affected &= seg[cand] == seg[k][:, None]

    dJ = np.zeros((3 * n, P))
    for sign in (1.0, -1.0):
        e = np.zeros((P, 2))
        e[np.arange(P), axis] = sign * h
        # perturbed tangents and base points at the affected indices
        tang = pts[nxt[cand]] - pts[prev[cand]]
        tang += e[:, None, :] * (
            (nxt[cand] == k[:, None]).astype(float) - (prev[cand] == k[:, None]).astype(float)
        )[..., None]
        base = pts[cand] + e[:, None, :] * (cand == k[:, None])[..., None]
        normals = _left_normals(tang)
        new_plus = base + d_3l * normals
        new_minus = base - d_3l * normals
        gamma_k = pts[k] + e

        # changed rows: gamma row k, then plus/minus rows of the candidates
        rows = np.concatenate([k[:, None], n + cand, 2 * n + cand], axis=1)
        valid = np.concatenate([np.ones((P, 1), bool), affected, affected], axis=1)
        new_pts = np.concatenate([gamma_k[:, None, :], new_plus, new_minus], axis=1)
        new_rows = monomials(*sys_.frame.apply(new_pts.reshape(-1, 2)).T).reshape(P, 7, 10)
        old_rows = A[rows]
        delta = np.where(valid[..., None], new_rows - old_rows, 0.0)
        tr = t[rows]
        # low-rank updates of the normal equations
        new_eff = old_rows + delta
        dM = np.einsum("pri,prj->pij", new_eff, new_eff) - np.einsum("pri,prj->pij", old_rows, old_rows)
        db = np.einsum("pri,pr->pi", delta, tr)
        Mp = M[None] + dM
        rhs = (b[None] + db) - np.einsum("pij,j->pi", Mp, c)
        dc = np.linalg.solve(Mp, rhs[..., None])[..., 0]
        dr = A @ dc.T  # (3n, P)
        corr = np.einsum("pri,pi->pr", delta, c[None] + dc)
        np.add.at(dr, (rows.ravel(), np.repeat(np.arange(P), 7)), corr.ravel())
        dJ += sign * dr
    return r0, dJ / (2.0 * h)
