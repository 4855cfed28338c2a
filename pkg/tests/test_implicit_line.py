import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import fixed_gradient_three_l, normal_equations_fit, offsets, three_l
from sdspp.implicit_line import (
    RESIDUAL_CAP,
    DegenerateFitError,
    ImplicitCubic,
    build_offset_lines,
    evaluate,
    fit_boundary_pair,
    fit_implicit_cubic,
    line_factor_jacobian,
    line_factor_residual,
)

D3L, GRAD = 1.0, 5.0
LEVEL = D3L * GRAD


def straight():
    xs = np.linspace(0, 10, 11)
    return np.column_stack([xs, np.zeros_like(xs)])


def gentle_cubic():
    xs = np.linspace(0, 10, 11)
    return np.column_stack([xs, 0.002 * xs**3 - 0.02 * xs**2 + 0.1 * xs])


# ---------------------------------------------------------------- evaluate


def test_evaluate_single_monomials():
    assert evaluate(ImplicitCubic([0, 0, 0, 1, 0, 0, 0, 0, 0, 0]), 7, 2) == 2.0
    assert evaluate(ImplicitCubic(np.zeros(10)), 3.3, -1.2) == 0.0
    assert evaluate(ImplicitCubic([1, 0, 0, 0, 0, 0, -3, 0, 0, 0]), 3, 99) == 0.0


def test_evaluate_monomial_order():
    x, y = 2.0, 3.0
    expected = [x, x**2, x**3, y, y**2, y**3, 1, x * y, x * y**2, x**2 * y]
    for i, v in enumerate(expected):
        c = np.zeros(10)
        c[i] = 1.0
        assert evaluate(c, x, y) == v


# ---------------------------------------------------------------- offsets


def test_offsets_of_straight_line():
    lines = build_offset_lines([(0, 0), (1, 0), (2, 0), (3, 0)], 1.0, 5.0)
    assert np.allclose(lines.gamma_plus, [(0, 1), (1, 1), (2, 1), (3, 1)])
    assert np.allclose(lines.gamma_minus, [(0, -1), (1, -1), (2, -1), (3, -1)])


def test_zero_offset_collapses():
    pts = gentle_cubic()
    lines = build_offset_lines(pts, 0.0, 5.0)
    assert np.array_equal(lines.gamma_plus, pts) and np.array_equal(lines.gamma_minus, pts)


def test_quarter_circle_offsets_lie_on_offset_radii():
    r = 10.0
    t = np.linspace(0, np.pi / 2, 20)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    lines = build_offset_lines(pts, 0.5, 1.0)
    # counter-clockwise travel: left is toward the centre
    assert np.all(np.abs(np.linalg.norm(lines.gamma_plus, axis=1) - (r - 0.5)) <= 0.02 * (r - 0.5))
    assert np.all(np.abs(np.linalg.norm(lines.gamma_minus, axis=1) - (r + 0.5)) <= 0.02 * (r + 0.5))


def test_offsets_match_loop_oracle():
    pts = gentle_cubic()
    lines = build_offset_lines(pts, 0.7, 5.0)
    _, plus, minus = offsets(pts, 0.7)
    assert np.allclose(lines.gamma_plus, plus, atol=1e-12)
    assert np.allclose(lines.gamma_minus, minus, atol=1e-12)


def test_offset_input_validation():
    with pytest.raises(ValueError):
        build_offset_lines([(0, 0), (1, 0), (2, 0)], 1.0, 5.0)
    with pytest.raises(ValueError):
        build_offset_lines([(0, 0), (1, 0), (1, 0), (2, 0)], 1.0, 5.0)


@given(st.lists(st.floats(0.2, 3.0), min_size=4, max_size=12), st.floats(0.0, 3.0))
def test_offset_distance_invariant(steps, d):
    xs = np.cumsum(steps)
    pts = np.column_stack([xs, np.sin(xs / 3)])
    lines = build_offset_lines(pts, d, 1.0)
    dp = np.linalg.norm(lines.gamma_plus - pts, axis=1)
    dm = np.linalg.norm(lines.gamma_minus - pts, axis=1)
    assert np.allclose(dp, d, rtol=1e-9, atol=1e-12)
    assert np.allclose(dm, d, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- fitting


@pytest.mark.parametrize("pts", [straight(), gentle_cubic()], ids=["straight", "cubic"])
def test_level_sets_within_five_percent(pts):
    lines = build_offset_lines(pts, D3L, GRAD)
    f, _ = fit_implicit_cubic(lines)
    tol = 0.05 * LEVEL
    assert np.all(np.abs(f(*lines.gamma.T)) <= tol)
    assert np.all(np.abs(f(*lines.gamma_plus.T) - LEVEL) <= tol)
    assert np.all(np.abs(f(*lines.gamma_minus.T) + LEVEL) <= tol)


@pytest.mark.parametrize("pts", [straight(), gentle_cubic()], ids=["straight", "cubic"])
def test_fit_matches_normal_equations_oracle(pts):
    lines = build_offset_lines(pts, D3L, GRAD)
    f, eps = fit_implicit_cubic(lines)
    _, fitted, t, eps_o = three_l(pts, D3L, GRAD)
    stacked = np.vstack([lines.gamma, lines.gamma_plus, lines.gamma_minus])
    got = f(*stacked.T)
    assert np.max(np.abs(got - fitted)) <= 1e-6 * LEVEL
    assert abs(eps - eps_o) <= 1e-6 * max(eps_o, LEVEL**2 * 1e-6)


def test_conic_fits_better_than_straight_line():
    t = np.linspace(0.2, 1.2, 12)
    pts = np.column_stack([4 * np.cos(t), 4 * np.sin(t)])  # circular arc
    lines = build_offset_lines(pts, D3L, GRAD)
    _, eps = fit_implicit_cubic(lines)
    # best degree-1 implicit fit of the same stacked data, via explicit normal equations
    stacked = np.vstack([lines.gamma, lines.gamma_plus, lines.gamma_minus])
    tgt = np.concatenate([np.zeros(12), np.full(12, LEVEL), np.full(12, -LEVEL)])
    A = np.column_stack([stacked, np.ones(len(stacked))])
    c = np.linalg.solve(A.T @ A, A.T @ tgt)
    eps_lin = float(((A @ c - tgt) ** 2).sum())
    assert eps < eps_lin


def test_degenerate_inputs():
    pts = straight()
    with pytest.raises(DegenerateFitError):
        fit_implicit_cubic(build_offset_lines(pts, 0.0, GRAD))
    with pytest.raises(ValueError):
        fit_boundary_pair(build_offset_lines(pts, 0.0, GRAD))


def test_boundary_pair_levels():
    lines = build_offset_lines(straight(), D3L, GRAD)
    bp = fit_boundary_pair(lines)
    xs = np.linspace(0, 10, 11)
    tol = 0.05 * LEVEL
    assert np.all(np.abs(bp.f_left(xs, np.ones(11))) <= tol)
    assert np.all(np.abs(bp.f_left(xs, np.zeros(11)) - LEVEL) <= tol)
    assert np.all(np.abs(bp.f_right(xs, -np.ones(11))) <= tol)
    assert np.all(np.abs(bp.f_right(xs, np.zeros(11)) - LEVEL) <= tol)
    assert np.all(bp.f_left(xs, np.full(11, 3.0)) < 0)
    assert np.all(bp.f_right(xs, np.full(11, -3.0)) < 0)


def test_boundary_pair_matches_oracle():
    pts = gentle_cubic()
    lines = build_offset_lines(pts, D3L, GRAD)
    bp = fit_boundary_pair(lines)
    _, plus, minus = offsets(pts, D3L)
    f_o, fitted, _ = normal_equations_fit([plus, pts, minus], [0.0, LEVEL, 2 * LEVEL])
    stacked = np.vstack([plus, pts, minus])
    assert np.max(np.abs(bp.f_left(*stacked.T) - fitted)) <= 1e-6 * LEVEL


# ---------------------------------------------------------------- factor residual


def test_residual_zero_on_realisable_line():
    r = line_factor_residual(straight(), D3L, GRAD)
    assert r.shape == (33,)
    assert np.linalg.norm(r) <= 1e-6 * GRAD * D3L * np.sqrt(33)


def test_residual_grows_with_perturbation():
    pts = straight()
    base = np.linalg.norm(line_factor_residual(pts, D3L, GRAD))
    pts[5, 1] += 0.1
    assert np.linalg.norm(line_factor_residual(pts, D3L, GRAD)) > base


def test_residual_matches_oracle():
    pts = gentle_cubic()
    pts[4, 1] += 0.05
    r = line_factor_residual(pts, D3L, GRAD)
    _, fitted, t, _ = three_l(pts, D3L, GRAD)
    assert np.max(np.abs(r - (fitted - t))) <= 1e-6 * LEVEL


def test_degenerate_residual_is_capped_and_finite():
    pts = np.zeros((5, 2))
    r = line_factor_residual(pts, D3L, GRAD)
    assert np.all(np.isfinite(r)) and np.allclose(r, RESIDUAL_CAP * LEVEL)


def test_factor_jacobian_matches_brute_force_refits():
    rng = np.random.default_rng(3)
    pts = gentle_cubic() + rng.normal(0, 0.05, (11, 2))
    segments = np.repeat([0, 1], [6, 5])
    r, J = line_factor_jacobian(pts, D3L, GRAD, segments, h=1e-6)
    h = 1e-6
    for p in range(0, 22, 3):
        e = np.zeros(22)
        e[p] = h
        rp = line_factor_residual((pts.ravel() + e).reshape(-1, 2), D3L, GRAD, segments)
        rm = line_factor_residual((pts.ravel() - e).reshape(-1, 2), D3L, GRAD, segments)
        assert np.allclose(J[:, p], (rp - rm) / (2 * h), atol=1e-4 * GRAD)
    assert np.allclose(r, line_factor_residual(pts, D3L, GRAD, segments))


# ---------------------------------------------------------------- properties


def smooth_curve(draw_coeffs):
    a, b, c = draw_coeffs
    xs = np.linspace(0, 12, 13)
    return np.column_stack([xs, a * xs + b * xs**2 / 10 + c * xs**3 / 100])


coeffs = st.tuples(st.floats(-0.5, 0.5), st.floats(-0.3, 0.3), st.floats(-0.2, 0.2))


@given(coeffs, st.floats(-200, 200), st.floats(-200, 200))
def test_translation_covariance(cf, tx, ty):
    pts = smooth_curve(cf)
    f, _ = fit_implicit_cubic(build_offset_lines(pts, D3L, GRAD))
    g, _ = fit_implicit_cubic(build_offset_lines(pts + [tx, ty], D3L, GRAD))
    q = pts + np.array([0.3, -0.4])
    a = f(*q.T)
    b = g(*(q + [tx, ty]).T)
    assert np.allclose(a, b, rtol=1e-6, atol=1e-6 * LEVEL)


@given(coeffs)
def test_relaxed_fit_never_worse_than_fixed_targets(cf):
    pts = smooth_curve(cf)
    _, eps = fit_implicit_cubic(build_offset_lines(pts, D3L, GRAD))
    eps_fixed = fixed_gradient_three_l(pts, D3L, GRAD, anchors=(0, 6, 12))
    assert eps <= eps_fixed * (1 + 1e-9) + 1e-9


@given(st.lists(st.floats(-1, 1), min_size=10, max_size=10))
def test_zero_set_round_trip(cvec):
    # points on the zero set of a random cubic y = p(x): f = y - p(x) is in the family
    c = np.array(cvec) * [0.3, 0.05, 0.005, 0, 0, 0, 1, 0, 0, 0]
    xs = np.linspace(-4, 4, 17)
    ys = c[6] + c[0] * xs + c[1] * xs**2 + c[2] * xs**3
    pts = np.column_stack([xs, ys])
    slope = np.abs(c[0] + 2 * c[1] * xs + 3 * c[2] * xs**2)
    if slope.max() > 2.0:
        return
    f, _ = fit_implicit_cubic(build_offset_lines(pts, D3L, GRAD))
    # first-order distance from each sample to the fitted zero set
    h = 1e-5
    gx = (f(xs + h, ys) - f(xs - h, ys)) / (2 * h)
    gy = (f(xs, ys + h) - f(xs, ys - h)) / (2 * h)
    dist = np.abs(f(xs, ys)) / np.hypot(gx, gy)
    assert np.all(dist <= 0.05 * D3L)
