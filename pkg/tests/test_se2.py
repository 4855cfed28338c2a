import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from oracles import compose as compose_oracle
from sdspp import se2

coord = st.floats(-50, 50)
angle = st.floats(-10, 10)


def test_wrap_angle_range_and_pi():
    assert se2.wrap_angle(np.pi) == np.pi
    assert se2.wrap_angle(-np.pi) == np.pi
    assert abs(se2.wrap_angle(3 * np.pi) - np.pi) < 1e-12
    assert se2.wrap_angle(0.25) == 0.25


@given(angle)
def test_wrap_angle_in_half_open_interval(t):
    w = se2.wrap_angle(t)
    assert -np.pi < w <= np.pi
    assert abs(np.sin(w) - np.sin(t)) < 1e-9 and abs(np.cos(w) - np.cos(t)) < 1e-9


@given(coord, coord, angle, coord, coord, angle)
def test_compose_matches_matrix_product(x, y, t, dx, dy, dt):
    got = se2.compose((x, y, t), (dx, dy, dt))
    ref = compose_oracle(np.array([x, y, t]), np.array([dx, dy, dt]))
    assert np.allclose(got[:2], ref[:2], atol=1e-9)
    assert abs(se2.wrap_angle(got[2] - ref[2])) < 1e-9


@given(coord, coord, angle, coord, coord, angle)
def test_between_inverts_compose(x, y, t, dx, dy, dt):
    a = np.array([x, y, t])
    b = se2.compose(a, (dx, dy, dt))
    d = se2.between(a, b)
    assert np.allclose(d[:2], [dx, dy], atol=1e-8)
    assert abs(se2.wrap_angle(d[2] - dt)) < 1e-9


@given(coord, coord, angle, coord, coord)
def test_point_transform_round_trip(x, y, t, px, py):
    pose = (x, y, t)
    p = se2.transform_points(pose, [px, py])
    back = se2.inverse_transform_points(pose, p)
    assert np.allclose(back, [[px, py]], atol=1e-9)
