import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcfgaze import geom
from pcfgaze.errors import InvalidInputError

finite_angle = st.floats(-10.0, 10.0, allow_nan=False)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_forward_gaze_is_minus_z():
    np.testing.assert_allclose(geom.angles_to_vector([0.0, 0.0]), [0.0, 0.0, -1.0], atol=0)


def test_pole():
    np.testing.assert_allclose(geom.angles_to_vector([np.pi / 2, 0.0]), [0.0, -1.0, 0.0], atol=1e-16)
    pitch, yaw = geom.vector_to_angles([0.0, -1.0, 0.0])
    assert pitch == pytest.approx(np.pi / 2)
    assert yaw == 0.0


def test_round_trip_example():
    v = geom.angles_to_vector([0.3, -0.7])
    np.testing.assert_allclose(geom.vector_to_angles(v), [0.3, -0.7], atol=1e-12)


def test_vector_to_angles_identity_case():
    np.testing.assert_array_equal(geom.vector_to_angles([0.0, 0.0, -1.0]), [0.0, 0.0])


def test_random_vectors_round_trip():
    v = random_unit(np.random.default_rng(0), 1000)
    np.testing.assert_allclose(geom.angles_to_vector(geom.vector_to_angles(v)), v, atol=1e-12)


def test_yaw_range_is_half_open():
    # straight backward gaze: yaw must be +pi, never -pi
    _, yaw = geom.vector_to_angles([-0.0, 0.0, 1.0])
    assert yaw == pytest.approx(np.pi)
    _, yaw = geom.vector_to_angles([0.0, 0.0, 1.0])
    assert yaw == pytest.approx(np.pi)


def test_non_unit_rejected():
    with pytest.raises(InvalidInputError):
        geom.vector_to_angles([0.0, 0.0, -1.1])
    with pytest.raises(InvalidInputError):
        geom.angular_difference([0, 0, 2.0], [0, 0, -1.0])


@pytest.mark.parametrize("a,b,expected", [
    ([0, 0, -1], [0, 0, -1], 0.0),
    ([0, 0, -1], [0, 0, 1], np.pi),
    ([0, 0, -1], [0, -1, 0], np.pi / 2),
])
def test_angular_difference_examples(a, b, expected):
    assert geom.angular_difference(a, b) == pytest.approx(expected, abs=1e-15)


def test_angular_difference_is_metric():
    rng = np.random.default_rng(1)
    a, b, c = (random_unit(rng, 2000) for _ in range(3))
    ab, bc, ac = geom.angular_difference(a, b), geom.angular_difference(b, c), geom.angular_difference(a, c)
    assert np.all(ab >= 0)
    np.testing.assert_array_equal(ab, geom.angular_difference(b, a))
    assert np.all(ac <= ab + bc + 1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3), st.floats(-np.pi + 1e-9, np.pi))
def test_angles_round_trip_property(pitch, yaw):
    back = geom.vector_to_angles(geom.angles_to_vector([pitch, yaw]))
    np.testing.assert_allclose(back, [pitch, yaw], atol=1e-10)


def test_rotation_examples():
    np.testing.assert_array_equal(geom.rotation_from_euler(0, 0, 0), np.eye(3))
    R = geom.rotation_from_euler(np.pi, 0, 0)
    np.testing.assert_allclose(R @ [1, 0, 0], [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 1, 0], [0, -1, 0], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 0, 1], [0, 0, 1], atol=1e-15)


def test_rotation_is_composed_zyx():
    z, y, x = 0.4, -0.2, 1.1
    Rx = np.array([[1, 0, 0], [0, np.cos(x), -np.sin(x)], [0, np.sin(x), np.cos(x)]])
    Ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    Rz = np.array([[np.cos(z), -np.sin(z), 0], [np.sin(z), np.cos(z), 0], [0, 0, 1]])
    np.testing.assert_allclose(geom.rotation_from_euler(z, y, x), Rz @ Ry @ Rx, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(finite_angle, finite_angle, finite_angle)
def test_rotation_orthonormal_property(z, y, x):
    R = geom.rotation_from_euler(z, y, x)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    v = np.array([0.3, -1.2, 2.5])
    assert np.linalg.norm(R @ v) == pytest.approx(np.linalg.norm(v), abs=1e-12)


@pytest.mark.parametrize("angles", [(0.3, -0.4, 1.0), (2.0, 1.2, -2.5), (0.1, np.pi / 2, 0.3), (-1.0, -np.pi / 2, 0.7)])
def test_euler_from_rotation_reproduces_matrix(angles):
    R = geom.rotation_from_euler(*angles)
    np.testing.assert_allclose(geom.rotation_from_euler(*geom.euler_from_rotation(R)), R, atol=1e-12)
