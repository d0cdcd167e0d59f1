import numpy as np
import pytest
from hypothesis import given, strategies as st

from ncr.geometry import (
    Ray,
    dot,
    normalize,
    offset_ray,
    orthonormal_basis,
    reflect_dir,
    spherical_to_dir,
)


def test_reflect_normal_incidence():
    n = np.array([0.0, 0.0, 1.0])
    assert np.allclose(reflect_dir(n, n), n)


def test_reflect_45_degrees():
    n = np.array([0.0, 0.0, 1.0])
    wo = normalize(np.array([1.0, 0.0, 1.0]))
    wr = reflect_dir(n, wo)
    assert np.allclose(wr, [-wo[0], 0.0, wo[2]])


def test_reflect_rejects_back_hemisphere():
    n = np.array([0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        reflect_dir(n, np.array([0.0, 0.0, -1.0]))
    with pytest.raises(ValueError):
        reflect_dir(n, np.array([1.0, 0.0, 0.0]))  # exactly grazing


@given(st.integers(0, 10_000))
def test_reflect_preserves_normal_component_and_flips_tangent(i):
    rng = np.random.default_rng(i)
    n = normalize(rng.normal(size=3))
    wo = normalize(rng.normal(size=3))
    if dot(n, wo) <= 1e-6:
        wo = normalize(wo - 2.0 * dot(n, wo) * n + 1e-3 * n)
    wr = reflect_dir(n, wo)
    assert np.isclose(np.linalg.norm(wr), 1.0)
    assert np.isclose(dot(n, wr), dot(n, wo))
    tang_o = wo - dot(n, wo) * n
    tang_r = wr - dot(n, wr) * n
    assert np.allclose(tang_r, -tang_o, atol=1e-12)


def test_reflect_batched_matches_scalar():
    rng = np.random.default_rng(3)
    n = normalize(rng.normal(size=(32, 3)))
    wo = normalize(np.abs(rng.normal(size=(32, 3))) * np.sign(n) + 0.5 * n)
    wo = normalize(wo)
    batched = reflect_dir(n, wo)
    for i in range(32):
        assert np.allclose(batched[i], reflect_dir(n[i], wo[i]))


@given(st.integers(0, 10_000))
def test_orthonormal_basis_is_orthonormal(i):
    rng = np.random.default_rng(i)
    n = normalize(rng.normal(size=3))
    t, b = orthonormal_basis(n)
    for v in (t, b):
        assert np.isclose(np.linalg.norm(v), 1.0)
        assert np.isclose(dot(v, n), 0.0, atol=1e-12)
    assert np.isclose(dot(t, b), 0.0, atol=1e-12)
    assert np.allclose(np.cross(t, b), n, atol=1e-12)


def test_orthonormal_basis_at_poles():
    for nz in (1.0, -1.0):
        t, b = orthonormal_basis(np.array([0.0, 0.0, nz]))
        assert np.isclose(np.abs(dot(np.cross(t, b), np.array([0.0, 0.0, nz]))), 1.0)


def test_spherical_to_dir_axis():
    n = normalize(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(spherical_to_dir(0.0, 0.3, n), n)
    d = spherical_to_dir(np.pi / 3, 1.1, n)
    assert np.isclose(dot(d, n), np.cos(np.pi / 3))


def test_ray_broadcasts_ranges():
    r = Ray(np.zeros((4, 3)), np.tile([0.0, 0.0, 1.0], (4, 1)), 0.0, 10.0)
    assert r.t_min.shape == (4,) and r.t_max.shape == (4,)
    assert r.count == 4


def test_offset_ray_moves_origin_toward_direction_side():
    x = np.zeros((1, 3))
    n = np.array([[0.0, 0.0, 1.0]])
    up = offset_ray(x, n, np.array([[0.0, 0.0, 1.0]]))
    down = offset_ray(x, n, np.array([[0.0, 0.0, -1.0]]))
    assert up.origin[0, 2] > 0.0
    assert down.origin[0, 2] < 0.0


def test_normalize_zero_raises():
    with pytest.raises(ValueError):
        normalize(np.zeros(3))
