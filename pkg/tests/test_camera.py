import math

import pytest
import torch
from hypothesis import given, strategies as st

from model.camera import (
    ViewPose,
    ViewPrior,
    ViewPredictor,
    angles_to_view,
    focal_from_fov,
    generate_rays,
    normalize_view,
    predict_view,
    sample_view_prior,
    view_to_angles,
    view_to_rotation,
)
from training.errors import DegenerateViewError

angle = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)
scale = st.floats(min_value=0.1, max_value=10.0)


@given(angle, angle, angle)
def test_rotation_is_orthonormal(a, b, c):
    rotation = angles_to_view(torch.tensor([a, b, c], dtype=torch.float64)).rotation[0]
    torch.testing.assert_close(rotation @ rotation.T, torch.eye(3, dtype=torch.float64), atol=1e-10, rtol=0)
    assert torch.det(rotation).item() == pytest.approx(1.0, abs=1e-10)


@given(angle, angle, angle, scale, scale, scale)
def test_rotation_ignores_pair_scale(a, b, c, s1, s2, s3):
    v = angles_to_view(torch.tensor([a, b, c], dtype=torch.float64)).v[0]
    factors = torch.tensor([s1, s2, s3, s1, s2, s3], dtype=torch.float64)
    torch.testing.assert_close(view_to_rotation(v * factors), view_to_rotation(v), atol=1e-10, rtol=0)


@given(angle, angle, angle)
def test_angles_round_trip(a, b, c):
    gamma = torch.tensor([[a, b, c]], dtype=torch.float64)
    recovered = view_to_angles(angles_to_view(gamma).v)
    diff = torch.atan2(torch.sin(recovered - gamma), torch.cos(recovered - gamma))
    assert float(diff.abs().max()) < 1e-9


def test_zero_angles_give_identity():
    torch.testing.assert_close(view_to_rotation(torch.tensor([1.0, 1, 1, 0, 0, 0])), torch.eye(3))


def test_rotation_composition_order():
    # Rz·Ry·Rx: 只有仰角时绕 x 轴旋转
    rotation = angles_to_view(torch.tensor([math.pi / 2, 0.0, 0.0], dtype=torch.float64)).rotation[0]
    expected = torch.tensor([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=torch.float64)
    torch.testing.assert_close(rotation, expected, atol=1e-12, rtol=0)


def test_degenerate_pair_raises():
    v = torch.tensor([1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    with pytest.raises(DegenerateViewError):
        view_to_rotation(v)
    with pytest.raises(DegenerateViewError):
        normalize_view(v[None])


def test_camera_center_on_optical_axis():
    pose = angles_to_view(torch.tensor([0.3, 1.1, -0.2], dtype=torch.float64), camera_distance=2.7)
    rays = generate_rays(pose, 5, focal_from_fov(5, 30.0))
    center = rays.origins[0, 0]
    assert center.norm().item() == pytest.approx(2.7)
    torch.testing.assert_close(rays.directions.norm(dim=-1), torch.ones(1, 25, dtype=torch.float64))


@given(angle, angle, angle)
def test_center_ray_passes_through_origin(a, b, c):
    pose = angles_to_view(torch.tensor([a, b, c], dtype=torch.float64), camera_distance=2.7)
    size = 33
    rays = generate_rays(pose, size, focal_from_fov(size, 30.0))
    mid = (size // 2) * size + size // 2
    point = rays.origins[0, mid] + 2.7 * rays.directions[0, mid]
    assert point.norm().item() < 1e-9


def test_azimuth_orbit():
    distance = 2.7
    base, delta = 0.4, 0.9
    c1 = generate_rays(angles_to_view(torch.tensor([0.0, base, 0.0], dtype=torch.float64), distance), 3, 5.0)
    c2 = generate_rays(angles_to_view(torch.tensor([0.0, base + delta, 0.0], dtype=torch.float64), distance), 3, 5.0)
    ry = angles_to_view(torch.tensor([0.0, delta, 0.0], dtype=torch.float64)).rotation[0]
    torch.testing.assert_close(c2.origins[0, 0], ry.T @ c1.origins[0, 0], atol=1e-12, rtol=0)


def test_weak_perspective_rays_are_parallel():
    pose = angles_to_view(torch.tensor([0.2, 0.5, 0.0], dtype=torch.float64))
    rays = generate_rays(pose, 7, focal_from_fov(7, 30.0), weak_perspective=True)
    directions = rays.directions[0]
    torch.testing.assert_close(directions, directions[:1].expand_as(directions))
    assert len({tuple(o.tolist()) for o in rays.origins[0]}) == 49


def test_focal_from_fov():
    assert focal_from_fov(64, 90.0) == pytest.approx(32.0)
    with pytest.raises(ValueError):
        generate_rays(angles_to_view(torch.zeros(3)), 4, 0.0)


def test_prior_sampling_deterministic_and_bounded():
    prior = ViewPrior(azimuth_lo=10.0, azimuth_hi=80.0, elevation_lo=20.0, elevation_hi=40.0,
                      tilt_dist="uniform", tilt_lo=-5.0, tilt_hi=5.0)
    pose_a, euler_a = sample_view_prior(prior, torch.Generator().manual_seed(3), batch_size=64)
    pose_b, euler_b = sample_view_prior(prior, torch.Generator().manual_seed(3), batch_size=64)
    assert torch.equal(euler_a, euler_b)
    assert torch.equal(pose_a.v, pose_b.v)
    assert isinstance(pose_a, ViewPose) and pose_a.batch_size == 64
    assert all(prior.contains(row.tolist()) for row in euler_a)


def test_prior_bounds_hold_over_many_draws():
    prior = ViewPrior(azimuth_lo=-30.0, azimuth_hi=210.0, elevation_lo=5.0, elevation_hi=45.0,
                      tilt_dist="uniform", tilt_lo=-10.0, tilt_hi=10.0)
    pose, euler = sample_view_prior(prior, torch.Generator().manual_seed(11), batch_size=100_000)
    for column, (lo, hi) in enumerate([(5.0, 45.0), (-30.0, 210.0), (-10.0, 10.0)]):
        values = euler[:, column]
        assert float(values.min()) >= lo and float(values.max()) <= hi
        # 均匀分布应铺满整个区间
        assert float(values.min()) < lo + 0.01 * (hi - lo)
        assert float(values.max()) > hi - 0.01 * (hi - lo)
    assert bool(torch.isfinite(pose.v).all())


def test_point_mass_prior():
    prior = ViewPrior.point_mass(30.0, 45.0)
    _, euler = sample_view_prior(prior, torch.Generator().manual_seed(0), batch_size=4)
    assert torch.equal(euler, torch.tensor([[30.0, 45.0, 0.0]] * 4, dtype=torch.float64))


def test_gaussian_elevation():
    prior = ViewPrior(elevation_dist="gaussian", elevation_mean=30.0, elevation_std=5.0)
    _, euler = sample_view_prior(prior, torch.Generator().manual_seed(0), batch_size=4000)
    assert float(euler[:, 0].mean()) == pytest.approx(30.0, abs=0.5)
    assert float(euler[:, 0].std()) == pytest.approx(5.0, abs=0.5)


def test_bad_prior_order():
    with pytest.raises(ValueError):
        ViewPrior(azimuth_lo=10.0, azimuth_hi=0.0)


def test_view_predictor_output():
    torch.manual_seed(0)
    predictor = ViewPredictor().eval()
    v = predict_view(torch.rand(2, 4, 32, 32), predictor)
    assert v.shape == (2, 6)
    torch.testing.assert_close(predictor.head.bias.detach(), torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))
    rotation = view_to_rotation(v)
    torch.testing.assert_close(rotation @ rotation.transpose(1, 2), torch.eye(3).expand(2, 3, 3), atol=1e-5, rtol=0)
