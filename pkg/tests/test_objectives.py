import math
from types import SimpleNamespace

import pytest
import torch
from hypothesis import given, strategies as st

from model.camera import angles_to_view, focal_from_fov, generate_rays
from model.renderer import RayMarcher, ray_march
from training.errors import NonFiniteLossError
from training.objectives import (
    CategoryCenters,
    Discriminator,
    LossWeights,
    camera_cycle_loss,
    cosine_similarity,
    discriminator_loss_parts,
    gan_discriminator_loss,
    gan_generator_loss,
    init_centers,
    metric_loss,
    r1_penalty,
    recon_loss,
    sdf_regularizers,
    soft_iou_loss,
    total_loss,
)


def test_metric_loss_single_category_is_zero():
    centers = CategoryCenters(torch.tensor([[0.3, -0.2, 0.5]]))
    codes = torch.tensor([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    assert metric_loss(codes, torch.tensor([0, 0]), centers).item() == pytest.approx(0.0, abs=1e-7)


def test_metric_loss_equidistant_is_log2():
    centers = CategoryCenters(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    codes = torch.tensor([[1.0, 1.0]])
    assert metric_loss(codes, torch.tensor([0]), centers).item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_metric_loss_orthogonal_centers():
    centers = CategoryCenters(torch.eye(2, dtype=torch.float64), temperature=0.3)
    codes = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
    expected = math.log(1.0 + math.exp(-1.0 / 0.3))
    assert metric_loss(codes, torch.tensor([0]), centers).item() == pytest.approx(expected, rel=1e-9)


def test_metric_loss_moves_centers():
    centers = init_centers(3, 8, seed=0)
    codes = torch.randn(6, 8, generator=torch.Generator().manual_seed(0))
    metric_loss(codes, torch.tensor([0, 1, 2, 0, 1, 2]), centers).backward()
    assert centers.centers.grad is not None and float(centers.centers.grad.abs().sum()) > 0


def test_init_centers_range():
    centers = init_centers(5, 16, seed=1)
    assert centers.centers.shape == (5, 16)
    assert float(centers.centers.abs().max()) <= 1.0 / math.sqrt(16)
    assert torch.equal(centers.centers, init_centers(5, 16, seed=1).centers)


def test_cosine_similarity_zero_vector():
    with pytest.raises(ValueError):
        cosine_similarity(torch.zeros(3), torch.ones(3))
    assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([3.0, 0.0])).item() == pytest.approx(1.0)


def test_recon_loss():
    a = torch.zeros(1, 4, 2, 2)
    b = torch.full((1, 4, 2, 2), 0.5)
    assert recon_loss(a, b).item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        recon_loss(a, torch.zeros(1, 3, 2, 2))


def _views(*gammas):
    return angles_to_view(torch.tensor(gammas, dtype=torch.float64)).v


def test_camera_cycle_loss_values():
    v = _views([0.3, 1.0, -0.4])
    assert camera_cycle_loss(v, v).item() == pytest.approx(0.0, abs=1e-12)
    flipped = _views([0.3 + math.pi, 1.0 + math.pi, -0.4 + math.pi])
    assert camera_cycle_loss(v, flipped).item() == pytest.approx(2.0, abs=1e-12)
    quarter = _views([0.3 + math.pi / 2, 1.0, -0.4])
    assert camera_cycle_loss(v, quarter).item() == pytest.approx(1.0 / 3.0, abs=1e-12)


@given(st.floats(min_value=0.1, max_value=10.0))
def test_camera_cycle_loss_ignores_scale(s):
    v = _views([0.2, -1.3, 0.7])
    other = _views([0.5, -1.0, 0.1])
    assert camera_cycle_loss(v, other * s).item() == pytest.approx(camera_cycle_loss(v, other).item(), abs=1e-9)


def test_camera_cycle_loss_accepts_pose():
    pose = angles_to_view(torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    assert camera_cycle_loss(pose, pose.v).item() == pytest.approx(0.0, abs=1e-12)


def test_soft_iou_edge_cases():
    zeros = torch.zeros(2, 4, 4)
    ones = torch.ones(2, 4, 4)
    assert soft_iou_loss(zeros, zeros).item() == 0.0
    assert soft_iou_loss(ones, ones).item() == pytest.approx(0.0)
    assert soft_iou_loss(ones, zeros).item() == pytest.approx(1.0)
    half = torch.zeros(1, 2, 2)
    half[0, 0] = 1.0
    assert soft_iou_loss(half, torch.ones(1, 2, 2)).item() == pytest.approx(0.5)


def _discriminator(conditional=True, seed=0):
    torch.manual_seed(seed)
    return Discriminator(num_classes=3, channels=(8, 16, 16, 16, 16), conditional=conditional)


def test_discriminator_spectral_norm_bounded():
    disc = _discriminator()
    disc.train()
    images = torch.rand(1, 4, 32, 32)
    # 每次 train 模式前向做一次幂迭代，迭代足够多次后估计值收敛到真实谱范数
    with torch.no_grad():
        for _ in range(500):
            disc(images, torch.tensor([1]))
    weights = disc.normalized_weights()
    assert len(weights) == 7
    for weight in weights:
        sigma = torch.linalg.matrix_norm(weight.detach().double(), ord=2).item()
        assert sigma <= 1.0 + 1e-3


def test_projection_uses_label():
    disc = _discriminator().eval()
    images = torch.rand(2, 4, 32, 32)
    a = disc(images, torch.tensor([0, 0]))
    b = disc(images, torch.tensor([1, 1]))
    assert not torch.allclose(a, b)
    plain = _discriminator(conditional=False).eval()
    torch.testing.assert_close(plain(images, torch.tensor([0, 0])), plain(images, torch.tensor([1, 1])))


def test_discriminator_loss_parts_detach_fakes():
    disc = _discriminator()
    real = torch.rand(2, 4, 32, 32)
    fake = torch.rand(2, 4, 32, 32, requires_grad=True)
    labels = torch.tensor([0, 1])
    parts = discriminator_loss_parts(disc, real, labels, fake, labels, r1_gamma=10.0)
    assert set(parts) == {"d_base", "r1"}
    sum(parts.values()).backward()
    assert fake.grad is None
    with pytest.raises(ValueError):
        discriminator_loss_parts(disc, real[:0], labels[:0], fake, labels)


def test_r1_penalty_zero_for_constant_discriminator():
    class Constant(torch.nn.Module):
        def forward(self, images, labels):
            return torch.zeros(images.shape[0])

    assert r1_penalty(Constant(), torch.rand(2, 4, 8, 8), torch.tensor([0, 1])).item() == 0.0


def test_discriminator_learns_to_separate():
    disc = _discriminator()
    optimizer = torch.optim.Adam(disc.parameters(), lr=1e-3, betas=(0.0, 0.9))
    g = torch.Generator().manual_seed(0)
    real = torch.rand(8, 4, 32, 32, generator=g) * 0.2 + 0.8
    fake = torch.rand(8, 4, 32, 32, generator=g) * 0.2
    labels = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
    first = gan_discriminator_loss(disc, real, labels, fake, labels, r1_gamma=0.0).item()
    for _ in range(50):
        loss = gan_discriminator_loss(disc, real, labels, fake, labels, r1_gamma=0.0)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    assert loss.item() < first


def test_generator_loss_reaches_fake_images():
    disc = _discriminator()
    disc.requires_grad_(False)
    fake = torch.rand(2, 4, 32, 32, requires_grad=True)
    gan_generator_loss(disc, fake, torch.tensor([0, 2])).backward()
    assert fake.grad is not None and float(fake.grad.abs().sum()) > 0
    assert all(p.grad is None for p in disc.parameters())


def test_discriminator_gradcheck(float64):
    disc = _discriminator().double().eval()
    images = torch.rand(1, 4, 8, 8, requires_grad=True)
    labels = torch.tensor([1])
    assert torch.autograd.gradcheck(lambda x: disc(x, labels), (images,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_sdf_regularizers_vanish_for_true_sphere(float64):
    pose = angles_to_view(torch.tensor([0.4, 0.2, 0.0]))
    rays = generate_rays(pose, 16, focal_from_fov(16, 30.0))
    marcher = RayMarcher(feature_dim=4).double()

    def sdf_fn(p):
        return p.norm(dim=-1) - 0.5

    state = ray_march(sdf_fn, rays, marcher, 32)
    o, d = rays.origins, rays.directions
    t = -(o * d).sum(-1)
    gt_mask = (o + t[..., None] * d).norm(dim=-1) < 0.5
    total, parts = sdf_regularizers(sdf_fn, rays, state, gt_mask, margin=0.0)
    assert set(parts) == {"eikonal", "outside", "inside"}
    assert parts["eikonal"].item() == pytest.approx(0.0, abs=1e-9)
    assert parts["inside"].item() == pytest.approx(0.0, abs=1e-3)
    assert parts["outside"].item() == 0.0
    assert total.item() == pytest.approx(0.0, abs=1e-3)


def test_total_loss_weights_and_nan():
    weights = LossWeights(lambda_metric=0.5, lambda_gan=0.0, lambda_cam=2.0, lambda_sdf=1.0, soft_iou=0.1)
    parts = {"recon": torch.tensor(1.0), "metric": torch.tensor(2.0), "gan": torch.tensor(5.0),
             "cam": torch.tensor(0.5), "soft_iou": torch.tensor(1.0)}
    assert total_loss(parts, weights).item() == pytest.approx(1.0 + 1.0 + 0.0 + 1.0 + 0.1)
    with pytest.raises(NonFiniteLossError) as info:
        total_loss({"recon": torch.tensor(1.0), "cam": torch.tensor(float("nan"))}, weights)
    assert info.value.part == "cam"


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_gan=-0.1)


def _centers(values, temperature=0.3):
    """只带 centers 与 temperature 的中心对象，centers 可以是任意参与求导的张量。"""
    return SimpleNamespace(centers=values, temperature=temperature)


@pytest.mark.parametrize("alpha", [0.1, 10.0])
def test_metric_loss_ignores_scale(alpha):
    g = torch.Generator().manual_seed(3)
    codes = torch.randn(6, 5, generator=g, dtype=torch.float64)
    centers = torch.randn(3, 5, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 2, 1, 0])
    base = metric_loss(codes, labels, _centers(centers)).item()
    assert metric_loss(alpha * codes, labels, _centers(centers)).item() == pytest.approx(base, abs=1e-9)
    assert metric_loss(codes, labels, _centers(alpha * centers)).item() == pytest.approx(base, abs=1e-9)


@given(st.permutations(range(4)))
def test_metric_loss_ignores_category_order(perm):
    g = torch.Generator().manual_seed(4)
    codes = torch.randn(8, 6, generator=g, dtype=torch.float64)
    centers = torch.randn(4, 6, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 3, 2, 1, 0])
    perm = torch.tensor(perm)
    # 第 j 个新中心是原来的第 perm[j] 个，标签随之重新编号
    relabel = torch.argsort(perm)
    expected = metric_loss(codes, labels, _centers(centers)).item()
    permuted = metric_loss(codes, relabel[labels], _centers(centers[perm])).item()
    assert permuted == pytest.approx(expected, abs=1e-12)


@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=2 ** 16))
def test_metric_loss_lower_bound(num_categories, seed):
    tau = 0.3
    g = torch.Generator().manual_seed(seed)
    codes = torch.randn(5, 4, generator=g, dtype=torch.float64)
    centers = torch.randn(num_categories, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(num_categories, (5,), generator=g)
    bound = math.log(1.0 + (num_categories - 1) * math.exp(-2.0 / tau))
    assert metric_loss(codes, labels, _centers(centers, tau)).item() >= bound - 1e-12


@pytest.mark.parametrize("num_categories", [2, 3, 5])
def test_metric_loss_lower_bound_is_reached(num_categories):
    tau = 0.3
    # 所有样本都贴在自己的中心上，其余中心都在正对面
    centers = torch.zeros(num_categories, 3, dtype=torch.float64)
    centers[0, 0] = 1.0
    centers[1:, 0] = -2.0
    codes = torch.tensor([[0.5, 0.0, 0.0], [3.0, 0.0, 0.0]], dtype=torch.float64)
    bound = math.log(1.0 + (num_categories - 1) * math.exp(-2.0 / tau))
    loss = metric_loss(codes, torch.tensor([0, 0]), _centers(centers, tau)).item()
    assert loss == pytest.approx(bound, abs=1e-9)


def test_recon_loss_gradcheck(float64):
    g = torch.Generator().manual_seed(0)
    image = torch.rand(2, 4, 3, 3, generator=g, requires_grad=True)
    recon = torch.rand(2, 4, 3, 3, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(recon_loss, (image, recon), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_metric_loss_gradcheck(float64):
    g = torch.Generator().manual_seed(1)
    codes = torch.randn(4, 5, generator=g, requires_grad=True)
    centers = torch.randn(3, 5, generator=g, requires_grad=True)
    labels = torch.tensor([0, 2, 1, 2])

    def fn(s, c):
        return metric_loss(s, labels, _centers(c))

    assert torch.autograd.gradcheck(fn, (codes, centers), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_gan_generator_loss_gradcheck(float64):
    disc = _discriminator().double().eval()
    fake = torch.rand(2, 4, 8, 8, generator=torch.Generator().manual_seed(2), requires_grad=True)
    labels = torch.tensor([0, 2])

    def fn(x):
        return gan_generator_loss(disc, x, labels)

    assert torch.autograd.gradcheck(fn, (fake,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_camera_cycle_loss_gradcheck(float64):
    g = torch.Generator().manual_seed(3)
    sampled = (_views([0.3, 1.0, -0.4], [1.2, -2.0, 0.1]) * 1.5).requires_grad_(True)
    predicted = (torch.randn(2, 6, generator=g) + 0.5).requires_grad_(True)
    assert torch.autograd.gradcheck(camera_cycle_loss, (sampled, predicted), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_soft_iou_loss_gradcheck(float64):
    g = torch.Generator().manual_seed(4)
    alpha = (0.05 + 0.9 * torch.rand(2, 4, 4, generator=g)).requires_grad_(True)
    mask = torch.rand(2, 4, 4, generator=g) > 0.5

    def fn(p):
        return soft_iou_loss(p, mask)

    assert torch.autograd.gradcheck(fn, (alpha,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_sdf_regularizers_gradcheck(float64):
    pose = angles_to_view(torch.tensor([0.4, 0.2, 0.0]))
    rays = generate_rays(pose, 8, focal_from_fov(8, 30.0))
    marcher = RayMarcher(feature_dim=4).double()
    o, d = rays.origins, rays.directions
    t = -(o * d).sum(-1)
    gt_mask = (o + t[..., None] * d).norm(dim=-1) < 0.45
    center = torch.tensor([0.05, -0.03, 0.02], requires_grad=True)
    shape = torch.tensor([1.3, 0.4], requires_grad=True)

    def fn(c, s):
        def sdf_fn(p):
            return s[0] * (p - c).norm(dim=-1) - s[1]

        state = ray_march(sdf_fn, rays, marcher, 3)
        total, parts = sdf_regularizers(sdf_fn, rays, state, gt_mask, margin=0.01)
        return total, parts["eikonal"], parts["outside"], parts["inside"]

    assert torch.autograd.gradcheck(fn, (center, shape), eps=1e-6, atol=1e-5, rtol=1e-4)
