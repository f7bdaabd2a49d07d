import numpy as np
import pytest
import torch
import torch.nn as nn

from colreg.batches import make_selfsup_batch
from colreg.errors import ArchitectureMismatch, ShapeMismatch, ShapeNotDivisible
from colreg.geometry import CornerDisplacement, random_homography, warp
from colreg.regnet import (
    RegNetwork,
    RegPrediction,
    UpdateBlock,
    clone_parameters,
    cost_volume,
    fgo_surrogate,
    inverse_displacement,
    iteration_errors,
    loss_displacement,
    loss_pseudo,
    register,
)


def _tiny_net(seed=0, **kwargs):
    torch.manual_seed(seed)
    params = {"width": 8, "hidden": 8, "radius": 1}
    params.update(kwargs)
    return RegNetwork(**params)


def _pair(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(2, 1, 32, 32, generator=gen), torch.rand(2, 1, 32, 32, generator=gen)


def test_register_returns_one_estimate_per_iteration():
    x1, x2 = _pair()
    pred = register(_tiny_net(), x1, x2)
    assert len(pred) == 8
    assert pred.final.shape == (2, 4, 2)
    assert all(torch.isfinite(d).all() for d in pred.deltas)
    assert pred.as_numpy().shape == (8, 2, 4, 2)
    assert isinstance(pred.final_displacement(1), CornerDisplacement)


def test_iteration_schedule_is_configurable():
    x1, x2 = _pair()
    assert len(register(_tiny_net(iterations=(1, 0, 2, 1)), x1, x2)) == 4
    with pytest.raises(ValueError):
        RegNetwork(iterations=(0, 0, 0, 0))
    with pytest.raises(ValueError):
        RegNetwork(iterations=(1, 1))


def test_register_accepts_unbatched_images():
    x1, x2 = _pair()
    assert register(_tiny_net(), x1[0], x2[0]).final.shape == (1, 4, 2)


def test_register_shape_checks():
    net = _tiny_net()
    with pytest.raises(ShapeMismatch):
        register(net, torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 40))
    with pytest.raises(ShapeMismatch):
        register(net, torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
    with pytest.raises(ShapeNotDivisible):
        register(net, torch.rand(1, 1, 36, 36), torch.rand(1, 1, 36, 36))


def test_cost_volume_of_identical_features():
    f = torch.randn(1, 4, 6, 6)
    corr = cost_volume(f, f, radius=1)
    assert corr.shape == (1, 9, 6, 6)
    # zero shift sits in the middle of the window
    torch.testing.assert_close(corr[:, 4], (f * f).sum(dim=1) / 2.0)


def test_loss_is_zero_for_exact_prediction():
    gt = torch.randn(2, 4, 2)
    pred = RegPrediction([gt.clone(), gt.clone()])
    assert float(loss_displacement(pred, gt)) == 0.0


def test_l1_and_fgo_arithmetic():
    gt = torch.zeros(1, 4, 2)
    pred = RegPrediction([torch.full((1, 4, 2), 2.0), torch.full((1, 4, 2), 1.0)])
    errors = iteration_errors(pred, gt)
    assert float(sum(errors)) == pytest.approx(3.0)
    assert float(fgo_surrogate(errors)) == pytest.approx(2.7)
    assert float(loss_displacement(pred, gt)) == pytest.approx(5.7)


def test_fgo_grows_with_residual():
    gt = torch.zeros(1, 4, 2)
    small = fgo_surrogate(iteration_errors(RegPrediction([torch.full((1, 4, 2), 0.5)]), gt))
    large = fgo_surrogate(iteration_errors(RegPrediction([torch.full((1, 4, 2), 1.5)]), gt))
    assert float(small) < float(large)
    assert float(fgo_surrogate(iteration_errors(RegPrediction([gt]), gt))) == 0.0


def test_loss_accepts_corner_displacement_targets():
    dp = CornerDisplacement(np.ones((4, 2)))
    pred = RegPrediction([torch.ones(1, 4, 2, dtype=torch.float64)])
    assert float(loss_displacement(pred, dp)) == 0.0
    assert float(loss_displacement(RegPrediction([torch.zeros(2, 4, 2, dtype=torch.float64)]), [dp, dp])) == pytest.approx(2.0)


def test_pseudo_loss_blocks_label_gradients():
    pl = torch.ones(1, 4, 2, requires_grad=True)
    pred = RegPrediction([torch.zeros(1, 4, 2, requires_grad=True)])
    loss_pseudo(pred, pl).backward()
    assert pl.grad is None
    assert float(loss_pseudo(RegPrediction([pl.detach()]), pl)) == float(loss_displacement(RegPrediction([pl.detach()]), pl.detach()))


def test_displacement_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    block = UpdateBlock(corr_channels=9, hidden=3, layers=2).double()
    corr = torch.randn(2, 9, 4, 4, dtype=torch.float64)
    gt = torch.randn(2, 4, 2, dtype=torch.float64)
    names = [name for name, _ in block.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in block.parameters())

    def objective(*ps):
        out = torch.func.functional_call(block, dict(zip(names, ps)), (corr,))
        return loss_displacement(RegPrediction([0.5 * out, out]), gt)

    assert torch.autograd.gradcheck(objective, params, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_clone_gives_identical_independent_network():
    net = _tiny_net(0)
    other = _tiny_net(1)
    clone_parameters(net, other)
    x1, x2 = _pair()
    net.eval()
    other.eval()
    with torch.no_grad():
        torch.testing.assert_close(register(net, x1, x2).final, register(other, x1, x2).final, rtol=0, atol=0)
        next(other.parameters()).add_(1.0)
    assert not torch.equal(next(net.parameters()), next(other.parameters()))
    fresh = clone_parameters(net)
    assert fresh is not net
    assert torch.equal(next(fresh.parameters()), next(net.parameters()))


def test_clone_rejects_other_architectures():
    with pytest.raises(ArchitectureMismatch):
        clone_parameters(_tiny_net(width=8), _tiny_net(width=16))


def test_architecture_round_trip():
    net = _tiny_net(iterations=(1, 2, 3, 4))
    assert RegNetwork(**net.architecture()).architecture() == net.architecture()


def test_inverse_displacement_round_trip(rng):
    _, dp = random_homography(rng, 6.0, (32, 32))
    back = inverse_displacement(inverse_displacement(dp, (32, 32)), (32, 32))
    np.testing.assert_allclose(back.dp, dp.dp, atol=1e-8)


def _textures(n, size, generator):
    """Multi-scale smooth noise in [-1, 1]"""
    img = sum(
        nn.functional.interpolate(torch.rand(n, 1, size // s, size // s, generator=generator), size=(size, size), mode="bilinear", align_corners=True)
        for s in (16, 8, 4)
    )
    lo = img.amin(dim=(-2, -1), keepdim=True)
    hi = img.amax(dim=(-2, -1), keepdim=True)
    return 2.0 * (img - lo) / (hi - lo) - 1.0


def _mace(net, x1, x2, gt):
    with torch.no_grad():
        final = register(net.eval(), x1, x2).final
    return float((final - gt).norm(dim=-1).mean())


def _fit(net, sample, steps, lr=1e-3):
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps + 1)
    net.train()
    for _ in range(steps):
        x1, x2, gt = sample()
        opt.zero_grad()
        loss_displacement(register(net, x1, x2), gt).backward()
        nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()


@pytest.mark.slow
def test_mono_modal_training_reaches_three_pixels():
    rho, size = 8.0, 64
    gen = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    x1 = _textures(64, size, gen)
    moved, gts = [], []
    for i in range(64):
        h, dp = random_homography(rng, rho, (size, size))
        moved.append(warp(x1[i:i + 1].double(), h)[0].float())
        gts.append(torch.as_tensor(dp.dp, dtype=torch.float32))
    x2, gt = torch.cat(moved), torch.stack(gts)

    torch.manual_seed(0)
    net = RegNetwork(width=16, hidden=32, radius=2, iterations=(1, 1, 1, 1))
    before = _mace(net, x1, x2, gt)
    assert before > rho / 2

    def sample(batch=8):
        idx = torch.randint(0, 64, (batch,), generator=gen)
        return x1[idx], x2[idx], gt[idx]

    _fit(net, sample, 2000)
    assert _mace(net, x1, x2, gt) < 3.0


@pytest.mark.slow
def test_identity_translation_reduces_to_mono_modal_self_supervision():
    rho, size = 6.0, 64
    gen = torch.Generator().manual_seed(1)
    rng = np.random.default_rng(1)

    def identity(x):
        return x.clone()

    def sample(batch=8):
        b = make_selfsup_batch(_textures(batch, size, gen), rho, identity, rng)
        return b.x_s_prime, b.x_s2t, b.gt

    held = make_selfsup_batch(_textures(32, size, torch.Generator().manual_seed(99)), rho, identity, 99)
    torch.manual_seed(0)
    net = RegNetwork(width=16, hidden=32, radius=2, iterations=(1, 1, 1, 1))
    _fit(net, sample, 2000)
    assert _mace(net, held.x_s_prime, held.x_s2t, held.gt) < 2.0
