import numpy as np
import torch
import torch.nn as nn

from colreg.batches import PseudoLabelStats, make_pseudo_labels, make_selfsup_batch, make_warped_pair
from colreg.geometry import CornerDisplacement, corners_to_homography, invert, random_homography, warp
from colreg.regnet import RegNetwork


def identity(x):
    return x.clone()


class OracleNet(nn.Module):
    """Stands in for a registration network; always answers `dp`"""

    def __init__(self, dp: torch.Tensor, in_channels: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.dp = dp

    def forward(self, x1, x2):
        return [self.dp.to(x1.dtype).expand(x1.shape[0], 4, 2)]


def corners_to_homography_from(dp):
    return corners_to_homography(CornerDisplacement(dp.double().numpy()), (32, 32))


def test_warped_pair_matches_its_displacement(gradient_image):
    pair = make_warped_pair(gradient_image.repeat(2, 1, 1, 1), rho=3.0, seed=0)
    assert pair.x_warped.shape == (2, 1, 32, 32)
    assert pair.dp.shape == (2, 4, 2)
    h = corners_to_homography_from(pair.dp[1])
    expected, _ = warp(gradient_image, h)
    torch.testing.assert_close(pair.x_warped[1:], expected)


def test_selfsup_without_perturbation_is_exact_copy(gradient_image):
    batch = make_selfsup_batch(gradient_image, 0.0, identity, seed=0)
    assert torch.equal(batch.x_s_prime, gradient_image)
    assert bool((batch.gt == 0).all())
    assert bool((batch.mask == 1).all())


def test_selfsup_is_seeded(gradient_image):
    a = make_selfsup_batch(gradient_image, 4.0, identity, seed=5)
    b = make_selfsup_batch(gradient_image, 4.0, identity, seed=5)
    assert torch.equal(a.x_s_prime, b.x_s_prime)
    assert torch.equal(a.gt, b.gt)


def test_selfsup_ground_truth_maps_back_onto_translation(gradient_image):
    batch = make_selfsup_batch(gradient_image, 4.0, identity, seed=1)
    h = corners_to_homography_from(batch.gt[0])
    restored, mask = warp(batch.x_s_prime, h)
    carried, _ = warp(batch.mask, h)
    valid = (mask > 0) & (carried >= 1 - 1e-6)
    assert valid.sum() > 0
    assert float((restored - batch.x_s2t).abs()[valid].max()) < 1e-3


def test_selfsup_translator_runs_without_gradients(gradient_image):
    seen = []

    def translator(x):
        seen.append(torch.is_grad_enabled())
        return x

    make_selfsup_batch(gradient_image, 2.0, translator, seed=0)
    assert seen == [False]


def test_zero_prediction_gives_identity_labels(gradient_image):
    torch.manual_seed(0)
    net = RegNetwork(width=8, hidden=8, radius=1)
    for block in net.updates:
        nn.init.zeros_(block.head.weight)
        nn.init.zeros_(block.head.bias)
    x = gradient_image.float().repeat(2, 1, 1, 1)
    stats = PseudoLabelStats()
    batches = list(make_pseudo_labels(net, [(x, x)], stats))
    assert len(batches) == 1
    assert bool((batches[0].pl == 0).all())
    torch.testing.assert_close(batches[0].x_tw, x)
    assert bool((batches[0].mask == 1).all())
    assert stats.pairs == 2 and stats.skipped == 0


def test_oracle_labels_realign_target(gradient_image, rng):
    h, dp = random_homography(rng, 3.0, (32, 32))
    x_s = gradient_image
    x_t, _ = warp(x_s, h)
    oracle = OracleNet(torch.as_tensor(dp.dp)[None])
    batch = next(make_pseudo_labels(oracle, [(x_s, x_t)]))
    carried, _ = warp(warp(torch.ones_like(x_s), h)[1], invert(h))
    valid = (batch.mask > 0) & (carried >= 1 - 1e-6)
    aligned = float((batch.x_tw - x_s).abs()[valid].mean())
    unaligned = float((x_t - x_s).abs()[valid].mean())
    assert aligned < 1e-3
    assert aligned < unaligned


def test_degenerate_predictions_are_skipped():
    bad = np.zeros((4, 2))
    bad[1] = [-15.5, 15.5]
    oracle = OracleNet(torch.as_tensor(bad)[None])
    stats = PseudoLabelStats()
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
    assert list(make_pseudo_labels(oracle, [(x, x)], stats)) == []
    assert stats.skipped == 2
    assert stats.skipped_ids == [0, 1]
    assert stats.batches == 0
