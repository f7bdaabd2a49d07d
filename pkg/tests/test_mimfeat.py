import cv2
import numpy as np
import pytest
import torch

from colreg.datapipe import ingest, make_toy_dataset, to_tensor
from colreg.errors import EmptyMask, ShapeMismatch
from colreg.mimfeat import (
    LogGaborBank,
    MimEncoder,
    MimFeature,
    Provenance,
    compute_mim,
    encode_mim,
    handcrafted_condition,
    loss_mim_source,
    loss_mim_target,
    normalize_mim,
    save_feature_png,
)

SMALL_BANK = LogGaborBank(n_scales=2, n_orient=2)


def _random_image(seed=0, size=32):
    return torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, size=(1, 1, size, size)))


def test_constant_image_has_zero_mim():
    feat = compute_mim(torch.full((1, 1, 32, 32), 0.7, dtype=torch.float64), SMALL_BANK)
    assert float(feat.map.abs().max()) < 1e-10
    assert feat.provenance is Provenance.HANDCRAFTED
    assert not feat.learned


def test_single_orientation_is_summed_amplitude():
    bank = LogGaborBank(n_scales=3, n_orient=1)
    img = _random_image(1)
    filters = bank.one_sided(32, 32)
    spectrum = torch.fft.fft2(img)
    expected = sum(torch.fft.ifft2(spectrum * filters[s, 0]).abs() for s in range(3))
    torch.testing.assert_close(compute_mim(img, bank).map, expected, atol=1e-10, rtol=1e-10)


def test_matches_spatial_circular_convolution():
    img = _random_image(2)[0, 0].numpy()
    even_tf, odd_tf = SMALL_BANK.transfer_functions(32, 32)
    amplitude = np.zeros((SMALL_BANK.n_scales, SMALL_BANK.n_orient, 32, 32))
    for s in range(SMALL_BANK.n_scales):
        for o in range(SMALL_BANK.n_orient):
            k_even = np.fft.ifft2(even_tf[s, o].numpy()).real
            k_odd = np.fft.ifft2(odd_tf[s, o].numpy()).real
            e = np.zeros((32, 32))
            q = np.zeros((32, 32))
            for dy in range(32):
                for dx in range(32):
                    shifted = np.roll(img, shift=(dy, dx), axis=(0, 1))
                    e += k_even[dy, dx] * shifted
                    q += k_odd[dy, dx] * shifted
            amplitude[s, o] = np.sqrt(e ** 2 + q ** 2)
    expected = amplitude.sum(axis=0).max(axis=0)
    got = compute_mim(torch.from_numpy(img), SMALL_BANK).map[0, 0].numpy()
    assert np.abs(got - expected).max() / np.abs(expected).max() < 1e-4


def test_scales_linearly_and_ignores_offset():
    img = _random_image(3)
    base = compute_mim(img, SMALL_BANK).map
    scaled = compute_mim(2.5 * img + 0.3, SMALL_BANK).map
    torch.testing.assert_close(scaled, 2.5 * base, atol=1e-8, rtol=1e-6)


@pytest.mark.parametrize("a", [0.5, 2.0, 10.0])
@pytest.mark.parametrize("b", [-0.3, 0.4])
def test_normalized_mim_is_affine_invariant(a, b):
    img = _random_image(4)
    ref = normalize_mim(compute_mim(img, SMALL_BANK)).map
    got = normalize_mim(compute_mim(a * img + b, SMALL_BANK)).map
    assert float((ref - got).abs().max()) < 1e-5


def test_normalize_range_and_fixed_point():
    x = torch.linspace(0, 4, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
    out = normalize_mim(MimFeature(x)).map
    assert float(out.min()) == -1.0
    assert float(out.max()) == 1.0
    assert float(out[0, 0].flatten()[0]) == -1.0
    again = normalize_mim(MimFeature(out)).map
    torch.testing.assert_close(again, out)


def test_normalize_constant_maps_to_zero():
    out = normalize_mim(MimFeature(torch.full((2, 1, 4, 4), 3.0)))
    assert out.normalized
    assert bool((out.map == 0).all())


def test_index_map_is_orientation_index():
    feat = compute_mim(_random_image(5), LogGaborBank(n_scales=2, n_orient=4), index_map=True)
    values = feat.map.unique()
    assert bool(((values >= 0) & (values < 4)).all())
    assert bool((values == values.round()).all())


def test_handcrafted_condition_repeats_channels():
    img = _random_image(6).float()
    cond = handcrafted_condition(img, SMALL_BANK, channels=3)
    assert cond.map.shape == (1, 3, 32, 32)
    assert cond.map.dtype == torch.float32
    assert cond.normalized
    assert float(cond.map.abs().max()) <= 1.0 + 1e-6


def test_zero_head_encoder_outputs_zeros():
    enc = MimEncoder(in_channels=1, out_channels=2, width=8, depth=2, zero_head=True)
    feat = encode_mim(enc, torch.rand(2, 1, 16, 16), Provenance.LEARNED_SOURCE)
    assert feat.map.shape == (2, 2, 16, 16)
    assert bool((feat.map == 0).all())
    assert feat.learned


def test_encoder_is_deterministic_in_eval_mode():
    torch.manual_seed(0)
    enc = MimEncoder(width=8, depth=3).eval()
    x = torch.rand(1, 1, 16, 16)
    torch.testing.assert_close(encode_mim(enc, x).map, encode_mim(enc, x).map)
    assert float(encode_mim(enc, x).map.abs().max()) <= 1.0


def test_encoder_rejects_wrong_channels():
    enc = MimEncoder(in_channels=1, width=8, depth=2)
    with pytest.raises(ShapeMismatch):
        encode_mim(enc, torch.rand(1, 3, 16, 16))
    with pytest.raises(ValueError):
        MimEncoder(depth=1)


def test_encoder_architecture_round_trips():
    enc = MimEncoder(in_channels=3, out_channels=2, width=8, depth=4)
    assert MimEncoder(**enc.architecture()).architecture() == enc.architecture()


def test_target_loss():
    x = torch.rand(1, 1, 8, 8)
    mask = torch.ones(1, 1, 8, 8)
    assert float(loss_mim_target(x, x, mask)) == 0.0
    assert float(loss_mim_target(x, x + 1, mask)) == pytest.approx(1.0)
    half = torch.zeros(1, 1, 8, 8)
    half[..., :4] = 1.0
    other = x.clone()
    other[..., :4] += 2.0
    other[..., 4:] += 50.0
    assert float(loss_mim_target(x, other, half)) == pytest.approx(2.0)
    with pytest.raises(EmptyMask):
        loss_mim_target(x, x, torch.zeros(1, 1, 8, 8))


def test_source_loss():
    x = torch.zeros(1, 1, 8, 8)
    mask = torch.ones(1, 1, 8, 8)
    assert float(loss_mim_source(x, x, mask, x, x)) == 0.0
    assert float(loss_mim_source(x, x, mask, x + 0.5, x)) == pytest.approx(0.5)
    assert float(loss_mim_source(x + 0.3, x, mask, x + 0.2, x, lambda_mds=1.0)) == pytest.approx(0.5)
    assert float(loss_mim_source(x + 0.3, x, mask, x, x, lambda_mds=2.0)) == pytest.approx(0.6)


def test_save_feature_png_is_16_bit(tmp_path):
    feat = normalize_mim(compute_mim(_random_image(7), SMALL_BANK))
    path = save_feature_png(feat, tmp_path / "mim" / "feat.png")
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    assert pixels.dtype == np.uint16
    assert pixels.shape == (32, 32)
    expected = (feat.map[0, 0].numpy() + 1.0) / 2.0 * 65535.0
    assert np.abs(pixels - expected).max() <= 0.5 + 1e-6


def _toy_pairs(root):
    """{split: (sources, targets)} of a small aligned toy set"""
    make_toy_dataset(root, n_pairs=8, size=32, n_train=6)
    out = {}
    for split in ("train", "test"):
        pairs = [r.load() for r in ingest(root) if r.split == split]
        out[split] = torch.stack([to_tensor(s) for s, _ in pairs]), torch.stack([to_tensor(t) for _, t in pairs])
    return out


def test_target_encoder_learns_source_mim_on_aligned_pairs(tmp_path):
    pairs = _toy_pairs(tmp_path)
    x_s, x_t = pairs["train"]
    held_s, held_t = pairs["test"]
    target = handcrafted_condition(x_s, SMALL_BANK).map
    held_target = handcrafted_condition(held_s, SMALL_BANK).map
    mask, held_mask = torch.ones_like(target), torch.ones_like(held_target)

    torch.manual_seed(0)
    enc = MimEncoder(width=8, depth=3)
    opt = torch.optim.Adam(enc.parameters(), lr=2e-3)

    def held_out_loss():
        with torch.no_grad():
            return float(loss_mim_target(held_target, encode_mim(enc.eval(), held_t, Provenance.LEARNED_TARGET), held_mask))

    before = held_out_loss()
    enc.train()
    train_losses = []
    for _ in range(150):
        loss = loss_mim_target(target, encode_mim(enc, x_t, Provenance.LEARNED_TARGET), mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        train_losses.append(float(loss))
    after = held_out_loss()

    assert np.mean(train_losses[-10:]) < np.mean(train_losses[:10])
    assert after < before
