import numpy as np
import pytest
import torch

from ganmel.dataio import MelSpectrogram
from ganmel.discriminator import (
    DiscriminatorConfig,
    JCUDiscriminator,
    crop_offset,
    crop_pair,
    crop_window,
)
from ganmel.losses import d_loss_jcu
from fdcheck import check_gradients

CFG = DiscriminatorConfig()


def make_disc(cfg=CFG, speaker_dim=16, seed=0):
    torch.manual_seed(seed)
    return JCUDiscriminator(cfg, speaker_dim)


# ------------------------------------------------------------------ structure

def test_score_shapes_for_64_frames():
    disc = make_disc()
    out = disc(torch.randn(3, 80, 64), torch.randn(3, 16))
    assert out.uncond.shape == (3, 1, 16)
    assert out.cond.shape == (3, 1, 16)


def test_feature_list_shapes():
    disc = make_disc()
    out = disc(torch.randn(1, 80, 64), torch.randn(1, 16))
    assert [f.shape[1] for f in out.features] == [64, 128, 512, 128, 1]
    assert [f.shape[2] for f in out.features] == [64, 32, 16, 16, 16]


def test_conditional_branch_input_channels():
    disc = make_disc()
    assert disc.cond_head[0].in_channels == 512 + CFG.cond_proj_dim


def test_architecture_matches_config():
    disc = make_disc()
    shared = list(disc.shared)
    assert [c.out_channels for c in shared] == [64, 128, 512]
    assert [c.kernel_size[0] for c in shared] == [3, 5, 5]
    assert [c.stride[0] for c in shared] == [1, 2, 2]
    for head in (disc.uncond_head, disc.cond_head):
        assert [c.out_channels for c in head] == [128, 1]
        assert [c.kernel_size[0] for c in head] == [5, 3]
        assert [c.stride[0] for c in head] == [1, 1]


def test_zeroed_final_convs_give_zero_scores():
    disc = make_disc()
    with torch.no_grad():
        disc.uncond_head[-1].weight.zero_()
        disc.uncond_head[-1].bias.zero_()
        disc.cond_head[-1].weight.zero_()
        disc.cond_head[-1].bias.zero_()
    out = disc(torch.randn(2, 80, 32), torch.randn(2, 16))
    assert torch.equal(out.uncond, torch.zeros_like(out.uncond))
    assert torch.equal(out.cond, torch.zeros_like(out.cond))


def test_window_too_short_errors():
    disc = make_disc()
    with pytest.raises(ValueError, match="window too short"):
        disc(torch.randn(1, 80, 15), torch.randn(1, 16))


def test_condition_changes_cond_only():
    disc = make_disc()
    mel = torch.randn(1, 80, 32)
    a = disc(mel, torch.randn(1, 16))
    b = disc(mel, torch.randn(1, 16))
    assert torch.equal(a.uncond, b.uncond)
    assert not torch.equal(a.cond, b.cond)
    for fa, fb in zip(a.features, b.features):
        assert torch.equal(fa, fb)  # feature list is condition-free


def test_not_scale_invariant():
    disc = make_disc()
    mel = torch.randn(1, 80, 32)
    spk = torch.randn(1, 16)
    assert not torch.equal(disc(mel, spk).uncond, disc(2.0 * mel, spk).uncond)


@pytest.mark.parametrize("frames", [16, 21, 33, 64, 100])
def test_feature_shape_alignment(frames):
    # two inputs of equal shape always give pairwise equal feature shapes
    disc = make_disc()
    spk = torch.randn(2, 16)
    a = disc(torch.randn(2, 80, frames), spk)
    b = disc(torch.randn(2, 80, frames), spk)
    assert len(a.features) == len(b.features) == 5
    for fa, fb in zip(a.features, b.features):
        assert fa.shape == fb.shape
    assert a.uncond.shape[-1] == -(-frames // 4)  # ceil(T/4)
    assert a.uncond.shape[-1] == a.cond.shape[-1]


def test_config_validation():
    with pytest.raises(ValueError):
        DiscriminatorConfig(shared_kernels=(3, 5))
    with pytest.raises(ValueError):
        DiscriminatorConfig(leaky_slope=1.5)


# ------------------------------------------------------------------- gradients

def test_discriminator_gradients_match_finite_differences():
    # reduced channel widths keep the exhaustive part fast; same topology
    cfg = DiscriminatorConfig(
        in_channels=8,
        shared_channels=(6, 8, 12),
        head_channels=(6, 1),
        cond_proj_dim=5,
    )
    disc = make_disc(cfg, speaker_dim=7, seed=1).double()
    mel = torch.randn(1, 8, 32, dtype=torch.float64)
    fake = torch.randn(1, 8, 32, dtype=torch.float64)
    spk = torch.randn(1, 7, dtype=torch.float64)
    params = dict(disc.named_parameters())

    def loss_fn():
        return d_loss_jcu(disc(mel, spk), disc(fake, spk))

    counts = check_gradients(loss_fn, params)
    assert set(counts) == set(params)


# ------------------------------------------------------------------- crop_pair

def mel_of(frames, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((frames, 80)).astype(np.float32)
    if fill is not None:
        data[:] = fill
    return MelSpectrogram(data)


def test_crop_pair_shared_offset():
    real = mel_of(200, seed=1)
    fake = mel_of(200, seed=2)
    offsets = set()
    for trial in range(50):
        rng = np.random.default_rng(trial)
        rw, fw = crop_pair(real, fake, 128, rng)
        starts = np.flatnonzero((real.data == rw[0]).all(axis=1))
        assert len(starts) >= 1
        off = int(starts[0])
        assert 0 <= off <= 72
        assert np.array_equal(real.data[off : off + 128], rw)
        assert np.array_equal(fake.data[off : off + 128], fw)
        offsets.add(off)
    assert len(offsets) > 5  # offsets actually vary


def test_crop_pair_pads_short_inputs():
    real = mel_of(100, seed=3)
    fake = mel_of(100, seed=4)
    rw, fw = crop_pair(real, fake, 128, np.random.default_rng(0))
    assert rw.shape == fw.shape == (128, 80)
    assert np.array_equal(rw[:100], real.data)
    assert np.all(rw[100:] == 0.0)
    assert np.all(fw[100:] == 0.0)


def test_crop_pair_identical_inputs():
    real = mel_of(150, seed=5)
    rw, fw = crop_pair(real, MelSpectrogram(real.data.copy()), 64, np.random.default_rng(7))
    assert np.array_equal(rw, fw)


def test_crop_pair_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        crop_pair(mel_of(100), mel_of(101), 64, np.random.default_rng(0))


def test_crop_offset_range():
    rng = np.random.default_rng(11)
    seen = {crop_offset(200, 128, rng) for _ in range(300)}
    assert min(seen) == 0 and max(seen) == 72
    assert crop_offset(64, 128, rng) == 0


def test_crop_window_exact_slice():
    data = np.arange(40, dtype=np.float32).reshape(10, 4)
    assert np.array_equal(crop_window(data, 2, 3), data[2:5])
    padded = crop_window(data, 0, 12)
    assert padded.shape == (12, 4)
    assert np.all(padded[10:] == 0)
