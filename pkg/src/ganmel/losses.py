"""Training objectives: reconstruction, least-squares JCU adversarial losses,
feature matching, the automatic feature-matching weight, and the generator
total. Score maps are reduced by the mean over all cells.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import torch

from .discriminator import JCUOutput


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_p: float = 1.0
    lambda_e: float = 1.0
    lambda_fm_cap: float = 1e4

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_p, self.lambda_e, self.lambda_fm_cap) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Per-step loss record; one JSON object per line in the training log."""

    step: int
    l_mel: float
    l_dur: float
    l_pitch: float
    l_energy: float
    l_recon: float
    l_d: float = 0.0
    l_g_adv: float = 0.0
    l_fm: float = 0.0
    lambda_fm: float = 0.0
    l_g_total: float = 0.0

    @classmethod
    def build(
        cls,
        step: int,
        l_mel: float,
        l_dur: float,
        l_pitch: float,
        l_energy: float,
        w: LossWeights,
        l_d: float = 0.0,
        l_g_adv: float = 0.0,
        l_fm: float = 0.0,
        lambda_fm: float = 0.0,
    ) -> "LossReport":
        l_recon = eq1_sum(l_mel, l_dur, l_pitch, l_energy, w)
        l_g_total = l_g_adv + lambda_fm * l_fm + l_recon
        return cls(
            step=step, l_mel=l_mel, l_dur=l_dur, l_pitch=l_pitch, l_energy=l_energy,
            l_recon=l_recon, l_d=l_d, l_g_adv=l_g_adv, l_fm=l_fm,
            lambda_fm=lambda_fm, l_g_total=l_g_total,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def eq1_sum(l_mel, l_dur, l_pitch, l_energy, w: LossWeights):
    """Weighted reconstruction total; shared by loss code and step reports so
    the logged l_recon and the value used in the fm ratio agree bit-for-bit."""
    return l_mel + w.lambda_d * l_dur + w.lambda_p * l_pitch + w.lambda_e * l_energy


# ---------------------------------------------------------------------------
# masked reductions shared by the single-utterance and batched paths

def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None):
    if mask is None:
        return values.mean()
    while mask.dim() < values.dim():
        mask = mask.unsqueeze(-1)
    mask = mask.to(values.dtype).expand_as(values)
    return (values * mask).sum() / mask.sum()


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _masked_mean((pred - target).abs(), mask)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _masked_mean((pred - target) ** 2, mask)


def log_duration_target(durations: torch.Tensor) -> torch.Tensor:
    """Duration regression target, log(d + 1)."""
    return torch.log(durations.to(torch.get_default_dtype()) + 1.0)


def recon_loss(out, utt, w: LossWeights):
    """Eq.-1 style reconstruction loss for one teacher-forced utterance.

    `out` is a GeneratorOutput (mel_pred (T, bins), log_dur_pred (L,),
    pitch/energy (T,)); targets come from the Utterance. Returns the total
    plus the component dict (all torch scalars).
    """
    mel_t = torch.as_tensor(utt.mel.data, dtype=out.mel_pred.dtype)
    dur_t = torch.as_tensor(utt.durations)
    pitch_t = torch.as_tensor(utt.pitch, dtype=out.pitch_pred.dtype)
    energy_t = torch.as_tensor(utt.energy, dtype=out.energy_pred.dtype)

    comps = {
        "l_mel": masked_l1(out.mel_pred, mel_t),
        "l_dur": masked_mse(out.log_dur_pred, log_duration_target(dur_t).to(out.log_dur_pred.dtype)),
        "l_pitch": masked_mse(out.pitch_pred, pitch_t),
        "l_energy": masked_mse(out.energy_pred, energy_t),
    }
    total = eq1_sum(comps["l_mel"], comps["l_dur"], comps["l_pitch"], comps["l_energy"], w)
    return total, comps


# ---------------------------------------------------------------------------
# adversarial objectives (least-squares, joint conditional + unconditional)

def d_loss_jcu(real_out: JCUOutput, fake_out: JCUOutput) -> torch.Tensor:
    """Discriminator loss: fake scores to 0, real scores to 1, both branches."""
    if real_out.uncond.shape != fake_out.uncond.shape:
        raise ValueError("real/fake score maps must have the same shape")
    fake = (fake_out.uncond**2).mean() + (fake_out.cond**2).mean()
    real = ((real_out.uncond - 1.0) ** 2).mean() + ((real_out.cond - 1.0) ** 2).mean()
    return 0.5 * fake + 0.5 * real


def g_adv_loss(fake_out: JCUOutput) -> torch.Tensor:
    """Generator adversarial loss: both fake branches pushed toward 1."""
    return 0.5 * (((fake_out.uncond - 1.0) ** 2).mean() + ((fake_out.cond - 1.0) ** 2).mean())


def feature_matching(real_feats, fake_feats) -> torch.Tensor:
    """Sum over layers of the mean absolute feature difference."""
    if len(real_feats) != len(fake_feats):
        raise ValueError("feature lists must have the same length")
    total = None
    for r, f in zip(real_feats, fake_feats):
        if r.shape != f.shape:
            raise ValueError(f"feature shape mismatch {tuple(r.shape)} vs {tuple(f.shape)}")
        term = (r - f).abs().mean()
        total = term if total is None else total + term
    return total


def fm_scale(l_recon: float, l_fm: float, cap: float = 1e4) -> float:
    """Automatic feature-matching weight: recon/fm ratio, clamped to [0, cap].

    Both inputs must already be detached batch values; the result is used as
    a gradient-free constant for the following generator update.
    """
    if l_recon < 0 or l_fm < 0:
        raise ValueError("loss values must be non-negative")
    if l_fm == 0.0:
        return 0.0
    return min(l_recon / l_fm, cap)


def g_total_loss(l_g_adv, lambda_fm, l_fm, l_recon):
    """Generator total: adversarial + scaled feature matching + reconstruction."""
    return l_g_adv + lambda_fm * l_fm + l_recon
