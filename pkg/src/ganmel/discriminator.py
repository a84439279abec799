"""Speaker-conditioned JCU mel discriminator.

One shared 1-D conv stack feeds two heads: an unconditional score head and a
conditional head that sees the shared features concatenated with a projected
speaker embedding broadcast along time. Plain convs + leaky ReLU throughout,
no normalization layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import MelSpectrogram

MIN_WINDOW = 16  # two stride-2 convs need at least this many frames


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 80
    shared_channels: tuple[int, ...] = (64, 128, 512)
    shared_kernels: tuple[int, ...] = (3, 5, 5)
    shared_strides: tuple[int, ...] = (1, 2, 2)
    head_channels: tuple[int, ...] = (128, 1)
    head_kernels: tuple[int, ...] = (5, 3)
    head_strides: tuple[int, ...] = (1, 1)
    leaky_slope: float = 0.2
    cond_proj_dim: int = 64

    def __post_init__(self):
        if not (len(self.shared_channels) == len(self.shared_kernels) == len(self.shared_strides)):
            raise ValueError("shared channel/kernel/stride lists must align")
        if not (len(self.head_channels) == len(self.head_kernels) == len(self.head_strides)):
            raise ValueError("head channel/kernel/stride lists must align")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must be in (0, 1)")


@dataclass
class JCUOutput:
    uncond: torch.Tensor            # (B, 1, T')
    cond: torch.Tensor              # (B, 1, T')
    features: list[torch.Tensor]    # 5 post-activation maps, shared + uncond path


def _same_pad(kernel: int) -> int:
    return (kernel - 1) // 2


class JCUDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, speaker_dim: int):
        super().__init__()
        self.cfg = cfg
        self.speaker_dim = speaker_dim
        self.shared = nn.ModuleList()
        ch = cfg.in_channels
        for out_ch, k, s in zip(cfg.shared_channels, cfg.shared_kernels, cfg.shared_strides):
            self.shared.append(nn.Conv1d(ch, out_ch, k, stride=s, padding=_same_pad(k)))
            ch = out_ch

        def make_head(in_ch):
            layers = nn.ModuleList()
            c = in_ch
            for out_ch, k, s in zip(cfg.head_channels, cfg.head_kernels, cfg.head_strides):
                layers.append(nn.Conv1d(c, out_ch, k, stride=s, padding=_same_pad(k)))
                c = out_ch
            return layers

        self.uncond_head = make_head(ch)
        self.cond_proj = nn.Linear(speaker_dim, cfg.cond_proj_dim)
        self.cond_head = make_head(ch + cfg.cond_proj_dim)

    def forward(self, mel: torch.Tensor, speaker_emb: torch.Tensor) -> JCUOutput:
        """mel: (B, in_channels, T) window; speaker_emb: (B, speaker_dim)."""
        if mel.dim() != 3 or mel.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, T) input")
        if mel.shape[-1] < MIN_WINDOW:
            raise ValueError("window too short")
        slope = self.cfg.leaky_slope

        feats = []
        x = mel
        for conv in self.shared:
            x = F.leaky_relu(conv(x), slope)
            feats.append(x)
        shared_out = x

        u = shared_out
        for i, conv in enumerate(self.uncond_head):
            u = conv(u)
            if i < len(self.uncond_head) - 1:
                u = F.leaky_relu(u, slope)
                feats.append(u)
        feats.append(u)  # raw unconditional score map

        s = F.leaky_relu(self.cond_proj(speaker_emb), slope)       # (B, cond_proj_dim)
        s = s.unsqueeze(-1).expand(-1, -1, shared_out.shape[-1])   # broadcast along time
        c = torch.cat([shared_out, s], dim=1)
        for i, conv in enumerate(self.cond_head):
            c = conv(c)
            if i < len(self.cond_head) - 1:
                c = F.leaky_relu(c, slope)

        return JCUOutput(uncond=u, cond=c, features=feats)


# ---------------------------------------------------------------------------
# window cropping for discriminator inputs

def crop_offset(n_frames: int, window: int, rng: np.random.Generator) -> int:
    """Random start offset for a window crop; 0 when the mel must be padded."""
    if n_frames <= window:
        return 0
    return int(rng.integers(0, n_frames - window + 1))


def crop_window(data: np.ndarray, offset: int, window: int) -> np.ndarray:
    """Slice (or zero-pad) frames [offset, offset+window) from a (T, bins) matrix."""
    if data.shape[0] >= offset + window:
        return data[offset : offset + window]
    out = np.zeros((window, data.shape[1]), dtype=data.dtype)
    out[: data.shape[0] - offset] = data[offset:]
    return out


def crop_pair(
    real: MelSpectrogram,
    fake: MelSpectrogram,
    window: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop aligned random windows from a real/fake mel pair.

    Both windows share one offset; shorter mels are zero-padded to `window`.
    """
    if real.n_frames != fake.n_frames:
        raise ValueError("length mismatch between real and fake mel")
    offset = crop_offset(real.n_frames, window, rng)
    return crop_window(real.data, offset, window), crop_window(fake.data, offset, window)
