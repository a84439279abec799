"""Non-autoregressive multi-speaker acoustic model.

Phoneme encoder of FFT blocks (self-attention + two 1-D convs, post-norm),
speaker embedding added after the last encoder block, duration/pitch/energy
predictors, length regulation to frame rate, and a decoder stack that runs at
a reduced rate by channel-stacking adjacent frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import MelSpectrogram, Utterance


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    n_speakers: int
    hidden_dim: int = 128
    n_blocks_enc: int = 2
    n_blocks_dec: int = 2
    n_heads: int = 2
    conv_kernel: int = 3
    conv_filter_dim: int = 256
    speaker_dim: int = 64
    reduction_factor: int = 2
    max_frames: int = 4096
    mel_bins: int = 80
    dropout: float = 0.1
    var_kernel: int = 3
    var_filter_dim: int = 128
    var_dropout: float = 0.1
    n_variance_bins: int = 256
    # corpus statistics for variance normalization and quantization bins
    pitch_min: float = 0.0
    pitch_max: float = 600.0
    pitch_mean: float = 150.0
    pitch_std: float = 60.0
    energy_min: float = 0.0
    energy_max: float = 40.0
    energy_mean: float = 8.0
    energy_std: float = 4.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        if self.speaker_dim > self.hidden_dim:
            raise ValueError("speaker_dim must not exceed hidden_dim")
        if self.pitch_max <= self.pitch_min or self.energy_max <= self.energy_min:
            raise ValueError("variance ranges must be non-degenerate")


@dataclass
class GeneratorOutput:
    mel_pred: torch.Tensor       # (T, mel_bins)
    log_dur_pred: torch.Tensor   # (n_phonemes,)
    pitch_pred: torch.Tensor     # (T,)
    energy_pred: torch.Tensor    # (T,)

    def mel(self) -> MelSpectrogram:
        return MelSpectrogram(self.mel_pred.detach().cpu().numpy())


def sinusoidal_positions(length: int, dim: int, dtype, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), idx / dim)
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return pe


def length_regulate(hidden: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Repeat hidden[i] durations[i] times along the sequence axis."""
    durations = torch.as_tensor(durations, dtype=torch.long, device=hidden.device)
    if len(durations) != hidden.shape[0]:
        raise ValueError("durations must match the hidden sequence length")
    if torch.any(durations < 0):
        raise ValueError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise ValueError("empty expansion")
    return torch.repeat_interleave(hidden, durations, dim=0)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, length, hidden = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, length, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(b, length, hidden)
        return self.out(y)


class FFTBlock(nn.Module):
    """Self-attention -> residual + LayerNorm -> two convs -> residual + LayerNorm."""

    def __init__(self, hidden: int, n_heads: int, kernel: int, filter_dim: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden, n_heads, dropout)
        self.norm1 = nn.LayerNorm(hidden)
        pad = (kernel - 1) // 2
        self.conv1 = nn.Conv1d(hidden, filter_dim, kernel, padding=pad)
        self.conv2 = nn.Conv1d(filter_dim, hidden, kernel, padding=pad)
        self.norm2 = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.attn(x, mask)))
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        y = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        x = self.norm2(x + self.drop(y))
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        return x


class VariancePredictor(nn.Module):
    def __init__(self, hidden: int, filter_dim: int, kernel: int, dropout: float):
        super().__init__()
        pad = (kernel - 1) // 2
        self.conv1 = nn.Conv1d(hidden, filter_dim, kernel, padding=pad)
        self.norm1 = nn.LayerNorm(filter_dim)
        self.conv2 = nn.Conv1d(filter_dim, filter_dim, kernel, padding=pad)
        self.norm2 = nn.LayerNorm(filter_dim)
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(filter_dim, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        y = F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        y = self.drop(self.norm1(y))
        y = F.relu(self.conv2(y.transpose(1, 2))).transpose(1, 2)
        y = self.drop(self.norm2(y))
        out = self.proj(y).squeeze(-1)
        if mask is not None:
            out = out * mask.to(out.dtype)
        return out


def _quantize(x: torch.Tensor, vmin: float, vmax: float, n_bins: int) -> torch.Tensor:
    idx = (x - vmin) / (vmax - vmin) * n_bins
    return idx.floor().clamp(0, n_bins - 1).long()


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.phoneme_embed = nn.Embedding(cfg.vocab_size, h, padding_idx=0)
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, h)
        self.enc_blocks = nn.ModuleList(
            FFTBlock(h, cfg.n_heads, cfg.conv_kernel, cfg.conv_filter_dim, cfg.dropout)
            for _ in range(cfg.n_blocks_enc)
        )
        vp = (cfg.var_filter_dim, cfg.var_kernel, cfg.var_dropout)
        self.duration_predictor = VariancePredictor(h, *vp)
        self.pitch_predictor = VariancePredictor(h, *vp)
        self.energy_predictor = VariancePredictor(h, *vp)
        self.pitch_embed = nn.Embedding(cfg.n_variance_bins, h)
        self.energy_embed = nn.Embedding(cfg.n_variance_bins, h)
        r = cfg.reduction_factor
        self.dec_pre = nn.Linear(r * h, h)
        self.dec_blocks = nn.ModuleList(
            FFTBlock(h, cfg.n_heads, cfg.conv_kernel, cfg.conv_filter_dim, cfg.dropout)
            for _ in range(cfg.n_blocks_dec)
        )
        self.dec_out = nn.Linear(h, r * cfg.mel_bins)

    # ------------------------------------------------------------- encoder

    def encode_batch(
        self,
        phonemes: torch.Tensor,          # (B, L) long
        speakers: torch.Tensor,          # (B,) long
        mask: torch.Tensor | None = None,  # (B, L) bool, True = valid
    ) -> torch.Tensor:
        if int(phonemes.max()) >= self.cfg.vocab_size or int(phonemes.min()) < 0:
            raise ValueError("phoneme id out of range")
        if int(speakers.max()) >= self.cfg.n_speakers or int(speakers.min()) < 0:
            raise ValueError("speaker id out of range")
        dtype = self.phoneme_embed.weight.dtype
        x = self.phoneme_embed(phonemes)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], dtype, x.device)
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(dtype)
        for block in self.enc_blocks:
            x = block(x, mask)
        spk = self.speaker_proj(self.speaker_table(speakers))
        x = x + spk.unsqueeze(1)
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(dtype)
        return x

    def encode(self, phonemes, speaker: int) -> torch.Tensor:
        """Single-sequence encoder: (L,) ids + speaker id -> (L, hidden)."""
        ph = torch.as_tensor(np.asarray(phonemes), dtype=torch.long).unsqueeze(0)
        spk = torch.tensor([speaker], dtype=torch.long)
        return self.encode_batch(ph, spk).squeeze(0)

    # --------------------------------------------------------- variance part

    def _denorm_pitch(self, raw: torch.Tensor) -> torch.Tensor:
        return self.cfg.pitch_mean + self.cfg.pitch_std * raw

    def _denorm_energy(self, raw: torch.Tensor) -> torch.Tensor:
        return self.cfg.energy_mean + self.cfg.energy_std * raw

    def predict_variances_batch(self, hidden, expanded, ph_mask=None, frame_mask=None):
        log_dur = self.duration_predictor(hidden, ph_mask)
        pitch = self._denorm_pitch(self.pitch_predictor(expanded, frame_mask))
        energy = self._denorm_energy(self.energy_predictor(expanded, frame_mask))
        if frame_mask is not None:
            pitch = pitch * frame_mask.to(pitch.dtype)
            energy = energy * frame_mask.to(energy.dtype)
        return log_dur, pitch, energy

    def predict_variances(self, hidden: torch.Tensor, expanded: torch.Tensor):
        """Single-sequence predictors: (L,H) and (T,H) -> ((L,), (T,), (T,))."""
        log_dur, pitch, energy = self.predict_variances_batch(
            hidden.unsqueeze(0), expanded.unsqueeze(0)
        )
        return log_dur.squeeze(0), pitch.squeeze(0), energy.squeeze(0)

    def variance_embeddings(self, pitch: torch.Tensor, energy: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        p_idx = _quantize(pitch, c.pitch_min, c.pitch_max, c.n_variance_bins)
        e_idx = _quantize(energy, c.energy_min, c.energy_max, c.n_variance_bins)
        return self.pitch_embed(p_idx) + self.energy_embed(e_idx)

    # -------------------------------------------------------------- decoder

    def decode_batch(self, stream: torch.Tensor, frame_mask: torch.Tensor | None = None):
        b, t, h = stream.shape
        r = self.cfg.reduction_factor
        t_pad = -(-t // r) * r
        if t_pad != t:
            stream = F.pad(stream, (0, 0, 0, t_pad - t))
            if frame_mask is not None:
                frame_mask = F.pad(frame_mask, (0, t_pad - t))
        x = stream.reshape(b, t_pad // r, r * h)
        x = self.dec_pre(x)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        red_mask = None
        if frame_mask is not None:
            red_mask = frame_mask.reshape(b, t_pad // r, r).any(dim=-1)
            x = x * red_mask.unsqueeze(-1).to(x.dtype)
        for block in self.dec_blocks:
            x = block(x, red_mask)
        mel = self.dec_out(x).reshape(b, t_pad, self.cfg.mel_bins)
        return mel[:, :t]

    def decode(self, frame_stream: torch.Tensor) -> torch.Tensor:
        """Single-sequence decoder: (T, hidden) -> (T, mel_bins)."""
        return self.decode_batch(frame_stream.unsqueeze(0)).squeeze(0)

    # ------------------------------------------------------------ full paths

    def forward_teacher(self, phonemes, speakers, durations, pitch, energy,
                        ph_mask=None, frame_mask=None):
        """Batched teacher-forced forward; all variance add-back from targets."""
        hidden = self.encode_batch(phonemes, speakers, ph_mask)
        expanded = batch_length_regulate(hidden, durations)
        log_dur, pitch_pred, energy_pred = self.predict_variances_batch(
            hidden, expanded, ph_mask, frame_mask
        )
        stream = expanded + self.variance_embeddings(pitch, energy)
        if frame_mask is not None:
            stream = stream * frame_mask.unsqueeze(-1).to(stream.dtype)
        mel = self.decode_batch(stream, frame_mask)
        return mel, log_dur, pitch_pred, energy_pred

    def forward_train(self, utt: Utterance) -> GeneratorOutput:
        """Teacher-forced forward for one utterance (ground-truth d, p, e)."""
        dtype = self.phoneme_embed.weight.dtype
        ph = torch.as_tensor(utt.phonemes, dtype=torch.long).unsqueeze(0)
        spk = torch.tensor([utt.speaker], dtype=torch.long)
        dur = torch.as_tensor(utt.durations, dtype=torch.long).unsqueeze(0)
        pitch = torch.as_tensor(utt.pitch, dtype=dtype).unsqueeze(0)
        energy = torch.as_tensor(utt.energy, dtype=dtype).unsqueeze(0)
        mel, log_dur, pitch_pred, energy_pred = self.forward_teacher(
            ph, spk, dur, pitch, energy
        )
        return GeneratorOutput(
            mel_pred=mel.squeeze(0),
            log_dur_pred=log_dur.squeeze(0),
            pitch_pred=pitch_pred.squeeze(0),
            energy_pred=energy_pred.squeeze(0),
        )

    @torch.no_grad()
    def forward_infer(self, phonemes, speaker: int) -> MelSpectrogram:
        """Free-running synthesis with predicted durations, pitch, and energy."""
        was_training = self.training
        self.eval()
        try:
            hidden = self.encode(phonemes, speaker)
            log_dur = self.duration_predictor(hidden.unsqueeze(0)).squeeze(0)
            durations = torch.clamp(torch.round(torch.exp(log_dur)), min=1).long()
            total = int(durations.sum())
            if total > self.cfg.max_frames:
                keep = torch.cumsum(durations, 0) <= self.cfg.max_frames
                durations = torch.where(keep, durations, torch.zeros_like(durations))
                if int(durations.sum()) == 0:
                    durations[0] = self.cfg.max_frames
            expanded = length_regulate(hidden, durations)
            _, pitch, energy = self.predict_variances(hidden, expanded)
            stream = expanded + self.variance_embeddings(pitch, energy)
            mel = self.decode(stream)
            return MelSpectrogram(mel.cpu().numpy().astype(np.float32))
        finally:
            self.train(was_training)


def batch_length_regulate(hidden: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Row-wise length regulation with zero padding to the longest expansion."""
    rows = [length_regulate(hidden[b], durations[b]) for b in range(hidden.shape[0])]
    t_max = max(r.shape[0] for r in rows)
    out = hidden.new_zeros(hidden.shape[0], t_max, hidden.shape[2])
    for b, r in enumerate(rows):
        out[b, : r.shape[0]] = r
    return out
