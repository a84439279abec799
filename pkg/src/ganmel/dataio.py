"""Feature extraction, synthetic corpus generation, and on-disk formats.

Conventions pinned here (and frozen by the tests): HTK mel scale with
area-normalized triangular filters, natural log with floor 1e-5, centered
STFT with reflect padding so n_frames = len // hop + 1.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.fft
from scipy.signal import get_window

from .errors import DataFormatError

FEATURE_MAGIC = b"GSF1"

#: phoneme inventory of the synthetic corpus; id 0 is reserved for padding
SYNTH_VOCAB_SIZE = 40


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 22050
    frame_length: int = 1024
    hop_length: int = 256
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (self.frame_length > self.hop_length > 0):
            raise ValueError("need frame_length > hop_length > 0")
        if self.mel_bins <= 0:
            raise ValueError("mel_bins must be positive")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax above Nyquist")


@dataclass
class MelSpectrogram:
    """Log-mel matrix, shape (n_frames, mel_bins), float32."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("mel data must be a non-empty 2-D matrix")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


@dataclass
class Utterance:
    phonemes: np.ndarray          # int ids, shape (n_phonemes,)
    speaker: int
    mel: MelSpectrogram
    durations: np.ndarray         # per-phoneme frame counts
    pitch: np.ndarray             # per-frame Hz, 0 = unvoiced
    energy: np.ndarray            # per-frame scalar

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        if np.any(self.durations < 0):
            raise ValueError("durations must be non-negative")
        if int(self.durations.sum()) != self.mel.n_frames:
            raise ValueError("sum(durations) must equal mel.n_frames")
        if len(self.pitch) != self.mel.n_frames or len(self.energy) != self.mel.n_frames:
            raise ValueError("pitch/energy must have one value per mel frame")


@dataclass
class ManifestEntry:
    id: str
    speaker: int
    phonemes: list[int]
    mel: str
    dur: str
    f0: str
    energy: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    speaker_map: dict[str, int]
    root: Path
    vocab_size: int = SYNTH_VOCAB_SIZE
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids in manifest")
        spk_ids = sorted(self.speaker_map.values())
        if spk_ids != list(range(len(spk_ids))):
            raise ValueError("speaker ids must be dense 0..S-1")

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_map)


# ---------------------------------------------------------------------------
# binary feature format: "GSF1", u32 LE rank, u32 LE dims, f32 LE row-major

def write_array(path: Path | str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_array(path: Path | str) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated header at offset {len(blob)}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 8:
        raise DataFormatError(f"{path}: implausible rank {rank} at offset 4")
    head = 8 + 4 * rank
    if len(blob) < head:
        raise DataFormatError(f"{path}: truncated dims at offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expect = head + 4 * count
    if len(blob) != expect:
        raise DataFormatError(
            f"{path}: payload length mismatch at offset {min(len(blob), expect)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=head, count=count)
    return flat.reshape(dims).copy()


# ---------------------------------------------------------------------------
# mel / pitch / energy extraction

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """(mel_bins, n_fft//2+1) triangular filterbank, HTK scale, area-normalized."""
    n_freqs = cfg.frame_length // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    fbank = np.zeros((cfg.mel_bins, n_freqs))
    for m in range(cfg.mel_bins):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-10)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-10)
        tri = np.maximum(0.0, np.minimum(up, down))
        fbank[m] = tri * (2.0 / (hi - lo))
    return fbank


def mel_bin_centers(cfg: StftConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel bin's triangle."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    return mel_to_hz(mel_pts)[1:-1]


def _frame_signal(waveform: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Centered frames of shape (n_frames, frame_length); n_frames = len//hop + 1."""
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if len(x) < cfg.frame_length:
        raise ValueError("input too short")
    pad = cfg.frame_length // 2
    x = np.pad(x, pad, mode="reflect")
    n_frames = (len(x) - 2 * pad) // cfg.hop_length + 1
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return x[idx]


def compute_mel(waveform: np.ndarray, cfg: StftConfig) -> MelSpectrogram:
    """Log-mel spectrogram of a waveform; values ln(max(mel_energy, log_floor))."""
    frames = _frame_signal(waveform, cfg)
    window = get_window("hann", cfg.frame_length, fftbins=True)
    mag = np.abs(scipy.fft.rfft(frames * window, axis=1))
    mel_energy = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel_energy, cfg.log_floor)))


def compute_energy(mel: MelSpectrogram) -> np.ndarray:
    """Per-frame L2 norm of the linear-mel frame (exp of the stored log values)."""
    return np.linalg.norm(np.exp(mel.data.astype(np.float64)), axis=1)


VOICING_THRESHOLD = 0.3


def estimate_f0(
    waveform: np.ndarray,
    cfg: StftConfig,
    f_lo: float = 60.0,
    f_hi: float = 600.0,
) -> np.ndarray:
    """Frame-wise F0 via normalized autocorrelation with parabolic interpolation.

    Returns one value per mel frame (same centering as compute_mel); 0 marks
    unvoiced frames. Voiced candidates outside [f_lo, f_hi] are clamped.
    """
    if not (0 < f_lo < f_hi <= cfg.sample_rate / 2):
        raise ValueError("need 0 < f_lo < f_hi <= sample_rate/2")
    if np.size(waveform) == 0:
        raise ValueError("empty waveform")
    frames = _frame_signal(waveform, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)
    w = cfg.frame_length

    lag_lo = max(1, int(np.floor(cfg.sample_rate / f_hi)))
    lag_hi = min(w - 2, int(np.ceil(cfg.sample_rate / f_lo)))

    # autocorrelation via FFT, then normalize by the energy of both segments
    nfft = scipy.fft.next_fast_len(2 * w)
    spec = scipy.fft.rfft(frames, n=nfft, axis=1)
    ac = scipy.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :w]
    sq = frames**2
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1:]
    lags = np.arange(w)
    head = csum[:, w - lags]            # energy of x[0 : w-lag]
    tail = total - csum[:, lags]        # energy of x[lag : w]
    denom = np.sqrt(np.maximum(head * tail, 1e-300))
    r = ac / denom

    f0 = np.zeros(len(frames))
    for t in range(len(frames)):
        if total[t, 0] <= 0.0:
            continue
        seg = r[t, lag_lo : lag_hi + 1]
        # local maxima; prefer the shortest strong lag to avoid octave-down errors
        interior = (seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])
        cand = np.flatnonzero(interior) + 1
        if len(cand) == 0:
            cand = np.array([int(np.argmax(seg))])
        best = float(seg[cand].max())
        if best < VOICING_THRESHOLD:
            continue
        pick = int(cand[seg[cand] >= 0.85 * best][0]) + lag_lo
        rm, r0, rp = r[t, pick - 1], r[t, pick], r[t, pick + 1]
        den = rm - 2.0 * r0 + rp
        delta = 0.5 * (rm - rp) / den if abs(den) > 1e-12 else 0.0
        lag = pick + float(np.clip(delta, -1.0, 1.0))
        f0[t] = float(np.clip(cfg.sample_rate / lag, f_lo, f_hi))
    return f0


# ---------------------------------------------------------------------------
# synthetic corpus with oracle targets

def _speaker_params(seed: int, speaker: int, mel_bins: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, speaker)))
    return {
        "base_f0": float(rng.uniform(150.0, 250.0)),
        "centers": rng.uniform(0.08, 0.92, 3) * mel_bins,
        "widths": rng.uniform(2.5, 6.0, 3),
        "amps": rng.uniform(0.8, 1.6, 3),
    }


def _phoneme_tables(seed: int, vocab_size: int, mel_bins: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    centers = rng.uniform(0.05, 0.95, vocab_size) * mel_bins
    widths = rng.uniform(3.0, 8.0, vocab_size)
    amps = rng.uniform(-0.9, 0.9, vocab_size)
    gains = rng.uniform(-0.3, 0.3, vocab_size)
    return centers, widths, amps, gains


def synth_utterance(seed: int, index: int, speaker: int, cfg: StftConfig) -> Utterance:
    """Deterministic speech-like utterance for speaker `speaker` (oracle targets)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1, index)))
    spk = _speaker_params(seed, speaker, cfg.mel_bins)
    ph_c, ph_w, ph_a, ph_g = _phoneme_tables(seed, SYNTH_VOCAB_SIZE, cfg.mel_bins)

    n_ph = int(rng.integers(5, 21))
    phonemes = rng.integers(1, SYNTH_VOCAB_SIZE, n_ph)
    durations = rng.integers(2, 13, n_ph)
    voiced_ph = rng.random(n_ph) < 0.85
    n_frames = int(durations.sum())

    t = np.arange(n_frames)
    cycles = rng.uniform(0.5, 2.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    depth = rng.uniform(0.04, 0.08)
    f0 = spk["base_f0"] * (1.0 + depth * np.sin(2.0 * np.pi * cycles * t / max(n_frames, 1) + phase))

    frame_ph = np.repeat(np.arange(n_ph), durations)
    voiced = voiced_ph[frame_ph]
    f0 = np.where(voiced, f0, 0.0)

    bins = np.arange(cfg.mel_bins, dtype=np.float64)
    spk_env = sum(
        a * np.exp(-((bins - c) ** 2) / (2.0 * w**2))
        for a, c, w in zip(spk["amps"], spk["centers"], spk["widths"])
    )
    ph_env = ph_a[:, None] * np.exp(
        -((bins[None, :] - ph_c[:, None]) ** 2) / (2.0 * ph_w[:, None] ** 2)
    ) + ph_g[:, None]
    log_env = spk_env[None, :] + ph_env[phonemes][frame_ph]  # (T, mel_bins)

    centers_hz = mel_bin_centers(cfg)
    mel_pts = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    )
    bw = np.maximum((mel_pts[2:] - mel_pts[:-2]) / 4.0, 8.0)

    comb = np.zeros((n_frames, cfg.mel_bins))
    vmask = f0 > 0
    if vmask.any():
        k = np.arange(1, 41)
        harm = f0[vmask, None] * k[None, :]          # (Tv, K)
        diff = centers_hz[None, :, None] - harm[:, None, :]
        contrib = np.exp(-(diff**2) / (2.0 * bw[None, :, None] ** 2)) / np.sqrt(k)[None, None, :]
        comb[vmask] = contrib.sum(axis=2)

    noise = 0.03 * (1.0 + 0.4 * rng.random((n_frames, cfg.mel_bins)))
    linear = noise + np.exp(log_env) * (0.12 + comb)
    mel = MelSpectrogram(np.log(np.maximum(linear, cfg.log_floor)))

    return Utterance(
        phonemes=phonemes,
        speaker=speaker,
        mel=mel,
        durations=durations,
        pitch=f0,
        energy=compute_energy(mel),
    )


def generate_synthetic_corpus(
    seed: int,
    n_speakers: int,
    n_utts: int,
    cfg: StftConfig,
    out_dir: Path | str,
) -> DatasetManifest:
    """Write a fully reproducible synthetic corpus with oracle targets to out_dir."""
    if n_speakers < 1:
        raise ValueError("need at least one speaker")
    if n_utts < n_speakers:
        raise ValueError("need n_utts >= n_speakers")
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(n_utts):
        utt = synth_utterance(seed, i, i % n_speakers, cfg)
        uid = f"utt_{i:04d}"
        paths = {kind: f"feats/{uid}.{kind}.gsf" for kind in ("mel", "dur", "f0", "energy")}
        write_array(out / paths["mel"], utt.mel.data)
        write_array(out / paths["dur"], utt.durations)
        write_array(out / paths["f0"], utt.pitch)
        write_array(out / paths["energy"], utt.energy)
        entries.append(
            ManifestEntry(
                id=uid,
                speaker=utt.speaker,
                phonemes=[int(p) for p in utt.phonemes],
                **paths,
            )
        )

    speaker_map = {f"spk_{s:02d}": s for s in range(n_speakers)}
    manifest = DatasetManifest(
        entries=entries, speaker_map=speaker_map, root=out,
        vocab_size=SYNTH_VOCAB_SIZE, stft=cfg,
    )
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O: JSON Lines plus a meta.json sidecar for the speaker map

def save_manifest(manifest: DatasetManifest) -> None:
    root = Path(manifest.root)
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(json.dumps(asdict(e), sort_keys=True) + "\n")
    meta = {
        "speaker_map": manifest.speaker_map,
        "vocab_size": manifest.vocab_size,
        "stft": asdict(manifest.stft),
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), "utf-8")


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load a manifest from its JSONL file (meta.json is expected alongside)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    jsonl = path if path.is_file() else root / "manifest.jsonl"
    try:
        lines = jsonl.read_text("utf-8").splitlines()
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines if ln.strip()]
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataFormatError(f"{jsonl}: malformed manifest ({exc})") from exc
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text("utf-8"))
        stft = StftConfig(**meta.get("stft", {}))
        speaker_map = {str(k): int(v) for k, v in meta["speaker_map"].items()}
        vocab = int(meta.get("vocab_size", SYNTH_VOCAB_SIZE))
    else:
        ids = sorted({e.speaker for e in entries})
        speaker_map = {f"spk_{s:02d}": i for i, s in enumerate(ids)}
        vocab = max(max(e.phonemes) for e in entries) + 1
        stft = StftConfig()
    return DatasetManifest(
        entries=entries, speaker_map=speaker_map, root=root,
        vocab_size=vocab, stft=stft,
    )


def load_utterance(manifest: DatasetManifest, entry: ManifestEntry) -> Utterance:
    root = Path(manifest.root)
    mel = MelSpectrogram(read_array(root / entry.mel))
    durations = np.rint(read_array(root / entry.dur)).astype(np.int64)
    return Utterance(
        phonemes=np.asarray(entry.phonemes, dtype=np.int64),
        speaker=entry.speaker,
        mel=mel,
        durations=durations,
        pitch=read_array(root / entry.f0).astype(np.float64),
        energy=read_array(root / entry.energy).astype(np.float64),
    )
