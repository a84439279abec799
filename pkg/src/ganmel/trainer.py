"""Two-stage training loop.

Stage 1 fits the generator with the reconstruction loss only. Stage 2 adds
the JCU discriminator: each step updates D first, then recomputes fake
features on the updated D, sets the feature-matching weight to the
recon/fm ratio of the current batch, and updates G with the total loss.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .dataio import DatasetManifest, Utterance, load_utterance
from .discriminator import (
    DiscriminatorConfig,
    JCUDiscriminator,
    crop_offset,
)
from .errors import DataFormatError, NumericalError
from .generator import Generator, GeneratorConfig
from .losses import (
    LossReport,
    LossWeights,
    d_loss_jcu,
    eq1_sum,
    feature_matching,
    fm_scale,
    g_adv_loss,
    g_total_loss,
    log_duration_target,
    masked_l1,
    masked_mse,
)

CKPT_MAGIC = b"GSCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    lr_halve_every: int = 500
    stage1_steps: int = 500
    stage2_steps: int = 200
    d_window: int = 128
    seed: int = 0
    log_path: str | None = None
    ckpt_dir: str | None = None
    fixed_fm: float | None = None  # ablation: constant feature-matching weight

    def __post_init__(self):
        if min(self.batch_size, self.lr_halve_every, self.stage1_steps,
               self.stage2_steps, self.d_window) <= 0:
            raise ValueError("all counts must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-indexed step: halved every lr_halve_every steps."""
    return cfg.lr * 0.5 ** (step // cfg.lr_halve_every)


# ---------------------------------------------------------------------------
# Adam over named parameter dicts

@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, torch.Tensor], beta1=0.5, beta2=0.9, eps=1e-8):
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-lr)


class Adam:
    """Binds AdamState to a module's named parameters."""

    def __init__(self, module: torch.nn.Module, cfg: TrainConfig):
        self.params = dict(module.named_parameters())
        self.state = AdamState.init(self.params, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise NumericalError(f"missing gradient for {name}")
            grads[name] = p.grad
        adam_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint format: "GSCK", u32 version, param table, optimizer table,
# u64 step, u8 stage, u32-length-prefixed JSON config echo

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    step: int
    stage: int
    config: dict

    def has_discriminator(self) -> bool:
        return any(k.startswith("disc.") for k in self.params)


def _write_entry(f, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataFormatError(
                f"{self.path}: corrupt checkpoint, truncated at offset {self.off}"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        if rank > 8:
            raise DataFormatError(
                f"{self.path}: corrupt checkpoint, implausible rank at offset {self.off - 4}"
            )
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = self.take(4 * count)
        return name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            _write_entry(f, name, ckpt.params[name])
        f.write(struct.pack("<I", len(ckpt.opt_state)))
        for name in sorted(ckpt.opt_state):
            _write_entry(f, name, ckpt.opt_state[name])
        f.write(struct.pack("<Q", ckpt.step))
        f.write(struct.pack("<B", ckpt.stage))
        blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path: Path | str) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise DataFormatError(f"{path}: corrupt checkpoint, bad magic at offset 0")
    version = r.u32()
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    params = dict(r.entry() for _ in range(r.u32()))
    opt_state = dict(r.entry() for _ in range(r.u32()))
    step = struct.unpack("<Q", r.take(8))[0]
    stage = struct.unpack("<B", r.take(1))[0]
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.off != len(r.blob):
        raise DataFormatError(f"{path}: trailing data at offset {r.off}")
    return Checkpoint(params=params, opt_state=opt_state, step=step, stage=stage, config=config)


def _collect_params(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": p.detach().cpu().numpy().astype(np.float32)
        for name, p in module.named_parameters()
    }


def _collect_opt(prefix: str, opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for name, t in opt.state.m.items():
        out[f"{prefix}.m.{name}"] = t.cpu().numpy().astype(np.float32)
    for name, t in opt.state.v.items():
        out[f"{prefix}.v.{name}"] = t.cpu().numpy().astype(np.float32)
    out[f"{prefix}.t"] = np.float32(opt.state.t)
    return out


def _load_module(prefix: str, module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in params:
                raise DataFormatError(f"checkpoint missing parameter {key}")
            arr = params[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise DataFormatError(f"checkpoint shape mismatch for {key}")
            p.copy_(torch.from_numpy(arr.copy()))


def _load_opt(prefix: str, opt: Adam, state: dict[str, np.ndarray]) -> None:
    for name in opt.state.m:
        opt.state.m[name] = torch.from_numpy(state[f"{prefix}.m.{name}"].copy())
        opt.state.v[name] = torch.from_numpy(state[f"{prefix}.v.{name}"].copy())
    opt.state.t = int(state[f"{prefix}.t"])


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    gen = Generator(GeneratorConfig(**ckpt.config["generator"]))
    _load_module("gen", gen, ckpt.params)
    return gen


def discriminator_from_checkpoint(ckpt: Checkpoint) -> JCUDiscriminator | None:
    if not ckpt.has_discriminator():
        return None
    dcfg_dict = dict(ckpt.config["discriminator"])
    for key in ("shared_channels", "shared_kernels", "shared_strides",
                "head_channels", "head_kernels", "head_strides"):
        dcfg_dict[key] = tuple(dcfg_dict[key])
    disc = JCUDiscriminator(
        DiscriminatorConfig(**dcfg_dict), ckpt.config["generator"]["speaker_dim"]
    )
    _load_module("disc", disc, ckpt.params)
    return disc


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    phonemes: torch.Tensor     # (B, L) long, 0-padded
    ph_mask: torch.Tensor      # (B, L) bool
    durations: torch.Tensor    # (B, L) long, 0-padded
    speakers: torch.Tensor     # (B,) long
    mel: torch.Tensor          # (B, T, bins), 0-padded
    frame_mask: torch.Tensor   # (B, T) bool
    pitch: torch.Tensor        # (B, T)
    energy: torch.Tensor       # (B, T)
    n_frames: list[int]


def collate(utts: list[Utterance]) -> Batch:
    b = len(utts)
    l_max = max(len(u.phonemes) for u in utts)
    t_max = max(u.mel.n_frames for u in utts)
    bins = utts[0].mel.n_bins
    ph = torch.zeros(b, l_max, dtype=torch.long)
    dur = torch.zeros(b, l_max, dtype=torch.long)
    ph_mask = torch.zeros(b, l_max, dtype=torch.bool)
    mel = torch.zeros(b, t_max, bins)
    frame_mask = torch.zeros(b, t_max, dtype=torch.bool)
    pitch = torch.zeros(b, t_max)
    energy = torch.zeros(b, t_max)
    speakers = torch.tensor([u.speaker for u in utts], dtype=torch.long)
    for i, u in enumerate(utts):
        lp, tf = len(u.phonemes), u.mel.n_frames
        ph[i, :lp] = torch.as_tensor(u.phonemes)
        dur[i, :lp] = torch.as_tensor(u.durations)
        ph_mask[i, :lp] = True
        mel[i, :tf] = torch.as_tensor(u.mel.data, dtype=mel.dtype)
        frame_mask[i, :tf] = True
        pitch[i, :tf] = torch.as_tensor(u.pitch, dtype=pitch.dtype)
        energy[i, :tf] = torch.as_tensor(u.energy, dtype=energy.dtype)
    return Batch(ph, ph_mask, dur, speakers, mel, frame_mask, pitch, energy,
                 [u.mel.n_frames for u in utts])


def make_batches(utts: list[Utterance], batch_size: int) -> list[Batch]:
    """Bucket by mel length so batches have similar frame counts."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].mel.n_frames, i))
    return [
        collate([utts[i] for i in order[k : k + batch_size]])
        for k in range(0, len(order), batch_size)
    ]


def load_corpus(manifest: DatasetManifest) -> list[Utterance]:
    if not manifest.entries:
        raise ValueError("manifest is empty")
    return [load_utterance(manifest, e) for e in manifest.entries]


def corpus_variance_stats(utts: list[Utterance]) -> dict[str, float]:
    pitch = np.concatenate([u.pitch for u in utts])
    energy = np.concatenate([u.energy for u in utts])

    def stats(x, tag):
        spread = float(x.max() - x.min())
        return {
            f"{tag}_min": float(x.min()),
            f"{tag}_max": float(x.max()) + (1e-6 if spread == 0 else 0.0),
            f"{tag}_mean": float(x.mean()),
            f"{tag}_std": float(x.std()) or 1.0,
        }

    return stats(pitch, "pitch") | stats(energy, "energy")


def batched_recon(gen: Generator, batch: Batch, w: LossWeights):
    """Teacher-forced forward plus masked Eq.-1 components for one batch."""
    mel_pred, log_dur, pitch_pred, energy_pred = gen.forward_teacher(
        batch.phonemes, batch.speakers, batch.durations,
        batch.pitch, batch.energy, batch.ph_mask, batch.frame_mask,
    )
    comps = {
        "l_mel": masked_l1(mel_pred, batch.mel, batch.frame_mask),
        "l_dur": masked_mse(log_dur, log_duration_target(batch.durations), batch.ph_mask),
        "l_pitch": masked_mse(pitch_pred, batch.pitch, batch.frame_mask),
        "l_energy": masked_mse(energy_pred, batch.energy, batch.frame_mask),
    }
    total = (
        comps["l_mel"] + w.lambda_d * comps["l_dur"]
        + w.lambda_p * comps["l_pitch"] + w.lambda_e * comps["l_energy"]
    )
    return mel_pred, total, comps


class _StepLog:
    def __init__(self, path: str | None):
        self.f = open(path, "a", encoding="utf-8") if path else None

    def write(self, report: LossReport) -> None:
        if self.f:
            self.f.write(report.to_json() + "\n")
            self.f.flush()

    def close(self) -> None:
        if self.f:
            self.f.close()


def _check_finite(report: LossReport, comps: dict) -> None:
    if not report.is_finite():
        detail = {k: v.item() for k, v in comps.items()}
        raise NumericalError(f"non-finite loss at step {report.step}: {detail}")


def _batch_stream(n_batches: int, seed: int):
    """Yields batch indices; order is a pure function of (seed, epoch)."""
    epoch = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 3, epoch)))
        for idx in rng.permutation(n_batches):
            yield int(idx)
        epoch += 1


def _make_generator_config(manifest: DatasetManifest, utts, base: GeneratorConfig | None):
    stats = corpus_variance_stats(utts)
    fields = dict(
        vocab_size=manifest.vocab_size,
        n_speakers=manifest.n_speakers,
        mel_bins=manifest.stft.mel_bins,
        **stats,
    )
    if base is not None:
        merged = asdict(base)
        merged.update(fields)
        return GeneratorConfig(**merged)
    return GeneratorConfig(**fields)


def train_stage1(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig | None = None,
    weights: LossWeights | None = None,
) -> Checkpoint:
    """Generator-only pretraining with the reconstruction loss."""
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    w = weights or LossWeights()

    utts = load_corpus(manifest)
    gcfg = _make_generator_config(manifest, utts, gen_cfg)
    gen = Generator(gcfg)
    gen.train()
    opt = Adam(gen, cfg)
    batches = make_batches(utts, cfg.batch_size)
    stream = _batch_stream(len(batches), cfg.seed)

    log = _StepLog(cfg.log_path)
    try:
        for step in range(cfg.stage1_steps):
            batch = batches[next(stream)]
            _, total, comps = batched_recon(gen, batch, w)
            opt.zero_grad()
            total.backward()
            opt.step(lr_at_step(cfg, step))
            report = LossReport.build(
                step=step + 1,
                l_mel=comps["l_mel"].item(),
                l_dur=comps["l_dur"].item(),
                l_pitch=comps["l_pitch"].item(),
                l_energy=comps["l_energy"].item(),
                w=w,
            )
            _check_finite(report, comps)
            log.write(report)
    finally:
        log.close()

    ckpt = Checkpoint(
        params=_collect_params("gen", gen),
        opt_state=_collect_opt("gopt", opt),
        step=cfg.stage1_steps,
        stage=1,
        config={
            "generator": asdict(gcfg),
            "discriminator": None,
            "train": asdict(cfg),
            "weights": asdict(w),
        },
    )
    if cfg.ckpt_dir:
        save_checkpoint(ckpt, Path(cfg.ckpt_dir) / "stage1.gsck")
    return ckpt


def _crop_batch_windows(mel_real, mel_fake, n_frames, window, rng):
    """Aligned random windows per batch row, zero-padded below window length."""
    b, _, bins = mel_real.shape
    real_w = mel_real.new_zeros(b, window, bins)
    fake_w = mel_fake.new_zeros(b, window, bins)
    for i, nf in enumerate(n_frames):
        off = crop_offset(nf, window, rng)
        take = min(window, nf - off)
        real_w[i, :take] = mel_real[i, off : off + take]
        fake_w[i, :take] = mel_fake[i, off : off + take]
    return real_w.transpose(1, 2), fake_w.transpose(1, 2)  # (B, bins, W)


def train_stage2(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    disc_cfg: DiscriminatorConfig | None = None,
    weights: LossWeights | None = None,
) -> Checkpoint:
    """Joint adversarial training from a stage-1 (or stage-2) checkpoint."""
    if ckpt.stage not in (1, 2):
        raise ValueError(f"cannot continue from a stage-{ckpt.stage} checkpoint")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed + 1)
    w = weights or LossWeights()

    utts = load_corpus(manifest)
    gen = generator_from_checkpoint(ckpt)
    gen.train()
    disc = discriminator_from_checkpoint(ckpt)
    resumed = disc is not None
    if disc is None:
        disc = JCUDiscriminator(
            disc_cfg or DiscriminatorConfig(in_channels=gen.cfg.mel_bins),
            gen.cfg.speaker_dim,
        )
    disc.train()

    g_opt = Adam(gen, cfg)   # fresh moments on the stage transition
    d_opt = Adam(disc, cfg)
    if resumed and ckpt.stage == 2:
        _load_opt("gopt", g_opt, ckpt.opt_state)
        _load_opt("dopt", d_opt, ckpt.opt_state)

    batches = make_batches(utts, cfg.batch_size)
    stream = _batch_stream(len(batches), cfg.seed + 1)
    crop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 4)))

    log = _StepLog(cfg.log_path)
    try:
        for step in range(cfg.stage2_steps):
            lr = lr_at_step(cfg, step)
            batch = batches[next(stream)]

            # (a) teacher-forced generator forward
            mel_pred, l_recon, comps = batched_recon(gen, batch, w)

            # (b) aligned windows from unpadded regions
            spk_emb = gen.speaker_table(batch.speakers).detach()
            real_w, fake_w = _crop_batch_windows(
                batch.mel, mel_pred, batch.n_frames, cfg.d_window, crop_rng
            )

            # (c) discriminator update on detached fakes
            d_real = disc(real_w, spk_emb)
            d_fake = disc(fake_w.detach(), spk_emb)
            l_d = d_loss_jcu(d_real, d_fake)
            d_opt.zero_grad()
            l_d.backward()
            d_opt.step(lr)

            # (d) features on the updated discriminator; ratio from this batch
            with torch.no_grad():
                real_feats = disc(real_w, spk_emb).features
            for p in disc.parameters():
                p.requires_grad_(False)
            fake_out = disc(fake_w, spk_emb)
            l_fm = feature_matching(real_feats, fake_out.features)
            l_adv = g_adv_loss(fake_out)
            comp_f = {k: v.item() for k, v in comps.items()}
            recon_val = eq1_sum(
                comp_f["l_mel"], comp_f["l_dur"], comp_f["l_pitch"], comp_f["l_energy"], w
            )
            fm_val = l_fm.item()
            if cfg.fixed_fm is not None:
                lam = cfg.fixed_fm
            else:
                lam = fm_scale(recon_val, fm_val, w.lambda_fm_cap)

            # (e) generator update with the total loss
            total = g_total_loss(l_adv, lam, l_fm, l_recon)
            g_opt.zero_grad()
            total.backward()
            for p in disc.parameters():
                p.requires_grad_(True)
            g_opt.step(lr)

            report = LossReport.build(
                step=step + 1,
                l_mel=comp_f["l_mel"],
                l_dur=comp_f["l_dur"],
                l_pitch=comp_f["l_pitch"],
                l_energy=comp_f["l_energy"],
                w=w,
                l_d=l_d.item(),
                l_g_adv=l_adv.item(),
                l_fm=fm_val,
                lambda_fm=lam,
            )
            _check_finite(report, comps)
            log.write(report)
    finally:
        log.close()

    out = Checkpoint(
        params=_collect_params("gen", gen) | _collect_params("disc", disc),
        opt_state=_collect_opt("gopt", g_opt) | _collect_opt("dopt", d_opt),
        step=cfg.stage2_steps,
        stage=2,
        config={
            "generator": asdict(gen.cfg),
            "discriminator": asdict(disc.cfg),
            "train": asdict(cfg),
            "weights": asdict(w),
        },
    )
    if cfg.ckpt_dir:
        save_checkpoint(out, Path(cfg.ckpt_dir) / "stage2.gsck")
    return out
