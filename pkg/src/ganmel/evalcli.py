"""Objective metrics (MCD, F0 RMSE), mel rendering, checkpoint evaluation,
and the command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np
import scipy.fft
import torch

from .dataio import (
    MelSpectrogram,
    StftConfig,
    generate_synthetic_corpus,
    load_manifest,
    load_utterance,
    read_array,
    write_array,
)
from .errors import DataFormatError, NumericalError
from .generator import GeneratorConfig
from .losses import LossWeights
from .trainer import (
    Checkpoint,
    TrainConfig,
    generator_from_checkpoint,
    load_checkpoint,
    train_stage1,
    train_stage2,
)

MCD_SCALE = 10.0 / math.log(10.0)


def mel_cepstra(mel: MelSpectrogram, n_coeffs: int) -> np.ndarray:
    """Coefficients 1..n_coeffs of the orthonormal DCT-II of each log-mel row."""
    c = scipy.fft.dct(mel.data.astype(np.float64), type=2, norm="ortho", axis=1)
    return c[:, 1 : n_coeffs + 1]


def mcd(ref: MelSpectrogram, hyp: MelSpectrogram, n_coeffs: int = 13) -> float:
    """Mel cepstral distortion in dB, mean over frames."""
    if ref.n_frames != hyp.n_frames:
        raise ValueError("frame-count mismatch")
    diff = mel_cepstra(ref, n_coeffs) - mel_cepstra(hyp, n_coeffs)
    per_frame = MCD_SCALE * np.sqrt(2.0 * (diff**2).sum(axis=1))
    return float(math.fsum(per_frame) / len(per_frame))


def f0_rmse(ref_f0: np.ndarray, hyp_f0: np.ndarray) -> float:
    """RMSE in Hz over frames voiced in both contours; 0 (with a warning) if none."""
    ref_f0 = np.asarray(ref_f0, dtype=np.float64)
    hyp_f0 = np.asarray(hyp_f0, dtype=np.float64)
    if ref_f0.shape != hyp_f0.shape:
        raise ValueError("length mismatch")
    voiced = (ref_f0 > 0) & (hyp_f0 > 0)
    if not voiced.any():
        warnings.warn("no co-voiced frames; F0 RMSE reported as 0", stacklevel=2)
        return 0.0
    return float(np.sqrt(np.mean((ref_f0[voiced] - hyp_f0[voiced]) ** 2)))


def render_mel(mel: MelSpectrogram, path: Path | str) -> None:
    """Write a grayscale PGM (P5), one pixel per (frame, bin), low bins at the bottom."""
    data = mel.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        pixels = np.rint((data - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(data.shape, 128, dtype=np.uint8)
    img = pixels.T[::-1]  # rows top..bottom = bins high..low
    with open(path, "wb") as f:
        f.write(f"P5\n{mel.n_frames} {mel.n_bins}\n255\n".encode("ascii"))
        f.write(img.tobytes())


@dataclass
class EvalReport:
    utterances: list[dict]
    mcd_db_mean: float
    f0_rmse_hz_mean: float
    n_utterances: int
    n_frames_total: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate(ckpt: Checkpoint, manifest, n_coeffs: int = 13) -> EvalReport:
    """Teacher-forced synthesis of every utterance, scored against its targets."""
    gen = generator_from_checkpoint(ckpt)
    gen.eval()
    rows = []
    with torch.no_grad():
        for entry in manifest.entries:
            utt = load_utterance(manifest, entry)
            out = gen.forward_train(utt)
            hyp_mel = MelSpectrogram(out.mel_pred.numpy().astype(np.float32))
            hyp_f0 = np.maximum(out.pitch_pred.numpy().astype(np.float64), 0.0)
            rows.append({
                "id": entry.id,
                "mcd_db": mcd(utt.mel, hyp_mel, n_coeffs),
                "f0_rmse_hz": f0_rmse(utt.pitch, hyp_f0),
                "n_frames": utt.mel.n_frames,
            })
    n = len(rows)
    return EvalReport(
        utterances=rows,
        mcd_db_mean=math.fsum(r["mcd_db"] for r in rows) / n,
        f0_rmse_hz_mean=math.fsum(r["f0_rmse_hz"] for r in rows) / n,
        n_utterances=n,
        n_frames_total=sum(r["n_frames"] for r in rows),
    )


# ---------------------------------------------------------------------------
# CLI

def _dataclass_from_section(cls, section: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise DataFormatError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed config JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise DataFormatError(f"{path}: config root must be a JSON object")
    return cfg


def _train_config(args, conf: dict, out_dir: str, stage_key: str) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "batch_size": args.batch,
        stage_key: args.steps,
        "ckpt_dir": out_dir,
        "log_path": str(Path(out_dir) / "train_log.jsonl"),
    }
    if getattr(args, "fixed_fm", None) is not None:
        overrides["fixed_fm"] = args.fixed_fm
    return _dataclass_from_section(TrainConfig, conf.get("train", {}), **overrides)


def _cmd_prepare(args, conf):
    stft = _dataclass_from_section(StftConfig, conf.get("stft", {}))
    manifest = generate_synthetic_corpus(
        args.seed if args.seed is not None else 0,
        args.speakers, args.utts, stft, args.out,
    )
    print(f"wrote {len(manifest.entries)} utterances to {args.out}")
    return 0


def _cmd_train_stage1(args, conf):
    manifest = load_manifest(args.manifest)
    cfg = _train_config(args, conf, args.out, "stage1_steps")
    gen_cfg = None
    if "generator" in conf:
        section = dict(conf["generator"])
        section.setdefault("vocab_size", manifest.vocab_size)
        section.setdefault("n_speakers", manifest.n_speakers)
        gen_cfg = _dataclass_from_section(GeneratorConfig, section)
    weights = _dataclass_from_section(LossWeights, conf.get("weights", {}))
    train_stage1(manifest, cfg, gen_cfg=gen_cfg, weights=weights)
    print(f"stage-1 checkpoint: {Path(args.out) / 'stage1.gsck'}")
    return 0


def _cmd_train_stage2(args, conf):
    manifest = load_manifest(args.manifest)
    ckpt = load_checkpoint(args.ckpt)
    cfg = _train_config(args, conf, args.out, "stage2_steps")
    weights = _dataclass_from_section(LossWeights, conf.get("weights", {}))
    train_stage2(ckpt, manifest, cfg, weights=weights)
    print(f"stage-2 checkpoint: {Path(args.out) / 'stage2.gsck'}")
    return 0


def _cmd_synth(args, conf):
    ckpt = load_checkpoint(args.ckpt)
    gen = generator_from_checkpoint(ckpt)
    try:
        phonemes = [int(tok) for tok in args.phonemes.split()]
    except ValueError:
        raise DataFormatError("--phonemes must be a space-separated list of integer ids")
    if not phonemes:
        raise DataFormatError("--phonemes is empty")
    mel = gen.forward_infer(phonemes, args.speaker)
    write_array(args.out, mel.data)
    print(f"wrote {mel.n_frames}x{mel.n_bins} mel to {args.out}")
    return 0


def _cmd_eval(args, conf):
    ckpt = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    report = evaluate(ckpt, manifest)
    Path(args.out).write_text(report.to_json() + "\n", "utf-8")
    print(f"MCD {report.mcd_db_mean:.3f} dB  F0 RMSE {report.f0_rmse_hz_mean:.3f} Hz "
          f"({report.n_utterances} utterances)")
    return 0


def _cmd_plot(args, conf):
    arr = read_array(args.mel)
    if arr.ndim != 2:
        raise DataFormatError(f"{args.mel}: expected a rank-2 mel file, got rank {arr.ndim}")
    render_mel(MelSpectrogram(arr), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ganmel",
        description="Adversarial multi-speaker mel synthesis: data preparation, "
                    "two-stage training, synthesis, evaluation, and plotting.",
    )
    parser.add_argument("--config", help="JSON file with stft/generator/train/weights sections")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the synthetic corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train-stage1", help="generator-only pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(func=_cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="joint adversarial training")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--fixed-fm", type=float, default=None, dest="fixed_fm",
                   help="use a constant feature-matching weight instead of the ratio")
    p.set_defaults(func=_cmd_train_stage2)

    p = sub.add_parser("synth", help="free-running synthesis from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--phonemes", required=True, help='space-separated ids, e.g. "1 5 9"')
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="teacher-forced MCD / F0 RMSE over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render a mel file to a PGM image")
    p.add_argument("--mel", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        conf = _load_config_file(args.config)
        return args.func(args, conf)
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
