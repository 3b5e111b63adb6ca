"""Command-line entry point: simulate, train, infer, score, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .config import ConfigError, load_simulation_config, load_train_config
from .diar_core import (
    FEATURE_MAGIC,
    CollarSpec,
    DiarizationFormatError,
    FrameMask,
    apply_collar,
    mask_to_segments,
    read_features,
    read_rttm,
    segments_to_mask,
    write_rttm,
)
from .gradcheck import run_gradcheck
from .model import InferenceConfig
from .scorer import DerResult, compute_der, corpus_der, format_rate
from .simulate import SimulationConfig, read_manifest, simulate_corpus, write_corpus
from .train import train

log = logging.getLogger("eend_m2f")


def cmd_simulate(args) -> int:
    cfg = load_simulation_config(args.config) if args.config else SimulationConfig()
    samples = simulate_corpus(cfg, args.count, seed=args.seed)
    manifest = write_corpus(args.out, samples)
    print(f"wrote {len(samples)} mixtures to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    meta = train(cfg, args.train, args.val, args.out)
    print(f"averaged checkpoint {meta.path}: validation DER {format_rate(meta.validation_der)}%")
    return 0


def _feature_inputs(path: Path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as f:
        head = f.read(len(FEATURE_MAGIC))
    if head == FEATURE_MAGIC:
        return [(path.stem, read_features(path))]
    return [(e.recording_id, read_features(e.feature_path)) for e in read_manifest(path)]


def cmd_infer(args) -> int:
    model, meta = load_model(args.checkpoint)
    cfg = InferenceConfig(args.theta, args.mask_threshold)
    segments = []
    for rec, feats in _feature_inputs(Path(args.features)):
        mask, n_spk = model.infer(feats, cfg, args.frame_rate)
        segments.extend(mask_to_segments(mask, rec, [f"spk{j}" for j in range(n_spk)]))
        log.info("%s: %d frames, %d speakers", rec, feats.shape[0], n_spk)
    write_rttm(args.out, segments)
    return 0


def _pad(mask: FrameMask, n_frames: int) -> FrameMask:
    data = np.zeros((n_frames, mask.data.shape[1]), dtype=bool)
    data[: mask.data.shape[0]] = mask.data
    return FrameMask(data, mask.frame_rate, mask.speakers)


def score_recordings(ref_segs, sys_segs, collar: float, frame_rate: int) -> list[tuple[str, DerResult]]:
    """Per-recording results in reference order, then recordings only the system mentions."""
    rows = []
    recs = list(dict.fromkeys(ref_segs.recording_ids() + sys_segs.recording_ids()))
    spec = CollarSpec(collar)
    for rec in recs:
        ref = segments_to_mask(ref_segs, rec, frame_rate)
        hyp = segments_to_mask(sys_segs, rec, frame_rate)
        n_frames = max(ref.num_frames, hyp.num_frames)
        ref, hyp = apply_collar(_pad(ref, n_frames), _pad(hyp, n_frames), spec)
        rows.append((rec, compute_der(hyp, ref)))
    return rows


HEADER = ("recording", "ms", "fa", "se", "der")


def format_score_table(rows: list[tuple[str, DerResult]]) -> str:
    total = corpus_der(r for _, r in rows)
    table = [(rec, r) for rec, r in rows] + [("CORPUS", total)]
    width = max(len(HEADER[0]), *(len(rec) for rec, _ in table))
    lines = [f"{HEADER[0]:<{width}}" + "".join(f"{h.upper():>9}" for h in HEADER[1:])]
    for rec, r in table:
        flag = "  (no reference speech)" if r.no_reference else ""
        cells = "".join(f"{format_rate(v):>9}" for v in (r.ms, r.fa, r.se, r.der))
        lines.append(f"{rec:<{width}}{cells}{flag}")
    return "\n".join(lines)


def cmd_score(args) -> int:
    rows = score_recordings(read_rttm(args.ref), read_rttm(args.sys), args.collar, args.frame_rate)
    print(format_score_table(rows))
    if args.csv:
        total = corpus_der(r for _, r in rows)
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(HEADER)
            for rec, r in rows + [("CORPUS", total)]:
                writer.writerow([rec] + [format_rate(v) for v in (r.ms, r.fa, r.se, r.der)])
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    print(report.format())
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g}): "
          f"{'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eend-m2f", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic mixtures and a manifest")
    p.add_argument("--config", help="simulation config (key = value); defaults if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train and write averaged.em2f")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize feature files into an RTTM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature file or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=0.8, help="class probability threshold")
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--frame-rate", type=int, default=100)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="DER of a system RTTM against a reference RTTM")
    p.add_argument("--ref", required=True)
    p.add_argument("--sys", required=True)
    p.add_argument("--collar", type=float, default=0.25, help="half-width in seconds")
    p.add_argument("--frame-rate", type=int, default=100)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DiarizationFormatError, ValueError, OSError) as exc:
        print(f"eend-m2f {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
