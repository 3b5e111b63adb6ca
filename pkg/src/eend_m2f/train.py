"""Training loop, learning-rate schedule, validation DER and checkpoint averaging."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .checkpoint import average_state_dicts, load_checkpoint, load_backbone, save_checkpoint
from .config import TrainConfig
from .losses import total_loss
from .model import EENDM2F, InferenceConfig
from .scorer import DerResult, compute_der, corpus_der
from .simulate import load_recording, read_manifest

log = logging.getLogger(__name__)

ONE_CYCLE_START_DIV = 25.0


class Recording(NamedTuple):
    recording_id: str
    features: np.ndarray  # (T, D') float32
    labels: np.ndarray  # (T, S) bool


@dataclass
class CheckpointMeta:
    step: int
    validation_der: float
    path: Path


@dataclass
class EvalResult:
    der: DerResult
    count_accuracy: float
    n_recordings: int


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Learning rate before update ``step`` (0-based).

    one-cycle: linear ramp from max_lr / 25 to max_lr over the first ``warmup_frac``
    of the steps, then cosine decay to ``max_lr * final_lr_ratio`` at ``steps``.
    """
    if cfg.schedule == "constant" or cfg.steps == 0:
        return cfg.max_lr
    step = min(max(step, 0), cfg.steps)
    peak = cfg.warmup_frac * cfg.steps
    start = cfg.max_lr / ONE_CYCLE_START_DIV
    floor = cfg.max_lr * cfg.final_lr_ratio
    if step <= peak:
        return start + (cfg.max_lr - start) * (step / peak if peak > 0 else 1.0)
    frac = (step - peak) / (cfg.steps - peak)
    return floor + 0.5 * (cfg.max_lr - floor) * (1.0 + math.cos(math.pi * frac))


def load_manifest_recordings(path, frame_rate: int = 100) -> list[Recording]:
    recs = []
    for entry in read_manifest(path):
        feats, labels = load_recording(entry, frame_rate)
        recs.append(Recording(entry.recording_id, feats, labels.data))
    if not recs:
        raise ValueError(f"{path}: empty manifest")
    return recs


def _as_recordings(data, frame_rate: int) -> list[Recording]:
    if isinstance(data, (str, Path)):
        return load_manifest_recordings(data, frame_rate)
    recs = [r if isinstance(r, Recording) else Recording(*r) for r in data]
    if not recs:
        raise ValueError("no recordings")
    return recs


def pad_batch(features: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([f.shape[0] for f in features], dtype=torch.long)
    dim = features[0].shape[1]
    x = torch.zeros(len(features), int(lengths.max()), dim, dtype=dtype)
    for b, f in enumerate(features):
        x[b, : f.shape[0]] = torch.from_numpy(np.asarray(f, dtype=np.float32)).to(dtype)
    return x, lengths


def sample_crops(recs: list[Recording], batch_size: int, crop_frames: int, rng: np.random.Generator):
    """Uniform recording choice, random crop; silent speakers are dropped from the crop."""
    ids, feats, labels = [], [], []
    for _ in range(batch_size):
        rec = recs[int(rng.integers(len(recs)))]
        n_frames = rec.features.shape[0]
        start = int(rng.integers(n_frames - crop_frames + 1)) if n_frames > crop_frames else 0
        stop = start + min(crop_frames, n_frames)
        lab = rec.labels[start:stop]
        ids.append(rec.recording_id)
        feats.append(rec.features[start:stop])
        labels.append(lab[:, lab.any(0)])
    return ids, feats, labels


def evaluate(
    model: EENDM2F, recs: list[Recording], inference: InferenceConfig | None = None, batch_size: int = 16
) -> EvalResult:
    """Score full recordings (no cropping, no collar)."""
    inference = inference or InferenceConfig()
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    results, hits = [], 0
    try:
        for lo in range(0, len(recs), batch_size):
            chunk = recs[lo : lo + batch_size]
            x, lengths = pad_batch([r.features for r in chunk], dtype)
            for rec, pred in zip(chunk, model.infer_batch(x, lengths, inference)):
                results.append(compute_der(pred, rec.labels))
                hits += int(pred.shape[1] == rec.labels.shape[1])
    finally:
        model.train(was_training)
    return EvalResult(corpus_der(results), hits / len(recs), len(recs))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train(
    cfg: TrainConfig,
    train_data,
    val_data,
    out_dir,
    log_every: int = 100,
) -> CheckpointMeta:
    """Train from scratch (or from a backbone checkpoint) and write the averaged model.

    ``train_data`` / ``val_data`` are manifest paths or lists of recordings. Writes
    ``ckpt-<step>.em2f`` for the best ``keep_best_k`` validation DERs,
    ``averaged.em2f`` and ``trace.tsv`` into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_recs = _as_recordings(train_data, cfg.frame_rate)
    val_recs = _as_recordings(val_data, cfg.frame_rate)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = EENDM2F(cfg.model)
    if cfg.init_backbone:
        _, state, _ = load_checkpoint(cfg.init_backbone)
        loaded = load_backbone(model, state)
        log.info("initialized %d backbone tensors from %s", len(loaded), cfg.init_backbone)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights
    crop_frames = int(round(cfg.utterance_len * cfg.frame_rate))

    trace = []
    kept: list[tuple[float, int, Path]] = []

    def validate(step: int, keep: bool = True) -> float:
        res = evaluate(model, val_recs, cfg.inference)
        der = res.der.der
        trace.append((step, der, res.count_accuracy))
        log.info("step %d: val DER %.2f%%, count acc %.3f", step, 100 * der, res.count_accuracy)
        if not keep:
            return der
        path = out_dir / f"ckpt-{step:07d}.em2f"
        kept.append((der, step, path))
        kept.sort(key=lambda item: (item[0], item[1]))
        save_checkpoint(path, model.state_dict(), cfg.model, {"step": step, "validation_der": der})
        for _, _, stale in kept[cfg.keep_best_k :]:
            stale.unlink(missing_ok=True)
        del kept[cfg.keep_best_k :]
        return der

    model.train()
    # the untrained baseline is traced; it only enters the averaging pool when nothing else will
    validate(0, keep=cfg.steps == 0)
    for step in range(1, cfg.steps + 1):
        _set_lr(opt, lr_schedule(step - 1, cfg))
        ids, feats, labels = sample_crops(train_recs, cfg.batch_size, crop_frames, rng)
        x, lengths = pad_batch(feats)
        outputs = model(x, lengths)
        loss = total_loss(outputs, labels, weights, cfg.label_smoothing, lengths).total
        if not torch.isfinite(loss):
            dump = out_dir / "divergence.json"
            dump.write_text(json.dumps({"step": step, "batch_ids": ids, "loss": repr(loss.item())}))
            raise TrainingDiverged(f"non-finite loss at step {step}; batch ids {ids} written to {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if step % log_every == 0:
            log.info("step %d: loss %.4f lr %.3g", step, loss.item(), opt.param_groups[0]["lr"])
        if step % cfg.eval_every == 0 or step == cfg.steps:
            validate(step)

    states = [load_checkpoint(path)[1] for _, _, path in kept]
    avg = average_state_dicts(states)
    model.load_state_dict({k: v.to(model.state_dict()[k].dtype) for k, v in avg.items()})
    final = evaluate(model, val_recs, cfg.inference)
    best_der = kept[0][0]
    log.info(
        "averaged %d checkpoints: val DER %.2f%% (best single %.2f%%, delta %+.2f)",
        len(kept),
        100 * final.der.der,
        100 * best_der,
        100 * (final.der.der - best_der),
    )
    path = out_dir / "averaged.em2f"
    meta = {
        "step": cfg.steps,
        "validation_der": final.der.der,
        "best_single_der": best_der,
        "averaged_steps": [s for _, s, _ in kept],
    }
    save_checkpoint(path, model.state_dict(), cfg.model, meta)
    with open(out_dir / "trace.tsv", "w") as f:
        f.write("step\tval_der\tcount_acc\n")
        for step, der, acc in trace:
            f.write(f"{step}\t{der!r}\t{acc!r}\n")
    return CheckpointMeta(cfg.steps, final.der.der, path)


def read_trace(path) -> list[tuple[int, float, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    return [(int(a), float(b), float(c)) for a, b, c in (r.split("\t") for r in rows)]
