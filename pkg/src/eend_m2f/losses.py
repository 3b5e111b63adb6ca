"""Hungarian-matched training losses with deep supervision.

Every loss returns a ``(value, weight)`` pair per recording; a batch loss is
``sum(values) / sum(weights)``. Weights are T*S for the diarization loss, S for
the dice loss and the summed per-query weights for the classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .assignment import PROB_EPS, LossWeights, optimal_matching
from .diar_core import FrameMask

NEG_CLASS_WEIGHT = 0.2


def bce(p: torch.Tensor, q) -> torch.Tensor:
    """Elementwise H(p, q) = -q log p - (1 - q) log(1 - p), p clamped to [1e-7, 1 - 1e-7]."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype, device=p.device)
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(q * torch.log(p) + (1 - q) * torch.log1p(-p))


def _check_matching(phi, n_queries: int, n_speakers: int) -> torch.Tensor:
    phi = torch.as_tensor(np.asarray(phi, dtype=np.int64))
    if phi.shape != (n_speakers,):
        raise ValueError(f"matching has shape {tuple(phi.shape)}, expected ({n_speakers},)")
    if n_speakers and (phi.min() < 0 or phi.max() >= n_queries or len(set(phi.tolist())) != n_speakers):
        raise ValueError("matching must be injective into range(N)")
    return phi


def _check_shapes(pred_probs: torch.Tensor, ref: torch.Tensor) -> None:
    if pred_probs.dim() != 2 or ref.dim() != 2 or pred_probs.shape[0] != ref.shape[0]:
        raise ValueError(f"shape mismatch: pred {tuple(pred_probs.shape)} vs ref {tuple(ref.shape)}")


def _unwrap(ref):
    return ref.data if isinstance(ref, FrameMask) else ref


def _as_ref(ref, like: torch.Tensor) -> torch.Tensor:
    data = _unwrap(ref)
    if isinstance(data, np.ndarray):
        data = torch.from_numpy(data.astype(np.float64))
    return torch.as_tensor(data).to(dtype=like.dtype, device=like.device)


def diarization_loss(pred_probs: torch.Tensor, ref, phi) -> tuple[torch.Tensor, float]:
    """Summed BCE between matched prediction columns and reference columns; weight T*S."""
    ref = _as_ref(ref, pred_probs)
    _check_shapes(pred_probs, ref)
    n_frames, n_speakers = ref.shape
    phi = _check_matching(phi, pred_probs.shape[1], n_speakers)
    value = bce(pred_probs[:, phi], ref).sum()
    return value, float(n_frames * n_speakers)


def dice_pair_loss(pred_col: torch.Tensor, ref_col: torch.Tensor) -> torch.Tensor:
    """1 - 2 sum(p y) / (sum p + sum y); empty-vs-empty counts as a perfect match."""
    ref_col = torch.as_tensor(ref_col, dtype=pred_col.dtype)
    denom = pred_col.sum(0) + ref_col.sum(0)
    numer = 2.0 * (pred_col * ref_col).sum(0)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, 1.0 - numer / safe, torch.zeros_like(denom))


def dice_loss(pred_probs: torch.Tensor, ref, phi) -> tuple[torch.Tensor, float]:
    ref = _as_ref(ref, pred_probs)
    _check_shapes(pred_probs, ref)
    n_speakers = ref.shape[1]
    phi = _check_matching(phi, pred_probs.shape[1], n_speakers)
    value = dice_pair_loss(pred_probs[:, phi], ref).sum()
    return value, float(n_speakers)


def class_target(phi, n_queries: int) -> torch.Tensor:
    target = torch.zeros(n_queries, dtype=torch.float64)
    target[torch.as_tensor(np.asarray(phi, dtype=np.int64))] = 1.0
    return target


def classification_loss(
    class_probs: torch.Tensor,
    target: torch.Tensor,
    neg_weight: float = NEG_CLASS_WEIGHT,
    label_smoothing: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    target = torch.as_tensor(target, dtype=class_probs.dtype, device=class_probs.device)
    if target.shape != class_probs.shape:
        raise ValueError(f"length mismatch: {tuple(class_probs.shape)} vs {tuple(target.shape)}")
    w = target + neg_weight * (1 - target)
    q = target * (1 - label_smoothing) + (1 - target) * label_smoothing
    value = (w * bce(class_probs, q)).sum()
    return value, w.sum().detach()


@dataclass
class LossBreakdown:
    """Per-layer weighted components; ``total`` carries the gradient."""

    total: torch.Tensor
    dia: list[torch.Tensor]
    dice: list[torch.Tensor]
    cls: list[torch.Tensor]
    matchings: list[list[np.ndarray]]


def _ratio(values: list, weights: list, like: torch.Tensor) -> torch.Tensor:
    weight = float(sum(float(w) for w in weights))
    value = torch.stack(values).sum() if values else like.new_zeros(())
    if weight == 0:
        return value * 0.0
    return value / weight


def layer_loss(
    logits: torch.Tensor,
    class_probs: torch.Tensor,
    refs: Sequence,
    weights: LossWeights,
    label_smoothing: float = 0.0,
    lengths: Sequence[int] | None = None,
    matchings: Sequence | None = None,
    neg_weight: float = NEG_CLASS_WEIGHT,
):
    """Loss of one supervision layer over a batch.

    logits : (B, T, N); class_probs : (B, N); refs : B arrays of shape (T_b, S_b).
    Frames past ``lengths[b]`` are ignored. If ``matchings`` is None the optimal
    matching is computed for every recording.
    """
    batch = logits.shape[0]
    if len(refs) != batch:
        raise ValueError(f"{len(refs)} references for a batch of {batch}")
    dia_v, dia_w, dice_v, dice_w, cls_v, cls_w, used = [], [], [], [], [], [], []
    for b in range(batch):
        ref = np.asarray(_unwrap(refs[b]))
        n_frames = ref.shape[0] if lengths is None else int(lengths[b])
        ref = ref[:n_frames]
        x = logits[b, :n_frames]
        if matchings is None:
            phi = optimal_matching(
                x.detach().double().cpu().numpy(), class_probs[b].detach().double().cpu().numpy(), ref, weights
            )
        else:
            phi = np.asarray(matchings[b], dtype=np.int64)
        used.append(phi)
        probs = torch.sigmoid(x)
        v, w = diarization_loss(probs, ref, phi)
        dia_v.append(v)
        dia_w.append(w)
        v, w = dice_loss(probs, ref, phi)
        dice_v.append(v)
        dice_w.append(w)
        target = class_target(phi, class_probs.shape[1])
        v, w = classification_loss(class_probs[b], target, neg_weight, label_smoothing)
        cls_v.append(v)
        cls_w.append(w)
    return _ratio(dia_v, dia_w, logits), _ratio(dice_v, dice_w, logits), _ratio(cls_v, cls_w, logits), used


def total_loss(
    layer_outputs: Sequence[tuple[torch.Tensor, torch.Tensor]],
    refs: Sequence,
    weights: LossWeights = LossWeights(),
    label_smoothing: float = 0.0,
    lengths: Sequence[int] | None = None,
    matchings: Sequence | None = None,
    layer_weights: Sequence[float] | None = None,
) -> LossBreakdown:
    """Deep-supervised loss: each layer is matched and scored independently, then summed.

    ``layer_outputs`` holds (logits, class_probs) per layer; single recordings may be
    passed unbatched as ((T, N), (N,)) with ``refs`` a single mask.
    """
    if not layer_outputs:
        raise ValueError("layer_outputs is empty")
    if layer_outputs[0][0].dim() == 2:
        layer_outputs = [(x.unsqueeze(0), p.unsqueeze(0)) for x, p in layer_outputs]
        refs = [refs]
        if matchings is not None:
            matchings = [[m] for m in matchings]
    if layer_weights is None:
        layer_weights = [1.0] * len(layer_outputs)
    total = layer_outputs[0][0].new_zeros(())
    out = LossBreakdown(total, [], [], [], [])
    for idx, (logits, class_probs) in enumerate(layer_outputs):
        dia, dice, cls, used = layer_loss(
            logits,
            class_probs,
            refs,
            weights,
            label_smoothing,
            lengths,
            None if matchings is None else matchings[idx],
        )
        out.dia.append(dia)
        out.dice.append(dice)
        out.cls.append(cls)
        out.matchings.append(used)
        layer = weights.lambda_dia * dia + weights.lambda_dice * dice + weights.lambda_cls * cls
        total = total + layer_weights[idx] * layer
    out.total = total
    return out
