"""Analytic vs central-difference gradient check on a tiny double-precision model.

Attention masks and Hungarian matchings are frozen at the base point so the
loss is a smooth function of the parameters in a neighbourhood of it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .assignment import LossWeights
from .losses import total_loss
from .model import EENDM2F, ModelConfig

log = logging.getLogger(__name__)

COMPONENTS = ("dia", "dice", "cls", "total")
ABS_FLOOR = 1e-8
STENCIL = ((2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0))


def tiny_config() -> ModelConfig:
    return ModelConfig(
        in_dim=23,
        d_model=8,
        n_heads=2,
        conformer_layers=1,
        conformer_ff=16,
        conv_kernel=7,
        decoder_layers=2,
        decoder_ff=16,
        n_queries=4,
        backbone_dropout=0.0,
        query_dropout=0.0,
    )


def param_group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]


@dataclass
class GroupResult:
    component: str
    group: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float
    passed: bool


@dataclass
class GradcheckReport:
    results: list[GroupResult] = field(default_factory=list)
    tolerance: float = 1e-3
    kink_retries: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.rel_error for r in self.results), default=0.0)

    def format(self) -> str:
        lines = [f"{'component':<8} {'group':<20} {'rel_err':>10} {'|analytic|':>12} {'|numeric|':>12}  ok"]
        for r in self.results:
            lines.append(
                f"{r.component:<8} {r.group:<20} {r.rel_error:>10.2e} {r.analytic_norm:>12.4e} "
                f"{r.numeric_norm:>12.4e}  {'PASS' if r.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def _problem(seed: int, n_frames: int, n_speakers: int):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(1, n_frames, 23)))
    ref = rng.random((n_frames, n_speakers)) < 0.4
    ref[rng.integers(n_frames, size=n_speakers), np.arange(n_speakers)] = True
    return x, ref


def run_gradcheck(
    seed: int = 0,
    n_frames: int = 40,
    n_speakers: int = 2,
    h: float = 1e-4,
    tol: float = 1e-3,
    label_smoothing: float = 0.1,
    prepare: Callable[[EENDM2F], None] | None = None,
    corrupt: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
) -> GradcheckReport:
    """Compare autograd against central differences for every loss component and parameter group.

    ``prepare(model)`` may edit the freshly initialized parameters in place.
    ``corrupt(name, grad)`` may tamper with the analytic gradients; it exists so
    the checker itself can be shown to fail.
    """
    torch.manual_seed(seed)
    model = EENDM2F(tiny_config()).double().eval()
    if prepare is not None:
        with torch.no_grad():
            prepare(model)
    x, ref = _problem(seed, n_frames, n_speakers)
    weights = LossWeights()
    smoothing = label_smoothing

    with torch.no_grad():
        base = model(x)
        masks = [m.clone() for m in model.last_masks]
        matchings = total_loss(base, [ref], weights, smoothing).matchings

    # ReLU sign patterns expose kinks: a difference quotient whose stencil points
    # see a different pattern than the base point straddles a kink and is retried
    # with a smaller step
    patterns: list[torch.Tensor] = []
    relus = [m for m in model.modules() if isinstance(m, torch.nn.ReLU)]
    hooks = [m.register_forward_hook(lambda mod, inp, out: patterns.append(inp[0] > 0)) for m in relus]

    def components() -> dict[str, torch.Tensor]:
        patterns.clear()
        out = total_loss(model(x, attn_masks=masks), [ref], weights, smoothing, matchings=matchings)
        return {"dia": sum(out.dia), "dice": sum(out.dice), "cls": sum(out.cls), "total": out.total}

    names, params = zip(*model.named_parameters())
    values = components()
    base_pattern = list(patterns)
    analytic = {}
    for comp in COMPONENTS:
        grads = torch.autograd.grad(values[comp], params, retain_graph=True, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g.detach().clone() for p, g in zip(params, grads)]
        if corrupt is not None:
            grads = [corrupt(n, g) for n, g in zip(names, grads)]
        analytic[comp] = grads

    def same_side() -> bool:
        return all(torch.equal(a, b) for a, b in zip(patterns, base_pattern))

    def quotient(flat, k, orig, step):
        # fourth-order central stencil; O(step^4) truncation
        acc = dict.fromkeys(COMPONENTS, 0.0)
        smooth = True
        for offset, coef in STENCIL:
            flat[k] = orig + offset * step
            for comp, v in components().items():
                acc[comp] += coef * float(v)
            smooth = smooth and same_side()
        flat[k] = orig
        return {c: v / (12 * step) for c, v in acc.items()}, smooth

    numeric = {comp: [torch.zeros_like(p) for p in params] for comp in COMPONENTS}
    retried = 0
    with torch.no_grad():
        for idx, p in enumerate(params):
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                step = h
                est, smooth = quotient(flat, k, orig, step)
                while not smooth and step > h * 1e-3:
                    step /= 10
                    retried += 1
                    est, smooth = quotient(flat, k, orig, step)
                for comp in COMPONENTS:
                    numeric[comp][idx].view(-1)[k] = est[comp]
    for hook in hooks:
        hook.remove()

    groups = sorted({param_group(n) for n in names}, key=[param_group(n) for n in names].index)
    report = GradcheckReport(tolerance=tol, kink_retries=retried)
    for comp in COMPONENTS:
        for group in groups:
            idx = [i for i, n in enumerate(names) if param_group(n) == group]
            a = torch.cat([analytic[comp][i].reshape(-1) for i in idx])
            n = torch.cat([numeric[comp][i].reshape(-1) for i in idx])
            a_norm, n_norm = float(a.norm()), float(n.norm())
            diff = float((a - n).norm())
            scale = max(a_norm, n_norm)
            rel = diff / scale if scale > ABS_FLOOR else diff
            passed = rel <= tol if scale > ABS_FLOOR else diff <= ABS_FLOOR
            report.results.append(GroupResult(comp, group, rel, a_norm, n_norm, passed))
    log.info("gradcheck max relative error %.3e (%d kink retries)", report.max_error, retried)
    return report
