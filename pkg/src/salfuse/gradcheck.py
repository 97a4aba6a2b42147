"""Finite-difference verification of the full training gradient.

Samples individual parameter entries, stratified across the model's top
level submodules, and compares the backpropagated derivative of the total
loss against a central difference at 64-bit precision.  The relative error
denominator is floored so near-zero derivative pairs cannot divide to noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import ValidationError
from .loss import total_loss
from .model import build_model
from .synth import make_dataset

TOLERANCE = 1e-3
REL_FLOOR = 1e-6


@dataclass
class GradSample:
    parameter: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradReport:
    samples: list[GradSample]
    max_rel_error: float
    tolerance: float
    passed: bool

    def worst(self) -> GradSample:
        return max(self.samples, key=lambda s: s.rel_error)


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def check_gradients(run: RunConfig, samples: int, seed: int = 0) -> GradReport:
    """Run the stratified check on the run's model at toy scale."""
    run.validate()
    if samples < 1:
        raise ValidationError(f"gradient check needs at least 1 sample, got {samples}")
    if run.model.input_size > 64:
        raise ValidationError(f"gradient check is limited to input sizes <= 64, got {run.model.input_size}")

    with ad.precision("float64"):
        model = build_model(run.model)
        data = make_dataset(2, run.model.input_size, seed)
        rgb = ad.tensor(np.stack([s.rgb for s in data]))
        depth = ad.tensor(np.stack([s.depth for s in data]))
        gt = np.stack([s.gt for s in data])

        def loss_value() -> float:
            return float(total_loss(model(rgb, depth), gt, run.loss).data.reshape(()))

        model.zero_grad()
        total_loss(model(rgb, depth), gt, run.loss).backward()

        named = list(model.named_parameters())
        groups: dict[str, list] = {}
        for name, p in named:
            groups.setdefault(name.split(".")[0], []).append((name, p))
        group_names = sorted(groups)

        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x96AD]))
        picked: list[GradSample] = []
        for i in range(samples):
            bucket = groups[group_names[i % len(group_names)]]
            name, p = bucket[int(rng.integers(0, len(bucket)))]
            flat = int(rng.integers(0, int(np.prod(p.shape))))
            index = tuple(int(v) for v in np.unravel_index(flat, p.shape))
            analytic = float(p.grad_value()[index])
            numeric = ad.finite_diff_entry(loss_value, p.tensor, index)
            picked.append(GradSample(parameter=name, index=index, analytic=analytic,
                                     numeric=numeric, rel_error=_rel_error(analytic, numeric)))

    max_err = max(s.rel_error for s in picked)
    return GradReport(samples=picked, max_rel_error=max_err,
                      tolerance=TOLERANCE, passed=max_err < TOLERANCE)
