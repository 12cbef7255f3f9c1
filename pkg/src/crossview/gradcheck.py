"""Central finite-difference verification of a model's parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, euclidean_loss, record_patterns, softmax_cross_entropy
from .models import ArchSpec, LinearModel, MultiScaleNet, Network, with_dtype


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped_nonsmooth: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        # a tensor with no usable probe has not been checked at all
        return all(v <= self.tolerance and self.checked[k] > 0 for k, v in self.max_rel_error.items())

    def summary(self) -> str:
        lines = [f"{k}: max_rel_err={v:.3e} ({self.checked[k]} coords)" for k, v in self.max_rel_error.items()]
        lines.append(f"skipped (kink/tie crossings): {self.skipped_nonsmooth}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tolerance:g}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradient_check(
    model,
    inputs: tuple,
    loss_fn: Callable[[Tensor], Tensor],
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    samples_per_entry: int = 12,
    seed: int = 0,
    max_attempts: int = 8,
) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled coordinates.

    The check runs on a float64 copy of ``model``. A probe whose +/- epsilon
    evaluations change any relu mask or maxpool argmax straddles a
    non-differentiable point; it is skipped and another coordinate is drawn.
    """
    m = with_dtype(model, np.float64)
    inputs = tuple(np.asarray(x, dtype=np.float64) if np.asarray(x).dtype != np.uint8 else np.asarray(x) for x in inputs)
    rng = np.random.default_rng(seed)

    def evaluate() -> tuple[float, list]:
        with record_patterns() as log:
            loss = loss_fn(m(*inputs))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss is not finite ({value})")
        return value, log

    m.params.zero_grad()
    with record_patterns() as base_log:
        loss = loss_fn(m(*inputs))
    if not np.isfinite(float(loss.data)):
        raise NonFiniteLoss(f"loss is not finite ({float(loss.data)})")
    loss.backward()
    analytic = {k: t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for k, t in m.params.items()}

    report = GradCheckReport(tolerance, epsilon)
    for name, t in m.params.items():
        flat = t.data.reshape(-1)
        worst, done, attempts = 0.0, 0, 0
        target = min(samples_per_entry, flat.size)
        while done < target and attempts < target * max_attempts:
            attempts += 1
            i = int(rng.integers(flat.size))
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, log_p = evaluate()
            flat[i] = orig - epsilon
            lm, log_m = evaluate()
            flat[i] = orig
            if log_p != base_log or log_m != base_log:
                report.skipped_nonsmooth += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
            done += 1
        report.max_rel_error[name] = worst
        report.checked[name] = done
    return report


def check_model(kind: str = "default", epsilon: float = 1e-3, tolerance: float = 1e-3, batch: int = 2,
                samples_per_entry: int = 12, seed: int = 0, max_attempts: int = 40) -> GradCheckReport:
    """Gradient check of a freshly built model on random inputs.

    ``default`` is the regression loss on the default architecture, ``ground``
    the classification loss, ``multi`` a small three-scale fusion network and
    ``linear`` a single fully connected layer.
    """
    rng = np.random.default_rng(seed)

    def blocky(side: int, block: int) -> np.ndarray:
        # piecewise-constant images keep the number of distinct pre-activations
        # small, so most probes stay clear of relu kinks and pooling ties
        cells = rng.uniform(0, 1, (batch, 3, side // block, side // block))
        return cells.repeat(block, axis=2).repeat(block, axis=3)

    if kind == "linear":
        model = LinearModel.build(10, 6, seed)
        inputs = (rng.standard_normal((batch, 10)),)
        target = rng.standard_normal((batch, 6))
    elif kind in ("default", "ground"):
        spec = ArchSpec(class_count=8 if kind == "ground" else None)
        model = Network.build(spec, seed)
        inputs = (blocky(spec.input_side, 16),)
        target = rng.standard_normal((batch, spec.feature_dim))
    elif kind == "multi":
        spec = ArchSpec(input_side=16, conv_blocks=(4, 8), fc_hidden=16, feature_dim=8)
        base = Network.build(spec, seed)
        model = MultiScaleNet.from_single(base, seed=seed + 1)
        # perturb each subnet so the three copies differ
        for name, t in model.params.items():
            if not name.startswith("fusion"):
                t.data += (0.05 * rng.standard_normal(t.shape)).astype(t.data.dtype)
        inputs = tuple(blocky(16, 4) for _ in range(3))
        target = rng.standard_normal((batch, spec.feature_dim))
    else:
        raise ValueError(f"unknown gradient-check model {kind!r}")

    if kind == "ground":
        labels = rng.integers(0, 8, batch)
        loss_fn = lambda out: softmax_cross_entropy(out, labels)
    else:
        loss_fn = lambda out: euclidean_loss(out, target)
    return gradient_check(model, inputs, loss_fn, epsilon=epsilon, tolerance=tolerance,
                          samples_per_entry=samples_per_entry, seed=seed, max_attempts=max_attempts)
