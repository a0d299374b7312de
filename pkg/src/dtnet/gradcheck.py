"""Central-difference gradient checker for tape-differentiated functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dtnet import ops
from dtnet.tensor import DecisionLog, Tape, Tensor

ABS_FALLBACK = 1e-8


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    n_checked: int
    per_input: list[float] = field(default_factory=list)
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _scalar(out: Tensor) -> Tensor:
    return out if out.data.ndim == 0 else ops.sum(out)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> GradcheckReport:
    """Compare tape gradients of ``sum(f(*inputs))`` against central differences.

    Inputs must be float64. A coordinate's error is ``|a - n| / max(|a|, |n|)``
    unless ``|a - n| < 1e-8``, in which case it counts as zero. With
    ``max_coords`` set, a seeded random subset of coordinates per input is
    probed instead of all of them.

    With ``skip_kinks`` a coordinate whose probes change any discrete choice
    (a ReLU or threshold mask, a pooling argmax) relative to the unperturbed
    pass is not scored; the function is not differentiable across that step.
    Such coordinates are counted in ``n_skipped``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.data = np.ascontiguousarray(t.data)
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")

    with Tape() as tape, DecisionLog() as base:
        tape.watch(inputs)
        out = _scalar(f(*inputs))
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function output is not finite")
    analytic = tape.gradient(out, inputs)

    def evaluate() -> tuple[float, bool]:
        with DecisionLog() as probe:
            val = float(_scalar(f(*inputs)).data)
        if not np.isfinite(val):
            raise FloatingPointError("function output is not finite")
        return val, probe.digests != base.digests

    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    per_input = []
    n_checked = n_skipped = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        local = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp, kink_p = evaluate()
            flat[i] = orig - eps
            fm, kink_m = evaluate()
            flat[i] = orig
            if skip_kinks and (kink_p or kink_m):
                n_skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            diff = abs(gflat[i] - num)
            worst_abs = max(worst_abs, diff)
            if diff >= ABS_FALLBACK:
                local = max(local, diff / max(abs(gflat[i]), abs(num)))
            n_checked += 1
        per_input.append(local)
        worst_rel = max(worst_rel, local)
    return GradcheckReport(worst_rel, worst_abs, tol, n_checked, per_input, n_skipped)
