"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, UsageError
from .tensor import Tape, Tensor, backward, no_record


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_probes: int
    worst: tuple[int, int] | None = None
    analytic: list[float] = field(default_factory=list, repr=False)
    numeric: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    probes: int | None = 50,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*inputs)`` with central differences.

    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps round-off on near-zero gradients from reading as failure.
    With ``probes`` set, that many entries are sampled uniformly across all
    inputs, otherwise every entry is probed.
    """
    if step <= 0 or tol <= 0:
        raise ParameterError("grad_check step and tol must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.data = np.array(t.data, copy=True)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    _scalar(out)
    backward(tape, out)
    grads = [t.grad for t in inputs]

    positions = [(ti, i) for ti, t in enumerate(inputs) for i in range(t.data.size)]
    if probes is not None and len(positions) > probes:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(positions), size=probes, replace=False)
        positions = [positions[p] for p in sorted(picks)]

    report = GradCheckReport(max_rel_error=0.0, tol=tol, n_probes=len(positions))
    with no_record():
        for k, (ti, i) in enumerate(positions):
            flat = inputs[ti].data.reshape(-1)
            orig = flat[i]
            try:
                flat[i] = orig + step
                fp = _scalar(f(*inputs))
                flat[i] = orig - step
                fm = _scalar(f(*inputs))
            except NumericError as exc:
                raise NumericError(f"non-finite output at probe {k} (input {ti}, index {i})") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite output at probe {k} (input {ti}, index {i})")
            num = (fp - fm) / (2.0 * step)
            ana = float(grads[ti].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            report.analytic.append(ana)
            report.numeric.append(num)
            if rel > report.max_rel_error or report.worst is None:
                report.max_rel_error = max(rel, report.max_rel_error)
                report.worst = (ti, i)
    for t in inputs:
        t.grad = None
    return report
