"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ContractViolation, DeterminismError
from .tensor import Tensor


@dataclass
class FiniteDiffReport:
    """Per-parameter worst relative error between analytic and FD gradients."""

    max_rel_errors: list[float] = field(default_factory=list)
    tol: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def finite_diff_check(f: Callable[[], Tensor], params: list[Tensor],
                      h: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare tape gradients of the scalar f() against central differences.

    f must be deterministic (checked by evaluating twice) and close over
    `params`, which are perturbed in place for the difference quotients.
    Relative error per element is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    for p in params:
        if not p.requires_grad or p.tape is None:
            raise ContractViolation("finite_diff_check params must be tape parameters")
    tape = params[0].tape

    mark = tape.mark()
    v1 = f().values.copy()
    tape.truncate(mark)
    v2 = f().values.copy()
    tape.truncate(mark)
    if not np.array_equal(v1, v2):
        raise DeterminismError("f() returned different values on repeated evaluation")
    if v1.shape != ():
        raise ContractViolation("finite_diff_check expects a scalar-valued f")

    for p in params:
        p.zero_grad()
    loss = f()
    tape.backward(loss)
    tape.truncate(mark)
    analytic = [p.grad.copy() for p in params]

    report = FiniteDiffReport(tol=tol)
    with tape.no_grad():
        for p, ag in zip(params, analytic):
            worst = 0.0
            flat = p.values.reshape(-1)
            aflat = ag.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().values)
                flat[i] = orig - h
                fm = float(f().values)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                denom = max(abs(aflat[i]), abs(fd), 1e-8)
                worst = max(worst, abs(aflat[i] - fd) / denom)
            report.max_rel_errors.append(worst)
    for p in params:
        p.zero_grad()
    return report
