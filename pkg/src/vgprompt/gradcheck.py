"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, first_nonfinite


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    kinks: list = field(default_factory=list)


@dataclass
class GradcheckReport:
    tol: float
    checks: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error <= self.tol for c in self.checks)

    @property
    def flagged(self) -> list[tuple[str, tuple]]:
        """Components where the one-sided differences disagree (a kink, e.g. a max tie)."""
        return [(c.name, idx) for c in self.checks for idx in c.kinks]

    def __str__(self):
        lines = [f"gradcheck tol={self.tol:g} {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            note = f"  kinks={len(c.kinks)}" if c.kinks else ""
            lines.append(f"  {c.name}: max rel err {c.max_rel_error:.3e} at {c.worst_index}{note}")
        return "\n".join(lines)


def _evaluate(f: Callable[[], Tensor]) -> tuple[Tensor, float]:
    out = f()
    value = float(np.sum(out.data))
    if not np.isfinite(value):
        bad = first_nonfinite(out)
        op = bad.op if bad is not None else "unknown"
        raise NonFiniteError(f"non-finite value produced by op '{op}'", op=op)
    return out, value


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
              tol: float = 1e-4, floor: float = 1e-6, kink_tol: float = 1e-3) -> GradcheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each component of each parameter nudged by
    ``+-eps``; parameters are perturbed in place and restored. The relative
    error of a component is ``|a - n| / max(|a|, |n|, floor)``.

    Components whose forward and backward one-sided slopes differ by more than
    ``kink_tol`` (relative) are listed as kinks: the function is not
    differentiable there, so a mismatch is expected rather than a bug.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 parameters, {p.name or p} is {p.data.dtype}")
        p.grad = None
    out, f0 = _evaluate(f)
    out.backward()
    checks = []
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        rel = np.zeros(flat.size)
        kinks = []
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = _evaluate(f)[1]
            flat[j] = orig - eps
            fm = _evaluate(f)[1]
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[j]
            rel[j] = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if abs(right - left) > kink_tol * max(abs(right), abs(left), floor) + 1e3 * eps:
                kinks.append(np.unravel_index(j, p.shape))
        worst = int(np.argmax(rel)) if rel.size else 0
        checks.append(TensorCheck(
            name=p.name or f"param{pi}",
            max_rel_error=float(rel.max()) if rel.size else 0.0,
            worst_index=tuple(int(i) for i in np.unravel_index(worst, p.shape)) if rel.size else (),
            kinks=kinks,
        ))
    for p in params:
        p.grad = None
    return GradcheckReport(tol=tol, checks=checks)
