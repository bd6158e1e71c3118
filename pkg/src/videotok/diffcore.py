"""Reverse-mode gradients and a central-difference oracle.

Forward passes run in float32 through torch autograd; the finite-difference
oracle re-evaluates the same function in float64 so that cancellation in the
difference quotient does not swamp the comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
from torch import Tensor

from .errors import NumericalError

__all__ = ["backward", "grad_check", "GradReport", "relative_error", "check_finite"]


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def backward(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` with respect to every leaf in ``leaves``.

    Leaves that do not participate in the graph receive an all-zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    names = [k for k, v in leaves.items() if v.requires_grad]
    tensors = [leaves[k] for k in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True) if tensors else ()
    out = {}
    for name, t, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(t) if g is None else g
    for name, t in leaves.items():
        if name not in out:
            out[name] = torch.zeros_like(t)
    return out


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


@dataclass
class GradReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst: dict[str, tuple[int, float, float]] = field(default_factory=dict)
    tol: float = 1e-3
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_error.values())

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} "
                 f"max rel err {self.overall:.3e} (tol {self.tol:g}, {self.checked_entries} entries)"]
        for name, err in sorted(self.max_rel_error.items(), key=lambda kv: -kv[1]):
            idx, a, n = self.worst[name]
            lines.append(f"  {name:<48s} {err:.3e}  [flat {idx}: analytic {a:+.6e} fd {n:+.6e}]")
        return "\n".join(lines)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    theta: Mapping[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare autograd gradients of ``f`` against 64-bit central differences.

    ``f`` must be dtype-agnostic: it receives a dict of tensors (float32 for
    the analytic pass, float64 for the oracle) and computes in that dtype.
    With ``max_entries`` set, each parameter is probed at that many randomly
    chosen flat indices instead of exhaustively.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves32 = {k: v.detach().to(torch.float32).clone().requires_grad_(True) for k, v in theta.items()}
    analytic = backward(f(leaves32), leaves32)

    base64 = {k: v.detach().to(torch.float64).clone() for k, v in theta.items()}
    gen = torch.Generator().manual_seed(seed)
    report = GradReport(tol=tol)

    def evaluate() -> float:
        with torch.no_grad():
            val = float(f(base64))
        if math.isnan(val):
            raise NumericalError("objective returned NaN during finite differencing")
        return val

    for name, t in base64.items():
        flat = t.view(-1)
        n = flat.numel()
        if max_entries is None or max_entries >= n:
            idx = range(n)
        else:
            idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
        g = analytic[name].reshape(-1)
        worst = (0, 0.0, 0.0)
        max_err = 0.0
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = float(g[i])
            err = relative_error(a, fd)
            report.checked_entries += 1
            if err >= max_err:
                max_err, worst = err, (i, a, fd)
        report.max_rel_error[name] = max_err
        report.worst[name] = worst
    return report
