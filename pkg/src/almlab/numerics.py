"""Dense primitives and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; torch's autograd provides the
reverse-mode pass. ``grad_check`` is the independent route: it perturbs
parameters and compares central differences against the autograd gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .errors import NumericError, ShapeError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize over the last axis, then apply ``gamma * x_hat + beta``.

    Uses the biased (population) variance.
    """
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm: zero-length last axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, x * Phi(x) with the erf-based Gaussian CDF."""
    return 0.5 * x * (1.0 + torch.erf(x / _SQRT2))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` share the leading shape.
    Masked positions may hold any target id (even out of range).
    """
    V = logits.shape[-1]
    flat_logits = logits.reshape(-1, V)
    flat_targets = targets.reshape(-1).long()
    flat_mask = mask.reshape(-1).bool()
    if flat_targets.shape[0] != flat_logits.shape[0] or flat_mask.shape[0] != flat_logits.shape[0]:
        raise ShapeError("cross_entropy: logits/targets/mask lengths differ")
    n = int(flat_mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked")
    picked = flat_targets[flat_mask]
    if bool(((picked < 0) | (picked >= V)).any()):
        raise ValueError("cross_entropy: target id out of range")
    logp = log_softmax(flat_logits[flat_mask], dim=-1)
    nll = -logp.gather(1, picked.unsqueeze(1)).squeeze(1)
    return nll.sum() / n


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    n_probes: int = 0
    n_unresolved: int = 0  # probes below the finite-difference resolution, not scored

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_probes: int | None = 24,
    seed: int = 0,
    resolution: float | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn(params)`` with central differences.

    ``params`` are copied to float64. For tensors larger than ``max_probes``
    entries, a seeded random subset of coordinates is probed (``None`` probes
    everything). Raises ``NumericError`` if the loss is not finite.

    A central difference cannot resolve gradients much below
    ``eps * |f| / h``. A probe where both the analytic and the numeric value
    are under ``resolution`` is counted in ``n_unresolved`` and left out of
    ``max_rel_error``. A missing gradient (analytic 0, numeric large) is still
    scored. The default resolution is ``4 * eps64 * max(|f|, 1) / h / tolerance``;
    pass ``0.0`` to score every probe.
    """
    work = {k: v.detach().to(torch.float64).clone().requires_grad_(True) for k, v in params.items()}
    loss = fn(work)
    if loss.numel() != 1:
        raise ShapeError("grad_check: fn must return a scalar")
    if not math.isfinite(loss.item()):
        raise NumericError("grad_check: non-finite loss at the evaluation point")
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {
        k: (g.detach() if g is not None else torch.zeros_like(v)) for (k, v), g in zip(work.items(), grads)
    }

    if resolution is None:
        resolution = 4 * torch.finfo(torch.float64).eps * max(abs(loss.item()), 1.0) / h / tolerance
    gen = torch.Generator().manual_seed(seed)
    errors: dict[str, float] = {}
    probes = 0
    unresolved = 0
    with torch.no_grad():
        frozen = {k: v.detach().clone() for k, v in work.items()}
        for name, tensor in frozen.items():
            numel = tensor.numel()
            if max_probes is None or numel <= max_probes:
                idx = torch.arange(numel)
            else:
                idx = torch.randperm(numel, generator=gen)[:max_probes]
            flat = tensor.view(-1)
            worst = 0.0
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(fn(frozen))
                flat[i] = orig - h
                f_minus = float(fn(frozen))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"grad_check: non-finite loss while perturbing {name}")
                numeric = (f_plus - f_minus) / (2 * h)
                a = float(analytic[name].view(-1)[i])
                probes += 1
                if max(abs(a), abs(numeric)) < resolution:
                    unresolved += 1
                    continue
                worst = max(worst, rel_error(a, numeric))
            errors[name] = worst
    max_err = max(errors.values(), default=0.0)
    return GradCheckReport(
        max_rel_error=max_err, per_parameter_errors=errors, tolerance=tolerance, n_probes=probes, n_unresolved=unresolved
    )


def module_grad_check(module: torch.nn.Module, loss_fn: Callable[[], torch.Tensor], **kwargs) -> GradCheckReport:
    """``grad_check`` over every trainable parameter of ``module``.

    ``loss_fn`` runs the module forward. The module is cast to float64 and
    each probe swaps the parameter tensors in, restoring them afterwards.
    """
    module = module.double()
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    base = {n: p for n, p in module.named_parameters() if p.requires_grad}

    def fn(ps):
        with _swapped(module, ps):
            return loss_fn()

    return grad_check(fn, {n: base[n] for n in names}, **kwargs)


class _swapped:
    """Temporarily replace module parameters with the given tensors."""

    def __init__(self, module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]):
        self.module = module
        self.tensors = tensors
        self.saved: dict[str, torch.Tensor] = {}

    def _set(self, name: str, value):
        owner = self.module
        *path, leaf = name.split(".")
        for p in path:
            owner = getattr(owner, p)
        # bypass nn.Module.__setattr__ parameter type checks
        owner._parameters[leaf] = value

    def __enter__(self):
        params = dict(self.module.named_parameters())
        for name, value in self.tensors.items():
            self.saved[name] = params[name]
            self._set(name, value)
        return self.module

    def __exit__(self, *exc):
        for name, value in self.saved.items():
            self._set(name, value)
        return False
