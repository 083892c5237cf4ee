"""Seeded random streams and the gradient contract used by every loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .errors import ContractError, NumericError

LossFn = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


def _label_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed) & (2**64 - 1)}:{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Counter-based random stream addressed by ``(seed, label)``.

    Backed by Philox, so a stream is fully determined by its key and the
    sequence of draws made from it; sibling labels never share state.
    """

    def __init__(self, seed: int, label: str = "default"):
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_label_key(self.seed, label)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian(rng: RngStream, shape, dtype=torch.float32) -> torch.Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ContractError(f"invalid shape {shape}")
    return rng.normal(shape, dtype)


class _FiniteWatch(TorchFunctionMode):
    """Records the first torch op whose floating output is non-finite."""

    def __init__(self):
        super().__init__()
        self.offender: str | None = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.offender is None:
            for t in out if isinstance(out, (tuple, list)) else (out,):
                if isinstance(t, torch.Tensor) and t.is_floating_point() and not torch.isfinite(t).all():
                    self.offender = getattr(func, "__name__", repr(func))
                    break
        return out


def _evaluate(loss_fn: LossFn, leaves: Mapping[str, torch.Tensor]) -> torch.Tensor:
    loss = loss_fn(leaves)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError("loss evaluator must return a scalar tensor")
    loss = loss.reshape(())
    if not torch.isfinite(loss):
        with torch.no_grad(), _FiniteWatch() as watch:
            loss_fn({k: v.detach() for k, v in leaves.items()})
        raise NumericError(f"non-finite loss {loss.item()} (first non-finite op: {watch.offender})")
    return loss


def gradient(loss_fn: LossFn, leaves: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradient of a scalar loss with respect to named leaves."""
    work = {k: v.detach().clone().requires_grad_(True) for k, v in leaves.items()}
    loss = _evaluate(loss_fn, work)
    names = list(work)
    if not loss.requires_grad:
        return {k: torch.zeros_like(v).detach() for k, v in work.items()}
    grads = torch.autograd.grad(loss, [work[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(work[k]) if g is None else g.detach()) for k, g in zip(names, grads)}


@dataclass
class GradReport:
    per_leaf_max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    passed: bool = True


def finite_difference_check(
    loss_fn: LossFn,
    leaves: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: Mapping[str, torch.Tensor] | None = None,
) -> GradReport:
    """Compare analytic gradients with central differences, element by element.

    ``analytic`` overrides the gradients under test (used for negative controls).
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = {k: v.detach().clone() for k, v in leaves.items()}
    if analytic is None:
        analytic = gradient(loss_fn, base)
    report = GradReport(tolerance=tolerance)
    with torch.no_grad():
        for name, value in base.items():
            flat = value.reshape(-1)
            numeric = torch.empty_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                hi = _evaluate(loss_fn, base).item()
                flat[idx] = orig - step
                lo = _evaluate(loss_fn, base).item()
                flat[idx] = orig
                numeric[idx] = (hi - lo) / (2 * step)
            ana = analytic[name].reshape(-1).to(numeric.dtype)
            denom = torch.maximum(torch.maximum(ana.abs(), numeric.abs()), torch.full_like(ana, 1e-8))
            err = ((ana - numeric).abs() / denom).max().item() if flat.numel() else 0.0
            report.per_leaf_max_rel_error[name] = err
    report.passed = all(e <= tolerance for e in report.per_leaf_max_rel_error.values())
    return report


def stable_hash(obj) -> str:
    """Short content hash of a JSON-able object or raw bytes."""
    import json

    if isinstance(obj, (bytes, bytearray)):
        data = bytes(obj)
    else:
        data = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(data).hexdigest()[:16]


def all_finite(*tensors: torch.Tensor) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)

