"""Differentiable tensor substrate and gradient verification.

The networks in this package run on torch tensors with reverse-mode autograd.
This module pins down the substrate contract: the set of differentiable
primitives the rest of the code is allowed to rely on, a finite-difference
gradient checker that is independent of autograd, and the determinism /
stop-gradient helpers used everywhere else.

Convention: f32 for training, f64 for gradient checks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F


class UnsupportedOpError(KeyError):
    """Requested a primitive outside the supported differentiable set."""


def _l1_diff(a, b):
    return (a - b).abs().sum()


def _sq_l2_diff(a, b):
    return ((a - b) ** 2).sum()


# Every differentiable primitive the networks and losses are built from.
# Anything not in this table must not appear inside a gradient tape.
_OPS: Mapping[str, Callable] = {
    "matmul": torch.matmul,
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "scale": lambda x, s: x * s,
    "gelu": F.gelu,
    "softmax": lambda x: F.softmax(x, dim=-1),
    "layer_norm": lambda x: F.layer_norm(x, x.shape[-1:]),
    "mean": torch.mean,
    "sum": torch.sum,
    "l1_diff": _l1_diff,
    "sq_l2_diff": _sq_l2_diff,
    "concat": torch.cat,
    "gather": lambda x, idx: x[idx],
    "reshape": torch.reshape,
    "transpose": torch.transpose,
    "conv_transpose2d": F.conv_transpose2d,
    "cross_entropy": F.cross_entropy,
}


def required_ops() -> frozenset[str]:
    """Names of the differentiable primitives the substrate guarantees."""
    return frozenset(_OPS)


def get_op(name: str) -> Callable:
    if name not in _OPS:
        raise UnsupportedOpError(f"unsupported differentiable primitive: {name!r}")
    return _OPS[name]


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Detach `x` from the tape; no gradient flows behind this boundary."""
    return x.detach()


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def use_single_thread() -> None:
    """Single-threaded torch execution: the reproducibility baseline."""
    torch.set_num_threads(1)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str = ""
    worst_index: int = -1

    def __bool__(self) -> bool:
        return self.passed


def _as_param_dict(x) -> dict[str, torch.Tensor]:
    if isinstance(x, torch.Tensor):
        return {"x": x}
    return dict(x)


def grad_check(
    f: Callable[[], torch.Tensor],
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of scalar `f()` against central differences.

    `params` is a tensor or a dict name -> tensor; every tensor must be f64
    (a coarse eps would drown f32 roundoff) with requires_grad=True, and `f`
    must read the tensors passed here.  Relative error uses an absolute
    floor of 1e-3 in the denominator so coordinates whose true gradient is
    exactly zero (e.g. through a shift-invariant softmax) are judged by the
    absolute discrepancy instead of amplified cancellation noise.
    """
    pdict = _as_param_dict(params)
    for name, p in pdict.items():
        if p.dtype is not torch.float64:
            raise ValueError(f"grad_check requires f64 tensors; {name!r} is {p.dtype}")
        if not p.requires_grad:
            raise ValueError(f"grad_check parameter {name!r} has requires_grad=False")

    out = f()
    if out.numel() != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not torch.isfinite(out):
        raise FloatingPointError("non-finite function value at the base point")
    grads = torch.autograd.grad(out, list(pdict.values()), allow_unused=True)

    max_rel = 0.0
    worst_param, worst_index = "", -1
    for (name, p), g in zip(pdict.items(), grads):
        analytic = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        aflat = analytic.reshape(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            f_plus = f().item()
            flat[k] = orig - eps
            f_minus = f().item()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite function value while perturbing {name!r}[{k}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = aflat[k].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            if rel > max_rel:
                max_rel, worst_param, worst_index = rel, name, k
    return GradCheckReport(max_rel, max_rel <= tol, worst_param, worst_index)
