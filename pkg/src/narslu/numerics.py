"""Tensor-backend contract on top of torch: masked ops, gradient checking,
Adam, and the raw-f32 checkpoint format.

The model is float32 end to end. torch supplies the differentiable dense ops
(matmul, broadcasting add/mul, concat/split, embedding lookup, layer norm,
relu, dropout with inverted scaling, gather, transpose, detach); this module
owns the pieces with contract semantics of their own: masked softmax with
exact zeros and an all-masked guard, index-masked cross entropy, a central
finite-difference gradient checker, the Adam update, and bit-exact
checkpoint serialization.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import (
    AllMaskedError,
    GradMismatchError,
    MissingGradError,
    NonFiniteTensorError,
)

Tensor = torch.Tensor
ParamStore = dict[str, Tensor]  # insertion-ordered, every tensor requires grad

DEBUG_FINITE = os.environ.get("NARSLU_DEBUG_FINITE", "") == "1"


def seed_all(seed: int) -> random.Random:
    """Seed torch (init, dropout) and return a Python RNG for shuffling."""
    torch.manual_seed(seed)
    return random.Random(seed)


def assert_finite(t: Tensor, where: str) -> None:
    """Hard NaN/Inf check; call sites guard on DEBUG_FINITE."""
    if not torch.isfinite(t).all():
        raise NonFiniteTensorError(f"non-finite values in {where}")


def masked_softmax(scores: Tensor, mask: Tensor | None = None, dim: int = -1) -> Tensor:
    """Softmax along `dim`; masked entries (mask False) are exactly zero.

    `mask` must be boolean and broadcastable to `scores`. Raises
    AllMaskedError when any row along `dim` has no unmasked entry.
    """
    if mask is None:
        return torch.softmax(scores, dim)
    if not mask.any(dim=dim).all():
        raise AllMaskedError(f"fully masked softmax row along dim {dim}")
    return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim)


def cross_entropy(
    logits: Tensor,
    targets: Tensor,
    mask: Tensor | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log likelihood of `targets` under softmax(logits) (last dim).

    `mask` (True = count) selects the positions entering the reduction;
    reduction "mean" averages over counted positions, "sum" sums them,
    "none" returns per-position values with masked entries zeroed.
    """
    log_probs = torch.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        nll = nll * mask.to(nll.dtype)
    if reduction == "none":
        return nll
    total = nll.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        count = mask.sum() if mask is not None else nll.numel()
        return total / count
    raise ValueError(f"unknown reduction {reduction!r}")


def collect_params(module: torch.nn.Module) -> ParamStore:
    """Named trainable parameters in deterministic (registration) order."""
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


# --- gradient checking ------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-3,
    tol: float = 1e-3,
) -> dict[str, float]:
    """Check autograd gradients of the scalar `f()` against central differences.

    `f` must be deterministic (dropout disabled) and re-evaluate the
    computation from the current parameter values on every call. For each
    parameter entry the criterion is

        |analytic - numeric| <= tol * max(|analytic|, |numeric|, 1.0) + 10*eps^2

    i.e. a relative tolerance with a unit floor plus the O(eps^2) truncation
    noise of the central difference. Run the computation in float64 when tight
    tolerances matter. Returns the max relative error per parameter and raises
    GradMismatchError on the first violation.
    """
    if not (1e-4 <= eps <= 1e-2):
        raise ValueError(f"eps={eps} outside [1e-4, 1e-2]")
    for p in params.values():
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise ValueError("f must return a scalar")
    out.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    trunc = 10.0 * eps * eps
    report: dict[str, float] = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            grad = analytic[name].view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(f())
                flat[i] = orig - eps
                f_minus = float(f())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(grad[i])
                scale = max(abs(a), abs(numeric), 1.0)
                rel = abs(a - numeric) / scale
                worst = max(worst, rel)
                if abs(a - numeric) > tol * scale + trunc:
                    raise GradMismatchError(name, i, a, numeric, rel)
            report[name] = worst
    return report


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators and the shared step counter."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0

    @classmethod
    def initial(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
        )


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; gradients are cleared after."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(name)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            m = state.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = state.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
            p.grad = None


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Clip all gradients to a global L2 norm; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(params.values()), max_norm))


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_BIN = "checkpoint.bin"
CHECKPOINT_JSON = "checkpoint.json"
_FORMAT = "narslu-checkpoint-v1"


def save_checkpoint(out_dir: str | Path, params: Mapping[str, Tensor], meta: dict) -> None:
    """Write a JSON manifest plus a little-endian raw f32 blob.

    The round trip is bit-exact for float32 parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    blob = bytearray()
    for name, p in params.items():
        arr = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(p.shape), "offset": len(blob)})
        blob += arr.tobytes()
    (out_dir / CHECKPOINT_BIN).write_bytes(bytes(blob))
    doc = {"format": _FORMAT, "dtype": "<f4", "tensors": manifest, **meta}
    (out_dir / CHECKPOINT_JSON).write_text(
        json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
    )


def load_checkpoint(model_dir: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint directory back into tensors plus its metadata."""
    model_dir = Path(model_dir)
    doc = json.loads((model_dir / CHECKPOINT_JSON).read_text(encoding="utf-8"))
    if doc.get("format") != _FORMAT:
        raise ValueError(f"unrecognized checkpoint format {doc.get('format')!r}")
    blob = (model_dir / CHECKPOINT_BIN).read_bytes()
    tensors: dict[str, Tensor] = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).reshape(shape)
    meta = {k: v for k, v in doc.items() if k not in ("format", "dtype", "tensors")}
    return tensors, meta
