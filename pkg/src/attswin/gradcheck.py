"""Central-difference gradient checking against the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Parameter, Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    rel_tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    p: Parameter,
    rel_tol: float = 1e-3,
    h: float = 1e-4,
    indices: np.ndarray | None = None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff d f / d p with central differences.

    ``f`` is re-evaluated with ``p`` perturbed in place, so the graph it builds
    must read ``p.data`` afresh on every call. Run it on float64 parameters;
    a step of 1e-4 is too coarse for float32 round-off. ``indices`` restricts
    the check to a subset of flat positions of ``p``.
    """
    saved_grad = p.grad
    p.grad = None
    loss = f()
    loss.backward()
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    p.grad = saved_grad

    flat = p.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    numeric = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for j, idx in enumerate(indices):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f().data)
            flat[idx] = orig - h
            fm = float(f().data)
            flat[idx] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)[indices].astype(np.float64)
    rel = relative_error(a, numeric, abs_floor)
    return GradCheckReport(
        name=p.name or "<param>",
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(np.abs(a - numeric).max()) if rel.size else 0.0,
        checked=len(indices),
        rel_tol=rel_tol,
    )


_CONTAINERS = {"encoder", "decoder", "bottleneck", "regular", "shifted"}


def layer_type(name: str) -> str:
    """'decoder.1.0.shifted.attn.qkv.weight' -> 'attn.qkv.weight'."""
    parts = [s for s in name.split(".") if not s.isdigit() and s not in _CONTAINERS]
    return ".".join(parts)


def check_model(
    model,
    loss_fn: Callable[[], Tensor],
    fraction: float = 0.1,
    per_tensor: int = 6,
    rel_tol: float = 1e-3,
    seed: int = 0,
) -> dict[str, GradCheckReport]:
    """Finite-difference check of a sampled subset of ``model``'s parameters.

    For each layer type a ``fraction`` of its parameter tensors (at least one)
    is drawn, and ``per_tensor`` flat entries of each are perturbed. Returns
    the worst report per layer type.
    """
    rng = np.random.default_rng(seed)
    groups: dict[str, list[Parameter]] = {}
    for name, p in model.named_parameters():
        groups.setdefault(layer_type(name), []).append(p)
    reports = {}
    for kind in sorted(groups):
        params = groups[kind]
        count = max(1, int(np.ceil(fraction * len(params))))
        chosen = rng.choice(len(params), size=count, replace=False)
        worst = None
        for i in sorted(chosen):
            p = params[i]
            idx = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
            rep = finite_diff_check(loss_fn, p, rel_tol=rel_tol, indices=idx)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        reports[kind] = GradCheckReport(kind, worst.max_rel_error, worst.max_abs_error,
                                        worst.checked, rel_tol)
    return reports
