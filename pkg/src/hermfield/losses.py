"""Collocation losses and the end-to-end parameter gradient.

The four loss terms live on disjoint point sets, so their gradients are
computed separately in one sweep and combined linearly afterwards; the
balancer's per-term gradient norms fall out of the same sweep at no extra
cost.  All means are pooled over every point (and constrained channel) of a
kind.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .field import FieldModel
from .problems import ConditionSet, PdeProblem, PeriodicPairSet

__all__ = [
    "DivergenceError",
    "LossWeights",
    "LossBreakdown",
    "SampledCondition",
    "SampledPair",
    "CollocationBatch",
    "BatchCaches",
    "prepare_caches",
    "loss_and_grad",
]

KINDS = ("res", "bc", "ic", "data")


class DivergenceError(RuntimeError):
    """A loss term or its gradient became non-finite."""

    def __init__(self, term: str, value=None):
        super().__init__(f"non-finite {term} encountered (value={value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    res: float = 1.0
    bc: float = 1.0
    ic: float = 1.0
    data: float = 1.0

    def get(self, kind: str) -> float:
        return getattr(self, kind)


@dataclass
class LossBreakdown:
    res: float = 0.0
    bc: float = 0.0
    ic: float = 0.0
    data: float = 0.0
    total: float = 0.0
    g_pde: float = 0.0
    g_bc: float = 0.0
    g_ic: float = 0.0
    g_data: float = 0.0


@dataclass
class SampledCondition:
    spec: ConditionSet
    points: np.ndarray
    target: np.ndarray


@dataclass
class SampledPair:
    spec: PeriodicPairSet
    points_a: np.ndarray
    points_b: np.ndarray


@dataclass
class CollocationBatch:
    interior: np.ndarray
    conditions: list = field(default_factory=list)


@dataclass
class BatchCaches:
    interior: list
    conditions: list


def prepare_caches(
    model: FieldModel, batch: CollocationBatch, problem: PdeProblem, dtype=np.float64
) -> BatchCaches:
    """Precompute encoding geometry/weights for a fixed collocation batch."""
    interior = model.prepare_cache(
        batch.interior,
        need_grad=True,
        need_hess=problem.needs_hessian,
        dtype=dtype,
    )
    cond = []
    for sc in batch.conditions:
        if isinstance(sc, SampledPair):
            cond.append(
                (
                    model.prepare_cache(sc.points_a, False, False, dtype=dtype),
                    model.prepare_cache(sc.points_b, False, False, dtype=dtype),
                )
            )
        else:
            cond.append(model.prepare_cache(sc.points, False, False, dtype=dtype))
    return BatchCaches(interior=interior, conditions=cond)


def _check_finite(term: str, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DivergenceError(term, v if np.isscalar(v) else None)


def loss_and_grad(
    model: FieldModel,
    problem: PdeProblem,
    batch: CollocationBatch,
    params: np.ndarray,
    weights: LossWeights,
    active_levels: int | None = None,
    caches: BatchCaches | None = None,
    timers: dict | None = None,
    return_term_grads: bool = False,
):
    """Weighted total loss and its exact flat gradient.

    Returns (LossBreakdown, grad), plus the per-kind unweighted gradient
    dict when ``return_term_grads``.  Per-kind gradient norms (global L2
    over all parameters) are always filled in since each kind's gradient is
    assembled separately anyway.
    """
    if batch.interior.shape[0] == 0:
        raise ValueError("empty interior batch")
    kinds_grads = {k: None for k in KINDS}
    breakdown = LossBreakdown()

    # interior residual term
    t0 = time.perf_counter()
    fjet = model.forward_jet(
        batch.interior,
        params,
        active_levels=active_levels,
        need_grad=True,
        need_hessian=problem.needs_hessian,
        cache=caches.interior if caches else None,
    )
    res = problem.residual(batch.interior, fjet.value, fjet.grad, fjet.hess)
    n_res = res.size
    loss_res = float(np.sum(res.astype(np.float64) ** 2)) / n_res
    _check_finite("res", loss_res)
    breakdown.res = loss_res
    if timers is not None:
        timers["pde_fwd"] = timers.get("pde_fwd", 0.0) + time.perf_counter() - t0

    t0 = time.perf_counter()
    rbar = (2.0 / n_res) * res
    vbar, gbar, hbar = problem.residual_backward(
        batch.interior, fjet.value, fjet.grad, fjet.hess, rbar
    )
    kinds_grads["res"] = model.backward_jet(fjet, params, vbar, gbar, hbar)
    _check_finite("res_grad", kinds_grads["res"])
    if timers is not None:
        timers["backward"] = timers.get("backward", 0.0) + time.perf_counter() - t0

    # condition terms, pooled per kind
    sums = {k: 0.0 for k in ("bc", "ic", "data")}
    counts = {k: 0 for k in ("bc", "ic", "data")}
    pending = []  # (kind, weight, callable emitting gradient given denom)
    for idx, sc in enumerate(batch.conditions):
        spec = sc.spec
        kind = spec.kind
        t0 = time.perf_counter()
        if isinstance(sc, SampledPair):
            ca, cb = caches.conditions[idx] if caches else (None, None)
            va, cache_a = model.forward_value(sc.points_a, params, active_levels, ca)
            vb, cache_b = model.forward_value(sc.points_b, params, active_levels, cb)
            diff = (va - vb)[:, spec.channels]
            sums[kind] += spec.weight * float(np.sum(diff.astype(np.float64) ** 2))
            counts[kind] += diff.size
            pending.append((kind, spec, diff, ("pair", cache_a, cache_b, va.shape)))
        else:
            cc = caches.conditions[idx] if caches else None
            v, cache_v = model.forward_value(sc.points, params, active_levels, cc)
            diff = v[:, spec.channels] - sc.target
            sums[kind] += spec.weight * float(np.sum(diff.astype(np.float64) ** 2))
            counts[kind] += diff.size
            pending.append((kind, spec, diff, ("single", cache_v, v.shape)))
        if timers is not None:
            timers["bc_fwd"] = timers.get("bc_fwd", 0.0) + time.perf_counter() - t0

    for kind in ("bc", "ic", "data"):
        if counts[kind]:
            val = sums[kind] / counts[kind]
            _check_finite(kind, val)
            setattr(breakdown, kind, val)

    t0 = time.perf_counter()
    for kind, spec, diff, info in pending:
        scale = 2.0 * spec.weight / counts[kind]
        g = kinds_grads[kind]
        if g is None:
            g = kinds_grads[kind] = np.zeros(model.n_params)
        if info[0] == "pair":
            _, cache_a, cache_b, shape = info
            vb_bar = np.zeros(shape, dtype=params.dtype)
            vb_bar[:, spec.channels] = scale * diff
            model.backward_value(cache_a, params, vb_bar, grad_out=g)
            model.backward_value(cache_b, params, -vb_bar, grad_out=g)
        else:
            _, cache_v, shape = info
            vb_bar = np.zeros(shape, dtype=params.dtype)
            vb_bar[:, spec.channels] = scale * diff
            model.backward_value(cache_v, params, vb_bar, grad_out=g)
    for kind in ("bc", "ic", "data"):
        if kinds_grads[kind] is not None:
            _check_finite(f"{kind}_grad", kinds_grads[kind])
    if timers is not None:
        timers["backward"] = timers.get("backward", 0.0) + time.perf_counter() - t0

    breakdown.g_pde = float(np.linalg.norm(kinds_grads["res"]))
    breakdown.g_bc = (
        float(np.linalg.norm(kinds_grads["bc"])) if kinds_grads["bc"] is not None else 0.0
    )
    breakdown.g_ic = (
        float(np.linalg.norm(kinds_grads["ic"])) if kinds_grads["ic"] is not None else 0.0
    )
    breakdown.g_data = (
        float(np.linalg.norm(kinds_grads["data"]))
        if kinds_grads["data"] is not None
        else 0.0
    )

    breakdown.total = (
        weights.res * breakdown.res
        + weights.bc * breakdown.bc
        + weights.ic * breakdown.ic
        + weights.data * breakdown.data
    )
    grad = weights.res * kinds_grads["res"]
    for kind in ("bc", "ic", "data"):
        if kinds_grads[kind] is not None:
            grad += weights.get(kind) * kinds_grads[kind]
    if return_term_grads:
        return breakdown, grad, kinds_grads
    return breakdown, grad
