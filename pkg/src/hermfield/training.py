"""Training engine: collocation sampling, Adam with cosine warm restarts,
gradient-norm loss balancing, parameter EMA and multi-resolution curricula.

One epoch is one full-batch gradient step over the fixed collocation sets.
Levels outside the active count contribute zero encoding, receive zero
gradient and keep their Adam moments frozen (each level is its own Adam
segment with its own step counter).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .field import FieldModel, make_model
from .losses import (
    CollocationBatch,
    DivergenceError,
    LossWeights,
    SampledCondition,
    SampledPair,
    loss_and_grad,
    prepare_caches,
)
from .problems import PdeProblem, PeriodicPairSet, eval_grid_points, make_problem

__all__ = [
    "lr_schedule",
    "curriculum_levels",
    "update_balancer",
    "Adam",
    "TrainState",
    "TrainResult",
    "TrainingDiverged",
    "sample_collocation",
    "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, epoch: int, result):
        super().__init__(f"training diverged at epoch {epoch} (term {term})")
        self.term = term
        self.epoch = epoch
        self.result = result


def lr_schedule(
    epoch: int, lr0: float, t0: int = 10000, mult: float = 2.0, lr_min: float = 0.0
) -> float:
    """Cosine annealing with warm restarts; periods t0, t0*mult, t0*mult^2..."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    start, period = 0, t0
    while epoch >= start + period:
        start += period
        period = int(round(period * mult))
    t = (epoch - start) / period
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t))


def _vcycle_pattern(levels: int, l0: int) -> list[int]:
    down = list(range(levels, l0 - 1, -1))
    up = list(range(l0 + 1, levels + 1))
    return down + up


def _wcycle_pattern(levels: int, l0: int) -> list[int]:
    mid = (levels + l0) // 2
    pat = list(range(levels, l0 - 1, -1))
    pat += list(range(l0 + 1, mid + 1))
    pat += list(range(mid - 1, l0 - 1, -1))
    pat += list(range(l0 + 1, levels + 1))
    return pat


def curriculum_levels(
    epoch: int, ctype: str, levels: int, l0: int = 1, tau: int = 1
) -> int:
    """Active level count at an epoch under the chosen schedule."""
    if ctype == "none":
        return levels
    if tau < 1:
        raise ValueError("tau must be positive")
    step = epoch // tau
    if ctype == "coarse-to-fine":
        return min(levels, l0 + step)
    if ctype == "fine-to-coarse":
        return max(l0, levels - step)
    if ctype == "v-cycle":
        pat = _vcycle_pattern(levels, l0)
        return pat[step % len(pat)]
    if ctype == "w-cycle":
        pat = _wcycle_pattern(levels, l0)
        return pat[step % len(pat)]
    raise ValueError(f"unknown curriculum type {ctype!r}")


def update_balancer(
    lam: float, g_pde: float, g_other: float, lam_max: float
) -> float:
    """EMA update of a loss weight toward the gradient-norm ratio.

    No-op when the other term's gradient norm is below 1e-8; the result is
    clamped to [1, lam_max].
    """
    if g_other <= 1e-8:
        return lam
    lam = 0.9 * lam + 0.1 * (g_pde / g_other)
    return float(min(max(lam, 1.0), lam_max))


class Adam:
    """Adam on a flat vector with independently stepped segments."""

    def __init__(self, n: int, segments: list[slice], beta1=0.9, beta2=0.999,
                 eps=1e-8, dtype=np.float64):
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.segments = segments
        self.t = np.zeros(len(segments), dtype=np.int64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float,
             active: list[bool]):
        b1, b2 = self.beta1, self.beta2
        for i, seg in enumerate(self.segments):
            if not active[i]:
                continue
            self.t[i] += 1
            t = self.t[i]
            g = grad[seg]
            m = self.m[seg]
            v = self.v[seg]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            params[seg] -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainState:
    params: np.ndarray
    ema: np.ndarray
    adam: Adam
    lambda_bc: float = 1.0
    lambda_ic: float = 1.0
    epoch: int = 0
    active_levels: int = 0


@dataclass
class TrainResult:
    state: TrainState
    history: list
    model: FieldModel
    problem: PdeProblem
    best_ema: np.ndarray | None = None
    best_rel_l2: float = np.inf
    timing: list = field(default_factory=list)
    diverged: bool = False
    diverged_term: str = ""


def _jittered_interior(problem, n, rng, resolutions, margin_scale=1e-6):
    """Uniform interior points at distance >= margin from every level's
    grid lines (in normalized coordinates)."""
    dim = problem.dim
    margin = margin_scale / max(resolutions)
    out = np.empty((0, dim))
    while out.shape[0] < n:
        cand = rng.uniform(size=(int(1.05 * (n - out.shape[0])) + 16, dim))
        ok = np.ones(cand.shape[0], dtype=bool)
        for res in resolutions:
            frac = cand * res - np.round(cand * res)
            ok &= np.all(np.abs(frac) / res >= margin, axis=1)
        out = np.concatenate([out, cand[ok]])
    u = out[:n]
    return problem.box_lo + u * (problem.box_hi - problem.box_lo)


def sample_collocation(
    problem: PdeProblem,
    counts: dict,
    seed,
    resolutions: list[int] | None = None,
) -> CollocationBatch:
    """Sample interior/boundary/initial/data sets for one problem.

    ``counts`` keys: interior, boundary (per edge/face set), initial, data.
    Interior points are jittered off every level's grid lines when
    ``resolutions`` is given.  Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    n_int = int(counts.get("interior", 0))
    if n_int < 1:
        raise ValueError("interior count must be positive")
    if resolutions:
        interior = _jittered_interior(problem, n_int, rng, resolutions)
    else:
        u = rng.uniform(size=(n_int, problem.dim))
        interior = problem.box_lo + u * (problem.box_hi - problem.box_lo)
    kind_key = {"bc": "boundary", "ic": "initial", "data": "data"}
    conds = []
    mergeable = {}  # same-(kind, channels, weight) sets share one evaluation
    for cs in problem.condition_sets:
        n = int(counts.get(kind_key[cs.kind], 0))
        if n < 1:
            continue
        if isinstance(cs, PeriodicPairSet):
            a, b = cs.sample(n, rng)
            conds.append(SampledPair(cs, a, b))
        else:
            pts = cs.sample(n, rng)
            key = (cs.kind, cs.channels, cs.weight)
            sampled = mergeable.get(key)
            if sampled is None:
                sampled = SampledCondition(cs, pts, cs.target(pts))
                mergeable[key] = sampled
                conds.append(sampled)
            else:
                sampled.points = np.concatenate([sampled.points, pts])
                sampled.target = np.concatenate([sampled.target, cs.target(pts)])
    return CollocationBatch(interior=interior, conditions=conds)


def _scoped_norm(g: np.ndarray, model: FieldModel, scope: str) -> float:
    if scope == "mlp":
        return float(np.linalg.norm(g[model.layout.mlp_slice]))
    return float(np.linalg.norm(g))


def train(
    config: TrainConfig,
    on_eval=None,
    collect_timing: bool = False,
) -> TrainResult:
    """Run the full optimization loop for a config; returns the final state,
    metric history and best-EMA snapshot.  Raises TrainingDiverged (with the
    partial result attached) when a loss term becomes non-finite."""
    config.validate()
    problem = make_problem(config.problem.name, **config.problem.factory_kwargs())
    enc_cfg = config.encoding.to_encoding_config(problem.dim)
    model = make_model(
        problem,
        enc_cfg,
        width=config.mlp.width,
        depth=config.mlp.depth,
        omega0=config.mlp.omega0,
        omega_hidden=config.mlp.omega_hidden,
        activation=config.mlp.activation,
    )
    run = config.run
    opt = config.optimizer
    dtype = run.dtype

    seeds = np.random.SeedSequence(run.seed).spawn(3)
    params = model.init_params(seeds[0], seeds[1]).astype(dtype)
    counts = {
        "interior": config.collocation.interior,
        "boundary": config.collocation.boundary,
        "initial": config.collocation.initial,
        "data": config.collocation.data,
    }
    batch = sample_collocation(problem, counts, seeds[2], model.encoding.resolutions)
    caches = None
    if config.collocation.resample == "fixed":
        caches = prepare_caches(model, batch, problem, dtype=dtype)

    # Adam moments stay float64 even in the f32 compute mode
    adam = Adam(
        model.n_params,
        model.layout.level_slices + [model.layout.mlp_slice],
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
    )
    state = TrainState(params=params, ema=params.copy(), adam=adam)
    result = TrainResult(state=state, history=[], model=model, problem=problem)

    levels = model.encoding.levels
    tau = config.curriculum.tau or max(1, run.epochs // levels)

    # fixed, cached evaluation grid (value-only forward on EMA weights)
    eval_pts = eval_grid_points(problem, run.eval_shape or problem.eval_shape)
    eval_exact = problem.exact_value(eval_pts)
    eval_den = float(np.linalg.norm(eval_exact))
    eval_cache = model.prepare_cache(eval_pts, False, False, dtype=dtype)

    def eval_rel_l2(ema_params, active):
        v, _ = model.forward_value(eval_pts, ema_params, active, cache=eval_cache)
        return float(np.linalg.norm(v.astype(np.float64) - eval_exact) / eval_den)

    decay = opt.ema_decay
    resample_rng = np.random.default_rng(seeds[2].spawn(1)[0])
    t_start = time.perf_counter()
    for epoch in range(run.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, opt.lr0, opt.restart_t0, opt.restart_mult, opt.lr_min)
        active = curriculum_levels(
            epoch, config.curriculum.type, levels, config.curriculum.l0, tau
        )
        state.active_levels = active
        if config.collocation.resample == "per_epoch" and epoch > 0:
            batch = sample_collocation(
                problem, counts, resample_rng, model.encoding.resolutions
            )
            caches = None

        timers = {} if collect_timing else None
        weights = LossWeights(
            res=1.0, bc=state.lambda_bc, ic=state.lambda_ic, data=1.0
        )
        try:
            breakdown, grad, term_grads = loss_and_grad(
                model, problem, batch, state.params, weights,
                active_levels=active, caches=caches, timers=timers,
                return_term_grads=True,
            )
        except DivergenceError as e:
            result.diverged = True
            result.diverged_term = e.term
            raise TrainingDiverged(e.term, epoch, result) from e

        if opt.balance_stride > 0 and epoch % opt.balance_stride == 0:
            g_pde = _scoped_norm(term_grads["res"], model, opt.grad_norm_scope)
            if term_grads["bc"] is not None:
                g_bc = _scoped_norm(term_grads["bc"], model, opt.grad_norm_scope)
                new_bc = update_balancer(state.lambda_bc, g_pde, g_bc, opt.lambda_max)
                if new_bc != state.lambda_bc:
                    grad = grad + (new_bc - state.lambda_bc) * term_grads["bc"]
                    state.lambda_bc = new_bc
            if term_grads["ic"] is not None:
                g_ic = _scoped_norm(term_grads["ic"], model, opt.grad_norm_scope)
                new_ic = update_balancer(state.lambda_ic, g_pde, g_ic, opt.lambda_max)
                if new_ic != state.lambda_ic:
                    grad = grad + (new_ic - state.lambda_ic) * term_grads["ic"]
                    state.lambda_ic = new_ic

        t0 = time.perf_counter()
        seg_active = [l < active for l in range(levels)] + [True]
        adam.step(state.params, grad, lr, seg_active)
        if decay == 0.0:
            state.ema[:] = state.params
        elif decay < 1.0:
            state.ema *= decay
            state.ema += (1.0 - decay) * state.params
        if timers is not None:
            timers["optimizer"] = time.perf_counter() - t0
            result.timing.append(timers)

        if (epoch + 1) % run.eval_stride == 0 or epoch == run.epochs - 1:
            rel = eval_rel_l2(state.ema, active)
            wall_ms = 0.0 if run.deterministic else (
                (time.perf_counter() - t_start) * 1000.0
            )
            row = {
                "epoch": epoch,
                "loss_pde": breakdown.res,
                "loss_bc": breakdown.bc,
                "loss_ic": breakdown.ic,
                "lambda_bc": state.lambda_bc,
                "lr": float(lr),
                "active_levels": active,
                "rel_l2": rel,
                "wall_ms": wall_ms,
            }
            result.history.append(row)
            if rel < result.best_rel_l2:
                result.best_rel_l2 = rel
                result.best_ema = state.ema.copy()
            if on_eval is not None:
                on_eval(row)
    return result
