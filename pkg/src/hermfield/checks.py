"""Finite-difference verification harness behind the gradcheck command.

Three checks: analytic encoding derivatives vs central differences of the
encoding value, the same for the composed encode->MLP field, and the flat
loss gradient vs central differences over a random parameter subset.  A
fault-injection switch perturbs the analytic side so the harness can prove
it actually detects broken derivatives.
"""

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .field import FieldModel, make_model
from .losses import LossWeights, loss_and_grad
from .problems import make_problem
from .training import sample_collocation

__all__ = ["GradcheckReport", "run_gradcheck", "THRESHOLDS"]

THRESHOLDS = {"grad": 1e-6, "hess": 1e-4, "param": 1e-5}


@dataclass
class GradcheckReport:
    enc_grad: float
    enc_hess: float
    field_grad: float
    field_hess: float
    param: float

    def passed(self) -> bool:
        return (
            self.enc_grad < THRESHOLDS["grad"]
            and self.enc_hess < THRESHOLDS["hess"]
            and self.field_grad < THRESHOLDS["grad"]
            and self.field_hess < THRESHOLDS["hess"]
            and self.param < THRESHOLDS["param"]
        )

    def lines(self) -> list[str]:
        t = THRESHOLDS
        return [
            f"encoding gradient  max rel err {self.enc_grad:.3e} (threshold {t['grad']:.0e})",
            f"encoding Hessian   max rel err {self.enc_hess:.3e} (threshold {t['hess']:.0e})",
            f"field gradient     max rel err {self.field_grad:.3e} (threshold {t['grad']:.0e})",
            f"field Hessian      max rel err {self.field_hess:.3e} (threshold {t['hess']:.0e})",
            f"parameter gradient max rel err {self.param:.3e} (threshold {t['param']:.0e})",
        ]


def _norm_rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def _off_grid_points(rng, n, dim, resolutions, margin):
    out = np.empty((0, dim))
    while out.shape[0] < n:
        cand = rng.uniform(margin, 1.0 - margin, size=(2 * n + 16, dim))
        ok = np.ones(cand.shape[0], dtype=bool)
        for res in resolutions:
            frac = cand * res - np.round(cand * res)
            ok &= np.all(np.abs(frac) / res > margin, axis=1)
        out = np.concatenate([out, cand[ok]])
    return out[:n]


def _spatial_errors(value_fn, jet_value, jet_grad, jet_hess, pts_phys, scale):
    h1, h2 = 1e-5, 1e-4
    grad_err = 0.0
    dim = pts_phys.shape[1]
    for i in range(dim):
        step = h1 * scale[i]
        xp, xm = pts_phys.copy(), pts_phys.copy()
        xp[:, i] += step
        xm[:, i] -= step
        fd = (value_fn(xp) - value_fn(xm)) / (2 * step)
        grad_err = max(grad_err, _norm_rel(jet_grad[:, i], fd))
    v0 = value_fn(pts_phys)
    hess_err = 0.0
    for i in range(dim):
        step = h2 * scale[i]
        xp, xm = pts_phys.copy(), pts_phys.copy()
        xp[:, i] += step
        xm[:, i] -= step
        fd = (value_fn(xp) - 2 * v0 + value_fn(xm)) / step**2
        hess_err = max(hess_err, _norm_rel(jet_hess[:, i], fd))
    return grad_err, hess_err


def run_gradcheck(
    config: TrainConfig,
    num_params: int = 200,
    seed: int = 0,
    n_points: int = 200,
    inject_fault: bool = False,
) -> GradcheckReport:
    problem = make_problem(config.problem.name, **config.problem.factory_kwargs())
    model = make_model(
        problem,
        config.encoding.to_encoding_config(problem.dim),
        width=config.mlp.width,
        depth=config.mlp.depth,
        omega0=config.mlp.omega0,
        omega_hidden=config.mlp.omega_hidden,
        activation=config.mlp.activation,
    )
    rng = np.random.default_rng(seed)
    params = model.init_params(seed, seed + 1)
    # nonzero derivative tables exercise every scaling branch
    params[model.layout.enc_slice] += 0.02 * rng.standard_normal(model.encoding.n_params)
    fault = 1.0 + 2e-3 if inject_fault else 1.0

    pts_norm = _off_grid_points(
        rng, n_points, model.dim, model.encoding.resolutions, margin=5e-4
    )
    pts = model.denormalize(pts_norm)

    # encoding-only jets
    enc_params, _ = model.split(params)
    enc = model.encoding

    def enc_value(x_phys):
        cache = enc.build_cache(model.normalize(x_phys), False, False)
        return enc.encode_cached(cache, enc_params, enc.levels, False, False).value

    jet, _ = enc.encode(pts_norm, enc_params)
    # encoding derivatives are per normalized coordinate: rescale to physical
    enc_grad = fault * jet.grad / model.scale[None, :, None]
    enc_hess = fault * jet.hess / model.scale[None, :, None] ** 2
    eg, eh = _spatial_errors(enc_value, jet.value, enc_grad, enc_hess, pts, model.scale)

    # composed field jets
    def field_value(x_phys):
        return model.forward_value(x_phys, params)[0]

    fjet = model.forward_jet(pts, params)
    fg, fh = _spatial_errors(
        field_value, fjet.value, fault * fjet.grad, fault * fjet.hess, pts, model.scale
    )

    # parameter gradient on a small sampled batch
    counts = {"interior": 64, "boundary": 16, "initial": 16, "data": 8}
    batch = sample_collocation(problem, counts, seed + 2, model.encoding.resolutions)
    weights = LossWeights()
    _, grad = loss_and_grad(model, problem, batch, params, weights)
    grad = fault * grad
    idx = rng.choice(model.n_params, size=min(num_params, model.n_params), replace=False)

    def total(p):
        bd, _ = loss_and_grad(model, problem, batch, p, weights)
        return bd.total

    h = 1e-6
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        pp, pm = params.copy(), params.copy()
        pp[i] += h
        pm[i] -= h
        fd[j] = (total(pp) - total(pm)) / (2 * h)
    scale = max(np.max(np.abs(grad)), 1e-300)
    perr = float(np.max(np.abs(grad[idx] - fd)) / scale)

    return GradcheckReport(
        enc_grad=eg, enc_hess=eh, field_grad=fg, field_hess=fh, param=perr
    )
