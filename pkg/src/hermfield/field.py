"""The composed model: hash-grid encoding -> jet MLP -> physical-space jets.

All learnables live in one flat float64 vector: encoding tables first
(level-major, then derivative order), then MLP layers.  The model maps its
problem's physical box onto the unit cube; spatial derivatives are
chain-ruled through that affine map, so callers only ever see
physical-coordinate jets.
"""

from dataclasses import dataclass

import numpy as np

from .encoding import EncodingConfig, EncodingJet, HashEncoding
from .mlp import Jet2, JetMlp, MlpConfig

__all__ = ["ParamLayout", "FieldJet", "FieldModel", "make_model"]


class ParamLayout:
    """Index map from (module, location) names to flat-vector slices."""

    def __init__(self, encoding: HashEncoding, mlp: JetMlp):
        self.entries: list[tuple[str, slice]] = []
        for l in range(encoding.levels):
            for k in range(encoding.n_orders):
                off, size = encoding.table_offset(l, k)
                self.entries.append((f"enc/level{l}/order{k}", slice(off, off + size)))
        base = encoding.n_params
        for i, (off, shape) in enumerate(mlp._offsets):
            wsize = shape[0] * shape[1]
            tag = "head" if i == len(mlp._offsets) - 1 else f"layer{i}"
            self.entries.append((f"mlp/{tag}/W", slice(base + off, base + off + wsize)))
            self.entries.append(
                (f"mlp/{tag}/b", slice(base + off + wsize, base + off + wsize + shape[0]))
            )
        self.n_params = encoding.n_params + mlp.n_params
        self.enc_slice = slice(0, encoding.n_params)
        self.mlp_slice = slice(encoding.n_params, self.n_params)
        # contiguous per-level segments (plus the MLP) for curriculum masking
        self.level_slices = []
        for l in range(encoding.levels):
            start = encoding.table_offset(l, 0)[0]
            last_off, last_size = encoding.table_offset(l, encoding.n_orders - 1)
            self.level_slices.append(slice(start, last_off + last_size))

    def offset(self, name: str) -> slice:
        for n, s in self.entries:
            if n == name:
                return s
        raise KeyError(name)


@dataclass
class FieldJet:
    """Physical-coordinate jets plus everything backward() needs."""

    value: np.ndarray
    grad: np.ndarray | None
    hess: np.ndarray | None
    mixed: bool
    active_levels: int
    enc_cache: list
    mlp_jet: Jet2


class FieldModel:
    def __init__(self, encoding: HashEncoding, mlp: JetMlp, box_lo, box_hi):
        if mlp.config.in_dim != encoding.out_dim:
            raise ValueError(
                f"MLP input {mlp.config.in_dim} != encoding output {encoding.out_dim}"
            )
        self.encoding = encoding
        self.mlp = mlp
        self.dim = encoding.dim
        self.out_dim = mlp.config.out_dim
        self.box_lo = np.asarray(box_lo, dtype=np.float64)
        self.box_hi = np.asarray(box_hi, dtype=np.float64)
        if self.box_lo.shape != (self.dim,) or np.any(self.box_hi <= self.box_lo):
            raise ValueError("invalid physical box")
        self.scale = self.box_hi - self.box_lo
        self.layout = ParamLayout(encoding, mlp)
        self.n_params = self.layout.n_params

    # -- parameters ---------------------------------------------------------

    def init_params(self, coeff_seed: int, mlp_seed: int) -> np.ndarray:
        params = np.empty(self.n_params)
        params[self.layout.enc_slice] = self.encoding.init_coefficients(coeff_seed)
        params[self.layout.mlp_slice] = self.mlp.init_params(mlp_seed)
        return params

    def split(self, params: np.ndarray):
        return params[self.layout.enc_slice], params[self.layout.mlp_slice]

    # -- geometry -----------------------------------------------------------

    def normalize(self, points_phys: np.ndarray) -> np.ndarray:
        return (np.asarray(points_phys, dtype=np.float64) - self.box_lo) / self.scale

    def denormalize(self, points_norm: np.ndarray) -> np.ndarray:
        return self.box_lo + points_norm * self.scale

    # -- caches ---------------------------------------------------------------

    def prepare_cache(
        self,
        points_phys: np.ndarray,
        need_grad: bool = True,
        need_hess: bool = True,
        need_mixed: bool = False,
        dtype=np.float64,
    ) -> list:
        """Geometry-only encoding cache, reusable across parameter updates."""
        return self.encoding.build_cache(
            self.normalize(points_phys), need_grad, need_hess, need_mixed, dtype=dtype
        )

    # -- forward --------------------------------------------------------------

    def forward_jet(
        self,
        points_phys: np.ndarray,
        params: np.ndarray,
        active_levels: int | None = None,
        need_grad: bool = True,
        need_hessian: bool = True,
        need_mixed: bool = False,
        cache: list | None = None,
    ) -> FieldJet:
        if active_levels is None:
            active_levels = self.encoding.levels
        enc_params, mlp_params = self.split(params)
        # the Hessian recursion consumes gradient channels internally
        enc_grad = need_grad or need_hessian
        if cache is None:
            cache = self.prepare_cache(points_phys, enc_grad, need_hessian, need_mixed)
        enc = self.encoding.encode_cached(
            cache, enc_params, active_levels, enc_grad, need_hessian, need_mixed
        )
        jet = self.mlp.forward_jet(enc, mlp_params, need_hessian, need_mixed)
        grad = hess = None
        if need_grad or need_hessian:
            grad = jet.grad / self.scale[None, :, None]
        if need_hessian:
            if need_mixed:
                hess = jet.hess / (self.scale[None, :, None, None] * self.scale[None, None, :, None])
            else:
                hess = jet.hess / (self.scale[None, :, None] ** 2)
        return FieldJet(
            value=jet.value,
            grad=grad if need_grad else None,
            hess=hess,
            mixed=need_mixed,
            active_levels=active_levels,
            enc_cache=cache,
            mlp_jet=jet,
        )

    def forward_value(
        self,
        points_phys: np.ndarray,
        params: np.ndarray,
        active_levels: int | None = None,
        cache: list | None = None,
    ):
        """Value-only fast path; returns (values (B, m), cache-for-backward)."""
        if active_levels is None:
            active_levels = self.encoding.levels
        enc_params, mlp_params = self.split(params)
        if cache is None:
            cache = self.prepare_cache(points_phys, False, False, False)
        enc = self.encoding.encode_cached(
            cache, enc_params, active_levels, False, False, False
        )
        value, vcache = self.mlp.forward_value(enc.value, mlp_params)
        return value, (cache, vcache, active_levels)

    # -- backward ---------------------------------------------------------------

    def backward_jet(
        self,
        fjet: FieldJet,
        params: np.ndarray,
        value_bar: np.ndarray | None,
        grad_bar: np.ndarray | None = None,
        hess_bar: np.ndarray | None = None,
        grad_out: np.ndarray | None = None,
    ) -> np.ndarray:
        """Flat parameter gradient from physical-coordinate jet cotangents."""
        if grad_out is None:
            grad_out = np.zeros(self.n_params)
        _, mlp_params = self.split(params)
        dt = params.dtype
        if value_bar is not None:
            value_bar = np.asarray(value_bar, dtype=dt)
        gb = hb = None
        if grad_bar is not None:
            gb = np.asarray(grad_bar, dtype=dt) / self.scale[None, :, None].astype(dt)
        if hess_bar is not None:
            if fjet.mixed:
                hb = np.asarray(hess_bar, dtype=dt) / (
                    self.scale[None, :, None, None] * self.scale[None, None, :, None]
                ).astype(dt)
            else:
                hb = np.asarray(hess_bar, dtype=dt) / (
                    self.scale[None, :, None] ** 2
                ).astype(dt)
        _, enc_cot = self.mlp.backward_jet(
            fjet.mlp_jet, (value_bar, gb, hb), mlp_params,
            grad_out=grad_out[self.layout.mlp_slice],
        )
        self.encoding.backward_cached(
            fjet.enc_cache, enc_cot, fjet.active_levels,
            grad_out=grad_out[self.layout.enc_slice],
        )
        return grad_out

    def backward_value(
        self,
        vcache,
        params: np.ndarray,
        value_bar: np.ndarray,
        grad_out: np.ndarray | None = None,
    ) -> np.ndarray:
        if grad_out is None:
            grad_out = np.zeros(self.n_params)
        enc_cache, mcache, active_levels = vcache
        _, mlp_params = self.split(params)
        _, enc_vbar = self.mlp.backward_value(
            mcache, value_bar, mlp_params, grad_out=grad_out[self.layout.mlp_slice]
        )
        cot = EncodingJet(value=enc_vbar, grad=None, hess=None)
        self.encoding.backward_cached(
            enc_cache, cot, active_levels, grad_out=grad_out[self.layout.enc_slice]
        )
        return grad_out


def make_model(
    problem,
    enc_config: EncodingConfig,
    width: int = 128,
    depth: int = 2,
    omega0: float = 30.0,
    omega_hidden: float = 1.0,
    activation: str = "sine",
) -> FieldModel:
    """Assemble the model for a PDE problem's domain and output size."""
    if enc_config.dim != problem.dim:
        raise ValueError("encoding dim must match problem dim")
    encoding = HashEncoding(enc_config)
    mlp = JetMlp(
        MlpConfig(
            in_dim=encoding.out_dim,
            width=width,
            depth=depth,
            out_dim=problem.out_dim,
            omega0=omega0,
            omega_hidden=omega_hidden,
            activation=activation,
        )
    )
    return FieldModel(encoding, mlp, problem.box_lo, problem.box_hi)
