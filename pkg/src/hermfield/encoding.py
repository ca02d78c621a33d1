"""Multi-resolution hashed grids of Hermite coefficients.

Each resolution level stores one table per derivative order k (0..dim): the
order-k table holds C(dim, k) * features values per entry, one slot per
multi-index of that order.  Coarse levels whose full vertex grid fits the
table are indexed densely (collision free); finer levels fall back to the
XOR-prime spatial hash.  The encoding value, gradient and Hessian are
evaluated analytically from the tensor-product basis, with spacing scale
``delta**(|alpha| - k)`` applied to the k-th derivative channel.

A ``linear`` interpolation mode (order-0 tables, d-linear weights, zero
in-cell Hessian) is provided as the representation-ablation baseline.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import alpha_multi_indices, corner_offsets, order_slices, tensor_weights

__all__ = [
    "PRIMES",
    "EncodingConfig",
    "LevelGeometry",
    "EncodingJet",
    "EvalTrace",
    "HashEncoding",
    "OutOfDomainError",
    "dense_index",
    "xor_hash_index",
    "hash_index",
    "level_resolutions",
]

PRIMES = (1, 2654435761, 805459861)


class OutOfDomainError(ValueError):
    """A query point lies outside the unit cube beyond tolerance."""


@dataclass(frozen=True)
class LevelGeometry:
    """Resolution of one grid level over the unit cube."""

    level: int
    resolution: int  # number of cells per axis

    @property
    def spacing(self) -> float:
        return 1.0 / self.resolution


def level_resolutions(
    levels: int,
    n_min: int,
    n_max: int | None = None,
    ratio: float | None = None,
) -> list[int]:
    """Per-level grid resolutions.

    Either a per-level ``ratio`` r is given (N_l = round(n_min * r^l)) or the
    pair (n_min, n_max) defines a geometric growth b with N_l = floor(n_min *
    b^l) reaching n_max at the last level.
    """
    if (ratio is None) == (n_max is None):
        raise ValueError("specify exactly one of ratio or n_max")
    if ratio is not None:
        if ratio <= 1.0:
            raise ValueError("ratio must be > 1")
        res = [int(round(n_min * ratio**l)) for l in range(levels)]
    else:
        if levels == 1:
            res = [n_min]
        else:
            # tiny epsilon so b**(levels-1) hits n_max despite rounding
            b = math.exp((math.log(n_max) - math.log(n_min)) / (levels - 1))
            res = [int(math.floor(n_min * b**l + 1e-9)) for l in range(levels)]
    if any(r < 1 for r in res) or any(b > a for a, b in zip(res[1:], res)):
        raise ValueError(f"resolutions must be >= 1 and nondecreasing, got {res}")
    return res


@dataclass(frozen=True)
class EncodingConfig:
    dim: int
    levels: int
    table_sizes: tuple[int, ...]  # entries per table, one per derivative order
    features: int = 2
    n_min: int = 4
    n_max: int | None = None
    ratio: float | None = 1.5
    interpolation: str = "hermite"

    def __post_init__(self):
        if not 1 <= self.dim <= 3:
            raise ValueError("dim must be 1, 2 or 3")
        if self.levels < 1 or self.features < 1:
            raise ValueError("levels and features must be positive")
        if self.interpolation not in ("hermite", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        n_orders = self.dim + 1 if self.interpolation == "hermite" else 1
        if len(self.table_sizes) < n_orders:
            raise ValueError(f"need {n_orders} table sizes, got {len(self.table_sizes)}")
        for t in self.table_sizes:
            if t < 1 or (t & (t - 1)) != 0:
                raise ValueError(f"table size {t} is not a power of two")


def dense_index(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Row-major vertex index over the (resolution+1)^dim grid."""
    n = resolution + 1
    dim = coords.shape[-1]
    idx = coords[..., 0].astype(np.int64)
    for i in range(1, dim):
        idx = idx * n + coords[..., i]
    return idx


def xor_hash_index(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-prime spatial hash of integer vertex coordinates mod table_size."""
    dim = coords.shape[-1]
    h = np.zeros(coords.shape[:-1], dtype=np.uint32)
    c = coords.astype(np.uint32)
    for i in range(dim):
        h ^= c[..., i] * np.uint32(PRIMES[i])
    return (h % np.uint32(table_size)).astype(np.int64)


def hash_index(coords: np.ndarray, resolution: int, table_size: int) -> np.ndarray:
    """Table row for vertex coordinates: dense when the grid fits, else hashed."""
    coords = np.asarray(coords)
    dim = coords.shape[-1]
    if (resolution + 1) ** dim <= table_size:
        return dense_index(coords, resolution)
    return xor_hash_index(coords, table_size)


@dataclass
class EncodingJet:
    """Concatenated multi-level encoding with analytic spatial derivatives.

    ``value`` has shape (B, levels*features); ``grad`` (B, dim, LF);
    ``hess`` is diagonal-only (B, dim, LF) unless ``mixed`` in which case it
    is the full symmetric block (B, dim, dim, LF).  Channels of inactive
    levels are exactly zero.
    """

    value: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    mixed: bool = False
    # stream-major (channels, B, LF) buffer value/grad/hess view into, when
    # available; keeps per-channel slices contiguous for the hot kernels
    stacked: np.ndarray | None = None


@dataclass
class _LevelTrace:
    base: np.ndarray  # (B, dim) int64 cell coordinates
    local: np.ndarray  # (B, dim) local coordinates in [0, 1]
    rows: list  # per order: (B, 2^dim) table rows


@dataclass
class EvalTrace:
    """Everything needed to replay/transpose an encode() call."""

    active_levels: int
    need_grad: bool
    need_hess: bool
    need_mixed: bool
    levels: list = field(default_factory=list)  # _LevelTrace per active level


class BatchCache:
    """Precomputed geometry for one point batch, stacked over levels.

    ``wc_all`` holds the scaled basis weights of every level as one
    (levels*B, channels, K) tensor, rows level-major, so the whole encoding
    forward is a single batched matmul and coarse-to-fine masking is a row
    prefix.  Channel layout: [value, grad_0..grad_{d-1}, hess...].  K
    concatenates the per-order (corner, slot) pairs.  ``gather_base[k]``
    holds flat parameter offsets of each touched row's first entry;
    ``bin_rows[k]`` the level-shifted table rows for the stacked bincount
    scatter in the backward pass.
    """

    __slots__ = (
        "n_points",
        "n_channels",
        "levels_meta",
        "wc_all",
        "gather_idx",
        "bin_rows",
        "k_slices",
    )

    def __init__(self, n_points, n_channels, levels_meta, wc_all, gather_idx,
                 bin_rows, k_slices):
        self.n_points = n_points
        self.n_channels = n_channels
        self.levels_meta = levels_meta  # per level: (base, local, rows list)
        self.wc_all = wc_all
        self.gather_idx = gather_idx
        self.bin_rows = bin_rows
        self.k_slices = k_slices


class HashEncoding:
    """Geometry, table layout and evaluation kernels (parameters live outside)."""

    def __init__(self, config: EncodingConfig):
        self.config = config
        self.dim = config.dim
        self.levels = config.levels
        self.features = config.features
        self.resolutions = level_resolutions(
            config.levels, config.n_min, config.n_max, config.ratio
        )
        self.corners = corner_offsets(self.dim)
        if config.interpolation == "hermite":
            self.alphas = alpha_multi_indices(self.dim)
            self.alpha_orders = np.array([sum(a) for a in self.alphas])
            self.order_slices = order_slices(self.dim)
            self.n_orders = self.dim + 1
        else:
            self.alphas = [tuple([0] * self.dim)]
            self.alpha_orders = np.array([0])
            self.order_slices = [slice(0, 1)]
            self.n_orders = 1
        self.table_sizes = tuple(config.table_sizes[: self.n_orders])
        self.slots = [
            self.order_slices[k].stop - self.order_slices[k].start
            for k in range(self.n_orders)
        ]
        # flat layout: level-major, then order
        self._offsets = {}
        off = 0
        for l in range(self.levels):
            for k in range(self.n_orders):
                size = self.table_sizes[k] * self.slots[k] * self.features
                self._offsets[(l, k)] = (off, size)
                off += size
        self.n_params = off
        self.out_dim = self.levels * self.features
        self.encode_calls = 0  # instrumentation for the single-pass contract

    # -- layout ------------------------------------------------------------

    def table_offset(self, level: int, order: int) -> tuple[int, int]:
        return self._offsets[(level, order)]

    def table_view(self, enc_params: np.ndarray, level: int, order: int) -> np.ndarray:
        off, size = self._offsets[(level, order)]
        t = self.table_sizes[order]
        return enc_params[off : off + size].reshape(t, self.slots[order], self.features)

    def level_geometry(self, level: int) -> LevelGeometry:
        return LevelGeometry(level=level, resolution=self.resolutions[level])

    def is_dense(self, level: int, order: int) -> bool:
        return (self.resolutions[level] + 1) ** self.dim <= self.table_sizes[order]

    # -- initialization ----------------------------------------------------

    def init_coefficients(self, seed: int) -> np.ndarray:
        """Order-0 tables ~ N(0, 0.01^2); all derivative tables zero."""
        for t in self.table_sizes:
            if (t & (t - 1)) != 0:
                raise ValueError(f"table size {t} is not a power of two")
        rng = np.random.default_rng(seed)
        params = np.zeros(self.n_params)
        for l in range(self.levels):
            off, size = self._offsets[(l, 0)]
            params[off : off + size] = rng.normal(0.0, 0.01, size=size)
        return params

    # -- indexing ----------------------------------------------------------

    def vertex_rows(self, coords: np.ndarray, level: int, order: int) -> np.ndarray:
        return hash_index(coords, self.resolutions[level], self.table_sizes[order])

    def locate(self, points: np.ndarray, level: int, eps: float = 1e-12):
        """Containing cell and local coordinates; upper boundary clamps in."""
        n = self.resolutions[level]
        pos = points * n
        base = np.floor(pos).astype(np.int64)
        np.clip(base, 0, n - 1, out=base)
        local = pos - base
        return base, local

    def _check_domain(self, points: np.ndarray, eps: float = 1e-12):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise ValueError(f"points must have shape (B, {self.dim})")
        if np.any(points < -eps) or np.any(points > 1.0 + eps):
            bad = points[np.any((points < -eps) | (points > 1.0 + eps), axis=1)][0]
            raise OutOfDomainError(f"point {bad} outside [0,1]^{self.dim}")
        return np.clip(points, 0.0, 1.0)

    # -- weights -----------------------------------------------------------

    def _n_channels(self, need_grad, need_hess, need_mixed):
        n = 1
        if need_grad or need_hess:
            n += self.dim
        if need_hess:
            n += self.dim * self.dim if need_mixed else self.dim
        return n

    def _level_weights(self, local, level, need_grad, need_hess, need_mixed):
        """Combined per-order weight tensors (B, channels, C*slots)."""
        delta = 1.0 / self.resolutions[level]
        if self.config.interpolation == "linear":
            return self._linear_weights(local, delta, need_grad, need_hess, need_mixed)
        w0, w1, w2 = tensor_weights(
            local, need_grad=need_grad or need_hess, need_hess=need_hess,
            need_mixed=need_mixed,
        )
        # delta^(|alpha| - k) for the k-th derivative channel
        s = delta ** self.alpha_orders.astype(np.float64)
        w0 = w0 * s[None, None, :]
        if w1 is not None:
            w1 = w1 * (s / delta)[None, None, :, None]
        if w2 is not None:
            sh = (s / delta**2)[None, None, :, None, None] if need_mixed else (
                s / delta**2
            )[None, None, :, None]
            w2 = w2 * sh
        b = local.shape[0]
        ncor = self.corners.shape[0]
        nch = self._n_channels(need_grad, need_hess, need_mixed)
        out = []
        for k in range(self.n_orders):
            sl = self.order_slices[k]
            ns = sl.stop - sl.start
            wc = np.empty((b, nch, ncor * ns))
            wc[:, 0] = w0[:, :, sl].reshape(b, -1)
            ch = 1
            if w1 is not None:
                for i in range(self.dim):
                    wc[:, ch] = w1[:, :, sl, i].reshape(b, -1)
                    ch += 1
            if w2 is not None:
                if need_mixed:
                    for i in range(self.dim):
                        for j in range(self.dim):
                            wc[:, ch] = w2[:, :, sl, i, j].reshape(b, -1)
                            ch += 1
                else:
                    for i in range(self.dim):
                        wc[:, ch] = w2[:, :, sl, i].reshape(b, -1)
                        ch += 1
            out.append(wc)
        return out

    def _linear_weights(self, local, delta, need_grad, need_hess, need_mixed):
        b, dim = local.shape
        ncor = self.corners.shape[0]
        nch = self._n_channels(need_grad, need_hess, need_mixed)
        wc = np.zeros((b, nch, ncor))
        w0 = np.ones((b, ncor))
        for i in range(dim):
            ti = local[:, i][:, None]
            w0 *= np.where(self.corners[None, :, i] == 1, ti, 1.0 - ti)
        wc[:, 0] = w0
        if need_grad or need_hess:
            for j in range(dim):
                prod = np.where(self.corners[None, :, j] == 1, 1.0, -1.0) / delta
                prod = np.broadcast_to(prod, (b, ncor)).copy()
                for i in range(dim):
                    if i != j:
                        ti = local[:, i][:, None]
                        prod *= np.where(self.corners[None, :, i] == 1, ti, 1.0 - ti)
                wc[:, 1 + j] = prod
        # Hessian channels stay zero: d-linear interpolation has no in-cell
        # second-order structure
        return [wc]

    # -- forward -----------------------------------------------------------

    def _assemble_cache(self, per_level, need_grad, need_hess, need_mixed, dtype):
        """Stack per-level (base, local, rows) into one BatchCache."""
        nch = self._n_channels(need_grad, need_hess, need_mixed)
        b = per_level[0][1].shape[0]
        ncor = self.corners.shape[0]
        wc_levels = []
        for l, (base, local, rows) in enumerate(per_level):
            wc = self._level_weights(local, l, need_grad, need_hess, need_mixed)
            wc_levels.append(np.concatenate(wc, axis=2))
        wc_all = np.concatenate(wc_levels, axis=0)
        if dtype is not np.float64:
            wc_all = wc_all.astype(dtype)
        k_slices = []
        start = 0
        for k in range(self.n_orders):
            kk = ncor * self.slots[k]
            k_slices.append(slice(start, start + kk))
            start += kk
        gather_idx = []
        bin_rows = []
        for k in range(self.n_orders):
            sw = self.slots[k] * self.features
            t = self.table_sizes[k]
            bases = np.empty(len(per_level) * b * ncor, dtype=np.int64)
            shifted = np.empty_like(bases)
            for l, (_, _, rows) in enumerate(per_level):
                off, _ = self._offsets[(l, k)]
                flat = rows[k].ravel()
                sl = slice(l * b * ncor, (l + 1) * b * ncor)
                bases[sl] = off + flat * sw
                shifted[sl] = l * t + flat
            gather_idx.append((bases[:, None] + np.arange(sw)).astype(np.int32))
            bin_rows.append(shifted)
        return BatchCache(
            n_points=b,
            n_channels=nch,
            levels_meta=per_level,
            wc_all=wc_all,
            gather_idx=gather_idx,
            bin_rows=bin_rows,
            k_slices=k_slices,
        )

    def build_cache(
        self,
        points: np.ndarray,
        need_grad: bool = True,
        need_hess: bool = True,
        need_mixed: bool = False,
        base_override: np.ndarray | None = None,
        dtype=np.float64,
    ) -> BatchCache:
        """Stacked rows and scaled weights, reusable across parameter values."""
        points = self._check_domain(points)
        per_level = []
        for l in range(self.levels):
            if base_override is not None:
                base = np.asarray(base_override, dtype=np.int64)
                local = points * self.resolutions[l] - base
            else:
                base, local = self.locate(points, l)
            coords = base[:, None, :] + self.corners[None, :, :]
            rows = [self.vertex_rows(coords, l, k) for k in range(self.n_orders)]
            per_level.append((base, local, rows))
        return self._assemble_cache(per_level, need_grad, need_hess, need_mixed, dtype)

    def encode_cached(
        self,
        cache: BatchCache,
        enc_params: np.ndarray,
        active_levels: int,
        need_grad: bool = True,
        need_hess: bool = True,
        need_mixed: bool = False,
    ) -> EncodingJet:
        self.encode_calls += 1
        b = cache.n_points
        lf = self.out_dim
        f = self.features
        dt = enc_params.dtype
        nch = self._n_channels(need_grad, need_hess, need_mixed)
        if cache.n_channels < nch:
            raise ValueError("cache was built without the requested jet channels")
        if cache.n_channels != nch and nch > 1 + self.dim:
            # value/grad channels are a shared prefix; Hessian layouts are not
            raise ValueError("cache Hessian layout does not match the request")
        nb = active_levels * b
        ncor = self.corners.shape[0]
        k_all = cache.k_slices[-1].stop
        g_all = np.empty((nb, k_all, f), dtype=dt)
        for k in range(self.n_orders):
            idx = cache.gather_idx[k][: nb * ncor]
            g_all[:, cache.k_slices[k]] = np.take(enc_params, idx).reshape(nb, -1, f)
        wc = cache.wc_all[:nb]
        if cache.n_channels != nch:
            wc = wc[:, :nch]
        res = np.matmul(wc, g_all)  # (nb, nch, F)
        out = np.zeros((nch, b, lf), dtype=dt)
        out[:, :, : active_levels * f] = (
            res.reshape(active_levels, b, nch, f)
            .transpose(2, 1, 0, 3)
            .reshape(nch, b, active_levels * f)
        )
        value = out[0]
        grad = hess = None
        ch = 1
        if need_grad or need_hess:
            grad = out[ch : ch + self.dim].transpose(1, 0, 2)
            ch += self.dim
        if not need_grad:
            grad = None
        if need_hess:
            if need_mixed:
                hess = out[ch:].reshape(self.dim, self.dim, b, lf).transpose(2, 0, 1, 3)
            else:
                hess = out[ch : ch + self.dim].transpose(1, 0, 2)
        return EncodingJet(
            value=value, grad=grad, hess=hess, mixed=need_mixed, stacked=out
        )

    def encode(
        self,
        points: np.ndarray,
        enc_params: np.ndarray,
        active_levels: int | None = None,
        need_grad: bool = True,
        need_hess: bool = True,
        need_mixed: bool = False,
    ) -> tuple[EncodingJet, EvalTrace]:
        """Evaluate the encoding jet at points in the unit cube."""
        if active_levels is None:
            active_levels = self.levels
        if not 1 <= active_levels <= self.levels:
            raise ValueError(f"active_levels {active_levels} outside [1, {self.levels}]")
        cache = self.build_cache(points, need_grad, need_hess, need_mixed)
        jet = self.encode_cached(
            cache, enc_params, active_levels, need_grad, need_hess, need_mixed
        )
        trace = EvalTrace(
            active_levels=active_levels,
            need_grad=need_grad,
            need_hess=need_hess,
            need_mixed=need_mixed,
            levels=[_LevelTrace(base, local, rows) for base, local, rows in cache.levels_meta],
        )
        return jet, trace

    def replay(self, trace: EvalTrace, enc_params: np.ndarray) -> EncodingJet:
        """Re-evaluate from a trace; bit-identical to the original encode()."""
        cache = self._cache_from_trace(trace)
        return self.encode_cached(
            cache,
            enc_params,
            trace.active_levels,
            trace.need_grad,
            trace.need_hess,
            trace.need_mixed,
        )

    def _cache_from_trace(self, trace: EvalTrace) -> BatchCache:
        per_level = [(lt.base, lt.local, lt.rows) for lt in trace.levels]
        return self._assemble_cache(
            per_level, trace.need_grad, trace.need_hess, trace.need_mixed, np.float64
        )

    # -- backward ----------------------------------------------------------

    def _stacked_cot(self, cot: EncodingJet, nch: int) -> np.ndarray:
        """Cotangents as one (nch, B, LF) block matching the cache channels."""
        if cot.stacked is not None and cot.stacked.shape[0] == nch:
            return cot.stacked
        b = cot.value.shape[0]
        lf = self.out_dim
        out = np.zeros((nch, b, lf), dtype=cot.value.dtype)
        out[0] = cot.value
        ch = 1
        if nch > 1:
            if cot.grad is not None:
                out[ch : ch + self.dim] = cot.grad.transpose(1, 0, 2)
            ch += self.dim
        if ch < nch and cot.hess is not None:
            h = cot.hess
            if h.ndim == 4:  # (B, d, d, LF) mixed block
                out[ch:] = h.transpose(1, 2, 0, 3).reshape(nch - ch, b, lf)
            else:
                out[ch:] = h.transpose(1, 0, 2)
        return out

    def backward_cached(
        self,
        cache: BatchCache,
        cot: EncodingJet,
        active_levels: int,
        grad_out: np.ndarray | None = None,
    ) -> np.ndarray:
        """Transpose of encode_cached: scatter jet cotangents into tables."""
        if grad_out is None:
            grad_out = np.zeros(self.n_params)
        f = self.features
        b = cache.n_points
        nch = cache.n_channels
        ncor = self.corners.shape[0]
        nb = active_levels * b
        cot_stack = self._stacked_cot(cot, nch)
        cs = (
            cot_stack[:, :, : active_levels * f]
            .reshape(nch, b, active_levels, f)
            .transpose(2, 1, 0, 3)
            .reshape(nb, nch, f)
        )
        u = np.matmul(cache.wc_all[:nb].transpose(0, 2, 1), cs)  # (nb, K, F)
        for k in range(self.n_orders):
            t = self.table_sizes[k]
            sw = self.slots[k] * f
            uk = u[:, cache.k_slices[k]].reshape(nb * ncor, sw)
            uk = uk.astype(np.float64, copy=False)
            rows = cache.bin_rows[k][: nb * ncor]
            for col in range(sw):
                res = np.bincount(rows, weights=uk[:, col], minlength=active_levels * t)
                for l in range(active_levels):
                    off, size = self._offsets[(l, k)]
                    view = grad_out[off : off + size].reshape(t, sw)
                    view[:, col] += res[l * t : (l + 1) * t]
        return grad_out

    def accumulate_grads(
        self,
        trace: EvalTrace,
        upstream: EncodingJet,
        grad_out: np.ndarray | None = None,
    ) -> np.ndarray:
        """Coefficient-gradient contributions for upstream jet cotangents."""
        cache = self._cache_from_trace(trace)
        return self.backward_cached(cache, upstream, trace.active_levels, grad_out)
