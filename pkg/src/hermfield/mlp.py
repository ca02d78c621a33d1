"""MLP that propagates (value, gradient, Hessian) jets analytically.

Activations are sinusoidal by default: a^(k) = sin(omega_k z^(k)).  Spatial
derivatives of the input encoding propagate through each layer with the
first/second-derivative recursions

    da^(k)/dx_i   = s'(z) * (W_k da^(k-1)/dx_i)
    d2a^(k)/dx_i2 = s''(z) * (W_k da^(k-1)/dx_i)^2 + s'(z) * (W_k d2a^(k-1)/dx_i2)

(and the analogous cross term for mixed partials), so a single forward pass
yields u, grad u and the Hessian without re-evaluating the encoding.  Any
registered activation with four derivatives available works; the sine case
exploits s'' = -omega^2 s.  The backward pass is hand-written reverse mode
through these recursions and needs the cached per-layer intermediates.
"""

from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingJet

__all__ = [
    "ACTIVATIONS",
    "MlpConfig",
    "Jet2",
    "JetMlp",
    "laplacian",
]


def _sine(z, omega):
    t = omega * z
    s = np.sin(t)
    c = np.cos(t)
    return s, omega * c, -(omega**2) * s, -(omega**3) * c


def _tanh(z, omega):
    y = np.tanh(omega * z)
    y2 = y * y
    d1 = omega * (1.0 - y2)
    d2 = -2.0 * omega**2 * y * (1.0 - y2)
    d3 = -2.0 * omega**3 * (1.0 - y2) * (1.0 - 3.0 * y2)
    return y, d1, d2, d3


ACTIVATIONS = {"sine": _sine, "tanh": _tanh}


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    width: int
    depth: int  # number of hidden layers (0 = pure linear head)
    out_dim: int
    omega0: float = 30.0
    omega_hidden: float = 1.0
    activation: str = "sine"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.depth < 0:
            raise ValueError("invalid MLP dimensions")
        if self.depth > 0 and self.width < 1:
            raise ValueError("hidden width must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")


@dataclass
class _LayerCache:
    in_state: np.ndarray  # (B, S, n) stacked input jets
    z_streams: np.ndarray  # (B, S, h): z in stream 0, W@grads, W@hess after
    s: np.ndarray
    g1: np.ndarray
    g2: np.ndarray | None
    g3: np.ndarray | None
    out_state: np.ndarray


@dataclass
class Jet2:
    """Model output bundle: value, spatial gradient and Hessian per point.

    ``hess`` is (B, dim, m) diagonal-only unless ``mixed``, then the full
    symmetric (B, dim, dim, m) block.  ``caches`` keeps the per-layer
    forward intermediates required by backward().
    """

    value: np.ndarray
    grad: np.ndarray | None
    hess: np.ndarray | None
    mixed: bool = False
    caches: list = field(default_factory=list)
    head_in: tuple = ()


def laplacian(jet: Jet2) -> np.ndarray:
    """Sum of diagonal second derivatives, per output channel: (B, m)."""
    if jet.hess is None:
        raise ValueError("jet has no Hessian channels")
    if jet.mixed:
        return np.einsum("biim->bm", jet.hess)
    return jet.hess.sum(axis=1)


def _mm(x: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """Matmul over the last axis for arrays with extra leading axes."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ wt).reshape(lead + (wt.shape[1],))


def _outer_acc(out: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """out += sum over leading axes of a[... i] b[... j]: one BLAS call."""
    out += a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


class JetMlp:
    """Architecture + kernels; parameters live in an external flat block."""

    def __init__(self, config: MlpConfig):
        self.config = config
        widths = [config.in_dim] + [config.width] * config.depth
        self.layer_shapes = []
        for k in range(config.depth):
            self.layer_shapes.append((widths[k + 1], widths[k]))
        self.head_shape = (config.out_dim, widths[-1])
        self.omegas = [config.omega0] + [config.omega_hidden] * max(0, config.depth - 1)
        self.act = ACTIVATIONS[config.activation]
        self._offsets = []
        off = 0
        for shape in self.layer_shapes + [self.head_shape]:
            wsize = shape[0] * shape[1]
            self._offsets.append((off, shape))
            off += wsize + shape[0]
        self.n_params = off

    def views(self, mlp_params: np.ndarray) -> list:
        out = []
        for off, shape in self._offsets:
            wsize = shape[0] * shape[1]
            w = mlp_params[off : off + wsize].reshape(shape)
            b = mlp_params[off + wsize : off + wsize + shape[0]]
            out.append((w, b))
        return out

    def init_params(self, seed: int) -> np.ndarray:
        """Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
        rng = np.random.default_rng(seed)
        params = np.zeros(self.n_params)
        for off, shape in self._offsets:
            bound = np.sqrt(6.0 / shape[1])
            wsize = shape[0] * shape[1]
            params[off : off + wsize] = rng.uniform(-bound, bound, size=wsize)
        return params

    # -- jet forward ---------------------------------------------------------

    def _stack_enc(self, enc: EncodingJet, need_grad, need_hessian, need_mixed):
        """Encoding jets as one stream-major (S, B, in_dim) state; zero-copy
        when the encoder already produced the stacked buffer."""
        b, n = enc.value.shape
        d = enc.grad.shape[1] if enc.grad is not None else 0
        s_streams = 1 + (d if (need_grad or need_hessian) else 0)
        if need_hessian:
            s_streams += d * d if need_mixed else d
        if enc.stacked is not None and enc.stacked.shape[0] == s_streams:
            return enc.stacked, d
        state = np.empty((s_streams, b, n), dtype=enc.value.dtype)
        state[0] = enc.value
        ch = 1
        if need_grad or need_hessian:
            state[ch : ch + d] = enc.grad.transpose(1, 0, 2)
            ch += d
        if need_hessian:
            h = enc.hess
            if h.ndim == 4:
                state[ch:] = h.transpose(1, 2, 0, 3).reshape(s_streams - ch, b, n)
            else:
                state[ch:] = h.transpose(1, 0, 2)
        return state, d

    def forward_jet(
        self,
        enc: EncodingJet,
        mlp_params: np.ndarray,
        need_hessian: bool = True,
        need_mixed: bool = False,
    ) -> Jet2:
        if enc.value.shape[1] != self.config.in_dim:
            raise ValueError(
                f"encoding width {enc.value.shape[1]} != MLP input {self.config.in_dim}"
            )
        if need_mixed and not need_hessian:
            raise ValueError("need_mixed requires need_hessian")
        need_grad = enc.grad is not None
        if need_hessian and (
            enc.grad is None or enc.hess is None or (need_mixed and not enc.mixed)
        ):
            raise ValueError("encoding jet lacks the requested Hessian channels")
        layers = self.views(mlp_params)
        state, d = self._stack_enc(enc, need_grad, need_hessian, need_mixed)
        s_streams, b, _ = state.shape
        gsl = slice(1, 1 + d)
        hsl = slice(1 + d, s_streams)
        caches = []
        for k in range(self.config.depth):
            w, bias = layers[k]
            omega = self.omegas[k]
            zs = _mm(state, w.T)  # one gemm for all jet streams
            z = zs[0] + bias
            s, g1, g2, g3 = self.act(z, omega)
            new = np.empty((s_streams, b, w.shape[0]), dtype=state.dtype)
            new[0] = s
            u = zs[gsl]
            np.multiply(g1[None], u, out=new[gsl])
            if need_hessian:
                v = zs[hsl]
                if need_mixed:
                    uu = (u[:, None] * u[None, :]).reshape(d * d, b, -1)
                else:
                    uu = u * u
                hv = new[hsl]
                np.multiply(g2[None], uu, out=hv)
                hv += g1[None] * v
            caches.append(_LayerCache(state, zs, s, g1, g2, g3, new))
            state = new
        w, bias = layers[-1]
        out = _mm(state, w.T)
        out[0] += bias
        value = out[0]
        grad = out[gsl].transpose(1, 0, 2) if need_grad else None
        hess = None
        if need_hessian:
            if need_mixed:
                hess = out[hsl].reshape(d, d, b, -1).transpose(2, 0, 1, 3)
            else:
                hess = out[hsl].transpose(1, 0, 2)
        return Jet2(
            value=value,
            grad=grad,
            hess=hess,
            mixed=need_mixed,
            caches=caches,
            head_in=(state, out, d),
        )

    # -- jet backward ----------------------------------------------------------

    def backward_jet(
        self,
        jet: Jet2,
        upstream: tuple,
        mlp_params: np.ndarray,
        grad_out: np.ndarray | None = None,
    ) -> tuple[np.ndarray, EncodingJet]:
        """Reverse mode through the jet recursion.

        ``upstream`` is (value_bar, grad_bar, hess_bar) matching the jet's
        shapes (None where unused).  Returns (mlp parameter gradient,
        cotangents of the input EncodingJet).
        """
        if not jet.head_in:
            raise ValueError("jet carries no caches; run forward_jet first")
        if grad_out is None:
            grad_out = np.zeros(self.n_params)
        layers = self.views(mlp_params)
        gviews = self.views(grad_out)
        ubar, gbar, hbar = upstream

        state_k, out, d = jet.head_in
        s_streams, b, _ = state_k.shape
        gsl = slice(1, 1 + d)
        hsl = slice(1 + d, s_streams)
        has_hess = s_streams > 1 + d
        m = out.shape[2]
        dt = state_k.dtype

        cot_out = np.zeros((s_streams, b, m), dtype=dt)
        w, _ = layers[-1]
        wbar, bbar = gviews[-1]
        if ubar is not None:
            cot_out[0] = ubar
            bbar += ubar.sum(axis=0)
        if gbar is not None:
            cot_out[gsl] = gbar.transpose(1, 0, 2)
        if hbar is not None:
            if jet.mixed:
                cot_out[hsl] = hbar.transpose(1, 2, 0, 3).reshape(d * d, b, m)
            else:
                cot_out[hsl] = hbar.transpose(1, 0, 2)
        _outer_acc(wbar, cot_out, state_k)
        cot = _mm(cot_out, w)  # (S, B, h) cotangents of the last hidden state

        for k in range(self.config.depth - 1, -1, -1):
            c = jet.caches[k]
            w, _ = layers[k]
            wbar, bbar = gviews[k]
            abar = cot[0]
            dbar = cot[gsl]
            u = c.z_streams[gsl]
            cot_in = np.empty_like(c.z_streams)
            g1bar = None
            g2bar = None
            if d > 0:
                np.multiply(c.g1[None], dbar, out=cot_in[gsl])
                g1bar = np.einsum("ibh,ibh->bh", dbar, u)
            if has_hess:
                hesbar = cot[hsl]
                v = c.z_streams[hsl]
                if jet.mixed:
                    hb = hesbar.reshape(d, d, b, -1)
                    uu = (u[:, None] * u[None, :]).reshape(d * d, b, -1)
                    g2bar = np.einsum("ibh,ibh->bh", hesbar, uu)
                    sym = hb + np.swapaxes(hb, 0, 1)
                    cot_in[gsl] += c.g2[None] * np.einsum("ijbh,jbh->ibh", sym, u)
                else:
                    g2bar = np.einsum("ibh,ibh->bh", hesbar, u * u)
                    cot_in[gsl] += 2.0 * c.g2[None] * u * hesbar
                np.multiply(c.g1[None], hesbar, out=cot_in[hsl])
                g1bar += np.einsum("ibh,ibh->bh", hesbar, v)
            zbar = abar * c.g1
            if g1bar is not None:
                zbar += g1bar * c.g2
            if g2bar is not None:
                zbar += g2bar * c.g3
            cot_in[0] = zbar

            _outer_acc(wbar, cot_in, c.in_state)
            bbar += zbar.sum(axis=0)
            cot = _mm(cot_in, w)

        enc_value_bar = cot[0]
        enc_grad_bar = cot[gsl].transpose(1, 0, 2) if d > 0 else None
        enc_hess_bar = None
        if has_hess:
            if jet.mixed:
                enc_hess_bar = cot[hsl].reshape(d, d, b, -1).transpose(2, 0, 1, 3)
            else:
                enc_hess_bar = cot[hsl].transpose(1, 0, 2)
        enc_cot = EncodingJet(
            value=enc_value_bar,
            grad=enc_grad_bar,
            hess=enc_hess_bar,
            mixed=jet.mixed,
            stacked=cot,
        )
        return grad_out, enc_cot

    # -- value-only fast path --------------------------------------------------

    def forward_value(self, x: np.ndarray, mlp_params: np.ndarray):
        """Plain forward pass; returns (value, cache for backward_value)."""
        layers = self.views(mlp_params)
        a = x
        cache = []
        for k in range(self.config.depth):
            w, b = layers[k]
            z = a @ w.T + b
            s, g1, _, _ = self.act(z, self.omegas[k])
            cache.append((a, g1))
            a = s
        w, b = layers[-1]
        return a @ w.T + b, (cache, a)

    def backward_value(
        self,
        cache,
        value_bar: np.ndarray,
        mlp_params: np.ndarray,
        grad_out: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backward of forward_value; returns (mlp grad, input cotangent)."""
        if grad_out is None:
            grad_out = np.zeros(self.n_params)
        layer_cache, a_last = cache
        layers = self.views(mlp_params)
        gviews = self.views(grad_out)
        w, _ = layers[-1]
        wbar, bbar = gviews[-1]
        wbar += value_bar.T @ a_last
        bbar += value_bar.sum(axis=0)
        abar = value_bar @ w
        for k in range(self.config.depth - 1, -1, -1):
            a_in, g1 = layer_cache[k]
            w, _ = layers[k]
            wbar, bbar = gviews[k]
            zbar = abar * g1
            wbar += zbar.T @ a_in
            bbar += zbar.sum(axis=0)
            abar = zbar @ w
        return grad_out, abar
