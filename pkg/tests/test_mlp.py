import numpy as np
import pytest

from hermfield.encoding import EncodingJet
from hermfield.mlp import ACTIVATIONS, Jet2, JetMlp, MlpConfig, laplacian
from oracles import fd_hessian_of, norm_rel_err, poly_jet, rand_poly


def poly_encoding_jet(coefs, pts, mixed=False):
    """Synthetic smooth encoding: one cubic polynomial per channel."""
    n, dim = pts.shape
    width = len(coefs)
    value = np.empty((n, width))
    grad = np.empty((n, dim, width))
    hess = (
        np.empty((n, dim, dim, width)) if mixed else np.empty((n, dim, width))
    )
    for j, c in enumerate(coefs):
        v, g, h = poly_jet(c, pts)
        value[:, j] = v
        grad[:, :, j] = g
        if mixed:
            hess[:, :, :, j] = h
        else:
            hess[:, :, j] = np.diagonal(h, axis1=1, axis2=2)
    return EncodingJet(value=value, grad=grad, hess=hess, mixed=mixed)


def make_mlp(in_dim=4, width=6, depth=2, out_dim=2, seed=0, **kw):
    mlp = JetMlp(MlpConfig(in_dim=in_dim, width=width, depth=depth, out_dim=out_dim, **kw))
    return mlp, mlp.init_params(seed)


class TestInit:
    def test_deterministic(self):
        mlp, p = make_mlp(seed=3)
        np.testing.assert_array_equal(p, mlp.init_params(3))

    def test_bound(self):
        mlp = JetMlp(MlpConfig(in_dim=128, width=128, depth=2, out_dim=1))
        p = mlp.init_params(1)
        bound = np.sqrt(6.0 / 128)
        w2, _ = mlp.views(p)[1]
        assert np.all(np.abs(w2) <= bound)

    def test_empirical_minmax(self):
        mlp = JetMlp(MlpConfig(in_dim=1000, width=128, depth=1, out_dim=1))
        w1, _ = mlp.views(mlp.init_params(7))[0]
        assert w1.size >= 10**5
        bound = np.sqrt(6.0 / 1000)
        assert w1.max() > 0.99 * bound and w1.min() < -0.99 * bound

    def test_biases_zero(self):
        mlp, p = make_mlp()
        for _, b in mlp.views(p):
            assert np.all(b == 0)


class TestForwardJet:
    def test_zero_depth_linear_head(self):
        rng = np.random.default_rng(0)
        mlp, p = make_mlp(in_dim=3, width=0, depth=0, out_dim=2, seed=1)
        w, b = mlp.views(p)[0]
        enc = EncodingJet(
            value=rng.standard_normal((5, 3)),
            grad=rng.standard_normal((5, 2, 3)),
            hess=rng.standard_normal((5, 2, 3)),
        )
        jet = mlp.forward_jet(enc, p)
        np.testing.assert_allclose(jet.value, enc.value @ w.T + b, atol=1e-14)
        np.testing.assert_allclose(jet.grad, enc.grad @ w.T, atol=1e-14)
        np.testing.assert_allclose(jet.hess, enc.hess @ w.T, atol=1e-14)

    def test_single_layer_matches_closed_form(self):
        # scalar one-hidden-unit network: d2u/dx2 must equal
        # W2 * (-w^2 sin(w*w1*g0)*(w1*g)^2 + w cos(w*w1*g0)*w1*h)
        omega, w1, w2 = 1.7, 0.8, 1.3
        g0, g, h = 0.4, 2.0, -0.7
        mlp = JetMlp(
            MlpConfig(in_dim=1, width=1, depth=1, out_dim=1, omega0=omega)
        )
        p = np.zeros(mlp.n_params)
        views = mlp.views(p)
        views[0][0][:] = w1
        views[1][0][:] = w2
        enc = EncodingJet(
            value=np.array([[g0]]),
            grad=np.array([[[g]]]),
            hess=np.array([[[h]]]),
        )
        jet = mlp.forward_jet(enc, p)
        z = w1 * g0
        want = w2 * (
            -(omega**2) * np.sin(omega * z) * (w1 * g) ** 2
            + omega * np.cos(omega * z) * w1 * h
        )
        np.testing.assert_allclose(jet.hess[0, 0, 0], want, rtol=1e-14)
        want_u = w2 * np.sin(omega * z)
        want_g = w2 * omega * np.cos(omega * z) * w1 * g
        np.testing.assert_allclose(jet.value[0, 0], want_u, rtol=1e-14)
        np.testing.assert_allclose(jet.grad[0, 0, 0], want_g, rtol=1e-14)

    @pytest.mark.parametrize("activation", ["sine", "tanh"])
    def test_fd_oracle_on_smooth_encoding(self, activation):
        rng = np.random.default_rng(5)
        dim, width_in = 2, 3
        coefs = [rand_poly(dim, rng, 0.5) for _ in range(width_in)]
        mlp, p = make_mlp(in_dim=width_in, width=8, depth=2, out_dim=2, seed=2,
                          activation=activation, omega0=2.0)

        def value_of(x):
            return mlp.forward_jet(
                poly_encoding_jet(coefs, x), p, need_hessian=False
            ).value

        pts = rng.uniform(0.1, 0.9, size=(30, dim))
        jet = mlp.forward_jet(poly_encoding_jet(coefs, pts, mixed=True), p,
                              need_mixed=True)
        h1, h2 = 1e-5, 1e-4
        for i in range(dim):
            xp, xm = pts.copy(), pts.copy()
            xp[:, i] += h1
            xm[:, i] -= h1
            fd = (value_of(xp) - value_of(xm)) / (2 * h1)
            assert norm_rel_err(jet.grad[:, i], fd) < 1e-6
        fd_h = fd_hessian_of(value_of, pts, h2)
        assert norm_rel_err(jet.hess, fd_h) < 1e-4

    def test_mixed_symmetry(self):
        rng = np.random.default_rng(8)
        coefs = [rand_poly(3, rng) for _ in range(4)]
        mlp, p = make_mlp(in_dim=4, seed=4)
        pts = rng.uniform(0, 1, size=(10, 3))
        jet = mlp.forward_jet(poly_encoding_jet(coefs, pts, mixed=True), p,
                              need_mixed=True)
        assert np.max(np.abs(jet.hess - np.swapaxes(jet.hess, 1, 2))) < 1e-12

    def test_diag_matches_mixed_diagonal(self):
        rng = np.random.default_rng(9)
        coefs = [rand_poly(2, rng) for _ in range(3)]
        mlp, p = make_mlp(in_dim=3, seed=5)
        pts = rng.uniform(0, 1, size=(6, 2))
        full = mlp.forward_jet(poly_encoding_jet(coefs, pts, mixed=True), p,
                               need_mixed=True)
        diag = mlp.forward_jet(poly_encoding_jet(coefs, pts), p)
        for i in range(2):
            np.testing.assert_allclose(diag.hess[:, i], full.hess[:, i, i], atol=1e-13)

    def test_dimension_mismatch(self):
        mlp, p = make_mlp(in_dim=4)
        enc = EncodingJet(value=np.zeros((2, 3)))
        with pytest.raises(ValueError, match="input"):
            mlp.forward_jet(enc, p, need_hessian=False)

    def test_sine_identity_against_nested_first_recursion(self):
        # independent test-side propagation: differentiate the first-order
        # rule once more, evaluating sin/cos from scratch at each step
        rng = np.random.default_rng(12)
        mlp, p = make_mlp(in_dim=3, width=7, depth=3, out_dim=1, seed=6,
                          omega0=2.5, omega_hidden=1.3)
        coefs = [rand_poly(2, rng) for _ in range(3)]
        pts = rng.uniform(0, 1, size=(8, 2))
        enc = poly_encoding_jet(coefs, pts)
        jet = mlp.forward_jet(enc, p)

        layers = mlp.views(p)
        a, d, t = enc.value, enc.grad, enc.hess
        for k in range(mlp.config.depth):
            w, b = layers[k]
            om = mlp.omegas[k]
            z = a @ w.T + b
            wd = np.einsum("bin,hn->bih", d, w)
            wt = np.einsum("bin,hn->bih", t, w)
            s1 = om * np.cos(om * z)  # sigma'
            s2 = om * (-om * np.sin(om * z))  # d/dz of sigma'
            a_next = np.sin(om * z)
            d_next = s1[:, None, :] * wd
            t_next = s2[:, None, :] * wd * wd + s1[:, None, :] * wt
            a, d, t = a_next, d_next, t_next
        w, b = layers[-1]
        want = np.einsum("bih,mh->bim", t, w)
        assert np.max(np.abs(jet.hess - want)) < 1e-10


class TestLaplacian:
    def test_identity_hessian(self):
        jet = Jet2(value=np.zeros((4, 2)), grad=None,
                   hess=np.ones((4, 3, 2)), mixed=False)
        np.testing.assert_array_equal(laplacian(jet), 3 * np.ones((4, 2)))

    def test_zero(self):
        jet = Jet2(value=np.zeros((4, 1)), grad=None, hess=np.zeros((4, 2, 1)))
        assert np.all(laplacian(jet) == 0)

    def test_mixed_mode_takes_diagonal(self):
        h = np.zeros((2, 2, 2, 1))
        h[:, 0, 0, 0] = 1.0
        h[:, 1, 1, 0] = 2.0
        h[:, 0, 1, 0] = 99.0
        jet = Jet2(value=np.zeros((2, 1)), grad=None, hess=h, mixed=True)
        np.testing.assert_array_equal(laplacian(jet)[:, 0], [3.0, 3.0])


class TestBackwardJet:
    def _setup(self, mixed=False, activation="sine", depth=2):
        rng = np.random.default_rng(20)
        coefs = [rand_poly(2, rng, 0.5) for _ in range(3)]
        mlp, p = make_mlp(in_dim=3, width=5, depth=depth, out_dim=2, seed=8,
                          activation=activation, omega0=2.0)
        pts = rng.uniform(0, 1, size=(7, 2))
        enc = poly_encoding_jet(coefs, pts, mixed=mixed)
        return mlp, p, enc, rng

    def test_zero_upstream(self):
        mlp, p, enc, _ = self._setup()
        jet = mlp.forward_jet(enc, p)
        up = (np.zeros_like(jet.value), np.zeros_like(jet.grad), np.zeros_like(jet.hess))
        g, cot = mlp.backward_jet(jet, up, p)
        assert np.all(g == 0)
        assert np.all(cot.value == 0) and np.all(cot.grad == 0) and np.all(cot.hess == 0)

    @pytest.mark.parametrize("mixed", [False, True])
    @pytest.mark.parametrize("activation", ["sine", "tanh"])
    def test_param_grad_fd_exhaustive(self, mixed, activation):
        mlp, p, enc, rng = self._setup(mixed=mixed, activation=activation)
        uv = rng.standard_normal(3)  # random loss direction weights

        def loss(params):
            jet = mlp.forward_jet(enc, params, need_mixed=mixed)
            return (
                uv[0] * np.sum(jet.value**2)
                + uv[1] * np.sum(jet.grad**2)
                + uv[2] * np.sum(jet.hess**2)
            )

        jet = mlp.forward_jet(enc, p, need_mixed=mixed)
        up = (2 * uv[0] * jet.value, 2 * uv[1] * jet.grad, 2 * uv[2] * jet.hess)
        g, _ = mlp.backward_jet(jet, up, p)
        h = 1e-6
        fd = np.empty_like(g)
        for i in range(p.size):
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            fd[i] = (loss(pp) - loss(pm)) / (2 * h)
        assert norm_rel_err(g, fd) < 1e-7

    def test_encoding_cotangent_fd(self):
        mlp, p, enc, rng = self._setup()
        jet = mlp.forward_jet(enc, p)
        up = (2 * jet.value, 2 * jet.grad, 2 * jet.hess)
        _, cot = mlp.backward_jet(jet, up, p)

        def loss(e):
            j = mlp.forward_jet(e, p)
            return np.sum(j.value**2) + np.sum(j.grad**2) + np.sum(j.hess**2)

        h = 1e-6
        for arr, cbar in ((enc.value, cot.value), (enc.grad, cot.grad),
                          (enc.hess, cot.hess)):
            fd = np.empty_like(arr)
            flat = arr.ravel()
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = loss(enc)
                flat[i] = old - h
                lm = loss(enc)
                flat[i] = old
                fd.ravel()[i] = (lp - lm) / (2 * h)
            assert norm_rel_err(cbar, fd) < 1e-7

    def test_hessian_only_loss(self):
        # upstream only on the Hessian channel, e.g. a Laplacian residual
        mlp, p, enc, _ = self._setup()
        jet = mlp.forward_jet(enc, p)
        lap = laplacian(jet)
        target = 0.3
        up_h = np.broadcast_to((2.0 * (lap - target))[:, None, :], jet.hess.shape).copy()
        g, _ = mlp.backward_jet(jet, (None, None, up_h), p)

        def loss(params):
            j = mlp.forward_jet(enc, params)
            return np.sum((laplacian(j) - target) ** 2)

        h = 1e-6
        fd = np.empty_like(g)
        for i in range(p.size):
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            fd[i] = (loss(pp) - loss(pm)) / (2 * h)
        assert norm_rel_err(g, fd) < 1e-7

    def test_missing_caches(self):
        mlp, p, enc, _ = self._setup()
        jet = Jet2(value=np.zeros((1, 2)), grad=None, hess=None)
        with pytest.raises(ValueError, match="cache"):
            mlp.backward_jet(jet, (np.zeros((1, 2)), None, None), p)


class TestValuePath:
    def test_matches_jet_forward(self):
        rng = np.random.default_rng(30)
        mlp, p = make_mlp(in_dim=4, seed=9)
        x = rng.standard_normal((11, 4))
        enc = EncodingJet(value=x)
        jet = mlp.forward_jet(enc, p, need_hessian=False)
        v, _ = mlp.forward_value(x, p)
        np.testing.assert_array_equal(v, jet.value)

    def test_backward_value_fd(self):
        rng = np.random.default_rng(31)
        mlp, p = make_mlp(in_dim=3, width=5, depth=2, out_dim=1, seed=10)
        x = rng.standard_normal((6, 3))

        def loss(params):
            v, _ = mlp.forward_value(x, params)
            return np.sum(v**2)

        v, cache = mlp.forward_value(x, p)
        g, xbar = mlp.backward_value(cache, 2 * v, p)
        h = 1e-6
        fd = np.empty_like(g)
        for i in range(p.size):
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            fd[i] = (loss(pp) - loss(pm)) / (2 * h)
        assert norm_rel_err(g, fd) < 1e-7
        fdx = np.empty_like(x)
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp.ravel()[i] += h
            xm.ravel()[i] -= h
            fdx.ravel()[i] = (
                np.sum(mlp.forward_value(xp, p)[0] ** 2)
                - np.sum(mlp.forward_value(xm, p)[0] ** 2)
            ) / (2 * h)
        assert norm_rel_err(xbar, fdx) < 1e-7
