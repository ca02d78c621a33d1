import numpy as np
import pytest

from hermfield.encoding import EncodingConfig
from hermfield.field import make_model
from hermfield.losses import (
    CollocationBatch,
    DivergenceError,
    LossWeights,
    SampledCondition,
    SampledPair,
    loss_and_grad,
    prepare_caches,
)
from hermfield.mlp import laplacian
from hermfield.problems import (
    PeriodicPairSet,
    convection1p1d,
    helmholtz2d,
    taylor_green,
)
from oracles import fd_hessian_of, norm_rel_err, points_off_grid


def tiny_model(problem, levels=1, log2=4, features=1, width=6, depth=2, n_min=3):
    cfg = EncodingConfig(
        dim=problem.dim,
        levels=levels,
        table_sizes=tuple([2**log2] * (problem.dim + 1)),
        features=features,
        n_min=n_min,
        ratio=1.6,
    )
    return make_model(problem, cfg, width=width, depth=depth, omega0=3.0)


def sample_batch(problem, n_int, n_cond, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = problem.box_lo, problem.box_hi
    interior = lo + (hi - lo) * rng.uniform(0.02, 0.98, size=(n_int, problem.dim))
    conds = []
    for cs in problem.condition_sets:
        if isinstance(cs, PeriodicPairSet):
            a, b = cs.sample(n_cond, rng)
            conds.append(SampledPair(cs, a, b))
        else:
            pts = cs.sample(n_cond, rng)
            conds.append(SampledCondition(cs, pts, cs.target(pts)))
    return CollocationBatch(interior=interior, conditions=conds)


class TestComposedFieldFD:
    """Physical-coordinate jets of encode->MLP vs finite differences."""

    def test_on_nonunit_box(self):
        problem = convection1p1d(3.0)  # box [0,2pi]x[0,1] exercises the affine map
        model = tiny_model(problem, levels=2, log2=7, features=2, width=8)
        params = model.init_params(1, 2)
        # make derivative tables nonzero too
        rng = np.random.default_rng(5)
        params[model.layout.enc_slice] = 0.05 * rng.standard_normal(
            model.encoding.n_params
        )
        pts_norm = points_off_grid(rng, 30, 2, model.encoding.resolutions, 1e-3)
        pts = model.denormalize(pts_norm)
        fjet = model.forward_jet(pts, params, need_mixed=True)

        def val(x):
            return model.forward_value(x, params)[0]

        for i in range(2):
            h1 = 1e-5 * model.scale[i]
            xp, xm = pts.copy(), pts.copy()
            xp[:, i] += h1
            xm[:, i] -= h1
            fd = (val(xp) - val(xm)) / (2 * h1)
            assert norm_rel_err(fjet.grad[:, i], fd) < 1e-6
        fd_h = fd_hessian_of(val, pts, 1e-4)
        assert norm_rel_err(fjet.hess, fd_h) < 1e-4

    def test_single_encode_per_jet(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        pts = sample_batch(problem, 8, 4).interior
        model.encoding.encode_calls = 0
        fjet = model.forward_jet(pts, params)
        laplacian(fjet.mlp_jet)
        problem.residual(pts, fjet.value, fjet.grad, fjet.hess)
        assert model.encoding.encode_calls == 1


class TestParamLayout:
    def test_roundtrip_and_count(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem, levels=2, log2=5, features=2, width=4)
        t = 2**5
        enc_count = 2 * (t + 2 * t + t) * 2
        lf = model.encoding.out_dim
        mlp_count = (4 * lf + 4) + (4 * 4 + 4) + (1 * 4 + 1)
        assert model.n_params == enc_count + mlp_count
        params = model.init_params(3, 4)
        cover = np.zeros(model.n_params, dtype=int)
        for _, sl in model.layout.entries:
            cover[sl] += 1
        assert np.all(cover == 1)
        # named access round-trips
        sl = model.layout.offset("mlp/head/b")
        params[sl] = 7.0
        assert np.all(model.split(params)[1][-1:] == 7.0)

    def test_level_slices_are_contiguous_prefix(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem, levels=3)
        stops = [s.stop for s in model.layout.level_slices]
        starts = [s.start for s in model.layout.level_slices]
        assert starts[0] == 0
        assert starts[1:] == stops[:-1]
        assert stops[-1] == model.encoding.n_params


class TestLossAndGrad:
    def test_weighting_identity(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        batch = sample_batch(problem, 16, 8)
        only_res = LossWeights(res=1.0, bc=0.0, ic=0.0, data=0.0)
        bd, _ = loss_and_grad(model, problem, batch, params, only_res)
        assert np.isclose(bd.total, bd.res)

    def test_gradient_linearity_in_weights(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        batch = sample_batch(problem, 12, 6)
        _, g_res = loss_and_grad(model, problem, batch, params, LossWeights(1, 0, 0, 0))
        _, g_bc = loss_and_grad(model, problem, batch, params, LossWeights(0, 1, 0, 0))
        a, b = 0.3, 2.5
        _, g_mix = loss_and_grad(
            model, problem, batch, params, LossWeights(a, b, 0, 0)
        )
        np.testing.assert_allclose(g_mix, a * g_res + b * g_bc, atol=1e-12)

    def test_batch_decomposition(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(2, 3)
        batch = sample_batch(problem, 6, 0)
        batch.conditions = []
        _, g_full = loss_and_grad(model, problem, batch, params, LossWeights())
        per_point = np.zeros_like(g_full)
        for i in range(6):
            sub = CollocationBatch(interior=batch.interior[i : i + 1], conditions=[])
            _, gi = loss_and_grad(model, problem, sub, params, LossWeights())
            per_point += gi
        np.testing.assert_allclose(g_full, per_point / 6.0, atol=1e-12)

    def test_deterministic(self):
        problem = convection1p1d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        batch = sample_batch(problem, 10, 5)
        _, g1 = loss_and_grad(model, problem, batch, params, LossWeights())
        _, g2 = loss_and_grad(model, problem, batch, params, LossWeights())
        np.testing.assert_array_equal(g1, g2)

    def test_caches_change_nothing(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        batch = sample_batch(problem, 10, 5)
        bd1, g1 = loss_and_grad(model, problem, batch, params, LossWeights())
        caches = prepare_caches(model, batch, problem)
        bd2, g2 = loss_and_grad(
            model, problem, batch, params, LossWeights(), caches=caches
        )
        assert bd1.total == bd2.total
        np.testing.assert_array_equal(g1, g2)

    def test_divergence_signal(self):
        problem = helmholtz2d(2.0)
        model = tiny_model(problem)
        params = model.init_params(0, 1)
        params[0] = np.nan
        batch = sample_batch(problem, 4, 2)
        with pytest.raises(DivergenceError) as e:
            loss_and_grad(model, problem, batch, params, LossWeights())
        assert e.value.term == "res"

    @pytest.mark.parametrize(
        "make_problem_fn",
        [lambda: helmholtz2d(2.0), lambda: convection1p1d(3.0)],
    )
    def test_exhaustive_fd(self, make_problem_fn):
        """Full-gradient FD on a tiny model (the criterion-3 style oracle)."""
        problem = make_problem_fn()
        model = tiny_model(problem, levels=1, log2=4, features=1, width=5, depth=2)
        assert model.n_params <= 500
        params = model.init_params(1, 2)
        rng = np.random.default_rng(7)
        params[model.layout.enc_slice] += 0.05 * rng.standard_normal(
            model.encoding.n_params
        )
        batch = sample_batch(problem, 10, 5)
        weights = LossWeights(res=1.0, bc=0.7, ic=1.3, data=1.0)
        _, g = loss_and_grad(model, problem, batch, params, weights)

        def total(p):
            bd, _ = loss_and_grad(model, problem, batch, p, weights)
            return bd.total

        h = 1e-6
        fd = np.empty_like(g)
        for i in range(params.size):
            pp, pm = params.copy(), params.copy()
            pp[i] += h
            pm[i] -= h
            fd[i] = (total(pp) - total(pm)) / (2 * h)
        assert norm_rel_err(g, fd) < 1e-7

    def test_taylor_green_sampled_fd(self):
        """Nonlinear residual + multi-output head; spot-check 60 params."""
        problem = taylor_green(0.05)
        model = tiny_model(problem, levels=1, log2=4, features=1, width=5, depth=1)
        params = model.init_params(4, 5)
        rng = np.random.default_rng(8)
        params[model.layout.enc_slice] += 0.1 * rng.standard_normal(
            model.encoding.n_params
        )
        batch = sample_batch(problem, 8, 4)
        weights = LossWeights()
        _, g = loss_and_grad(model, problem, batch, params, weights)

        def total(p):
            bd, _ = loss_and_grad(model, problem, batch, p, weights)
            return bd.total

        h = 1e-6
        idx = rng.choice(params.size, size=60, replace=False)
        fd = np.array(
            [
                (total(np.where(np.arange(params.size) == i, params + h, params))
                 - total(np.where(np.arange(params.size) == i, params - h, params)))
                / (2 * h)
                for i in idx
            ]
        )
        scale = max(np.max(np.abs(g)), 1e-12)
        assert np.max(np.abs(g[idx] - fd)) / scale < 1e-7

    def _populated_exact_model(self, problem, n_cells, log2):
        """Dense single-level encoding filled with exact nodal data of u*,
        identity linear head: the model IS the Hermite interpolant of u*."""
        from hermfield.encoding import dense_index

        cfg = EncodingConfig(
            dim=2, levels=1, table_sizes=(2**log2,) * 3, features=1,
            n_min=n_cells, ratio=1.5,
        )
        model = make_model(problem, cfg, width=4, depth=0)
        assert model.encoding.is_dense(0, 0)
        params = np.zeros(model.n_params)
        enc = model.encoding
        n = enc.resolutions[0]
        grid = np.stack(np.meshgrid(*[np.arange(n + 1)] * 2, indexing="ij"), -1)
        grid = grid.reshape(-1, 2)
        pos = grid / n
        v, g, _ = problem.exact_jet(pos)
        a1, a2 = problem.freqs
        mixed = (
            a1 * a2 * np.pi**2
            * np.cos(a1 * np.pi * pos[:, 0]) * np.cos(a2 * np.pi * pos[:, 1])
        )
        rows = dense_index(grid, n)
        enc_params = params[model.layout.enc_slice]
        enc.table_view(enc_params, 0, 0)[rows, 0, 0] = v[:, 0]
        enc.table_view(enc_params, 0, 1)[rows, 0, 0] = g[:, 0, 0]
        enc.table_view(enc_params, 0, 1)[rows, 1, 0] = g[:, 1, 0]
        enc.table_view(enc_params, 0, 2)[rows, 0, 0] = mixed
        params[model.layout.offset("mlp/head/W")] = 1.0
        return model, params

    def test_exact_solution_near_zero_residual_loss(self):
        # 1023 cells: 1024^2 vertices exactly fill a 2^20 dense table; the
        # remaining residual is pure Hermite interpolation error of the trig
        # Laplacian, which lands well under the 1e-9 loss bound
        problem = helmholtz2d(1.0)
        model, params = self._populated_exact_model(problem, 1023, 20)
        batch = sample_batch(problem, 400, 0, seed=9)
        batch.conditions = []
        bd, _ = loss_and_grad(model, problem, batch, params, LossWeights())
        assert bd.res < 1e-9

    def test_polynomial_residual_loss_machine_zero(self):
        # a cubic manufactured field is reproduced exactly, so the Laplacian
        # residual against its own source is roundoff only
        from oracles import poly_jet, rand_poly
        from hermfield.encoding import dense_index

        rng = np.random.default_rng(17)
        coef = rand_poly(2, rng)
        cfg = EncodingConfig(
            dim=2, levels=1, table_sizes=(2**8,) * 3, features=1,
            n_min=8, ratio=1.5,
        )
        problem = helmholtz2d(1.0)
        model = make_model(problem, cfg, width=4, depth=0)
        params = np.zeros(model.n_params)
        enc = model.encoding
        n = enc.resolutions[0]
        grid = np.stack(np.meshgrid(*[np.arange(n + 1)] * 2, indexing="ij"), -1)
        grid = grid.reshape(-1, 2)
        pos = grid / n
        from oracles import poly_mixed_partial

        rows = dense_index(grid, n)
        enc_params = params[model.layout.enc_slice]
        enc.table_view(enc_params, 0, 0)[rows, 0, 0] = poly_mixed_partial(coef, (0, 0), pos)
        enc.table_view(enc_params, 0, 1)[rows, 0, 0] = poly_mixed_partial(coef, (1, 0), pos)
        enc.table_view(enc_params, 0, 1)[rows, 1, 0] = poly_mixed_partial(coef, (0, 1), pos)
        enc.table_view(enc_params, 0, 2)[rows, 0, 0] = poly_mixed_partial(coef, (1, 1), pos)
        params[model.layout.offset("mlp/head/W")] = 1.0
        pts = rng.uniform(0, 1, size=(300, 2))
        fjet = model.forward_jet(pts, params)
        v, g, h = poly_jet(coef, pts)
        lap_src = h[:, 0, 0] + h[:, 1, 1]
        res = (fjet.hess[:, 0, 0] + fjet.hess[:, 1, 0] + fjet.value[:, 0]) - (
            lap_src + v
        )
        assert float(np.mean(res**2)) < 1e-16
