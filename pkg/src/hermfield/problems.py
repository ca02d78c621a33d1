"""Analytic PDE benchmarks: residuals on jets, conditions, exact solutions.

Each problem owns a physical box (mapped to the unit cube by the model), a
residual operator acting on (value, gradient, diagonal Hessian) jets in
physical coordinates, the matching hand-written cotangent rule, condition
sets (boundary / initial / data, plus periodic pairs), and the manufactured
exact solution with whatever derivatives the residual consumes.  Time is an
ordinary input dimension, always last.
"""

import numpy as np
from scipy.optimize import minimize_scalar

__all__ = [
    "ConditionSet",
    "PeriodicPairSet",
    "PdeProblem",
    "helmholtz2d",
    "helmholtz3d",
    "convection1p1d",
    "taylor_green",
    "flow_mixing",
    "make_problem",
    "eval_grid_points",
    "relative_l2",
]


class ConditionSet:
    """A soft constraint u[channels](points) = target(points)."""

    def __init__(self, name, kind, channels, sampler, target, weight=1.0):
        self.name = name
        self.kind = kind  # 'bc' | 'ic' | 'data'
        self.channels = tuple(channels)
        self.sample = sampler  # (n, rng) -> (n, dim) physical points
        self.target = target  # points -> (n, len(channels))
        self.weight = weight


class PeriodicPairSet:
    """A soft pairing u[channels](a) = u[channels](b) for paired points."""

    def __init__(self, name, channels, sampler, weight=1.0):
        self.name = name
        self.kind = "bc"
        self.channels = tuple(channels)
        self.sample = sampler  # (n, rng) -> ((n, dim), (n, dim))
        self.weight = weight


class PdeProblem:
    name: str
    dim: int
    out_dim: int
    n_res: int
    needs_hessian: bool

    def __init__(self, box_lo, box_hi):
        self.box_lo = np.asarray(box_lo, dtype=np.float64)
        self.box_hi = np.asarray(box_hi, dtype=np.float64)
        self.condition_sets: list = []
        self.params: dict = {}
        self.default_counts: dict = {}
        self.eval_shape: tuple = ()

    # jets are physical-coordinate arrays: value (B, m), grad (B, dim, m),
    # hess (B, dim, m) diagonal
    def residual(self, x, value, grad, hess):
        raise NotImplementedError

    def residual_backward(self, x, value, grad, hess, rbar):
        raise NotImplementedError

    def exact_value(self, x):
        raise NotImplementedError

    def exact_jet(self, x):
        """Closed-form (value, grad, hess-diag) of the exact solution."""
        raise NotImplementedError


def _uniform_box(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)

    def sample(n, rng):
        return lo + (hi - lo) * rng.uniform(size=(n, lo.size))

    return sample


class _Helmholtz(PdeProblem):
    """lap(u) + k^2 u = f on a unit box, Dirichlet data from the separable
    sine product solution (the source (k^2 - sum a_i^2 pi^2) u* belongs to
    this sign convention)."""

    needs_hessian = True
    n_res = 1
    out_dim = 1

    def __init__(self, freqs, k=1.0):
        dim = len(freqs)
        super().__init__([0.0] * dim, [1.0] * dim)
        self.name = f"helmholtz{dim}d"
        self.dim = dim
        self.freqs = np.asarray(freqs, dtype=np.float64)
        self.k = float(k)
        self.params = {"a": list(self.freqs), "k": self.k}
        self._src_coef = self.k**2 - np.pi**2 * float(np.sum(self.freqs**2))
        for i in range(dim):
            for side in (0.0, 1.0):
                lo = self.box_lo.copy()
                hi = self.box_hi.copy()
                lo[i] = hi[i] = side
                self.condition_sets.append(
                    ConditionSet(
                        name=f"edge_x{i}_{int(side)}",
                        kind="bc",
                        channels=(0,),
                        sampler=_uniform_box(lo, hi),
                        target=lambda p: self.exact_value(p),
                    )
                )
        self.default_counts = {"interior": 10000, "boundary": 5000}
        self.eval_shape = (256, 256) if dim == 2 else (64, 64, 64)

    def _sines(self, x):
        return np.sin(np.pi * self.freqs[None, :] * x)

    def exact_value(self, x):
        return np.prod(self._sines(x), axis=1, keepdims=True)

    def source(self, x):
        return self._src_coef * self.exact_value(x)

    def residual(self, x, value, grad, hess):
        lap = hess.sum(axis=1)
        return lap + self.k**2 * value - self.source(x)

    def residual_backward(self, x, value, grad, hess, rbar):
        vbar = self.k**2 * rbar
        hbar = np.repeat(rbar[:, None, :], self.dim, axis=1)
        return vbar, None, hbar

    def exact_jet(self, x):
        s = self._sines(x)
        c = np.cos(np.pi * self.freqs[None, :] * x)
        u = np.prod(s, axis=1)
        grad = np.empty((x.shape[0], self.dim, 1))
        hess = np.empty((x.shape[0], self.dim, 1))
        for i in range(self.dim):
            others = np.prod(np.delete(s, i, axis=1), axis=1)
            grad[:, i, 0] = np.pi * self.freqs[i] * c[:, i] * others
            hess[:, i, 0] = -((np.pi * self.freqs[i]) ** 2) * s[:, i] * others
        return u[:, None], grad, hess


class _Convection(PdeProblem):
    """u_t + c u_x = 0 on x in [0, 2pi], t in [0, 1]; coordinates (x, t)."""

    needs_hessian = False
    n_res = 1
    out_dim = 1
    dim = 2

    def __init__(self, c):
        super().__init__([0.0, 0.0], [2.0 * np.pi, 1.0])
        if c < 0:
            raise ValueError("wave speed must be nonnegative")
        self.name = "convection"
        self.c = float(c)
        self.params = {"c": self.c}

        def ic_sampler(n, rng):
            pts = np.zeros((n, 2))
            pts[:, 0] = rng.uniform(0.0, 2.0 * np.pi, size=n)
            return pts

        def pair_sampler(n, rng):
            t = rng.uniform(0.0, 1.0, size=n)
            a = np.column_stack([np.zeros(n), t])
            b = np.column_stack([np.full(n, 2.0 * np.pi), t])
            return a, b

        self.condition_sets = [
            ConditionSet(
                "initial", "ic", (0,), ic_sampler,
                target=lambda p: np.sin(p[:, :1]),
            ),
            PeriodicPairSet("periodic_x", (0,), pair_sampler),
        ]
        self.default_counts = {"interior": 10000, "initial": 5000, "boundary": 5000}
        self.eval_shape = (256, 256)

    def exact_value(self, x):
        return np.sin(x[:, :1] - self.c * x[:, 1:2])

    def residual(self, x, value, grad, hess):
        return grad[:, 1, :] + self.c * grad[:, 0, :]

    def residual_backward(self, x, value, grad, hess, rbar):
        gbar = np.zeros((x.shape[0], 2, 1))
        gbar[:, 1, :] = rbar
        gbar[:, 0, :] = self.c * rbar
        return None, gbar, None

    def exact_jet(self, x):
        phase = x[:, :1] - self.c * x[:, 1:2]
        u = np.sin(phase)
        cph = np.cos(phase)
        grad = np.stack([cph, -self.c * cph], axis=1)
        hess = np.stack([-u, -(self.c**2) * u], axis=1)
        return u, grad, hess


class _TaylorGreen(PdeProblem):
    """2D incompressible Navier-Stokes with the decaying vortex solution.

    Coordinates (x, y, t) on [0,2pi]^2 x [0,1]; outputs (u, v, p).  The
    pressure gauge is pinned softly at one spatial reference point.
    """

    needs_hessian = True
    n_res = 3
    out_dim = 3
    dim = 3

    def __init__(self, nu):
        super().__init__([0.0, 0.0, 0.0], [2.0 * np.pi, 2.0 * np.pi, 1.0])
        if nu <= 0:
            raise ValueError("viscosity must be positive")
        self.name = "taylor_green"
        self.nu = float(nu)
        self.params = {"nu": self.nu}

        def ic_sampler(n, rng):
            pts = np.zeros((n, 3))
            pts[:, :2] = rng.uniform(0.0, 2.0 * np.pi, size=(n, 2))
            return pts

        def pin_sampler(n, rng):
            pts = np.empty((n, 3))
            pts[:, 0] = np.pi / 2
            pts[:, 1] = np.pi / 2
            pts[:, 2] = rng.uniform(0.0, 1.0, size=n)
            return pts

        self.condition_sets = [
            ConditionSet(
                "initial", "ic", (0, 1), ic_sampler,
                target=lambda p: self.exact_value(p)[:, :2],
            ),
            ConditionSet(
                "pressure_pin", "data", (2,), pin_sampler,
                target=lambda p: self.exact_value(p)[:, 2:3],
                weight=0.1,
            ),
        ]
        self.default_counts = {"interior": 20000, "initial": 5000, "data": 256}
        self.eval_shape = (128, 128, 16)

    def exact_value(self, x):
        e2 = np.exp(-2.0 * self.nu * x[:, 2])
        e4 = e2 * e2
        u = -np.cos(x[:, 0]) * np.sin(x[:, 1]) * e2
        v = np.sin(x[:, 0]) * np.cos(x[:, 1]) * e2
        p = -0.25 * (np.cos(2 * x[:, 0]) + np.cos(2 * x[:, 1])) * e4
        return np.column_stack([u, v, p])

    def residual(self, x, value, grad, hess):
        u, v = value[:, 0], value[:, 1]
        ux, uy, ut = grad[:, 0, 0], grad[:, 1, 0], grad[:, 2, 0]
        vx, vy, vt = grad[:, 0, 1], grad[:, 1, 1], grad[:, 2, 1]
        px, py = grad[:, 0, 2], grad[:, 1, 2]
        lap_u = hess[:, 0, 0] + hess[:, 1, 0]
        lap_v = hess[:, 0, 1] + hess[:, 1, 1]
        r0 = ut + u * ux + v * uy + px - self.nu * lap_u
        r1 = vt + u * vx + v * vy + py - self.nu * lap_v
        r2 = ux + vy
        return np.column_stack([r0, r1, r2])

    def residual_backward(self, x, value, grad, hess, rbar):
        u, v = value[:, 0], value[:, 1]
        ux, uy = grad[:, 0, 0], grad[:, 1, 0]
        vx, vy = grad[:, 0, 1], grad[:, 1, 1]
        r0, r1, r2 = rbar[:, 0], rbar[:, 1], rbar[:, 2]
        vbar = np.zeros_like(value)
        vbar[:, 0] = r0 * ux + r1 * vx
        vbar[:, 1] = r0 * uy + r1 * vy
        gbar = np.zeros_like(grad)
        gbar[:, 0, 0] = r0 * u + r2
        gbar[:, 1, 0] = r0 * v
        gbar[:, 2, 0] = r0
        gbar[:, 0, 1] = r1 * u
        gbar[:, 1, 1] = r1 * v + r2
        gbar[:, 2, 1] = r1
        gbar[:, 0, 2] = r0
        gbar[:, 1, 2] = r1
        hbar = np.zeros_like(hess)
        hbar[:, 0, 0] = -self.nu * r0
        hbar[:, 1, 0] = -self.nu * r0
        hbar[:, 0, 1] = -self.nu * r1
        hbar[:, 1, 1] = -self.nu * r1
        return vbar, gbar, hbar

    def exact_jet(self, x):
        cx, sx = np.cos(x[:, 0]), np.sin(x[:, 0])
        cy, sy = np.cos(x[:, 1]), np.sin(x[:, 1])
        e2 = np.exp(-2.0 * self.nu * x[:, 2])
        e4 = e2 * e2
        value = self.exact_value(x)
        b = x.shape[0]
        grad = np.zeros((b, 3, 3))
        hess = np.zeros((b, 3, 3))
        # u = -cx sy e2
        grad[:, 0, 0] = sx * sy * e2
        grad[:, 1, 0] = -cx * cy * e2
        grad[:, 2, 0] = 2.0 * self.nu * cx * sy * e2
        hess[:, 0, 0] = cx * sy * e2
        hess[:, 1, 0] = cx * sy * e2
        hess[:, 2, 0] = -4.0 * self.nu**2 * cx * sy * e2
        # v = sx cy e2
        grad[:, 0, 1] = cx * cy * e2
        grad[:, 1, 1] = -sx * sy * e2
        grad[:, 2, 1] = -2.0 * self.nu * sx * cy * e2
        hess[:, 0, 1] = -sx * cy * e2
        hess[:, 1, 1] = -sx * cy * e2
        hess[:, 2, 1] = 4.0 * self.nu**2 * sx * cy * e2
        # p = -1/4 (cos 2x + cos 2y) e4
        grad[:, 0, 2] = 0.5 * np.sin(2 * x[:, 0]) * e4
        grad[:, 1, 2] = 0.5 * np.sin(2 * x[:, 1]) * e4
        grad[:, 2, 2] = self.nu * (np.cos(2 * x[:, 0]) + np.cos(2 * x[:, 1])) * e4
        hess[:, 0, 2] = np.cos(2 * x[:, 0]) * e4
        hess[:, 1, 2] = np.cos(2 * x[:, 1]) * e4
        hess[:, 2, 2] = -4.0 * self.nu**2 * (
            np.cos(2 * x[:, 0]) + np.cos(2 * x[:, 1])
        ) * e4
        return value, grad, hess


class _FlowMixing(PdeProblem):
    """Rotational transport u_t + a u_x + b u_y = 0 with radius-dependent
    angular velocity; coordinates (x, y, t) on [-4,4]^2 x [0,4]."""

    needs_hessian = False
    n_res = 1
    out_dim = 1
    dim = 3

    def __init__(self, v_max=None):
        super().__init__([-4.0, -4.0, 0.0], [4.0, 4.0, 4.0])
        self.name = "flow_mixing"
        if v_max is None:
            opt = minimize_scalar(
                lambda r: -np.tanh(r) / np.cosh(r) ** 2, bounds=(1e-6, 4.0),
                method="bounded",
            )
            v_max = -float(opt.fun)
        self.v_max = float(v_max)
        self.params = {"v_max": self.v_max}

        def ic_sampler(n, rng):
            pts = np.zeros((n, 3))
            pts[:, :2] = rng.uniform(-4.0, 4.0, size=(n, 2))
            return pts

        self.condition_sets = [
            ConditionSet(
                "initial", "ic", (0,), ic_sampler,
                target=lambda p: self.exact_value(p),
            )
        ]
        for i in range(2):
            for side in (-4.0, 4.0):
                lo = self.box_lo.copy()
                hi = self.box_hi.copy()
                lo[i] = hi[i] = side
                self.condition_sets.append(
                    ConditionSet(
                        name=f"edge_x{i}_{'lo' if side < 0 else 'hi'}",
                        kind="bc",
                        channels=(0,),
                        sampler=_uniform_box(lo, hi),
                        target=lambda p: self.exact_value(p),
                    )
                )
        self.default_counts = {"interior": 50000, "initial": 10000, "boundary": 3000}
        self.eval_shape = (128, 128, 16)

    def _vt(self, r):
        return np.tanh(r) / np.cosh(r) ** 2

    def velocity(self, x):
        """Advection field (a, b); zero at the rotation center."""
        r = np.hypot(x[:, 0], x[:, 1])
        safe = np.where(r < 1e-12, 1.0, r)
        vt = self._vt(r) / self.v_max
        a = np.where(r < 1e-12, 0.0, -vt * x[:, 1] / safe)
        b = np.where(r < 1e-12, 0.0, vt * x[:, 0] / safe)
        return a, b

    def _omega(self, r):
        """Angular velocity (v_t/v_max)/r with its analytic r->0 limit."""
        small = r < 1e-7
        safe = np.where(small, 1.0, r)
        return np.where(small, 1.0 / self.v_max, self._vt(safe) / (self.v_max * safe))

    def exact_value(self, x):
        om = self._omega(np.hypot(x[:, 0], x[:, 1]))
        ph = om * x[:, 2]
        q = 0.5 * (x[:, 1] * np.cos(ph) - x[:, 0] * np.sin(ph))
        return -np.tanh(q)[:, None]

    def residual(self, x, value, grad, hess):
        a, b = self.velocity(x)
        return grad[:, 2, :] + a[:, None] * grad[:, 0, :] + b[:, None] * grad[:, 1, :]

    def residual_backward(self, x, value, grad, hess, rbar):
        a, b = self.velocity(x)
        gbar = np.zeros_like(grad)
        gbar[:, 2, :] = rbar
        gbar[:, 0, :] = a[:, None] * rbar
        gbar[:, 1, :] = b[:, None] * rbar
        return None, gbar, None

    def exact_jet(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        t = x[:, 2]
        om = self._omega(r)
        small = r < 1e-7
        safe = np.where(small, 1.0, r)
        # d/dr of vt/(v_max r); even in r so the limit at 0 is 0
        vt = self._vt(safe)
        vtp = (1.0 / np.cosh(safe) ** 4) - 2.0 * np.tanh(safe) ** 2 / np.cosh(safe) ** 2
        omp = np.where(small, 0.0, (vtp * safe - vt) / (self.v_max * safe**2))
        om_x = omp * np.where(small, 0.0, x[:, 0] / safe)
        om_y = omp * np.where(small, 0.0, x[:, 1] / safe)
        ph = om * t
        cph, sph = np.cos(ph), np.sin(ph)
        s = x[:, 1] * sph + x[:, 0] * cph
        q = 0.5 * (x[:, 1] * cph - x[:, 0] * sph)
        q_x = -0.5 * sph - 0.5 * t * om_x * s
        q_y = 0.5 * cph - 0.5 * t * om_y * s
        q_t = -0.5 * om * s
        sech2 = 1.0 / np.cosh(q) ** 2
        value = -np.tanh(q)[:, None]
        grad = np.stack([-sech2 * q_x, -sech2 * q_y, -sech2 * q_t], axis=1)[:, :, None]
        return value, grad, None


def helmholtz2d(a1: float, a2: float | None = None, k: float = 1.0) -> PdeProblem:
    if a1 <= 0:
        raise ValueError("frequency must be positive")
    return _Helmholtz([a1, a1 if a2 is None else a2], k=k)


def helmholtz3d(a: float, k: float = 1.0) -> PdeProblem:
    if a <= 0:
        raise ValueError("frequency must be positive")
    return _Helmholtz([a, a, a], k=k)


def convection1p1d(c: float) -> PdeProblem:
    return _Convection(c)


def taylor_green(nu: float) -> PdeProblem:
    return _TaylorGreen(nu)


def flow_mixing(v_max: float | None = None) -> PdeProblem:
    return _FlowMixing(v_max)


def make_problem(name: str, **params) -> PdeProblem:
    factory = {
        "helmholtz2d": helmholtz2d,
        "helmholtz3d": helmholtz3d,
        "convection": convection1p1d,
        "taylor_green": taylor_green,
        "flow_mixing": flow_mixing,
    }
    if name not in factory:
        raise ValueError(f"unknown problem {name!r}")
    return factory[name](**params)


def eval_grid_points(
    problem: PdeProblem, shape=None, seed: int = 20_260_809, jitter: float = 0.45
) -> np.ndarray:
    """Uniform evaluation grid, jittered off every level's lattice lines."""
    shape = tuple(shape) if shape else problem.eval_shape
    if len(shape) != problem.dim:
        raise ValueError(f"grid shape {shape} does not match dim {problem.dim}")
    rng = np.random.default_rng(seed)
    axes = [np.arange(n) for n in shape]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.dim)
    u = (mesh + 0.5 + rng.uniform(-jitter, jitter, size=mesh.shape)) / np.asarray(shape)
    return problem.box_lo + u * (problem.box_hi - problem.box_lo)


def relative_l2(
    field_fn,
    problem: PdeProblem,
    shape=None,
    seed: int = 20_260_809,
    chunk: int = 65536,
) -> float:
    """||pred - exact||_2 / ||exact||_2 over the jittered evaluation grid."""
    pts = eval_grid_points(problem, shape, seed)
    num = 0.0
    den = 0.0
    for lo in range(0, pts.shape[0], chunk):
        block = pts[lo : lo + chunk]
        pred = np.asarray(field_fn(block), dtype=np.float64)
        exact = problem.exact_value(block)
        num += float(np.sum((pred - exact) ** 2))
        den += float(np.sum(exact**2))
    if den == 0.0:
        raise ValueError("exact solution has zero norm on the evaluation grid")
    return float(np.sqrt(num / den))
