"""1D nodal cubic Hermite basis functions and their tensor products.

Two basis functions on the support [-1, 1]:

* value basis   phi0(t) = 2|t|^3 - 3t^2 + 1   (phi0(0)=1, phi0'(0)=0)
* tangent basis phi1(t) = t(|t|-1)^2          (phi1(0)=0, phi1'(0)=1)

Both vanish together with their first derivative at |t|=1, which gives the
piecewise interpolant C1 continuity across cells.  Second derivatives are
piecewise linear and discontinuous at the breakpoints; at t=0 we return the
limit from t>0 and at |t|=1 we return 0 (the exterior value).  Callers that
care about second derivatives are expected to sample off the breakpoints.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "BasisEval",
    "TensorBasisEval",
    "eval_value_basis",
    "eval_tangent_basis",
    "eval_tensor_basis",
    "alpha_multi_indices",
    "order_slices",
    "corner_offsets",
    "tensor_weights",
]


@dataclass(frozen=True)
class BasisEval:
    """Value and first/second derivative of a 1D basis function.

    Derivatives are per unit local coordinate (cell spacing = 1).
    """

    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def eval_value_basis(t) -> BasisEval:
    """Nodal value basis phi0 with phi0(0)=1 and compact support [-1, 1]."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    inside = a <= 1.0
    value = np.where(inside, 2.0 * a**3 - 3.0 * a**2 + 1.0, 0.0)
    d1 = np.where(inside, np.where(t < 0, -1.0, 1.0) * (6.0 * a**2 - 6.0 * a), 0.0)
    # second derivative: open support (|t|<1), right branch at t=0, 0 at |t|>=1
    d2 = np.where(a < 1.0, 12.0 * a - 6.0, 0.0)
    return BasisEval(value=value, d1=d1, d2=d2)


def eval_tangent_basis(t) -> BasisEval:
    """Nodal tangent basis phi1 with phi1'(0)=1 and compact support [-1, 1]."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    inside = a <= 1.0
    value = np.where(inside, t * (a - 1.0) ** 2, 0.0)
    d1 = np.where(inside, 3.0 * a**2 - 4.0 * a + 1.0, 0.0)
    # phi1'' is odd; at t=0 take the limit from t>0 (= -4), 0 at |t|>=1
    sign = np.where(t < 0, -1.0, 1.0)
    d2 = np.where(a < 1.0, sign * (6.0 * a - 4.0), 0.0)
    return BasisEval(value=value, d1=d1, d2=d2)


def alpha_multi_indices(dim: int) -> list[tuple[int, ...]]:
    """All multi-indices in {0,1}^dim, grouped by derivative order.

    Within one order, indices are listed with the differentiated dimensions
    in lexicographic order, e.g. for dim=2: (0,0), (1,0), (0,1), (1,1).
    The order-k block is contiguous so per-order table slots line up with
    positions inside this list.
    """
    out = []
    for k in range(dim + 1):
        for dims in combinations(range(dim), k):
            alpha = [0] * dim
            for i in dims:
                alpha[i] = 1
            out.append(tuple(alpha))
    return out


def order_slices(dim: int) -> list[slice]:
    """Slice of the alpha_multi_indices list covering each derivative order."""
    alphas = alpha_multi_indices(dim)
    slices = []
    start = 0
    for k in range(dim + 1):
        n = sum(1 for a in alphas if sum(a) == k)
        slices.append(slice(start, start + n))
        start += n
    return slices


def corner_offsets(dim: int) -> np.ndarray:
    """The 2^dim cell corner offsets, dimension 0 varying slowest."""
    n = 1 << dim
    out = np.zeros((n, dim), dtype=np.int64)
    for c in range(n):
        for i in range(dim):
            out[c, i] = (c >> (dim - 1 - i)) & 1
    return out


def _basis_tables(local: np.ndarray):
    """Per-dimension 1D basis evaluations at t and t-1.

    Returns (V, D1, D2), each with shape (B, dim, 2, 2): axis 2 selects the
    basis (0=value, 1=tangent), axis 3 the corner offset (argument t or t-1).
    """
    b, dim = local.shape
    V = np.empty((b, dim, 2, 2))
    D1 = np.empty((b, dim, 2, 2))
    D2 = np.empty((b, dim, 2, 2))
    for c in (0, 1):
        arg = local - c
        e0 = eval_value_basis(arg)
        e1 = eval_tangent_basis(arg)
        V[:, :, 0, c], D1[:, :, 0, c], D2[:, :, 0, c] = e0.value, e0.d1, e0.d2
        V[:, :, 1, c], D1[:, :, 1, c], D2[:, :, 1, c] = e1.value, e1.d1, e1.d2
    return V, D1, D2


def tensor_weights(
    local: np.ndarray,
    need_grad: bool = True,
    need_hess: bool = True,
    need_mixed: bool = False,
):
    """Tensor-product basis weights for every (corner, multi-index) pair.

    ``local`` has shape (B, dim) with entries in [0, 1].  Returns
    (w0, w1, w2) in local cell coordinates, where

    * w0: (B, C, A)           interpolation weights,
    * w1: (B, C, A, dim)      first-derivative weights (or None),
    * w2: (B, C, A, dim)      diagonal second-derivative weights, or
          (B, C, A, dim, dim) when ``need_mixed`` (or None),

    with C = A = 2^dim, corners enumerated by :func:`corner_offsets` and
    multi-indices by :func:`alpha_multi_indices`.  The d-dimensional product
    rule is applied by swapping one (or two) 1D value factors for 1D
    derivative factors.
    """
    b, dim = local.shape
    corners = corner_offsets(dim)
    alphas = np.array(alpha_multi_indices(dim), dtype=np.int64)
    ncor, nalp = corners.shape[0], alphas.shape[0]
    V, D1, D2 = _basis_tables(local)

    # factor[i][b, c, a] = table[b, i, alphas[a, i], corners[c, i]]
    def factors(table):
        return [
            table[:, i, alphas[None, :, i], corners[:, None, i]] for i in range(dim)
        ]

    fv = factors(V)
    w0 = np.ones((b, ncor, nalp))
    for i in range(dim):
        w0 *= fv[i]

    w1 = None
    if need_grad or need_hess:
        fd1 = factors(D1)
        w1 = np.empty((b, ncor, nalp, dim))
        for j in range(dim):
            prod = fd1[j].copy()
            for i in range(dim):
                if i != j:
                    prod *= fv[i]
            w1[:, :, :, j] = prod

    w2 = None
    if need_hess:
        fd2 = factors(D2)
        if need_mixed:
            w2 = np.empty((b, ncor, nalp, dim, dim))
            for j in range(dim):
                for k in range(j, dim):
                    prod = (fd2[j] if j == k else fd1[j] * fd1[k]).copy()
                    for i in range(dim):
                        if i != j and i != k:
                            prod *= fv[i]
                    w2[:, :, :, j, k] = prod
                    w2[:, :, :, k, j] = prod
        else:
            w2 = np.empty((b, ncor, nalp, dim))
            for j in range(dim):
                prod = fd2[j].copy()
                for i in range(dim):
                    if i != j:
                        prod *= fv[i]
                w2[:, :, :, j] = prod
    return w0, w1, w2


@dataclass(frozen=True)
class TensorBasisEval:
    """Tensor-product basis values for one query point.

    ``value[c, a]`` is H^(alpha_a) evaluated for corner c; ``grad`` and
    ``hess`` hold its first and second derivatives in local cell
    coordinates.  The Hessian block is symmetric by construction.
    """

    corners: np.ndarray  # (C, dim) int
    alphas: list[tuple[int, ...]]
    value: np.ndarray  # (C, A)
    grad: np.ndarray  # (C, A, dim)
    hess: np.ndarray  # (C, A, dim, dim)


def eval_tensor_basis(local, eps: float = 1e-9) -> TensorBasisEval:
    """Evaluate all tensor-product bases at one point inside a cell.

    ``local`` must lie in [0, 1]^dim up to ``eps``; anything further outside
    indicates a caller indexing bug and raises ValueError.
    """
    local = np.asarray(local, dtype=np.float64)
    if local.ndim != 1:
        raise ValueError("local must be a 1D coordinate vector")
    if np.any(local < -eps) or np.any(local > 1.0 + eps):
        raise ValueError(f"local coordinates {local} outside [0,1]")
    w0, w1, w2 = tensor_weights(local[None, :], need_grad=True, need_hess=True, need_mixed=True)
    return TensorBasisEval(
        corners=corner_offsets(local.size),
        alphas=alpha_multi_indices(local.size),
        value=w0[0],
        grad=w1[0],
        hess=w2[0],
    )
