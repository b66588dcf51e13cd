"""Reference OT solvers used to check the neural barycenter solver.

Exact discrete OT and fixed-support barycenters are linear programs solved
with HiGHS (dual simplex, so solutions are vertices); square uniform
instances go through the Hungarian-type assignment solver instead. Gaussian
quantities use closed forms, and entropic OT uses log-domain Sinkhorn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .errors import ContractError, ConvergenceError, NonFiniteError, OracleInputError

COST_KINDS = ("euclidean", "squared_euclidean")
MAX_LP_SUPPORT = 256
MAX_ASSIGNMENT_SUPPORT = 1024


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    return pts


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support probability measure.

    ``points`` is an ``(n, d)`` array; 1-D input is treated as ``n`` points
    on the line. Weights default to uniform.
    """

    points: np.ndarray
    weights: np.ndarray = None
    strict: bool = False

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise OracleInputError("a distribution needs at least one support point")
        w = (
            np.full(pts.shape[0], 1.0 / pts.shape[0])
            if self.weights is None
            else np.asarray(self.weights, dtype=np.float64).reshape(-1)
        )
        if w.shape[0] != pts.shape[0]:
            raise OracleInputError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise OracleInputError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise OracleInputError(f"weights sum to {w.sum()!r}, expected 1")
        if self.strict and len(np.unique(pts, axis=0)) != len(pts):
            raise OracleInputError("duplicate support points in strict mode")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def uniform(cls, points) -> "DiscreteDistribution":
        return cls(points)

    @classmethod
    def dirac(cls, point) -> "DiscreteDistribution":
        return cls(np.atleast_1d(np.asarray(point, dtype=np.float64)).reshape(1, -1))


@dataclass
class TransportPlan:
    matrix: np.ndarray
    cost: float
    row_duals: np.ndarray | None = None
    col_duals: np.ndarray | None = None


def cost_matrix(x, y, kind: str = "euclidean") -> np.ndarray:
    """Pairwise ground cost between the rows of ``x`` and ``y``."""
    if kind not in COST_KINDS:
        raise OracleInputError(f"unknown cost kind {kind!r}; expected one of {COST_KINDS}")
    x, y = _as_points(x), _as_points(y)
    if x.shape[1] != y.shape[1]:
        raise OracleInputError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    return sq if kind == "squared_euclidean" else np.sqrt(sq)


def _is_uniform_square(mu: DiscreteDistribution, nu: DiscreteDistribution) -> bool:
    return (
        mu.n == nu.n
        and np.allclose(mu.weights, 1.0 / mu.n, rtol=0, atol=1e-15)
        and np.allclose(nu.weights, 1.0 / nu.n, rtol=0, atol=1e-15)
    )


def _transport_lp(a: np.ndarray, b: np.ndarray, C: np.ndarray):
    n, m = C.shape
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()
    res = linprog(
        C.reshape(-1),
        A_eq=A,
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}", iterations=int(res.nit))
    P = np.clip(res.x.reshape(n, m), 0.0, None)
    duals = res.eqlin.marginals
    return P, duals[:n], duals[n:]


def solve_discrete_ot(
    mu: DiscreteDistribution, nu: DiscreteDistribution, cost: str = "euclidean", duals: bool = False
) -> TransportPlan:
    """Exact optimal transport plan between two discrete measures.

    With ``duals=True`` the LP dual potentials ``(u, v)`` with
    ``u_i + v_j <= C_ij`` are attached to the plan.
    """
    if mu.dim != nu.dim:
        raise OracleInputError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    C = cost_matrix(mu.points, nu.points, cost)
    if _is_uniform_square(mu, nu) and not duals:
        if mu.n > MAX_ASSIGNMENT_SUPPORT:
            raise ContractError(f"assignment instances limited to {MAX_ASSIGNMENT_SUPPORT} points")
        r, c = linear_sum_assignment(C)
        P = np.zeros_like(C)
        P[r, c] = 1.0 / mu.n
        return TransportPlan(P, float(C[r, c].sum() / mu.n))
    if max(mu.n, nu.n) > MAX_LP_SUPPORT:
        raise ContractError(f"LP instances limited to {MAX_LP_SUPPORT} support points")
    P, u, v = _transport_lp(mu.weights, nu.weights, C)
    return TransportPlan(P, float((C * P).sum()), u if duals else None, v if duals else None)


def c_transform(f, xs, nu: DiscreteDistribution, cost: str = "euclidean") -> np.ndarray:
    """``f^c(x) = min_j [c(x, y_j) - f_j]`` for each row of ``xs``."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if nu.n == 0:
        raise OracleInputError("empty support")
    if f.shape[0] != nu.n:
        raise OracleInputError(f"{f.shape[0]} potential values for {nu.n} support points")
    if not np.all(np.isfinite(f)):
        raise OracleInputError("potential values must be finite")
    return (cost_matrix(_as_points(xs), nu.points, cost) - f[None, :]).min(axis=1)


def c_transform_discrete(f, mu_point, nu: DiscreteDistribution, cost: str = "euclidean") -> float:
    x = np.atleast_1d(np.asarray(mu_point, dtype=np.float64)).reshape(1, -1)
    return float(c_transform(f, x, nu, cost)[0])


def dual_value_discrete(f, mu: DiscreteDistribution, nu: DiscreteDistribution, cost: str = "euclidean") -> float:
    """Kantorovich dual objective ``E_mu[f^c] + E_nu[f]``."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    return float(mu.weights @ c_transform(f, mu.points, nu, cost) + nu.weights @ f)


# -- Gaussian closed forms ------------------------------------------------------


@dataclass(frozen=True)
class GaussianSpec:
    """Gaussian measure ``N(mean, covariance)``; scalars describe a 1-D law."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).reshape(-1)
        S = np.asarray(self.covariance, dtype=np.float64)
        S = S.reshape(1, 1) if S.ndim < 2 else S
        if S.shape != (m.size, m.size):
            raise OracleInputError(f"covariance shape {S.shape} does not match mean of size {m.size}")
        if not np.all(np.isfinite(S)) or not np.all(np.isfinite(m)):
            raise OracleInputError("non-finite Gaussian parameters")
        if np.max(np.abs(S - S.T)) > 1e-10:
            raise OracleInputError("covariance is not symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-10:
            raise OracleInputError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", (S + S.T) / 2)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_std(cls, mean: float, std: float) -> "GaussianSpec":
        return cls(np.array([mean]), np.array([[std**2]]))


def sqrtm_psd(S: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clamped at zero."""
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2_squared(a: GaussianSpec, b: GaussianSpec) -> float:
    """Squared 2-Wasserstein (Bures-Wasserstein) distance between Gaussians."""
    if a.dim != b.dim:
        raise OracleInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    rb = sqrtm_psd(b.covariance)
    cross = sqrtm_psd(rb @ a.covariance @ rb)
    val = np.sum((a.mean - b.mean) ** 2) + np.trace(a.covariance + b.covariance - 2 * cross)
    return float(max(val, 0.0))


def _check_weights(weights, k: int) -> np.ndarray:
    lam = np.asarray(weights, dtype=np.float64).reshape(-1)
    if lam.size != k:
        raise OracleInputError(f"{lam.size} weights for {k} measures")
    if np.any(lam <= 0) or abs(lam.sum() - 1.0) > 1e-12:
        raise OracleInputError("barycenter weights must be positive and sum to 1")
    return lam


def gaussian_barycenter(
    specs: list[GaussianSpec], weights, max_iter: int = 500, tol: float = 1e-10
) -> GaussianSpec:
    """W2 barycenter of Gaussians via the covariance fixed-point iteration."""
    lam = _check_weights(weights, len(specs))
    if len({s.dim for s in specs}) != 1:
        raise OracleInputError("all Gaussians must share a dimension")
    if len(specs) == 1:
        return specs[0]
    mean = sum(l * s.mean for l, s in zip(lam, specs))
    S = sum(l * s.covariance for l, s in zip(lam, specs))
    residual = np.inf
    for it in range(1, max_iter + 1):
        r = sqrtm_psd(S)
        new = sum(l * sqrtm_psd(r @ s.covariance @ r) for l, s in zip(lam, specs))
        residual = float(np.linalg.norm(new - S))
        S = (new + new.T) / 2
        if residual < tol:
            return GaussianSpec(mean, S)
    raise ConvergenceError(
        f"covariance fixed point did not converge (residual {residual:.3e})",
        iterations=max_iter,
        residual=residual,
    )


def gaussian_map(src: GaussianSpec, dst: GaussianSpec):
    """Monge map between Gaussians as ``(A, b)`` with ``T(x) = A x + b``."""
    rs = sqrtm_psd(src.covariance)
    w, V = np.linalg.eigh(rs)
    if w.min() <= 1e-14:
        raise OracleInputError("source covariance must be nonsingular for the Monge map")
    rs_inv = (V / w) @ V.T
    A = rs_inv @ sqrtm_psd(rs @ dst.covariance @ rs) @ rs_inv
    return A, dst.mean - A @ src.mean


# -- Fixed-support discrete barycenter ------------------------------------------


@dataclass
class BarycenterResult:
    distribution: DiscreteDistribution
    objective: float
    weights_on_grid: np.ndarray
    potentials: np.ndarray = field(repr=False)
    plans: list = field(default_factory=list, repr=False)


def discrete_barycenter_lp(
    mus: list[DiscreteDistribution], weights, candidate_support, cost: str = "squared_euclidean"
) -> BarycenterResult:
    """Exact barycenter over a fixed candidate support.

    Also returns the objective ``L*`` and congruent dual potentials
    ``potentials[k, j] = f_k(grid_j)`` with ``sum_k lam_k f_k = 0`` that
    attain it.
    """
    grid = _as_points(candidate_support)
    lam = _check_weights(weights, len(mus))
    G = grid.shape[0]
    if G > 128:
        raise ContractError("candidate support limited to 128 points")
    if any(mu.n > 64 for mu in mus):
        raise ContractError("each input measure is limited to 64 points")
    costs = [lam[k] * cost_matrix(mu.points, grid, cost) for k, mu in enumerate(mus)]
    sizes = [mu.n * G for mu in mus]
    nvar = sum(sizes) + G
    blocks_rows = []
    b_eq = []
    offset = 0
    for k, mu in enumerate(mus):
        n = mu.n
        left = sparse.csr_matrix((n, offset))
        right = sparse.csr_matrix((n, nvar - offset - n * G))
        blocks_rows.append(sparse.hstack([left, sparse.kron(sparse.eye(n), np.ones((1, G))), right]))
        b_eq.append(mu.weights)
        offset += n * G
    offset = 0
    for k, mu in enumerate(mus):
        n = mu.n
        left = sparse.csr_matrix((G, offset))
        mid = sparse.kron(np.ones((1, n)), sparse.eye(G))
        right = sparse.csr_matrix((G, sum(sizes) - offset - n * G))
        blocks_rows.append(sparse.hstack([left, mid, right, -sparse.eye(G)]))
        b_eq.append(np.zeros(G))
        offset += n * G
    A = sparse.vstack(blocks_rows).tocsr()
    c = np.concatenate([C.reshape(-1) for C in costs] + [np.zeros(G)])
    res = linprog(
        c,
        A_eq=A,
        b_eq=np.concatenate(b_eq),
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ConvergenceError(f"barycenter LP failed: {res.message}", iterations=int(res.nit))
    q = np.clip(res.x[-G:], 0.0, None)
    q = q / q.sum()
    plans = []
    offset = 0
    for mu in mus:
        plans.append(np.clip(res.x[offset : offset + mu.n * G].reshape(mu.n, G), 0.0, None))
        offset += mu.n * G
    marg = res.eqlin.marginals
    n_rows = sum(mu.n for mu in mus)
    g = marg[n_rows:].reshape(len(mus), G)
    g[-1] = -g[:-1].sum(axis=0)
    potentials = g / lam[:, None]
    keep = q > 1e-15
    bary = DiscreteDistribution(grid[keep], q[keep] / q[keep].sum())
    return BarycenterResult(bary, float(res.fun), q, potentials, plans)


# -- Entropic OT ------------------------------------------------------------------


def sinkhorn(
    mu: DiscreteDistribution,
    nu: DiscreteDistribution,
    cost: str = "euclidean",
    epsilon: float = 0.01,
    iters: int = 10000,
    tol: float = 1e-9,
) -> TransportPlan:
    """Entropic OT plan via log-domain Sinkhorn iterations.

    Small ``epsilon`` is reached by epsilon-scaling: the potentials are
    warm-started through a geometric schedule that begins at the cost
    scale. ``iters`` bounds the iterations of each stage.
    """
    if epsilon <= 0:
        raise OracleInputError("epsilon must be positive")
    C = cost_matrix(mu.points, nu.points, cost)
    with np.errstate(divide="ignore"):
        loga, logb = np.log(mu.weights), np.log(nu.weights)
    f = np.zeros(mu.n)
    g = np.zeros(nu.n)
    schedule = []
    eps = max(float(C.max()), epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps /= 4.0
    schedule.append(epsilon)
    err = np.inf
    for stage, eps in enumerate(schedule):
        stage_tol = tol if stage == len(schedule) - 1 else 1e-6
        for _ in range(iters):
            f = -eps * logsumexp((g[None, :] - C) / eps + logb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - C) / eps + loga[:, None], axis=0)
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise NonFiniteError(
                    f"Sinkhorn potentials underflowed at epsilon={eps}; use a larger epsilon"
                )
            P = np.exp((f[:, None] + g[None, :] - C) / eps + loga[:, None] + logb[None, :])
            err = float(np.abs(P.sum(axis=1) - mu.weights).sum())
            if err < stage_tol:
                break
    if err > 1e-6:
        raise ConvergenceError(
            f"Sinkhorn marginal violation {err:.2e} after {iters} iterations", iterations=iters, residual=err
        )
    return TransportPlan(P, float((C * P).sum()), f, g)


def sliced_w2(x: np.ndarray, y: np.ndarray, n_projections: int = 64, seed: int = 0) -> float:
    """Sliced squared-W2 between two point clouds (equal weights per cloud)."""
    x, y = _as_points(x), _as_points(y)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_projections, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px = np.sort(x @ dirs.T, axis=0)
    py = np.sort(y @ dirs.T, axis=0)
    if px.shape[0] != py.shape[0]:
        qs = (np.arange(256) + 0.5) / 256
        px = np.quantile(px, qs, axis=0)
        py = np.quantile(py, qs, axis=0)
    return float(np.mean((px - py) ** 2))
