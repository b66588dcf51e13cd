import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlot.errors import ContractError, OracleInputError
from mlot.oracle import (
    DiscreteDistribution,
    GaussianSpec,
    c_transform_discrete,
    discrete_barycenter_lp,
    dual_value_discrete,
    gaussian_barycenter,
    gaussian_w2_squared,
    sinkhorn,
    sliced_w2,
    solve_discrete_ot,
)


def _pts(*xs):
    return DiscreteDistribution(np.array(xs, dtype=float).reshape(-1, 1))


def _random_instance(rng, n=None, m=None, d=None):
    n = n or int(rng.integers(1, 9))
    m = m or int(rng.integers(1, 9))
    d = d or int(rng.integers(1, 4))
    a = rng.uniform(0.1, 1, n)
    b = rng.uniform(0.1, 1, m)
    mu = DiscreteDistribution(rng.normal(size=(n, d)), a / a.sum())
    nu = DiscreteDistribution(rng.normal(size=(m, d)), b / b.sum())
    return mu, nu


# -- distributions ----------------------------------------------------------------------


def test_distribution_rejects_unnormalized_weights():
    with pytest.raises(OracleInputError):
        DiscreteDistribution(np.zeros((2, 1)) + [[0.0], [1.0]], np.array([0.6, 0.6]))


def test_distribution_rejects_negative_weights():
    with pytest.raises(OracleInputError):
        DiscreteDistribution(np.array([[0.0], [1.0]]), np.array([1.5, -0.5]))


# -- exact OT ---------------------------------------------------------------------------


def test_ot_identity_plan_is_diagonal():
    mu = DiscreteDistribution(np.array([[0.0], [1.0], [5.0]]), np.array([0.2, 0.3, 0.5]))
    plan = solve_discrete_ot(mu, mu)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.matrix, np.diag(mu.weights), atol=1e-12)


def test_ot_euclidean_example():
    plan = solve_discrete_ot(_pts(0, 1), _pts(0, 3), "euclidean")
    assert plan.cost == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(plan.matrix, [[0.5, 0], [0, 0.5]])


def test_ot_squared_example():
    assert solve_discrete_ot(_pts(0, 1), _pts(0, 3), "squared_euclidean").cost == pytest.approx(2.0, abs=1e-12)


def test_ot_lp_path_matches_assignment_path(rng):
    mu = DiscreteDistribution(rng.normal(size=(6, 2)))
    nu = DiscreteDistribution(rng.normal(size=(6, 2)))
    fast = solve_discrete_ot(mu, nu, "squared_euclidean")
    lp = solve_discrete_ot(mu, nu, "squared_euclidean", duals=True)
    assert fast.cost == pytest.approx(lp.cost, abs=1e-10)


def test_ot_marginals(rng):
    for _ in range(20):
        mu, nu = _random_instance(rng)
        P = solve_discrete_ot(mu, nu).matrix
        assert np.allclose(P.sum(axis=1), mu.weights, atol=1e-9)
        assert np.allclose(P.sum(axis=0), nu.weights, atol=1e-9)
        assert P.min() >= 0


def test_ot_dimension_mismatch():
    with pytest.raises(OracleInputError):
        solve_discrete_ot(DiscreteDistribution(np.zeros((1, 2))), DiscreteDistribution(np.zeros((1, 1))))


def test_ot_size_limit():
    big = DiscreteDistribution(np.arange(300.0).reshape(-1, 1), np.r_[np.full(299, 0.5 / 299), 0.5])
    with pytest.raises(ContractError):
        solve_discrete_ot(big, big)


# -- c-transform and dual ---------------------------------------------------------------


def test_c_transform_examples():
    nu = _pts(0, 3)
    assert c_transform_discrete([0.0, 0.0], [0.0], nu) == 0.0
    assert c_transform_discrete([0.0, 0.0], [1.0], nu) == 1.0
    assert c_transform_discrete([0.0, 2.0], [1.0], nu) == 0.0


def test_c_transform_rejects_nonfinite_potential():
    with pytest.raises(OracleInputError):
        c_transform_discrete([np.inf, 0.0], [1.0], _pts(0, 3))


def test_dual_zero_potential_is_nearest_neighbour_cost(rng):
    mu, nu = _random_instance(rng)
    d0 = dual_value_discrete(np.zeros(nu.n), mu, nu)
    nn = np.linalg.norm(mu.points[:, None] - nu.points[None], axis=-1).min(axis=1)
    assert d0 == pytest.approx(mu.weights @ nn, abs=1e-12)
    assert d0 <= solve_discrete_ot(mu, nu).cost + 1e-9


def test_lp_duals_attain_primal_and_are_shift_invariant(rng):
    mu, nu = _random_instance(rng, 5, 4, 2)
    plan = solve_discrete_ot(mu, nu, duals=True)
    f = plan.col_duals
    assert dual_value_discrete(f, mu, nu) == pytest.approx(plan.cost, abs=1e-8)
    assert dual_value_discrete(f + 3.7, mu, nu) == pytest.approx(plan.cost, abs=1e-8)


@pytest.mark.parametrize("cost", ["euclidean", "squared_euclidean"])
def test_weak_and_strong_duality_over_random_instances(cost):
    rng = np.random.default_rng(7)
    for _ in range(100):
        mu, nu = _random_instance(rng)
        plan = solve_discrete_ot(mu, nu, cost, duals=True)
        for _ in range(10):
            f = rng.normal(scale=2.0, size=nu.n)
            assert dual_value_discrete(f, mu, nu, cost) <= plan.cost + 1e-9
        assert abs(dual_value_discrete(plan.col_duals, mu, nu, cost) - plan.cost) <= 1e-8


def test_ot_matches_permutation_enumeration(rng):
    for _ in range(10):
        n = int(rng.integers(1, 6))
        mu = DiscreteDistribution(rng.normal(size=(n, 2)))
        nu = DiscreteDistribution(rng.normal(size=(n, 2)))
        C = np.linalg.norm(mu.points[:, None] - nu.points[None], axis=-1)
        best = min(C[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))
        assert solve_discrete_ot(mu, nu).cost == pytest.approx(best, abs=1e-9)


# -- Gaussians --------------------------------------------------------------------------


def test_gaussian_w2_examples():
    a = GaussianSpec.from_std(0.0, 1.0)
    assert gaussian_w2_squared(a, a) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_w2_squared(a, GaussianSpec.from_std(4.0, 1.0)) == pytest.approx(16.0)
    assert gaussian_w2_squared(a, GaussianSpec.from_std(0.0, 3.0)) == pytest.approx(4.0)


def test_gaussian_rejects_non_psd():
    with pytest.raises(OracleInputError):
        GaussianSpec(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


@st.composite
def _spd(draw, d=2):
    vals = draw(st.lists(st.floats(-2, 2), min_size=d * d, max_size=d * d))
    M = np.array(vals).reshape(d, d)
    return M @ M.T + 0.1 * np.eye(d)


@given(_spd(), _spd(), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_gaussian_w2_symmetric_nonnegative(Sa, Sb, m):
    a = GaussianSpec(np.array(m[:2]), Sa)
    b = GaussianSpec(np.array(m[2:]), Sb)
    ab, ba = gaussian_w2_squared(a, b), gaussian_w2_squared(b, a)
    assert ab >= -1e-9
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-8)


def test_gaussian_w2_against_empirical_ot():
    from mlot.synth import quantile_gaussian_sample

    rng = np.random.default_rng(3)
    for _ in range(5):
        a = GaussianSpec.from_std(rng.uniform(-2, 2), rng.uniform(0.5, 2))
        b = GaussianSpec.from_std(float(a.mean[0] + rng.uniform(-2, 2)), rng.uniform(0.5, 2))
        xa, xb = quantile_gaussian_sample(a, 512), quantile_gaussian_sample(b, 512)
        emp = solve_discrete_ot(DiscreteDistribution(xa), DiscreteDistribution(xb), "squared_euclidean").cost
        exact = gaussian_w2_squared(a, b)
        assert emp == pytest.approx(exact, rel=0.02, abs=1e-3)


def test_gaussian_barycenter_examples():
    a = GaussianSpec.from_std(0.0, 1.0)
    assert gaussian_barycenter([a], [1.0]) == a
    g = gaussian_barycenter([a, GaussianSpec.from_std(4.0, 1.0)], [0.5, 0.5])
    assert g.mean[0] == pytest.approx(2.0) and g.covariance[0, 0] == pytest.approx(1.0)
    g = gaussian_barycenter([a, GaussianSpec.from_std(0.0, 3.0)], [0.5, 0.5])
    assert g.covariance[0, 0] == pytest.approx(4.0)


def test_gaussian_barycenter_is_locally_minimal():
    rng = np.random.default_rng(5)
    specs = [GaussianSpec.from_std(rng.normal(), rng.uniform(0.5, 2)) for _ in range(3)]
    lam = np.array([0.2, 0.3, 0.5])
    g = gaussian_barycenter(specs, lam)

    def obj(m, s):
        q = GaussianSpec.from_std(m, s)
        return sum(w * gaussian_w2_squared(p, q) for w, p in zip(lam, specs))

    m0, s0 = g.mean[0], np.sqrt(g.covariance[0, 0])
    base = obj(m0, s0)
    for dm, ds in [(1e-4, 0), (-1e-4, 0), (0, 1e-4), (0, -1e-4)]:
        assert obj(m0 + dm, s0 + ds) >= base - 1e-12
        assert abs(obj(m0 + dm, s0 + ds) - base) <= 1e-6


def test_gaussian_barycenter_2d_fixed_point():
    A = GaussianSpec(np.zeros(2), np.array([[2.0, 0.5], [0.5, 1.0]]))
    B = GaussianSpec(np.ones(2), np.array([[1.0, -0.3], [-0.3, 3.0]]))
    g = gaussian_barycenter([A, B], [0.4, 0.6])
    from mlot.oracle import sqrtm_psd

    r = sqrtm_psd(g.covariance)
    fixed = sum(w * sqrtm_psd(r @ s.covariance @ r) for w, s in zip([0.4, 0.6], [A, B]))
    assert np.allclose(fixed, g.covariance, atol=1e-8)


# -- barycenter LP ----------------------------------------------------------------------


def test_barycenter_identical_inputs():
    mu = DiscreteDistribution(np.array([[1.0], [3.0]]), np.array([0.25, 0.75]))
    res = discrete_barycenter_lp([mu, mu], [0.5, 0.5], np.arange(5.0))
    assert res.objective == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(res.distribution.points.ravel(), [1, 3])
    assert np.allclose(res.distribution.weights, [0.25, 0.75])


@pytest.mark.parametrize("lam, where, obj", [((0.5, 0.5), 2.0, 4.0), ((0.75, 0.25), 1.0, 3.0)])
def test_barycenter_two_diracs(lam, where, obj):
    res = discrete_barycenter_lp([_pts(0), _pts(4)], lam, np.arange(5.0))
    assert res.objective == pytest.approx(obj, abs=1e-9)
    assert res.distribution.points.ravel().tolist() == [where]


def test_barycenter_objective_consistency_and_congruent_potentials(rng):
    mus = [DiscreteDistribution(rng.integers(0, 7, size=(3, 1)).astype(float) + rng.normal(0, 0.1, (3, 1)))
           for _ in range(3)]
    lam = np.array([0.2, 0.5, 0.3])
    grid = np.linspace(-1, 7, 17)
    res = discrete_barycenter_lp(mus, lam, grid)
    recomputed = sum(w * solve_discrete_ot(mu, res.distribution, "squared_euclidean").cost
                     for w, mu in zip(lam, mus))
    assert res.objective == pytest.approx(recomputed, abs=1e-8)
    assert np.allclose(lam @ res.potentials, 0.0, atol=1e-12)
    grid_nu = DiscreteDistribution(grid.reshape(-1, 1))
    from mlot.oracle import c_transform

    dual = sum(w * mu.weights @ c_transform(f, mu.points, grid_nu, "squared_euclidean")
               for w, mu, f in zip(lam, mus, res.potentials))
    assert dual == pytest.approx(res.objective, abs=1e-8)


def test_barycenter_limits():
    with pytest.raises(ContractError):
        discrete_barycenter_lp([_pts(0)], [1.0], np.arange(200.0))


# -- Sinkhorn ---------------------------------------------------------------------------


def test_sinkhorn_identity():
    mu = _pts(0, 1, 2, 3)
    plan = sinkhorn(mu, mu, "euclidean", epsilon=0.01)
    assert plan.cost <= 0.05 * 3


def test_sinkhorn_example_and_marginals():
    mu, nu = _pts(0, 1), _pts(0, 3)
    plan = sinkhorn(mu, nu, "euclidean", epsilon=1e-3)
    assert abs(plan.cost - 1.0) < 0.02
    assert np.abs(plan.matrix.sum(axis=1) - mu.weights).sum() <= 1e-6


def test_sinkhorn_gap_shrinks_with_epsilon(rng):
    mu, nu = _random_instance(rng, 6, 5, 2)
    exact = solve_discrete_ot(mu, nu).cost
    gaps = [sinkhorn(mu, nu, "euclidean", epsilon=e).cost - exact for e in (0.1, 0.01, 0.001)]
    assert gaps[0] > gaps[1] > gaps[2] >= -1e-9


def test_sinkhorn_rejects_nonpositive_epsilon():
    with pytest.raises(OracleInputError):
        sinkhorn(_pts(0), _pts(1), epsilon=0.0)


# -- sliced W2 --------------------------------------------------------------------------


def test_sliced_w2_zero_for_identical_clouds(rng):
    x = rng.normal(size=(50, 3))
    assert sliced_w2(x, x) == 0.0


def test_sliced_w2_shift_1d():
    x = np.linspace(0, 1, 100).reshape(-1, 1)
    assert sliced_w2(x, x + 2.0) == pytest.approx(4.0)
