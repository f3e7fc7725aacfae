import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyncov.estimation import (
    ConstraintConfig,
    FactorEstimate,
    FitOptions,
    SampleSet,
    default_step_size,
    fit,
    grad_a,
    grad_v,
    objective,
    sample_covariances,
    spectral_init,
)
from dyncov.exceptions import DataError, InvalidParameterError, RankDeficiencyError
from dyncov.kernels import KernelSpec, basis_for
from dyncov.metrics import dist_squared

from oracles import naive_objective
from regimes import oracle_config, small_dynamics

seeds = st.integers(0, 2**32 - 1)


def random_instance(rng, P=6, K=2, J=5, N=4):
    x = rng.standard_normal((N, J, P))
    V = rng.standard_normal((P, K))
    A = rng.uniform(0.1, 2.0, (K, J))
    return FactorEstimate(V, A), SampleSet(x).S


def fd_gradients(Z, S, h_scale=1e-5):
    """Central differences of the objective in every coordinate of V and A."""
    out = []
    for name in ("V", "A"):
        M = getattr(Z, name)
        h = h_scale * max(1.0, np.abs(M).max())
        g = np.zeros_like(M)
        for idx in np.ndindex(M.shape):
            plus, minus = Z.copy(), Z.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            g[idx] = (objective(plus, S) - objective(minus, S)) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# samples and covariances


def test_covariance_single_unit_vector():
    x = np.zeros((1, 3, 4))
    x[0, :, 0] = 1.0
    S = sample_covariances(SampleSet(x))
    E = np.zeros((4, 4))
    E[0, 0] = 1.0
    np.testing.assert_array_equal(S, np.broadcast_to(E, (3, 4, 4)))


def test_covariance_zeros():
    np.testing.assert_array_equal(SampleSet(np.zeros((2, 3, 4))).S, 0.0)


def test_covariance_naive_oracle(rng):
    x = rng.standard_normal((5, 7, 3))
    S = sample_covariances(SampleSet(x))
    for j in range(7):
        ref = np.zeros((3, 3))
        for n in range(5):
            for p in range(3):
                for q in range(3):
                    ref[p, q] += x[n, j, p] * x[n, j, q] / 5
        np.testing.assert_allclose(S[j], ref, rtol=0, atol=1e-12)


@given(seed=seeds, N=st.integers(1, 6), J=st.integers(1, 5), P=st.integers(1, 6))
def test_covariances_symmetric_psd(seed, N, J, P):
    S = SampleSet(np.random.default_rng(seed).standard_normal((N, J, P))).S
    np.testing.assert_array_equal(S, np.swapaxes(S, 1, 2))
    assert np.linalg.eigvalsh(S).min() >= -1e-8


def test_sampleset_is_immutable_and_validated():
    s = SampleSet(np.ones((2, 3, 4)))
    with pytest.raises(ValueError):
        s.x[0, 0, 0] = 5.0
    with pytest.raises(DataError):
        SampleSet(np.ones((2, 3)))
    with pytest.raises(DataError):
        SampleSet(np.full((1, 1, 1), np.nan))
    assert s.subset([1]).N == 1


# spectral initialization


def test_spectral_init_rank_one(rng):
    v = rng.standard_normal(6)
    v /= np.linalg.norm(v)
    a = rng.uniform(0.5, 2.0, 9)
    S = a[:, None, None] * np.outer(v, v)[None]
    Z = spectral_init(S, 1)
    assert abs(abs(Z.V[:, 0] @ v) - 1.0) < 1e-12
    np.testing.assert_allclose(Z.A[0], a, rtol=1e-12)


def test_spectral_init_isotropic():
    S = np.broadcast_to(np.eye(4), (6, 4, 4))
    Z = spectral_init(S, 4)
    np.testing.assert_allclose(Z.A, 1.0, atol=1e-12)


def test_spectral_init_sign_convention(rng):
    _, S = random_instance(rng, P=8, K=3, J=10, N=20)
    V = spectral_init(S, 3).V
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(3)] > 0)


def test_spectral_init_errors():
    S = np.zeros((3, 4, 4))
    S[:, 0, 0] = 1.0
    with pytest.raises(RankDeficiencyError):
        spectral_init(S, 2)
    with pytest.raises(InvalidParameterError):
        spectral_init(S, 5)


def test_spectral_init_beats_random_init():
    ours, rand = [], []
    for seed in range(20):
        truth, samples = small_dynamics(seed)
        Z0 = spectral_init(samples, 4)
        ours.append(dist_squared(Z0, truth.Z))
        Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((20, 4)))
        A = np.einsum("pk,jpq,qk->kj", Q, samples.S, Q)
        rand.append(dist_squared(FactorEstimate(Q, A), truth.Z))
    assert np.all(np.isfinite(ours))
    assert np.median(ours) < np.median(rand)


# objective and gradients


def test_objective_zero_at_exact_fit(rng):
    Z, _ = random_instance(rng)
    assert objective(Z, Z.covariances()) == pytest.approx(0.0, abs=1e-24)


def test_objective_with_zero_factors(rng):
    _, S = random_instance(rng)
    Z = FactorEstimate(np.zeros((6, 2)), rng.uniform(size=(2, 5)))
    assert objective(Z, S) == pytest.approx(0.5 * np.sum(S**2) / 5, rel=1e-14)


def test_objective_naive_oracle(rng):
    Z, S = random_instance(rng, P=4, K=3, J=3)
    assert objective(Z, S) == pytest.approx(naive_objective(Z.V, Z.A, S), rel=1e-12)


def test_gradients_zero_at_exact_fit(rng):
    Z, _ = random_instance(rng)
    S = Z.covariances()
    np.testing.assert_allclose(grad_v(Z, S), 0.0, atol=1e-12)
    np.testing.assert_allclose(grad_a(Z, S), 0.0, atol=1e-12)


def test_scalar_gradients():
    v, a, s = 1.3, 0.7, 2.1
    Z = FactorEstimate([[v]], [[a]])
    S = np.array([[[s]]])
    assert grad_v(Z, S)[0, 0] == pytest.approx(2 * (v * v * a - s) * v * a, rel=1e-14)
    assert grad_a(Z, S)[0, 0] == pytest.approx((v * v * a - s) * v * v, rel=1e-14)


@given(seed=seeds)
def test_gradients_match_finite_differences(seed):
    Z, S = random_instance(np.random.default_rng(seed))
    gV, gA = fd_gradients(Z, S)
    assert rel_err(grad_v(Z, S), gV) < 1e-6
    assert rel_err(grad_a(Z, S), gA) < 1e-6


# step size


def test_step_size_orthonormal_zero_weights(rng):
    V, _ = np.linalg.qr(rng.standard_normal((7, 3)))
    Z = FactorEstimate(V, np.zeros((3, 25)))
    assert default_step_size(Z) == pytest.approx(np.sqrt(25) / 64, rel=1e-14)


def test_step_size_arithmetic():
    # V^T V = I/2 and diag(a_j)^2 = I/2, so ||Z_j||_2^2 = 1
    Z = FactorEstimate(np.eye(4)[:, :2] / np.sqrt(2), np.full((2, 64), np.sqrt(0.5)))
    assert default_step_size(Z) == pytest.approx(0.125, rel=1e-14)
    assert default_step_size(Z, 0.5) == pytest.approx(0.0625, rel=1e-14)


def test_step_size_power_iteration_oracle(rng):
    Z = FactorEstimate(rng.standard_normal((8, 3)), rng.uniform(0, 2, (3, 6)))
    norms = []
    for j in range(6):
        M = Z.Z(j)
        x = np.ones(3)
        for _ in range(2000):
            x = M.T @ (M @ x)
            x /= np.linalg.norm(x)
        norms.append(x @ (M.T @ (M @ x)))
    assert default_step_size(Z) == pytest.approx(min(np.sqrt(6) / (64 * n) for n in norms), rel=1e-8)


# fit


def feasible_truth(rng, P=12, K=3, J=30, s=4):
    """A ground truth that lies exactly in the constraint set."""
    spec = KernelSpec("matern_five_half", 8.0)
    basis = basis_for(spec, J)
    V = np.zeros((P, K))
    for k in range(K):
        V[s * k : s * (k + 1), k] = rng.standard_normal(s)
    V /= np.linalg.norm(V, axis=0)
    A = np.vstack([basis.Q[:, :3] @ np.array([8.0, 0.3 * k, -0.2]) for k in range(K)])
    A = A @ basis.Q @ basis.Q.T
    assert A.min() > 0
    cfg = ConstraintConfig(K=K, s=s, gamma=1.5 * basis.energy(A).max(), c=10.0, kernel=spec)
    return FactorEstimate(V, A), cfg, basis


def test_fit_fixed_point(rng):
    Z, cfg, basis = feasible_truth(rng)
    S = Z.covariances()
    assert objective(Z, S) == 0.0
    est, rep = fit(S, cfg, FitOptions(max_iter=20), basis=basis, init=Z)
    np.testing.assert_allclose(est.V, Z.V, atol=1e-12)
    np.testing.assert_allclose(est.A, Z.A, atol=1e-12)
    assert rep.objective_trace[-1] < 1e-20


def test_fit_trace_and_determinism():
    truth, samples = small_dynamics(3, N=30)
    cfg, basis = oracle_config(truth)
    opts = FitOptions(max_iter=40, epsilon_stop=1e-300)
    a, ra = fit(samples, cfg, opts, truth=truth.Z)
    b, rb = fit(samples, cfg, opts, truth=truth.Z)
    assert len(ra.objective_trace) == ra.iterations + 1 == 41
    assert len(ra.dist_trace) == 41
    assert ra.objective_trace == rb.objective_trace
    assert ra.dist_trace == rb.dist_trace
    np.testing.assert_array_equal(a.V, b.V)
    np.testing.assert_array_equal(a.A, b.A)


def test_fit_stops_on_small_change():
    truth, samples = small_dynamics(4, N=30)
    cfg, _ = oracle_config(truth)
    _, rep = fit(samples, cfg, FitOptions(max_iter=500, epsilon_stop=1e-3))
    assert rep.converged and rep.iterations < 500
    f = rep.objective_trace
    assert abs(f[-1] - f[-2]) <= 1e-3 * (1 + f[0])


@pytest.mark.parametrize("use_qr", [False, True])
def test_fit_iterates_feasible_and_gradients_correct(use_qr):
    truth, samples = small_dynamics(5, N=15, P=10, K=3, J=20)
    cfg, basis = oracle_config(truth)
    c = cfg.resolve_c(samples.S)
    seen = []

    def check(i, Z):
        if use_qr:
            np.testing.assert_allclose(Z.V.T @ Z.V, np.eye(3), atol=1e-10)
        else:
            assert np.all(np.count_nonzero(Z.V, axis=0) <= cfg.s)
            np.testing.assert_allclose(np.linalg.norm(Z.V, axis=0), 1.0, atol=1e-12)
        assert Z.A.min() >= -1e-8 * c and Z.A.max() <= c * (1 + 1e-8)
        assert np.all(basis.energy(Z.A) <= cfg.gamma * (1 + 1e-8))
        if i % 50 == 0:
            gV, gA = fd_gradients(Z, samples.S)
            assert rel_err(grad_v(Z, samples.S), gV) < 1e-6
            assert rel_err(grad_a(Z, samples.S), gA) < 1e-6
        seen.append(i)

    _, rep = fit(samples, cfg, FitOptions(max_iter=150, epsilon_stop=1e-300, use_qr=use_qr), callback=check)
    assert seen == list(range(1, 151))
    assert rep.use_qr is use_qr


def test_fit_keeps_dead_column(caplog):
    truth, samples = small_dynamics(6, N=20)
    cfg, _ = oracle_config(truth)
    Z0 = spectral_init(samples, 4)
    Z0.V[:, 2] = 0.0
    est, rep = fit(samples, cfg, FitOptions(max_iter=3, epsilon_stop=1e-300), init=Z0)
    assert rep.zero_column_events == 3
    assert "column 2 vanished" in caplog.text
    np.testing.assert_array_equal(est.V[:, 2], 0.0)


def test_fit_rejects_incompatible_config():
    _, samples = small_dynamics(0, N=5)
    with pytest.raises(InvalidParameterError):
        fit(samples, ConstraintConfig(K=30, s=5, gamma=1.0))
    with pytest.raises(InvalidParameterError):
        fit(samples, ConstraintConfig(K=2, s=50, gamma=1.0))
    with pytest.raises(InvalidParameterError):
        FitOptions(step_multiplier=1.5)
    with pytest.raises(InvalidParameterError):
        FitOptions(epsilon_stop=0.0)


def test_default_c_exceeds_spectral_norms():
    _, samples = small_dynamics(1, N=10)
    cfg = ConstraintConfig(K=4, s=5, gamma=1.0)
    c = cfg.resolve_c(samples.S)
    assert c == pytest.approx(1.1 * np.linalg.norm(samples.S, ord=2, axis=(1, 2)).max())
