"""Acceptance criteria, one test per criterion, each printing a pass/fail
line.  Run with ``pytest tests/test_acceptance.py -v -s``.

Stochastic criteria use fresh RNG streams, so the tolerance bands are the
wide ones fixed up front; nothing here is calibrated after the fact.
"""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from mrfilter import (
    CovarianceFunction,
    FactorCovSource,
    FunctionCovSource,
    GaussianObs,
    GammaObs,
    NonlinearDynamics,
    PoissonObs,
    StateSpaceModel,
    apply_permutation,
    build_partition,
    decompose,
    factor_mask,
    factor_postmultiply,
    get_scenario,
    gram_mask,
    gram_plus_identity,
    invert_lower_triangular,
    kalman_filter,
    lorenz05_jacobian,
    lorenz05_step_rk4,
    lower_mask,
    mrf_lp_filter,
    mrf_lp_filter_nongaussian,
    mrf_lp_filter_nonlinear,
    run_scaling,
    run_scenario,
    selection_weights,
    structure_check,
    structured_cholesky,
    unit_square_grid,
)
from mrfilter.covmodel import cov_block, obs_score_hess
from mrfilter.dynamics import advection_diffusion_coefficients, advection_diffusion_matrix
from mrfilter.harness import build_model, simulate_truth
from conftest import dense_mrf_means, random_linear_gaussian_model


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"\n[criterion {number}] FAIL: {description}")
        raise
    print(f"\n[criterion {number}] PASS: {description}")


def test_criterion_1_full_rank_exactness():
    """Full-knot, full-rank factored filtering equals the exact filter."""
    tic = time.monotonic()
    worst = 0.0
    with criterion(1, "full-rank factored filter matches exact filter "
                      "(n=100, T=10, 20 seeds, 1e-6 relative)"):
        for seed in range(20):
            model = random_linear_gaussian_model(seed=seed, n_side=10, T=10)
            exact = kalman_filter(model).means
            part = build_partition(model.grid, M=0, J=(), r=100, r_prime=100,
                                   seed=seed)
            approx = mrf_lp_filter(model, part).means
            rel = np.max(np.abs(approx - exact)) / np.max(np.abs(exact))
            worst = max(worst, rel)
        elapsed = time.monotonic() - tic
        assert worst < 1e-6, worst
        assert elapsed < 60.0, elapsed
    print(f"  worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_identity_projection_reduction():
    """Identity-projection runs match an independently coded dense
    multi-resolution filter."""
    with criterion(2, "identity projection equals independent dense "
                      "multi-resolution run (n=256, 1e-10)"):
        for seed in (0, 1):
            model = random_linear_gaussian_model(seed=100 + seed, n_side=16,
                                                 T=6)
            part = build_partition(model.grid, M=2, J=2, r=(16, 12, 8),
                                   r_prime=(16, 12, 8), seed=seed)
            ours = mrf_lp_filter(model, part, projection="identity").means
            oracle = dense_mrf_means(model, part,
                                     model.observation_model.tau2)
            assert np.max(np.abs(ours - oracle)) < 1e-10
    print("  two seeds, max deviation below 1e-10")


def test_criterion_3_structure_suite():
    """Reference configuration: every matrix in every step sits exactly on
    the analytic sparsity pattern."""
    with criterion(3, "golden sparsity patterns over 20 steps "
                      "(n=1156, M=2, J=2, r=50, r'=10)"):
        scenario = get_scenario("baseline", replicates=1)
        model = build_model(scenario)
        states, observations = simulate_truth(model, 20, 0.3, seed=123)
        model = replace(model, observations=observations)
        part = build_partition(model.grid, M=2, J=2, r=50, r_prime=10, seed=9)

        f_mask = factor_mask(part)
        g_mask = gram_mask(part)
        l_mask = lower_mask(part)
        n = part.n_points
        tau2 = model.observation_model.tau2

        a_ord = apply_permutation(part, model.dynamics.matrix)
        q_src = FunctionCovSource(
            part.points, CovarianceFunction("exponential", 0.1, 0.15))
        s0_src = FunctionCovSource(
            part.points, CovarianceFunction("exponential", 1.0, 0.15))

        mu = np.zeros(n)
        factor = decompose(s0_src, part)
        means = []
        for t in range(20):
            mu_f = a_ord @ mu
            b_f = decompose(FactorCovSource(a_ord @ factor.to_sparse(), q_src),
                            part)
            obs = observations[t]
            oidx = np.sort(part.old_to_new[obs.indices])
            y = obs.values[np.argsort(part.old_to_new[obs.indices])]
            gram = gram_plus_identity(
                b_f, selection_weights(n, oidx, 1.0 / tau2))
            chol = structured_cholesky(gram)
            inv = invert_lower_triangular(chol)
            b_tt = factor_postmultiply(b_f, inv)

            for obj in (b_f, gram, chol, inv, b_tt):
                report = structure_check(obj, part)
                assert report.ok, (t, report)
            assert np.array_equal(b_f.to_dense() != 0, f_mask)
            assert np.array_equal(b_tt.to_dense() != 0, f_mask)
            assert np.array_equal(gram.to_dense() != 0, g_mask)
            assert np.array_equal(chol.to_dense() != 0, l_mask)
            assert np.array_equal(inv.to_dense() != 0, l_mask)

            z = np.zeros(n)
            z[oidx] = (y - mu_f[oidx]) / tau2
            mu = mu_f + b_tt.apply(b_tt.apply_transpose(z))
            factor = b_tt
            mean = np.empty(n)
            mean[part.new_to_old] = mu
            means.append(mean)

        packaged = mrf_lp_filter(model, part).means
        assert np.max(np.abs(np.array(means) - packaged)) < 1e-10
    print("  0 out-of-envelope nonzeros in B_f, Lambda, L, L^-1, B_tt "
          "over 20 steps")


def test_criterion_4_baseline_mspe_bands():
    """Production-scale linear-Gaussian accuracy bands for both depths."""
    with criterion(4, "baseline MSPE ratios: projected variant beats "
                      "unprojected at M=2 and M=4, within fixed bands"):
        table = run_scenario(get_scenario("baseline", replicates=10))
        assert not table.failures, table.failures
        lp2 = table.mspe_ratio["mrflp-m2"]
        lp4 = table.mspe_ratio["mrflp-m4"]
        m2 = table.mspe_ratio["mrf-m2"]
        m4 = table.mspe_ratio["mrf-m4"]
        assert lp2 < m2, (lp2, m2)
        assert lp4 < m4, (lp4, m4)
        assert 1.5 <= lp2 <= 2.3, lp2
        assert 1.15 <= lp4 <= 1.5, lp4
    print(f"  ratios: projected M=2 {lp2:.3f} (band [1.5, 2.3]), "
          f"M=4 {lp4:.3f} (band [1.15, 1.5]); "
          f"unprojected {m2:.3f} / {m4:.3f}")


def test_criterion_5_nongaussian_consistency():
    """Gaussian Newton equals the closed form; count data keeps the
    projected variant ahead."""
    with criterion(5, "non-Gaussian: Gaussian-likelihood equivalence 1e-8, "
                      "2-iteration Newton, Poisson/Gamma ratio ordering"):
        model = random_linear_gaussian_model(seed=55, n_side=8, T=6)
        part = build_partition(model.grid, M=2, J=2, r=(12, 8, 5),
                               r_prime=(5, 4, 3), seed=1)
        closed = mrf_lp_filter(model, part).means
        newton = mrf_lp_filter_nongaussian(model, part, epsilon=1e-8)
        assert np.max(np.abs(newton.means - closed)) < 1e-8
        assert np.all(newton.newton_iters == 2)

        ratios = {}
        for name in ("poisson", "gamma"):
            table = run_scenario(get_scenario(name, replicates=4))
            assert not table.failures, table.failures
            ratios[name] = (table.mspe_ratio["mrflp-m2"],
                            table.mspe_ratio["mrf-m2"])
            assert ratios[name][0] <= ratios[name][1], ratios[name]
    print(f"  poisson projected/unprojected {ratios['poisson'][0]:.3f} <= "
          f"{ratios['poisson'][1]:.3f}; gamma {ratios['gamma'][0]:.3f} <= "
          f"{ratios['gamma'][1]:.3f}")


def test_criterion_6_nonlinear_consistency():
    """Jacobian-linearized filtering: exact reduction, derivative checks,
    and the circle-flow count-data band."""
    with criterion(6, "nonlinear: linear-map reduction 1e-12, Jacobian vs "
                      "finite differences 1e-6, circle-flow ratio <= 1.15"):
        model = random_linear_gaussian_model(seed=77, n_side=8, T=5)
        a = model.dynamics.matrix
        wrapped = StateSpaceModel(
            grid=model.grid,
            dynamics=NonlinearDynamics(map=lambda v: a @ v,
                                       jacobian_at=lambda v: a, n=model.n),
            process_cov=model.process_cov, initial_mean=model.initial_mean,
            initial_cov=model.initial_cov,
            observation_model=model.observation_model,
            observations=model.observations)
        part = build_partition(model.grid, M=2, J=2, r=(12, 8, 5),
                               r_prime=(5, 4, 3), seed=1)
        lin = mrf_lp_filter_nongaussian(model, part, epsilon=1e-8).means
        nonlin = mrf_lp_filter_nonlinear(wrapped, part, epsilon=1e-8).means
        assert np.max(np.abs(lin - nonlin)) < 1e-12

        rng = np.random.default_rng(0)
        x = rng.standard_normal(40)
        jac = lorenz05_jacobian(x, 0.5, 0.5).toarray()
        fd = np.zeros((40, 40))
        h = 1e-6
        for j in range(40):
            e = np.zeros(40)
            e[j] = h
            fd[:, j] = (lorenz05_step_rk4(x + e, 0.5, 0.5)
                        - lorenz05_step_rk4(x - e, 0.5, 0.5)) / (2 * h)
        assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-6

        table = run_scenario(get_scenario("lorenz05", replicates=3))
        assert not table.failures, table.failures
        ratio = table.mspe_ratio["mrflp-m2"]
        assert ratio <= 1.15, ratio
    print(f"  circle-flow Poisson projected ratio {ratio:.3f} (<= 1.15)")


def test_criterion_7_ensemble_contrast():
    """Smooth-field circle flow: localization-limited ensemble filtering
    trails the projected factored filter by at least 2x."""
    with criterion(7, "ensemble contrast: EnKF total ratio at least twice "
                      "the projected filter's (directional)"):
        table = run_scenario(get_scenario("enkf-comparison", replicates=6))
        assert not table.failures, table.failures
        enkf_ratio = table.mspe_ratio["enkf"]
        lp_ratio = table.mspe_ratio["mrflp-m2"]
        assert enkf_ratio >= 2.0 * lp_ratio, (enkf_ratio, lp_ratio)
    print(f"  EnKF {enkf_ratio:.3f} vs projected {lp_ratio:.3f} "
          f"(factor {enkf_ratio / lp_ratio:.2f})")


def test_criterion_8_scaling_benchmark():
    """Relative cost of the factored filter falls with n; its wall time
    grows sub-quadratically."""
    with criterion(8, "scaling: time ratio strictly decreasing over "
                      "n=900..3600, log-log exponent < 1.6"):
        sizes = [900, 1764, 2704, 3600]
        results = run_scaling(sizes, T=50, seed=20230)
        ratios = [t.relative_time["mrflp-m4"] for _, t in results]
        walls = [t.mean_wall_s["mrflp-m4"] for _, t in results]
        assert all(a > b for a, b in zip(ratios, ratios[1:])), ratios
        exponent = float(np.polyfit(np.log(sizes), np.log(walls), 1)[0])
        assert exponent < 1.6, exponent
    print(f"  time ratios {['%.3f' % r for r in ratios]}, "
          f"wall-time exponent {exponent:.2f}")


def test_criterion_9_property_suites():
    """Fast standalone property checks across the numeric core."""
    tic = time.monotonic()
    rng = np.random.default_rng(2024)
    with criterion(9, "property suites: PSD, score FD, stencil identities, "
                      "ordering, blocked-vs-dense (under 5 minutes)"):
        # covariance PSD
        pts = rng.random((200, 2))
        for family in ("exponential", "matern15"):
            c = cov_block(pts, pts,
                          CovarianceFunction(family, 1.0, 0.2))
            assert np.min(np.linalg.eigvalsh(c)) > -1e-10

        # score/Hessian finite differences
        h = 1e-5
        models = [GaussianObs(0.3), GammaObs(3.0), PoissonObs()]
        for om in models:
            for _ in range(200):
                x = rng.uniform(-1.5, 1.5)
                y = om.sample(rng, np.array([x]))[()]
                u, d = obs_score_hess(om, y, x)
                lp = om.log_density(y, x + h)
                lm = om.log_density(y, x - h)
                l0 = om.log_density(y, x)
                assert d >= 0
                assert u == pytest.approx((lp - lm) / (2 * h), rel=1e-5,
                                          abs=1e-4)
                assert -d == pytest.approx((lp - 2 * l0 + lm) / h**2,
                                           rel=1e-3, abs=1e-3)

        # advection-diffusion identities
        c0, c_m1, c_p1, c_m2, c_p2 = advection_diffusion_coefficients(
            0.01, 0.0002, 1 / 35, 1 / 35)
        assert (c0, c_p1, c_m1) == pytest.approx((0.02, 0.42, 0.07))
        grid = unit_square_grid(10)
        mat = advection_diffusion_matrix(grid, 0.03, 2e-4).matrix.toarray()
        interior = [i * 10 + j for i in range(1, 9) for j in range(1, 9)]
        assert np.allclose(mat[interior].sum(axis=1), 1.0, atol=1e-12)

        # partition ordering invariant
        part = build_partition(grid, M=2, J=2, r=(12, 8, 6),
                               r_prime=(4, 3, 2), seed=0)
        leaves = part.leaves()
        for a in leaves:
            for b in leaves:
                if a.path < b.path:
                    assert a.stop <= b.start

        # blocked vs dense algebra at n <= 500
        grid = unit_square_grid(22)  # n = 484
        part = build_partition(grid, M=2, J=2, r=(40, 24, 12),
                               r_prime=(8, 6, 4), seed=1)
        src = FunctionCovSource(part.points,
                                CovarianceFunction("exponential", 1.0, 0.15))
        factor = decompose(src, part)
        d = rng.uniform(0.0, 4.0, part.n_points)
        gram = gram_plus_identity(factor, d)
        bd = factor.to_dense()
        dense_gram = np.eye(part.n_columns) + bd.T @ (d[:, None] * bd)
        assert np.max(np.abs(gram.to_dense() - dense_gram)) < 1e-9
        chol = structured_cholesky(gram)
        assert np.max(np.abs(chol.to_dense()
                             - np.linalg.cholesky(dense_gram))) < 1e-9
        inv = invert_lower_triangular(chol)
        assert np.max(np.abs(inv.to_dense()
                             - np.linalg.inv(chol.to_dense()))) < 1e-9
        out = factor_postmultiply(factor, inv)
        assert np.max(np.abs(out.to_dense()
                             - bd @ inv.to_dense().T)) < 1e-9
        elapsed = time.monotonic() - tic
        assert elapsed < 300.0, elapsed
    print(f"  all property groups passed in {elapsed:.1f}s")
