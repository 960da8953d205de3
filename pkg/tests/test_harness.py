"""Simulation, metrics, scenario machinery, ingestion, and the CLI."""

import json

import numpy as np
import pytest

from mrfilter import (
    FitError,
    GaussianObs,
    IngestError,
    MatrixCovSource,
    MethodSpec,
    Observation,
    Scenario,
    ScenarioError,
    StateSpaceModel,
    cov_block,
    CovarianceFunction,
    fit_real_data_hyperparameters,
    get_scenario,
    ingest_grid_csv,
    mspe,
    run_scenario,
    scenario_presets,
    simulate_truth,
    unit_square_grid,
    write_grid_csv,
)
from mrfilter.cli import main as cli_main
from mrfilter.dynamics import ar_dynamics
from mrfilter.harness import build_model


def tiny_scenario(**overrides):
    base = dict(
        name="tiny", grid_kind="square", n=64, T=4,
        dynamics={"kind": "advection_diffusion", "alpha": 0.01,
                  "beta": 0.0002},
        process_cov={"family": "exponential", "variance": 0.1, "range": 0.15},
        initial_cov={"family": "exponential", "variance": 1.0, "range": 0.15},
        observation={"kind": "gaussian", "tau2": 0.05},
        obs_fraction=0.3,
        methods=(MethodSpec(name="exact", kind="exact"),
                 MethodSpec(name="mrflp", kind="mrflp", M=1, J=2,
                            r=(12, 8), r_prime=(5, 4))),
        reference="exact", replicates=2, seed=5,
    )
    base.update(overrides)
    return Scenario(**base)


class TestSimulateTruth:
    def test_zero_noise_identity_dynamics_constant_path(self):
        grid = unit_square_grid(4)
        n = 16
        model = StateSpaceModel(
            grid=grid, dynamics=ar_dynamics(n, 1.0),
            process_cov=MatrixCovSource(np.zeros((n, n))),
            initial_mean=np.linspace(-1, 1, n),
            initial_cov=MatrixCovSource(np.zeros((n, n))),
            observation_model=GaussianObs(0.05), observations=[])
        states, _ = simulate_truth(model, T=6, obs_fraction=0.3, seed=0)
        for t in range(6):
            assert np.allclose(states[t], model.initial_mean, atol=1e-12)

    def test_tiny_noise_observations_equal_state(self):
        grid = unit_square_grid(4)
        n = 16
        model = StateSpaceModel(
            grid=grid, dynamics=ar_dynamics(n, 0.6),
            process_cov=MatrixCovSource(0.1 * np.eye(n)),
            initial_mean=np.zeros(n),
            initial_cov=MatrixCovSource(np.eye(n)),
            observation_model=GaussianObs(1e-20), observations=[])
        states, obs = simulate_truth(model, T=3, obs_fraction=0.5, seed=1)
        for t, o in enumerate(obs):
            assert np.max(np.abs(o.values - states[t][o.indices])) < 1e-8
            assert np.all(np.diff(o.indices) > 0)

    def test_process_noise_matches_covariance(self):
        """Empirical covariance of many process-noise draws tracks Q."""
        rng = np.random.default_rng(3)
        grid = unit_square_grid(5)
        n = 25
        pts = grid.points
        q = cov_block(pts, pts, CovarianceFunction("exponential", 0.5, 0.2))
        model = StateSpaceModel(
            grid=grid, dynamics=ar_dynamics(n, 0.0),  # x_t = w_t
            process_cov=MatrixCovSource(q),
            initial_mean=np.zeros(n),
            initial_cov=MatrixCovSource(np.zeros((n, n))),
            observation_model=GaussianObs(0.05), observations=[])
        states, _ = simulate_truth(model, T=5000, obs_fraction=0.0, seed=7)
        emp = states.T @ states / states.shape[0]
        rel = np.linalg.norm(emp - q) / np.linalg.norm(q)
        assert rel < 0.10


class TestMspe:
    def test_exact_match_is_zero(self, rng):
        x = rng.standard_normal((4, 10))
        per_time, total = mspe(x, x)
        assert np.array_equal(per_time, np.zeros(4)) and total == 0.0

    def test_constant_offset(self, rng):
        x = rng.standard_normal((3, 8))
        per_time, total = mspe(x + 0.5, x)
        assert np.allclose(per_time, 0.25) and total == pytest.approx(0.25)

    def test_matches_scalar_loop(self, rng):
        est = rng.standard_normal((5, 7))
        tru = rng.standard_normal((5, 7))
        per_time, total = mspe(est, tru)
        for t in range(5):
            acc = 0.0
            for i in range(7):
                acc += (est[t, i] - tru[t, i]) ** 2
            assert per_time[t] == pytest.approx(acc / 7, abs=1e-12)
        assert total == pytest.approx(np.mean(per_time), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mspe(np.zeros((2, 3)), np.zeros((3, 2)))


class TestRunScenario:
    def test_duplicate_reference_method_gets_unit_ratios(self):
        sc = tiny_scenario(methods=(MethodSpec(name="exact", kind="exact"),
                                    MethodSpec(name="exact-again",
                                               kind="exact")),
                           reference="exact")
        table = run_scenario(sc)
        assert table.mspe_ratio["exact"] == 1.0
        assert table.mspe_ratio["exact-again"] == pytest.approx(1.0, abs=1e-12)
        assert not table.failures

    def test_rerun_reproduces_bitwise(self):
        sc = tiny_scenario()
        a = run_scenario(sc)
        b = run_scenario(sc)
        for name in a.method_names:
            assert np.array_equal(a.per_time_mspe[name], b.per_time_mspe[name])
            assert a.total_mspe[name] == b.total_mspe[name]

    def test_method_failure_recorded_and_run_continues(self):
        # EnKF cannot run on Poisson data; exact cannot either, so use a
        # factored method as the healthy reference.
        sc = tiny_scenario(
            observation={"kind": "poisson"},
            methods=(MethodSpec(name="dense-laplace", kind="dense-laplace"),
                     MethodSpec(name="enkf", kind="enkf", ensemble_size=10,
                                taper_row_nnz=None)),
            reference="dense-laplace")
        table = run_scenario(sc)
        assert len(table.failures) == sc.replicates
        assert all(name == "enkf" for _, name, _ in table.failures)
        assert table.mspe_ratio["dense-laplace"] == 1.0

    def test_csv_outputs(self, tmp_path):
        sc = tiny_scenario()
        run_scenario(sc, out_dir=tmp_path)
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("# scenario=tiny, seed=5")
        assert summary[1].split(",")[0] == "method"
        per_time = (tmp_path / "per_time_mspe.csv").read_text().splitlines()
        assert len(per_time) == 2 + sc.T

    def test_invalid_configs_rejected(self):
        with pytest.raises(ScenarioError):
            tiny_scenario(reference="nope")
        with pytest.raises(ScenarioError):
            tiny_scenario(obs_fraction=1.5)
        with pytest.raises(ScenarioError):
            tiny_scenario(n=65)  # not a perfect square


class TestPresets:
    def test_all_presets_resolve_and_build(self):
        presets = scenario_presets()
        assert set(presets) == {
            "baseline", "small-sample", "low-noise", "smooth", "gamma",
            "poisson", "lorenz05", "enkf-comparison", "scaling",
        }
        for sc in presets.values():
            model = build_model(sc)
            assert model.n == sc.n

    def test_get_scenario_overrides(self):
        sc = get_scenario("baseline", replicates=2, seed=7)
        assert sc.replicates == 2 and sc.seed == 7
        with pytest.raises(ScenarioError):
            get_scenario("not-a-preset")


class TestIngestGridCsv:
    def test_empty_file_after_header(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("t,lat_index,lon_index,value\n")
        assert ingest_grid_csv(path, 10, 10) == []

    def test_single_row(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("t,lat_index,lon_index,value\n1,3,4,2.5\n")
        seq = ingest_grid_csv(path, 10, 10)
        assert len(seq) == 1
        assert np.array_equal(seq[0].indices, [34])
        assert seq[0].values[0] == 2.5

    def test_round_trip(self, tmp_path, rng):
        seq = []
        for t in range(4):
            if t == 2:
                seq.append(None)
                continue
            idx = np.sort(rng.choice(100, size=17, replace=False))
            seq.append(Observation(idx, rng.standard_normal(17)))
        path = tmp_path / "rt.csv"
        write_grid_csv(seq, 10, 10, path, comment="seed=1, version=test")
        back = ingest_grid_csv(path, 10, 10)
        assert len(back) == 4 and back[2] is None
        for orig, rec in zip(seq, back):
            if orig is None:
                continue
            assert np.array_equal(orig.indices, rec.indices)
            assert np.array_equal(orig.values, rec.values)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,lat_index,lon_index,value\n1,2,3,4.0\n1,x,3,4.0\n")
        with pytest.raises(IngestError, match="line 3"):
            ingest_grid_csv(path, 10, 10)

    def test_duplicate_site_reports_line(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text(
            "t,lat_index,lon_index,value\n1,2,3,4.0\n1,2,3,5.0\n")
        with pytest.raises(IngestError, match="duplicate"):
            ingest_grid_csv(path, 10, 10)

    def test_out_of_grid_site(self, tmp_path):
        path = tmp_path / "oob.csv"
        path.write_text("t,lat_index,lon_index,value\n1,10,0,4.0\n")
        with pytest.raises(IngestError, match="outside"):
            ingest_grid_csv(path, 10, 10)


class TestRealDataFit:
    def _synthetic(self, rng, n_sites, times, rho, total_sig, nugget):
        pts = rng.random((n_sites, 2))
        f = CovarianceFunction("exponential", variance=total_sig, range=rho)
        c = cov_block(pts, pts, f) + nugget * np.eye(n_sites)
        chol = np.linalg.cholesky(c)
        obs = []
        for _ in range(times):
            y = chol @ rng.standard_normal(n_sites)
            obs.append(Observation(np.arange(n_sites), y))
        return pts, obs

    def test_recovery_and_fixed_split(self):
        rng = np.random.default_rng(2)
        rel_r, rel_s = [], []
        for _ in range(6):
            pts, obs = self._synthetic(rng, 220, 3, 0.15, 1.0, 0.05)
            fit = fit_real_data_hyperparameters(obs, pts, family="exponential")
            total = fit.initial_variance + fit.process_variance
            rel_r.append(abs(fit.range - 0.15) / 0.15)
            rel_s.append(abs(total - 1.0))
            assert fit.initial_variance == pytest.approx(
                9.0 * fit.process_variance)
            assert fit.n_times_used == 3
        assert float(np.median(rel_r)) < 0.5
        assert float(np.median(rel_s)) < 0.5

    def test_single_time_is_plain_average(self):
        rng = np.random.default_rng(4)
        pts, obs = self._synthetic(rng, 200, 1, 0.15, 1.0, 0.05)
        fit = fit_real_data_hyperparameters(obs, pts, family="exponential")
        assert fit.n_times_used == 1

    def test_all_times_unusable(self):
        rng = np.random.default_rng(6)
        pts = rng.random((5, 2))
        obs = [Observation(np.arange(5), rng.standard_normal(5))]
        with pytest.raises(FitError):
            fit_real_data_hyperparameters(obs, pts)


class TestCli:
    def test_simulate_with_scenario_file(self, tmp_path, capsys):
        cfg = {
            "name": "clitiny", "grid_kind": "square", "n": 64, "T": 3,
            "dynamics": {"kind": "advection_diffusion", "alpha": 0.01,
                         "beta": 0.0002},
            "process_cov": {"family": "exponential", "variance": 0.1,
                            "range": 0.15},
            "initial_cov": {"family": "exponential", "variance": 1.0,
                            "range": 0.15},
            "observation": {"kind": "gaussian", "tau2": 0.05},
            "obs_fraction": 0.3,
            "methods": [{"name": "exact", "kind": "exact"},
                        {"name": "mrflp", "kind": "mrflp", "M": 1, "J": 2,
                         "r": [12, 8], "r_prime": [5, 4]}],
            "reference": "exact", "replicates": 1, "seed": 3,
        }
        cfg_path = tmp_path / "scenario.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "out"
        rc = cli_main(["simulate", "--scenario", str(cfg_path),
                       "--out", str(out)])
        assert rc == 0
        assert (out / "summary.csv").exists()
        assert "mspe_ratio" in capsys.readouterr().out

    def test_filter_command(self, tmp_path):
        rng = np.random.default_rng(0)
        seq = []
        for _ in range(3):
            idx = np.sort(rng.choice(64, size=20, replace=False))
            seq.append(Observation(idx, rng.standard_normal(20)))
        data = tmp_path / "obs.csv"
        write_grid_csv(seq, 8, 8, data)
        cfg = {
            "grid": {"kind": "square", "n_side": 8},
            "partition": {"M": 1, "J": 2, "r": [12, 8], "r_prime": [5, 4],
                          "seed": 2},
            "dynamics": {"kind": "advection_diffusion", "alpha": 0.01,
                         "beta": 0.0002},
            "process_cov": {"family": "exponential", "variance": 0.1,
                            "range": 0.15},
            "initial_cov": {"family": "exponential", "variance": 1.0,
                            "range": 0.15},
            "observation": {"kind": "gaussian", "tau2": 0.05},
            "method": {"kind": "mrflp", "M": 1, "J": 2, "r": [12, 8],
                       "r_prime": [5, 4]},
        }
        cfg_path = tmp_path / "filter.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "runout"
        rc = cli_main(["filter", "--config", str(cfg_path),
                       "--data", str(data), "--out", str(out)])
        assert rc == 0
        means = (out / "means.csv").read_text().splitlines()
        assert means[1] == "t,grid_index,mean"
        assert len(means) == 2 + 3 * 64
        diag = (out / "diagnostics.csv").read_text().splitlines()
        assert diag[1] == "t,newton_iters,forecast_ms,update_ms"

    def test_decompose_command(self, tmp_path):
        cfg = {
            "grid": {"kind": "square", "n_side": 8},
            "partition": {"M": 1, "J": 2, "r": [12, 8], "r_prime": [5, 4],
                          "seed": 2},
            "covariance": {"family": "exponential", "variance": 1.0,
                           "range": 0.15},
        }
        cfg_path = tmp_path / "dec.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "factor"
        rc = cli_main(["decompose", "--config", str(cfg_path),
                       "--out", str(out)])
        assert rc == 0
        blocks = np.load(str(out) + ".npz")
        meta = json.loads((tmp_path / "factor.json").read_text())
        assert meta["n"] == 64 and meta["n_columns"] == 13
        assert set(blocks.files) == {"root", "1", "2"}
        spans = {tuple(b["path"]): b for b in meta["blocks"]}
        assert spans[()]["rows"] == [0, 64]

    def test_bench_command(self, tmp_path, capsys):
        out = tmp_path / "bench"
        rc = cli_main(["bench", "--sizes", "900", "--T", "2",
                       "--out", str(out)])
        assert rc == 0
        lines = (out / "scaling.csv").read_text().splitlines()
        assert lines[1].startswith("n,method")
