"""Experiment orchestration: truth simulation, scenario presets, MSPE and
timing tables, scaling benches, and grid-CSV ingestion.

A Scenario names a generative model, a list of filtering methods with their
resolution/rank settings, and a replicate count.  Every method in a replicate
consumes the identical simulated dataset; ratios are reported against the
scenario's declared reference method.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .covmodel import (
    CovarianceFunction,
    FitError,
    GammaObs,
    GaussianObs,
    ObservationModel,
    PoissonObs,
    TaperFunction,
    fit_spatial_mle,
    tune_taper_radius,
)
from .dynamics import (
    advection_diffusion_matrix,
    ar_dynamics,
    lorenz05_dynamics,
    quadratic_dynamics,
)
from .filters import (
    FilterResult,
    Observation,
    StateSpaceModel,
    dense_laplace_filter,
    enkf_filter,
    kalman_filter,
    mrf_lp_filter,
    mrf_lp_filter_nongaussian,
    mrf_lp_filter_nonlinear,
)
from .mralp import FunctionCovSource
from .partition import GridSpec, build_partition, unit_circle_grid, unit_square_grid


class IngestError(ValueError):
    """Malformed observation CSV; message carries the line number."""


class ScenarioError(ValueError):
    """Scenario configuration cannot be resolved."""


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """One filtering method and its settings.

    kind: "exact", "dense-laplace", "mrf", "mrflp", or "enkf".
    For "mrf" the projected rank equals the knot count (identity projection);
    r_prime is ignored.  For "enkf", ensemble_size members are used and the
    taper radius is tuned so the localized covariance has about
    taper_row_nnz nonzeros per row.
    """

    name: str
    kind: str
    M: int = 2
    J: int | tuple = 2
    r: int | tuple = 50
    r_prime: int | tuple = 10
    epsilon: float = 1e-6
    ensemble_size: int = 30
    taper_kind: str = "kanter"
    taper_row_nnz: int | None = 30


@dataclass(frozen=True)
class Scenario:
    """A complete experiment: model, data regime, methods, replicate count."""

    name: str
    grid_kind: str
    n: int
    T: int
    dynamics: dict
    process_cov: dict
    initial_cov: dict
    observation: dict
    obs_fraction: float
    methods: tuple[MethodSpec, ...]
    reference: str
    replicates: int = 10
    seed: int = 20230

    def __post_init__(self):
        if not (0.0 <= self.obs_fraction <= 1.0):
            raise ScenarioError("obs_fraction must lie in [0, 1]")
        if self.grid_kind == "square":
            side = int(round(math.sqrt(self.n)))
            if side * side != self.n:
                raise ScenarioError(
                    f"square grid needs a perfect square, got n={self.n}")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ScenarioError("method names must be unique")
        if self.reference not in names:
            raise ScenarioError(f"reference {self.reference!r} not among methods")


@dataclass
class MetricsTable:
    """Aggregated results of a scenario run."""

    scenario: str
    seed: int
    method_names: list[str]
    reference: str
    per_time_mspe: dict[str, np.ndarray]
    total_mspe: dict[str, float]
    mspe_ratio: dict[str, float]
    mean_forecast_s: dict[str, float]
    mean_update_s: dict[str, float]
    mean_wall_s: dict[str, float]
    relative_time: dict[str, float]
    failures: list[tuple[int, str, str]] = field(default_factory=list)

    def write_csv(self, out_dir) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        prov = f"# scenario={self.scenario}, seed={self.seed}, version={__version__}\n"
        with open(os.path.join(out_dir, "per_time_mspe.csv"), "w") as fh:
            fh.write(prov)
            fh.write("t," + ",".join(self.method_names) + "\n")
            T = len(next(iter(self.per_time_mspe.values())))
            for t in range(T):
                row = [str(t + 1)] + [
                    f"{self.per_time_mspe[m][t]:.10g}" for m in self.method_names
                ]
                fh.write(",".join(row) + "\n")
        with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
            fh.write(prov)
            fh.write(
                "method,total_mspe,mspe_ratio,mean_forecast_s,"
                "mean_update_s,mean_wall_s,relative_time\n"
            )
            for m in self.method_names:
                fh.write(
                    f"{m},{self.total_mspe[m]:.10g},{self.mspe_ratio[m]:.10g},"
                    f"{self.mean_forecast_s[m]:.6g},{self.mean_update_s[m]:.6g},"
                    f"{self.mean_wall_s[m]:.6g},{self.relative_time[m]:.10g}\n"
                )
        if self.failures:
            with open(os.path.join(out_dir, "failures.csv"), "w") as fh:
                fh.write(prov)
                fh.write("replicate,method,error\n")
                for rep, m, msg in self.failures:
                    fh.write(f"{rep},{m},\"{msg}\"\n")


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


def build_grid(kind: str, n: int) -> GridSpec:
    if kind == "circle":
        return unit_circle_grid(n)
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ScenarioError(f"square grid needs a perfect square, got n={n}")
    return unit_square_grid(side)


def build_dynamics(cfg: dict, grid: GridSpec):
    kind = cfg.get("kind")
    n = grid.n_points
    if kind == "advection_diffusion":
        return advection_diffusion_matrix(
            grid, alpha=cfg.get("alpha", 0.01), beta=cfg.get("beta", 0.0002),
            ds1=cfg.get("ds1"), ds2=cfg.get("ds2"))
    if kind == "ar":
        return ar_dynamics(n, coefficient=cfg.get("coefficient", 0.6))
    if kind == "lorenz05":
        return lorenz05_dynamics(n, dt=cfg.get("dt", 0.5),
                                 forcing=cfg.get("forcing", 0.5))
    if kind == "quadratic":
        return quadratic_dynamics(n, linear=cfg.get("linear", 0.1),
                                  quad=cfg.get("quad", 0.1))
    raise ScenarioError(f"unknown dynamics kind {kind!r}")


def build_covariance(cfg: dict, grid: GridSpec) -> FunctionCovSource:
    f = CovarianceFunction(family=cfg.get("family", "exponential"),
                           variance=cfg.get("variance", 1.0),
                           range=cfg.get("range", 0.15))
    return FunctionCovSource(grid.points, f)


def build_observation_model(cfg: dict) -> ObservationModel:
    kind = cfg.get("kind")
    if kind == "gaussian":
        return GaussianObs(tau2=cfg.get("tau2", 0.05))
    if kind == "gamma":
        return GammaObs(shape=cfg.get("shape", 3.0))
    if kind == "poisson":
        return PoissonObs()
    raise ScenarioError(f"unknown observation kind {kind!r}")


def build_model(scenario: Scenario) -> StateSpaceModel:
    """Assemble the data-free model a scenario describes."""
    grid = build_grid(scenario.grid_kind, scenario.n)
    return StateSpaceModel(
        grid=grid,
        dynamics=build_dynamics(scenario.dynamics, grid),
        process_cov=build_covariance(scenario.process_cov, grid),
        initial_mean=np.zeros(grid.n_points),
        initial_cov=build_covariance(scenario.initial_cov, grid),
        observation_model=build_observation_model(scenario.observation),
        observations=[],
    )


# ---------------------------------------------------------------------------
# Simulation and metrics
# ---------------------------------------------------------------------------


def simulate_truth(model: StateSpaceModel, T: int, obs_fraction: float,
                   seed, chol_cache: dict | None = None):
    """Draw a state path and observations from the generative model.

    The observed index set is a fresh uniform draw of round(obs_fraction * n)
    sites at each time, sorted ascending.  Returns (states, observations)
    where states is (T, n) and observations a length-T list.
    """
    rng = np.random.default_rng(seed)
    n = model.n
    if chol_cache is None:
        chol_cache = {}
    if "s0" not in chol_cache:
        chol_cache["s0"] = _safe_chol(model.initial_cov.dense())
        chol_cache["q"] = _safe_chol(model.process_cov.dense())
    chol0, chol_q = chol_cache["s0"], chol_cache["q"]

    x = model.initial_mean + chol0 @ rng.standard_normal(n)
    n_obs = int(round(obs_fraction * n))
    states = np.zeros((T, n))
    observations: list[Observation | None] = []
    for t in range(T):
        if model.is_linear:
            x = model.dynamics.matrix @ x
        else:
            x = model.dynamics.map(x)
        x = x + chol_q @ rng.standard_normal(n)
        states[t] = x
        if n_obs == 0:
            observations.append(None)
            continue
        idx = np.sort(rng.choice(n, size=n_obs, replace=False))
        y = model.observation_model.sample(rng, x[idx])
        observations.append(Observation(indices=idx, values=y))
    return states, observations


def _safe_chol(mat: np.ndarray) -> np.ndarray:
    mat = 0.5 * (mat + mat.T)
    if not np.any(np.diag(mat) > 0):
        return np.zeros_like(mat)
    return np.linalg.cholesky(mat + 1e-12 * np.trace(mat) / len(mat) * np.eye(len(mat)))


def mspe(estimates: np.ndarray, truth: np.ndarray):
    """Mean squared prediction error per time and its time average.

    estimates and truth are (T, n); the per-time value averages over the
    grid, the total averages the per-time values.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError(
            f"shape mismatch: estimates {estimates.shape} vs truth {truth.shape}"
        )
    per_time = np.mean((estimates - truth) ** 2, axis=1)
    return per_time, float(np.mean(per_time))


# ---------------------------------------------------------------------------
# Method execution
# ---------------------------------------------------------------------------


def _partition_for(method: MethodSpec, grid: GridSpec, seed: int):
    if method.kind == "mrf":
        return build_partition(grid, M=method.M, J=method.J,
                               r=method.r, r_prime=method.r, seed=seed)
    return build_partition(grid, M=method.M, J=method.J,
                           r=method.r, r_prime=method.r_prime, seed=seed)


def run_method(method: MethodSpec, model: StateSpaceModel, partition=None,
               enkf_seed=0) -> FilterResult:
    """Dispatch one method on a fully specified model."""
    gaussian = isinstance(model.observation_model, GaussianObs)
    if method.kind == "exact":
        return kalman_filter(model)
    if method.kind == "dense-laplace":
        return dense_laplace_filter(model, epsilon=method.epsilon)
    if method.kind == "enkf":
        taper = None
        if method.taper_row_nnz:
            radius = tune_taper_radius(model.grid.points, method.taper_row_nnz)
            taper = TaperFunction(kind=method.taper_kind, radius=radius)
        return enkf_filter(model, method.ensemble_size, taper=taper,
                           seed=enkf_seed)
    if method.kind in ("mrf", "mrflp"):
        projection = "identity" if method.kind == "mrf" else "eigen"
        if not model.is_linear:
            return mrf_lp_filter_nonlinear(model, partition,
                                           epsilon=method.epsilon,
                                           projection=projection)
        if gaussian:
            return mrf_lp_filter(model, partition, projection=projection)
        return mrf_lp_filter_nongaussian(model, partition,
                                         epsilon=method.epsilon,
                                         projection=projection)
    raise ScenarioError(f"unknown method kind {method.kind!r}")


def run_scenario(scenario: Scenario, out_dir=None) -> MetricsTable:
    """Run every method on shared simulated data for each replicate.

    Per-method failures are recorded and the scenario continues; the CLI maps
    a nonempty failure list to a nonzero exit status.
    """
    model = build_model(scenario)
    T = scenario.T

    partitions = {}
    for k, method in enumerate(scenario.methods):
        if method.kind in ("mrf", "mrflp"):
            partitions[method.name] = _partition_for(
                method, model.grid,
                seed=int(np.random.SeedSequence(
                    entropy=scenario.seed, spawn_key=(10_000 + k,)
                ).generate_state(1)[0]),
            )

    sums_per_time = {m.name: np.zeros(T) for m in scenario.methods}
    counts = {m.name: 0 for m in scenario.methods}
    forecast_s = {m.name: 0.0 for m in scenario.methods}
    update_s = {m.name: 0.0 for m in scenario.methods}
    wall_s = {m.name: 0.0 for m in scenario.methods}
    failures: list[tuple[int, str, str]] = []
    chol_cache: dict = {}

    # Methods run sequentially on one BLAS thread so wall-clock comparisons
    # are free of co-scheduling and thread-pool spin-wait contention.
    with threadpool_limits(limits=1):
        for rep in range(scenario.replicates):
            states, observations = simulate_truth(
                model, T, scenario.obs_fraction,
                seed=np.random.SeedSequence(entropy=scenario.seed,
                                            spawn_key=(rep, 0)),
                chol_cache=chol_cache,
            )
            data_model = replace(model, observations=observations)
            enkf_seed = np.random.SeedSequence(entropy=scenario.seed,
                                               spawn_key=(rep, 1))
            for method in scenario.methods:
                try:
                    tic = time.perf_counter()
                    result = run_method(method, data_model,
                                        partition=partitions.get(method.name),
                                        enkf_seed=enkf_seed)
                    wall = time.perf_counter() - tic
                except Exception as exc:  # noqa: BLE001 - record and continue
                    failures.append(
                        (rep, method.name, f"{type(exc).__name__}: {exc}"))
                    continue
                per_time, _ = mspe(result.means, states)
                sums_per_time[method.name] += per_time
                counts[method.name] += 1
                forecast_s[method.name] += float(np.sum(result.forecast_ms)) / 1e3
                update_s[method.name] += float(np.sum(result.update_ms)) / 1e3
                wall_s[method.name] += wall

    names = [m.name for m in scenario.methods]
    per_time_avg, total, mean_f, mean_u, mean_w = {}, {}, {}, {}, {}
    for name in names:
        c = max(counts[name], 1)
        per_time_avg[name] = sums_per_time[name] / c
        total[name] = float(np.mean(per_time_avg[name]))
        mean_f[name] = forecast_s[name] / c
        mean_u[name] = update_s[name] / c
        mean_w[name] = wall_s[name] / c

    ref = scenario.reference
    ratio = {name: total[name] / total[ref] if total[ref] > 0 else math.nan
             for name in names}
    rel_time = {name: mean_w[name] / mean_w[ref] if mean_w[ref] > 0 else math.nan
                for name in names}

    table = MetricsTable(
        scenario=scenario.name, seed=scenario.seed, method_names=names,
        reference=ref, per_time_mspe=per_time_avg, total_mspe=total,
        mspe_ratio=ratio, mean_forecast_s=mean_f, mean_update_s=mean_u,
        mean_wall_s=mean_w, relative_time=rel_time, failures=failures,
    )
    if out_dir is not None:
        table.write_csv(out_dir)
    return table


# ---------------------------------------------------------------------------
# Scenario presets
# ---------------------------------------------------------------------------

_BASE_EXP_Q = {"family": "exponential", "variance": 0.1, "range": 0.15}
_BASE_EXP_0 = {"family": "exponential", "variance": 1.0, "range": 0.15}
_SMOOTH_Q = {"family": "matern15", "variance": 0.1, "range": 0.15}
_SMOOTH_0 = {"family": "matern15", "variance": 1.0, "range": 0.15}
_ADVDIFF = {"kind": "advection_diffusion", "alpha": 0.01, "beta": 0.0002}
_LORENZ = {"kind": "lorenz05", "dt": 0.5, "forcing": 0.5}

_M2_METHODS = (
    MethodSpec(name="exact", kind="exact"),
    MethodSpec(name="mrf-m2", kind="mrf", M=2, J=2, r=10),
    MethodSpec(name="mrflp-m2", kind="mrflp", M=2, J=2, r=50, r_prime=10),
    MethodSpec(name="mrf-m4", kind="mrf", M=4, J=2, r=(10, 10, 10, 5, 5)),
    MethodSpec(name="mrflp-m4", kind="mrflp", M=4, J=2,
               r=(50, 50, 50, 10, 10), r_prime=(10, 10, 10, 5, 5)),
)


def _linear_gaussian_scenario(name, tau2=0.05, obs_fraction=0.3,
                              q=_BASE_EXP_Q, s0=_BASE_EXP_0) -> Scenario:
    return Scenario(
        name=name, grid_kind="square", n=1156, T=20,
        dynamics=_ADVDIFF, process_cov=q, initial_cov=s0,
        observation={"kind": "gaussian", "tau2": tau2},
        obs_fraction=obs_fraction, methods=_M2_METHODS,
        reference="exact", replicates=10,
    )


def _nongaussian_scenario(name, observation) -> Scenario:
    methods = (
        MethodSpec(name="dense-laplace", kind="dense-laplace"),
        MethodSpec(name="mrf-m2", kind="mrf", M=2, J=2, r=10),
        MethodSpec(name="mrflp-m2", kind="mrflp", M=2, J=2, r=50, r_prime=10),
        MethodSpec(name="mrf-m4", kind="mrf", M=4, J=2, r=(10, 10, 10, 5, 5)),
        MethodSpec(name="mrflp-m4", kind="mrflp", M=4, J=2,
                   r=(50, 50, 50, 10, 10), r_prime=(10, 10, 10, 5, 5)),
    )
    return Scenario(
        name=name, grid_kind="square", n=1156, T=20,
        dynamics=_ADVDIFF, process_cov=_BASE_EXP_Q, initial_cov=_BASE_EXP_0,
        observation=observation, obs_fraction=0.3, methods=methods,
        reference="dense-laplace", replicates=30,
    )


def scenario_presets() -> dict[str, Scenario]:
    """Named experiment configurations mirroring the simulation designs."""
    presets: dict[str, Scenario] = {}
    presets["baseline"] = _linear_gaussian_scenario("baseline")
    presets["small-sample"] = _linear_gaussian_scenario(
        "small-sample", obs_fraction=0.1)
    presets["low-noise"] = _linear_gaussian_scenario("low-noise", tau2=0.02)
    presets["smooth"] = _linear_gaussian_scenario(
        "smooth", q=_SMOOTH_Q, s0=_SMOOTH_0)
    presets["gamma"] = _nongaussian_scenario(
        "gamma", {"kind": "gamma", "shape": 3.0})
    presets["poisson"] = _nongaussian_scenario(
        "poisson", {"kind": "poisson"})
    presets["lorenz05"] = Scenario(
        name="lorenz05", grid_kind="circle", n=1156, T=20,
        dynamics=_LORENZ, process_cov=_BASE_EXP_Q, initial_cov=_BASE_EXP_0,
        observation={"kind": "poisson"}, obs_fraction=0.3,
        methods=(
            MethodSpec(name="dense-laplace", kind="dense-laplace"),
            MethodSpec(name="mrf-m2", kind="mrf", M=2, J=2, r=10),
            MethodSpec(name="mrflp-m2", kind="mrflp", M=2, J=2, r=50, r_prime=10),
        ),
        reference="dense-laplace", replicates=30,
    )
    presets["enkf-comparison"] = Scenario(
        name="enkf-comparison", grid_kind="circle", n=1156, T=20,
        dynamics=_LORENZ, process_cov=_SMOOTH_Q, initial_cov=_SMOOTH_0,
        observation={"kind": "gaussian", "tau2": 0.05}, obs_fraction=0.3,
        methods=(
            MethodSpec(name="dense-laplace", kind="dense-laplace"),
            MethodSpec(name="mrf-m2", kind="mrf", M=2, J=2, r=10),
            MethodSpec(name="mrflp-m2", kind="mrflp", M=2, J=2, r=50, r_prime=10),
            MethodSpec(name="enkf", kind="enkf", ensemble_size=30,
                       taper_row_nnz=30),
        ),
        reference="dense-laplace", replicates=10,
    )
    presets["scaling"] = scaling_scenario(900)
    return presets


def scenario_from_config(cfg: dict) -> Scenario:
    """Build a Scenario from a JSON-style dict (the CLI's file format)."""

    def _tupled(v):
        return tuple(v) if isinstance(v, (list, tuple)) else v

    methods = []
    for mc in cfg["methods"]:
        methods.append(MethodSpec(
            name=mc.get("name", mc["kind"]), kind=mc["kind"],
            M=int(mc.get("M", 2)), J=_tupled(mc.get("J", 2)),
            r=_tupled(mc.get("r", 50)), r_prime=_tupled(mc.get("r_prime", 10)),
            epsilon=float(mc.get("epsilon", 1e-6)),
            ensemble_size=int(mc.get("ensemble_size", 30)),
            taper_kind=mc.get("taper_kind", "kanter"),
            taper_row_nnz=mc.get("taper_row_nnz", 30),
        ))
    return Scenario(
        name=cfg.get("name", "custom"), grid_kind=cfg.get("grid_kind", "square"),
        n=int(cfg["n"]), T=int(cfg["T"]), dynamics=cfg["dynamics"],
        process_cov=cfg["process_cov"], initial_cov=cfg["initial_cov"],
        observation=cfg["observation"],
        obs_fraction=float(cfg.get("obs_fraction", 0.3)),
        methods=tuple(methods), reference=cfg["reference"],
        replicates=int(cfg.get("replicates", 10)),
        seed=int(cfg.get("seed", 20230)),
    )


def get_scenario(name: str, replicates: int | None = None,
                 seed: int | None = None) -> Scenario:
    """Resolve a scenario by preset name or by path to a JSON file."""
    import json
    import os

    if os.path.exists(name):
        with open(name) as fh:
            sc = scenario_from_config(json.load(fh))
    else:
        presets = scenario_presets()
        if name not in presets:
            raise ScenarioError(
                f"unknown scenario {name!r}; available: {sorted(presets)}")
        sc = presets[name]
    if replicates is not None:
        sc = replace(sc, replicates=replicates)
    if seed is not None:
        sc = replace(sc, seed=seed)
    return sc


def scaling_scenario(n: int, T: int = 50, seed: int = 20230) -> Scenario:
    """Diagonal-AR scaling bench at a given grid size (fixed M=4 settings)."""
    return Scenario(
        name=f"scaling-n{n}", grid_kind="square", n=n, T=T,
        dynamics={"kind": "ar", "coefficient": 0.6},
        process_cov=_BASE_EXP_Q, initial_cov=_BASE_EXP_0,
        observation={"kind": "gaussian", "tau2": 0.05}, obs_fraction=0.3,
        methods=(
            MethodSpec(name="exact", kind="exact"),
            MethodSpec(name="mrf-m4", kind="mrf", M=4, J=2,
                       r=(10, 10, 10, 5, 5)),
            MethodSpec(name="mrflp-m4", kind="mrflp", M=4, J=2,
                       r=(50, 50, 50, 10, 10), r_prime=(10, 10, 10, 5, 5)),
        ),
        reference="exact", replicates=1, seed=seed,
    )


def run_scaling(sizes, T: int = 50, seed: int = 20230, out_dir=None):
    """Run the scaling bench across grid sizes; returns a list of
    (n, MetricsTable) pairs and optionally writes one CSV."""
    results = []
    for n in sizes:
        table = run_scenario(scaling_scenario(n, T=T, seed=seed))
        results.append((n, table))
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scaling.csv"), "w") as fh:
            fh.write(f"# seed={seed}, version={__version__}\n")
            fh.write("n,method,total_mspe,mspe_ratio,mean_wall_s,relative_time\n")
            for n, table in results:
                for m in table.method_names:
                    fh.write(
                        f"{n},{m},{table.total_mspe[m]:.10g},"
                        f"{table.mspe_ratio[m]:.10g},{table.mean_wall_s[m]:.6g},"
                        f"{table.relative_time[m]:.10g}\n"
                    )
    return results


# ---------------------------------------------------------------------------
# Grid-CSV ingestion (real-data path)
# ---------------------------------------------------------------------------


def ingest_grid_csv(path, n_lat: int, n_lon: int):
    """Read per-time gridded observations from CSV.

    Expected header: t, lat_index, lon_index, value (0-based lattice indices,
    1-based times); missing cells are simply absent.  Returns a length-T list
    of Observation (or None for times with no rows), with flattened site
    index lat_index * n_lon + lon_index, sorted ascending.

    Raises:
        IngestError: malformed row or duplicate (t, site), with line number.
    """
    per_time: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        lineno = 0
        header_seen = False
        for raw in fh:
            lineno += 1
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                cols = [c.strip() for c in line.split(",")]
                if cols != ["t", "lat_index", "lon_index", "value"]:
                    raise IngestError(
                        f"line {lineno}: expected header "
                        f"'t,lat_index,lon_index,value', got {line!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise IngestError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                t = int(parts[0])
                lat = int(parts[1])
                lon = int(parts[2])
                value = float(parts[3])
            except ValueError as exc:
                raise IngestError(f"line {lineno}: {exc}") from None
            if t < 1:
                raise IngestError(f"line {lineno}: time must be >= 1, got {t}")
            if not (0 <= lat < n_lat and 0 <= lon < n_lon):
                raise IngestError(
                    f"line {lineno}: site ({lat},{lon}) outside "
                    f"{n_lat}x{n_lon} grid")
            site = lat * n_lon + lon
            bucket = per_time.setdefault(t, {})
            if site in bucket:
                raise IngestError(
                    f"line {lineno}: duplicate observation for t={t}, "
                    f"site ({lat},{lon})")
            bucket[site] = value
    if not header_seen:
        raise IngestError("line 1: missing header")
    if not per_time:
        return []
    T = max(per_time)
    sequence: list[Observation | None] = []
    for t in range(1, T + 1):
        if t not in per_time:
            sequence.append(None)
            continue
        items = sorted(per_time[t].items())
        idx = np.array([s for s, _ in items], dtype=np.int64)
        val = np.array([v for _, v in items], dtype=float)
        sequence.append(Observation(indices=idx, values=val))
    return sequence


def write_grid_csv(observations, n_lat: int, n_lon: int, path,
                   comment: str | None = None) -> None:
    """Inverse of ingest_grid_csv."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("t,lat_index,lon_index,value\n")
        for t, obs in enumerate(observations, start=1):
            if obs is None:
                continue
            for site, value in zip(obs.indices, obs.values):
                fh.write(f"{t},{site // n_lon},{site % n_lon},{float(value)!r}\n")


# ---------------------------------------------------------------------------
# Hyperparameter fitting from data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RealDataFit:
    range: float
    process_variance: float
    noise_variance: float
    initial_variance: float
    n_times_used: int


def fit_real_data_hyperparameters(observations, points: np.ndarray,
                                  family: str = "matern15",
                                  min_obs: int = 20) -> RealDataFit:
    """Per-time demeaned spatial MLE fits, averaged over time.

    The time-averaged signal variance is split 9:1 into the initial and
    process variances; the averaged range and nugget become the shared range
    and the observation-noise variance.

    Raises:
        FitError: if no time point yields a successful fit.
    """
    ranges, signals, nuggets = [], [], []
    for obs in observations:
        if obs is None or obs.count < min_obs:
            continue
        values = obs.values - np.mean(obs.values)
        try:
            fit = fit_spatial_mle(points[obs.indices], values,
                                  family=family, min_obs=min_obs)
        except FitError as exc:
            if exc.best is None:
                continue
            fit = exc.best
        ranges.append(fit.range)
        signals.append(fit.signal_variance)
        nuggets.append(fit.nugget_variance)
    if not ranges:
        raise FitError("no time point produced a usable spatial fit")
    total_signal = float(np.mean(signals))
    return RealDataFit(
        range=float(np.mean(ranges)),
        process_variance=total_signal / 10.0,
        noise_variance=float(np.mean(nuggets)),
        initial_variance=9.0 * total_signal / 10.0,
        n_times_used=len(ranges),
    )
