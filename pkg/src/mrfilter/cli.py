"""Command-line interface: simulate scenarios, filter external data, export a
covariance factorization, and run the scaling bench.

Config files are JSON.  A filter config needs "grid", "partition",
"dynamics", "process_cov", "initial_cov", "observation", and "method"
sections; see README for a worked example.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .harness import (
    MethodSpec,
    build_covariance,
    build_dynamics,
    build_grid,
    build_observation_model,
    get_scenario,
    ingest_grid_csv,
    run_method,
    run_scaling,
    run_scenario,
)
from .filters import StateSpaceModel
from .mralp import decompose
from .partition import build_partition, partition_summary


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _grid_from_config(cfg: dict):
    grid_cfg = cfg["grid"]
    if grid_cfg.get("kind", "square") == "circle":
        return build_grid("circle", int(grid_cfg["n"]))
    if "n_side" in grid_cfg:
        n = int(grid_cfg["n_side"]) ** 2
    else:
        n = int(grid_cfg["n"])
    return build_grid("square", n)


def _partition_from_config(cfg: dict, grid):
    pc = cfg["partition"]
    return build_partition(
        grid, M=int(pc["M"]), J=pc.get("J", 2), r=pc["r"],
        r_prime=pc.get("r_prime", pc["r"]), seed=int(pc.get("seed", 0)),
    )


def _cmd_simulate(args) -> int:
    scenario = get_scenario(args.scenario, replicates=args.replicates,
                            seed=args.seed)
    table = run_scenario(scenario, out_dir=args.out)
    print(f"scenario {scenario.name}: wrote {args.out}/summary.csv")
    for name in table.method_names:
        print(f"  {name:<16} mspe_ratio={table.mspe_ratio[name]:.4f} "
              f"relative_time={table.relative_time[name]:.4f}")
    if table.failures:
        print(f"  {len(table.failures)} method failure(s); see failures.csv",
              file=sys.stderr)
        return 1
    return 0


def _cmd_filter(args) -> int:
    cfg = _load_config(args.config)
    grid = _grid_from_config(cfg)
    if grid.shape is None:
        raise SystemExit("filter command expects a regular square grid")
    n_lat, n_lon = grid.shape
    observations = ingest_grid_csv(args.data, n_lat, n_lon)
    model = StateSpaceModel(
        grid=grid,
        dynamics=build_dynamics(cfg["dynamics"], grid),
        process_cov=build_covariance(cfg["process_cov"], grid),
        initial_mean=np.full(grid.n_points, float(cfg.get("initial_mean", 0.0))),
        initial_cov=build_covariance(cfg["initial_cov"], grid),
        observation_model=build_observation_model(cfg["observation"]),
        observations=observations,
    )
    mc = cfg["method"]
    method = MethodSpec(
        name=mc.get("name", mc["kind"]), kind=mc["kind"],
        M=int(mc.get("M", 2)), J=mc.get("J", 2), r=mc.get("r", 50),
        r_prime=mc.get("r_prime", 10), epsilon=float(mc.get("epsilon", 1e-6)),
        ensemble_size=int(mc.get("ensemble_size", 30)),
        taper_row_nnz=mc.get("taper_row_nnz", 30),
    )
    partition = None
    if method.kind in ("mrf", "mrflp"):
        partition = _partition_from_config(cfg, grid)
    result = run_method(method, model, partition=partition,
                        enkf_seed=int(cfg.get("seed", 0)))

    os.makedirs(args.out, exist_ok=True)
    prov = f"# seed={cfg.get('seed', 0)}, version={__version__}\n"
    means_path = os.path.join(args.out, "means.csv")
    with open(means_path, "w") as fh:
        fh.write(prov)
        fh.write("t,grid_index,mean\n")
        for t in range(result.means.shape[0]):
            for i in range(result.means.shape[1]):
                fh.write(f"{t + 1},{i},{float(result.means[t, i])!r}\n")
    with open(os.path.join(args.out, "diagnostics.csv"), "w") as fh:
        fh.write(prov)
        fh.write("t,newton_iters,forecast_ms,update_ms\n")
        for t in range(result.means.shape[0]):
            fh.write(f"{t + 1},{result.newton_iters[t]},"
                     f"{result.forecast_ms[t]:.3f},{result.update_ms[t]:.3f}\n")
    print(f"wrote {means_path} ({result.method}, T={result.means.shape[0]})")
    return 0


def _cmd_decompose(args) -> int:
    cfg = _load_config(args.config)
    grid = _grid_from_config(cfg)
    partition = _partition_from_config(cfg, grid)
    src_cfg = cfg.get("covariance", cfg.get("initial_cov"))
    src = build_covariance(src_cfg, grid)

    class _Ordered:
        n = grid.n_points

        def block(self, rows, cols):
            return src.block(partition.new_to_old[rows],
                             partition.new_to_old[cols])

    factor = decompose(_Ordered(), partition,
                       projection=cfg.get("projection", "eigen"))

    arrays = {
        "_".join(map(str, path)) or "root": blk
        for path, blk in factor.blocks.items()
    }
    np.savez(args.out + ".npz", **arrays)
    meta = {
        "version": __version__,
        "n": partition.n_points,
        "n_columns": partition.n_columns,
        "blocks": [
            {
                "path": list(reg.path),
                "rows": [reg.start, reg.stop],
                "cols": list(span),
            }
            for reg, span in zip(partition.block_order, partition.column_spans)
        ],
    }
    with open(args.out + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)
    print(partition_summary(partition))
    print(f"wrote {args.out}.npz and {args.out}.json")
    return 0


def _cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    results = run_scaling(sizes, T=args.T, seed=args.seed, out_dir=args.out)
    print(f"wrote {args.out}/scaling.csv")
    for n, table in results:
        for name in table.method_names:
            print(f"  n={n:<6} {name:<12} relative_time="
                  f"{table.relative_time[name]:.4f} "
                  f"mspe_ratio={table.mspe_ratio[name]:.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mrfilter",
        description="Multi-resolution filtering for large spatio-temporal models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a named scenario preset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("filter", help="filter observations from a grid CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("decompose", help="export a covariance factorization")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("bench", help="scaling benchmark across grid sizes")
    p.add_argument("--scenario", default="scaling")
    p.add_argument("--sizes", default="900,1764,2704,3600")
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--seed", type=int, default=20230)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
