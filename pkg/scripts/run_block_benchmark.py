#!/usr/bin/env python3
"""Plan the tall-block pouring benchmark and validate it with the 2D oracle.

Writes the problem bundle (robot/world/tables/coefficients), runs the
planner, then replays the planned container motion in the particle-fluid
simulator and reports the fraction of liquid caught by the target beaker.
"""

import argparse
import os
import sys
import time

import numpy as np

from pourplan import cli
from pourplan import fileio as io
from pourplan import geometry as G
from pourplan import presets as PR


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--coeffs", default=None,
                    help="coefficient file (default: fixed reference values)")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--tau", type=float, default=8.0)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()

    profile = PR.cylinder_profile()
    profile_path = os.path.join(args.out, "cylinder.json")
    io.write_profile(profile_path, profile)
    tables_path = os.path.join(args.out, "tables.npz")
    if cli.main(["tables", "--profile", profile_path, "--out", tables_path]):
        return 1
    tables = G.GeomTables.load(tables_path)

    coeffs_path = args.coeffs or os.path.join(args.out, "coeffs.json")
    if args.coeffs is None:
        io.write_coeffs(coeffs_path, PR.reference_coeffs("cylinder"),
                        tables.container_id, rmse=None, n_samples=None)
    coeffs, _ = io.read_coeffs(coeffs_path)

    problem = PR.block_benchmark(tables, coeffs, n=args.n, tau=args.tau)
    robot_path = os.path.join(args.out, "robot.json")
    world_path = os.path.join(args.out, "world.json")
    problem_path = os.path.join(args.out, "problem.json")
    io.write_robot(robot_path, problem.chain)
    io.write_world(world_path, problem.world)
    io.write_problem(problem_path, problem, "robot.json", "world.json",
                     "tables.npz", os.path.basename(coeffs_path))

    traj_path = os.path.join(args.out, "trajectory.csv")
    if cli.main(["plan", "--problem", problem_path, "--out", traj_path]):
        return 1
    report_path = traj_path.replace(".csv", ".report.json")
    print(open(report_path).read())
    print(f"planned ({time.perf_counter() - t0:.0f}s)")

    landing_path = os.path.join(args.out, "landing.csv")
    rc = cli.main(["validate", "--problem", problem_path,
                   "--trajectory", traj_path, "--profile", profile_path,
                   "--out", landing_path])
    print(f"total {time.perf_counter() - t0:.0f}s; artifacts in {args.out}")
    return rc


if __name__ == "__main__":
    sys.exit(main())
