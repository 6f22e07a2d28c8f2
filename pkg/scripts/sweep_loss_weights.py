"""Coarse sweep of the loss weights beta (gradient consistency) and delta (surface).

Trains on a Fibonacci sample of the unit sphere for every (beta, delta) pair,
extracts a mesh and scores it against a dense analytic sample. Prints one row
per pair and optionally writes the table as JSON.

    python scripts/sweep_loss_weights.py --betas 0.01 0.1 1 --deltas 0.001 0.01 0.1
"""

import argparse
import json
import math
import time

import numpy as np

from pullsdf import fftnet, meshing, metrics, trainer
from pullsdf import pointcloud as pcm


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def run(beta: float, delta: float, args) -> dict:
    cloud, transform = pcm.normalize(pcm.PointCloud(fibonacci_sphere(args.points)))
    base = trainer.TrainConfig(
        iterations=args.iterations, batch_queries=args.batch, learning_rate=args.lr,
        head_hidden=args.hidden, log_every=args.iterations, seed=args.seed,
        stack=fftnet.StackConfig(width=args.width, seed=args.seed),
    )
    config = trainer.TrainConfig.from_flat({"loss.beta": beta, "loss.delta": delta}, base)
    t0 = time.perf_counter()
    evaluator, log = trainer.train(cloud, config)
    mesh = meshing.denormalize(meshing.extract_mesh(evaluator, args.resolution), transform)
    row = {"beta": beta, "delta": delta, "final_loss": log.records[-1]["total"], "faces": mesh.n_faces}
    if mesh.n_faces:
        gt = fibonacci_sphere(args.eval_samples)
        report = metrics.evaluate_reconstruction(mesh, pcm.PointCloud(gt, gt), n=args.eval_samples)
        row.update(cd_l2_x100=report.cd_l2_x100, nc=report.nc, euler=mesh.euler_characteristic())
    else:
        row.update(cd_l2_x100=math.inf, nc=0.0, euler=None)
    row["seconds"] = time.perf_counter() - t0
    return row


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--betas", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    p.add_argument("--deltas", type=float, nargs="+", default=[0.001, 0.01, 0.1])
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=250)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--eval-samples", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="write the table as JSON")
    args = p.parse_args(argv)

    rows = []
    print(f"{'beta':>8} {'delta':>8} {'CD_L2x100':>10} {'NC':>7} {'chi':>4} {'loss':>10} {'s':>7}")
    for beta in args.betas:
        for delta in args.deltas:
            r = run(beta, delta, args)
            rows.append(r)
            print(
                f"{beta:8.3g} {delta:8.3g} {r['cd_l2_x100']:10.5f} {r['nc']:7.4f} {str(r['euler']):>4} "
                f"{r['final_loss']:10.3e} {r['seconds']:7.1f}",
                flush=True,
            )
    best = min(rows, key=lambda r: r["cd_l2_x100"])
    print(f"best: beta={best['beta']:g} delta={best['delta']:g} CD_L2x100={best['cd_l2_x100']:.5f}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
