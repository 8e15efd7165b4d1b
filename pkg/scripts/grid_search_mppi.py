"""Grid search of MPPI hyperparameters on held-out trajectory seeds.

Usage: python scripts/grid_search_mppi.py [--n 256] [--yaw] [--out grid.csv]
"""
import argparse
import csv
import itertools

import numpy as np

from dmpo_lab import mppi, sim, task


def episode_cost(cfg, seed, tc, model):
    traj = tc.trajectory(seed)
    ep = task.Episode.start(traj, model, model, tc.weights, np.random.default_rng(seed))
    ctl = mppi.MppiController(cfg, model, tc.weights)
    total = 0.0
    while not ep.done:
        rp, rq = traj.window(ep.t + 1, cfg.H)
        total += ep.advance(ctl.act(ep.x, rp, rq))
    return total, ep.crashed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--yaw", action="store_true")
    ap.add_argument("--seeds", default="100,101,102,103,104")
    ap.add_argument("--out", default="grid.csv")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    tc = task.TaskConfig(yaw_flips=args.yaw)
    model = sim.SimParams()
    grid = itertools.product([0.01, 0.03, 0.1, 0.3], [0.5, 0.8, 1.0], [0.0, 0.3, 0.7], [0.08, 0.15, 0.3])
    rows = []
    for beta, gmu, gsig, s0 in grid:
        cfg = mppi.MppiConfig(N=args.n, beta=beta, gamma_mu=gmu, gamma_sigma=gsig, sigma_init=(s0,) * 4)
        res = [episode_cost(cfg, s, tc, model) for s in seeds]
        med = float(np.median([c for c, _ in res]))
        crashes = sum(c for _, c in res)
        rows.append((beta, gmu, gsig, s0, med, crashes))
        print(f"beta={beta} gmu={gmu} gsig={gsig} s0={s0} median={med:.3f} crashes={crashes}", flush=True)
    rows.sort(key=lambda r: (r[5], r[4]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "gamma_mu", "gamma_sigma", "sigma_init", "median_cost", "crashes"])
        w.writerows(rows)
    print("best:", rows[0])


if __name__ == "__main__":
    main()
