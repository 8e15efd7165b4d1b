"""Command-line harness: train, eval, sweep, report, footprint.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .trainer import train_dmpo, train_e2e

log = logging.getLogger("dmpo_lab")


def _print_summary(summary: dict) -> None:
    if summary.get("no_data"):
        print("no data")
        return
    print(f"episodes={summary['episodes']} crashes={summary['crashes']} median_cost={summary['median_cost']:.6g} "
          f"q1={summary['q1_cost']:.6g} q3={summary['q3_cost']:.6g} "
          f"median_pos_err={summary['median_pos_err']:.4g} m")


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    def progress(row):
        log.info("iter %d  ep_cost %.4g  actor %.4g  critic %.4g  gate %.4g  kl %.3g", row["iter"],
                 row["mean_ep_cost"], row["actor_loss"], row["critic_loss"], row["mean_gate"], row["approx_kl"])

    if args.e2e:
        res = train_e2e(cfg.ppo, cfg.sim, cfg.task_cfg, seed=cfg.seed, out_dir=out, progress=progress)
    else:
        res = train_dmpo(cfg.ppo, cfg.sim, cfg.task_cfg, cfg.mppi, cfg.dmpo, seed=cfg.seed, out_dir=out,
                         progress=progress)
    print(f"{res['status']}; checkpoint {res['checkpoint']}")
    return 0 if res["status"] == "completed" else 1


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if args.checkpoint:
        cfg = cfg.with_(checkpoint=args.checkpoint)
    records, summary = bench.run_eval(cfg)
    _print_summary(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        bench.write_steps(records, out / "steps.csv")
        if records and any(r.steps for r in records):
            bench.report(records, out)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def _int_list(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    controllers = [c.strip() for c in args.controllers.split(",") if c.strip()]
    try:
        n_list = _int_list(args.n)
        for c in controllers:
            cfg.with_(controller=c)
        for n in n_list:
            cfg.with_(N=n)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    res = bench.sweep(cfg, n_list, controllers)
    print(f"{'controller':>10} {'N':>5} {'median':>10} {'q1':>10} {'q3':>10} {'crash':>6} {'vs_mppi':>8}")
    for row in res.table:
        print(f"{row['controller']:>10} {row['N']:>5} {row['median_cost']:>10.4g} {row['q1_cost']:>10.4g} "
              f"{row['q3_cost']:>10.4g} {row['crash_rate']:>6.2f} {100 * row['improvement_vs_mppi']:>7.1f}%")
    if args.out:
        out = Path(args.out)
        bench.report(res.records, out)
        (out / "sweep.json").write_text(json.dumps(res.table, indent=2) + "\n")
    return 0


def cmd_report(args) -> int:
    rows = bench.read_episodes(Path(args.inp) / "episodes.csv")
    written = bench.report(rows, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_footprint(args, cfg: ExperimentConfig) -> int:
    ref = bench.measure_footprint(cfg.with_(controller="mppi", N=args.ref_n), steps=args.steps)
    mine = bench.measure_footprint(cfg, steps=args.steps)
    ratio = bench.footprint_ratio(ref, mine)
    for fp in (ref, mine):
        print(f"{fp['controller']}@{fp['N']}: buffers {fp['buffer_bytes']} B, {1e3 * fp['step_s']:.3f} ms/step")
    print(f"memory ratio {ratio['memory_ratio']:.2f}x, time ratio {ratio['time_ratio']:.2f}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmpo-lab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train DMPO (or the end-to-end baseline with --e2e)")
    p.add_argument("--config", required=True)
    p.add_argument("--e2e", action="store_true")
    p.add_argument("--out", default="runs/train")

    p = sub.add_parser("eval", help="evaluate one controller on the configured seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="evaluate controllers x sample counts")
    p.add_argument("--config", required=True)
    p.add_argument("--n", default="64,256,1024")
    p.add_argument("--controllers", default="mppi,dmpo")
    p.add_argument("--out")

    p = sub.add_parser("report", help="summary CSV and box plots from an episodes.csv directory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("footprint", help="buffer bytes and step time against MPPI at a reference N")
    p.add_argument("--config", required=True)
    p.add_argument("--ref-n", type=int, default=4096)
    p.add_argument("--steps", type=int, default=100)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "report":
            return cmd_report(args)
        cfg = load_config(args.config)
        handler = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "footprint": cmd_footprint}
        return handler[args.cmd](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
