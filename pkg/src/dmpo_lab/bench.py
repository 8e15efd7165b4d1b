"""Seeded evaluation sweeps, summary statistics, CSV/SVG reports, and footprint accounting."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import mppi
from .config import ExperimentConfig
from .dmpo import DmpoController, DmpoNets
from .mppi import MppiController
from .neural import load_checkpoint
from .sim import P, Q, STATE_DIM
from .task import Episode
from .trainer import E2eController, E2E_OBS_DIM, load_e2e

EPISODE_COLUMNS = ["controller", "N", "task", "disturbance", "seed", "steps", "total_cost",
                   "median_pos_err", "median_ori_err", "crashed"]
SUMMARY_COLUMNS = ["controller", "N", "task", "disturbance", "episodes", "crashes", "median_cost",
                   "q1_cost", "q3_cost", "median_pos_err", "median_ori_err"]
STEP_COLUMNS = ["controller", "N", "seed", "t", "stage_cost", "pos_err", "ori_err",
                *[f"x{i}" for i in range(STATE_DIM)], "u0", "u1", "u2", "u3"]


@dataclass
class EpisodeRecord:
    controller: str
    N: int
    task: str
    disturbance: str
    seed: int
    states: np.ndarray        # (T, 17) post-step states
    controls: np.ndarray      # (T, 4) normalized controls
    stage_costs: np.ndarray   # (T,)
    pos_err: np.ndarray       # (T,) metres
    ori_err: np.ndarray       # (T,) radians
    crashed: bool

    @property
    def steps(self) -> int:
        return len(self.stage_costs)

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_costs))

    @property
    def median_pos_err(self) -> float:
        return float(np.median(self.pos_err)) if self.steps else float("nan")

    @property
    def median_ori_err(self) -> float:
        return float(np.median(self.ori_err)) if self.steps else float("nan")

    def row(self) -> dict:
        return {"controller": self.controller, "N": self.N, "task": self.task, "disturbance": self.disturbance,
                "seed": self.seed, "steps": self.steps, "total_cost": self.total_cost,
                "median_pos_err": self.median_pos_err, "median_ori_err": self.median_ori_err,
                "crashed": int(self.crashed)}


def orientation_error(q: np.ndarray, q_des: np.ndarray) -> np.ndarray:
    """Rotation angle between two unit quaternions (sign-invariant), radians."""
    dot = np.abs(np.sum(q * q_des, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def quartiles(values: Sequence[float]):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(q1), float(med), float(q3)


# --------------------------------------------------------------------------
# controllers
# --------------------------------------------------------------------------

class _Planner:
    """Adapts MPPI/DMPO controllers to ``act(episode)``."""

    def __init__(self, inner, H: int):
        self.inner, self.H = inner, H

    def reset(self) -> None:
        self.inner.reset()

    def act_episode(self, ep: Episode) -> np.ndarray:
        ref_p, ref_q = ep.traj.window(ep.ref_index(), self.H)
        return self.inner.act(ep.x, ref_p, ref_q)


def _checkpoint_path(cfg: ExperimentConfig) -> Path:
    if not cfg.checkpoint:
        raise FileNotFoundError(f"controller {cfg.controller!r} needs a checkpoint")
    path = Path(cfg.checkpoint.format(N=cfg.N))
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def load_dmpo_nets(cfg: ExperimentConfig) -> DmpoNets:
    nets, _ = load_checkpoint(_checkpoint_path(cfg))
    return DmpoNets.from_dict(nets)


def make_controller(cfg: ExperimentConfig, nets: Optional[DmpoNets] = None):
    model = cfg.sim
    w = cfg.task_cfg.weights
    if cfg.controller == "mppi":
        return _Planner(MppiController(cfg.mppi, model, w), cfg.mppi.H)
    if cfg.controller == "dmpo":
        nets = load_dmpo_nets(cfg) if nets is None else nets
        return _Planner(DmpoController(cfg.mppi, model, w, nets), cfg.mppi.H)
    policy = load_e2e(_checkpoint_path(cfg))
    if policy.n_in != E2E_OBS_DIM:
        raise ValueError("checkpoint does not hold an end-to-end policy")
    return E2eController(policy, model)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def run_episode(cfg: ExperimentConfig, seed: int, controller) -> EpisodeRecord:
    """Closed-loop run on trajectory ``seed``; the start-state noise uses the same seed."""
    traj = cfg.task_cfg.trajectory(seed)
    rng = np.random.default_rng(seed)
    ep = Episode.start(traj, cfg.plant, cfg.sim, cfg.task_cfg.weights, rng,
                       cfg.task_cfg.init_pos_std, cfg.task_cfg.init_vel_std)
    controller.reset()
    xs, us, costs, pe, oe = [], [], [], [], []
    while not ep.done:
        u = np.asarray(controller.act_episode(ep), dtype=float)
        i = ep.ref_index()
        costs.append(ep.advance(u))
        us.append(u)
        xs.append(ep.x.copy())
        pe.append(float(np.linalg.norm(ep.x[P] - traj.positions[i])))
        oe.append(float(orientation_error(ep.x[Q], traj.quats[i])))
    return EpisodeRecord(cfg.controller, cfg.N, cfg.task, cfg.disturbance, seed,
                         np.array(xs).reshape(-1, STATE_DIM), np.array(us).reshape(-1, 4), np.array(costs),
                         np.array(pe), np.array(oe), ep.crashed)


def summarize(records: Sequence[EpisodeRecord]) -> dict:
    totals = [r.total_cost for r in records if r.steps]
    if not totals:
        return {"episodes": len(records), "crashes": 0, "no_data": True, "median_cost": float("nan"),
                "q1_cost": float("nan"), "q3_cost": float("nan"), "median_pos_err": float("nan"),
                "median_ori_err": float("nan")}
    q1, med, q3 = quartiles(totals)
    return {"episodes": len(records), "crashes": int(sum(r.crashed for r in records)), "no_data": False,
            "median_cost": med, "q1_cost": q1, "q3_cost": q3,
            "median_pos_err": float(np.median([r.median_pos_err for r in records if r.steps])),
            "median_ori_err": float(np.median([r.median_ori_err for r in records if r.steps]))}


def run_eval(cfg: ExperimentConfig, nets: Optional[DmpoNets] = None, controller=None):
    """Evaluate ``cfg.controller`` on every seed. Returns (records, summary)."""
    ctl = controller if controller is not None else make_controller(cfg, nets)
    records = [run_episode(cfg, s, ctl) for s in cfg.seeds]
    return records, summarize(records)


def improvement(cost_a: float, cost_b: float) -> float:
    """Relative improvement of a over b, 1 - a/b."""
    return 1.0 - cost_a / cost_b


def select_checkpoint(cfg: ExperimentConfig, paths: Sequence, seeds: Sequence[int]):
    """Pick the DMPO checkpoint with the lowest median cost on ``seeds``.

    Use seeds disjoint from the evaluation seeds. Ties go to the earlier path.
    Returns (best path, [(path, median cost), ...]).
    """
    if not paths:
        raise ValueError("no checkpoints to select from")
    table = []
    for p in paths:
        _, summ = run_eval(cfg.with_(controller="dmpo", checkpoint=str(p), seeds=tuple(seeds)))
        table.append((Path(p), summ["median_cost"]))
    best = min(range(len(table)), key=lambda i: (table[i][1], i))
    return table[best][0], table


@dataclass
class SweepResult:
    records: List[EpisodeRecord] = field(default_factory=list)
    table: List[dict] = field(default_factory=list)


def sweep(base: ExperimentConfig, n_list: Sequence[int], controllers: Sequence[str]) -> SweepResult:
    """Cross-product evaluation. ``base.checkpoint`` may contain ``{N}`` for per-N checkpoints.

    Each table row carries ``improvement_vs_mppi`` (against MPPI at the same
    N, when evaluated) and ``improvement_vs_best_mppi`` (against the lowest
    MPPI median over the sweep).
    """
    out = SweepResult()
    for ctl in controllers:
        for n in n_list:
            cfg = base.with_(controller=ctl, N=int(n))
            recs, summ = run_eval(cfg)
            out.records += recs
            out.table.append({"controller": ctl, "N": int(n), **summ,
                              "crash_rate": summ["crashes"] / max(summ["episodes"], 1)})
    mppi_cost = {r["N"]: r["median_cost"] for r in out.table if r["controller"] == "mppi"}
    best = min(mppi_cost.values()) if mppi_cost else None
    for row in out.table:
        b = mppi_cost.get(row["N"])
        row["improvement_vs_mppi"] = improvement(row["median_cost"], b) if b is not None else float("nan")
        row["improvement_vs_best_mppi"] = (improvement(row["median_cost"], best) if best is not None
                                           else float("nan"))
    return out


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def write_episodes(records: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, EPISODE_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def write_steps(records: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for r in records:
            for t in range(r.steps):
                w.writerow([r.controller, r.N, r.seed, t, repr(float(r.stage_costs[t])), repr(float(r.pos_err[t])),
                            repr(float(r.ori_err[t])), *map(repr, map(float, r.states[t])),
                            *map(repr, map(float, r.controls[t]))])


def read_episodes(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["N"] = int(row["N"])
            row["seed"] = int(row["seed"])
            row["steps"] = int(row["steps"])
            row["crashed"] = bool(int(row["crashed"]))
            for k in ("total_cost", "median_pos_err", "median_ori_err"):
                row[k] = float(row[k])
            rows.append(row)
    return rows


def summary_rows(episodes: Sequence[dict]) -> List[dict]:
    groups: Dict[tuple, List[dict]] = {}
    for e in episodes:
        groups.setdefault((e["controller"], e["N"], e["task"], e["disturbance"]), []).append(e)
    rows = []
    for (ctl, n, task, dist), eps in groups.items():
        valid = [e for e in eps if e["steps"] > 0]
        q1, med, q3 = quartiles([e["total_cost"] for e in valid])
        rows.append({"controller": ctl, "N": n, "task": task, "disturbance": dist, "episodes": len(eps),
                     "crashes": sum(e["crashed"] for e in eps), "median_cost": med, "q1_cost": q1, "q3_cost": q3,
                     "median_pos_err": float(np.median([e["median_pos_err"] for e in valid])) if valid else float("nan"),
                     "median_ori_err": float(np.median([e["median_ori_err"] for e in valid])) if valid else float("nan")})
    return rows


def box_stats(values: Sequence[float]) -> dict:
    """Median, quartiles, and whiskers at the most extreme data within 1.5 IQR."""
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = quartiles(v)
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    # interpolated quartiles can lie beyond the innermost data; whiskers never enter the box
    lo, hi = min(float(inside.min()), q1), max(float(inside.max()), q3)
    return {"q1": q1, "median": med, "q3": q3, "lo": lo, "hi": hi,
            "outliers": [float(x) for x in v if x < q1 - 1.5 * iqr or x > q3 + 1.5 * iqr]}


def box_plot_svg(groups: Dict[str, Sequence[float]], title: str, ylabel: str, width: int = 640,
                 height: int = 360) -> str:
    labels = list(groups)
    stats = [box_stats(groups[k]) for k in labels]
    all_v = [x for k in labels for x in groups[k]]
    lo, hi = (min(all_v), max(all_v)) if all_v else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5 * max(abs(lo), 1.0), hi + 0.5 * max(abs(hi), 1.0)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    left, right, top, bottom = 70, 20, 30, 60
    pw, ph = width - left - right, height - top - bottom

    def y(v):
        return top + ph * (hi - v) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
             f'<text transform="translate(16,{top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">{ylabel}</text>']
    for tick in np.linspace(lo, hi, 5):
        parts.append(f'<line x1="{left - 4}" y1="{y(tick):.1f}" x2="{left}" y2="{y(tick):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.3g}</text>')
    slot = pw / max(len(labels), 1)
    for i, (label, s) in enumerate(zip(labels, stats)):
        cx = left + slot * (i + 0.5)
        bw = min(40.0, slot * 0.5)
        parts.append(f'<g class="box" data-label="{label}" data-median="{s["median"]!r}">')
        parts.append(f'<line x1="{cx:.1f}" y1="{y(s["lo"]):.1f}" x2="{cx:.1f}" y2="{y(s["q1"]):.1f}" stroke="black"/>')
        parts.append(f'<line x1="{cx:.1f}" y1="{y(s["q3"]):.1f}" x2="{cx:.1f}" y2="{y(s["hi"]):.1f}" stroke="black"/>')
        for v in (s["lo"], s["hi"]):
            parts.append(f'<line x1="{cx - bw / 4:.1f}" y1="{y(v):.1f}" x2="{cx + bw / 4:.1f}" y2="{y(v):.1f}" '
                         f'stroke="black"/>')
        parts.append(f'<rect x="{cx - bw / 2:.1f}" y="{y(s["q3"]):.1f}" width="{bw:.1f}" '
                     f'height="{max(y(s["q1"]) - y(s["q3"]), 0.0):.1f}" fill="#9ecae1" stroke="black"/>')
        parts.append(f'<line x1="{cx - bw / 2:.1f}" y1="{y(s["median"]):.1f}" x2="{cx + bw / 2:.1f}" '
                     f'y2="{y(s["median"]):.1f}" stroke="#d62728" stroke-width="2"/>')
        for o in s["outliers"]:
            parts.append(f'<circle cx="{cx:.1f}" cy="{y(o):.1f}" r="2.5" fill="none" stroke="black"/>')
        parts.append('</g>')
        parts.append(f'<text x="{cx:.1f}" y="{top + ph + 16}" text-anchor="middle">{label}</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def report(episodes, out_dir) -> dict:
    """Write summary CSV and box-plot SVGs for cost, position and orientation error.

    ``episodes`` is a list of EpisodeRecord or of rows read by ``read_episodes``.
    """
    rows = [e.row() if isinstance(e, EpisodeRecord) else e for e in episodes]
    if not rows:
        raise ValueError("no episodes to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(episodes[0], EpisodeRecord):
        write_episodes(episodes, out / "episodes.csv")
    summary = summary_rows(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for r in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    written = {"summary": out / "summary.csv"}
    for metric, label in (("total_cost", "total cost"), ("median_pos_err", "median position error (m)"),
                          ("median_ori_err", "median orientation error (rad)")):
        groups: Dict[str, List[float]] = {}
        for r in rows:
            if r["steps"] > 0:
                key = f'{r["controller"]}@{r["N"]}' + ("" if r["disturbance"] == "none" else f' {r["disturbance"]}')
                groups.setdefault(key, []).append(r[metric])
        path = out / f"box_{metric}.svg"
        path.write_text(box_plot_svg(groups, label, label))
        written[metric] = path
    return written


# --------------------------------------------------------------------------
# footprint
# --------------------------------------------------------------------------

def buffer_bytes(cfg: ExperimentConfig, itemsize: int = 8) -> Dict[str, int]:
    """Analytic size of the per-step controller buffers, by name."""
    H, N, d = cfg.mppi.H, cfg.N, mppi.CONTROL_DIM
    out = {
        "samples": N * H * d,
        "rollout_states": N * H * STATE_DIM,
        "costs_weights": 2 * N,
        "plan": 2 * H * d,
    }
    if cfg.controller == "dmpo":
        K = H * d
        n_in = 2 * K + N
        h = cfg.dmpo.hidden
        # shift, mean_opt, cov_opt activations (input, hidden, output)
        out["network_activations"] = (2 * K + h + 2 * K) + (n_in + h + 3 * K) + (n_in + h + 2 * K)
    elif cfg.controller == "e2e":
        out = {"network_activations": E2E_OBS_DIM + 2 * 256 + 8}
    return {k: v * itemsize for k, v in out.items()}


def measure_footprint(cfg: ExperimentConfig, steps: int = 100, nets: Optional[DmpoNets] = None) -> dict:
    """Analytic buffer bytes and mean wall time per control step over ``steps`` steps.

    DMPO without a checkpoint is timed with freshly initialized networks,
    which have the same cost per step as trained ones.
    """
    if cfg.controller == "dmpo" and nets is None:
        nets = load_dmpo_nets(cfg) if cfg.checkpoint else DmpoNets.init(cfg.mppi, cfg.dmpo,
                                                                         np.random.default_rng(0))
    ctl = make_controller(cfg, nets)
    traj = cfg.task_cfg.trajectory(cfg.seeds[0])
    ep = Episode.start(traj, cfg.sim, cfg.sim, cfg.task_cfg.weights, np.random.default_rng(0), 0.0, 0.0)
    ctl.reset()
    ctl.act_episode(ep)   # warm-up (compilation, caches)
    times = []
    for _ in range(steps):
        if ep.done:
            break
        t0 = time.perf_counter()
        u = ctl.act_episode(ep)
        times.append(time.perf_counter() - t0)
        ep.advance(u)
    parts = buffer_bytes(cfg)
    return {"controller": cfg.controller, "N": cfg.N, "buffer_bytes": int(sum(parts.values())),
            "buffers": parts, "step_s": float(np.mean(times)) if times else float("nan")}


def footprint_ratio(a: dict, b: dict) -> dict:
    return {"memory_ratio": a["buffer_bytes"] / b["buffer_bytes"], "time_ratio": a["step_s"] / b["step_s"]}
