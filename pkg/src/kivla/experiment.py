"""Preset-by-seed experiment matrix, summary table and learning-curve plots.

Layout of an experiment directory::

    runs/<preset>-s<seed>/{metrics.csv, config.json, model.ckpt}
    warm_cache/            caption-only warm starts shared by presets with one seed
    latency.csv            wall-clock decode timings (not reproducible)
    summary.csv            derived from the metrics CSVs only
    curves/<preset>.svg    derived from the metrics CSVs only
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env
from .codecs import StateEncoder
from .decode import bench_latency
from .policy import ChunkPolicy, available_modes
from .train import STATE_KINDS, TrainingData, load_checkpoint, load_records, preset_config, read_metrics, train

THRESHOLD = 0.8
NOT_REACHED = "not reached"
SUMMARY_FIELDS = ("preset", "seed", "steps_to_threshold", "final_step", "final_score", "final_follow_rate",
                  "ood_follow_rate", "forward_passes")
LATENCY_FIELDS = ("preset", "seed", "mode", "forward_passes", "tokens", "seconds_per_chunk", "chunks", "failures")
BENCH_SEED_BASE = 970_000


def run_name(preset: str, seed: int) -> str:
    return f"{preset}-s{seed}"


def steps_to_threshold(rows: Sequence[dict], threshold: float = THRESHOLD) -> int | None:
    """Step of the first evaluation whose score reaches ``threshold``."""
    for r in rows:
        if r["eval_score"] is not None and r["eval_score"] >= threshold:
            return int(r["step"])
    return None


def median_steps(values: Sequence[int | None], horizon: int) -> float:
    """Median steps-to-threshold; runs that never reach it count as ``horizon``."""
    return float(np.median([horizon if v is None else v for v in values]))


def bench_observations(n: int, difficulty: str = "ambiguous") -> list[env.Observation]:
    out = []
    for s in range(BENCH_SEED_BASE, BENCH_SEED_BASE + n):
        scene, state, instr = env.reset(s, difficulty)
        out.append(env.Observation(env.observe(scene, state), instr.token_ids, state.q(scene.size)))
    return out


def latency_for_checkpoint(path, n_obs: int = 20, modes: Sequence[str] | None = None):
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    mcfg = cfg.model_config()
    policy = ChunkPolicy(mcfg, ckpt.params, ckpt.codec, StateEncoder(STATE_KINDS[cfg.state_encoding]),
                         n_flow_steps=cfg.n_flow_steps, seed=cfg.seed)
    return bench_latency(policy, bench_observations(n_obs), modes or available_modes(mcfg.variant))


def _write_csv(rows: Sequence[dict], fields: Sequence[str], path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in fields})
    Path(path).write_text(buf.getvalue())


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def run_matrix(presets: Sequence[str], seeds: Sequence[int], out_dir, data_path, overrides: dict | None = None,
               latency_obs: int = 20, resume: bool = True, log: Callable[[str], None] | None = None) -> Path:
    """Train every preset for every seed, benchmark decoding, then write the report."""
    out_dir = Path(out_dir)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    records = load_records(data_path)
    data_cache: dict[str, TrainingData] = {}
    latency_rows = read_latency(out_dir / "latency.csv") if resume else []
    for preset in presets:
        for seed in seeds:
            kw = {"warm_start_cache": str(out_dir / "warm_cache"), **(overrides or {})}
            cfg = preset_config(preset, seed=seed, data=str(data_path), **kw)
            rdir = out_dir / "runs" / run_name(preset, seed)
            done = (rdir / "model.ckpt").exists() and (rdir / "metrics.csv").exists()
            if not (resume and done):
                if cfg.codec not in data_cache:
                    mcfg = cfg.model_config()
                    data_cache[cfg.codec] = TrainingData(records, cfg.codec, horizon=mcfg.horizon,
                                                         action_dim=mcfg.action_dim)
                if log:
                    log(f"train {run_name(preset, seed)}")
                train(cfg, rdir, data=data_cache[cfg.codec],
                      log=(lambda row: log(f"  {row}")) if log else None)
            if latency_obs and not any(r["preset"] == preset and int(r["seed"]) == seed for r in latency_rows):
                for rep in latency_for_checkpoint(rdir / "model.ckpt", latency_obs):
                    latency_rows.append({"preset": preset, "seed": seed, **rep.as_row()})
                _write_csv(latency_rows, LATENCY_FIELDS, out_dir / "latency.csv")
    write_report(out_dir)
    return out_dir


def read_latency(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def collect_runs(out_dir) -> dict[str, list[tuple[int, list[dict]]]]:
    """``{preset: [(seed, metric rows), ...]}`` read from the stored CSVs, sorted."""
    runs: dict[str, list[tuple[int, list[dict]]]] = {}
    for p in sorted(Path(out_dir, "runs").glob("*/metrics.csv")):
        rows = read_metrics(p)
        if not rows:
            continue
        runs.setdefault(rows[0]["preset"], []).append((int(rows[0]["seed"]), rows))
    for v in runs.values():
        v.sort(key=lambda t: t[0])
    return dict(sorted(runs.items()))


def summary_rows(out_dir, threshold: float = THRESHOLD) -> list[dict]:
    out = []
    for preset, runs in collect_runs(out_dir).items():
        for seed, rows in runs:
            last = rows[-1]
            s = steps_to_threshold(rows, threshold)
            out.append({
                "preset": preset, "seed": seed, "steps_to_threshold": NOT_REACHED if s is None else s,
                "final_step": int(last["step"]), "final_score": last["eval_score"],
                "final_follow_rate": last["follow_rate"], "ood_follow_rate": last["ood_follow_rate"],
                "forward_passes": last["forward_passes"],
            })
    return out


def write_report(out_dir, threshold: float = THRESHOLD) -> None:
    """Regenerate ``summary.csv`` and ``curves/*.svg`` from the metrics CSVs."""
    out_dir = Path(out_dir)
    _write_csv(summary_rows(out_dir, threshold), SUMMARY_FIELDS, out_dir / "summary.csv")
    curves = out_dir / "curves"
    curves.mkdir(exist_ok=True)
    for preset, runs in collect_runs(out_dir).items():
        (curves / f"{preset}.svg").write_text(learning_curve_svg(preset, runs, threshold))


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def learning_curve_svg(title: str, runs: Sequence[tuple[int, list[dict]]], threshold: float = THRESHOLD,
                       width: int = 480, height: int = 300) -> str:
    """Eval score against training step, one polyline per seed."""
    left, right, top, bottom = 50, 20, 30, 40
    max_step = max((int(r["step"]) for _, rows in runs for r in rows), default=1) or 1
    pw, ph = width - left - right, height - top - bottom

    def xy(step, score):
        return left + pw * step / max_step, top + ph * (1 - score)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}: eval score</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    ty = xy(0, threshold)[1]
    parts.append(f'<line x1="{left}" y1="{ty:.2f}" x2="{left + pw}" y2="{ty:.2f}" stroke="gray" stroke-dasharray="4 3"/>')
    for v in (0.0, 0.5, 1.0):
        y = xy(0, v)[1]
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    for s in (0, max_step // 2, max_step):
        x = xy(s, 0)[0]
        parts.append(f'<text x="{x:.2f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{s}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">step</text>')
    for i, (seed, rows) in enumerate(runs):
        pts = [xy(int(r["step"]), r["eval_score"]) for r in rows if r["eval_score"] is not None]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        parts.append(f'<text x="{left + pw - 4}" y="{top + 12 + 12 * i}" text-anchor="end" font-size="10" '
                     f'fill="{color}">seed {seed}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def preset_medians(out_dir, horizon: int | None = None) -> dict[str, float]:
    """Median steps-to-threshold per preset, with unreached runs counted at ``horizon``."""
    out = {}
    for preset, runs in collect_runs(out_dir).items():
        h = horizon if horizon is not None else max(int(rows[-1]["step"]) for _, rows in runs) + 1
        out[preset] = median_steps([steps_to_threshold(rows) for _, rows in runs], h)
    return out


def final_metric(out_dir, preset: str, key: str) -> list[float]:
    return [rows[-1][key] for _, rows in collect_runs(out_dir).get(preset, [])]

