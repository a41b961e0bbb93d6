"""Experiment presets and CSV emission.

``run_preset`` repeats one configuration, ``compare`` runs the three privacy
modes on identical data and initial weights, ``sweep`` runs the adaptive mode
over a list of clipping percentiles. All CSVs use a header row, commas, and
reals printed with 10 significant digits.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from . import data, federation, metrics, model
from . import rng as rngs
from .config import ExperimentConfig

log = logging.getLogger(__name__)

METHOD_LABELS = {"none": "NP-FL", "static": "DP-FL", "adaptive": "ADP-FL"}

CLIENT_FIELDS = (
    ("loss", "local_loss"),
    ("gamma", "gamma"),
    ("pre_norm", "pre_clip_norm"),
    ("post_norm", "post_clip_norm"),
    ("clip_factor", "clip_factor"),
    ("noise_b", "noise_scale_b"),
    ("degenerate", "degenerate"),
    ("val_dice", "val_dice"),
)

SUMMARY_HEADER = [
    "mode", "run", "seed", "status", "rounds_completed", "best_round", "best_val_dice",
    "test_best_mean", "test_best_std", "test_latest_mean", "test_latest_std",
    "static_threshold", "init_checksum",
]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


@dataclass
class RunOutcome:
    mode: str
    run: int
    seed: int
    result: federation.ExperimentResult


def initial_weights(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    return model.init_weights(rngs.stream(seed, rngs.INIT), cfg.model_hidden, cfg.model_init_scale)


def build_data(cfg: ExperimentConfig) -> data.Federation:
    return data.build_federation(
        cfg.data_seed,
        sizes=cfg.data_sizes,
        heterogeneity=cfg.data_heterogeneity,
        test_size=cfg.data_test_size,
        image_size=cfg.data_image_size,
    )


def run_repeats(cfg: ExperimentConfig, fed: data.Federation | None = None, **priv_overrides) -> list[RunOutcome]:
    """Run ``cfg.repeats`` experiments with seeds ``seed + r``.

    The federation is shared by every repeat (its seed is ``data.seed``);
    the run seed drives initial weights, shuffling and noise.
    """
    fed = fed if fed is not None else build_data(cfg)
    train = federation.TrainSettings(
        total_rounds=cfg.rounds, local=cfg.local_config(), reset_optimizer=cfg.optim_reset_state
    )
    outcomes = []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        priv = cfg.privacy_config(rng_seed=seed, **priv_overrides)
        res = federation.run_experiment(
            fed, initial_weights(cfg, seed), priv, train, seed,
            warmup_rounds=cfg.privacy_warmup_rounds, sample_std=cfg.report_sample_std,
        )
        log.info(
            "mode=%s run=%d seed=%d status=%s best_val=%.4f test_best=%.4f",
            priv.mode, r, seed, res.status, res.state.best_val_dice, res.test.headline_dice,
        )
        outcomes.append(RunOutcome(priv.mode, r, seed, res))
    return outcomes


def rounds_rows(outcomes: list[RunOutcome], n_sites: int) -> tuple[list[str], list[list]]:
    header = ["mode", "run", "seed", "round", "lr", "val_dice", "best_val_dice"]
    for k in range(n_sites):
        header += [f"site{k}_{name}" for name, _ in CLIENT_FIELDS]
    rows = []
    for o in outcomes:
        for rec in o.result.records:
            row = [o.mode, o.run, o.seed, rec.round, rec.lr, rec.val_dice, rec.best_val_dice]
            by_site = {c.site_id: c for c in rec.clients}
            for k in range(n_sites):
                c = by_site[k]
                row += [getattr(c, attr) for _, attr in CLIENT_FIELDS]
            rows.append(row)
    return header, rows


def best_run(outcomes: list[RunOutcome]) -> RunOutcome:
    """The run with the highest headline test Dice (first one on ties)."""
    return max(outcomes, key=lambda o: o.result.test.headline_dice)


def across_runs(outcomes: list[RunOutcome], sample_std: bool = False):
    best = metrics.summarize_runs([o.result.test.best.mean_across_samples for o in outcomes], sample_std)
    latest = metrics.summarize_runs([o.result.test.latest.mean_across_samples for o in outcomes], sample_std)
    return best, latest


def summary_rows(outcomes: list[RunOutcome], sample_std: bool = False) -> list[list]:
    rows = []
    for o in outcomes:
        res = o.result
        rows.append([
            o.mode, o.run, o.seed, res.status, len(res.records), res.state.best_round,
            res.state.best_val_dice if res.records else None,
            res.test.best.mean_across_samples, res.test.best.std_across_samples,
            res.test.latest.mean_across_samples, res.test.latest.std_across_samples,
            res.static_threshold, res.init_checksum,
        ])
    (bm, bs), (lm, ls) = across_runs(outcomes, sample_std)
    mode = outcomes[0].mode
    rows.append([mode, "across_runs", "", "", "", "", "", bm, bs, lm, ls, "", ""])
    top = best_run(outcomes)
    t = top.result.test
    rows.append([
        mode, "across_samples", top.seed, "", "", "", "",
        t.best.mean_across_samples, t.best.std_across_samples,
        t.latest.mean_across_samples, t.latest.std_across_samples, "", "",
    ])
    return rows


def write_run_outputs(cfg: ExperimentConfig, outcomes: list[RunOutcome], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    header, rows = rounds_rows(outcomes, len(cfg.data_sizes))
    write_csv(os.path.join(out_dir, "rounds.csv"), header, rows)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_HEADER, summary_rows(outcomes, cfg.report_sample_std))
    write_config(cfg, out_dir)


def write_config(cfg: ExperimentConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config_resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def all_diverged(outcomes: list[RunOutcome]) -> bool:
    return bool(outcomes) and all(o.result.status == "diverged" for o in outcomes)


def run_preset(cfg: ExperimentConfig, out_dir: str) -> list[RunOutcome]:
    outcomes = run_repeats(cfg)
    write_run_outputs(cfg, outcomes, out_dir)
    return outcomes


COMPARE_HEADER = [
    "method", "mode", "run", "seed", "status", "test_best", "test_latest",
    "runs_mean", "runs_std", "samples_mean", "samples_std", "best_run_seed", "init_checksum",
]


def compare(cfg: ExperimentConfig, out_dir: str) -> dict[str, list[RunOutcome]]:
    """NP-FL / DP-FL / ADP-FL on the same federation and initial weights.

    Per-mode rounds/summary files go to ``<out>/<mode>/``; ``compare.csv``
    holds one row per (method, run) with the method-level statistics
    repeated on each row.
    """
    fed = build_data(cfg)
    by_mode: dict[str, list[RunOutcome]] = {}
    rows = []
    for mode in ("none", "static", "adaptive"):
        mcfg = replace(cfg, privacy_mode=mode)
        outcomes = run_repeats(mcfg, fed)
        write_run_outputs(mcfg, outcomes, os.path.join(out_dir, mode))
        by_mode[mode] = outcomes
        (rm, rs), _ = across_runs(outcomes, cfg.report_sample_std)
        top = best_run(outcomes)
        for o in outcomes:
            rows.append([
                METHOD_LABELS[mode], mode, o.run, o.seed, o.result.status,
                o.result.test.best.mean_across_samples, o.result.test.latest.mean_across_samples,
                rm, rs, top.result.test.best.mean_across_samples, top.result.test.best.std_across_samples,
                top.seed, o.result.init_checksum,
            ])
    write_csv(os.path.join(out_dir, "compare.csv"), COMPARE_HEADER, rows)
    write_config(cfg, out_dir)
    return by_mode


def percentile_label(p: float) -> str:
    return f"p{p:g}"


def sweep(cfg: ExperimentConfig, out_dir: str) -> dict[float, list[RunOutcome]]:
    """Adaptive mode at each percentile; ``sweep.csv`` has one column per p."""
    fed = build_data(cfg)
    results: dict[float, list[RunOutcome]] = {}
    for p in cfg.sweep_percentiles:
        pcfg = replace(cfg, privacy_mode="adaptive", privacy_p=float(p))
        outcomes = run_repeats(pcfg, fed)
        write_run_outputs(pcfg, outcomes, os.path.join(out_dir, percentile_label(p)))
        results[p] = outcomes

    header = ["metric"] + [percentile_label(p) for p in cfg.sweep_percentiles]
    stats = {p: across_runs(o, cfg.report_sample_std)[0] for p, o in results.items()}
    tops = {p: best_run(o).result.test.best for p, o in results.items()}
    ps = list(cfg.sweep_percentiles)
    rows = [
        ["mean_across_runs"] + [stats[p][0] for p in ps],
        ["std_across_runs"] + [stats[p][1] for p in ps],
        ["mean_across_samples"] + [tops[p].mean_across_samples for p in ps],
        ["std_across_samples"] + [tops[p].std_across_samples for p in ps],
        ["diverged_runs"] + [sum(o.result.status == "diverged" for o in results[p]) for p in ps],
    ]
    write_csv(os.path.join(out_dir, "sweep.csv"), header, rows)
    write_config(cfg, out_dir)
    return results


def export_data(cfg: ExperimentConfig, out_dir: str) -> str:
    return data.export_federation(build_data(cfg), out_dir)
