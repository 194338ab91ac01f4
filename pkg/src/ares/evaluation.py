"""Post-training discrimination and metrics.

The decision rule is "inlier iff energy score >= gamma" with gamma chosen
so at least 95% of held-out inliers pass. FPR95 is the fraction of
outliers passing that gate; AUROC is the Mann-Whitney probability that a
random inlier outscores a random outlier (ties half). Because the score's
sign convention is emergent (the energy weights are learned), reports also
carry the orientation-corrected AUROC max(a, 1-a) as a diagnostic column;
the headline metric stays literal.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import DataBundle
from .network import MlpNetwork, energy_score_batch
from .training import TrainConfig, TrainLog, train

__all__ = [
    "RunReport",
    "auroc",
    "choose_gamma",
    "discriminate",
    "evaluate",
    "fpr95",
    "run_ablation_suite",
    "score_bundle",
    "write_reports_csv",
]

TPR_TARGET = 0.95


def choose_gamma(id_scores) -> float:
    """Largest threshold keeping at least 95% of the inlier scores on the
    ``>= gamma`` side. When 0.95 is not exactly attainable the smallest
    attainable rate above it is used (conservative gate)."""
    s = np.asarray(id_scores, dtype=float)
    if s.size < 20:
        raise ValueError(f"choose_gamma: need at least 20 scores, got {s.size}")
    n = s.size
    for gamma in np.unique(s)[::-1]:  # descending candidate thresholds
        if np.count_nonzero(s >= gamma) >= TPR_TARGET * n:
            return float(gamma)
    return float(s.min())


def discriminate(score: float, gamma: float) -> int:
    """1 = inlier (score >= gamma, inclusive), 0 = outlier."""
    return 1 if score >= gamma else 0


def fpr95(id_scores, ood_scores) -> float:
    """Fraction of outlier scores passing the 95%-TPR inlier gate."""
    id_scores = np.asarray(id_scores, dtype=float)
    ood_scores = np.asarray(ood_scores, dtype=float)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("fpr95: empty score list")
    gamma = choose_gamma(id_scores)
    return float(np.count_nonzero(ood_scores >= gamma) / ood_scores.size)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(id_scores, ood_scores) -> float:
    """P(inlier score > outlier score) + 0.5 P(equal), via rank sums."""
    e = np.asarray(id_scores, dtype=float)
    f = np.asarray(ood_scores, dtype=float)
    if e.size == 0 or f.size == 0:
        raise ValueError("auroc: empty score list")
    ranks = _average_ranks(np.concatenate([e, f]))
    r_id = ranks[: e.size].sum()
    u = r_id - e.size * (e.size + 1) / 2.0
    return float(u / (e.size * f.size))


@dataclass
class RunReport:
    """Per-run metrics: one (fpr95, auroc, auroc_oriented) triple per
    outlier set plus macro averages, the chosen gamma, and bookkeeping."""

    variant: str
    seed: int
    gamma: float
    per_set: dict[str, dict[str, float]]
    average: dict[str, float]
    config: dict | None = None
    stage_times: dict | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "gamma": self.gamma,
            "per_set": self.per_set,
            "average": self.average,
            "config": self.config,
            "stage_times": self.stage_times,
            "error": self.error,
            **({"extra": self.extra} if self.extra else {}),
        }


def score_bundle(net: MlpNetwork, bundle: DataBundle) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Energy scores for the held-out inliers and each outlier set."""
    id_scores = energy_score_batch(net, net.forward(bundle.id_test.x).logits)
    ood_scores = {
        name: energy_score_batch(net, net.forward(pts).logits)
        for name, pts in bundle.ood_eval.items()
    }
    return id_scores, ood_scores


def evaluate(
    net: MlpNetwork,
    bundle: DataBundle,
    variant: str = "full",
    seed: int = 0,
    config: dict | None = None,
    stage_times: dict | None = None,
) -> RunReport:
    """Score the bundle and assemble a report with macro averages."""
    if not bundle.ood_eval:
        raise ValueError("evaluate: bundle has no outlier evaluation sets")
    id_scores, ood_scores = score_bundle(net, bundle)
    gamma = choose_gamma(id_scores)
    per_set = {}
    for name in sorted(ood_scores):
        a = auroc(id_scores, ood_scores[name])
        per_set[name] = {
            "fpr95": fpr95(id_scores, ood_scores[name]),
            "auroc": a,
            "auroc_oriented": max(a, 1.0 - a),
        }
    average = {
        key: float(np.mean([m[key] for m in per_set.values()]))
        for key in ("fpr95", "auroc", "auroc_oriented")
    }
    return RunReport(
        variant=variant,
        seed=seed,
        gamma=gamma,
        per_set=per_set,
        average=average,
        config=config,
        stage_times=stage_times,
    )


def _failed_report(variant: str, seed: int, err: Exception) -> RunReport:
    return RunReport(
        variant=variant,
        seed=seed,
        gamma=float("nan"),
        per_set={},
        average={},
        error=f"{type(err).__name__}: {err}",
    )


def ablation_variants(base_cfg: TrainConfig) -> list[tuple[str, TrainConfig | None]]:
    """The default ablation matrix: full + three single-stage removals,
    three discrimination losses, two epoch budgets. Entries with ``None``
    reuse the full run's trained model."""
    long = base_cfg.replace(
        total_epochs=2 * base_cfg.total_epochs,
        pretrain_epochs=2 * base_cfg.pretrain_epochs,
    )
    return [
        ("full", base_cfg),
        ("no-escape", base_cfg.replace(escape=False)),
        ("no-expansion", base_cfg.replace(expansion=False)),
        ("no-estimation", base_cfg.replace(estimation=False)),
        ("loss-ce", base_cfg.replace(loss_kind="ce")),
        ("loss-nce", base_cfg.replace(loss_kind="nce")),
        ("loss-jsd", None),
        (f"epochs-{base_cfg.total_epochs}", None),
        (f"epochs-{long.total_epochs}", long),
    ]


def _train_and_evaluate(
    name: str, cfg: TrainConfig, bundle: DataBundle
) -> tuple[RunReport, MlpNetwork, TrainLog]:
    net, log = train(cfg, bundle)
    report = evaluate(
        net,
        bundle,
        variant=name,
        seed=cfg.seed,
        stage_times=log.stage_totals(),
    )
    return report, net, log


def run_ablation_suite(
    base_cfg: TrainConfig,
    bundle: DataBundle,
    only: str | None = None,
    threads: int | None = None,
) -> list[RunReport]:
    """Train and evaluate every ablation variant with shared data and seed.

    ``only`` restricts the matrix to "stages", "losses", or "epochs".
    Per-variant failures are captured in the report's ``error`` field
    without aborting the suite. ``threads`` (default: the ARES_THREADS
    environment variable, else 1) fans independent trainings out across a
    thread pool; results are deterministic regardless of scheduling.
    """
    matrix = ablation_variants(base_cfg)
    if only == "stages":
        matrix = matrix[:4]
    elif only == "losses":
        matrix = [matrix[4], matrix[5], matrix[6]]
    elif only == "epochs":
        matrix = [matrix[7], matrix[8]]
    elif only is not None:
        raise ValueError(f"run_ablation_suite: unknown subset {only!r}")
    if not any(name == "full" for name, _cfg in matrix):
        # without the full run present, shared rows train for themselves
        matrix = [(name, cfg if cfg is not None else base_cfg) for name, cfg in matrix]

    if threads is None:
        threads = int(os.environ.get("ARES_THREADS", "1"))

    jobs = [(name, cfg) for name, cfg in matrix if cfg is not None]
    results: dict[str, RunReport] = {}

    def run_one(item):
        name, cfg = item
        try:
            report, _net, _log = _train_and_evaluate(name, cfg, bundle)
        except Exception as err:  # per-variant isolation is the contract
            report = _failed_report(name, cfg.seed, err)
        return name, report

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for name, report in pool.map(run_one, jobs):
                results[name] = report
    else:
        for item in jobs:
            name, report = run_one(item)
            results[name] = report

    full = results.get("full")
    ordered = []
    for name, cfg in matrix:
        if cfg is not None:
            ordered.append(results[name])
        elif full is not None:
            shared = RunReport(
                variant=name,
                seed=full.seed,
                gamma=full.gamma,
                per_set=full.per_set,
                average=full.average,
                stage_times=full.stage_times,
                error=full.error,
                extra={"shared_with": "full"},
            )
            ordered.append(shared)
    return ordered


def write_reports_csv(path, reports: list[RunReport]) -> None:
    """Flat table: one row per variant, per-set FPR95/AUROC columns plus
    averages, gamma, and per-stage wall times."""
    set_names = sorted({name for r in reports for name in r.per_set})
    cols = ["variant", "seed", "gamma"]
    for name in set_names:
        cols += [f"{name}_fpr95", f"{name}_auroc", f"{name}_auroc_oriented"]
    cols += ["average_fpr95", "average_auroc", "average_auroc_oriented"]
    cols += ["escape_s", "expansion_s", "estimation_s", "divergence_s", "error"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in reports:
            row = [r.variant, str(r.seed), _fmt(r.gamma)]
            for name in set_names:
                m = r.per_set.get(name, {})
                row += [_fmt(m.get(k)) for k in ("fpr95", "auroc", "auroc_oriented")]
            row += [_fmt(r.average.get(k)) for k in ("fpr95", "auroc", "auroc_oriented")]
            times = r.stage_times or {}
            row += [_fmt(times.get(k)) for k in ("escape", "expansion", "estimation", "divergence")]
            row.append("" if r.error is None else r.error.replace(",", ";"))
            fh.write(",".join(row) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    return "%.17g" % float(v)


def write_report_json(path, report: RunReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
