"""Evaluation metrics, PR curves, AICT, and the ablation runner."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acfg import FeatureConfig
from .errors import DegenerateClasses, EmptyInput, NoIcalls

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    auroc: float
    threshold: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int,
                    auroc: float = float("nan"),
                    threshold: float = DEFAULT_THRESHOLD) -> "Metrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, fn, tn, precision, recall, f1, auroc, threshold)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "auroc": self.auroc, "threshold": self.threshold}


def compute_metrics(scored: list[tuple[float, bool]],
                    threshold: float = DEFAULT_THRESHOLD) -> Metrics:
    """Confusion counts at the threshold (predicted positive when p >= threshold)."""
    if not scored:
        raise EmptyInput("no scored pairs")
    probs = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in scored])
    pred = probs >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    auroc = compute_auroc(scored) if labels.any() and not labels.all() else float("nan")
    return Metrics.from_counts(tp, fp, fn, tn, auroc, threshold)


def compute_auroc(scored: list[tuple[float, bool]]) -> float:
    """Mann-Whitney rank statistic: P(score_pos > score_neg), ties counted 0.5."""
    probs = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in scored])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses(f"{n_pos} positives, {n_neg} negatives")
    order = np.argsort(probs, kind="stable")
    ranks = np.empty(len(probs), dtype=np.float64)
    sorted_probs = probs[order]
    i = 0
    while i < len(sorted_probs):
        j = i
        while j + 1 < len(sorted_probs) and sorted_probs[j + 1] == sorted_probs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_aict(predictions: dict[int, set[int]] | list[set[int]]) -> float:
    """Average predicted target-set size per indirect callsite."""
    sets = list(predictions.values()) if isinstance(predictions, dict) else list(predictions)
    if not sets:
        raise NoIcalls("no indirect callsites")
    return float(sum(len(s) for s in sets) / len(sets))


def emit_pr_curve(scored: list[tuple[float, bool]], path: str | Path) -> None:
    """CSV (threshold, precision, recall) swept over the distinct scores.

    Thresholds descend; consecutive points with identical (precision, recall)
    are deduplicated.
    """
    if not scored:
        raise EmptyInput("no scored pairs")
    probs = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in scored])
    n_pos = int(labels.sum())
    rows: list[tuple[float, float, float]] = []
    last = None
    for t in sorted(set(probs), reverse=True):
        pred = probs >= t
        tp = int(np.sum(pred & labels))
        fp = int(np.sum(pred & ~labels))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos if n_pos else 0.0
        if (precision, recall) != last:
            rows.append((t, precision, recall))
            last = (precision, recall)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        writer.writerows(rows)


@dataclass
class AblationReport:
    settings: dict[int, Metrics] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {str(k): m.to_dict() for k, m in sorted(self.settings.items())}
        if self.errors:
            out["errors"] = {str(k): v for k, v in sorted(self.errors.items())}
        return out

    def to_table(self) -> str:
        header = f"{'setting':>8} {'F1':>8} {'precision':>10} {'recall':>8} {'AUROC':>8}"
        lines = [header, "-" * len(header)]
        for setting in sorted(self.settings):
            m = self.settings[setting]
            lines.append(f"{setting:>8} {m.f1:>8.3f} {m.precision:>10.3f} "
                         f"{m.recall:>8.3f} {m.auroc:>8.3f}")
        for setting in sorted(self.errors):
            lines.append(f"{setting:>8} FAILED: {self.errors[setting]}")
        return "\n".join(lines)


@dataclass
class CfiRow:
    binary: str
    n_functions: int
    n_icalls: int
    n_address_taken: int
    aict: float


@dataclass
class CfiReport:
    rows: list[CfiRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"binaries": [{"binary": r.binary, "functions": r.n_functions,
                              "icalls": r.n_icalls, "address_taken": r.n_address_taken,
                              "aict": r.aict} for r in self.rows]}


def run_ablation(raw_corpus, settings: list[int] | dict[int, FeatureConfig],
                 train_config, seed: int) -> AblationReport:
    """Train and evaluate one independent model per feature setting.

    Each setting re-extracts the corpus under its own feature configuration,
    then trains with an identical seed and budget. Failures are recorded per
    setting and leave the rest of the report intact.
    """
    from . import pipeline  # local import: pipeline depends on these metrics
    from .acfg import SETTINGS

    configs = settings if isinstance(settings, dict) else {n: SETTINGS[n] for n in settings}
    tc = train_config if isinstance(train_config, pipeline.TrainConfig) \
        else pipeline.TrainConfig(**train_config)
    report = AblationReport()
    for setting in sorted(configs):
        config = configs[setting]
        try:
            corpus = pipeline.extract_corpus(raw_corpus, config, tc.hyper)
            result = pipeline.train_model(corpus, config, tc, seed)
            if result.test_metrics is None:
                raise ValueError("no scored test pairs")
        except Exception as exc:  # partial-report semantics
            log.error("setting %d failed: %s", setting, exc)
            report.errors[setting] = str(exc)
            continue
        report.settings[setting] = result.test_metrics
    return report
