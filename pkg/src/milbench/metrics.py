"""Bag- and instance-level evaluation metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ParameterError, UndefinedMetricError
from .numerics import SeededRng


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ParameterError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pos/neg pairs count one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)  # midranks; sums of half-integers stay exact
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending thresholds, each tie block as one step."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_k = tp[ends]
    precision = tp_k / (ends + 1.0)
    recall_step = np.diff(np.r_[0, tp_k]) / n_pos
    return float(np.sum(recall_step * precision))


def attention_correctness(attention, instance_labels) -> float:
    a = np.asarray(attention, dtype=float).ravel()
    y = np.asarray(instance_labels, dtype=float).ravel()
    if a.shape != y.shape:
        raise ParameterError(f"attention length {a.size} != label length {y.size}")
    return float(a @ y)


def centered_gaussian_attention(s: int, rel_width: float = 0.25) -> np.ndarray:
    """Image-independent attention: a bell curve over position, centred on the middle."""
    if s < 1 or not rel_width > 0:
        raise ParameterError("need s >= 1 and rel_width > 0")
    j = np.arange(s, dtype=float)
    a = np.exp(-((j - (s - 1) / 2.0) ** 2) / (2.0 * (rel_width * s) ** 2))
    return a / a.sum()


@dataclass
class InstanceReport:
    attention_correctness: float
    instance_auroc: float
    instance_auprc: float
    n_bags: int
    n_ranked: int  # bags with both instance classes, used for AUROC/AUPRC


def instance_level_report(attentions: Sequence, instance_labels: Sequence, bag_labels) -> InstanceReport:
    """Per-positive-bag attention metrics averaged over positive bags."""
    corr, aucs, aps = [], [], []
    for a, yi, y in zip(attentions, instance_labels, bag_labels):
        if not y:
            continue
        corr.append(attention_correctness(a, yi))
        yi = np.asarray(yi)
        if 0 < yi.sum() < yi.size:
            aucs.append(auroc(a, yi))
            aps.append(auprc(a, yi))
    if not corr:
        raise UndefinedMetricError("no positive bags")
    mean = lambda v: float(np.mean(v)) if v else math.nan
    return InstanceReport(mean(corr), mean(aucs), mean(aps), len(corr), len(aucs))


def bootstrap_diff(scores_a, scores_b, labels, n_boot: int = 1000, seed: int = 0,
                   max_retries: int = 100) -> tuple[float, float, float]:
    """Paired bootstrap of AUROC(a) - AUROC(b): (mean, 2.5 pct, 97.5 pct)."""
    a, y = _check(scores_a, labels)
    b, _ = _check(scores_b, labels)
    if a.shape != b.shape:
        raise ParameterError("paired score arrays differ in length")
    if n_boot < 100:
        raise ParameterError("n_boot must be >= 100")
    rng = SeededRng(seed, stream=7)
    n = y.size
    diffs = np.empty(n_boot)
    for i in range(n_boot):
        for _ in range(max_retries):
            idx = rng.choice(n, n)
            if 0 < y[idx].sum() < n:
                break
        else:
            raise UndefinedMetricError("bootstrap kept drawing single-class resamples")
        diffs[i] = auroc(a[idx], y[idx]) - auroc(b[idx], y[idx])
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    return float(diffs.mean()), float(lo), float(hi)


@dataclass
class MetricReport:
    split: str
    seed: int
    auroc: float = math.nan
    auprc: float = math.nan
    attention_correctness: float = math.nan
    instance_auroc: float = math.nan
    instance_auprc: float = math.nan
    method: str = ""

    NUMERIC = ("auroc", "auprc", "attention_correctness", "instance_auroc", "instance_auprc")


def write_reports_csv(path, reports: Sequence[MetricReport]) -> None:
    names = [f.name for f in fields(MetricReport)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in reports:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])


def summarize(reports: Sequence[MetricReport]) -> dict:
    """Mean and (population) std of each metric, grouped by (method, split)."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.method, r.split), []).append(r)
    out = {}
    for (method, split_name), rs in sorted(groups.items()):
        entry = {"n": len(rs), "seeds": [r.seed for r in rs]}
        for name in MetricReport.NUMERIC:
            vals = np.array([getattr(r, name) for r in rs], dtype=float)
            vals = vals[~np.isnan(vals)]
            if vals.size:
                entry[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out[f"{method or 'model'}/{split_name}"] = entry
    return out


def write_summary_json(path, reports: Sequence[MetricReport]) -> None:
    Path(path).write_text(json.dumps(summarize(reports), indent=2, sort_keys=True) + "\n")
