"""Shared CSV report rows for evaluation, baselines and ablations."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import ParseError
from .metrics import METRICS, evaluate_video


@dataclass
class ReportRow:
    method: str
    config: str
    dice_mean: float
    dice_std: float
    nsd_mean: float
    nsd_std: float
    hd95_mean: float
    hd95_std: float
    asd_mean: float
    asd_std: float
    params_trainable: int
    params_total: int


COLUMNS = [f.name for f in fields(ReportRow)]


def worker_count():
    try:
        return max(1, int(os.environ.get("DDSAM2_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_tracker(samples, predict, tau=2.0, workers=None):
    """[(video id, MetricsReport)] for ``predict(sample) -> masks``; order follows ``samples``."""
    def one(s):
        return s.id, evaluate_video(predict(s), s.masks, tau)

    workers = workers or worker_count()
    if workers == 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


def row_from_report(method, config, report, trainable=0, total=0):
    stats = []
    for m in METRICS:
        stats += [report.mean(m), report.std(m)]
    return ReportRow(method, config, *stats, trainable, total)


def aggregate_row(method, config, rows, trainable=0, total=0):
    """Mean and population std across per-video means."""
    stats = []
    for m in METRICS:
        vals = np.array([getattr(r, m + "_mean") for r in rows], dtype=np.float64)
        stats += [float(vals.mean()), float(vals.std())]
    return ReportRow(method, config, *stats, trainable, total)


def video_rows(method, config, results, trainable=0, total=0):
    rows = [row_from_report(method, f"{config}|{vid}", rep, trainable, total) for vid, rep in results]
    return rows + [aggregate_row(method, f"{config}|ALL", rows, trainable, total)]


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def write_rows(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])


def read_rows(path):
    check_schema(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            vals = [rec["method"], rec["config"]]
            vals += [float(rec[c]) for c in COLUMNS[2:-2]]
            vals += [int(rec["params_trainable"]), int(rec["params_total"])]
            out.append(ReportRow(*vals))
    return out


def check_schema(path):
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header != COLUMNS:
        raise ParseError(path, 0, f"CSV header {header} does not match report schema {COLUMNS}")
    return True
