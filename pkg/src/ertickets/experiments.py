"""Seeded Monte Carlo trials, aggregation and output files."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tickets import TrialReport, aggregate, build_slt, build_wlt

__all__ = ["derive_seed", "run_trials", "aggregate", "dumps", "write_json", "write_csv", "csv_text"]


def derive_seed(master_seed: int, index: int) -> int:
    """Per-trial seed, independent of how trials are scheduled."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint32)[0])


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def _wlt_job(args) -> TrialReport:
    target, plan, delta, seed, kw = args
    return build_wlt(target, plan, delta, seed, **kw).report


def _slt_job(args) -> TrialReport:
    target, plan, delta, eps, seed, kw = args
    return build_slt(target, plan, delta, eps, seed, **kw).report


def _map(fn: Callable, jobs_args: list, jobs: int) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args, chunksize=max(1, len(jobs_args) // (4 * jobs))))


def run_trials(
    kind: str,
    target,
    plan,
    delta: float,
    trials: int,
    master_seed: int,
    *,
    eps: float | None = None,
    jobs: int = 1,
    **kw,
) -> list[TrialReport]:
    """Run ``trials`` independent constructions; reports keep trial order.

    ``target`` may be a single network or a callable ``index -> network``
    (evaluated in the parent so workers only see plain data).
    """
    seeds = [derive_seed(master_seed, i) for i in range(trials)]
    targets = [target(i) if callable(target) else target for i in range(trials)]
    if kind == "slt":
        if eps is None:
            raise ValueError("strong tickets need eps")
        args = [(t, plan, delta, eps, s, kw) for t, s in zip(targets, seeds)]
        return _map(_slt_job, args, jobs)
    args = [(t, plan, delta, s, kw) for t, s in zip(targets, seeds)]
    return _map(_wlt_job, args, jobs)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows))
    return path


def report_rows(reports: Sequence[TrialReport]) -> list[dict]:
    return [
        {
            "trial": i,
            "seed": r.seed,
            "success": int(r.success),
            "max_error": "" if r.max_error is None else r.max_error,
            "nnz": "" if r.nnz is None else r.nnz,
            "q": " ".join(str(x) for x in r.q),
        }
        for i, r in enumerate(reports)
    ]
