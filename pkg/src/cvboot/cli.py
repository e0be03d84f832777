"""Command-line front end: ``cvboot {estimate,compare,roc,simulate,pilot}``.

Settings come from flags and optionally from a JSON job file (``--job``);
the job file wins on conflict. Reports are JSON (canonical) or a flat CSV.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import engine
from .errors import CvbootError, EmptyAfterFiltering, MissingColumn, NonNumericCell
from .learners import LearnerSpec, make_learner
from .metrics import make_evaluator
from .types import Dataset, validate

MISSING_TOKENS = {"", "na", "nan", "null"}
COMMANDS = ("estimate", "compare", "roc", "simulate", "pilot")


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class IngestResult:
    dataset: Dataset
    dropped_count: int
    columns: dict = field(default_factory=dict)


def ingest_csv(
    path: str,
    outcome: str,
    features: Optional[list[str]] = None,
    treatment: Optional[str] = None,
    outcome_kind: str = "continuous",
) -> IngestResult:
    """Read selected numeric columns; rows with a missing selected value are dropped.

    ``features`` defaults to every column other than the outcome and treatment.
    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyAfterFiltering(f"{path} is empty") from None
        body = list(reader)
    wanted = [outcome] + ([treatment] if treatment else [])
    if features is None:
        features = [h for h in header if h not in wanted]
    selected = wanted + list(features)
    for name in selected:
        if name not in header:
            raise MissingColumn(f"column {name!r} not found in {path}")
    if len(set(selected)) != len(selected):
        raise ValueError("outcome, treatment and feature columns must be disjoint")
    pos = [header.index(name) for name in selected]
    rows, dropped = [], 0
    for i, rec in enumerate(body, start=1):
        if not rec:
            continue
        vals = []
        for name, j in zip(selected, pos):
            cell = rec[j].strip() if j < len(rec) else ""
            if cell.lower() in MISSING_TOKENS:
                vals = None
                break
            try:
                vals.append(float(cell))
            except ValueError:
                raise NonNumericCell(i, name, cell) from None
            if not math.isfinite(vals[-1]):
                raise NonNumericCell(i, name, cell)
        if vals is None:
            dropped += 1
        else:
            rows.append(vals)
    if not rows:
        raise EmptyAfterFiltering(f"no complete rows remain in {path} ({dropped} dropped)")
    arr = np.array(rows)
    k = len(wanted)
    data = Dataset(
        features=arr[:, k:],
        outcome=arr[:, 0],
        treatment=arr[:, 1] if treatment else None,
        outcome_kind=outcome_kind,
        feature_names=tuple(features),
    )
    validate(data)
    return IngestResult(data, dropped, {"outcome": outcome, "treatment": treatment,
                                        "features": list(features)})


# ---------------------------------------------------------------------------
# job specification


@dataclass
class JobSpec:
    command: str
    data: Optional[str] = None
    outcome: Optional[str] = None
    treatment: Optional[str] = None
    features: Optional[list[str]] = None
    outcome_kind: Optional[str] = None
    learner: str = "ols"
    lam: float = 0.0
    lambda_gamma: Optional[float] = None
    learner_b: Optional[str] = None
    lambda_b: float = 0.0
    metric: str = "mape"
    m: Optional[int] = None
    b_boot: int = 200
    b_cv: int = 20
    b_cv_point: int = 400
    alpha: float = 0.05
    calibrate: bool = False
    l_reps: int = 1000
    seed: int = 0
    threads: int = 1
    k: int = 10
    k_adj: Optional[int] = None
    reps: int = 1
    total_fits: Optional[int] = None
    allocation: str = "exact"
    design: str = "linear_lowdim"
    n: Optional[int] = None
    p: Optional[int] = None
    n_sims: int = 200
    m_grid: Optional[list[int]] = None
    true_reps: int = 2000
    n_test: int = 50_000
    out: Optional[str] = None
    format: str = "json"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.format not in ("json", "csv"):
            raise ValueError("format must be json or csv")

    def echo(self) -> dict:
        """Settings that determine the result (output location excluded)."""
        d = asdict(self)
        d.pop("out")
        d.pop("format")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def learner_obj(self, which: str = "a"):
        kind, lam = (self.learner, self.lam) if which == "a" else (self.learner_b, self.lambda_b)
        return make_learner(LearnerSpec(kind=kind, lam=lam, lambda_gamma=self.lambda_gamma))

    def run_config(self, m: Optional[int] = None) -> engine.RunConfig:
        m = self.m if m is None else m
        if m is None:
            raise ValueError("--m (training size) is required")
        return engine.RunConfig(
            m=m, b_cv_point=self.b_cv_point, b_boot=self.b_boot, b_cv=self.b_cv,
            alpha=self.alpha, seed=self.seed, calibrate=self.calibrate, l_reps=self.l_reps,
            kfold_k=self.k, kfold_k_adj=self.k_adj, threads=self.threads,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _load_data(job: JobSpec):
    if not job.data or not job.outcome:
        raise ValueError("--data and --outcome are required for this command")
    kind = job.outcome_kind
    if kind is None:
        kind = "binary" if getattr(make_evaluator(job.metric), "needs_binary", False) or \
            job.command == "roc" else "continuous"
    return ingest_csv(job.data, job.outcome, job.features, job.treatment, kind)


# ---------------------------------------------------------------------------
# commands


def _estimate(job):
    ing = _load_data(job)
    _, rep = engine.fast_bootstrap(ing.dataset, job.learner_obj(), make_evaluator(job.metric),
                                   job.run_config())
    return rep.to_dict(), rep.fits_used, ing.dropped_count, [_flat_report(rep)]


def _compare(job):
    if not job.learner_b:
        raise ValueError("--learner-b is required for compare")
    ing = _load_data(job)
    rep = engine.compare_models(ing.dataset, job.learner_obj("a"), job.learner_obj("b"),
                                make_evaluator(job.metric), job.run_config())
    fits = rep.fits_used * 2
    return rep.to_dict(), fits, ing.dropped_count, [_flat_report(rep)]


def _roc(job):
    ing = _load_data(job)
    cfg = job.run_config(job.m or max(1, ing.dataset.n - 1))
    cr = engine.kfold_roc_bootstrap(ing.dataset, job.learner_obj(), cfg, reps=job.reps)
    result = {
        "auc": cr.curve.auc, "auc_grid": cr.curve.auc_grid, "k": cr.k, "k_adj": cr.k_adj,
        "b_boot": cr.b_boot, "b_cv": cr.b_cv, "alpha": cr.alpha,
        "missing_cells": cr.missing_cells, "notes": cr.notes, "curve": cr.rows(),
    }
    fits = job.reps * cr.k + cr.b_boot * cr.b_cv * cr.k_adj
    return result, fits, ing.dropped_count, cr.rows()


def _simulate(job):
    from . import sim

    spec = sim.GeneratorSpec(job.design, job.n, job.p, job.seed)
    grid = job.m_grid or ([job.m] if job.m else None)
    if not grid:
        raise ValueError("--m-grid (or --m) is required for simulate")
    learner, ev = job.learner_obj(), make_evaluator(job.metric)
    truth = {
        m: sim.true_err_m(spec, learner, ev, m, job.true_reps, job.n_test,
                          np.random.default_rng([job.seed, m]))
        for m in grid
    }
    table = sim.coverage_experiment(spec, learner, ev, grid, job.run_config(grid[0]), job.n_sims,
                                    truth, seed=job.seed)
    fits = job.n_sims * len(grid) * (job.b_cv_point + job.b_boot * job.b_cv)
    return table.to_dict(), fits, 0, table.to_dict()["rows"]


def _pilot(job):
    if not job.total_fits:
        raise ValueError("--total-fits is required for pilot")
    ing = _load_data(job)
    cfg = engine.pilot_allocate(ing.dataset, job.learner_obj(), make_evaluator(job.metric),
                                job.run_config(), job.total_fits, job.allocation)
    result = {"b_boot": cfg.b_boot, "b_cv": cfg.b_cv, "total_fits": job.total_fits,
              "pilot": [job.b_boot, job.b_cv]}
    return result, job.b_boot * job.b_cv, ing.dropped_count, [result]


def _flat_report(rep) -> dict:
    row = {
        "point": rep.point, "se": rep.se, "se_adj": rep.se_adj,
        "ci_lo": rep.ci_normal[0], "ci_hi": rep.ci_normal[1],
        "ci_adj_lo": rep.ci_adj[0], "ci_adj_hi": rep.ci_adj[1],
        "m": rep.m, "m_adj": rep.m_adj, "alpha": rep.alpha,
        "sigma_bt_sq": rep.components.sigma_bt_sq, "tau0_sq": rep.components.tau0_sq,
        "b_boot": rep.b_boot, "b_cv": rep.b_cv, "fits_used": rep.fits_used,
    }
    if rep.ci_calibrated is not None:
        row.update(c_crit=rep.c_crit, ci_cal_lo=rep.ci_calibrated[0],
                   ci_cal_hi=rep.ci_calibrated[1])
    return row


_HANDLERS = {"estimate": _estimate, "compare": _compare, "roc": _roc,
             "simulate": _simulate, "pilot": _pilot}


def run_job(job: JobSpec) -> dict:
    """Run the job, write the report, and return the JSON document."""
    result, fits, dropped, flat = _HANDLERS[job.command](job)
    doc = {
        "command": job.command,
        "job": job.echo(),
        "result": result,
        "dropped_rows": dropped,
        "reproducibility": {"seed": job.seed, "config_hash": job.config_hash(),
                            "fits_used": fits},
    }
    doc = _jsonable(doc)
    if job.format == "json":
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        _write(job.out, text)
    else:
        _write_csv(job.out, flat, doc["reproducibility"])
    return doc


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _write_csv(path, rows, repro):
    rows = [_jsonable(dict(r, **repro)) for r in rows]
    fh = sys.stdout if path is None else open(path, "w", newline="", encoding="utf-8")
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path is not None:
            fh.close()


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvboot", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--job", help="JSON job file; its settings win over flags")
        p.add_argument("--data", default=S)
        p.add_argument("--outcome", default=S)
        p.add_argument("--treatment", default=S)
        p.add_argument("--features", type=_str_list, default=S, help="comma-separated columns")
        p.add_argument("--outcome-kind", dest="outcome_kind", choices=["continuous", "binary"],
                       default=S)
        p.add_argument("--learner", default=S)
        p.add_argument("--lambda", dest="lam", type=float, default=S)
        p.add_argument("--lambda-gamma", dest="lambda_gamma", type=float, default=S)
        p.add_argument("--metric", default=S)
        p.add_argument("--m", type=int, default=S)
        p.add_argument("--b-boot", dest="b_boot", type=int, default=S)
        p.add_argument("--b-cv", dest="b_cv", type=int, default=S)
        p.add_argument("--b-cv-point", dest="b_cv_point", type=int, default=S)
        p.add_argument("--alpha", type=float, default=S)
        p.add_argument("--calibrate", action="store_true", default=S)
        p.add_argument("--l-reps", dest="l_reps", type=int, default=S)
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--threads", type=int, default=S)
        p.add_argument("--out", default=S)
        p.add_argument("--format", choices=["json", "csv"], default=S)
        if name == "compare":
            p.add_argument("--learner-b", dest="learner_b", default=S)
            p.add_argument("--lambda-b", dest="lambda_b", type=float, default=S)
        if name == "roc":
            p.add_argument("--k", type=int, default=S)
            p.add_argument("--k-adj", dest="k_adj", type=int, default=S)
            p.add_argument("--reps", type=int, default=S)
        if name == "pilot":
            p.add_argument("--total-fits", dest="total_fits", type=int, default=S)
            p.add_argument("--allocation", choices=["exact", "ratio"], default=S)
        if name == "simulate":
            p.add_argument("--design", default=S)
            p.add_argument("--n", type=int, default=S)
            p.add_argument("--p", type=int, default=S)
            p.add_argument("--n-sims", dest="n_sims", type=int, default=S)
            p.add_argument("--m-grid", dest="m_grid", type=_int_list, default=S)
            p.add_argument("--true-reps", dest="true_reps", type=int, default=S)
            p.add_argument("--n-test", dest="n_test", type=int, default=S)
    return ap


def job_from_args(argv=None, environ=None) -> JobSpec:
    environ = os.environ if environ is None else environ
    ns = vars(build_parser().parse_args(argv))
    settings = {}
    if "CVBOOT_SEED" in environ:
        settings["seed"] = int(environ["CVBOOT_SEED"])
    job_path = ns.pop("job", None)
    settings.update(ns)
    if job_path:
        with open(job_path, encoding="utf-8") as fh:
            from_file = json.load(fh)
        known = {f.name for f in fields(JobSpec)}
        unknown = set(from_file) - known
        if unknown:
            raise ValueError(f"unknown job file keys: {sorted(unknown)}")
        settings.update(from_file)
        settings["command"] = ns["command"] if "command" not in from_file else from_file["command"]
    return JobSpec(**settings)


def _fail(code: str, err: dict, status: int = 2) -> int:
    sys.stderr.write(json.dumps({"error": err}, sort_keys=True) + "\n")
    return status


def main(argv=None) -> int:
    try:
        job = job_from_args(argv)
        run_job(job)
    except CvbootError as e:
        return _fail(e.code, e.to_dict())
    except (ValueError, OSError, json.JSONDecodeError) as e:
        return _fail("invalid_argument", {"code": "invalid_argument", "message": str(e)})
    except Exception as e:  # still emit a structured error object
        return _fail("internal_error", {"code": "internal_error",
                                        "message": f"{type(e).__name__}: {e}"})
    return 0


if __name__ == "__main__":
    sys.exit(main())
