"""Batch experiment runner.

Each subcommand sweeps a grid (threshold quantiles, simulator draw counts,
or a single reserving run), runs the sampler once per grid point and
replication, and appends plot-ready CSV rows — one per sampler step, with
the posterior summary and wallclock attached to the final step's row.
Replications are independent: replication k runs at seed + k, and jobs are
emitted in a fixed (kind, grid, replication) order, so a worker pool can
never change the output.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import PrcPolicy
from .models.chain_ladder import (
    DOLLARS_PER_UNIT,
    SIGMA_REPORT_SCALE,
    ClaimsTriangle,
    chain_ladder_predict,
    run_claims,
)
from .models.gaussian_toy import GAUSSIAN_EPSILON_SCHEDULE, ToyConfig, run_toy

__all__ = ["ExperimentSpec", "main", "run_experiment", "summarize"]

CSV_COLUMNS = (
    "experiment",
    "weighting_kind",
    "grid_value",
    "replication",
    "step",
    "ess",
    "weight_variance",
    "mean_rejections",
    "attempts_total",
    "simulator_calls",
    "posterior_mean",
    "posterior_variance",
    "wallclock_ms",
)

DEFAULT_Q_GRID = (0.0, 0.5, 0.75, 0.85, 0.9, 0.95, 0.99, 0.995, 0.999)
DEFAULT_S_GRID = (1, 10, 50, 100)
EXPERIMENTS = ("toy_sweep_q", "toy_sweep_s", "claims_reserving", "single_run")
STATUS_SENTINEL = "__status__"


@dataclass(frozen=True)
class ExperimentSpec:
    """One batch job: which experiment, how many runs, and any overrides."""

    experiment: str
    replications: int = 250
    seed: int = 0
    n_particles: int = 1000
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n_particles < 2:
            raise ValueError("n must be >= 2")
        for key in ("q_grid", "s_grid", "schedule"):
            grid = self.overrides.get(key)
            if grid is not None and len(grid) == 0:
                raise ValueError(f"{key} must be non-empty")


# --------------------------------------------------------------------------
# row assembly
# --------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _rows_for_run(experiment, kind, grid_value, rep, system, diagnostics, wallclock_ms):
    norm = system.normalize()
    post_mean = _fmt(norm.weighted_mean()[0])
    post_var = _fmt(norm.weighted_var()[0])
    final_step = diagnostics[-1].step
    rows = []
    for d in diagnostics:
        last = d.step == final_step
        rows.append(
            [
                experiment,
                kind,
                _fmt(grid_value),
                str(rep),
                str(d.step),
                _fmt(d.ess),
                _fmt(d.weight_variance),
                _fmt(d.mean_rejections_per_particle),
                str(d.attempts_total),
                str(d.simulator_calls),
                post_mean if last else "",
                post_var if last else "",
                _fmt(wallclock_ms) if last else "",
            ]
        )
    return rows


def _toy_job(job: dict) -> list:
    cfg = ToyConfig(
        weighting_kind=job["kind"],
        s_draws=job["s_draws"],
        n_particles=job["n"],
        schedule=job["schedule"],
    )
    policy = PrcPolicy.quantile(job["q"], max_attempts=job["max_attempts"])
    started = time.perf_counter()
    system, diagnostics = run_toy(cfg, policy, job["seed"])
    elapsed_ms = (time.perf_counter() - started) * 1e3
    return _rows_for_run(
        job["experiment"], job["kind"], job["grid_value"], job["rep"],
        system, diagnostics, elapsed_ms,
    )


def _claims_job(job: dict) -> tuple[list, list]:
    tri = (
        ClaimsTriangle.from_csv(job["triangle"])
        if job["triangle"]
        else None
    )
    started = time.perf_counter()
    result = run_claims(
        tri,
        n_particles=job["n"],
        seed=job["seed"],
        quantile_level=job["q"],
        max_attempts=job["max_attempts"],
    )
    elapsed_ms = (time.perf_counter() - started) * 1e3
    rows = _rows_for_run(
        "claims_reserving", "uniform", job["q"], job["rep"],
        result.system, result.diagnostics, elapsed_ms,
    )
    return rows, _estimate_rows(job["rep"], result)


def _estimate_rows(rep: int, result) -> list:
    """Classical and posterior estimates side by side, in report units."""
    classical = result.classical
    posterior = result.posterior_mean_params()
    cls_pred = chain_ladder_predict(result.triangle, classical)
    post_pred = chain_ladder_predict(result.triangle, posterior)
    rows = []
    for j in range(classical.f.size):
        rows.append([str(rep), f"f_{j}", _fmt(classical.f[j]), _fmt(posterior.f[j])])
    for j in range(classical.sigma.size):
        rows.append(
            [
                str(rep),
                f"sigma_{j}",
                _fmt(classical.sigma[j] * SIGMA_REPORT_SCALE),
                _fmt(posterior.sigma[j] * SIGMA_REPORT_SCALE),
            ]
        )
    for i, (a, b) in enumerate(zip(cls_pred.reserves, post_pred.reserves)):
        rows.append(
            [str(rep), f"reserve_{i}", _fmt(a * DOLLARS_PER_UNIT), _fmt(b * DOLLARS_PER_UNIT)]
        )
    rows.append(
        [
            str(rep),
            "total_reserve",
            _fmt(cls_pred.total_reserve * DOLLARS_PER_UNIT),
            _fmt(post_pred.total_reserve * DOLLARS_PER_UNIT),
        ]
    )
    return rows


# --------------------------------------------------------------------------
# experiment driver
# --------------------------------------------------------------------------


def _toy_jobs(spec: ExperimentSpec) -> list[dict]:
    ov = spec.overrides
    schedule = tuple(ov.get("schedule") or GAUSSIAN_EPSILON_SCHEDULE)
    max_attempts = ov.get("max_attempts", 1_000_000)
    jobs = []
    if spec.experiment == "toy_sweep_q":
        kinds = [ov["weighting"]] if ov.get("weighting") else ["gaussian", "uniform"]
        grid = tuple(ov.get("q_grid") or DEFAULT_Q_GRID)
        for kind in kinds:
            for q in grid:
                for rep in range(spec.replications):
                    jobs.append(
                        dict(
                            experiment=spec.experiment, kind=kind, grid_value=q,
                            rep=rep, q=q, s_draws=int(ov.get("s_draws", 1)),
                            n=spec.n_particles, seed=spec.seed + rep,
                            schedule=schedule, max_attempts=max_attempts,
                        )
                    )
    elif spec.experiment == "toy_sweep_s":
        kind = ov.get("weighting") or "gaussian"
        grid = tuple(ov.get("s_grid") or DEFAULT_S_GRID)
        q = float(ov["q_grid"][0]) if ov.get("q_grid") else 0.95
        for s in grid:
            for rep in range(spec.replications):
                jobs.append(
                    dict(
                        experiment=spec.experiment, kind=kind, grid_value=int(s),
                        rep=rep, q=q, s_draws=int(s), n=spec.n_particles,
                        seed=spec.seed + rep, schedule=schedule,
                        max_attempts=max_attempts,
                    )
                )
    else:  # single_run
        kind = ov.get("weighting") or "gaussian"
        q = float(ov["q_grid"][0]) if ov.get("q_grid") else 0.95
        s_draws = int(ov["s_grid"][0]) if ov.get("s_grid") else 1
        for rep in range(spec.replications):
            jobs.append(
                dict(
                    experiment=spec.experiment, kind=kind, grid_value=q, rep=rep,
                    q=q, s_draws=s_draws, n=spec.n_particles, seed=spec.seed + rep,
                    schedule=schedule, max_attempts=max_attempts,
                )
            )
    return jobs


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _status_row(message: str) -> list:
    row = [STATUS_SENTINEL, message.replace("\n", " ")]
    return row + [""] * (len(CSV_COLUMNS) - len(row))


def run_experiment(spec: ExperimentSpec) -> int:
    """Run the grid, write ``<out>/<experiment>.csv``, return an exit status.

    On an engine failure mid-grid the rows completed so far are preserved
    and a trailing ``__status__`` row records the error; exit status 1.
    """
    out_dir = Path(spec.overrides.get("out") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{spec.experiment}.csv"
    threads = int(spec.overrides.get("threads") or 1)

    rows: list = []
    estimate_rows: list = []
    failure: str | None = None
    try:
        if spec.experiment == "claims_reserving":
            ov = spec.overrides
            for rep in range(spec.replications):
                job = dict(
                    rep=rep, n=spec.n_particles, seed=spec.seed + rep,
                    q=float(ov["q_grid"][0]) if ov.get("q_grid") else 0.0,
                    triangle=ov.get("triangle"),
                    max_attempts=ov.get("max_attempts", 1_000_000),
                )
                run_rows, est = _claims_job(job)
                rows.extend(run_rows)
                estimate_rows.extend(est)
        else:
            jobs = _toy_jobs(spec)
            if threads > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=threads) as pool:
                    for job_rows in pool.map(_toy_job, jobs):
                        rows.extend(job_rows)
            else:
                for job in jobs:
                    rows.extend(_toy_job(job))
    except Exception as exc:  # noqa: BLE001 — preserve partial output on any failure
        failure = f"{type(exc).__name__}: {exc}"

    if failure is not None:
        rows.append(_status_row(failure))
    _write_rows(out_path, CSV_COLUMNS, rows)
    if estimate_rows:
        _write_rows(
            out_dir / "claims_estimates.csv",
            ("replication", "quantity", "classical", "posterior_mean"),
            estimate_rows,
        )
    if failure is not None:
        print(f"error: {failure}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


def summarize(csv_path, out_path=None) -> Path:
    """Reduce a runner CSV to per-grid-point medians and IQRs.

    Uses each replication's final-step row. Output columns: the group key
    plus median/IQR for ESS, weight variance, mean rejections, and the
    posterior variance.
    """
    csv_path = Path(csv_path)
    groups: dict[tuple, dict[int, dict]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or list(header) != list(CSV_COLUMNS):
            raise ValueError(f"{csv_path}: unexpected header")
        for line_no, row in enumerate(reader, start=2):
            if not row or row[0] == STATUS_SENTINEL:
                continue
            try:
                key = (row[0], row[1], row[2])
                rep, step = int(row[3]), int(row[4])
                record = dict(
                    step=step,
                    ess=float(row[5]),
                    weight_variance=float(row[6]),
                    mean_rejections=float(row[7]),
                    posterior_variance=float(row[11]) if row[11] else math.nan,
                )
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{csv_path}:{line_no}: malformed row ({exc})") from exc
            reps = groups.setdefault(key, {})
            if rep not in reps or step > reps[rep]["step"]:
                reps[rep] = record

    def med_iqr(values):
        arr = np.asarray(values, dtype=float)
        q25, q50, q75 = np.percentile(arr, [25.0, 50.0, 75.0])
        return q50, q75 - q25

    out_rows = []
    for key in sorted(groups):
        finals = [groups[key][rep] for rep in sorted(groups[key])]
        row = [key[0], key[1], key[2], str(len(finals))]
        for column in ("ess", "weight_variance", "mean_rejections", "posterior_variance"):
            med, iqr = med_iqr([f[column] for f in finals])
            row.extend([_fmt(med), _fmt(iqr)])
        out_rows.append(row)

    out_path = Path(out_path) if out_path else csv_path.with_name(csv_path.stem + "_summary.csv")
    _write_rows(
        out_path,
        (
            "experiment", "weighting_kind", "grid_value", "replications",
            "ess_median", "ess_iqr",
            "weight_variance_median", "weight_variance_iqr",
            "mean_rejections_median", "mean_rejections_iqr",
            "posterior_variance_median", "posterior_variance_iqr",
        ),
        out_rows,
    )
    return out_path


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


def _parse_number_list(text: str) -> tuple[float, ...]:
    values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    if not values:
        raise ValueError("empty list")
    return values


def _read_config(path) -> dict[str, str]:
    config = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value")
            key, _, value = line.partition("=")
            config[key.strip().replace("-", "_")] = value.strip()
    return config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smc-prc", description="Rejection-controlled SMC experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="key=value file; command-line flags win")
        p.add_argument("--n", type=int, help="particles per population")
        p.add_argument("--replications", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--q-grid", help="comma-separated threshold quantiles")
        p.add_argument("--s-grid", help="comma-separated simulator draw counts")
        p.add_argument("--weighting", choices=("uniform", "gaussian"))
        p.add_argument("--schedule", help="comma-separated tolerances (inf allowed)")
        p.add_argument("--triangle", help="claims triangle CSV path")
        p.add_argument("--out", help="output directory (default .)")
        p.add_argument("--threads", type=int, help="worker processes (env SMC_PRC_THREADS)")

    for name in EXPERIMENTS:
        add_run_flags(sub.add_parser(name))

    p_sum = sub.add_parser("summarize")
    p_sum.add_argument("csv_path")
    p_sum.add_argument("--out", help="summary CSV path")
    return parser


_DEFAULT_N = {
    "toy_sweep_q": 1000,
    "toy_sweep_s": 1000,
    "single_run": 1000,
    "claims_reserving": 5000,
}
_DEFAULT_REPLICATIONS = {
    "toy_sweep_q": 250,
    "toy_sweep_s": 250,
    "single_run": 1,
    "claims_reserving": 1,
}


def _spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    config = _read_config(args.config) if args.config else {}

    def pick(key, fallback=None):
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            return cli_value
        if key in config:
            return config[key]
        return fallback

    experiment = args.command
    threads = pick("threads")
    if threads is None:
        threads = os.environ.get("SMC_PRC_THREADS") or 1

    overrides: dict = {"threads": int(threads)}
    for key, parse in (("q_grid", _parse_number_list), ("s_grid", _parse_number_list),
                       ("schedule", _parse_number_list)):
        raw = pick(key)
        if raw is not None:
            overrides[key] = parse(raw) if isinstance(raw, str) else raw
    for key in ("weighting", "triangle", "out"):
        value = pick(key)
        if value is not None:
            overrides[key] = value

    return ExperimentSpec(
        experiment=experiment,
        replications=int(pick("replications", _DEFAULT_REPLICATIONS[experiment])),
        seed=int(pick("seed", 0)),
        n_particles=int(pick("n", _DEFAULT_N[experiment])),
        overrides=overrides,
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            out = summarize(args.csv_path, args.out)
            print(out)
            return 0
        return run_experiment(_spec_from_args(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
