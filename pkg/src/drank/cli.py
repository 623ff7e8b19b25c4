"""Command-line interface: ``drank {scores,fit,diagnose,simulate,panel}``.

Exit codes: 0 success, 2 input or validation error, 3 numerical-accuracy
failure, 4 refusal because fits did not converge.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import residual_report, select_score
from .distributions import parse_dist
from .errors import (
    DegenerateDensityError,
    DRankError,
    PanelRefusedError,
    QuadratureError,
)
from .estimator import RankedSample, fit_lse, fit_modified
from .panel import PanelSeries, panel_test
from .scores import DEFAULT_MC_REPS, METHODS, ScoreTable, build_score_table
from .simulation import DEFAULT_CANDIDATES, FAST_REPS, SimConfig, run_study

log = logging.getLogger("drank")

EXIT_OK, EXIT_INPUT, EXIT_ACCURACY, EXIT_REFUSED = 0, 2, 3, 4
CENSORED = {"", "+", "censored", "m+"}


class InputError(DRankError, ValueError):
    """Malformed command-line input or data file."""


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        text = json.dumps({"command": self.command, "params": self.params}, sort_keys=True,
                          default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"command": self.command, "params": self.params, "digest": self.digest,
                "version": __version__}


# -- input helpers -----------------------------------------------------------

def _dist_from_args(args):
    text = args.dist
    if args.alpha is not None:
        text = f"{text}({args.alpha})"
    elif args.shape is not None:
        text = f"{text}({args.shape},{args.rate})"
    return parse_dist(text)


def _parse_rank(text, lineno):
    t = (text or "").strip().lower()
    if t in CENSORED:
        return None
    try:
        r = int(t)
    except ValueError:
        raise InputError(f"line {lineno}: rank {text!r} is neither an integer nor censored")
    if r < 1:
        raise InputError(f"line {lineno}: rank must be positive, got {r}")
    return r


def _check_ranks(ranked: dict, where: str):
    m = len(ranked)
    if m == 0:
        raise InputError(f"{where}: no ranked rows")
    missing = sorted(set(range(1, max(ranked) + 1)) - set(ranked))
    if missing:
        raise InputError(f"{where}: ranks must run 1..m without gaps; missing rank(s) "
                         f"{', '.join(map(str, missing[:10]))}")
    return m


def _rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise InputError(f"{path}: empty file")
    reader.fieldnames = [f.strip().lower() for f in reader.fieldnames]
    return reader.fieldnames, list(reader)


def read_sample_csv(path) -> RankedSample:
    """Read ``rank,y`` rows; blank, ``+`` or ``censored`` ranks mark unranked responses."""
    fields, rows = _rows(path)
    if "rank" not in fields or "y" not in fields:
        raise InputError(f"{path}: expected columns rank,y")
    ranked, rest = {}, []
    for i, row in enumerate(rows, start=2):
        r = _parse_rank(row["rank"], i)
        try:
            y = float(row["y"])
        except (TypeError, ValueError):
            raise InputError(f"line {i}: response {row['y']!r} is not a number")
        if r is None:
            rest.append(y)
        elif r in ranked:
            raise InputError(f"line {i}: duplicate rank {r}")
        else:
            ranked[r] = y
    m = _check_ranks(ranked, str(path))
    return RankedSample([ranked[r] for r in range(1, m + 1)], rest)


def read_panel_csv(path, exclusion_ranks=(1, 2)) -> PanelSeries:
    """Read ``day,rank,y[,covariates...]``; days keep their order of first appearance."""
    fields, rows = _rows(path)
    for col in ("day", "rank", "y"):
        if col not in fields:
            raise InputError(f"{path}: missing column {col!r}")
    cov_names = [f for f in fields if f not in ("day", "rank", "y")]
    days: dict = {}
    for i, row in enumerate(rows, start=2):
        day = row["day"].strip()
        r = _parse_rank(row["rank"], i)
        try:
            y = float(row["y"])
            z = [float(row[c]) for c in cov_names]
        except (TypeError, ValueError):
            raise InputError(f"line {i}: non-numeric response or covariate")
        d = days.setdefault(day, {"ranked": {}, "rest": [], "zr": {}, "zrest": []})
        if r is None:
            d["rest"].append(y)
            d["zrest"].append(z)
        elif r in d["ranked"]:
            raise InputError(f"line {i}: duplicate rank {r} on day {day}")
        else:
            d["ranked"][r] = y
            d["zr"][r] = z
    samples, covs = [], []
    for day, d in days.items():
        m = _check_ranks(d["ranked"], f"day {day}")
        samples.append(RankedSample([d["ranked"][r] for r in range(1, m + 1)], d["rest"]))
        covs.append([d["zr"][r] for r in range(1, m + 1)] + d["zrest"])
    if len({s.n for s in samples}) > 1 or len({s.m for s in samples}) > 1:
        raise InputError("all days must have the same number of rows and of ranked rows")
    return PanelSeries(samples, tuple(exclusion_ranks),
                       covariates=[np.asarray(c, dtype=float) for c in covs] if cov_names else None,
                       covariate_names=cov_names or None, labels=list(days))


def load_scores(spec: str, n: int, m: int, args, *, moments: bool) -> ScoreTable:
    """A score table from a JSON file written by ``drank scores`` or from a distribution label."""
    p = Path(spec)
    if p.suffix.lower() == ".json" and p.exists():
        doc = json.loads(p.read_text())
        table = ScoreTable.from_dict(doc.get("table", doc))
        if table.n != n or table.m < m:
            raise InputError(f"{spec}: table is for n={table.n}, m={table.m}; data need n={n}, m={m}")
        return table.head(m) if table.m > m else table
    return build_score_table(spec, n, m, args.method, moments=moments,
                             reps=args.reps or DEFAULT_MC_REPS, seed=args.seed,
                             workers=args.workers, cache_dir=args.cache_dir)


def _jsonable(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _write_json(doc, out):
    text = json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# -- commands ----------------------------------------------------------------

def cmd_scores(args) -> int:
    dist = _dist_from_args(args)
    m = args.m or args.n
    run = RunConfig("scores", {"dist": dist.label, "n": args.n, "m": m, "method": args.method,
                               "moments": args.moments, "reps": args.reps, "seed": args.seed})
    table = build_score_table(dist, args.n, m, args.method, moments=args.moments,
                              reps=args.reps or DEFAULT_MC_REPS, seed=args.seed,
                              workers=args.workers, cache_dir=args.cache_dir)
    problems = table.validate()
    if problems:
        return _fail("score table failed validation: " + "; ".join(problems), EXIT_ACCURACY)
    header = f"# run_config_digest={run.digest}\n"
    if args.out in (None, "-"):
        sys.stdout.write(header)
        table.to_csv(sys.stdout)
    else:
        with open(args.out, "w") as fh:
            fh.write(header)
            table.to_csv(fh)
    if args.json_out:
        _write_json({"run_config": run.to_dict(), "table": table.to_dict()}, args.json_out)
    return EXIT_OK


def cmd_fit(args) -> int:
    sample = read_sample_csv(args.data)
    # the modified estimator's standard error needs moments over all n ranks
    full = args.estimator == "modified" and not args.no_moments
    scores = load_scores(args.scores, sample.n, sample.n if full else sample.m, args,
                         moments=not args.no_moments)
    fitter = fit_modified if args.estimator == "modified" else fit_lse
    est = fitter(sample, scores, alternative=args.alternative)
    run = RunConfig("fit", {"data": str(args.data), "scores": args.scores,
                            "estimator": args.estimator, "method": args.method,
                            "seed": args.seed, "reps": args.reps,
                            "alternative": args.alternative})
    doc = {"run_config": run.to_dict(), "estimate": est.to_dict()}
    _write_json(doc, args.out)
    return EXIT_OK


def _safe_label(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text).strip("_")


def cmd_diagnose(args) -> int:
    sample = read_sample_csv(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig("diagnose", {"data": str(args.data), "candidates": args.candidates,
                                 "method": args.method, "seed": args.seed, "reps": args.reps})
    tables = [load_scores(c, sample.n, sample.m, args, moments=args.bands)
              for c in args.candidates]
    labels = list(args.candidates)
    seen = {}
    for i, lab in enumerate(labels):
        if lab in seen:
            labels[i] = f"{lab}#{i + 1}"
        seen[lab] = i
    files = {}
    for lab, table in zip(labels, tables):
        rep = residual_report(sample, table, bands=args.bands)
        path = out / f"residuals_{_safe_label(lab)}.csv"
        with open(path, "w") as fh:
            fh.write(f"# run_config_digest={run.digest}\n")
            rep.to_csv(fh)
        files[lab] = path.name
    sel = select_score(sample, tables, labels)
    doc = {"run_config": run.to_dict(), "selection": sel.to_dict(), "residual_files": files}
    _write_json(doc, out / "selection.json")
    if not args.quiet:
        for c in sel.candidates:
            print(f"{c.rank:>2}  {c.label:<16} rss={c.rss:.4f}  |b0|/se={c.intercept_z:.4f}  "
                  f"trend={c.trend_slope:.4f}")
    return EXIT_OK


def _split(text):
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()] if text else []


def _split_dists(text):
    """Split a list of distribution labels, keeping commas inside parentheses."""
    out, depth, cur = [], 0, ""
    for ch in text or "":
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch in ",;\n" and depth == 0:
            if cur.strip():
                out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def sim_configs_from_args(args) -> list[SimConfig]:
    cp = configparser.ConfigParser()
    if args.config:
        if not cp.read(args.config):
            raise InputError(f"cannot read config file {args.config}")
    study = cp["study"] if cp.has_section("study") else {}
    data = cp["data"] if cp.has_section("data") else {}
    sc = cp["scores"] if cp.has_section("scores") else {}

    def pick(flag, section, key, default):
        if flag is not None:
            return flag
        return section.get(key, default) if section else default

    fast = args.fast or str(pick(None, study, "fast", "false")).lower() in ("1", "true", "yes")
    reps = int(pick(args.reps, study, "reps", FAST_REPS if fast else 1000))
    seed = int(pick(args.seed_opt, study, "seed", 0))
    dists = _split_dists(pick(args.dist_x, data, "dist_x", "uniform, normal, gamma(3,3)"))
    n = int(pick(args.n, data, "n", 500))
    rhos = [float(r) for r in _split(pick(args.rho, data, "rho", "0, 0.3, 0.5, 0.7"))]
    ms = [int(m) for m in _split(pick(args.m, data, "m", "20, 50, 100"))]
    cands = _split_dists(pick(args.candidates, sc, "candidates", ", ".join(DEFAULT_CANDIDATES)))
    method = pick(args.method_opt, sc, "method", "exact_quadrature")
    scaling = pick(args.identity_scaling, sc, "identity_scaling", "full")
    return [SimConfig(d, rhos, n, ms, cands, reps, seed, method, scaling, args.workers)
            for d in dists]


def cmd_simulate(args) -> int:
    configs = sim_configs_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = None
    for cfg in configs:
        part = run_study(cfg, cache_dir=args.cache_dir)
        report = part if report is None else report.merge(part)
    run = RunConfig("simulate", {"configs": [c.to_dict() for c in configs]})
    report.config_digest = run.digest
    report.to_csv(out / "sim_report.csv")
    table = report.format_table()
    (out / "sim_table.txt").write_text(f"# run_config_digest={run.digest}\n" + table)
    _write_json(run.to_dict(), out / "run_config.json")
    failed = sum(c.failures for c in report.cells)
    if not args.quiet:
        sys.stdout.write(table)
    if failed:
        log.warning("%d replicate fits failed; see the failures column", failed)
    return EXIT_OK


def cmd_panel(args) -> int:
    excl = tuple(int(r) for r in _split(args.exclude)) if args.exclude else ()
    panel = read_panel_csv(args.data, excl)
    residualize = panel.covariates is not None and not args.no_residualize
    if residualize:
        panel = panel.residualized(absolute=not args.signed)
    scores = load_scores(args.scores, panel.n, panel.m, args, moments=False)
    res = panel_test(panel, scores, args.lag, tol=args.tol, max_iter=args.max_iter)
    run = RunConfig("panel", {"data": str(args.data), "scores": args.scores, "lag": res.lag,
                              "exclude": list(excl), "method": args.method,
                              "residualize": residualize, "signed": args.signed,
                              "tol": args.tol, "max_iter": args.max_iter})
    doc = {"run_config": run.to_dict(), "days": list(map(str, panel.labels)),
           "combined_test": res.to_dict()}
    _write_json(doc, args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--reps", type=int, default=None, help="Monte Carlo replicates")
    common.add_argument("--method", default="exact_quadrature", choices=METHODS[:3],
                        help="how scores are computed")
    common.add_argument("--lag", type=int, default=None, help="autocovariance truncation lag")
    common.add_argument("--workers", type=int, default=1, help="maximum worker processes")
    common.add_argument("--cache-dir", default=None, help="score-table cache directory")
    common.add_argument("-q", "--quiet", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drank", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scores", parents=[common], help="tabulate scores for the top m ranks")
    s.add_argument("--dist", required=True, help="family label, e.g. normal or gamma(3,3)")
    s.add_argument("--alpha", type=float, help="pareto tail index")
    s.add_argument("--shape", type=float, help="gamma shape")
    s.add_argument("--rate", type=float, default=1.0, help="gamma rate")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--m", type=int)
    s.add_argument("--moments", action="store_true", help="also tabulate variances/covariances")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.add_argument("--json-out", help="also write the full table as JSON")
    s.set_defaults(func=cmd_scores)

    f = sub.add_parser("fit", parents=[common], help="estimate rho from one ranked dataset")
    f.add_argument("--data", required=True, help="CSV with columns rank,y")
    f.add_argument("--scores", required=True, help="distribution label or score-table JSON")
    f.add_argument("--estimator", choices=("lse", "modified"), default="lse")
    f.add_argument("--alternative", choices=("two_sided", "greater"), default="two_sided")
    f.add_argument("--no-moments", action="store_true", help="skip standard errors")
    f.add_argument("--out", help="JSON path (default stdout)")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("diagnose", parents=[common], help="residuals and score selection")
    d.add_argument("--data", required=True)
    d.add_argument("--candidates", nargs="+", required=True)
    d.add_argument("--bands", action="store_true", help="add theoretical residual bands")
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("simulate", parents=[common], help="bias/MSE simulation study")
    m.add_argument("--config", help="INI file with [study], [data], [scores] sections")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--fast", action="store_true", help=f"use {FAST_REPS} replicates")
    m.add_argument("--dist-x", help="data distributions, comma separated")
    m.add_argument("--n", type=int)
    m.add_argument("--m", help="observed ranks, comma separated")
    m.add_argument("--rho", help="correlations, comma separated")
    m.add_argument("--candidates", help="score labels, comma separated")
    m.add_argument("--identity-scaling", choices=("full", "top"))
    m.set_defaults(func=cmd_simulate)

    t = sub.add_parser("panel", parents=[common], help="combined test over a panel of days")
    t.add_argument("--data", required=True, help="CSV with columns day,rank,y[,covariates]")
    t.add_argument("--scores", required=True)
    t.add_argument("--exclude", default="1,2", help="ranks given their own shift")
    t.add_argument("--signed", action="store_true", help="keep signed residuals")
    t.add_argument("--no-residualize", action="store_true")
    t.add_argument("--tol", type=float, default=1e-8)
    t.add_argument("--max-iter", type=int, default=100)
    t.add_argument("--out", help="JSON path (default stdout)")
    t.set_defaults(func=cmd_panel)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="drank: %(levelname)s: %(message)s")
    if args.command == "simulate":
        # simulate reads --seed/--method through the config merge
        given = lambda flag: any(a == flag or a.startswith(flag + "=") for a in argv)
        args.seed_opt = args.seed if given("--seed") else None
        args.method_opt = args.method if given("--method") else None
    try:
        return args.func(args)
    except PanelRefusedError as exc:
        return _fail(exc, EXIT_REFUSED)
    except (QuadratureError, DegenerateDensityError) as exc:
        return _fail(f"numerical accuracy failure: {exc}", EXIT_ACCURACY)
    except (DRankError, ValueError, OSError) as exc:
        return _fail(exc, EXIT_INPUT)


def _fail(message, code: int) -> int:
    print(f"drank: error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
