"""Command-line interface: ``ivdrf {simulate,diagnose,estimate,benchmark}``.

Options come from defaults, then an optional ``--config`` file (JSON or
``key = value`` lines, keys spelled like the long flags with dashes or
underscores), then explicit flags.  Every run writes ``manifest.json`` holding
the resolved options, the package version and checksums of the outputs;
passing that manifest back through ``--config`` reruns the same command.

Exit codes: 0 success, 2 usage, 3 schema or data error, 4 refusal by the
weighting-function check, 5 numerical failure, 6 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
from typing import Optional

import numpy as np

from . import __version__
from .core import Dataset, Schema, TargetInterval, load_dataset, read_keyvalue, write_dataset
from .exceptions import (DataError, DiagnosticsError, IvdrfError, NumericalError, SchemaError,
                         UrwfRefusal)

log = logging.getLogger("ivdrf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REFUSED, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5, 6

DEFAULTS = {
    "simulate": {"n": 5000, "seed": None, "variant": "paper_main", "params": None,
                 "latent": False, "out": "."},
    "diagnose": {"data": None, "schema": None, "treatment": None, "outcome": None,
                 "instruments": None, "covariates": "", "support": None,
                 "pi": "density@0.5", "interval": None, "epsilon": None, "seed": None,
                 "a_grid_size": 41, "out": "."},
    "estimate": {"data": None, "schema": None, "treatment": None, "outcome": None,
                 "instruments": None, "covariates": "", "support": None,
                 "pi": "density@0.5", "interval": None, "aux": None, "holdout": 0.2,
                 "method": "llkr", "spline_df": 3, "h": "auto", "kernel": "epanechnikov",
                 "grid_size": 51, "K": 5, "nested": False, "J": 2, "tags": "aipw_iv",
                 "bootstrap": 0, "force": False, "seed": None, "out": "."},
    "benchmark": {"n": 5000, "reps": 100, "K": 5, "interval": "0.25,0.75", "a0": None,
                  "frameworks": "iv,nuc", "estimators": "aipw,ipw,or", "aux_n": 10000,
                  "grid_size": 51, "variant": "paper_main", "seed": None, "out": "."},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON or key=value file; flags override it")
    p.add_argument("--seed", type=int, help="master seed (required)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker cap")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p):
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--schema", help="key=value file naming the columns")
    p.add_argument("--treatment")
    p.add_argument("--outcome")
    p.add_argument("--instruments", help="comma-separated instrument columns")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--support", help="treatment support 'lo,hi' (default: observed range)")
    p.add_argument("--pi", help="weighting function: density@A0, coordinate:J or poly:J:D")
    p.add_argument("--interval", help="target interval 'lo,hi'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivdrf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a simulated dataset",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--variant", help="paper_main, unconfounded, binary_iv_crossing or discrete_toy")
    p.add_argument("--params", help="parameter file for --variant discrete_toy")
    p.add_argument("--latent", action="store_true", help="also write the latent confounder")

    p = sub.add_parser("diagnose", help="relevance curve, URWF verdict and kappa map",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    _data_args(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--a-grid-size", dest="a_grid_size", type=int)

    p = sub.add_parser("estimate", help="cross-fitted dose-response estimate",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    _data_args(p)
    p.add_argument("--aux", help="CSV used only to fit a density weighting function")
    p.add_argument("--holdout", type=float, help="share held out for the weighting function")
    p.add_argument("--method", choices=["llkr", "erm"])
    p.add_argument("--spline-df", dest="spline_df", type=int)
    p.add_argument("--h", help="bandwidth or 'auto'")
    p.add_argument("--kernel", choices=["epanechnikov", "triangular", "uniform"])
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--nested", action="store_true")
    p.add_argument("--J", type=int)
    p.add_argument("--tags", help="comma-separated score tags; the first is smoothed")
    p.add_argument("--bootstrap", type=int, help="number of bootstrap replicates")
    p.add_argument("--force", action="store_true", help="run even if the URWF check fails")

    p = sub.add_parser("benchmark", help="Monte Carlo benchmark on the simulation design",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--interval")
    p.add_argument("--a0", type=float)
    p.add_argument("--frameworks")
    p.add_argument("--estimators")
    p.add_argument("--aux-n", dest="aux_n", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--variant")
    return parser


def _read_config(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = read_keyvalue(path)
    if isinstance(obj, dict) and "options" in obj and "command" in obj:
        obj = obj["options"]
    return {k.replace("-", "_"): v for k, v in obj.items()}


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags."""
    opts = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items()
             if k not in ("command", "config", "threads", "verbose")}
    if getattr(ns, "config", None):
        cfg = _read_config(ns.config)
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update(given)
    if opts.get("seed") is None:
        raise UsageError("a seed is required (--seed or the config file)")
    opts["seed"] = int(opts["seed"])
    return opts


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _pair(text, name) -> tuple:
    try:
        lo, hi = (float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--{name} must be 'lo,hi'") from None
    return lo, hi


def _names(text) -> tuple:
    if text is None:
        return ()
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


def _flag(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


def _load(opts) -> Dataset:
    if not opts.get("data"):
        raise UsageError("--data is required")
    if opts.get("schema"):
        mapping = read_keyvalue(opts["schema"])
    else:
        mapping = {}
    for key in ("treatment", "outcome", "instruments", "covariates", "support"):
        if opts.get(key):
            mapping[key] = opts[key]
    schema = Schema.from_mapping(mapping)
    data = load_dataset(opts["data"], schema)
    return data


def _interval(opts, data: Dataset) -> TargetInterval:
    if not opts.get("interval"):
        raise UsageError("--interval is required")
    interval = TargetInterval(*_pair(opts["interval"], "interval"))
    try:
        interval.check_interior(data.treatment_support)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return interval


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _manifest(command, opts, out, files):
    doc = {"command": command, "version": __version__, "options": opts,
           "outputs": {os.path.basename(f): _sha256(f) for f in files}}
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _out(opts) -> str:
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(opts, threads=1) -> list:
    from .sim import DgpSpec, load_toy, simulate_dgp

    out = _out(opts)
    files = []
    if opts["variant"] == "discrete_toy":
        if not opts.get("params"):
            raise UsageError("--variant discrete_toy needs --params")
        law = load_toy(opts["params"])
        path = os.path.join(out, "law.json")
        with open(path, "w") as fh:
            json.dump(law.enumerate_law(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        files.append(path)
        data = law.sample(int(opts["n"]), opts["seed"]) if opts.get("n") else None
    else:
        try:
            spec = DgpSpec(int(opts["n"]), opts["seed"], opts["variant"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        data = simulate_dgp(spec)
    if data is not None:
        path = os.path.join(out, "data.csv")
        schema = write_dataset(data, path)
        files.append(path)
        if _flag(opts.get("latent")) and data.latent_u is not None:
            lpath = os.path.join(out, "latent_u.csv")
            with open(lpath, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"u{j}" for j in range(data.latent_u.shape[1])])
                for row in data.latent_u:
                    w.writerow([repr(float(v)) for v in row])
            files.append(lpath)
        spath = os.path.join(out, "schema.txt")
        with open(spath, "w") as fh:
            fh.write(f"treatment = {schema.treatment}\noutcome = {schema.outcome}\n"
                     f"instruments = {','.join(schema.instruments)}\n"
                     f"covariates = {','.join(schema.covariates)}\n"
                     f"support = {data.treatment_support[0]!r},{data.treatment_support[1]!r}\n")
        files.append(spath)
    return files


def _weighting(opts, data):
    from .crossfit import fit_weighting

    aux = None
    if opts.get("aux"):
        aux = load_dataset(opts["aux"], Schema(
            treatment="a", outcome="y", instruments=data.z_names, covariates=data.l_names,
            support=data.treatment_support)) if not opts.get("schema") else \
            load_dataset(opts["aux"], Schema.read(opts["schema"]))
    return fit_weighting(data, opts["pi"], holdout=float(opts.get("holdout", 0.2)),
                         seed=opts["seed"], auxiliary=aux)


def cmd_diagnose(opts, threads=1) -> list:
    from .diagnostics import check_urwf, chi2_divergence_curve, kappa_sign_map

    data = _load(opts)
    interval = _interval(opts, data)
    out = _out(opts)
    pi, rest = _weighting(opts, data)
    a_grid = np.linspace(interval.lo, interval.hi, int(opts["a_grid_size"]))
    eps = None if opts.get("epsilon") in (None, "") else float(opts["epsilon"])
    verdict = check_urwf(rest, pi, interval, eps, a_grid=a_grid)
    lo, hi = data.treatment_support
    full = np.linspace(lo, hi, int(opts["a_grid_size"]) + 2)[1:-1]
    kmap = kappa_sign_map(rest, pi, full)
    curve = chi2_divergence_curve(rest, a_grid)
    files = [os.path.join(out, f) for f in ("relevance.csv", "urwf.json", "kappa_map.csv")]
    curve.to_csv(files[0])
    verdict.to_json(files[1])
    kmap.to_csv(files[2])
    log.info("URWF verdict: %s", "pass" if verdict.passed else "fail")
    return files


def cmd_estimate(opts, threads=1) -> list:
    from .crossfit import CrossfitConfig, crossfit_scores
    from .diagnostics import check_urwf
    from .drf import bootstrap_drf, default_pipeline, estimate_drf_erm, estimate_drf_llkr

    data = _load(opts)
    interval = _interval(opts, data)
    out = _out(opts)
    pi, rest = _weighting(opts, data)
    files = []
    verdict = check_urwf(rest, pi, interval)
    vpath = os.path.join(out, "urwf.json")
    verdict.to_json(vpath)
    files.append(vpath)
    if not verdict.passed and not _flag(opts.get("force")):
        raise UrwfRefusal(f"weighting function {pi.id} fails the URWF check on "
                          f"[{interval.lo}, {interval.hi}] (see {vpath}); pass --force to "
                          "estimate anyway")
    tags = _names(opts["tags"])
    cfg = CrossfitConfig(K=int(opts["K"]), nested=_flag(opts["nested"]), J=int(opts["J"]),
                         tags=tags, seed=opts["seed"], n_jobs=threads)
    res = crossfit_scores(rest, pi, interval, cfg)
    phi = res[tags[0]]
    grid_size = int(opts["grid_size"])
    if opts["method"] == "erm":
        est = estimate_drf_erm(phi, rest.A, interval, int(opts["spline_df"]), grid_size)
        h = None
    else:
        h = opts["h"] if str(opts["h"]) == "auto" else float(opts["h"])
        est = estimate_drf_llkr(phi, rest.A, interval, grid_size, h, kernel=opts["kernel"],
                                support=rest.treatment_support)
        h = est.h
    B = int(opts.get("bootstrap") or 0)
    if B:
        pipe = default_pipeline(pi, interval, cfg, opts["method"], h, grid_size,
                                int(opts["spline_df"]), opts["seed"])
        boot = bootstrap_drf(rest, B, pipe, seed=opts["seed"], n_jobs=threads)
        est.boot_sd, est.boot_lo, est.boot_hi = boot["sd"], boot["lo"], boot["hi"]
        est.meta["bootstrap"] = {"B": B, "failed": boot["failed"]}
    est.meta.update({"seed": opts["seed"], "weighting": pi.id, "tag": tags[0],
                     "fold_reports": res.fold_reports})
    paths = [os.path.join(out, f) for f in ("drf.csv", "drf.json", "scores.csv")]
    est.to_csv(paths[0])
    est.to_json(paths[1])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "fold", "tag", "pi", "value"])
        for t in tags:
            sv = res[t]
            for i, (k, v) in enumerate(zip(sv.fold, sv.values)):
                w.writerow([i, int(k), t, sv.pi_id, repr(float(v))])
    return files + paths


def cmd_benchmark(opts, threads=1) -> list:
    from .sim import run_benchmark

    frameworks = _names(opts["frameworks"])
    estimators = _names(opts["estimators"])
    tags = tuple(f"{e.lower()}_{f.lower()}" for f in frameworks for e in estimators)
    interval = TargetInterval(*_pair(opts["interval"], "interval"))
    report = run_benchmark(n=int(opts["n"]), M=int(opts["reps"]), K=int(opts["K"]),
                           interval=interval, tags=tags, seed=opts["seed"],
                           a0=None if opts.get("a0") in (None, "") else float(opts["a0"]),
                           aux_n=int(opts["aux_n"]), n_jobs=threads,
                           grid_size=int(opts["grid_size"]), variant=opts["variant"])
    out = _out(opts)
    paths = [os.path.join(out, "benchmark.csv"), os.path.join(out, "benchmark.json")]
    report.to_csv(paths[0])
    report.to_json(paths[1])
    return paths


COMMANDS = {"simulate": cmd_simulate, "diagnose": cmd_diagnose, "estimate": cmd_estimate,
            "benchmark": cmd_benchmark}


_NUMERIC = re.compile(r"^-[\d.]")


def _glue_negative(argv: list) -> list:
    """Attach values such as ``-0.75,-0.25`` to their flag so argparse accepts them."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and "=" not in tok and i + 1 < len(argv) \
                and _NUMERIC.match(argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    argv = _glue_negative(list(sys.argv[1:] if argv is None else argv))
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    threads = max(1, int(getattr(ns, "threads", 1)))
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(ns.command, ns)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(threads):
            files = COMMANDS[ns.command](opts, threads)
        _manifest(ns.command, opts, opts["out"], files)
    except UsageError as exc:
        print(f"ivdrf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError) as exc:
        print(f"ivdrf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DiagnosticsError as exc:
        print(f"ivdrf: refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (NumericalError, IvdrfError) as exc:
        print(f"ivdrf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"ivdrf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
