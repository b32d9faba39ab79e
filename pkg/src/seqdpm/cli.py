"""
Command-line front end.

    seqdpm simulate --case toy --n 300 --seed 7 --out batches/
    seqdpm ingest   --model model.sdpm batches/
    seqdpm query    --model model.sdpm --batch batches/toy_1.csv --top-k 5
    seqdpm density  --model model.sdpm --grid -5:5:0.01
    seqdpm eval     --batch-dir batches/ --baseline nsbl --out report/

Exit codes: 0 success, 1 validation failure, 2 I/O or format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import batchio, evaluation, persistence
from .batchio import BatchFormatError
from .mathcore import NiwPrior
from .persistence import ModelFormatError
from .samplers import SimScenario, gen_case1, gen_case2, toy_batches
from .supermodel import KERNELS, RESAMPLERS, WEIGHTINGS, DpmConfig, Supermodel
from .particle import MODES

log = logging.getLogger("seqdpm")

OUTPUT_ENV = "SDPM_OUTPUT_DIR"


class UsageError(Exception):
    """Bad arguments or inputs (exit code 1)."""


def _output_dir(args, fallback) -> Path:
    out = args.out_dir or os.environ.get(OUTPUT_ENV) or fallback
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(args, out_dir: Path, resolved: dict) -> None:
    doc = {"command": args.command, **resolved}
    (out_dir / f"{args.command}_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, NiwPrior):
        return {"lam": o.lam.tolist(), "kappa": o.kappa, "omega": o.omega.tolist(), "nu": o.nu}
    raise TypeError(type(o).__name__)


@contextmanager
def _model_lock(model_path: Path):
    lock = model_path.with_name(model_path.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{model_path} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _dpm_config(args) -> DpmConfig:
    return DpmConfig(n_particles=args.n_particles, alpha=args.alpha, mode=args.mode,
                     resampler=args.resampler, seed=args.seed,
                     recompute_period=args.recompute_period)


def _config_dict(cfg: DpmConfig, dim: int | None = None) -> dict:
    d = asdict(cfg)
    if cfg.prior is None and dim is not None:
        d["prior"] = NiwPrior.default(dim)
    elif cfg.prior is None:
        d["prior"] = "default(lam=0, kappa=0.25, nu=p+2, omega=(nu-(p+1)/2)I)"
    return d


def _scenario(args, eta: float | None = None) -> SimScenario:
    over = {"seed": args.seed}
    for name, attr in (("p", "p"), ("experiments", "n_experiments"), ("classes", "n_classes"),
                       ("draws", "mcmc_draws"), ("burn_in", "burn_in")):
        v = getattr(args, name, None)
        if v is not None:
            over[attr] = v
    if args.obs_min is not None or args.obs_max is not None:
        base = SimScenario.for_case(args.case)
        over["obs_range"] = (args.obs_min or base.obs_range[0], args.obs_max or base.obs_range[1])
    over["eta"] = args.eta if eta is None else eta
    if args.case == "toy":
        over.update(n_per_mode=args.n, proportional=args.proportional, toy_variance=not args.toy_sd)
    if args.case == "case2" and args.lasso_rule:
        over["lasso_rule"] = args.lasso_rule
    sc = SimScenario.for_case(args.case, **over)
    sc.validate()
    return sc


def _generate(sc: SimScenario):
    if sc.case == "toy":
        return toy_batches(sc.n_per_mode, sc.seed, sc.proportional, sc.toy_variance)
    if sc.case == "case1":
        return gen_case1(sc)[0]
    return gen_case2(sc)[0]


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(args, _output_dir(args, out), {"scenario": sc.to_dict(), "out": out})
    batches = _generate(sc)
    for b in batches:
        batchio.write_batch(b, out)
    batchio.write_manifest(out, batches, sc.to_dict())
    print(f"wrote {len(batches)} batches to {out}")
    return 0


def _collect_batches(paths) -> list:
    out = []
    for p in paths:
        p = Path(p)
        out.extend(batchio.read_directory(p) if p.is_dir() else [batchio.read_batch(p)])
    return out


def cmd_ingest(args) -> int:
    model_path = Path(args.model)
    batches = _collect_batches(args.batches)
    if not batches:
        raise UsageError("no batches given")
    with _model_lock(model_path):
        if model_path.exists():
            model = persistence.load(model_path)
        else:
            model = Supermodel(batches[0].dim, _dpm_config(args))
        seen = set(model.experiment_ids)
        for b in batches:
            if b.id in seen:
                raise UsageError(f"experiment {b.id!r} is already in the model or given twice")
            if b.dim != model.dim:
                raise UsageError(f"batch {b.id!r} has dimension {b.dim}, model has {model.dim}")
            seen.add(b.id)
        _echo_config(args, _output_dir(args, model_path.parent),
                     {"model": model_path, "config": _config_dict(model.config, model.dim),
                      "batches": [b.id for b in batches]})
        for b in batches:
            model.ingest_batch(b)
            k = model.component_counts()
            print(f"{b.id}\tn={b.n}\tk_mean={k.mean():.2f}\tk_min={k.min()}\tk_max={k.max()}")
        persistence.save(model, model_path)
    return 0


def _load_model(path) -> Supermodel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    return persistence.load(path)


def _write_or_print(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_query(args) -> int:
    model = _load_model(args.model)
    query = batchio.read_batch(args.batch)
    candidates = [e for e in model.experiment_ids if e not in set(args.exclude or [])]
    _echo_config(args, _output_dir(args, Path(args.model).parent),
                 {"model": args.model, "batch": args.batch, "top_k": args.top_k,
                  "weighting": args.weighting, "kernel": args.kernel, "exclude": args.exclude or []})
    ranking = model.score_query(query, candidates, weighting=args.weighting, kernel=args.kernel)
    _write_or_print(ranking.to_csv(args.top_k), args.output)
    return 0


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"grid must be lo:hi:step, got {text!r}") from None
    if not step > 0 or hi < lo:
        raise UsageError(f"bad grid {text!r}")
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def cmd_density(args) -> int:
    model = _load_model(args.model)
    _echo_config(args, _output_dir(args, Path(args.model).parent),
                 {"model": args.model, "grid": args.grid, "points": args.points})
    if args.points:
        pts = batchio.read_batch(args.points).samples
    else:
        if model.dim != 1:
            raise UsageError("--grid only applies to 1-D models; use --points")
        pts = _parse_grid(args.grid)[:, None]
    dens = model.density_at(pts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*(f"dim_{j + 1}" for j in range(model.dim)), "density"])
    for x, d in zip(pts, dens):
        w.writerow([*(repr(float(v)) for v in x), repr(float(d))])
    _write_or_print(buf.getvalue(), args.output)
    return 0


def _evaluate(batches, builder, args, out: Path, tag: str = "") -> dict:
    seq = evaluation.leave_one_out(builder, batches)
    extra = {}
    summary = {"map": seq.map, "auprc": seq.curve.auprc, "skipped": seq.skipped,
               "n_queries": len(seq.ap)}
    if args.baseline == "nsbl":
        base = evaluation.leave_one_out(evaluation.nsbl_builder(), batches)
        extra["nsbl"] = base.ap
        summary["nsbl_map"] = base.map
        summary["nsbl_auprc"] = base.curve.auprc
        (out / f"pr_nsbl{tag}.csv").write_text(base.curve.to_csv())
    (out / f"ap{tag}.csv").write_text(seq.ap_csv(extra))
    (out / f"pr{tag}.csv").write_text(seq.curve.to_csv())
    with open(out / f"rankings{tag}.csv", "w") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "rank", "experiment_id"])
        for q, order in seq.rankings.items():
            for r, e in enumerate(order, 1):
                w.writerow([q, r, e])
    if args.orders:
        rep = evaluation.order_robustness(batches, args.orders, args.seed,
                                          evaluation.sequential_builder(_dpm_config(args)))
        summary["order_robustness"] = rep.to_dict()
    return summary


def cmd_eval(args) -> int:
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _output_dir(args, "eval_out")
    score = {"weighting": args.weighting, "kernel": args.kernel}
    resolved = {"config": _config_dict(_dpm_config(args)), "baseline": args.baseline,
                "orders": args.orders, **score}

    if args.batch_dir:
        batches = batchio.read_directory(args.batch_dir)
        if args.model:
            model = _load_model(args.model)
            missing = [b.id for b in batches if b.id not in set(model.experiment_ids)]
            if missing:
                raise UsageError(f"model lacks experiments {missing[:5]}")
            builder = lambda _bs: evaluation.model_ranker(model, **score)  # noqa: E731
            resolved["model"] = args.model
        else:
            builder = evaluation.sequential_builder(_dpm_config(args), **score)
        resolved["batch_dir"] = args.batch_dir
        _echo_config(args, out, resolved)
        summary = _evaluate(batches, builder, args, out)
    else:
        if not args.case or args.case == "toy":
            raise UsageError("eval needs --batch-dir or --case case1|case2")
        etas = [float(v) for v in args.etas.split(",")] if args.etas else [args.eta]
        scenarios = [_scenario(args, eta) for eta in etas]
        resolved["scenarios"] = [s.to_dict() for s in scenarios]
        _echo_config(args, out, resolved)
        summary = {"by_eta": {}}
        for sc in scenarios:
            batches = _generate(sc)
            tag = f"_eta{sc.eta:g}"
            summary["by_eta"][f"{sc.eta:g}"] = _evaluate(
                batches, evaluation.sequential_builder(_dpm_config(args), **score), args, out, tag)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- parser ----------------------------------------------------------------------

def _add_dpm_flags(p):
    g = p.add_argument_group("supermodel")
    g.add_argument("--n-particles", type=int, default=100)
    g.add_argument("--alpha", type=float, default=2.0)
    g.add_argument("--mode", choices=MODES, default="map")
    g.add_argument("--resampler", choices=RESAMPLERS, default="multinomial")
    g.add_argument("--recompute-period", type=int, default=32)


def _add_scenario_flags(p, required_case: bool):
    g = p.add_argument_group("simulation")
    g.add_argument("--case", choices=("toy", "case1", "case2"), required=required_case)
    g.add_argument("--n", type=int, default=300, help="toy: draws per mode")
    g.add_argument("--proportional", action="store_true",
                   help="toy: scale batch sizes by the mode weights")
    g.add_argument("--toy-sd", action="store_true",
                   help="toy: read 0.4/0.3 as standard deviations instead of variances")
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--p", type=int)
    g.add_argument("--experiments", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--draws", type=int)
    g.add_argument("--burn-in", type=int)
    g.add_argument("--obs-min", type=int)
    g.add_argument("--obs-max", type=int)
    g.add_argument("--lasso-rule", choices=("agree", "verbatim"))


def _add_score_flags(p):
    p.add_argument("--weighting", choices=WEIGHTINGS, default="normalized")
    p.add_argument("--kernel", choices=KERNELS, default="gaussian")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument("--out-dir", help=f"where resolved configs go (env: {OUTPUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="seqdpm", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    _sub = sub.add_parser
    sub.add_parser = lambda *a, **kw: _sub(*a, parents=[common], **kw)

    p = sub.add_parser("simulate", help="write synthetic experiment batches")
    _add_scenario_flags(p, required_case=True)
    p.add_argument("--out", required=True, help="batch directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="stream batches into a model file")
    p.add_argument("--model", required=True)
    p.add_argument("batches", nargs="+", help="batch files or directories")
    _add_dpm_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="rank stored experiments against a query batch")
    p.add_argument("--model", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--top-k", type=int, default=0, help="0 prints the full ranking")
    p.add_argument("--exclude", nargs="*", help="experiment ids to leave out")
    p.add_argument("--output", help="CSV path (default stdout)")
    _add_score_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("density", help="evaluate the ensemble density")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", default="-5:5:0.01", help="lo:hi:step for 1-D models")
    p.add_argument("--points", help="batch file of evaluation points")
    p.add_argument("--output")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("eval", help="leave-one-out retrieval evaluation")
    p.add_argument("--batch-dir")
    p.add_argument("--model", help="use this already-ingested model instead of rebuilding")
    p.add_argument("--baseline", choices=("nsbl",))
    p.add_argument("--etas", help="comma-separated eta sweep (with --case)")
    p.add_argument("--orders", type=int, default=0, help="also rerun under this many random orders")
    p.add_argument("--out", help="report directory")
    _add_scenario_flags(p, required_case=False)
    _add_dpm_flags(p)
    _add_score_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # let "--grid -5:5:0.1" through; argparse would read "-5..." as an option
    for i in range(len(argv) - 1):
        if argv[i] == "--grid":
            argv[i:i + 2] = [f"--grid={argv[i + 1]}", ""]
    args = parser.parse_args([a for a in argv if a != ""])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ModelFormatError, BatchFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, KeyError, AssertionError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
