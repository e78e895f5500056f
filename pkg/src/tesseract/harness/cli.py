"""Command line entry point: ``tesseract run|compare|verify|gen-env``."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from ..mmdp import dumps_env
from .config import ConfigError, ExperimentConfig, UnknownKindError
from .experiments import (SCHEMA_VERSION, OutputError, build_env, env_signature, load_records,
                          prepare_output, run_experiment)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_UNKNOWN_KIND = 4
EXIT_OUTPUT = 5
EXIT_MISMATCH = 6
EXIT_INPUT = 7

OUT_ENV_VAR = "TESSERACT_OUT"
CURVE_KINDS = ("model_free", "ablation_rank", "ablation_env_rank")
PASS_METRICS = ("passed", "holds")


class MismatchError(ValueError):
    pass


def _default_out(sub: str) -> str:
    return str(Path(os.environ.get(OUT_ENV_VAR, "runs")) / sub)


def _seeds_from(args):
    if args.seeds:
        return args.seeds
    if args.seed is not None:
        return [args.seed]
    return None


def _override_list(args, seeds):
    out = list(args.override or [])
    if seeds is not None:
        out.append(f"experiment.seeds={seeds!r}")
    return out


def _print_summary(records):
    groups = sorted({r.group for r in records})
    for g in groups:
        recs = [r for r in records if r.group == g]
        parts = []
        for metric in recs[0].summary:
            vals = np.array([r.summary[metric] for r in recs], dtype=float)
            vals = vals[~np.isnan(vals)]
            parts.append(f"{metric}={np.median(vals) if vals.size else np.nan:.4g}")
        print(f"{g}: n={len(recs)} " + " ".join(parts))


def _all_checks_pass(records) -> bool:
    flags = [r.summary[m] for r in records for m in PASS_METRICS if m in r.summary]
    return all(f == 1.0 for f in flags)


def _run_config(cfg: ExperimentConfig, out, jobs) -> int:
    if out is None:
        out = cfg.out or _default_out(cfg.kind if cfg.kind != "verify" else
                                      "verify_" + cfg.verify["what"])
    records = run_experiment(cfg, out, jobs)
    _print_summary(records)
    print(f"wrote {len(records)} runs to {out} (config {cfg.config_hash()})")
    return EXIT_OK if _all_checks_pass(records) else EXIT_CHECK_FAILED


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config, _override_list(args, _seeds_from(args)))
    return _run_config(cfg, args.out, args.jobs)


def cmd_verify(args) -> int:
    seeds = _seeds_from(args) or list(range(10))
    text = f"[experiment]\nkind = verify:{args.kind}\nseeds = {seeds!r}\n"
    cfg = ExperimentConfig.from_text(text, args.override or [])
    return _run_config(cfg, args.out, args.jobs)


def _read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["step"]) for r in rows], [float(r["greedy_payoff"]) for r in rows]


def compare(paths, out) -> list[dict]:
    """Aligned per-step median curves and a final-performance table."""
    docs = [load_records(p) for p in paths]
    base = docs[0]
    for d in docs[1:]:
        a, b = base["config"]["env"], d["config"]["env"]
        if env_signature(a) != env_signature(b):
            raise MismatchError(f"environment mismatch: {a} vs {b}")
        pinned = "seed" in a or a.get("type") == "file"
        if not pinned and sorted(base["seeds"]) != sorted(d["seeds"]):
            raise MismatchError("records use per-seed environments but different seed lists")
    out = prepare_output(out)
    table, curves = [], []
    for d in docs:
        groups = sorted({r.group for r in d["records"]})
        for g in groups:
            recs = [r for r in d["records"] if r.group == g]
            label = g if len(docs) == 1 else f"{g}@{d['config_hash'][:8]}"
            row = {"schema_version": SCHEMA_VERSION, "label": label, "n": len(recs)}
            for metric in recs[0].summary:
                vals = np.array([r.summary[metric] for r in recs], dtype=float)
                finite = vals[~np.isnan(vals)]
                row[f"{metric}_median"] = float(np.median(finite)) if finite.size else np.nan
            table.append(row)
            if d["kind"] in CURVE_KINDS:
                per_seed = [_read_curve(r.csv_path) for r in recs]
                steps = per_seed[0][0]
                payoff = np.array([p for _, p in per_seed if len(p) == len(steps)])
                q1, med, q3 = np.percentile(payoff, [25, 50, 75], axis=0)
                curves += [{"schema_version": SCHEMA_VERSION, "label": label, "step": s,
                            "median": m, "q1": a, "q3": b}
                           for s, m, a, b in zip(steps, med, q1, q3)]
    fields = ["schema_version", "label", "n"] + sorted(
        {k for row in table for k in row} - {"schema_version", "label", "n"})
    with open(out / "comparison_final.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(table)
    if curves:
        with open(out / "comparison_curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(curves[0]))
            w.writeheader()
            w.writerows(curves)
    return table


def cmd_compare(args) -> int:
    table = compare(args.records, args.out or _default_out("compare"))
    for row in table:
        vals = " ".join(f"{k}={v:.4g}" for k, v in row.items()
                        if k.endswith("_median") and isinstance(v, float))
        print(f"{row['label']}: n={row['n']} {vals}")
    return EXIT_OK


_ALIASES = {"S": "num_states", "n": "num_agents", "U": "num_actions", "r": "rank"}


def parse_env_spec(spec: str) -> dict:
    """``tensor_game:n=5,U=10,r=8,seed=0`` or ``mmdp:S=3,n=2,U=4,k1=2,k2=2,gamma=0.9``."""
    if ":" not in spec:
        raise ConfigError("env spec must look like type:key=value,...")
    etype, body = spec.split(":", 1)
    out = {"type": etype}
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise ConfigError(f"bad env spec item {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        k = _ALIASES.get(k, k)
        out[k] = v if k == "transitions" else (float(v) if k == "gamma" else int(v))
    return out


def cmd_gen_env(args) -> int:
    spec = parse_env_spec(args.spec)
    ExperimentConfig(kind="model_based" if spec["type"] == "mmdp" else "model_free",
                     seeds=[0], env=spec)  # validation only
    text = dumps_env(build_env(spec, spec.get("seed", 0)))
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise OutputError(f"cannot write {args.out}: {exc}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tesseract", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--seeds", type=int, nargs="+", help="run these seeds")
        sp.add_argument("--jobs", type=int, default=1, help="parallel runs")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./runs)")
        sp.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config entry; repeatable")

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    seeded(r)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run a built-in property check")
    v.add_argument("kind", help="thm1, thm3 or props")
    seeded(v)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("compare", help="compare run records")
    c.add_argument("records", nargs="+", help="records.json files or run directories")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-env", help="generate and serialize an environment")
    g.add_argument("spec")
    g.add_argument("--out", help="output file (stdout when omitted)")
    g.set_defaults(func=cmd_gen_env)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UnknownKindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_KIND
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
