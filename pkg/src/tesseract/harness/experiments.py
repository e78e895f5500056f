"""Seeded experiment execution: one CSV per (group, seed) plus a summary."""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..bellman import bellman_apply, mean_return, policy_evaluate_exact, policy_iteration, \
    verify_rank_bound
from ..mmdp import FactoredPolicy, Mmdp, TensorGame, generate_low_rank_mmdp, \
    generate_tensor_game, load_env
from ..model_based import METRIC_FIELDS, MbConfig, run_model_based, verify_thm3
from ..model_free import train_iac, train_tensor_game, train_vdn
from .config import ExperimentConfig, RunRecord

SCHEMA_VERSION = 1
TRAINERS = {"tac": train_tensor_game, "iac": train_iac, "vdn": train_vdn}
SUMMARY_FIELDS = ("schema_version", "config_hash", "group", "metric", "n", "median", "q1",
                  "q3", "iqr")
RUN_FIELDS = ("schema_version", "config_hash", "group", "seed", "metric", "value")


class OutputError(OSError):
    """The output directory cannot be created or written."""


def build_env(spec: dict, seed: int, rank: int | None = None):
    """Environment for one run.  ``spec['seed']`` pins a fixed environment;
    without it the run seed also seeds the environment."""
    etype = spec["type"]
    env_seed = spec.get("seed", seed)
    if etype == "file":
        return load_env(spec["path"])
    if etype == "tensor_game":
        r = spec["rank"] if rank is None else rank
        return generate_tensor_game(spec["num_agents"], spec["num_actions"], r, env_seed,
                                    allow_dependent=r > spec["num_actions"])
    return generate_low_rank_mmdp(spec["num_states"], spec["num_agents"], spec["num_actions"],
                                  spec["k1"], spec["k2"], spec["gamma"], env_seed,
                                  spec.get("transitions", "mixture"))


def env_signature(spec: dict) -> dict:
    """What must agree for two records to be comparable (a pinned env seed
    counts; per-run env seeds are covered by matching seed lists)."""
    return dict(sorted(spec.items()))


# ---------------------------------------------------------------------------
# task bodies; each returns (csv header, csv rows, summary scalars)


def _curve_task(cfg: ExperimentConfig, seed, algorithm, mf_extra=None, env_rank=None):
    game = build_env(cfg.env, seed, env_rank)
    if not isinstance(game, TensorGame):
        raise TypeError("model-free runs need a tensor game")
    curve = TRAINERS[algorithm](game, cfg.mf_config(seed, **(mf_extra or {})))
    threshold = float(cfg.ablation.get("threshold", 0.9))
    hit = curve.steps_to(threshold)
    summary = {"final_payoff": curve.final,
               "steps_to_threshold": math.nan if hit is None else float(hit),
               "optimum_found": float(curve.final >= 1.0 - 1e-12)}
    rows = list(curve.rows())
    return list(rows[0].keys()) if rows else [], rows, summary


def _model_based_task(cfg: ExperimentConfig, seed):
    m = build_env(cfg.env, seed)
    if not isinstance(m, Mmdp):
        raise TypeError("model-based runs need an MMDP")
    _, _, metrics = run_model_based(m, cfg.mb_config(seed))
    pi_star, _ = policy_iteration(m)
    best = mean_return(m, pi_star)
    final = metrics[-1]["true_return"]
    within = [r["iteration"] for r in metrics if r["true_return"] >= 0.98 * best]
    summary = {"final_return": final, "optimal_return": best,
               "ratio": final / best if best else math.nan,
               "iters_to_2pct": float(within[0] + 1) if within else math.nan}
    return list(METRIC_FIELDS), metrics, summary


def _verify_instance(seed, params):
    """Sizes are drawn from the seed unless fixed in ``params``."""
    rng = np.random.default_rng(seed)
    draw = {"num_states": int(rng.integers(1, params.get("max_states", 3) + 1)),
            "num_agents": int(rng.integers(2, params.get("max_agents", 3) + 1)),
            "num_actions": int(rng.integers(2, params.get("max_actions", 5) + 1)),
            "k1": int(rng.integers(1, params.get("max_k", 2) + 1)),
            "k2": int(rng.integers(1, params.get("max_k", 2) + 1))}
    draw.update({k: params[k] for k in draw if k in params})
    m = generate_low_rank_mmdp(draw["num_states"], draw["num_agents"], draw["num_actions"],
                               draw["k1"], draw["k2"], params.get("gamma", 0.9), seed,
                               params.get("transitions", "mixture"))
    pi = FactoredPolicy.random(m.num_states, m.num_agents, m.num_actions, rng)
    return m, pi, rng


def scalar_backup(m: Mmdp, pi: FactoredPolicy, q: np.ndarray) -> np.ndarray:
    """Bellman backup by explicit loops over states and joint actions."""
    S, n, U = m.num_states, m.num_agents, m.num_actions
    joints = list(itertools.product(range(U), repeat=n))
    v = np.zeros(S)
    for s in range(S):
        for u in joints:
            v[s] += np.prod([pi.probs[s, i, u[i]] for i in range(n)]) * q[(s,) + u]
    out = np.empty_like(q)
    for s in range(S):
        for u in joints:
            out[(s,) + u] = m.reward[(s,) + u] + m.gamma * sum(
                m.transition[(s, s2) + u] * v[s2] for s2 in range(S))
    return out


def _verify_task(cfg: ExperimentConfig, seed):
    what = cfg.verify["what"]
    params = {k: v for k, v in cfg.verify.items() if k != "what"}
    m, pi, rng = _verify_instance(seed, params)
    if what == "thm1":
        tol = params.get("tol", 1e-4)
        rep = verify_rank_bound(m, pi, tol)
        rows = [{"schema_version": SCHEMA_VERSION, "state": s, "residual": r, "bound": rep.bound}
                for s, r in enumerate(rep.residuals)]
        summary = {"max_residual": max(rep.residuals), "bound": float(rep.bound),
                   "passed": float(rep.passed)}
        return ["schema_version", "state", "residual", "bound"], rows, summary
    if what == "thm3":
        # rank max(k1, k2) bounds both dynamics tensors; the data budget
        # grows with the number of joint actions to keep eps * |S| < 1
        per_action = params.get("episodes_per_joint_action", 25)
        mb = MbConfig(**{**cfg.mb, "seed": seed}) if cfg.mb else MbConfig(
            seed=seed, rank=max(m.meta["k1"], m.meta["k2"]),
            episodes_per_iter=per_action * m.num_actions ** m.num_agents, rollout_len=50)
        behaviour = FactoredPolicy.uniform(m.num_states, m.num_agents, m.num_actions)
        rep = verify_thm3(m, behaviour, pi, mb)
        hi = rep.bound[1] if rep.bound is not None else math.nan
        rows = [{"schema_version": SCHEMA_VERSION, "achieved_eps": rep.achieved_eps,
                 "empirical_error": rep.empirical_error, "bound_hi": hi}]
        summary = {"achieved_eps": rep.achieved_eps, "empirical_error": rep.empirical_error,
                   "bound_hi": hi, "holds": float(rep.holds)}
        return list(rows[0].keys()), rows, summary
    # props: tensorised backup against loops, exact evaluation as a fixed point
    q = rng.standard_normal((m.num_states,) + m.action_shape)
    backup_err = float(np.max(np.abs(bellman_apply(m, pi, q) - scalar_backup(m, pi, q))))
    q_pi = policy_evaluate_exact(m, pi)
    fixed_err = float(np.max(np.abs(bellman_apply(m, pi, q_pi) - q_pi)))
    passed = backup_err <= params.get("backup_tol", 1e-10) and \
        fixed_err <= params.get("fixed_point_tol", 1e-8)
    rows = [{"schema_version": SCHEMA_VERSION, "backup_err": backup_err,
             "fixed_point_err": fixed_err}]
    summary = {"backup_err": backup_err, "fixed_point_err": fixed_err, "passed": float(passed)}
    return list(rows[0].keys()), rows, summary


# ---------------------------------------------------------------------------


def plan(cfg: ExperimentConfig) -> list[tuple]:
    """(group, seed, task kwargs) for every run, in a fixed order."""
    tasks = []
    for seed in cfg.seeds:
        if cfg.kind == "model_free":
            tasks += [(alg, seed, {"algorithm": alg}) for alg in cfg.algorithms]
        elif cfg.kind == "ablation_rank":
            alg = cfg.algorithms[0]
            tasks += [(f"rank{k}", seed, {"algorithm": alg, "mf_extra": {"rank": k}})
                      for k in cfg.ablation["ranks"]]
        elif cfg.kind == "ablation_env_rank":
            alg = cfg.algorithms[0]
            tasks += [(f"erank{r}", seed, {"algorithm": alg, "env_rank": r})
                      for r in cfg.ablation["env_ranks"]]
        elif cfg.kind == "model_based":
            tasks.append(("mb", seed, {}))
        else:
            tasks.append((cfg.verify["what"], seed, {}))
    return tasks


def _execute(args):
    cfg, group, seed, kwargs, out_dir = args
    t0 = time.perf_counter()
    if cfg.kind in ("model_free", "ablation_rank", "ablation_env_rank"):
        header, rows, summary = _curve_task(cfg, seed, **kwargs)
    elif cfg.kind == "model_based":
        header, rows, summary = _model_based_task(cfg, seed)
    else:
        header, rows, summary = _verify_task(cfg, seed)
    path = Path(out_dir) / f"{group}_seed{seed}.csv"
    _write_csv(path, header, rows)
    return RunRecord(cfg.config_hash(), seed, group, str(path), summary,
                     1000.0 * (time.perf_counter() - t0))


def _write_csv(path: Path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def prepare_output(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> list[RunRecord]:
    """Execute every run, then write ``runs.csv``, ``summary.csv`` and
    ``records.json`` into the output directory."""
    out = prepare_output(out_dir if out_dir is not None else (cfg.out or "runs"))
    work = [(cfg, g, s, kw, str(out)) for g, s, kw in plan(cfg)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_execute, work))
    else:
        records = [_execute(w) for w in work]
    records.sort(key=lambda r: (r.group, r.seed))
    write_outputs(cfg, records, out)
    return records


def summarize(records: list[RunRecord]) -> list[dict]:
    """Median and interquartile range of each summary scalar per group."""
    out = []
    groups = sorted({r.group for r in records})
    for g in groups:
        recs = [r for r in records if r.group == g]
        for metric in recs[0].summary:
            vals = np.array([r.summary[metric] for r in recs], dtype=float)
            vals = vals[~np.isnan(vals)]
            if vals.size:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
            else:
                q1 = med = q3 = math.nan
            out.append({"group": g, "metric": metric, "n": int(vals.size), "median": med,
                        "q1": q1, "q3": q3, "iqr": q3 - q1})
    return out


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord], out: Path):
    h = cfg.config_hash()
    runs = [{"schema_version": SCHEMA_VERSION, "config_hash": h, "group": r.group,
             "seed": r.seed, "metric": k, "value": v}
            for r in records for k, v in r.summary.items()]
    _write_csv(out / "runs.csv", RUN_FIELDS, runs)
    summary = [{"schema_version": SCHEMA_VERSION, "config_hash": h, **row}
               for row in summarize(records)]
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    doc = {"schema_version": SCHEMA_VERSION, "config_hash": h, "kind": cfg.kind,
           "config": cfg.semantic(), "seeds": cfg.seeds,
           "records": [r.to_dict() for r in records]}
    try:
        (out / "records.json").write_text(json.dumps(doc, indent=2, default=str))
    except OSError as exc:
        raise OutputError(f"cannot write records: {exc}") from exc


def load_records(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "records.json"
    doc = json.loads(p.read_text())
    doc["records"] = [RunRecord(**r) for r in doc["records"]]
    doc["path"] = str(p)
    return doc
