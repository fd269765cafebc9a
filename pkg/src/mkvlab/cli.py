"""Batch front end: ``mkvlab <subcommand> --config file.json``.

Exit codes: 0 success, 2 configuration error, 3 validation failure
(assumption or precondition violated), 4 expectation/threshold breach.
A manifest is written next to the outputs on every run that gets past
argument parsing.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .discrete_oracle import problem_from_json as discrete_from_json
from .discrete_oracle import random_instance, verify_dpp_exact, exact_value, table_to_json
from .dpp import InnerBudget, check_dpp, check_markov_reduction, check_ordering, stopping_from_json
from .lq_oracle import (hjb_residual, lq_value, preset, riccati_policy, solve_riccati, terminal_mismatch,
                        to_problem)
from .policies import family_search_from_json, policy_from_json
from .problems.config import PROBLEM_SCHEMA, ConfigError, check_schema, problem_from_json
from .problems.spec import from_path_atoms
from .problems.updating import UpdatingFunction
from .problems.validators import estimate_lipschitz, validate_growth, validate_nonanticipativity
from .simulator import SimulationError, TimeGrid, picard_solve, simulate
from .value import estimate_J, optimize_value, particle_totals, summarize, write_trace

log = logging.getLogger("mkvlab")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_THRESHOLD = 0, 2, 3, 4

_num = {"type": "number"}
_vec = {"type": "array", "items": _num}
_int_pos = {"type": "integer", "minimum": 1}
GRID = {"type": "object", "properties": {"t_start": _num, "t_end": _num, "steps": _int_pos},
        "required": ["steps"], "additionalProperties": False}
PARTICLES = {"type": "object", "properties": {"M": _int_pos, "N": _int_pos}, "required": ["M", "N"],
             "additionalProperties": False}
BOUNDS = {"type": "object", "properties": {"lo": _vec, "hi": _vec}, "required": ["lo", "hi"],
          "additionalProperties": False}
POLICY = {
    "type": "object",
    "properties": {
        "info_class": {"enum": ["bstrong", "strong", "feedback"]},
        "family": {"enum": ["constant", "piecewise-constant", "linear-feedback", "table", "scheduled-feedback"]},
        "params": _vec, "bounds": BOUNDS, "randomized": {"type": "boolean"},
        "time_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "bins": _int_pos, "edges": _vec, "name": {"type": "string"},
        "phi": {"type": "object", "properties": {"kind": {"enum": ["running-state", "running-max", "running-average",
                                                                   "composite"]}, "n": _int_pos},
                "required": ["kind"], "additionalProperties": False},
        "schedule": {"oneOf": [{"const": "riccati"},
                               {"type": "object", "properties": {"times": _vec, "gains": {"type": "array"}},
                                "required": ["times", "gains"], "additionalProperties": False}]},
    },
    "required": ["info_class", "family", "bounds"], "additionalProperties": False,
}
SEARCH = {
    "type": "object",
    "properties": {"template": POLICY,
                   "bounds": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                              "minItems": 1},
                   "resolution": {"oneOf": [_int_pos, {"type": "array", "items": _int_pos}]},
                   "refine_levels": {"type": "integer", "minimum": 0},
                   "budget": {"oneOf": [_int_pos, {"type": "null"}]}},
    "required": ["template", "bounds", "resolution"], "additionalProperties": False,
}
STOPPING = {
    "type": "object",
    "properties": {"kind": {"enum": ["deterministic", "hitting"]}, "time": _num,
                   "functional": {"enum": ["mean", "second-moment"]}, "threshold": _num,
                   "direction": {"enum": ["up", "down"]}, "coordinate": {"type": "integer", "minimum": 0},
                   "cap": _num},
    "required": ["kind"], "additionalProperties": False,
}
PATH_LAW = {"type": "object", "properties": {"offsets": _vec, "atoms": {"type": "array"}, "weights": _vec},
            "required": ["offsets", "atoms"], "additionalProperties": False}


def _schema(name, props, required):
    return {"type": "object",
            "properties": {"schema": {"const": f"mkvlab/{name}/1"}, "seed": {"type": "integer", "minimum": 0},
                           **props},
            "required": ["schema", *required], "additionalProperties": False}


SCHEMAS = {
    "simulate": _schema("simulate", {
        "problem": PROBLEM_SCHEMA, "grid": GRID, "particles": PARTICLES, "policy": POLICY,
        "picard": {"type": "object", "properties": {"tol": {"type": "number", "exclusiveMinimum": 0},
                                                    "max_iter": _int_pos}, "additionalProperties": False},
        "export": {"type": "object", "properties": {"csv": {"type": "boolean"}, "binary": {"type": "boolean"}},
                   "additionalProperties": False},
    }, ["problem", "grid", "particles", "policy"]),
    "validate": _schema("validate", {
        "problem": PROBLEM_SCHEMA, "samples": _int_pos,
        "thresholds": {"type": "object", "properties": {"lipschitz": _num, "growth": _num},
                       "additionalProperties": False},
    }, ["problem"]),
    "optimize": _schema("optimize", {
        "problem": PROBLEM_SCHEMA, "grid": GRID, "particles": PARTICLES, "search": SEARCH,
        "expect": {"type": "object", "properties": {"params": _vec, "params_tol": _num, "value": _num,
                                                    "value_se": _num}, "additionalProperties": False},
    }, ["problem", "grid", "particles", "search"]),
    "dpp-check": _schema("dpp-check", {
        "problem": PROBLEM_SCHEMA, "grid": GRID, "particles": PARTICLES, "search": SEARCH, "outer_search": SEARCH,
        "inner": {"type": "object", "properties": {"M": _int_pos, "N": _int_pos, "search": SEARCH},
                  "required": ["M", "N"], "additionalProperties": False},
        "stopping": STOPPING, "retry": {"type": "boolean"},
        "expect": {"type": "object", "properties": {"consistent": {"type": "boolean"}, "label": {"type": "string"}},
                   "additionalProperties": False},
    }, ["problem", "grid", "particles", "search", "inner", "stopping"]),
    "ordering": _schema("ordering", {
        "problem": PROBLEM_SCHEMA, "grid": GRID, "particles": PARTICLES,
        "families": {"type": "array", "items": SEARCH, "minItems": 1},
        "labels": {"type": "array", "items": {"type": "string"}},
        "expect": {"type": "object", "properties": {"monotone": {"type": "boolean"}, "collapse": {"type": "boolean"}},
                   "additionalProperties": False},
    }, ["problem", "grid", "particles", "families"]),
    "lq-verify": _schema("lq-verify", {
        "presets": {"type": "array", "items": {"enum": ["LQCN-1", "LQCN-2"]}, "minItems": 1},
        "grid": GRID, "particles": PARTICLES, "riccati_steps": _int_pos,
        "hjb": {"type": "object", "properties": {"points": _int_pos, "atoms": _int_pos, "seed": {"type": "integer"}},
                "additionalProperties": False},
        "expect": {"type": "object", "properties": {"se_multiple": _num, "relative": _num, "hjb_tol": _num},
                   "additionalProperties": False},
    }, ["presets", "grid", "particles"]),
    "discrete-check": _schema("discrete-check", {
        "instances": {"type": "array", "items": {"type": "object"}},
        "random": {"type": "object", "properties": {"count": _int_pos, "seed": {"type": "integer"}, "S": _int_pos,
                                                    "A": _int_pos, "C": _int_pos, "K": _int_pos},
                   "required": ["count"], "additionalProperties": False},
        "split": _int_pos, "policy_class": {"enum": ["feedback", "bstrong"]},
    }, []),
    "markov-check": _schema("markov-check", {
        "problem": PROBLEM_SCHEMA, "grid": GRID, "particles": PARTICLES, "search": SEARCH,
        "phi": {"type": "object", "properties": {"kind": {"enum": ["running-state", "running-max", "running-average",
                                                                   "composite"]}},
                "required": ["kind"], "additionalProperties": False},
        "laws": {"type": "array", "items": PATH_LAW, "minItems": 2, "maxItems": 2},
        "expect": {"type": "object", "properties": {"agree": {"type": "boolean"}}, "additionalProperties": False},
    }, ["problem", "grid", "particles", "search", "phi", "laws"]),
}


class ThresholdBreach(Exception):
    pass


class ValidationFailure(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


class Outputs:
    def __init__(self, out_dir: Path, fmt: str):
        self.dir = out_dir
        self.fmt = fmt
        self.files: list[str] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(_dump(obj), encoding="utf-8")

    def table(self, name: str, header, rows) -> None:
        import csv
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])

    def report(self, obj, header=None, rows=None) -> None:
        if self.fmt == "csv" and header is not None:
            self.table("report.csv", header, rows)
        else:
            self.json("report.json", obj)


# ---------------------------------------------------------------------------


def _grid(cfg, T, field="grid"):
    g = cfg[field]
    try:
        return TimeGrid(float(g.get("t_start", 0.0)), float(g.get("t_end", T)), int(g["steps"]))
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from exc


def _problem(cfg):
    return problem_from_json(cfg["problem"], "problem")


def _resolve_policy(d, spec, field):
    d = copy.deepcopy(d)
    if d.get("schedule") == "riccati":
        lq = spec.meta.get("lq")
        if lq is None:
            raise ConfigError(f"{field}.schedule", "a Riccati schedule needs an lqcn problem")
        from .lq_oracle import LqSpec
        branch = "bstrong" if d["info_class"] == "bstrong" else "strong"
        sol = solve_riccati(LqSpec(**lq), 1000, branch=branch)
        d["schedule"] = {"times": sol.times.tolist(), "gains": np.column_stack([sol.k_var, sol.k_mean]).tolist()}
    d.setdefault("params", [])
    try:
        pol = policy_from_json(d)
        return pol
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(field, str(exc)) from exc


def _search(d, spec, field):
    d = copy.deepcopy(d)
    tpl = d["template"]
    tpl.setdefault("params", [0.0] * len(d["bounds"]))
    d["template"] = _resolve_policy(tpl, spec, f"{field}.template").to_json()
    try:
        fs = family_search_from_json(d)
        fs.template.check(spec.n, spec.ell)
        fs.grid()
        return fs
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from exc


def _particles(cfg):
    return cfg["particles"]["M"], cfg["particles"]["N"]


def cmd_simulate(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    grid = _grid(cfg, spec.T)
    M, N = _particles(cfg)
    policy = _resolve_policy(cfg["policy"], spec, "policy")
    try:
        policy.check(spec.n, spec.ell)
    except ValueError as exc:
        raise ConfigError("policy.params", str(exc)) from exc
    ens = simulate(spec, policy, grid, M, N, seed, threads=threads)
    est = summarize(particle_totals(spec, ens), ens.pooled, M, N, grid.steps, seed)
    means = ens.slice_means()  # (K+1, M, n)
    report = {"estimate": est.to_json(), "policy": policy.to_json(), "M": M, "N": N, "steps": grid.steps,
              "pooled_mean": means.mean(axis=1).tolist(),
              "pooled_second_moment": (ens.states ** 2).mean(axis=(1, 2)).tolist()}
    if "picard" in cfg:
        pc = cfg["picard"]
        pens, prep = picard_solve(spec, policy, grid, M, N, seed, pc.get("tol", 1e-4), pc.get("max_iter", 50), threads)
        report["picard"] = prep.to_json()
        report["picard_max_mean_difference"] = float(np.max(np.abs(pens.slice_means().mean(1) - means.mean(1))))
    export = cfg.get("export", {})
    if export.get("csv", True):
        ens.to_csv(out.path("ensemble.csv"))
    if export.get("binary", False):
        ens.to_binary(out.path("ensemble.bin"))
    pts = grid.points
    rows = [[float(pts[k])] + [float(v) for v in means[k].mean(axis=0)] for k in range(grid.steps + 1)]
    out.report(report, ["time"] + [f"mean_x{i + 1}" for i in range(spec.n)], rows)
    log.info("simulate: J = %.6g +- %.3g", est.mean, est.std_error)
    return EXIT_OK


def cmd_validate(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    n = cfg.get("samples", 64)
    na = validate_nonanticipativity(spec, n, seed)
    lip = estimate_lipschitz(spec, n, seed)
    gr = validate_growth(spec, n, seed)
    report = {"nonanticipativity": na.to_json(), "lipschitz": lip.to_json(), "growth": gr.to_json()}
    th = cfg.get("thresholds", {})
    failures = []
    if not na.ok:
        failures.append("non-anticipativity")
    if "lipschitz" in th and lip.constant > th["lipschitz"]:
        failures.append("lipschitz")
    if "growth" in th and gr.ratio > th["growth"]:
        failures.append("growth")
    report["failures"] = failures
    rows = [["nonanticipativity", max(na.violations.values(), default=0.0)], ["lipschitz", lip.constant],
            ["growth", gr.ratio]]
    out.report(report, ["check", "value"], rows)
    if failures:
        raise ValidationFailure(", ".join(failures))
    return EXIT_OK


def cmd_optimize(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    grid = _grid(cfg, spec.T)
    M, N = _particles(cfg)
    fs = _search(cfg["search"], spec, "search")
    res = optimize_value(spec, fs, grid, M, N, seed, threads=threads)
    write_trace(res.trace, out.path("trace.csv"))
    report = res.to_json()
    breaches = []
    exp = cfg.get("expect", {})
    if "params" in exp:
        err = float(np.max(np.abs(np.array(res.policy.params[: len(exp["params"])]) - exp["params"])))
        report["params_error"] = err
        if err > exp.get("params_tol", 0.05):
            breaches.append("params")
    if "value" in exp:
        dev = abs(res.estimate.mean - exp["value"])
        report["value_deviation"] = dev
        if dev > exp.get("value_se", 3.0) * res.estimate.std_error:
            breaches.append("value")
    report["breaches"] = breaches
    rows = [[i, float(p)] for i, p in enumerate(res.policy.params)]
    out.report(report, ["param_index", "value"], rows)
    if breaches:
        raise ThresholdBreach(", ".join(breaches))
    return EXIT_OK


def cmd_dpp(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    grid = _grid(cfg, spec.T)
    M, N = _particles(cfg)
    fs = _search(cfg["search"], spec, "search")
    outer = _search(cfg["outer_search"], spec, "outer_search") if "outer_search" in cfg else None
    inner_cfg = cfg["inner"]
    inner_search = _search(inner_cfg["search"], spec, "inner.search") if "search" in inner_cfg else None
    try:
        stopping = stopping_from_json(cfg["stopping"])
        stopping.indices(np.zeros((grid.steps + 1, 1, 1, spec.n)), grid)
    except (ValueError, TypeError) as exc:
        raise ConfigError("stopping", str(exc)) from exc
    rep = check_dpp(spec, fs, stopping, grid, M, N, InnerBudget(inner_cfg["M"], inner_cfg["N"], inner_search), seed,
                    outer_search=outer, threads=threads, retry=cfg.get("retry", True))
    rep.scenarios_to_csv(out.path("scenarios.csv"))
    body = rep.to_json()
    rows = [["lhs", rep.lhs.mean, rep.lhs.std_error], ["rhs", rep.rhs.mean, rep.rhs.std_error],
            ["gap", rep.gap, rep.gap_se]]
    out.report(body, ["quantity", "value", "std_error"], rows)
    log.info("dpp-check: gap %.4g (se %.3g) -> %s", rep.gap, rep.gap_se, rep.label)
    exp = cfg.get("expect", {})
    if exp.get("consistent") and not rep.consistent:
        raise ThresholdBreach(f"|gap| = {abs(rep.gap):.4g} exceeds 3 se = {3 * rep.gap_se:.4g}")
    if "label" in exp and rep.label != exp["label"]:
        raise ThresholdBreach(f"label {rep.label!r}, expected {exp['label']!r}")
    return EXIT_OK


def cmd_ordering(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    grid = _grid(cfg, spec.T)
    M, N = _particles(cfg)
    fams = [_search(f, spec, f"families.{i}") for i, f in enumerate(cfg["families"])]
    labels = tuple(cfg.get("labels", ("bstrong", "strong", "weak")))
    rep = check_ordering(spec, fams, grid, M, N, seed, labels, threads)
    rows = [[lab, e.mean, e.std_error] for lab, e in zip(rep.labels, rep.estimates)]
    out.report(rep.to_json(), ["class", "mean", "std_error"], rows)
    exp = cfg.get("expect", {})
    if exp.get("monotone") and not rep.monotone:
        raise ThresholdBreach("incumbents are not ordered")
    if exp.get("collapse") and not rep.collapsed:
        raise ThresholdBreach("last two classes differ by more than 3 se")
    return EXIT_OK


def cmd_lq(cfg, seed, threads, out: Outputs):
    M, N = _particles(cfg)
    exp = cfg.get("expect", {})
    k_se, rel, hjb_tol = exp.get("se_multiple", 3.0), exp.get("relative", 0.02), exp.get("hjb_tol", 1e-6)
    hcfg = cfg.get("hjb", {})
    rs = np.random.default_rng(hcfg.get("seed", seed))
    rows, body, breaches = [], {"problems": []}, []
    for name in cfg["presets"]:
        lq = preset(name)
        spec = to_problem(lq, name=name)
        grid = _grid(cfg, lq.T)
        entry = {"name": name}
        for branch in ("strong", "bstrong"):
            sol = solve_riccati(lq, cfg.get("riccati_steps", 1000), branch=branch)
            oracle = float(lq_value(sol, grid.t_start, 0.0, 1.0))
            est = estimate_J(spec, riccati_policy(sol, spec.control_box), grid, M, N, seed, threads=threads)
            resid = [abs(hjb_residual(lq, sol, float(rs.uniform(0, lq.T)), rs.normal(size=hcfg.get("atoms", 64))))
                     for _ in range(hcfg.get("points", 100))]
            perturbed = [abs(hjb_residual(lq, sol.shifted(dP=0.1), float(rs.uniform(0, lq.T)),
                                          rs.normal(size=hcfg.get("atoms", 64))))
                         for _ in range(hcfg.get("points", 100))]
            ok_mc = abs(est.mean - oracle) <= k_se * est.std_error and abs(est.mean - oracle) <= rel * abs(oracle)
            ok_hjb = max(resid) < hjb_tol and min(perturbed) > 1e-3
            if branch == "bstrong":
                ok_mc = abs(est.mean - oracle) <= k_se * est.std_error
            if not ok_mc:
                breaches.append(f"{name}/{branch}: Monte Carlo")
            if not ok_hjb:
                breaches.append(f"{name}/{branch}: HJB residual")
            entry[branch] = {"oracle": oracle, "estimate": est.to_json(), "max_residual": max(resid),
                             "min_perturbed_residual": min(perturbed), "terminal_mismatch": terminal_mismatch(sol)}
            rows.append([name, branch, oracle, est.mean, est.std_error, max(resid), min(perturbed)])
            sol.to_csv(out.path(f"riccati_{name}_{branch}.csv"))
        body["problems"].append(entry)
    body["breaches"] = breaches
    out.report(body, ["problem", "branch", "oracle", "mc_mean", "mc_se", "max_residual", "min_perturbed_residual"],
               rows)
    if breaches:
        raise ThresholdBreach("; ".join(breaches))
    return EXIT_OK


def cmd_discrete(cfg, seed, threads, out: Outputs):
    problems = []
    for i, d in enumerate(cfg.get("instances", [])):
        try:
            problems.append(discrete_from_json(d))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"instances.{i}", str(exc)) from exc
    if "random" in cfg:
        r = cfg["random"]
        base = r.get("seed", seed)
        for i in range(r["count"]):
            problems.append(random_instance(base + i, r.get("S", 2), r.get("A", 2), r.get("C", 2), r.get("K", 2)))
    if not problems:
        raise ConfigError("instances", "no instances given")
    cls = cfg.get("policy_class", "feedback")
    certs, rows, bad = [], [], []
    for i, p in enumerate(problems):
        split = cfg.get("split", max(1, p.horizon // 2))
        if split > p.horizon:
            raise ConfigError("split", f"split {split} exceeds horizon {p.horizon} of instance {i}")
        try:
            c = verify_dpp_exact(p, split, cls)
            b = exact_value(p, "bstrong")
        except ValueError as exc:
            raise ConfigError(f"instances.{i}", str(exc)) from exc
        entry = c.to_json()
        entry["bstrong_value"] = b.value
        entry["class_order_ok"] = bool(b.value <= c.value) if cls == "feedback" else True
        entry["policy_table"] = table_to_json(p, np.array(c.policy), cls, p.horizon)
        certs.append(entry)
        rows.append([i, c.value, c.rhs, c.defect, c.concatenation_defect, c.norm_defect])
        if not (c.ok and entry["class_order_ok"]):
            bad.append(i)
    out.report({"certificates": certs, "failed": bad},
               ["instance", "value", "rhs", "defect", "concatenation_defect", "norm_defect"], rows)
    if bad:
        raise ThresholdBreach(f"instances failing the exact check: {bad}")
    return EXIT_OK


def cmd_markov(cfg, seed, threads, out: Outputs):
    spec = _problem(cfg)
    grid = _grid(cfg, spec.T)
    M, N = _particles(cfg)
    fs = _search(cfg["search"], spec, "search")
    phi = UpdatingFunction(cfg["phi"]["kind"], spec.n)
    laws = []
    for i, d in enumerate(cfg["laws"]):
        try:
            laws.append(from_path_atoms(d["offsets"], d["atoms"], d.get("weights")))
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"laws.{i}", str(exc)) from exc
    try:
        rep = check_markov_reduction(spec, phi, laws[0], laws[1], fs, grid, M, N, seed, threads)
    except ValueError as exc:
        if "pushforward" in str(exc):
            out.json("report.json", {"error": str(exc)})
            raise ValidationFailure(str(exc)) from exc
        raise
    rows = [["first", rep.first.mean, rep.first.std_error], ["second", rep.second.mean, rep.second.std_error]]
    out.report(rep.to_json(), ["law", "mean", "std_error"], rows)
    if cfg.get("expect", {}).get("agree") and not rep.agree:
        raise ThresholdBreach("values under the two laws differ by more than 3 se")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "validate": cmd_validate, "optimize": cmd_optimize, "dpp-check": cmd_dpp,
    "ordering": cmd_ordering, "lq-verify": cmd_lq, "discrete-check": cmd_discrete, "markov-check": cmd_markov,
}


def _manifest(out: Outputs, sub, raw: bytes, seed, code, message=None):
    doc = {
        "subcommand": sub, "config_sha256": hashlib.sha256(raw).hexdigest(), "seed": seed, "exit_code": code,
        "versions": {"mkvlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": sorted(set(out.files)),
    }
    if message:
        doc["message"] = message
    (out.dir / "manifest.json").write_text(_dump(doc), encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mkvlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--threads", type=int, default=1, help="parallelism cap; results do not depend on it")
        s.add_argument("--out-dir", default="mkvlab-out")
        s.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def run(subcommand: str, config_path, *, seed=None, threads=1, out_dir="mkvlab-out", fmt="json") -> int:
    out = Outputs(Path(out_dir), fmt)
    raw = b""
    code, message, used_seed = EXIT_OK, None, seed
    try:
        try:
            raw = Path(config_path).read_bytes()
            cfg = json.loads(raw)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read config: {exc}") from exc
        check_schema(cfg, SCHEMAS[subcommand])
        used_seed = seed if seed is not None else cfg.get("seed", 0)
        if threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        code = COMMANDS[subcommand](cfg, used_seed, threads, out)
    except ConfigError as exc:
        code, message = EXIT_CONFIG, f"config error: {exc}"
    except ValidationFailure as exc:
        code, message = EXIT_VALIDATION, f"validation failure: {exc}"
    except SimulationError as exc:
        code, message = EXIT_VALIDATION, f"simulation failure: {exc}"
    except ThresholdBreach as exc:
        code, message = EXIT_THRESHOLD, f"threshold breach: {exc}"
    if message:
        print(message, file=sys.stderr)
    _manifest(out, subcommand, raw, used_seed, code, message)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    return run(args.subcommand, args.config, seed=args.seed, threads=args.threads, out_dir=args.out_dir,
               fmt=args.format)


if __name__ == "__main__":
    sys.exit(main())
