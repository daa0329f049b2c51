"""Command-line entry point: ``adherence <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object of option values),
``--seed``, ``--threads`` and ``--output-dir``.  Explicit flags override the
config file, which overrides the built-in defaults.  Each run writes its
outputs plus ``<command>.manifest.json`` recording input and output digests,
the resolved options and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .allocation import (
    AllocationInstance,
    certify,
    exact_allocate,
    greedy_allocate,
    validate_plan,
    write_certification,
    write_plan_csv,
)
from .cohort import load_cohort, save_cohort
from .dlr import fit_initial, forecast_horizon, load_model, save_model
from .evaluation import cross_validate, pooled_auc, write_metrics_csv
from .rewards import InterventionParams, reward_matrix, write_reward_csv
from .rules import RuleKind
from .simulation import (
    ALL_RULES,
    COMPARISON_HEADER,
    DECISION_HEADER,
    SWEEP_CAPACITIES,
    SWEEP_HEADER,
    SWEEP_Q,
    SWEEP_R,
    SimulationConfig,
    SimulationContext,
    summary_row,
    intervention_comparison,
    load_catalog,
    run_replications,
    sensitivity_sweep,
    simulate_once,
    validate_baseline,
    write_rows_csv,
)
from .synthetic import GeneratorConfig, generate_synthetic_cohort

log = logging.getLogger("adherence")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object
    help: str
    choices: tuple | None = None
    nargs: str | None = None


def _floats(text):
    return [float(x) for x in text.split(",") if x]


COMMON = [
    Opt("seed", int, 0, "master random seed"),
    Opt("threads", int, os.cpu_count() or 1, "worker threads (results do not depend on it)"),
    Opt("output_dir", str, ".", "directory for outputs and the run manifest"),
]
SIM = [
    Opt("cohort", str, None, "cohort JSON file"),
    Opt("horizon_years", int, 5, "decision horizon in years"),
    Opt("q", float, 0.8, "probability an intervention succeeds"),
    Opt("r", float, 0.1, "yearly relative risk reduction while adherent"),
    Opt("replications", int, 30, "Monte-Carlo replications"),
    Opt("ridge", float, 1e-4, "ridge penalty for the initial fit"),
    Opt("sigma_u", float, 0.5, "random-intercept prior SD"),
    Opt("bernoulli_events", bool, False, "draw events instead of summing risks"),
]
COMMANDS: dict[str, list[Opt]] = {
    "generate": [
        Opt("n", int, 1000, "number of patients"),
        Opt("generator_config", str, None, "GeneratorConfig JSON file"),
        Opt("output", str, "cohort.json", "cohort file name (inside --output-dir)"),
    ],
    "fit": [
        Opt("cohort", str, None, "cohort JSON file"),
        Opt("train_through", int, None, "last training quarter (default: quarter before the origin)"),
        Opt("ridge", float, 1e-4, "ridge penalty on non-intercept coefficients"),
        Opt("sigma_u", float, 0.5, "random-intercept prior SD"),
        Opt("output", str, "model.json", "model file name"),
    ],
    "forecast": [
        Opt("cohort", str, None, "cohort JSON file"),
        Opt("model", str, None, "model JSON file"),
        Opt("origin", int, None, "first forecast quarter (default: cohort origin)"),
        Opt("years", int, 5, "forecast length in years"),
        Opt("mode", str, "forecast", "forecast or backtest", ("forecast", "backtest")),
        Opt("sign", str, "ascent", "coefficient step direction", ("ascent", "paper")),
    ],
    "evaluate": [
        Opt("cohort", str, None, "cohort JSON file"),
        Opt("origin", int, None, "first forecast quarter (default: cohort origin)"),
        Opt("years", int, 5, "forecast length in years"),
        Opt("folds", int, 3, "patient-level cross-validation folds"),
        Opt("mode", str, "forecast", "forecast or backtest", ("forecast", "backtest")),
        Opt("ridge", float, 1e-4, "ridge penalty"),
        Opt("sigma_u", float, 0.5, "random-intercept prior SD"),
    ],
    "allocate": [
        Opt("cohort", str, None, "cohort JSON file (rewards from fitted forecasts)"),
        Opt("instance", str, None, "allocation instance JSON instead of a cohort"),
        Opt("capacity", float, 0.35, "per-epoch capacity as a fraction of patients"),
        Opt("capacity_count", int, None, "per-epoch capacity as a patient count"),
        Opt("q", float, 0.8, "probability an intervention succeeds"),
        Opt("r", float, 0.1, "yearly relative risk reduction"),
        Opt("horizon_years", int, 5, "decision horizon in years"),
        Opt("solver", str, "greedy", "greedy or exact", ("greedy", "exact")),
    ],
    "simulate": SIM
    + [
        Opt("rule", str, "bip_dlr", "decision rule", tuple(k.value for k in RuleKind)),
        Opt("capacity", float, 0.35, "per-epoch capacity as a fraction of patients"),
    ],
    "sweep": SIM
    + [
        Opt("rules", str, ",".join(k.value for k in ALL_RULES), "comma-separated rules"),
        Opt("capacity", float, 0.35, "base-case capacity fraction"),
        Opt("capacities", _floats, list(SWEEP_CAPACITIES), "capacity grid"),
        Opt("qs", _floats, list(SWEEP_Q), "q grid"),
        Opt("rs", _floats, list(SWEEP_R), "r grid"),
        Opt("factorial", bool, False, "full grid instead of one-at-a-time"),
    ],
    "compare": SIM
    + [
        Opt("catalog", str, None, "intervention catalog CSV (default: bundled)"),
        Opt("capacities", _floats, [0.25, 0.5, 0.75], "capacity fractions"),
        Opt("rule", str, "bip_dlr", "decision rule", tuple(k.value for k in RuleKind)),
    ],
    "certify": [
        Opt("instances", int, 200, "random instances"),
        Opt("n_max", int, 6, "largest patient count"),
        Opt("t_max", int, 3, "longest horizon"),
        Opt("c_max", int, 2, "largest capacity"),
        Opt("strict", bool, False, "exit nonzero when a counterexample is found"),
    ],
}
# Options that do not influence results and are left out of the manifest.
NON_RESULT = {"threads", "output_dir"}


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="adherence", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option values")
        for o in COMMON + opts:
            flag = "--" + o.name.replace("_", "-")
            kw = {"dest": o.name, "default": argparse.SUPPRESS, "help": o.help}
            if o.type is bool:
                p.add_argument(flag, action="store_true", **kw)
            else:
                p.add_argument(flag, type=o.type, choices=o.choices, **kw)
        if cmd in ("generate", "fit"):
            p.add_argument("-o", dest="output", default=argparse.SUPPRESS, help="alias for --output")
    return parser


def _coerce(o: Opt, value, source: str):
    if value is None:
        return None
    if o.type is bool:
        if not isinstance(value, bool):
            raise UsageError(f"{source}: field {o.name!r} must be a boolean")
        return value
    if o.type is _floats:
        if isinstance(value, str):
            return _floats(value)
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise UsageError(f"{source}: field {o.name!r} must be a list of numbers")
        return [float(v) for v in value]
    if o.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, o.type) or isinstance(value, bool):
        raise UsageError(f"{source}: field {o.name!r} must be of type {o.type.__name__}")
    if o.choices and value not in o.choices:
        raise UsageError(f"{source}: field {o.name!r} must be one of {list(o.choices)}")
    return value


def resolve(cmd: str, given: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = {o.name: o for o in COMMON + COMMANDS[cmd]}
    values = {name: o.default for name, o in opts.items()}
    if "config" in given:
        path = Path(given.pop("config"))
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(opts))
        if unknown:
            raise UsageError(f"config: unknown fields {unknown} for command {cmd!r}")
        for k, v in doc.items():
            values[k] = _coerce(opts[k], v, "config")
    values.update(given)
    if values["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return values


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _require(values, *names):
    for n in names:
        if values.get(n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _load_context(values) -> tuple[SimulationContext, str]:
    _require(values, "cohort")
    cohort = load_cohort(values["cohort"])
    return SimulationContext(cohort, values["horizon_years"], values["ridge"], values["sigma_u"]), values["cohort"]


def _sim_config(values, rule, capacity) -> SimulationConfig:
    return SimulationConfig(
        values["horizon_years"],
        capacity,
        values["q"],
        values["r"],
        values["replications"],
        values["seed"],
        RuleKind.parse(rule),
        bernoulli_events=values["bernoulli_events"],
    )


def cmd_generate(v, out: Path):
    cfg = GeneratorConfig.from_json(v["generator_config"]) if v["generator_config"] else GeneratorConfig()
    cfg = GeneratorConfig.from_dict({**cfg.to_dict(), "n": v["n"], "seed": v["seed"]})
    cohort = generate_synthetic_cohort(config=cfg)
    target = out / v["output"]
    save_cohort(cohort, target)
    inputs = [v["generator_config"]] if v["generator_config"] else []
    return inputs, [target], {"patients": len(cohort)}


def cmd_fit(v, out: Path):
    _require(v, "cohort")
    cohort = load_cohort(v["cohort"])
    through = v["train_through"]
    if through is None:
        if cohort.origin_quarter is None:
            raise UsageError("--train-through is required for cohorts without an origin quarter")
        through = cohort.origin_quarter - 1
    state, u = fit_initial(cohort, through, v["ridge"], 1.0 / v["sigma_u"] ** 2)
    target = out / v["output"]
    save_model(target, state, u, {"train_through_quarter": through, "ridge": v["ridge"], "sigma_u": v["sigma_u"]})
    return [v["cohort"]], [target], {"coefficients": state.named()}


def cmd_forecast(v, out: Path):
    _require(v, "cohort", "model")
    cohort = load_cohort(v["cohort"])
    state, u, _ = load_model(v["model"])
    origin = v["origin"] or cohort.origin_quarter
    if origin is None:
        raise UsageError("--origin is required for cohorts without an origin quarter")
    end = origin + 4 * v["years"] - 1
    fh = forecast_horizon(cohort, origin, end, state, u, mode=v["mode"], sign=v["sign"])
    q_path, y_path = out / "forecast_quarterly.csv", out / "forecast_yearly.csv"
    with q_path.open("w") as fh_out:
        fh_out.write("patient_id,quarter,y_hat\n")
        for pid, row in zip(fh.ids, fh.probabilities):
            for k, p in enumerate(row, start=origin):
                fh_out.write(f"{pid},{k},{float(p)!r}\n")
    yearly = fh.yearly()
    with y_path.open("w") as fh_out:
        fh_out.write("patient_id,year,y_hat\n")
        for pid, row in zip(fh.ids, yearly):
            for y, p in enumerate(row, start=1):
                fh_out.write(f"{pid},{y},{float(p)!r}\n")
    return [v["cohort"], v["model"]], [q_path, y_path], {"patients": len(fh.ids), "quarters": fh.n_quarters}


def cmd_evaluate(v, out: Path):
    _require(v, "cohort")
    cohort = load_cohort(v["cohort"])
    origin = v["origin"] or cohort.origin_quarter
    if origin is None:
        raise UsageError("--origin is required for cohorts without an origin quarter")
    metrics = cross_validate(cohort, origin, v["years"], v["folds"], v["seed"], v["ridge"], v["sigma_u"], v["mode"])
    target = out / "metrics.csv"
    write_metrics_csv(target, metrics)
    return [v["cohort"]], [target], {"mean_auc_by_year": pooled_auc(metrics)}


def cmd_allocate(v, out: Path):
    if (v["cohort"] is None) == (v["instance"] is None):
        raise UsageError("give exactly one of --cohort or --instance")
    if v["instance"]:
        inst = AllocationInstance.from_dict(json.loads(Path(v["instance"]).read_text()))
        if v["capacity_count"] is not None:
            inst = AllocationInstance(inst.rewards, v["capacity_count"], inst.ids)
        inputs = [v["instance"]]
        outputs = []
    else:
        ctx = SimulationContext(load_cohort(v["cohort"]), v["horizon_years"])
        a = reward_matrix(ctx.origin_yearly, ctx.baseline, InterventionParams(v["q"], v["r"]))
        c = v["capacity_count"]
        if c is None:
            c = SimulationConfig(capacity_fraction=v["capacity"]).capacity(ctx.n)
        inst = AllocationInstance(a, c, list(ctx.arrays.ids))
        rewards_path = out / "rewards.csv"
        write_reward_csv(rewards_path, inst.ids, a)
        inputs = [v["cohort"]]
        outputs = [rewards_path]
    plan = exact_allocate(inst) if v["solver"] == "exact" else greedy_allocate(inst)
    report = validate_plan(inst, plan)
    plan_path = out / "plan.csv"
    write_plan_csv(plan_path, inst, plan)
    return inputs, outputs + [plan_path], {"objective": plan.objective, "valid": report.ok, "violations": report.violations}


def _run_summary(run) -> dict:
    return {
        "events_per_100k": run.events.mean,
        "events_ci": [run.events.ci_low, run.events.ci_high],
        "events_reduced": run.reduced.mean,
        "events_reduced_ci": [run.reduced.ci_low, run.reduced.ci_high],
        "interventions": run.interventions,
    }


def cmd_simulate(v, out: Path):
    ctx, src = _load_context(v)
    cfg = _sim_config(v, v["rule"], v["capacity"])
    run = run_replications(ctx, cfg, v["threads"])
    base = validate_baseline(ctx, cfg.r, cfg.seed)
    rows_path, rep_path, log_path = out / "simulation.csv", out / "replications.csv", out / "decisions.csv"
    write_rows_csv(rows_path, [summary_row("single", run)], SWEEP_HEADER)
    log: list[dict] = []
    simulate_once(ctx, cfg, 0, log)
    write_rows_csv(log_path, log, DECISION_HEADER)
    with rep_path.open("w") as fh:
        fh.write("replication,events_per_100k,events_reduced,interventions,successes\n")
        for r in run.results:
            fh.write(
                f"{r.replication},{r.events_per_100k!r},{r.events_reduced_vs_no_intervention!r},{r.interventions},{r.successes}\n"
            )
    summary = _run_summary(run)
    summary["baseline"] = {
        "simulated_mean_risk": base.simulated_mean_risk,
        "data_mean_risk": base.data_mean_risk,
        "ci_width": base.ci_width,
        "ok": base.ok,
    }
    return [src], [rows_path, rep_path, log_path], summary


def cmd_sweep(v, out: Path):
    ctx, src = _load_context(v)
    rules = [RuleKind.parse(x) for x in v["rules"].split(",") if x]
    base = _sim_config(v, rules[0].value, v["capacity"])
    rows = sensitivity_sweep(ctx, base, v["capacities"], v["qs"], v["rs"], rules, v["factorial"], v["threads"])
    target = out / "sweep.csv"
    write_rows_csv(target, rows, SWEEP_HEADER)
    return [src], [target], {"rows": len(rows)}


def cmd_compare(v, out: Path):
    ctx, src = _load_context(v)
    catalog = load_catalog(v["catalog"])
    base = _sim_config(v, v["rule"], 0.35)
    rows = intervention_comparison(ctx, catalog, base, v["capacities"], RuleKind.parse(v["rule"]), v["threads"])
    target = out / "comparison.csv"
    write_rows_csv(target, rows, COMPARISON_HEADER)
    inputs = [src] + ([v["catalog"]] if v["catalog"] else [])
    return inputs, [target], {"rows": len(rows)}


def cmd_certify(v, out: Path):
    report = certify(v["instances"], v["seed"], v["n_max"], v["t_max"], v["c_max"])
    target = out / "certification.json"
    write_certification(target, report)
    summary = {"instances": report.instances, "counterexamples": len(report.counterexamples)}
    return [], [target], summary


HANDLERS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "allocate": cmd_allocate,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "certify": cmd_certify,
}


def _manifest(cmd, values, inputs, outputs, summary) -> dict:
    return {
        "command": cmd,
        "options": {k: v for k, v in sorted(values.items()) if k not in NON_RESULT},
        "seed": values["seed"],
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "summary": summary,
        "versions": {
            "adherence": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ADHERENCE_LOG", "WARNING").upper(), format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        cmd = ns.pop("command")
        values = resolve(cmd, ns)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    out = Path(values["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        for key in ("cohort", "model", "instance", "catalog", "generator_config"):
            if values.get(key) and not Path(values[key]).is_file():
                raise UsageError(f"--{key.replace('_', '-')}: file not found: {values[key]}")
        log.info("running %s", cmd)
        inputs, outputs, summary = HANDLERS[cmd](values, out)
        manifest = _manifest(cmd, values, inputs, outputs, summary)
        _write_json(out / f"{cmd}.manifest.json", manifest)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except (ValueError, OSError, KeyError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    sys.stdout.write(json.dumps({"command": cmd, "summary": summary}, sort_keys=True, allow_nan=False) + "\n")
    if cmd == "certify" and values["strict"] and summary["counterexamples"]:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
