"""Batch experiment runner, parameter sweeps, and report generation.

Logs are the source of truth: reports are always regenerable from the
per-episode JSON logs alone, so metric changes never require re-simulation.
Every parameter that affects results lands in the run manifest.

Exit codes: 0 ok, 1 usage error, 2 runtime failure, 3 partial failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, simulation
from .baselines import POLICY_NAMES, SfmParams
from .planner import PlannerConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3

MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    scenario: str = "headon"
    policies: tuple[str, ...] = ("ours",)
    human_models: tuple[str, ...] = ("ibr", "oc")
    episodes: int = 20
    seed_base: int = 0
    output_dir: str = "runs/out"
    overrides: dict = field(default_factory=dict)
    parallelism: int = 1

    def __post_init__(self):
        if self.episodes < 1:
            raise UsageError("episodes must be >= 1")
        unknown = [p for p in self.policies if p not in POLICY_NAMES]
        if unknown:
            raise UsageError(f"unknown policies: {unknown}; registered: {POLICY_NAMES}")
        if self.scenario != "headon":
            raise UsageError(f"unknown scenario template {self.scenario!r}")
        bad = [m for m in self.human_models if m not in ("ibr", "oc")]
        if bad:
            raise UsageError(f"unknown human models: {bad}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_overrides(pairs) -> dict:
    """Flat dotted-key overrides, values parsed as JSON when possible."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _apply_namespace(config, overrides: dict, namespace: str):
    fields = {f.name for f in dataclasses.fields(config)}
    updates = {}
    for key, value in overrides.items():
        if not key.startswith(namespace + "."):
            continue
        name = key[len(namespace) + 1 :]
        if name not in fields:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        updates[name] = value
    return replace(config, **updates) if updates else config


def resolve_configs(overrides: dict):
    """Robot planner config, the shared model-of-others config, and the
    simulated human's own config from flat overrides."""
    robot = _apply_namespace(PlannerConfig(), overrides, "planner")
    model = replace(robot)
    human = _apply_namespace(
        PlannerConfig(inconvenience_budget=simulation.HUMAN_TRUE_BUDGET), overrides, "human"
    )
    sfm = _apply_namespace(SfmParams(), overrides, "sfm")
    return robot, model, human, sfm


def headon_scenario(seed: int, policy: str, human_variant: str, robot_config, human_config):
    """Batch episode: relative heading drawn uniformly in [-pi/4, pi/4] from
    the episode seed; the given human model variant."""
    heading = float(np.random.default_rng(seed).uniform(-np.pi / 4, np.pi / 4))
    model = simulation.HumanModel(variant=human_variant, config=human_config)
    return simulation.generate_headon(
        seed, heading, human_model=model, robot_policy=policy, robot_config=robot_config
    )


def cmd_run(spec: ExperimentSpec) -> int:
    out = Path(spec.output_dir)
    episodes_dir = out / "episodes"
    episodes_dir.mkdir(parents=True, exist_ok=True)
    robot_cfg, model_cfg, human_cfg, sfm = resolve_configs(spec.overrides)

    jobs = []
    for policy in spec.policies:
        for i in range(spec.episodes):
            seed = spec.seed_base + i
            variant = spec.human_models[i % len(spec.human_models)]
            scenario = headon_scenario(seed, policy, variant, robot_cfg, human_cfg)
            jobs.append((policy, seed, variant, scenario))

    episode_rows = []
    logs = []
    failures = 0
    results = simulation.run_batch([job[3] for job in jobs], parallelism=spec.parallelism)
    for (policy, seed, variant, scenario), result in zip(jobs, results):
        stem = f"{policy}_{seed:04d}"
        row = {
            "policy": policy,
            "seed": seed,
            "human_model": variant,
            "relative_heading": scenario.agents[1].start.theta - np.pi,
            "log": f"episodes/{stem}.json",
            "csv": f"episodes/{stem}.csv",
        }
        if isinstance(result, str):
            row["status"] = result
            failures += 1
        else:
            simulation.save_log(result, episodes_dir / f"{stem}.json")
            simulation.write_log_csv(result, episodes_dir / f"{stem}.csv")
            row["status"] = "ok"
            row["flags"] = list(result.flags)
            row["timing"] = result.timing_summary()
            logs.append(result)
        episode_rows.append(row)

    if logs:
        report = metrics.aggregate(logs)
        metrics.write_report_json(report, out / "report.json")
        metrics.write_report_csv(report, out / "report.csv")

    manifest = {
        "schema_version": simulation.SCHEMA_VERSION,
        "package_version": __version__,
        "spec": spec.to_dict(),
        "overrides": spec.overrides,
        "resolved": {
            "planner_config": robot_cfg.to_dict(),
            "model_config": model_cfg.to_dict(),
            "human_config": human_cfg.to_dict(),
            "sfm_params": sfm.to_dict(),
        },
        "episodes": episode_rows,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)

    if failures == len(jobs):
        return EXIT_RUNTIME
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_sweep(parameter: str, values, spec: ExperimentSpec) -> int:
    base_out = Path(spec.output_dir)
    base_out.mkdir(parents=True, exist_ok=True)
    probe = dict(spec.overrides)
    probe[parameter] = values[0]
    resolve_configs(probe)  # validates the parameter key

    worst = EXIT_OK
    summary = {"parameter": parameter, "values": []}
    for value in values:
        sub = replace(
            spec,
            output_dir=str(base_out / f"{parameter.replace('.', '_')}_{value}"),
            overrides={**spec.overrides, parameter: value},
        )
        status = cmd_run(sub)
        worst = max(worst, status)
        deviations = []
        for row in json.loads((Path(sub.output_dir) / MANIFEST_NAME).read_text())["episodes"]:
            if row["status"] != "ok":
                continue
            log = simulation.load_log(Path(sub.output_dir) / row["log"])
            first = metrics.first_heading_deviation(log.trajectories["robot"])
            deviations.append(first)
        known = [d for d in deviations if d is not None]
        summary["values"].append(
            {
                "value": value,
                "first_heading_deviation": deviations,
                "median_first_heading_deviation": float(np.median(known)) if known else None,
                "output_dir": sub.output_dir,
            }
        )
    with open(base_out / "sweep_summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return worst


def cmd_report(log_dir: str, output_dir: str | None = None) -> int:
    source = Path(log_dir)
    paths = sorted(source.rglob("*.json"))
    logs = []
    skipped = []
    for path in paths:
        if path.name in (MANIFEST_NAME, "report.json", "sweep_summary.json") or path.name.startswith(
            "timing"
        ):
            continue
        try:
            logs.append(simulation.load_log(path))
        except Exception as exc:  # noqa: BLE001 - corrupt logs are skipped, recorded
            skipped.append({"path": str(path), "error": str(exc)})
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if not logs:
        print("no readable logs found", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(output_dir or log_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.aggregate(logs)
    metrics.write_report_json(report, out / "report.json")
    metrics.write_report_csv(report, out / "report.csv")
    if skipped:
        with open(out / "report_skipped.json", "w") as f:
            json.dump(skipped, f, indent=1)
        return EXIT_PARTIAL
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="socnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of seeded episodes")
    run.add_argument("--scenario", default="headon")
    run.add_argument("--policies", default="ours", help="comma-separated policy names")
    run.add_argument("--human-models", default="ibr,oc", help="comma-separated: ibr,oc")
    run.add_argument("--episodes", type=int, default=20)
    run.add_argument("--seed-base", type=int, default=0)
    run.add_argument("--out", default="runs/out")
    run.add_argument("--parallelism", type=int, default=1)
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    sweep = sub.add_parser("sweep", help="run one sub-experiment per parameter value")
    sweep.add_argument("--parameter", required=True, help="dotted config key, e.g. planner.markup")
    sweep.add_argument("--values", required=True, help="comma-separated JSON values")
    for arg in ("--scenario", "--policies", "--human-models"):
        sweep.add_argument(arg, default={"--scenario": "headon", "--policies": "ours", "--human-models": "ibr,oc"}[arg])
    sweep.add_argument("--episodes", type=int, default=5)
    sweep.add_argument("--seed-base", type=int, default=0)
    sweep.add_argument("--out", default="runs/sweep")
    sweep.add_argument("--parallelism", type=int, default=1)
    sweep.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    report = sub.add_parser("report", help="regenerate metric reports from logs")
    report.add_argument("--logs", required=True)
    report.add_argument("--out", default=None)

    hitl = sub.add_parser("hitl", help="serve the realtime human-in-the-loop loop")
    hitl.add_argument("--scenario", default=None, help="scenario JSON file (default: built-in head-on)")
    hitl.add_argument("--bind", default="127.0.0.1:8765")
    hitl.add_argument("--static", default=None, help="directory of client files to serve over HTTP")
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    return ExperimentSpec(
        scenario=args.scenario,
        policies=tuple(p.strip() for p in args.policies.split(",") if p.strip()),
        human_models=tuple(m.strip() for m in args.human_models.split(",") if m.strip()),
        episodes=args.episodes,
        seed_base=args.seed_base,
        output_dir=args.out,
        overrides=parse_overrides(args.override),
        parallelism=args.parallelism,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return cmd_run(_spec_from_args(args))
        if args.command == "sweep":
            values = [json.loads(v) for v in args.values.split(",")]
            return cmd_sweep(args.parameter, values, _spec_from_args(args))
        if args.command == "report":
            return cmd_report(args.logs, args.out)
        if args.command == "hitl":
            from . import hitl

            return hitl.run_server_cli(args.scenario, args.bind, args.static)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
