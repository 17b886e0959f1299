"""Command line entry points: run experiments, synthesize datasets, and
measure domain scaling."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import report as report_mod
from .flows import synth_syn_flood, write_flows
from .harness import ExperimentConfig, parse_config_file, run_experiment, run_scaling


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config_file(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alarm_log = out_dir / "alarms.jsonl"
    alarm_log.unlink(missing_ok=True)
    result = run_experiment(cfg, alarm_log_path=str(alarm_log))
    alarm_log.touch(exist_ok=True)  # empty file when nothing alarmed
    written = report_mod.write_experiment_report(result, out_dir)
    sys.stdout.write(report_mod.render_experiment_table(result))
    for path in written + [alarm_log]:
        print(f"wrote {path}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    flows = synth_syn_flood(
        args.seed, args.normal, args.attack, args.attackers, args.duration_ms
    )
    write_flows(args.out, flows)
    print(f"wrote {len(flows)} flows to {args.out}")
    return 0


def _cmd_scale(args: argparse.Namespace) -> int:
    if args.config:
        cfg = parse_config_file(args.config)
    else:
        # default load sized so per-domain time dwarfs scheduler noise
        cfg = ExperimentConfig(
            synth_normal=30_000, synth_attack=30_000, synth_duration_ms=3_600_000
        )
    result = run_scaling(cfg, args.max_domains)
    out_dir = Path(args.out_dir)
    written = report_mod.write_scaling_report(result, out_dir)
    sys.stdout.write(report_mod.render_scaling_table(result))
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privflow",
        description="Privacy-preserving cross-domain DDoS detection harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a cross-validated experiment")
    run_p.add_argument("--config", required=True, help="key = value config file")
    run_p.add_argument("--out-dir", default="out", help="report directory")
    run_p.set_defaults(func=_cmd_run)

    synth_p = sub.add_parser("synth", help="generate a labeled synthetic flow CSV")
    synth_p.add_argument("--seed", type=int, required=True)
    synth_p.add_argument("--normal", type=int, default=9000)
    synth_p.add_argument("--attack", type=int, default=9000)
    synth_p.add_argument("--attackers", type=int, default=5)
    synth_p.add_argument("--duration-ms", type=int, default=360_000)
    synth_p.add_argument("--out", required=True, help="output CSV path")
    synth_p.set_defaults(func=_cmd_synth)

    scale_p = sub.add_parser("scale", help="time the pipeline at 1..N domains")
    scale_p.add_argument("--max-domains", type=int, default=6)
    scale_p.add_argument("--config", default=None)
    scale_p.add_argument("--out-dir", default="out")
    scale_p.set_defaults(func=_cmd_scale)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
