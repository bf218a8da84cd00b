"""Command-line front end: ``fairfed run ...``.

Flags override values from an optional JSON config file (`--config`), which
mirrors the ExperimentConfig field names.  Unknown flags and invalid
combinations exit with status 2; results land under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .harness import (
    EXPERIMENTS,
    ExperimentConfig,
    desk_preset,
    paper_preset,
    run_experiment,
    summary_table,
)


def _parse_protocol(text: str) -> tuple[str, int | None, float]:
    """Accept proposed | every_round | fixed:Q | det:D | doubling | none."""
    if text in ("proposed", "every_round", "doubling", "none"):
        return text, None, 1.0
    if text.startswith("fixed:"):
        q = int(text.split(":", 1)[1])
        if q < 1:
            raise ValueError("fixed interval must be >= 1")
        return "fixed", q, 1.0
    if text.startswith("det:"):
        return "det_trigger", None, float(text.split(":", 1)[1])
    raise ValueError(f"unknown protocol {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairfed")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment preset")
    run.add_argument("--exp", choices=EXPERIMENTS, default="custom")
    run.add_argument("--scale", choices=("paper", "desk"), default="paper",
                     help="preset scale the flags start from")
    run.add_argument("--config", help="JSON config file; flags override it")
    run.add_argument("--rounds", type=int)
    run.add_argument("--agents", type=int)
    run.add_argument("--dim", type=int)
    run.add_argument("--arms", type=int)
    run.add_argument("--sigma", type=float)
    run.add_argument("--epsilon", type=_floats, metavar="E[,E...]")
    run.add_argument("--delta", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--protocol", metavar="{proposed|every_round|fixed:Q|det:D|doubling|none}")
    run.add_argument("--privacy", choices=("none", "dp"))
    seeds = run.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=int, metavar="N", help="use seeds 0..N-1")
    seeds.add_argument("--seed-list", type=_ints, metavar="a,b,c")
    run.add_argument("--norm", choices=("raw", "cap_unit"), dest="norm_mode")
    run.add_argument("--m-sweep", type=_ints, metavar="m1,m2,...",
                     help="agent counts for exp3")
    run.add_argument("--variants", help="comma list restricting the variant set")
    run.add_argument("--no-rounds-csv", action="store_true",
                     help="skip the large per-round log file")
    run.add_argument("--out", required=True, help="output directory")
    return parser


def _build_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> ExperimentConfig:
    preset = desk_preset(args.exp) if args.scale == "desk" else paper_preset(args.exp)
    cfg = preset
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        doc.setdefault("exp_id", args.exp)
        cfg = ExperimentConfig.from_json({**cfg.to_json(), **doc})
    updates = {}
    if args.rounds is not None:
        updates["rounds"] = args.rounds
    if args.agents is not None:
        updates["agents"] = args.agents
    if args.dim is not None:
        updates["dim"] = args.dim
    if args.arms is not None:
        updates["arms"] = args.arms
    if args.sigma is not None:
        updates["sigma"] = args.sigma
    if args.epsilon is not None:
        updates["epsilon"] = args.epsilon
    if args.delta is not None:
        updates["delta"] = args.delta
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.protocol is not None:
        try:
            protocol, fixed_q, det_d = _parse_protocol(args.protocol)
        except ValueError as exc:
            parser.error(str(exc))
        updates.update(protocol=protocol, fixed_interval=fixed_q, det_threshold=det_d)
    if args.privacy is not None:
        updates["privacy"] = args.privacy
    if args.seeds is not None:
        if args.seeds < 1:
            parser.error("--seeds must be >= 1")
        updates["seeds"] = tuple(range(args.seeds))
    if args.seed_list is not None:
        updates["seeds"] = args.seed_list
    if args.norm_mode is not None:
        updates["norm_mode"] = args.norm_mode
    if args.m_sweep is not None:
        updates["m_sweep"] = args.m_sweep
    if args.variants is not None:
        updates["variants"] = tuple(args.variants.split(","))
    if args.no_rounds_csv:
        updates["write_rounds"] = False
    updates["out_dir"] = args.out
    return replace(cfg, **updates)


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _build_config(args, parser)
    try:
        summaries = run_experiment(cfg)
    except ValueError as exc:
        parser.error(str(exc))
    print(f"{cfg.exp_id}: T={cfg.rounds} m={cfg.agents} d={cfg.dim} K={cfg.arms} "
          f"seeds={list(cfg.seeds)} -> {cfg.out_dir}")
    print(summary_table(summaries))
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
