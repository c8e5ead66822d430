"""Command line: trajrisk generate, run and report."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import synthgen
from .config import ConfigError, load_config, parse_horizons
from .pipeline import STAGES, StageError, run_pipeline


def _generate(args) -> int:
    if args.config:
        specs, settings = synthgen.load_generator_spec(args.config)
    else:
        specs, settings = synthgen.preset_archetypes(args.preset), synthgen.GeneratorSettings()
    if args.n_per_archetype:
        specs = tuple(replace(s, n_patients=args.n_per_archetype) for s in specs)
    if args.gap_minutes:
        settings = replace(settings, mean_gap_minutes=args.gap_minutes)
    seed = settings.seed if args.seed is None else args.seed
    noise = settings.noise_level if args.noise is None else args.noise
    out = Path(args.out or "cohort")
    out.mkdir(parents=True, exist_ok=True)
    rows = synthgen.generate_cohort(specs, noise_level=noise, seed=seed, out_dir=out, settings=settings)
    print(f"wrote {len(rows['patients'])} patients, {len(rows['vitals'])} readings to {out}")
    return 0


def _run(args, stages: str | None) -> int:
    overrides = {"seed": args.seed}
    if args.out:
        overrides["out"] = Path(args.out)
    if getattr(args, "horizon", None):
        overrides["horizons"] = parse_horizons(args.horizon, "--horizon", "value")
    config = load_config(args.config, overrides)
    ctx = run_pipeline(config, stages, force=getattr(args, "force", False))
    if ctx.skipped:
        print(f"up to date: {', '.join(ctx.skipped)}")
    print(f"outputs in {config.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajrisk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic cohort")
    gen.add_argument("--config", help="generator INI ([generator] and [archetype.N] sections)")
    gen.add_argument("--preset", default="default", choices=["default", "heterogeneous", "stationary"])
    gen.add_argument("--n-per-archetype", type=int)
    gen.add_argument("--gap-minutes", type=float, help="mean minutes between reading sets")
    gen.add_argument("--noise", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")

    run = sub.add_parser("run", help="run pipeline stages")
    run.add_argument("--config", help="pipeline INI")
    run.add_argument("--stages", help=f"comma list from {','.join(STAGES)} (default all)")
    run.add_argument("--horizon", help="comma list of horizons in hours (4,24,72,168,inf)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--force", action="store_true", help="ignore cached stage results")

    rep = sub.add_parser("report", help="render report.md and figures from existing artifacts")
    rep.add_argument("--config")
    rep.add_argument("--seed", type=int)
    rep.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            return _generate(args)
        if args.command == "run":
            return _run(args, args.stages)
        return _run(args, "report")
    except (ConfigError, StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
