"""Command line entry points: export equilibria, verify predictions.

Exit codes mirror the consuming tool where the meanings overlap: 0 for
success, 2 for configuration or input-format problems, 3 for a failed
export, 6 for misaligned files.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

from .exporter import BridgeConfig, BridgeConfigError, BridgeExportError, export
from .tdb import TdbError
from .verify import (
    BridgeAlignmentError,
    BridgeFormatError,
    verify_against_predictions,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EXPORT = 3
EXIT_ALIGNMENT = 6


def parse_t_spec(spec: str) -> tuple[float, ...]:
    """One value, a comma list, or an inclusive start:stop:step sweep."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise BridgeConfigError(f"bad schedule {spec!r}; use start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise BridgeConfigError(f"step must be positive in {spec!r}")
        if stop < start:
            raise BridgeConfigError(f"empty schedule {spec!r}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(start + k * step for k in range(count))
    return tuple(float(p) for p in spec.split(","))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridge",
        description="export database equilibria as phaseforge datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("export", help="equilibrate a grid and write a dataset")
    p_exp.add_argument("--tdb", type=Path, help="database file")
    p_exp.add_argument("--config", type=Path, help="yaml export configuration")
    p_exp.add_argument("--out", type=Path, required=True, help="dataset to write")
    p_exp.add_argument("--t", help="schedule: V, V1,V2,... or start:stop:step (K)")
    p_exp.add_argument("--elements", help="comma-separated element symbols")
    p_exp.add_argument("--comp-step", type=int, help="composition step in at.%%")
    p_exp.add_argument("--grid-step", type=float, help="phase lattice resolution")
    p_exp.add_argument("--eps-phase", type=float, help="presence threshold")
    p_exp.add_argument(
        "--backend", choices=("auto", "builtin", "pycalphad"), help="solver backend"
    )
    p_exp.add_argument("--jobs", type=int, help="worker processes")

    p_ver = sub.add_parser("verify", help="score predictions against a dataset")
    p_ver.add_argument("--data", type=Path, required=True, help="exported dataset")
    p_ver.add_argument("--pred", type=Path, required=True, help="prediction file")
    p_ver.add_argument("--json", action="store_true", help="machine-readable report")
    return parser


def _export_config(args: argparse.Namespace) -> BridgeConfig:
    overrides: dict = {}
    if args.comp_step is not None:
        overrides["comp_step"] = args.comp_step
    if args.grid_step is not None:
        overrides["grid_step"] = args.grid_step
    if args.eps_phase is not None:
        overrides["eps_phase"] = args.eps_phase
    if args.backend is not None:
        overrides["backend"] = args.backend
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.elements is not None:
        overrides["elements"] = tuple(
            e for e in args.elements.split(",") if e.strip()
        )
    if args.t is not None:
        overrides["t_schedule"] = parse_t_spec(args.t)

    if args.config is not None:
        cfg = BridgeConfig.from_yaml(args.config)
        if args.tdb is not None:
            overrides["tdb"] = args.tdb
        return replace(cfg, **overrides) if overrides else cfg
    if args.tdb is None:
        raise BridgeConfigError("export needs --config or --tdb")
    if "t_schedule" not in overrides:
        raise BridgeConfigError("export needs a schedule: --t or a config file")
    schedule = overrides.pop("t_schedule")
    return BridgeConfig.from_tdb(args.tdb, t_schedule=schedule, **overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export":
            report = export(_export_config(args), args.out)
            print(report.summary())
        else:
            report = verify_against_predictions(args.data, args.pred)
            print(report.as_json() if args.json else report.as_text())
        return EXIT_OK
    except (BridgeConfigError, BridgeFormatError, TdbError) as exc:
        print(f"bridge: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BridgeExportError as exc:
        print(f"bridge: export failed: {exc}", file=sys.stderr)
        return EXIT_EXPORT
    except BridgeAlignmentError as exc:
        print(f"bridge: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT


if __name__ == "__main__":
    sys.exit(main())
