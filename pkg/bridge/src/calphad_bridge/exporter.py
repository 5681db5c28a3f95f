"""Dataset export: equilibria from a real database, written in the text
format the phaseforge tooling reads.

The export walks a full composition simplex (corners included) at every
scheduled temperature, equilibrates each point, folds database phase
names onto the fixed nine-entry target vocabulary, and emits one labeled
row per converged point. Rows carry phase fractions, so the consumer's
loader re-derives the labels independently and cross-checks them against
the mask; any disagreement fails the load rather than the model run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .solver import (
    build_candidates,
    pycalphad_available,
    simplex_lattice,
    solve_points,
    solve_points_pycalphad,
)
from .tdb import TdbError, read_tdb

__all__ = [
    "TARGET_VOCAB",
    "FORMAT_TAG",
    "BridgeConfigError",
    "BridgeExportError",
    "BridgeConfig",
    "ExportReport",
    "export",
]

# label vocabulary of the consuming model, in mask bit order (bit 0 first)
TARGET_VOCAB = (
    "LIQUID",
    "FCC_A1",
    "HCP_A3",
    "BCC_A2",
    "RHOMBO_A7",
    "BCT_A5",
    "EPSILON",
    "CUSN_IMC",
    "DO3",
)

FORMAT_TAG = "#phaseforge-v1"

_BACKENDS = ("auto", "builtin", "pycalphad")


class BridgeConfigError(ValueError):
    """Raised for an inconsistent export configuration."""


class BridgeExportError(RuntimeError):
    """Raised when computed equilibria cannot form a valid dataset."""


def canonical_symbol(name: str) -> str:
    return name[:1].upper() + name[1:].lower()


@dataclass(frozen=True)
class BridgeConfig:
    """Everything one export needs; validated on construction.

    ``elements`` fixes the composition column order of the output file.
    ``mapping`` sends every database phase onto a vocabulary entry; export
    refuses to start while any phase is unmapped, because a silently
    dropped phase would mislabel every point where it is stable.
    """

    tdb: Path
    elements: tuple[str, ...]
    mapping: dict[str, str]
    t_schedule: tuple[float, ...]
    comp_step: int = 2
    eps_phase: float = 1e-6
    grid_step: float = 0.01
    backend: str = "auto"
    jobs: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "tdb", Path(self.tdb))
        object.__setattr__(
            self, "elements", tuple(canonical_symbol(e) for e in self.elements)
        )
        object.__setattr__(self, "t_schedule", tuple(float(t) for t in self.t_schedule))
        if len(self.elements) < 2:
            raise BridgeConfigError("an export needs at least two elements")
        if len(set(self.elements)) != len(self.elements):
            raise BridgeConfigError(f"duplicate elements in {self.elements}")
        if not isinstance(self.comp_step, int) or not 1 <= self.comp_step <= 50:
            raise BridgeConfigError(f"comp_step {self.comp_step} not in 1..50")
        if 100 % self.comp_step != 0:
            raise BridgeConfigError(
                f"comp_step {self.comp_step} must divide 100 so grid sums are exact"
            )
        if not self.t_schedule:
            raise BridgeConfigError("temperature schedule is empty")
        if any(t <= 0 for t in self.t_schedule):
            raise BridgeConfigError("temperatures must be positive kelvin")
        if any(b <= a for a, b in zip(self.t_schedule, self.t_schedule[1:])):
            raise BridgeConfigError("temperature schedule must strictly increase")
        if not 0.0 < self.eps_phase < 0.1:
            raise BridgeConfigError(f"eps_phase {self.eps_phase} not in (0, 0.1)")
        m = round(1.0 / self.grid_step)
        if not 0.0 < self.grid_step <= 0.5 or abs(m * self.grid_step - 1.0) > 1e-9:
            raise BridgeConfigError(f"grid_step {self.grid_step} must divide 1 evenly")
        if self.backend not in _BACKENDS:
            raise BridgeConfigError(f"backend {self.backend!r} not in {_BACKENDS}")
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise BridgeConfigError(f"jobs {self.jobs} must be a positive integer")
        bad = sorted(set(self.mapping.values()) - set(TARGET_VOCAB))
        if bad:
            raise BridgeConfigError(
                f"mapping targets {bad} are outside the vocabulary {TARGET_VOCAB}"
            )

    @classmethod
    def from_tdb(
        cls, tdb: str | Path, *, t_schedule, comp_step: int = 2, **overrides
    ) -> "BridgeConfig":
        """Configure an export straight from a database.

        Elements default to everything the database declares; the phase
        mapping defaults to identity for names already in the vocabulary.
        Databases with other phase names need an explicit mapping (most
        easily via a config file), and construction fails with the full
        list of unmapped names rather than guessing.
        """
        db = read_tdb(tdb)
        elements = tuple(sorted(canonical_symbol(e) for e in db.elements))
        mapping = {name: name for name in db.phases if name in TARGET_VOCAB}
        unmapped = sorted(set(db.phases) - set(mapping))
        if unmapped and "mapping" not in overrides:
            raise BridgeConfigError(
                f"phases {unmapped} have no vocabulary mapping; pass mapping= "
                f"or use a config file"
            )
        mapping.update(overrides.pop("mapping", {}))
        if "elements" in overrides:
            elements = tuple(overrides.pop("elements"))
        return cls(
            tdb=Path(tdb),
            elements=elements,
            mapping=mapping,
            t_schedule=tuple(t_schedule),
            comp_step=comp_step,
            **overrides,
        )

    @classmethod
    def from_yaml(cls, path: str | Path) -> "BridgeConfig":
        """Read a config file; relative tdb paths resolve against it.

        Recognized keys: tdb, elements, phases (name -> vocabulary entry),
        t (list, single value, or {start, stop, step}), comp_step,
        eps_phase, grid_step, backend, jobs. Unknown keys are an error so
        that a typo cannot silently fall back to a default.
        """
        path = Path(path)
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise BridgeConfigError(f"{path}: config must be a mapping")
        known = {
            "tdb",
            "elements",
            "phases",
            "t",
            "comp_step",
            "eps_phase",
            "grid_step",
            "backend",
            "jobs",
        }
        unknown = sorted(set(raw) - known)
        if unknown:
            raise BridgeConfigError(f"{path}: unknown config keys {unknown}")
        if "tdb" not in raw:
            raise BridgeConfigError(f"{path}: config needs a tdb path")
        if "t" not in raw:
            raise BridgeConfigError(f"{path}: config needs a temperature schedule")
        tdb = Path(raw["tdb"])
        if not tdb.is_absolute():
            tdb = path.parent / tdb
        schedule = _expand_schedule(raw["t"])
        overrides: dict = {}
        if "phases" in raw:
            if not isinstance(raw["phases"], dict):
                raise BridgeConfigError(f"{path}: phases must map names to labels")
            overrides["mapping"] = {
                str(k).upper(): str(v).upper() for k, v in raw["phases"].items()
            }
        if "elements" in raw:
            overrides["elements"] = tuple(str(e) for e in raw["elements"])
        for key in ("comp_step", "eps_phase", "grid_step", "backend", "jobs"):
            if key in raw:
                overrides[key] = raw[key]
        return cls.from_tdb(tdb, t_schedule=schedule, **overrides)


def _expand_schedule(spec) -> tuple[float, ...]:
    if isinstance(spec, dict):
        missing = {"start", "stop", "step"} - set(spec)
        if missing:
            raise BridgeConfigError(f"schedule needs keys {sorted(missing)}")
        start, stop, step = (float(spec[k]) for k in ("start", "stop", "step"))
        if step <= 0:
            raise BridgeConfigError("schedule step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise BridgeConfigError("schedule stop precedes start")
        return tuple(start + i * step for i in range(n))
    if isinstance(spec, (int, float)):
        return (float(spec),)
    return tuple(float(t) for t in spec)


@dataclass(frozen=True)
class ExportReport:
    """What one export produced; returned by :func:`export`."""

    path: Path
    n_rows: int
    n_skipped: int
    t_values: tuple[float, ...]
    label_counts: dict[str, int] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [
            f"wrote {self.n_rows} rows to {self.path}"
            f" ({self.n_skipped} points skipped)",
            f"temperatures: {', '.join(f'{t:g} K' for t in self.t_values)}",
        ]
        for name, count in self.label_counts.items():
            lines.append(f"  {name:<12} {count}")
        return "\n".join(lines)


def _solve_slice(args) -> list[dict[str, float] | None]:
    """One temperature's worth of equilibria; shaped for a process pool.

    Workers re-read the database from the path, so the parent never has
    to ship solver state across the pool boundary.
    """
    tdb_path, elements_upper, grid_step, backend, x_rows, t = args
    if backend == "pycalphad":
        return solve_points_pycalphad(tdb_path, elements_upper, x_rows, t)
    db = read_tdb(tdb_path)
    cands = build_candidates(db, elements_upper, grid_step)
    return solve_points(cands, x_rows, t)


def export(cfg: BridgeConfig, out: str | Path) -> ExportReport:
    """Equilibrate the configured grid and write a dataset file.

    Raises BridgeConfigError before any solving when the database and
    config disagree, and BridgeExportError if a computed point would
    violate the phase-count cap (more stable phases than elements
    present), which indicates a mapping or model defect, not data to
    be written around. Non-converged points are skipped and counted.

    Grid points are equilibrated in a process pool when jobs > 1, one
    task per temperature; the output file is always assembled and
    written by the calling process, so row order is a pure function of
    the config.
    """
    out = Path(out)
    db = read_tdb(cfg.tdb)
    elements_upper = tuple(e.upper() for e in cfg.elements)
    missing = sorted(set(elements_upper) - set(db.elements))
    if missing:
        raise BridgeConfigError(
            f"elements {missing} are not declared in {cfg.tdb.name}"
        )
    unmapped = sorted(set(db.phases) - set(cfg.mapping))
    if unmapped:
        raise BridgeConfigError(
            f"phases {unmapped} have no vocabulary mapping; refusing to export"
        )

    backend = cfg.backend
    if backend == "auto":
        backend = "pycalphad" if pycalphad_available() else "builtin"
    elif backend == "pycalphad" and not pycalphad_available():
        raise BridgeConfigError("backend pycalphad requested but not importable")

    x_rows = simplex_lattice(len(cfg.elements), 100 // cfg.comp_step)
    tasks = [
        (str(cfg.tdb), elements_upper, cfg.grid_step, backend, x_rows, t)
        for t in cfg.t_schedule
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_t = list(pool.map(_solve_slice, tasks))
    else:
        per_t = [_solve_slice(task) for task in tasks]

    vocab_col = {name: i for i, name in enumerate(TARGET_VOCAB)}
    width = (len(TARGET_VOCAB) + 3) // 4
    header = (
        f"{FORMAT_TAG} elements={','.join(cfg.elements)} "
        f"phases={','.join(TARGET_VOCAB)} "
        f"Tmin={min(cfg.t_schedule):.6f} Tmax={max(cfg.t_schedule):.6f}"
    )
    lines = [header]
    n_skipped = 0
    label_counts = dict.fromkeys(TARGET_VOCAB, 0)
    for t, solved in zip(cfg.t_schedule, per_t):
        for x, result in zip(x_rows, solved):
            if result is None:
                n_skipped += 1
                continue
            fractions = np.zeros(len(TARGET_VOCAB))
            for phase_name, amount in result.items():
                base = phase_name.partition("#")[0]  # miscibility-gap suffix
                if base not in cfg.mapping:
                    raise BridgeExportError(
                        f"solver produced unmapped phase {phase_name!r}"
                    )
                fractions[vocab_col[cfg.mapping[base]]] += amount
            fractions = np.round(fractions, 9)
            labels = fractions > cfg.eps_phase
            # sub-threshold amounts are noise; zeroing them keeps the
            # mask/fraction cross-check in the consumer's loader exact
            # for any eps_phase choice
            fractions = np.where(labels, fractions, 0.0)
            n_present = int(np.count_nonzero(x > 0.0))
            if not labels.any():
                raise BridgeExportError(
                    f"no stable phase above eps_phase at x={x.tolist()}, T={t}"
                )
            if int(labels.sum()) > n_present:
                stable = [
                    TARGET_VOCAB[i] for i in np.flatnonzero(labels)
                ]
                raise BridgeExportError(
                    f"{labels.sum()} phases {stable} at x={x.tolist()}, T={t} "
                    f"exceed the {n_present} elements present"
                )
            for i in np.flatnonzero(labels):
                label_counts[TARGET_VOCAB[i]] += 1
            mask = 0
            for i in np.flatnonzero(labels):
                mask |= 1 << int(i)
            parts = [f"{v:.9f}" for v in x]
            parts.append(f"{t:.6f}")
            parts.append(format(mask, f"0{width}x"))
            parts.extend(f"{v:.9f}" for v in fractions)
            parts.append("?")
            lines.append(" ".join(parts))
    if len(lines) == 1:
        raise BridgeExportError("every grid point was skipped; nothing to write")

    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, out)
    return ExportReport(
        path=out,
        n_rows=len(lines) - 1,
        n_skipped=n_skipped,
        t_values=cfg.t_schedule,
        label_counts={k: v for k, v in label_counts.items() if v},
    )
