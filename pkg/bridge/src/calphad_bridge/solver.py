"""Equilibrium phase sets by discrete Gibbs energy minimization.

Every phase contributes candidate points on a fixed composition lattice;
the stable assemblage at (x, T) is the least-energy convex combination of
candidates whose mean composition matches x, found with a small linear
program. Basic solutions of that program activate at most one candidate
per independent constraint, so the phase-count cap (no more phases than
components present) holds by construction rather than by filtering.

A pycalphad-backed path is provided for databases outside the builtin
model subset; it is imported lazily and never required.
"""

from __future__ import annotations

import importlib.util
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .tdb import Database, FunctionTable, PhaseEnergy, TdbError, phase_energy

__all__ = [
    "simplex_lattice",
    "CandidateSet",
    "build_candidates",
    "solve_points",
    "pycalphad_available",
    "solve_points_pycalphad",
]

# below this, a vertex weight is LP noise rather than a stable phase
_WEIGHT_FLOOR = 1e-12


def simplex_lattice(k: int, m: int) -> np.ndarray:
    """All compositions over k components with coordinates in {0, 1/m, ..., 1}.

    Rows are lexicographic in the divider positions, so the ordering is a
    pure function of (k, m); corners are always present.
    """
    if k < 1 or m < 1:
        raise ValueError("lattice needs k >= 1 components and m >= 1 divisions")
    if k == 1:
        return np.ones((1, 1))
    rows = []
    for dividers in itertools.combinations(range(m + k - 1), k - 1):
        edges = (-1, *dividers, m + k - 1)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    return np.asarray(rows, dtype=np.float64) / m


@dataclass(frozen=True)
class CandidateSet:
    """Composition/energy columns for one element set.

    ``col_x[i]`` is the composition of candidate column i in the element
    order the set was built with, ``col_phase[i]`` indexes ``phase_names``.
    """

    elements: tuple[str, ...]
    phase_names: tuple[str, ...]
    col_x: np.ndarray
    col_phase: np.ndarray
    _models: tuple[tuple[PhaseEnergy, np.ndarray], ...]
    _table: FunctionTable

    def energies(self, t: float) -> np.ndarray:
        return np.concatenate(
            [pe.gibbs(xs, t, self._table) for pe, xs in self._models]
        )


def build_candidates(
    db: Database, elements: tuple[str, ...], grid_step: float = 0.01
) -> CandidateSet:
    """Discretize every representable phase over the given elements.

    Solution phases are sampled on their constituent sub-simplex at
    ``grid_step``; line compounds contribute their single point. Phases
    that require an element outside ``elements`` are left out (they
    cannot form), and phases with no constituent inside it likewise.
    """
    m = round(1.0 / grid_step)
    if m < 1 or abs(m * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid step {grid_step} must divide 1 evenly")
    missing = [e for e in elements if e not in db.elements]
    if missing:
        raise TdbError(f"elements {missing} are not declared in {db.path.name}")
    col_of = {el: i for i, el in enumerate(elements)}
    models: list[tuple[PhaseEnergy, np.ndarray]] = []
    blocks: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    names: list[str] = []
    for name in sorted(db.phases):
        pe = phase_energy(db, name)
        if pe.stoichiometry is not None:
            if any(el not in col_of for el in pe.constituents):
                continue
            local = np.asarray([pe.stoichiometry], dtype=np.float64)
        else:
            keep = [i for i, el in enumerate(pe.constituents) if el in col_of]
            if not keep:
                continue
            sub = simplex_lattice(len(keep), m)
            local = np.zeros((len(sub), len(pe.constituents)))
            local[:, keep] = sub
        full = np.zeros((len(local), len(elements)))
        for i, el in enumerate(pe.constituents):
            if el in col_of:  # dropped constituents hold zero everywhere
                full[:, col_of[el]] += local[:, i]
        idx = len(names)
        names.append(name)
        models.append((pe, local))
        blocks.append(full)
        owners.append(np.full(len(full), idx, dtype=np.int64))
    if not names:
        raise TdbError(f"no representable phase covers elements {list(elements)}")
    return CandidateSet(
        elements=tuple(elements),
        phase_names=tuple(names),
        col_x=np.concatenate(blocks),
        col_phase=np.concatenate(owners),
        _models=tuple(models),
        _table=db.table(),
    )


def solve_points(
    cands: CandidateSet, x_rows: np.ndarray, t: float
) -> list[dict[str, float] | None]:
    """Equilibrate each composition row at temperature t.

    Returns one phase->fraction dict per row, or None where the program
    did not converge (callers count and skip those points).
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=np.float64))
    g = cands.energies(t)
    a_eq = cands.col_x.T
    n_phases = len(cands.phase_names)
    out: list[dict[str, float] | None] = []
    for x in x_rows:
        res = linprog(g, A_eq=a_eq, b_eq=x, bounds=(0.0, None), method="highs")
        if not res.success:
            out.append(None)
            continue
        weights = np.where(res.x > _WEIGHT_FLOOR, res.x, 0.0)
        per_phase = np.bincount(cands.col_phase, weights=weights, minlength=n_phases)
        out.append(
            {
                cands.phase_names[i]: float(per_phase[i])
                for i in np.flatnonzero(per_phase)
            }
        )
    return out


# -- optional pycalphad path ----------------------------------------------------------


def pycalphad_available() -> bool:
    return importlib.util.find_spec("pycalphad") is not None


def solve_points_pycalphad(
    tdb_path, elements: tuple[str, ...], x_rows: np.ndarray, t: float
) -> list[dict[str, float] | None]:
    """Same contract as solve_points, delegated to pycalphad.

    Composition conditions are clamped slightly inside the simplex, which
    that solver requires; results come back from its xarray layout as
    flattened (phase name, moles) pairs.
    """
    from pycalphad import Database as PycDatabase
    from pycalphad import equilibrium
    from pycalphad import variables as v

    db = PycDatabase(str(tdb_path))
    comps = [*elements, "VA"]
    phases = sorted(db.phases.keys())
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=np.float64))
    out: list[dict[str, float] | None] = []
    for x in x_rows:
        conds = {v.T: float(t), v.P: 101325.0, v.N: 1.0}
        for el, val in zip(elements[1:], x[1:]):
            conds[v.X(el)] = float(np.clip(val, 1e-9, 1.0 - 1e-9))
        try:
            eq = equilibrium(db, comps, phases, conds)
            names = eq.Phase.values.ravel()
            moles = eq.NP.values.ravel()
        except Exception:
            out.append(None)
            continue
        found: dict[str, float] = {}
        bad = False
        for name, np_frac in zip(names, moles):
            if not name:
                continue
            if not np.isfinite(np_frac):
                bad = True
                break
            found[str(name)] = found.get(str(name), 0.0) + float(np_frac)
        out.append(None if bad or not found else found)
    return out
