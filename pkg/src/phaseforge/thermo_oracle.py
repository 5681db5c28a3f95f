"""Desk-scale equilibrium labeling via discrete lower-convex-envelope search.

Each phase carries a regular-solution free-energy surrogate

    G(x, T) = sum_e x_e (a_e + b_e T) + sum_{i<j} L_ij x_i x_j
              + [ideal] R T sum_e x_e ln x_e       (0 ln 0 := 0)

sampled on a composition grid. The lower convex envelope of all sampled
(x, G) points identifies, for any query composition, the stable facet; its
vertices name the coexisting phases and the barycentric weights are the
phase fractions. Gibbs's phase rule (at most as many phases as chemically
present elements) holds by facet geometry, which is what makes this module
usable as an independent oracle for everything downstream.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .dataio import (
    EPS_ELEMENT,
    EPS_PHASE,
    Dataset,
    DatasetFormatError,
    ElementSet,
    PhaseVocabulary,
    StatePoint,
)

R_GAS = 8.314462618  # J/(mol K)

DEFAULT_GRID_STEP = 0.01
_LOWER_NORMAL_TOL = 1e-10
_WEIGHT_TOL = 1e-7


class ModelConfigError(ValueError):
    """Raised for malformed phase-model config files."""


class EquilibriumError(RuntimeError):
    """Raised when a query cannot be answered by the model set."""


@dataclass(frozen=True)
class PhaseModel:
    """One phase's regular-solution surrogate over its composition support."""

    name: str
    endmember_g: dict[str, tuple[float, float]]
    interaction_l: dict[tuple[str, str], float]
    ideal_mixing: bool
    support: tuple[str, ...]
    requires: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        for sym in self.support:
            if sym not in self.endmember_g:
                raise ModelConfigError(
                    f"phase {self.name}: no endmember coefficients for {sym}"
                )
        for i, j in self.interaction_l:
            if i not in self.support or j not in self.support:
                raise ModelConfigError(
                    f"phase {self.name}: interaction pair ({i},{j}) outside support"
                )


@dataclass(frozen=True)
class FacetVertex:
    phase: str
    x: tuple[float, ...]
    weight: float


@dataclass(frozen=True)
class EquilibriumResult:
    mask: int
    fractions: tuple[float, ...]
    facet_vertices: tuple[FacetVertex, ...]
    g_env: float


@dataclass(frozen=True)
class ToyModelSet:
    elements: ElementSet
    vocab: PhaseVocabulary
    models: tuple[PhaseModel, ...]


def phase_G(pm: PhaseModel, elements: ElementSet, x, t: float) -> float:
    """Free energy of one phase at a full-length composition vector."""
    x = np.asarray(x, dtype=np.float64)
    for sym, v in zip(elements.names, x):
        if sym not in pm.support and v > EPS_ELEMENT:
            raise EquilibriumError(
                f"phase {pm.name} does not support element {sym} (x={v})"
            )
    sub = [elements.index(sym) for sym in pm.support]
    return float(_phase_g_grid(pm, x[None, sub], t)[0])


def _phase_g_grid(pm: PhaseModel, xs: np.ndarray, t: float) -> np.ndarray:
    """G for (m, s) compositions given in pm.support order."""
    a = np.array([pm.endmember_g[sym][0] for sym in pm.support])
    b = np.array([pm.endmember_g[sym][1] for sym in pm.support])
    g = xs @ (a + b * t)
    for (si, sj), lij in pm.interaction_l.items():
        i, j = pm.support.index(si), pm.support.index(sj)
        g = g + lij * xs[:, i] * xs[:, j]
    if pm.ideal_mixing:
        with np.errstate(divide="ignore", invalid="ignore"):
            xlnx = np.where(xs > 0.0, xs * np.log(np.where(xs > 0.0, xs, 1.0)), 0.0)
        g = g + R_GAS * t * xlnx.sum(axis=1)
    return g


# -- model config file ----------------------------------------------------------


def parse_models(text: str, origin: str = "<string>") -> ToyModelSet:
    """Parse the block-structured phase-model config format.

    Schema: an `elements` line, then one `phase <NAME> ... end` block per
    phase with `support`, `ideal on|off`, `g <El> <a> <b>`, `L <El> <El> <v>`,
    and optional `requires <El>...` lines. `#` starts a comment.
    """
    elements: ElementSet | None = None
    models: list[PhaseModel] = []
    block: dict | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]

        def fail(msg: str):
            raise ModelConfigError(f"{origin}:{lineno}: {msg}")

        if key == "elements":
            if block is not None:
                fail("elements line inside a phase block")
            elements = ElementSet(tuple(tokens[1:]))
        elif key == "phase":
            if len(tokens) != 2:
                fail("phase line takes exactly one name")
            if block is not None:
                fail(f"phase {block['name']} not closed before new block")
            block = {
                "name": tokens[1], "support": None, "ideal": True,
                "g": {}, "L": {}, "requires": frozenset(),
            }
        elif key == "end":
            if block is None:
                fail("end outside a phase block")
            if block["support"] is None:
                fail(f"phase {block['name']}: missing support line")
            try:
                models.append(PhaseModel(
                    name=block["name"],
                    endmember_g=block["g"],
                    interaction_l=block["L"],
                    ideal_mixing=block["ideal"],
                    support=block["support"],
                    requires=block["requires"],
                ))
            except ModelConfigError as exc:
                fail(str(exc))
            block = None
        elif block is None:
            fail(f"unexpected {key!r} outside a phase block")
        elif key == "support":
            block["support"] = tuple(tokens[1:])
        elif key == "ideal":
            if len(tokens) != 2 or tokens[1] not in ("on", "off"):
                fail("ideal takes on|off")
            block["ideal"] = tokens[1] == "on"
        elif key == "g":
            if len(tokens) != 4:
                fail("g takes: element a b")
            block["g"][tokens[1]] = (float(tokens[2]), float(tokens[3]))
        elif key == "L":
            if len(tokens) != 4:
                fail("L takes: element element value")
            pair = tuple(sorted((tokens[1], tokens[2])))
            if pair[0] == pair[1]:
                fail("L pair must name two distinct elements")
            if pair in block["L"]:
                fail(f"duplicate L entry for {pair}")
            block["L"][pair] = float(tokens[3])
        elif key == "requires":
            block["requires"] = frozenset(tokens[1:])
        else:
            fail(f"unknown directive {key!r}")

    if block is not None:
        raise ModelConfigError(f"{origin}: phase {block['name']} never closed")
    if elements is None:
        raise ModelConfigError(f"{origin}: missing elements line")
    if not models:
        raise ModelConfigError(f"{origin}: no phase blocks")
    for pm in models:
        for sym in pm.support:
            if sym not in elements.names:
                raise ModelConfigError(
                    f"{origin}: phase {pm.name} supports unknown element {sym}"
                )
        for sym in pm.requires:
            if sym not in elements.names:
                raise ModelConfigError(
                    f"{origin}: phase {pm.name} requires unknown element {sym}"
                )
    names = tuple(pm.name for pm in models)
    vocab = PhaseVocabulary(
        names, {pm.name: pm.requires for pm in models}
    )
    return ToyModelSet(elements, vocab, tuple(models))


def load_models(path: str | Path) -> ToyModelSet:
    path = Path(path)
    return parse_models(path.read_text(encoding="utf-8"), origin=str(path))


# -- lower-envelope solver -------------------------------------------------------


def _simplex_grid(s: int, n: int) -> np.ndarray:
    """All length-s nonnegative integer tuples summing to n, as an array."""
    if s == 1:
        return np.array([[n]], dtype=np.int64)
    combos = np.array(
        list(itertools.combinations(range(n + s - 1), s - 1)), dtype=np.int64
    )
    bounds = np.concatenate(
        [
            np.full((len(combos), 1), -1, dtype=np.int64),
            combos,
            np.full((len(combos), 1), n + s - 1, dtype=np.int64),
        ],
        axis=1,
    )
    return np.diff(bounds, axis=1) - 1


class _Envelope:
    """Lower convex envelope over one present-element subset at one T."""

    def __init__(self, ms: ToyModelSet, present: tuple[int, ...], t: float,
                 grid_step: float) -> None:
        self.present = present
        self.t = t
        syms = [ms.elements.names[i] for i in present]
        pts_x: list[np.ndarray] = []
        pts_g: list[np.ndarray] = []
        owner: list[np.ndarray] = []
        n = int(round(1.0 / grid_step))
        if abs(n * grid_step - 1.0) > 1e-9:
            raise EquilibriumError(f"grid_step {grid_step} does not divide 1")
        covered: set[str] = set()
        for k, pm in enumerate(ms.models):
            if not pm.requires <= set(syms):
                continue
            sub = [sym for sym in syms if sym in pm.support]
            if not sub:
                continue
            covered.update(sub)
            grid = _simplex_grid(len(sub), n).astype(np.float64) / n
            in_support = np.zeros((len(grid), len(pm.support)))
            for col, sym in enumerate(sub):
                in_support[:, pm.support.index(sym)] = grid[:, col]
            g = _phase_g_grid(pm, in_support, t)
            full = np.zeros((len(grid), len(syms)))
            for col, sym in enumerate(sub):
                full[:, syms.index(sym)] = grid[:, col]
            pts_x.append(full)
            pts_g.append(g)
            owner.append(np.full(len(grid), k, dtype=np.int64))
        if not pts_x:
            raise EquilibriumError(
                f"no phase admits subsystem {syms} (check requires/support)"
            )
        if covered != set(syms):
            raise EquilibriumError(
                f"elements {sorted(set(syms) - covered)} not covered by any "
                f"phase support in subsystem {syms}"
            )
        self.x = np.concatenate(pts_x)          # (m, s) in present order
        self.g = np.concatenate(pts_g)
        self.owner = np.concatenate(owner)       # model index per point
        self._build_hull()

    def _build_hull(self) -> None:
        s = self.x.shape[1]
        if s == 1:
            self._facets = None
            return
        lifted = np.column_stack([self.x[:, : s - 1], self.g])
        try:
            hull = ConvexHull(lifted, qhull_options="Qt")
        except QhullError:
            self._facets = ()
            return
        eq = hull.equations
        lower = eq[:, s - 1] < -_LOWER_NORMAL_TOL
        # plane: G(xfree) = A @ xfree + b on each lower facet
        n_x = eq[lower, : s - 1]
        n_g = eq[lower, s - 1]
        c = eq[lower, s]
        self._plane_a = -n_x / n_g[:, None]
        self._plane_b = -c / n_g
        self._simplices = hull.simplices[lower]
        self._facets = True

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vertex indices, weights, envelope G for queries (m, s)."""
        m, s = q.shape
        if s == 1:
            best = int(np.lexsort((np.arange(len(self.g)), self.g))[0])
            idx = np.full((m, 1), best, dtype=np.int64)
            w = np.ones((m, 1))
            return idx, w, np.full(m, self.g[best])
        if self._facets == ():
            return self._query_lp(q)
        # chunked so m x n_facets scoring stays within a fixed memory budget
        chunk = max(1, int(2e7 // max(1, len(self._plane_b))))
        fidx = np.empty(m, dtype=np.int64)
        g_env = np.empty(m)
        for lo in range(0, m, chunk):
            vals = q[lo:lo + chunk, : s - 1] @ self._plane_a.T + self._plane_b
            part = np.argmax(vals, axis=1)
            fidx[lo:lo + chunk] = part
            g_env[lo:lo + chunk] = vals[np.arange(len(part)), part]
        verts = self._simplices[fidx]            # (m, s)
        mats = np.empty((m, s, s))
        mats[:, : s - 1, :] = np.swapaxes(self.x[verts][:, :, : s - 1], 1, 2)
        mats[:, s - 1, :] = 1.0
        rhs = np.concatenate([q[:, : s - 1], np.ones((m, 1))], axis=1)
        try:
            w = np.linalg.solve(mats, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            w = np.full((m, s), np.nan)
            for i in range(m):
                w[i] = np.linalg.lstsq(mats[i], rhs[i], rcond=None)[0]
        bad = (w.min(axis=1) < -_WEIGHT_TOL) | ~np.isfinite(w).all(axis=1)
        if np.any(bad):
            idx_lp, w_lp, g_lp = self._query_lp(q[bad])
            out_idx = verts.copy()
            out_w = w
            out_idx[bad] = idx_lp
            out_w[bad] = w_lp
            g_env[bad] = g_lp
            w = out_w
            verts = out_idx
        w = np.clip(w, 0.0, None)
        w = w / w.sum(axis=1, keepdims=True)
        return verts, w, g_env

    def _query_lp(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-query linear program; exact but slower fallback path."""
        m, s = q.shape
        idx = np.zeros((m, s), dtype=np.int64)
        w = np.zeros((m, s))
        g_env = np.zeros(m)
        a_eq = np.vstack([self.x.T[: s - 1], np.ones(len(self.g))])
        for i in range(m):
            b_eq = np.concatenate([q[i, : s - 1], [1.0]])
            res = linprog(self.g, A_eq=a_eq, b_eq=b_eq, method="highs-ds",
                          bounds=(0.0, None))
            if not res.success:
                raise EquilibriumError(
                    f"LP equilibrium failed for query {q[i]}: {res.message}"
                )
            support = np.flatnonzero(res.x > 1e-12)
            order = support[np.argsort(-res.x[support], kind="stable")][:s]
            take = np.zeros(s, dtype=np.int64)
            take[: len(order)] = order
            idx[i] = take
            w[i, : len(order)] = res.x[order]
            w[i] /= w[i].sum()
            g_env[i] = res.fun
        return idx, w, g_env


class Equilibrator:
    """Caches one envelope per (present-element subset, T) and answers queries."""

    def __init__(self, ms: ToyModelSet, grid_step: float = DEFAULT_GRID_STEP) -> None:
        if not ms.models:
            raise EquilibriumError("empty model list")
        if not 0.01 - 1e-12 <= grid_step <= 0.1 + 1e-12:
            raise EquilibriumError(f"grid_step {grid_step} outside [0.01, 0.1]")
        self.ms = ms
        self.grid_step = grid_step
        self._cache: dict[tuple, _Envelope] = {}

    def _envelope(self, present: tuple[int, ...], t: float) -> _Envelope:
        key = (present, round(float(t), 6))
        env = self._cache.get(key)
        if env is None:
            env = _Envelope(self.ms, present, t, self.grid_step)
            self._cache[key] = env
        return env

    def solve_batch(
        self, x: np.ndarray, t: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Masks, per-phase fractions, envelope G for (n, C) compositions at T."""
        x = np.asarray(x, dtype=np.float64)
        n, c = x.shape
        k_total = self.ms.vocab.size
        masks = np.zeros(n, dtype=np.int64)
        fractions = np.zeros((n, k_total))
        g_env = np.zeros(n)
        present_rows = x > EPS_ELEMENT
        if not np.all(present_rows.any(axis=1)):
            raise EquilibriumError("query with no element above threshold")
        keys = [tuple(np.flatnonzero(row)) for row in present_rows]
        for key in sorted(set(keys)):
            rows = np.array([i for i, k in enumerate(keys) if k == key])
            env = self._envelope(key, t)
            q = x[np.ix_(rows, list(key))]
            verts, w, g = env.query(q)
            owner = env.owner[verts]             # (m, s) model indices
            for j, i in enumerate(rows):
                frac = np.zeros(k_total)
                np.add.at(frac, owner[j], w[j])
                fractions[i] = frac
                masks[i] = int(
                    sum(1 << kk for kk in np.flatnonzero(frac > EPS_PHASE))
                )
                g_env[i] = g[j]
        return masks, fractions, g_env

    def solve(self, q: StatePoint) -> EquilibriumResult:
        x = np.asarray(q.x, dtype=np.float64)
        present = tuple(int(i) for i in np.flatnonzero(x > EPS_ELEMENT))
        env = self._envelope(present, q.t)
        verts, w, g = env.query(x[list(present)][None, :])
        verts, w = verts[0], w[0]
        k_total = self.ms.vocab.size
        frac = np.zeros(k_total)
        np.add.at(frac, env.owner[verts], w)
        mask = int(sum(1 << kk for kk in np.flatnonzero(frac > EPS_PHASE)))
        vertices = []
        for vi, wi in zip(verts, w):
            if wi <= _WEIGHT_TOL:
                continue
            full = np.zeros(self.ms.elements.size)
            full[list(present)] = env.x[vi]
            vertices.append(FacetVertex(
                phase=self.ms.models[env.owner[vi]].name,
                x=tuple(float(v) for v in full),
                weight=float(wi),
            ))
        return EquilibriumResult(
            mask=mask,
            fractions=tuple(float(v) for v in frac),
            facet_vertices=tuple(vertices),
            g_env=float(g[0]),
        )


def equilibrium(
    ms: ToyModelSet, q: StatePoint, grid_step: float = DEFAULT_GRID_STEP
) -> EquilibriumResult:
    """One-shot equilibrium query; batch callers should hold an Equilibrator."""
    return Equilibrator(ms, grid_step).solve(q)


# -- dataset generation -----------------------------------------------------------


def _refined_temps(
    t_schedule: list[float], refine_windows: tuple[tuple[float, float], ...]
) -> list[float]:
    temps = set(round(float(t), 6) for t in t_schedule)
    for lo, hi in refine_windows:
        t = lo
        while t <= hi + 1e-9:
            temps.add(round(float(t), 6))
            t += 10.0
    return sorted(temps)


def generate_dataset(
    ms: ToyModelSet,
    comp_step: int,
    t_schedule: list[float],
    subsystems: list[tuple[str, ...]],
    isothermal_t: list[float] | float | None = None,
    refine_windows: tuple[tuple[float, float], ...] = (),
    grid_step: float = DEFAULT_GRID_STEP,
) -> Dataset:
    """Enumerate subsystem grids, label each point via the envelope solver.

    Binary subsystems sweep the (refined) temperature schedule; ternary and
    larger subsystems are sampled on isothermal planes only, which must be
    given explicitly. Compositions and fractions are quantized to the
    canonical 9-decimal file precision so serialization round-trips exactly.
    """
    if 100 % comp_step != 0:
        raise DatasetFormatError(f"comp_step {comp_step} does not divide 100")
    if not t_schedule:
        raise DatasetFormatError("empty temperature schedule")
    if isothermal_t is None:
        iso: list[float] = []
    elif isinstance(isothermal_t, (int, float)):
        iso = [float(isothermal_t)]
    else:
        iso = [float(t) for t in isothermal_t]

    eq = Equilibrator(ms, grid_step)
    elements = ms.elements
    n = 100 // comp_step
    binary_temps = _refined_temps(list(t_schedule), refine_windows)

    xs, ts, mask_rows, frac_rows = [], [], [], []
    for subsystem in subsystems:
        for sym in subsystem:
            if sym not in elements.names:
                raise DatasetFormatError(f"unknown element {sym} in subsystem")
        cols = [elements.index(sym) for sym in subsystem]
        if len(subsystem) == 2:
            temps = binary_temps
        else:
            if not iso:
                raise DatasetFormatError(
                    f"subsystem {subsystem} needs an explicit isothermal T"
                )
            temps = iso
        grid = _simplex_grid(len(subsystem), n).astype(np.float64) / n
        grid = np.round(grid, 9)
        full = np.zeros((len(grid), elements.size))
        full[:, cols] = grid
        for t in temps:
            try:
                masks, fracs, _ = eq.solve_batch(full, t)
            except EquilibriumError as exc:
                raise EquilibriumError(
                    f"generation failed in subsystem {subsystem} at T={t}: {exc}"
                ) from exc
            fracs = np.round(fracs, 9)
            masks = np.array([
                int(sum(1 << kk for kk in np.flatnonzero(row > EPS_PHASE)))
                for row in fracs
            ], dtype=np.int64)
            xs.append(full)
            ts.append(np.full(len(full), round(float(t), 6)))
            mask_rows.append(masks)
            frac_rows.append(fracs)

    if not xs:
        raise DatasetFormatError("no subsystems requested")
    x_all = np.concatenate(xs)
    t_all = np.concatenate(ts)
    return Dataset(
        elements,
        ms.vocab,
        x_all,
        t_all,
        np.concatenate(mask_rows),
        float(t_all.min()),
        float(t_all.max()),
        np.concatenate(frac_rows),
    )


def all_binaries(elements: ElementSet) -> list[tuple[str, ...]]:
    return [tuple(p) for p in itertools.combinations(elements.names, 2)]


def all_ternaries(elements: ElementSet) -> list[tuple[str, ...]]:
    return [tuple(p) for p in itertools.combinations(elements.names, 3)]
