"""Reader for CALPHAD thermodynamic databases in TDB form.

Covers the statement subset needed for substitutional solutions and
stoichiometric line compounds: ELEMENT, PHASE, CONSTITUENT, FUNCTION, and
PARAMETER entries of kind G/L with a Redlich-Kister expansion over one
substitutional sublattice. Temperature expressions are piecewise in T,
use the operator set + - * / ** with LN/LOG/EXP, and may reference other
FUNCTION symbols to any depth (cycles are rejected).

Statements outside the subset parse as opaque text and are ignored, so a
full assessment file loads cleanly; phases whose models fall outside the
subset fail only when their energy is actually requested.
"""

from __future__ import annotations

import math
import re
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.constants import R as R_GAS

__all__ = [
    "TdbError",
    "Piecewise",
    "FunctionTable",
    "Phase",
    "Parameter",
    "Database",
    "read_tdb",
    "PhaseEnergy",
    "phase_energy",
    "R_GAS",
]

# species that are bookkeeping devices, not exportable components
_PSEUDO_ELEMENTS = ("VA", "/-")


class TdbError(ValueError):
    """Raised when a database statement cannot be read or evaluated."""


# -- temperature expressions --------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d*\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z][A-Za-z0-9_#]*)"
    r"|(?P<pow>\*\*)"
    r"|(?P<op>[-+*/()]))"
)

_CALLS = {"LN": math.log, "LOG": math.log10, "EXP": math.exp}


def _tokenize(text: str, where: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos:].strip():
                raise TdbError(f"{where}: cannot read expression at {text[pos:]!r}")
            break
        pos = m.end()
        for kind in ("num", "name", "pow", "op"):
            value = m.group(kind)
            if value is not None:
                tokens.append((kind, value))
                break
    return tokens


class _ExprParser:
    """Recursive descent over the tokens of one expression.

    Grammar, loosest binding first:
        expr   := term (('+' | '-') term)*
        term   := factor (('*' | '/') factor)*
        factor := unary ('**' factor)?
        unary  := ('+' | '-')* primary
        primary:= NUMBER | 'T' | NAME | NAME '(' expr ')' | '(' expr ')'
    """

    def __init__(self, tokens: list[tuple[str, str]], where: str) -> None:
        self.tokens = tokens
        self.pos = 0
        self.where = where

    def _peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self) -> tuple[str, str]:
        tok = self._peek()
        if tok is None:
            raise TdbError(f"{self.where}: expression ends unexpectedly")
        self.pos += 1
        return tok

    def parse(self) -> tuple:
        node = self._expr()
        if self._peek() is not None:
            raise TdbError(
                f"{self.where}: trailing tokens after expression: "
                f"{self.tokens[self.pos:]!r}"
            )
        return node

    def _expr(self) -> tuple:
        node = self._term()
        while (tok := self._peek()) and tok[1] in "+-":
            self._take()
            node = (tok[1], node, self._term())
        return node

    def _term(self) -> tuple:
        node = self._factor()
        while (tok := self._peek()) and tok[1] in "*/":
            self._take()
            node = (tok[1], node, self._factor())
        return node

    def _factor(self) -> tuple:
        node = self._unary()
        if (tok := self._peek()) and tok[0] == "pow":
            self._take()
            node = ("**", node, self._factor())
        return node

    def _unary(self) -> tuple:
        sign = 1
        while (tok := self._peek()) and tok[1] in "+-" and tok[0] == "op":
            self._take()
            if tok[1] == "-":
                sign = -sign
        node = self._primary()
        return ("neg", node) if sign < 0 else node

    def _primary(self) -> tuple:
        kind, value = self._take()
        if kind == "num":
            return ("num", float(value))
        if kind == "op" and value == "(":
            node = self._expr()
            self._close()
            return node
        if kind == "name":
            name = value.upper()
            if name == "T":
                return ("T",)
            if (nxt := self._peek()) and nxt[1] == "(":
                if name not in _CALLS:
                    raise TdbError(f"{self.where}: unknown function {name}(...)")
                self._take()
                node = self._expr()
                self._close()
                return ("call", name, node)
            return ("ref", name)
        raise TdbError(f"{self.where}: unexpected token {value!r}")

    def _close(self) -> None:
        kind, value = self._take()
        if value != ")":
            raise TdbError(f"{self.where}: expected ')', found {value!r}")


def _eval(node: tuple, t: float, table: "FunctionTable", active: frozenset) -> float:
    op = node[0]
    if op == "num":
        return node[1]
    if op == "T":
        return t
    if op == "ref":
        return table.value(node[1], t, active)
    if op == "neg":
        return -_eval(node[1], t, table, active)
    if op == "call":
        return _CALLS[node[1]](_eval(node[2], t, table, active))
    a = _eval(node[1], t, table, active)
    b = _eval(node[2], t, table, active)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return a ** b


@dataclass(frozen=True)
class Piecewise:
    """One temperature-piecewise expression.

    ``bounds`` holds the n+1 breakpoints delimiting n segments. Requests
    outside the assessed range evaluate the nearest segment, the usual
    extrapolation convention for these databases.
    """

    bounds: tuple[float, ...]
    exprs: tuple[tuple, ...]
    where: str = ""

    def __call__(
        self, t: float, table: "FunctionTable", active: frozenset = frozenset()
    ) -> float:
        idx = bisect_right(self.bounds, t) - 1
        idx = min(max(idx, 0), len(self.exprs) - 1)
        return _eval(self.exprs[idx], t, table, active)


_NUM_HEAD = re.compile(r"\s*([-+]?[0-9][0-9.eE+-]*)\s+(.*)", re.S)
_SEG_HEAD = re.compile(r"\s*([-+]?[0-9][0-9.eE+-]*)\s+([YN])\b\s*(.*)", re.S | re.I)


def _parse_piecewise(text: str, where: str) -> Piecewise:
    parts = text.split(";")
    head = _NUM_HEAD.match(parts[0])
    if head is None:
        raise TdbError(f"{where}: expected a low temperature bound")
    bounds = [float(head.group(1))]
    exprs = [_ExprParser(_tokenize(head.group(2), where), where).parse()]
    for part in parts[1:]:
        seg = _SEG_HEAD.match(part)
        if seg is None:
            raise TdbError(f"{where}: expected '<T> Y|N' after ';', found {part!r}")
        bounds.append(float(seg.group(1)))
        if seg.group(2).upper() == "N":
            break  # anything after N is a reference tag
        exprs.append(_ExprParser(_tokenize(seg.group(3), where), where).parse())
    else:
        raise TdbError(f"{where}: piecewise expression never terminated with N")
    if len(bounds) != len(exprs) + 1:
        raise TdbError(f"{where}: {len(exprs)} segments need {len(exprs)+1} bounds")
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise TdbError(f"{where}: temperature bounds must increase")
    return Piecewise(tuple(bounds), tuple(exprs), where)


class FunctionTable:
    """Memoized evaluation of FUNCTION symbols at a temperature."""

    def __init__(self, functions: dict[str, Piecewise]) -> None:
        self._functions = functions
        self._memo: dict[tuple[str, float], float] = {}

    def value(self, name: str, t: float, active: frozenset = frozenset()) -> float:
        key = (name, t)
        if key in self._memo:
            return self._memo[key]
        if name in active:
            raise TdbError(f"circular FUNCTION reference through {name}")
        pw = self._functions.get(name)
        if pw is None:
            raise TdbError(f"reference to undefined symbol {name}")
        v = pw(t, self, active | {name})
        self._memo[key] = v
        return v


# -- statements ---------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    name: str
    sublattices: tuple[tuple[str, ...], ...]
    sites: tuple[float, ...]


@dataclass(frozen=True)
class Parameter:
    kind: str  # G or L; energetically equivalent, kept for introspection
    phase: str
    constituents: tuple[tuple[str, ...], ...]
    order: int
    expr: Piecewise


@dataclass
class Database:
    """Parsed database: declarations plus an index of G/L parameters."""

    path: Path
    elements: tuple[str, ...] = ()
    functions: dict[str, Piecewise] = field(default_factory=dict)
    phases: dict[str, Phase] = field(default_factory=dict)
    parameters: list[Parameter] = field(default_factory=list)

    def table(self) -> FunctionTable:
        return FunctionTable(self.functions)

    def parameter(
        self, phase: str, constituents: tuple[tuple[str, ...], ...], order: int
    ) -> Piecewise | None:
        """Look up one interaction; later statements shadow earlier ones."""
        found = None
        for p in self.parameters:
            if (
                p.phase == phase
                and p.constituents == constituents
                and p.order == order
            ):
                found = p.expr
        return found


_KEYWORDS = (
    "ELEMENT",
    "SPECIES",
    "FUNCTION",
    "TYPE_DEFINITION",
    "PHASE",
    "CONSTITUENT",
    "PARAMETER",
)

_PARAM_KEY = re.compile(r"\s*([A-Za-z]+)\s*\(([^;()]+)(?:;\s*(\d+))?\)\s*(.*)", re.S)


def _statements(text: str):
    lines = []
    for raw in text.splitlines():
        cut = raw.find("$")
        lines.append(raw if cut < 0 else raw[:cut])
    for stmt in " ".join(lines).split("!"):
        stmt = stmt.strip()
        if stmt:
            yield stmt


def _keyword(token: str) -> str | None:
    # statement keywords may be abbreviated; four characters disambiguate
    up = token.upper()
    if len(up) < 4:
        return None
    for kw in _KEYWORDS:
        if kw.startswith(up) or up == kw:
            return kw
    return None


def _base_name(token: str) -> str:
    # phase names may carry a type suffix such as LIQUID:L
    return token.split(":", 1)[0].upper()


def _species_list(text: str, where: str) -> tuple[str, ...]:
    names = []
    for part in text.split(","):
        name = part.strip().rstrip("%").upper()
        if not name:
            raise TdbError(f"{where}: empty constituent name")
        names.append(name)
    return tuple(names)


def read_tdb(path: str | Path) -> Database:
    """Parse a database file; raises TdbError with statement context."""
    path = Path(path)
    if not path.exists():
        raise TdbError(f"no database file at {path}")
    db = Database(path)
    elements: list[str] = []
    for stmt in _statements(path.read_text(encoding="utf-8")):
        tokens = stmt.split()
        kw = _keyword(tokens[0])
        where = f"{path.name}: {tokens[0]} {' '.join(tokens[1:3])}"
        if kw == "ELEMENT" and len(tokens) >= 2:
            name = tokens[1].upper()
            if name not in _PSEUDO_ELEMENTS:
                elements.append(name)
        elif kw == "FUNCTION":
            if len(tokens) < 3:
                raise TdbError(f"{where}: FUNCTION needs a name and an expression")
            name = tokens[1].upper()
            body = stmt.split(None, 2)[2]
            db.functions[name] = _parse_piecewise(body, where)
        elif kw == "PHASE":
            if len(tokens) < 4:
                raise TdbError(f"{where}: PHASE needs a name, model, and sites")
            name = _base_name(tokens[1])
            n_subl = int(float(tokens[3]))
            sites = tuple(float(v) for v in tokens[4 : 4 + n_subl])
            if len(sites) != n_subl or any(s <= 0 for s in sites):
                raise TdbError(f"{where}: expected {n_subl} positive site counts")
            db.phases[name] = Phase(name, (), sites)
        elif kw == "CONSTITUENT":
            if len(tokens) < 3:
                raise TdbError(f"{where}: CONSTITUENT needs a phase and species")
            name = _base_name(tokens[1])
            ph = db.phases.get(name)
            if ph is None:
                raise TdbError(f"{where}: CONSTITUENT for undeclared phase {name}")
            spec = stmt.split(None, 2)[2].strip()
            inner = [s for s in spec.split(":") if s.strip()]
            subl = tuple(_species_list(s, where) for s in inner)
            if len(subl) != len(ph.sites):
                raise TdbError(
                    f"{where}: {len(subl)} sublattices for {len(ph.sites)} sites"
                )
            db.phases[name] = Phase(name, subl, ph.sites)
        elif kw == "PARAMETER":
            body = stmt.split(None, 1)[1]
            m = _PARAM_KEY.match(body)
            if m is None:
                raise TdbError(f"{where}: cannot read parameter key")
            kind = m.group(1).upper()
            if kind not in ("G", "L"):
                continue  # magnetic and mobility parameters are out of scope
            inside = m.group(2)
            phase_name, _, spec = inside.partition(",")
            constituents = tuple(
                _species_list(s, where) for s in spec.split(":") if s.strip()
            )
            if not constituents:
                raise TdbError(f"{where}: parameter without constituents")
            db.parameters.append(
                Parameter(
                    kind,
                    _base_name(phase_name.strip()),
                    constituents,
                    int(m.group(3) or 0),
                    _parse_piecewise(m.group(4), where),
                )
            )
        # remaining statement kinds carry no energetics
    db.elements = tuple(elements)
    return db


# -- Gibbs energy -------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseEnergy:
    """Molar Gibbs energy of one phase, vectorized over its own lattice.

    ``constituents`` spans the elements the phase can host, in declaration
    order; composition rows passed to :meth:`gibbs` use that order. Line
    compounds expose their fixed composition via ``stoichiometry``.
    """

    name: str
    constituents: tuple[str, ...]
    stoichiometry: tuple[float, ...] | None
    site_total: float
    _endmembers: tuple[Piecewise, ...]
    _interactions: tuple[tuple[int, int, int, Piecewise], ...]

    def gibbs(self, xs: np.ndarray, t: float, table: FunctionTable) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        g0 = np.array([pw(t, table) for pw in self._endmembers])
        if self.stoichiometry is not None:
            return np.full(len(xs), g0[0] / self.site_total)
        g = xs @ g0
        if len(self.constituents) > 1:
            with np.errstate(divide="ignore", invalid="ignore"):
                xlnx = np.where(xs > 0.0, xs * np.log(np.where(xs > 0, xs, 1.0)), 0.0)
            g = g + R_GAS * t * xlnx.sum(axis=1)
        for i, j, order, pw in self._interactions:
            lv = pw(t, table)
            g = g + xs[:, i] * xs[:, j] * lv * (xs[:, i] - xs[:, j]) ** order
        return g / self.site_total


def _stoichiometric_energy(db: Database, ph: Phase) -> PhaseEnergy:
    seen: list[str] = []
    fractions: dict[str, float] = {}
    total = sum(ph.sites)
    for species, sites in zip(ph.sublattices, ph.sites):
        el = species[0]
        if el not in seen:
            seen.append(el)
        fractions[el] = fractions.get(el, 0.0) + sites / total
    key = tuple((s[0],) for s in ph.sublattices)
    pw = db.parameter(ph.name, key, 0)
    if pw is None:
        raise TdbError(f"phase {ph.name}: missing G parameter for {key}")
    return PhaseEnergy(
        name=ph.name,
        constituents=tuple(seen),
        stoichiometry=tuple(fractions[el] for el in seen),
        site_total=total,
        _endmembers=(pw,),
        _interactions=(),
    )


def phase_energy(db: Database, name: str) -> PhaseEnergy:
    """Build the energy model for one phase.

    Supported models: a single substitutional sublattice with any number
    of element constituents, and multi-sublattice line compounds whose
    sublattices each host exactly one element. Anything else raises.
    """
    ph = db.phases.get(name)
    if ph is None:
        raise TdbError(f"phase {name} is not declared")
    if not ph.sublattices:
        raise TdbError(f"phase {name} has no CONSTITUENT statement")
    for species in ph.sublattices:
        for s in species:
            if s in _PSEUDO_ELEMENTS:
                raise TdbError(f"phase {name}: interstitial models are unsupported")
            if s not in db.elements:
                raise TdbError(f"phase {name}: constituent {s} is not an element")
    if len(ph.sublattices) > 1:
        if all(len(s) == 1 for s in ph.sublattices):
            return _stoichiometric_energy(db, ph)
        raise TdbError(f"phase {name}: multi-sublattice solutions are unsupported")

    constituents = ph.sublattices[0]
    endmembers = []
    for el in constituents:
        pw = db.parameter(ph.name, ((el,),), 0)
        if pw is None:
            raise TdbError(f"phase {name}: missing endmember G for {el}")
        endmembers.append(pw)
    interactions: dict[tuple[int, int, int], Piecewise] = {}
    for p in db.parameters:
        if p.phase != ph.name or len(p.constituents) != 1:
            continue
        group = p.constituents[0]
        if len(group) == 1:
            continue
        if len(group) > 2:
            raise TdbError(
                f"phase {name}: ternary and higher interactions are unsupported"
            )
        try:
            i, j = (constituents.index(el) for el in group)
        except ValueError as exc:
            raise TdbError(
                f"phase {name}: interaction over unknown constituent {group}"
            ) from exc
        interactions[(i, j, p.order)] = p.expr  # later statements shadow
    return PhaseEnergy(
        name=ph.name,
        constituents=constituents,
        stoichiometry=None,
        site_total=sum(ph.sites),
        _endmembers=tuple(endmembers),
        _interactions=tuple((i, j, k, pw) for (i, j, k), pw in interactions.items()),
    )
