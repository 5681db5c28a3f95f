"""Canonical dataset representation, file format, and split construction.

A dataset couples an ordered element set, an ordered phase vocabulary, and a
table of (composition, temperature) state points carrying multi-hot phase
labels. Files are line-oriented UTF-8 text with a single header line and one
sample per line, formatted so that identical datasets always serialize to
identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_TAG = "#phaseforge-v1"
SIMPLEX_TOL = 1e-9
EPS_PHASE = 1e-6
EPS_ELEMENT = 1e-6

DEFAULT_ELEMENTS = ("Ag", "Bi", "Cu", "Sn")
DEFAULT_PHASES = (
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
# Phases that cannot exist unless these elements are all present. Generic
# lattices and terminal phases carry no requirement.
DEFAULT_REQUIRED_ELEMENTS = {
    "EPSILON": frozenset({"Cu", "Sn"}),
    "CUSN_IMC": frozenset({"Cu", "Sn"}),
    "DO3": frozenset({"Cu", "Sn"}),
}

SPLIT_TAGS = ("tr", "va", "te", "?")


class DatasetFormatError(ValueError):
    """Raised when a dataset file or in-memory dataset violates the format."""


@dataclass(frozen=True)
class ElementSet:
    """Ordered, canonical element symbols for one dataset."""

    names: tuple[str, ...] = DEFAULT_ELEMENTS

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise DatasetFormatError(f"duplicate element symbols: {self.names}")
        if not 2 <= len(self.names) <= 8:
            raise DatasetFormatError(
                f"element set size must be in [2, 8], got {len(self.names)}"
            )

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, symbol: str) -> int:
        return self.names.index(symbol)


@dataclass(frozen=True)
class PhaseVocabulary:
    """Ordered phase identifiers plus per-phase element requirements."""

    names: tuple[str, ...] = DEFAULT_PHASES
    required_elements: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise DatasetFormatError(f"duplicate phase names: {self.names}")
        if len(self.names) < 1:
            raise DatasetFormatError("phase vocabulary is empty")
        merged = {}
        for name in self.names:
            if name in self.required_elements:
                merged[name] = frozenset(self.required_elements[name])
            else:
                merged[name] = DEFAULT_REQUIRED_ELEMENTS.get(name, frozenset())
        object.__setattr__(self, "required_elements", merged)

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def mask_of(self, phase_names: Iterable[str]) -> int:
        mask = 0
        for name in phase_names:
            mask |= 1 << self.index(name)
        return mask

    def names_of(self, mask: int) -> tuple[str, ...]:
        return tuple(n for k, n in enumerate(self.names) if mask >> k & 1)

    def requirement_matrix(self, elements: ElementSet) -> np.ndarray:
        """Boolean (K, C) matrix: phase k requires element c."""
        req = np.zeros((self.size, elements.size), dtype=bool)
        for k, name in enumerate(self.names):
            for sym in self.required_elements[name]:
                if sym in elements.names:
                    req[k, elements.index(sym)] = True
        return req


@dataclass(frozen=True)
class StatePoint:
    """One composition-temperature query. Fractions live on the simplex."""

    x: tuple[float, ...]
    t: float

    def __post_init__(self) -> None:
        if any(v < 0.0 for v in self.x):
            raise DatasetFormatError(f"negative fraction in {self.x}")
        if abs(sum(self.x) - 1.0) > SIMPLEX_TOL:
            raise DatasetFormatError(
                f"composition off simplex: sum={sum(self.x)!r}"
            )

    def present_elements(self, elements: ElementSet) -> frozenset[str]:
        return frozenset(
            sym for sym, v in zip(elements.names, self.x) if v > EPS_ELEMENT
        )


@dataclass(frozen=True)
class Sample:
    state: StatePoint
    mask: int
    fractions: tuple[float, ...] | None = None
    split: str = "?"


class Dataset:
    """Columnar sample table with element set, vocabulary, and T range.

    Immutable by convention once constructed; all arrays are float64 and
    row order is the canonical serialization order.
    """

    def __init__(
        self,
        elements: ElementSet,
        phases: PhaseVocabulary,
        x: np.ndarray,
        t: np.ndarray,
        masks: np.ndarray,
        t_min: float,
        t_max: float,
        fractions: np.ndarray | None = None,
        split: np.ndarray | None = None,
        allow_empty_labels: bool = False,
    ) -> None:
        self.elements = elements
        self.phases = phases
        self.x = np.asarray(x, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        self.masks = np.asarray(masks, dtype=np.int64)
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.fractions = (
            None if fractions is None else np.asarray(fractions, dtype=np.float64)
        )
        if split is None:
            split = np.full(len(self.t), "?", dtype="<U2")
        self.split = np.asarray(split, dtype="<U2")
        self.under_represented: tuple[str, ...] = ()
        self._validate(allow_empty_labels)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def empty(
        cls, elements: ElementSet, phases: PhaseVocabulary,
        t_min: float, t_max: float,
    ) -> "Dataset":
        return cls(
            elements, phases,
            np.zeros((0, elements.size)), np.zeros(0), np.zeros(0, np.int64),
            t_min, t_max,
        )

    @classmethod
    def from_samples(
        cls,
        elements: ElementSet,
        phases: PhaseVocabulary,
        samples: Sequence[Sample],
        t_min: float | None = None,
        t_max: float | None = None,
        allow_empty_labels: bool = False,
    ) -> "Dataset":
        if not samples:
            raise DatasetFormatError("cannot build a dataset from zero samples")
        x = np.array([s.state.x for s in samples], dtype=np.float64)
        t = np.array([s.state.t for s in samples], dtype=np.float64)
        masks = np.array([s.mask for s in samples], dtype=np.int64)
        frac = None
        if all(s.fractions is not None for s in samples):
            frac = np.array([s.fractions for s in samples], dtype=np.float64)
        split = np.array([s.split for s in samples], dtype="<U2")
        if t_min is None:
            t_min = float(t.min())
        if t_max is None:
            t_max = float(t.max())
        return cls(
            elements, phases, x, t, masks, t_min, t_max, frac, split,
            allow_empty_labels,
        )

    def _validate(self, allow_empty_labels: bool) -> None:
        n = len(self.t)
        if self.x.shape != (n, self.elements.size):
            raise DatasetFormatError(
                f"composition array shape {self.x.shape} does not match "
                f"{n} samples x {self.elements.size} elements"
            )
        if self.masks.shape != (n,) or self.split.shape != (n,):
            raise DatasetFormatError("column lengths disagree")
        if np.any(self.x < 0.0):
            idx = int(np.argwhere(self.x < 0.0)[0][0])
            raise DatasetFormatError(f"sample {idx}: negative fraction")
        bad = np.abs(self.x.sum(axis=1) - 1.0) > SIMPLEX_TOL
        if np.any(bad):
            idx = int(np.argmax(bad))
            raise DatasetFormatError(
                f"sample {idx}: composition sum {self.x[idx].sum()!r} "
                "violates the simplex constraint"
            )
        if self.t_max < self.t_min:
            raise DatasetFormatError("T_max < T_min")
        out = (self.t < self.t_min - 1e-9) | (self.t > self.t_max + 1e-9)
        if np.any(out):
            idx = int(np.argmax(out))
            raise DatasetFormatError(
                f"sample {idx}: T={self.t[idx]} outside declared range "
                f"[{self.t_min}, {self.t_max}]"
            )
        if np.any(self.masks < 0) or np.any(self.masks >= 1 << self.phases.size):
            raise DatasetFormatError("label mask out of range for vocabulary")
        if not allow_empty_labels and np.any(self.masks == 0):
            idx = int(np.argmax(self.masks == 0))
            raise DatasetFormatError(f"sample {idx}: empty label set")
        for tag in np.unique(self.split):
            if tag not in SPLIT_TAGS:
                raise DatasetFormatError(f"unknown split tag {tag!r}")
        if self.fractions is not None:
            if self.fractions.shape != (n, self.phases.size):
                raise DatasetFormatError("fraction array shape mismatch")
            if np.any(self.fractions < 0.0):
                raise DatasetFormatError("negative phase fraction")
            expect = (self.fractions > EPS_PHASE)
            got = self.label_matrix().astype(bool)
            if not np.array_equal(expect, got):
                idx = int(np.argmax(np.any(expect != got, axis=1)))
                raise DatasetFormatError(
                    f"sample {idx}: labels disagree with fraction binarization"
                )

    # -- views ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_phases(self) -> int:
        return self.phases.size

    def label_matrix(self) -> np.ndarray:
        """Multi-hot (N, K) float64 label matrix decoded from the bit masks."""
        k = np.arange(self.phases.size, dtype=np.int64)
        return ((self.masks[:, None] >> k[None, :]) & 1).astype(np.float64)

    def state(self, i: int) -> StatePoint:
        return StatePoint(tuple(float(v) for v in self.x[i]), float(self.t[i]))

    def sample(self, i: int) -> Sample:
        frac = None
        if self.fractions is not None:
            frac = tuple(float(v) for v in self.fractions[i])
        return Sample(self.state(i), int(self.masks[i]), frac, str(self.split[i]))

    def indices_of(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def replace_split(self, split: np.ndarray) -> "Dataset":
        ds = Dataset(
            self.elements, self.phases, self.x, self.t, self.masks,
            self.t_min, self.t_max, self.fractions, split,
            allow_empty_labels=True,
        )
        return ds


# -- temperature normalization ------------------------------------------------


def normalize_T(ds: Dataset, t: float) -> tuple[float, bool]:
    """Map kelvin onto [0,1] over the dataset range; clamp out-of-range.

    Returns (value, clamped_flag). A degenerate range is an error.
    """
    value, clamped = normalize_T_array(ds.t_min, ds.t_max, np.array([t]))
    return float(value[0]), bool(clamped[0])


def normalize_T_array(
    t_min: float, t_max: float, t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if not t_max > t_min:
        raise DatasetFormatError(
            f"degenerate temperature range [{t_min}, {t_max}]"
        )
    raw = (np.asarray(t, dtype=np.float64) - t_min) / (t_max - t_min)
    clamped = (raw < 0.0) | (raw > 1.0)
    return np.clip(raw, 0.0, 1.0), clamped


# -- canonical text format ----------------------------------------------------


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write-then-rename so readers never observe a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def _fmt_frac(v: float) -> str:
    return f"{v:.9f}"


def _fmt_t(v: float) -> str:
    return f"{v:.6f}"


def _mask_width(k: int) -> int:
    return (k + 3) // 4


def format_header(ds: Dataset) -> str:
    return (
        f"{FORMAT_TAG} elements={','.join(ds.elements.names)} "
        f"phases={','.join(ds.phases.names)} "
        f"Tmin={_fmt_t(ds.t_min)} Tmax={_fmt_t(ds.t_max)}"
    )


def format_sample_line(ds: Dataset, i: int) -> str:
    parts = [_fmt_frac(v) for v in ds.x[i]]
    parts.append(_fmt_t(ds.t[i]))
    parts.append(format(int(ds.masks[i]), f"0{_mask_width(ds.phases.size)}x"))
    if ds.fractions is not None:
        parts.extend(_fmt_frac(v) for v in ds.fractions[i])
    parts.append(str(ds.split[i]))
    return " ".join(parts)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the canonical text form; identical datasets yield identical bytes."""
    lines = [format_header(ds)]
    lines.extend(format_sample_line(ds, i) for i in range(len(ds)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path: str | Path, allow_empty_labels: bool = False) -> Dataset:
    """Parse a canonical dataset file, validating every invariant.

    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no dataset file at {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FORMAT_TAG):
        raise DatasetFormatError(
            f"{path}: missing {FORMAT_TAG} header on line 1"
        )
    header = _parse_header(lines[0], path)
    elements, phases, t_min, t_max = header
    c, k = elements.size, phases.size
    width = _mask_width(k)

    xs, ts, masks, fracs, splits = [], [], [], [], []
    any_frac = False
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        base = c + 2 + 1
        if len(tokens) == base:
            has_frac = False
        elif len(tokens) == base + k:
            has_frac = True
        else:
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {base} or {base + k} fields, "
                f"got {len(tokens)}"
            )
        try:
            x = [float(v) for v in tokens[:c]]
            t = float(tokens[c])
            mask = int(tokens[c + 1], 16)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
        if len(tokens[c + 1]) != width:
            raise DatasetFormatError(
                f"{path}:{lineno}: mask field must be {width} hex digits"
            )
        if abs(sum(x) - 1.0) > SIMPLEX_TOL:
            raise DatasetFormatError(
                f"{path}:{lineno}: composition sum {sum(x)!r} violates the "
                "simplex constraint"
            )
        frac = None
        if has_frac:
            try:
                frac = [float(v) for v in tokens[c + 2 : c + 2 + k]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            any_frac = True
        tag = tokens[-1]
        if tag not in SPLIT_TAGS:
            raise DatasetFormatError(
                f"{path}:{lineno}: unknown split tag {tag!r}"
            )
        xs.append(x)
        ts.append(t)
        masks.append(mask)
        fracs.append(frac)
        splits.append(tag)

    if any_frac and any(f is None for f in fracs):
        raise DatasetFormatError(
            f"{path}: per-phase fractions present on some lines but not all"
        )
    if not xs:
        return Dataset.empty(elements, phases, t_min, t_max)
    frac_arr = np.array(fracs, dtype=np.float64) if any_frac else None
    try:
        return Dataset(
            elements,
            phases,
            np.array(xs),
            np.array(ts),
            np.array(masks),
            t_min,
            t_max,
            frac_arr,
            np.array(splits, dtype="<U2"),
            allow_empty_labels,
        )
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def _parse_header(line: str, path: Path):
    fields = {}
    for token in line.split()[1:]:
        if "=" not in token:
            raise DatasetFormatError(f"{path}:1: malformed header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    try:
        elements = ElementSet(tuple(fields["elements"].split(",")))
        phases = PhaseVocabulary(tuple(fields["phases"].split(",")))
        t_min = float(fields["Tmin"])
        t_max = float(fields["Tmax"])
    except KeyError as exc:
        raise DatasetFormatError(f"{path}:1: header missing {exc}") from exc
    return elements, phases, t_min, t_max


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    """Stack sample tables that share one element set and vocabulary.

    Row order follows the argument order. Phase fractions survive only when
    every part carries them; the declared T range is the union of the parts'
    ranges. Meant for composing one labeling protocol from differently
    sampled sub-grids, so split tags are reset to unassigned.
    """
    if not parts:
        raise DatasetFormatError("cannot concatenate zero datasets")
    head = parts[0]
    for ds in parts[1:]:
        if ds.elements != head.elements:
            raise DatasetFormatError(
                f"element sets disagree: {ds.elements.names} "
                f"vs {head.elements.names}"
            )
        if ds.phases != head.phases:
            raise DatasetFormatError("phase vocabularies disagree")
    fractions = None
    if all(ds.fractions is not None for ds in parts):
        fractions = np.concatenate([ds.fractions for ds in parts])
    return Dataset(
        head.elements,
        head.phases,
        np.concatenate([ds.x for ds in parts]),
        np.concatenate([ds.t for ds in parts]),
        np.concatenate([ds.masks for ds in parts]),
        min(ds.t_min for ds in parts),
        max(ds.t_max for ds in parts),
        fractions=fractions,
    )


# -- splits ---------------------------------------------------------------------


def make_splits(ds: Dataset, seed: int, min_positives: int = 5) -> Dataset:
    """Assign 80/10/10 split tags with per-phase minimum-positive guarantees.

    Deterministic for a fixed seed. Every phase with at least 3*min_positives
    total positives ends with at least min_positives positives in val and in
    test; phases that cannot be satisfied are flagged in
    ``result.under_represented`` instead of failing.
    """
    n = len(ds)
    if n < 10:
        raise DatasetFormatError(f"need >= 10 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_va = int(round(0.1 * n))
    n_te = int(round(0.1 * n))

    y = ds.label_matrix().astype(bool)
    totals = y.sum(axis=0).astype(int)
    # Unassigned = -1; 0 train, 1 val, 2 test.
    assign = np.full(n, -1, dtype=np.int64)
    counts = [0, 0, 0]
    caps = [n - n_va - n_te, n_va, n_te]

    def put(i: int, s: int) -> None:
        assign[i] = s
        counts[s] += 1

    # Quota pass, rarest phase first, alternating val/test so heavily
    # co-occurring phases do not starve each other.
    order = sorted(range(ds.n_phases), key=lambda k: (totals[k], k))
    for k in order:
        if totals[k] < 3 * min_positives:
            continue
        have = [0, 0, 0]
        pos_iter = [i for i in perm if y[i, k]]
        for i in pos_iter:
            if assign[i] >= 0:
                have[assign[i]] += 1
        for i in pos_iter:
            if have[1] >= min_positives and have[2] >= min_positives:
                break
            if assign[i] >= 0:
                continue
            want = 1 if (have[1] - min_positives) <= (have[2] - min_positives) else 2
            if have[want] >= min_positives:
                want = 3 - want
            if have[want] >= min_positives or counts[want] >= caps[want]:
                want = 3 - want
                if have[want] >= min_positives or counts[want] >= caps[want]:
                    continue
            put(i, want)
            have[want] += 1

    for i in perm:
        if assign[i] >= 0:
            continue
        if counts[1] < n_va:
            put(i, 1)
        elif counts[2] < n_te:
            put(i, 2)
        else:
            put(i, 0)

    tags = np.array(["tr", "va", "te"], dtype="<U2")[assign]
    out = ds.replace_split(tags)
    flagged = []
    for k in range(ds.n_phases):
        if totals[k] == 0:
            continue
        in_va = int(y[assign == 1, k].sum())
        in_te = int(y[assign == 2, k].sum())
        if in_va < min_positives or in_te < min_positives:
            flagged.append(ds.phases.names[k])
    out.under_represented = tuple(flagged)
    return out


def count_present_elements(x: np.ndarray, eps: float = EPS_ELEMENT) -> np.ndarray:
    """Per-row count of chemically present elements, C_n = sum(x_e > eps)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = (x > eps).sum(axis=1).astype(np.int64)
    if np.any(c == 0):
        raise DatasetFormatError("composition with no element above threshold")
    return c
