"""Scoring of phaseforge prediction files against an exported dataset.

This is an intentionally independent implementation of the consumer's
evaluation conventions, so the two tools can cross-check each other on
the same pair of files: per-class F1 from tp/fp/fn with the degenerate
never-present-never-predicted class scoring 1.0, macro-F1 averaged over
every vocabulary entry, and exact-set accuracy. Rows must align
one-to-one in composition and temperature; nothing is ever re-paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "BridgeAlignmentError",
    "BridgeFormatError",
    "TruthTable",
    "PredictionTable",
    "read_dataset",
    "read_predictions",
    "VerifyReport",
    "verify_against_predictions",
]

DATA_TAG = "#phaseforge-v1"
PRED_TAG = "#phaseforge-pred-v1"
ALIGN_TOL = 1e-9


class BridgeFormatError(ValueError):
    """Raised for a file this tool cannot read."""


class BridgeAlignmentError(ValueError):
    """Raised when two files do not describe the same grid points."""


@dataclass(frozen=True)
class TruthTable:
    elements: tuple[str, ...]
    phases: tuple[str, ...]
    x: np.ndarray
    t: np.ndarray
    labels: np.ndarray  # (n, k) bool


@dataclass(frozen=True)
class PredictionTable:
    elements: tuple[str, ...]
    phases: tuple[str, ...]
    x: np.ndarray
    t: np.ndarray
    labels: np.ndarray
    decoded: bool


def _header_fields(line: str, tag: str, path: Path) -> dict[str, str]:
    if not line.startswith(tag + " "):
        raise BridgeFormatError(f"{path}: missing {tag} header")
    try:
        return dict(kv.split("=", 1) for kv in line[len(tag) + 1 :].split())
    except ValueError as exc:
        raise BridgeFormatError(f"{path}: malformed header") from exc


def _labels_of(masks: np.ndarray, k: int) -> np.ndarray:
    bits = np.arange(k, dtype=np.int64)
    return (masks[:, None] >> bits) & 1 > 0


def _parse_rows(lines, path: Path, c: int, k: int, extras: tuple[int, ...]):
    """Shared row reader; ``extras`` lists the accepted trailing field counts."""
    x = np.empty((len(lines), c))
    t = np.empty(len(lines))
    masks = np.empty(len(lines), dtype=np.int64)
    for i, line in enumerate(lines):
        parts = line.split()
        if len(parts) - (c + 2) not in extras:
            raise BridgeFormatError(
                f"{path}:{i + 2}: unexpected field count {len(parts)}"
            )
        try:
            x[i] = [float(v) for v in parts[:c]]
            t[i] = float(parts[c])
            masks[i] = int(parts[c + 1], 16)
        except ValueError as exc:
            raise BridgeFormatError(f"{path}:{i + 2}: {exc}") from exc
        if masks[i] < 0 or masks[i] >= (1 << k):
            raise BridgeFormatError(f"{path}:{i + 2}: mask outside vocabulary")
    return x, t, masks


def read_dataset(path: str | Path) -> TruthTable:
    """Read the labeled rows of a dataset file (fractions optional)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BridgeFormatError(f"{path}: empty file")
    fields = _header_fields(lines[0], DATA_TAG, path)
    elements = tuple(fields["elements"].split(","))
    phases = tuple(fields["phases"].split(","))
    c, k = len(elements), len(phases)
    rows = [ln for ln in lines[1:] if ln.strip()]
    # rows end with a split tag, optionally preceded by k phase fractions
    x, t, masks = _parse_rows(rows, path, c, k, (1, 1 + k))
    return TruthTable(elements, phases, x, t, _labels_of(masks, k))


def read_predictions(path: str | Path) -> PredictionTable:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BridgeFormatError(f"{path}: empty file")
    fields = _header_fields(lines[0], PRED_TAG, path)
    elements = tuple(fields["elements"].split(","))
    phases = tuple(fields["phases"].split(","))
    c, k = len(elements), len(phases)
    rows = [ln for ln in lines[1:] if ln.strip()]
    # rows carry k probabilities and a decode flag after the mask
    x, t, masks = _parse_rows(rows, path, c, k, (1 + k,))
    return PredictionTable(
        elements,
        phases,
        x,
        t,
        _labels_of(masks, k),
        decoded=fields.get("decoded") == "1",
    )


@dataclass(frozen=True)
class VerifyReport:
    """Agreement between a prediction file and reference labels."""

    n: int
    n_mismatch: int
    accuracy: float
    macro_f1: float
    phases: tuple[str, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    f1: np.ndarray

    def as_text(self) -> str:
        lines = [
            "prediction check against exported labels",
            f"samples          {self.n}",
            f"exact matches    {self.n - self.n_mismatch}",
            f"subset accuracy  {100.0 * self.accuracy:.4f}%",
            f"macro-F1         {self.macro_f1:.6f}",
        ]
        for i, name in enumerate(self.phases):
            lines.append(
                f"  {name:<12} F1={self.f1[i]:.6f} "
                f"tp={int(self.tp[i])} fp={int(self.fp[i])} fn={int(self.fn[i])}"
            )
        return "\n".join(lines)

    def as_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "n_mismatch": self.n_mismatch,
                "accuracy": self.accuracy,
                "macro_f1": self.macro_f1,
                "per_phase": {
                    name: {
                        "tp": int(self.tp[i]),
                        "fp": int(self.fp[i]),
                        "fn": int(self.fn[i]),
                        "f1": float(self.f1[i]),
                    }
                    for i, name in enumerate(self.phases)
                },
            },
            indent=2,
            sort_keys=True,
        )


def verify_against_predictions(
    dataset: str | Path, predictions: str | Path
) -> VerifyReport:
    """Score a prediction file against an exported dataset.

    The two files must share element order and phase vocabulary and
    describe identical grid points row for row; any drift raises
    BridgeAlignmentError naming the first offending row.
    """
    truth = read_dataset(dataset)
    pred = read_predictions(predictions)
    if truth.elements != pred.elements:
        raise BridgeAlignmentError(
            f"element order differs: {truth.elements} vs {pred.elements}"
        )
    if truth.phases != pred.phases:
        raise BridgeAlignmentError(
            f"phase vocabulary differs: {truth.phases} vs {pred.phases}"
        )
    if len(truth.t) != len(pred.t):
        raise BridgeAlignmentError(
            f"row counts differ: {len(truth.t)} vs {len(pred.t)}"
        )
    dx = np.abs(truth.x - pred.x).max(axis=1)
    dt = np.abs(truth.t - pred.t)
    off = np.flatnonzero((dx > ALIGN_TOL) | (dt > ALIGN_TOL))
    if off.size:
        i = int(off[0])
        raise BridgeAlignmentError(
            f"row {i}: grid points differ "
            f"(|dx|={dx[i]:.3e}, |dT|={dt[i]:.3e})"
        )

    y_true, y_pred = truth.labels, pred.labels
    tp = (y_true & y_pred).sum(axis=0).astype(np.float64)
    fp = (~y_true & y_pred).sum(axis=0).astype(np.float64)
    fn = (y_true & ~y_pred).sum(axis=0).astype(np.float64)
    denom = 2.0 * tp + fp + fn
    # a phase never present and never predicted counts as perfectly scored
    f1 = np.where(denom > 0.0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 1.0)
    n = len(truth.t)
    n_mismatch = int((y_true != y_pred).any(axis=1).sum())
    return VerifyReport(
        n=n,
        n_mismatch=n_mismatch,
        accuracy=1.0 - n_mismatch / n if n else 1.0,
        macro_f1=float(f1.mean()),
        phases=truth.phases,
        tp=tp,
        fp=fp,
        fn=fn,
        f1=f1,
    )
