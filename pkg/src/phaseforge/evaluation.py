"""Multi-label metrics, per-subsystem breakdowns, dense grids, and map rasters.

Subset accuracy is computed as 1 - N_mismatch/N from the integer mismatch
count, never as a float mean, so the identity holds to the last bit. F1 for
a class nobody labels and nobody predicts is defined as 1.0 and flagged;
true negatives never enter the score.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    EPS_ELEMENT,
    Dataset,
    ElementSet,
    PhaseVocabulary,
    atomic_write_bytes,
    atomic_write_text,
)
from .thermo_oracle import _simplex_grid as simplex_grid

ALIGN_TOL = 1e-9

# raster palette: multiplicity 0..3, then saturated red for 4 and up
MULT_PALETTE = {
    0: (255, 255, 255),
    1: (49, 130, 189),
    2: (49, 163, 84),
    3: (230, 85, 13),
}
MULT_OVERFLOW = (165, 15, 21)
MATCH_RGB = (199, 233, 192)
MISMATCH_RGB = (203, 24, 29)
BACKGROUND_RGB = (255, 255, 255)


class EvaluationError(ValueError):
    """Raised for misaligned or malformed evaluation inputs."""


# -- core metrics --------------------------------------------------------------


@dataclass(frozen=True)
class F1Result:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    f1: np.ndarray
    degenerate: np.ndarray  # class had no positives and no predictions


def f1_per_class(pred: np.ndarray, truth: np.ndarray) -> F1Result:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise EvaluationError(
            f"prediction shape {pred.shape} vs truth {truth.shape}"
        )
    tp = (pred & truth).sum(axis=0).astype(np.int64)
    fp = (pred & ~truth).sum(axis=0).astype(np.int64)
    fn = (~pred & truth).sum(axis=0).astype(np.int64)
    denom = 2 * tp + fp + fn
    degenerate = denom == 0
    f1 = np.where(degenerate, 1.0, 2.0 * tp / np.where(degenerate, 1, denom))
    return F1Result(tp, fp, fn, f1, degenerate)


def macro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """Unweighted mean of per-class F1 over every class, degenerate or not."""
    return float(f1_per_class(pred, truth).f1.mean())


def subset_accuracy(pred: np.ndarray, truth: np.ndarray) -> tuple[float, int]:
    """Exact-set agreement. Empty sets are a value of their own and may match."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise EvaluationError(
            f"prediction shape {pred.shape} vs truth {truth.shape}"
        )
    n = len(pred)
    if n == 0:
        raise EvaluationError("no samples to score")
    n_mismatch = int((pred != truth).any(axis=1).sum())
    return 1.0 - n_mismatch / n, n_mismatch


def percent(fraction: float) -> str:
    """Fixed 4-decimal percentage used in every report."""
    return f"{100.0 * fraction:.4f}"


# -- grouping and grids ---------------------------------------------------------


def group_by_subsystem(
    x: np.ndarray, elements: ElementSet, eps: float = EPS_ELEMENT
) -> dict[tuple[str, ...], np.ndarray]:
    """Partition sample indices by their set of present elements.

    Keys are symbol tuples in canonical element order; the mapping iterates
    unaries first, then binaries, and so on, each block in element order.
    """
    x = np.asarray(x, dtype=np.float64)
    present = x > eps
    if np.any(~present.any(axis=1)):
        bad = int(np.flatnonzero(~present.any(axis=1))[0])
        raise EvaluationError(f"sample {bad} has no element above {eps}")
    weights = 1 << np.arange(present.shape[1])
    codes = present @ weights
    out: dict[tuple[str, ...], np.ndarray] = {}
    order = sorted(
        set(int(c) for c in codes),
        key=lambda c: (bin(c).count("1"), c),
    )
    for code in order:
        key = tuple(
            elements.names[i]
            for i in range(present.shape[1])
            if code >> i & 1
        )
        out[key] = np.flatnonzero(codes == code)
    return out


def subsystem_label(key: tuple[str, ...]) -> str:
    return "-".join(key)


def dense_grid(
    subset: tuple[str, ...],
    elements: ElementSet,
    comp_step_pct: int,
    temps: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Simplex lattice over a subsystem crossed with a temperature list.

    comp_step_pct is the lattice spacing in atomic percent and must divide
    100. Points iterate temperature-major, compositions in lexicographic
    lattice order.
    """
    if 100 % comp_step_pct != 0:
        raise EvaluationError(f"step {comp_step_pct} at.% must divide 100")
    cols = [elements.index(s) for s in subset]
    n = 100 // comp_step_pct
    grid = simplex_grid(len(subset), n).astype(np.float64) / n
    temps = np.asarray(temps, dtype=np.float64)
    m = len(grid)
    x = np.zeros((m * len(temps), elements.size), dtype=np.float64)
    t = np.repeat(temps, m)
    for rep in range(len(temps)):
        x[rep * m : (rep + 1) * m, cols] = grid
    return x, t


# -- full report ----------------------------------------------------------------


@dataclass(frozen=True)
class SubsystemRow:
    n: int
    n_mismatch: int

    @property
    def accuracy(self) -> float:
        return 1.0 - self.n_mismatch / self.n


@dataclass(frozen=True)
class MetricsReport:
    n: int
    f1: F1Result
    macro_f1: float
    accuracy: float
    n_mismatch: int
    subsystems: dict[tuple[str, ...], SubsystemRow]
    mult_truth: dict[int, int]
    mult_pred: dict[int, int]


def _multiplicity_hist(labels: np.ndarray) -> dict[int, int]:
    sizes = np.asarray(labels, dtype=bool).sum(axis=1)
    values, counts = np.unique(sizes, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def check_alignment(
    x_a: np.ndarray,
    t_a: np.ndarray,
    x_b: np.ndarray,
    t_b: np.ndarray,
    tol: float = ALIGN_TOL,
) -> None:
    """Point sets must agree row by row; reports the first offender."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    t_a = np.asarray(t_a, dtype=np.float64)
    t_b = np.asarray(t_b, dtype=np.float64)
    if x_a.shape != x_b.shape or t_a.shape != t_b.shape:
        raise EvaluationError(
            f"point count mismatch: {x_a.shape}/{t_a.shape} vs "
            f"{x_b.shape}/{t_b.shape}"
        )
    bad = (np.abs(x_a - x_b).max(axis=1) > tol) | (np.abs(t_a - t_b) > tol)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EvaluationError(
            f"misaligned points at row {i}: "
            f"x={x_a[i].tolist()} T={t_a[i]} vs x={x_b[i].tolist()} T={t_b[i]}"
        )


def compute_report(
    elements: ElementSet,
    x: np.ndarray,
    truth: np.ndarray,
    pred: np.ndarray,
) -> MetricsReport:
    f1 = f1_per_class(pred, truth)
    mf1 = float(f1.f1.mean())
    accuracy, n_mismatch = subset_accuracy(pred, truth)
    mismatch_rows = (np.asarray(pred, bool) != np.asarray(truth, bool)).any(axis=1)
    groups = group_by_subsystem(x, elements)
    subsystems = {
        key: SubsystemRow(len(idx), int(mismatch_rows[idx].sum()))
        for key, idx in groups.items()
    }
    return MetricsReport(
        n=len(pred),
        f1=f1,
        macro_f1=mf1,
        accuracy=accuracy,
        n_mismatch=n_mismatch,
        subsystems=subsystems,
        mult_truth=_multiplicity_hist(truth),
        mult_pred=_multiplicity_hist(pred),
    )


def _masks_of(labels: np.ndarray) -> np.ndarray:
    k = np.arange(labels.shape[1], dtype=np.int64)
    return (np.asarray(labels, bool).astype(np.int64) << k[None, :]).sum(axis=1)


def report_text(
    report: MetricsReport, vocab: PhaseVocabulary
) -> str:
    lines = ["phase-set evaluation", ""]
    lines.append(f"samples          {report.n}")
    lines.append(
        f"exact matches    {report.n - report.n_mismatch}/{report.n}"
    )
    lines.append(f"subset accuracy  {percent(report.accuracy)}%")
    lines.append(f"macro-F1         {report.macro_f1:.6f}")
    lines.append("")
    lines.append("per-class F1")
    for k, name in enumerate(vocab.names):
        tag = "  (no positives, no predictions)" if report.f1.degenerate[k] else ""
        lines.append(
            f"  {name:<12} tp {int(report.f1.tp[k]):>7} "
            f"fp {int(report.f1.fp[k]):>7} fn {int(report.f1.fn[k]):>7} "
            f"f1 {report.f1.f1[k]:.6f}{tag}"
        )
    lines.append("")
    lines.append("per-subsystem exact-set accuracy")
    for key, row in report.subsystems.items():
        lines.append(
            f"  {subsystem_label(key):<12} n {row.n:>7} "
            f"mismatch {row.n_mismatch:>7} accuracy {percent(row.accuracy)}%"
        )
    lines.append("")
    lines.append("label multiplicity (truth / predicted)")
    sizes = sorted(set(report.mult_truth) | set(report.mult_pred))
    for s in sizes:
        lines.append(
            f"  {s}: {report.mult_truth.get(s, 0)} / {report.mult_pred.get(s, 0)}"
        )
    return "\n".join(lines) + "\n"


def report_csv(report: MetricsReport, vocab: PhaseVocabulary) -> str:
    rows = ["metric,key,value"]
    rows.append(f"n,,{report.n}")
    rows.append(f"n_mismatch,,{report.n_mismatch}")
    rows.append(f"accuracy,,{report.accuracy:.12f}")
    rows.append(f"macro_f1,,{report.macro_f1:.12f}")
    for k, name in enumerate(vocab.names):
        rows.append(f"tp,{name},{int(report.f1.tp[k])}")
        rows.append(f"fp,{name},{int(report.f1.fp[k])}")
        rows.append(f"fn,{name},{int(report.f1.fn[k])}")
        rows.append(f"f1,{name},{report.f1.f1[k]:.12f}")
    for key, row in report.subsystems.items():
        rows.append(f"subsystem_n,{subsystem_label(key)},{row.n}")
        rows.append(
            f"subsystem_mismatch,{subsystem_label(key)},{row.n_mismatch}"
        )
    for s in sorted(report.mult_truth):
        rows.append(f"mult_truth,{s},{report.mult_truth[s]}")
    for s in sorted(report.mult_pred):
        rows.append(f"mult_pred,{s},{report.mult_pred[s]}")
    return "\n".join(rows) + "\n"


def mismatch_csv(
    elements: ElementSet,
    vocab: PhaseVocabulary,
    x: np.ndarray,
    t: np.ndarray,
    truth: np.ndarray,
    pred: np.ndarray,
) -> str:
    width = (vocab.size + 3) // 4
    cols = [f"x_{s}" for s in elements.names]
    rows = [",".join(cols + ["T", "truth_mask", "pred_mask", "match"])]
    tm = _masks_of(truth)
    pm = _masks_of(pred)
    for i in range(len(t)):
        parts = [f"{v:.9f}" for v in x[i]]
        parts.append(f"{t[i]:.6f}")
        parts.append(format(int(tm[i]), f"0{width}x"))
        parts.append(format(int(pm[i]), f"0{width}x"))
        parts.append("1" if tm[i] == pm[i] else "0")
        rows.append(",".join(parts))
    return "\n".join(rows) + "\n"


def multiplicity_csv(
    elements: ElementSet,
    x: np.ndarray,
    t: np.ndarray,
    truth: np.ndarray,
    pred: np.ndarray,
) -> str:
    cols = [f"x_{s}" for s in elements.names]
    rows = [",".join(cols + ["T", "mult_truth", "mult_pred"])]
    mt = np.asarray(truth, bool).sum(axis=1)
    mp = np.asarray(pred, bool).sum(axis=1)
    for i in range(len(t)):
        parts = [f"{v:.9f}" for v in x[i]]
        parts.append(f"{t[i]:.6f}")
        parts.append(str(int(mt[i])))
        parts.append(str(int(mp[i])))
        rows.append(",".join(parts))
    return "\n".join(rows) + "\n"


def evaluate(
    elements: ElementSet,
    vocab: PhaseVocabulary,
    x: np.ndarray,
    t: np.ndarray,
    truth: np.ndarray,
    pred: np.ndarray,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Score predictions against reference labels; optionally write the
    report files (report.txt, report.csv, mismatch.csv, multiplicity.csv)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    report = compute_report(elements, x, truth, pred)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "report.txt", report_text(report, vocab))
        atomic_write_text(out / "report.csv", report_csv(report, vocab))
        atomic_write_text(
            out / "mismatch.csv",
            mismatch_csv(elements, vocab, x, t, truth, pred),
        )
        atomic_write_text(
            out / "multiplicity.csv",
            multiplicity_csv(elements, x, t, truth, pred),
        )
    return report


# -- raster maps -----------------------------------------------------------------


def _axis_index(values: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, int]:
    """Map floats onto indices of their sorted unique levels."""
    uniq = np.unique(np.round(values / tol) * tol)
    idx = np.searchsorted(uniq, values)
    idx = np.clip(idx, 0, len(uniq) - 1)
    left = np.abs(uniq[np.maximum(idx - 1, 0)] - values)
    here = np.abs(uniq[idx] - values)
    idx = np.where(left < here, idx - 1, idx)
    return idx.astype(np.int64), len(uniq)


def _palette(values: np.ndarray, kind: str) -> np.ndarray:
    rgb = np.empty((len(values), 3), dtype=np.uint8)
    if kind == "multiplicity":
        for i, v in enumerate(values):
            rgb[i] = MULT_PALETTE.get(int(v), MULT_OVERFLOW)
    elif kind == "match":
        for i, v in enumerate(values):
            rgb[i] = MATCH_RGB if v else MISMATCH_RGB
    else:
        raise EvaluationError(f"unknown raster kind {kind!r}")
    return rgb


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """pixels: (h, w, 3) uint8, written as binary P6."""
    h, w, _ = pixels.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())


def render_map(
    x: np.ndarray,
    t: np.ndarray,
    values: np.ndarray,
    elements: ElementSet,
    path: str | Path,
    kind: str = "multiplicity",
    scale: int = 4,
    eps: float = EPS_ELEMENT,
) -> None:
    """Rasterize a lattice field to a PPM image.

    Binary systems map composition to columns and temperature to rows (top
    row is the hottest). Ternary systems at a single temperature use a
    right-triangle barycentric raster: rows index the second element, columns
    the third. Cells without a sample stay background white. Quaternary
    fields must be sliced into ternary sections first.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    values = np.asarray(values)
    active = [c for c in range(x.shape[1]) if np.any(x[:, c] > eps)]
    rgb = _palette(values, kind)
    if len(active) == 2:
        ci, n_c = _axis_index(x[:, active[1]])
        ri, n_r = _axis_index(-t)  # negate: top row gets the highest T
    elif len(active) == 3:
        if len(np.unique(np.round(t, 6))) != 1:
            raise EvaluationError(
                "ternary raster needs a single temperature level"
            )
        ri, n_r = _axis_index(x[:, active[1]])
        ci, n_c = _axis_index(x[:, active[2]])
    else:
        raise EvaluationError(
            f"cannot raster a {len(active)}-element field; "
            "slice quaternary grids into ternary sections"
        )
    img = np.full((n_r, n_c, 3), BACKGROUND_RGB, dtype=np.uint8)
    img[ri, ci] = rgb
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    write_ppm(path, img)


def quaternary_slice_levels(
    x: np.ndarray, elements: ElementSet, eps: float = EPS_ELEMENT
) -> tuple[int, np.ndarray]:
    """Slice a 4-element lattice along its last active element's levels.

    Returns (column, sorted unique level values) for the slicing axis.
    """
    x = np.asarray(x, dtype=np.float64)
    active = [c for c in range(x.shape[1]) if np.any(x[:, c] > eps)]
    if len(active) != 4:
        raise EvaluationError(f"expected 4 active elements, got {len(active)}")
    col = active[-1]
    return col, np.unique(np.round(x[:, col], 9))
