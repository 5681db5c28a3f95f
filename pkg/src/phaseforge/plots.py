"""Matplotlib companions to the deterministic PPM rasters.

These figures are for human eyes; only the delimited files and pixmaps
carry the bit-identity guarantee. Everything renders through the Agg
backend so headless runs work.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataio import EPS_ELEMENT, ElementSet, PhaseVocabulary
from .evaluation import (
    MATCH_RGB,
    MISMATCH_RGB,
    MULT_OVERFLOW,
    MULT_PALETTE,
    MetricsReport,
)

_DPI = 150


def _mult_colors(values: np.ndarray) -> np.ndarray:
    rgb = np.empty((len(values), 3))
    for i, v in enumerate(values):
        rgb[i] = MULT_PALETTE.get(int(v), MULT_OVERFLOW)
    return rgb / 255.0


def _plane_coords(
    x: np.ndarray, t: np.ndarray, active: list[int]
) -> tuple[np.ndarray, np.ndarray, str, str]:
    """2D plot coordinates for a binary or ternary field."""
    if len(active) == 2:
        return x[:, active[1]], t, "x (second element)", "T [K]"
    if len(active) == 3:
        a, b, c = (x[:, i] for i in active)
        px = c + 0.5 * a
        py = a * math.sqrt(3.0) / 2.0
        return px, py, "", ""
    raise ValueError(f"cannot plot a {len(active)}-element field")


def _active_columns(x: np.ndarray, eps: float = EPS_ELEMENT) -> list[int]:
    return [c for c in range(x.shape[1]) if np.any(x[:, c] > eps)]


def _scatter_figure(
    x: np.ndarray,
    t: np.ndarray,
    colors: np.ndarray,
    elements: ElementSet,
    title: str,
    path: Path,
) -> None:
    active = _active_columns(x)
    px, py, xl, yl = _plane_coords(x, t, active)
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.scatter(px, py, c=colors, s=14, marker="s", linewidths=0)
    names = [elements.names[i] for i in active]
    if len(active) == 2:
        ax.set_xlabel(f"x({names[1]})")
        ax.set_ylabel("T [K]")
    else:
        ax.set_aspect("equal")
        ax.set_axis_off()
        corners = {names[0]: (0.5, math.sqrt(3) / 2), names[1]: (0.0, 0.0),
                   names[2]: (1.0, 0.0)}
        for label, (cx, cy) in corners.items():
            ax.annotate(label, (cx, cy), ha="center",
                        va="bottom" if cy > 0 else "top")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def multiplicity_figure(
    x: np.ndarray,
    t: np.ndarray,
    labels: np.ndarray,
    elements: ElementSet,
    path: str | Path,
) -> None:
    sizes = np.asarray(labels, bool).sum(axis=1)
    _scatter_figure(
        np.asarray(x, float), np.asarray(t, float), _mult_colors(sizes),
        elements, "predicted phase multiplicity", Path(path),
    )


def match_figure(
    x: np.ndarray,
    t: np.ndarray,
    match: np.ndarray,
    elements: ElementSet,
    path: str | Path,
) -> None:
    colors = np.where(
        np.asarray(match, bool)[:, None],
        np.asarray(MATCH_RGB) / 255.0,
        np.asarray(MISMATCH_RGB) / 255.0,
    )
    _scatter_figure(
        np.asarray(x, float), np.asarray(t, float), colors,
        elements, "exact-set match", Path(path),
    )


def f1_figure(
    report: MetricsReport, vocab: PhaseVocabulary, path: str | Path
) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    pos = np.arange(vocab.size)
    ax.bar(pos, report.f1.f1, color="#3182bd")
    ax.set_xticks(pos)
    ax.set_xticklabels(vocab.names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(f"per-class F1 (macro {report.macro_f1:.4f})")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def history_figure(
    histories: list[tuple[int, np.ndarray, np.ndarray]], path: str | Path
) -> None:
    """Loss and validation Macro-F1 curves, one pair of lines per seed."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.5))
    for seed, train_loss, val_f1 in histories:
        ax1.plot(train_loss, label=f"seed {seed}", linewidth=1.2)
        ax2.plot(val_f1, label=f"seed {seed}", linewidth=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val Macro-F1")
    if histories:
        ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def eval_figures(
    report: MetricsReport,
    x: np.ndarray,
    t: np.ndarray,
    truth: np.ndarray,
    pred: np.ndarray,
    elements: ElementSet,
    vocab: PhaseVocabulary,
    out_dir: str | Path,
) -> list[Path]:
    """Standard figure set next to an evaluation report.

    Plane maps render only for fields that fit a single plane (binary, or
    ternary at one temperature); the F1 bars always render.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "fig_f1.png"]
    f1_figure(report, vocab, written[0])
    x = np.asarray(x, float)
    t = np.asarray(t, float)
    active = _active_columns(x)
    plottable = len(active) == 2 or (
        len(active) == 3 and len(np.unique(np.round(t, 6))) == 1
    )
    if plottable:
        mpath = out / "fig_multiplicity.png"
        multiplicity_figure(x, t, pred, elements, mpath)
        written.append(mpath)
        match = ~(np.asarray(pred, bool) != np.asarray(truth, bool)).any(axis=1)
        cpath = out / "fig_match.png"
        match_figure(x, t, match, elements, cpath)
        written.append(cpath)
    return written
