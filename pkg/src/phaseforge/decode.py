"""Inference-side projection of probabilities onto admissible phase sets.

The pipeline runs in a fixed order: prune physically impossible activations,
smooth each probability against its spatial neighborhood, threshold per
class, then cap the label count at the number of chemically present
elements. Reordering these operators changes results (capping before
pruning can evict a legitimate phase in favor of one that pruning would
have removed), so the order is part of the contract, not a choice.

Output is guaranteed admissible for any input: label count never exceeds
the element count and unary corners carry exactly one admissible label.
Samples whose thresholded set comes back empty fall back to the most
probable admissible phase and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import EPS_ELEMENT, PhaseVocabulary, ElementSet
from .losses import build_neighbor_graph_points


class DecodeError(ValueError):
    """Raised for inconsistent decode inputs."""


@dataclass(frozen=True)
class DecodeConfig:
    prune: bool = True
    smooth: bool = True
    cap: bool = True
    sigma_x: float = 0.05
    sigma_t: float = 0.05
    k_nn: int = 8
    generalize_support: bool = False
    eps_element: float = EPS_ELEMENT


def ensemble_probs(prob_sets: list[np.ndarray]) -> np.ndarray:
    """Element-wise mean of per-seed probability matrices."""
    if not prob_sets:
        raise DecodeError("no probability matrices to ensemble")
    first = np.asarray(prob_sets[0], dtype=np.float64)
    for m in prob_sets[1:]:
        if np.asarray(m).shape != first.shape:
            raise DecodeError(
                f"ensemble shape mismatch: {np.asarray(m).shape} vs {first.shape}"
            )
    return np.mean([np.asarray(m, dtype=np.float64) for m in prob_sets], axis=0)


def requirement_matrix(
    vocab: PhaseVocabulary, elements: ElementSet
) -> np.ndarray:
    return vocab.requirement_matrix(elements)


def _admissible(
    x: np.ndarray, req: np.ndarray, eps: float
) -> np.ndarray:
    """(N, K) bool: sample n may carry phase k (requirements all present)."""
    present = x > eps
    # phase k admissible iff no required element is absent
    return ~((req[None, :, :] & ~present[:, None, :]).any(axis=2))


def prune_pure(
    p: np.ndarray,
    x: np.ndarray,
    req: np.ndarray,
    generalize_support: bool = False,
    eps: float = EPS_ELEMENT,
) -> np.ndarray:
    """Zero probabilities of phases whose required elements are absent.

    By default only unary (single-element) samples are touched; with
    generalize_support the rule applies everywhere. Phases without
    requirements are never pruned.
    """
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if p.shape[0] != x.shape[0] or req.shape[0] != p.shape[1]:
        raise DecodeError(
            f"shape mismatch: p{p.shape} x{x.shape} req{req.shape}"
        )
    ok = _admissible(x, req, eps)
    if generalize_support:
        scope = np.ones(len(p), dtype=bool)
    else:
        scope = (x > eps).sum(axis=1) == 1
    out = p.copy()
    out[scope] = np.where(ok[scope], out[scope], 0.0)
    return out


def smooth_probs(
    p: np.ndarray,
    x: np.ndarray,
    t_norm: np.ndarray,
    cfg: DecodeConfig = DecodeConfig(),
) -> np.ndarray:
    """Blend each row with its k nearest neighbors on the inference grid.

        p'_n = (p_n + sum_m w_nm p_m) / (1 + sum_m w_nm)

    A convex combination, so smoothed values stay inside the neighborhood's
    per-class range. Fewer than two points: identity.
    """
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    if n < 2:
        return p.copy()
    k = min(cfg.k_nn, n - 1)
    ng = build_neighbor_graph_points(
        np.asarray(x, dtype=np.float64),
        np.asarray(t_norm, dtype=np.float64),
        cfg.sigma_x, cfg.sigma_t, k,
    )
    w_sum = ng.omega.sum(axis=1)
    neigh = np.einsum("nk,nkc->nc", ng.omega, p[ng.neighbors])
    return (p + neigh) / (1.0 + w_sum)[:, None]


def threshold_labels(p: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Strict per-class comparison p > t_k."""
    t = np.asarray(thresholds, dtype=np.float64)
    if t.shape != (p.shape[1],):
        raise DecodeError(f"threshold shape {t.shape} for {p.shape[1]} classes")
    return np.asarray(p, dtype=np.float64) > t[None, :]


def gibbs_cap(
    labels: np.ndarray, p: np.ndarray, counts: np.ndarray
) -> np.ndarray:
    """Keep at most C_n labels per sample, ranked by probability.

    Ties rank the lower class index first. Never adds a label.
    """
    labels = np.asarray(labels, dtype=bool)
    p = np.asarray(p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    n, k = labels.shape
    score = np.where(labels, -p, np.inf)
    order = np.argsort(score, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(k)[None, :].repeat(n, 0), axis=1)
    return labels & (rank < counts[:, None])


def decode(
    p_raw: np.ndarray,
    x: np.ndarray,
    t_norm: np.ndarray,
    thresholds: np.ndarray,
    vocab: PhaseVocabulary,
    elements: ElementSet,
    cfg: DecodeConfig = DecodeConfig(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full projection. Returns (labels (N,K) bool, final probs, fallback flags).

    Operator order: prune_pure, smooth_probs, threshold, gibbs_cap. Unary
    corners end with exactly one admissible label; empty thresholded sets
    fall back to the highest-probability admissible phase and set the flag.
    """
    p_raw = np.asarray(p_raw, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    t_norm = np.asarray(t_norm, dtype=np.float64)
    if not (len(p_raw) == len(x) == len(t_norm)):
        raise DecodeError(
            f"length mismatch: p {len(p_raw)}, x {len(x)}, t {len(t_norm)}"
        )
    req = vocab.requirement_matrix(elements)
    counts = (x > cfg.eps_element).sum(axis=1)
    if np.any(counts == 0):
        raise DecodeError("sample with no element above threshold")

    p = p_raw
    if cfg.prune:
        p = prune_pure(p, x, req, cfg.generalize_support, cfg.eps_element)
    if cfg.smooth:
        p = smooth_probs(p, x, t_norm, cfg)
    labels = threshold_labels(p, thresholds)
    # smoothing can bleed neighbor mass back into pruned corner entries;
    # corners must still resolve to an admissible phase
    ok = _admissible(x, req, cfg.eps_element)
    corner_rows = counts == 1
    labels[corner_rows] &= ok[corner_rows]
    if cfg.cap:
        labels = gibbs_cap(labels, p, counts)
    else:
        # corners keep their one-label guarantee even with capping disabled
        corner = counts == 1
        if np.any(corner):
            labels[corner] = gibbs_cap(
                labels[corner], p[corner], counts[corner]
            )

    # corner samples and empty sets resolve to one admissible argmax label
    fallback = ~labels.any(axis=1)
    if np.any(fallback):
        masked = np.where(ok[fallback], p[fallback], -np.inf)
        best = masked.argmax(axis=1)
        rows = np.flatnonzero(fallback)
        labels[rows, :] = False
        labels[rows, best] = True
    return labels, p, fallback
