"""Class-balanced focal data loss and the three physics penalties.

A training run combines the focal term with at most one penalty:

    L_total = L_data + lambda_q * L_q,   q in {gpr, smooth, pure}

Each loss returns its value together with the exact gradient with respect to
the probability matrix, so the network backward pass only needs the chain
through the sigmoid. Penalties are zero on admissible predictions: total
activation within the Gibbs cap, locally smooth probability fields, and
one-hot corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataio import Dataset, normalize_T_array

PROB_CLIP = 1e-12
PENALTIES = ("none", "gpr", "smooth", "pure")
KDTREE_CUTOVER = 4096


class LossConfigError(ValueError):
    """Raised when the loss configuration is inconsistent."""


@dataclass(frozen=True)
class LossConfig:
    beta: np.ndarray | None = None     # per-class weights; None = unweighted
    gamma_focal: float = 2.0
    q: str = "none"
    lambda_q: float = 0.0
    gamma_gpr: float = 2.0
    gamma_pure: float = 2.0
    sigma_x: float = 0.05
    sigma_t: float = 0.05
    k_nn: int = 8
    delta: float = 1e-8
    eps_element: float = 1e-6

    def __post_init__(self) -> None:
        if self.q not in PENALTIES:
            raise LossConfigError(
                f"penalty {self.q!r} not one of {PENALTIES}; "
                "penalties apply one at a time"
            )
        if self.gamma_focal < 0:
            raise LossConfigError("gamma_focal must be >= 0")
        if self.gamma_gpr < 1 or self.gamma_pure < 1:
            raise LossConfigError("penalty exponents must be >= 1")
        if self.beta is not None:
            b = np.asarray(self.beta, dtype=np.float64)
            if np.any(b <= 0):
                raise LossConfigError("beta weights must be positive")
            object.__setattr__(self, "beta", b)


def class_balance_weights(y: np.ndarray) -> np.ndarray:
    """Inverse positive-frequency weights, renormalized to mean 1."""
    n, k = y.shape
    pos = np.maximum(1.0, y.sum(axis=0))
    beta = n / (k * pos)
    return beta / beta.mean()


def focal_loss(
    p: np.ndarray, y: np.ndarray, beta: np.ndarray | None, gamma: float
) -> tuple[float, np.ndarray]:
    """Mean class-balanced focal loss and its gradient in p.

    Probabilities are clamped away from {0, 1} before the log; the gradient
    is zero at clamped entries.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise LossConfigError(f"shape mismatch {p.shape} vs {y.shape}")
    n, k = p.shape
    b = np.ones(k) if beta is None else np.asarray(beta, dtype=np.float64)
    p_true = np.where(y > 0.5, p, 1.0 - p)
    c = np.clip(p_true, PROB_CLIP, 1.0 - PROB_CLIP)
    log_c = np.log(c)
    one_minus = 1.0 - c
    loss = float(-(b * one_minus**gamma * log_c).sum() / n)
    if gamma == 0.0:
        focus_term = np.zeros_like(c)
    else:
        focus_term = gamma * one_minus ** (gamma - 1.0) * log_c
    d_c = (b / n) * (focus_term - one_minus**gamma / c)
    d_c = np.where(p_true == c, d_c, 0.0)
    grad = d_c * np.where(y > 0.5, 1.0, -1.0)
    return loss, grad


def gpr_loss(
    p: np.ndarray, counts: np.ndarray, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Hinge penalty on total activation above the element count."""
    p = np.asarray(p, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    n = len(p)
    excess = np.maximum(0.0, p.sum(axis=1) - counts)
    loss = float((excess**gamma).mean())
    active = excess > 0.0
    coef = np.zeros(n)
    coef[active] = gamma * excess[active] ** (gamma - 1.0) / n
    return loss, np.repeat(coef[:, None], p.shape[1], axis=1)


def pure_loss(
    p: np.ndarray, pure_mask: np.ndarray, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Hinge penalty pushing unary samples toward one-hot predictions.

    S - max(p) is zero exactly when all mass sits on a single class; argmax
    ties break toward the lowest class index.
    """
    p = np.asarray(p, dtype=np.float64)
    pure_mask = np.asarray(pure_mask, dtype=bool)
    grad = np.zeros_like(p)
    rows = np.flatnonzero(pure_mask)
    if len(rows) == 0:
        return 0.0, grad
    sub = p[rows]
    s = sub.sum(axis=1)
    arg = sub.argmax(axis=1)
    m = sub[np.arange(len(rows)), arg]
    excess = np.maximum(0.0, s - m)
    loss = float((excess**gamma).mean())
    active = excess > 0.0
    coef = np.zeros(len(rows))
    coef[active] = gamma * excess[active] ** (gamma - 1.0) / len(rows)
    g = np.repeat(coef[:, None], p.shape[1], axis=1)
    g[np.arange(len(rows)), arg] = 0.0
    grad[rows] = g
    return loss, grad


# -- neighbor graph ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    neighbors: np.ndarray    # (n, k) positions into the same point universe
    omega: np.ndarray        # (n, k) Gaussian weights in (0, 1]


def build_neighbor_graph_points(
    x: np.ndarray,
    t_norm: np.ndarray,
    sigma_x: float = 0.05,
    sigma_t: float = 0.05,
    k_nn: int = 8,
) -> NeighborGraph:
    """k nearest neighbors in scaled (composition, T) space.

    Distances use d^2 = |dx|^2 / sigma_x^2 + dT^2 / sigma_t^2 and ties break
    by sample index. Small sets use an exact chunked distance matrix; large
    sets switch to a k-d tree with oversampling, re-sorted so the tie rule
    still holds for all but exactly coincident far neighbors.
    """
    x = np.asarray(x, dtype=np.float64)
    t_norm = np.asarray(t_norm, dtype=np.float64)
    n = len(x)
    if n < k_nn + 1:
        raise LossConfigError(f"need at least {k_nn + 1} points, got {n}")
    u = np.concatenate([x / sigma_x, t_norm[:, None] / sigma_t], axis=1)
    if n <= KDTREE_CUTOVER:
        neighbors = np.empty((n, k_nn), dtype=np.int64)
        d2_out = np.empty((n, k_nn))
        sq = (u * u).sum(axis=1)
        chunk = max(1, int(4e7) // max(1, n))
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            d2 = sq[lo:hi, None] - 2.0 * (u[lo:hi] @ u.T) + sq[None, :]
            np.maximum(d2, 0.0, out=d2)
            for i in range(lo, hi):
                row = d2[i - lo]
                row[i] = np.inf
                order = np.argsort(row, kind="stable")[:k_nn]
                neighbors[i] = order
                d2_out[i] = row[order]
    else:
        tree = cKDTree(u)
        extra = min(n, k_nn + 1 + 8)
        dist, idx = tree.query(u, k=extra)
        dist = np.where(idx == np.arange(n)[:, None], np.inf, dist)
        order = np.lexsort((idx, np.round(dist, 12)), axis=-1)[:, :k_nn]
        neighbors = np.take_along_axis(idx, order, axis=1).astype(np.int64)
        d = np.take_along_axis(dist, order, axis=1)
        d2_out = d * d
    return NeighborGraph(neighbors=neighbors, omega=np.exp(-d2_out))


def build_neighbor_graph(
    ds: Dataset,
    sigma_x: float = 0.05,
    sigma_t: float = 0.05,
    k_nn: int = 8,
    split: str = "tr",
) -> tuple[NeighborGraph, np.ndarray]:
    """Neighbor graph over one split; returns (graph, dataset row indices)."""
    rows = ds.indices_of(split)
    t_norm, _ = normalize_T_array(ds.t_min, ds.t_max, ds.t[rows])
    graph = build_neighbor_graph_points(
        ds.x[rows], t_norm, sigma_x, sigma_t, k_nn
    )
    return graph, rows


def smooth_loss(
    p: np.ndarray,
    batch_pos: np.ndarray,
    ng: NeighborGraph,
    delta: float = 1e-8,
) -> tuple[float, np.ndarray, int]:
    """Neighborhood smoothness over in-batch k-NN pairs.

    p holds probabilities for the batch members; batch_pos gives each row's
    position in the neighbor graph's universe. Returns the pair count so
    callers can flag batches with no qualifying pairs (loss 0, gradient 0).
    """
    p = np.asarray(p, dtype=np.float64)
    batch_pos = np.asarray(batch_pos, dtype=np.int64)
    where = {int(pos): i for i, pos in enumerate(batch_pos)}
    num = 0.0
    den = 0.0
    pairs: list[tuple[int, int, float]] = []
    for i, pos in enumerate(batch_pos):
        for m, w in zip(ng.neighbors[pos], ng.omega[pos]):
            j = where.get(int(m))
            if j is None:
                continue
            diff = p[i] - p[j]
            num += w * float(diff @ diff)
            den += w
            pairs.append((i, j, float(w)))
    grad = np.zeros_like(p)
    if not pairs:
        return 0.0, grad, 0
    scale = den + delta
    loss = num / scale
    for i, j, w in pairs:
        g = (2.0 * w / scale) * (p[i] - p[j])
        grad[i] += g
        grad[j] -= g
    return float(loss), grad, len(pairs)


# -- combination ------------------------------------------------------------------


@dataclass
class LossAux:
    """Per-batch side inputs consumed by the active penalty."""
    counts: np.ndarray | None = None        # element counts, for gpr
    pure_mask: np.ndarray | None = None     # unary-sample flags, for pure
    ng: NeighborGraph | None = None         # neighbor graph, for smooth
    batch_pos: np.ndarray | None = None     # batch rows in ng's universe


def total_loss(
    cfg: LossConfig, p: np.ndarray, y: np.ndarray, aux: LossAux | None = None
) -> tuple[float, np.ndarray]:
    loss, grad = focal_loss(p, y, cfg.beta, cfg.gamma_focal)
    if cfg.q == "none" or cfg.lambda_q == 0.0:
        return loss, grad
    if aux is None:
        raise LossConfigError(f"penalty {cfg.q!r} needs aux inputs")
    if cfg.q == "gpr":
        if aux.counts is None:
            raise LossConfigError("gpr penalty needs element counts")
        lq, gq = gpr_loss(p, aux.counts, cfg.gamma_gpr)
    elif cfg.q == "pure":
        if aux.pure_mask is None:
            raise LossConfigError("pure penalty needs the unary mask")
        lq, gq = pure_loss(p, aux.pure_mask, cfg.gamma_pure)
    else:
        if aux.ng is None or aux.batch_pos is None:
            raise LossConfigError("smooth penalty needs the neighbor graph")
        lq, gq, _ = smooth_loss(p, aux.batch_pos, aux.ng, cfg.delta)
    return loss + cfg.lambda_q * lq, grad + cfg.lambda_q * gq
