"""Training loop: adaptive moments with decoupled decay, cosine schedule,
early stopping on validation Macro-F1, threshold tuning, and small search
utilities.

Determinism is the ruling constraint. Every random draw (init, shuffling,
dropout) comes from a seed-derived stream keyed by purpose and epoch, so a
(dataset, config, seed) triple reproduces the checkpoint bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Dataset, count_present_elements
from .elemgraph import ElementProperties, FeatureBuilder
from .evaluation import f1_per_class
from .gatcore import (
    GATLayerParams,
    MLPParams,
    ModelParams,
    backward,
    forward,
    init_params,
)
from .losses import (
    LossAux,
    LossConfig,
    build_neighbor_graph,
    class_balance_weights,
    total_loss,
)

OPT_BETA1 = 0.9
OPT_BETA2 = 0.999
OPT_EPS = 1e-8
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
LAMBDA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 10))


class TrainError(RuntimeError):
    """Raised for invalid training configuration."""


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 160
    batch_size: int = 32
    lr: float = 1e-3
    dropout: float = 0.05
    weight_decay: float = 6e-4
    max_epochs: int = 100
    patience: int = 15
    n_layers: int = 3
    n_heads: int = 4
    d_head: int = 40
    self_loops: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.hidden_dim != self.n_heads * self.d_head:
            raise TrainError(
                f"hidden_dim {self.hidden_dim} != "
                f"{self.n_heads} heads x {self.d_head}"
            )
        for name in ("hidden_dim", "batch_size", "lr", "max_epochs",
                     "n_layers", "n_heads", "d_head"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainError(f"dropout {self.dropout} outside [0, 1)")
        if self.weight_decay < 0 or self.patience < 0:
            raise TrainError("weight_decay and patience must be >= 0")


@dataclass
class RunRecord:
    train_loss: np.ndarray
    val_f1: np.ndarray
    lr: np.ndarray
    best_epoch: int
    best_val_f1: float
    thresholds: np.ndarray
    threshold_flagged: np.ndarray
    diverged: bool
    n_skipped_steps: int

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)

    def history_csv(self) -> str:
        rows = ["epoch,lr,train_loss,val_macro_f1"]
        for e in range(self.n_epochs):
            rows.append(
                f"{e},{self.lr[e]:.12g},{self.train_loss[e]:.12g},"
                f"{self.val_f1[e]:.12g}"
            )
        return "\n".join(rows) + "\n"


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(t) for name, t in params.tensor_items()},
        v={name: np.zeros_like(t) for name, t in params.tensor_items()},
    )


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr_t: float,
    weight_decay: float,
) -> bool:
    """One in-place update. Returns True when the step was skipped because
    a gradient was non-finite (parameters and moments stay untouched)."""
    items = params.tensor_items()
    for name, _ in items:
        if not np.all(np.isfinite(grads[name])):
            return True
    state.step += 1
    bc1 = 1.0 - OPT_BETA1 ** state.step
    bc2 = 1.0 - OPT_BETA2 ** state.step
    for name, p in items:
        g = grads[name]
        # decay is decoupled: shrink first, moments never see it
        p *= 1.0 - lr_t * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= OPT_BETA1
        m += (1.0 - OPT_BETA1) * g
        v *= OPT_BETA2
        v += (1.0 - OPT_BETA2) * g * g
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + OPT_EPS)
    return False


def cosine_lr(epoch: int, max_epochs: int, lr0: float) -> float:
    """Single half-cosine from lr0 down to 0, no restarts."""
    if not 0 <= epoch < max_epochs:
        raise TrainError(f"epoch {epoch} outside [0, {max_epochs})")
    if max_epochs == 1:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * epoch / (max_epochs - 1))) / 2.0


# -- threshold tuning --------------------------------------------------------------


def tune_thresholds(
    probs: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class grid search maximizing validation F1.

    Per-class maximization decomposes Macro-F1 exactly because thresholds
    act independently. Ties resolve to the lower threshold; a class with no
    validation positives gets 0.5 and a flag.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    n, k = probs.shape
    grid = np.asarray(THRESHOLD_GRID)
    f1_table = np.empty((len(grid), k))
    pos = y.sum(axis=0)
    for i, t in enumerate(grid):
        pred = probs > t
        tp = (pred & y).sum(axis=0)
        fp = (pred & ~y).sum(axis=0)
        fn = (~pred & y).sum(axis=0)
        denom = 2 * tp + fp + fn
        f1_table[i] = np.where(denom == 0, 1.0, 2.0 * tp / np.maximum(denom, 1))
    best = f1_table.argmax(axis=0)  # first max = lowest threshold
    thresholds = grid[best]
    flagged = pos == 0
    thresholds = np.where(flagged, 0.5, thresholds)
    return thresholds, flagged


# -- training ---------------------------------------------------------------------


def _clone_params(params: ModelParams) -> ModelParams:
    layers = [
        GATLayerParams(l.w.copy(), l.a.copy(), l.b.copy())
        for l in params.layers
    ]
    mlp = MLPParams(
        params.mlp.w1.copy(), params.mlp.b1.copy(),
        params.mlp.w2.copy(), params.mlp.b2.copy(),
    )
    return ModelParams(layers, mlp, params.dropout_p, params.self_loops)


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    )


def _macro_f1_at(probs: np.ndarray, y: np.ndarray, t: float = 0.5) -> float:
    return float(f1_per_class(probs > t, y).f1.mean())


def train_one(
    ds: Dataset,
    props: ElementProperties,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ModelParams, RunRecord]:
    """Train one seed to convergence and return the best-validation params.

    The returned parameters are the checkpoint of the epoch with the highest
    validation Macro-F1 at threshold 0.5; thresholds are then tuned on that
    model's validation probabilities.
    """
    tr_rows = ds.indices_of("tr")
    va_rows = ds.indices_of("va")
    if len(tr_rows) == 0 or len(va_rows) == 0:
        raise TrainError(
            f"need non-empty tr and va splits, got {len(tr_rows)}/{len(va_rows)}"
        )
    y = ds.label_matrix()
    y_tr = y[tr_rows] > 0.5
    y_va = y[va_rows] > 0.5

    loss_cfg = cfg.loss
    if loss_cfg.beta is None:
        loss_cfg = replace(loss_cfg, beta=class_balance_weights(y[tr_rows]))

    builder = FeatureBuilder(props, ds.t_min, ds.t_max, cfg.self_loops)
    feats_tr, tn_tr, _ = builder.graphs(ds.x[tr_rows], ds.t[tr_rows])
    feats_va, tn_va, _ = builder.graphs(ds.x[va_rows], ds.t[va_rows])
    adj = builder.adj

    ng = None
    if loss_cfg.q == "smooth" and loss_cfg.lambda_q > 0.0:
        ng, _ = build_neighbor_graph(
            ds, loss_cfg.sigma_x, loss_cfg.sigma_t, loss_cfg.k_nn, "tr"
        )
    counts_tr = count_present_elements(ds.x[tr_rows], loss_cfg.eps_element)

    params = init_params(
        _rng_for(seed, 0),
        d_in=feats_tr.shape[2],
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_head=cfg.d_head,
        d_hidden=cfg.hidden_dim,
        n_out=ds.phases.size,
        dropout_p=cfg.dropout,
        self_loops=cfg.self_loops,
    )
    state = init_adam_state(params)

    n_tr = len(tr_rows)
    hist_loss: list[float] = []
    hist_f1: list[float] = []
    hist_lr: list[float] = []
    best_f1 = -np.inf
    best_epoch = -1
    best_params = _clone_params(params)
    bad = 0
    diverged = False
    n_skipped = 0

    for epoch in range(cfg.max_epochs):
        lr_t = cosine_lr(epoch, cfg.max_epochs, cfg.lr)
        perm = _rng_for(seed, 1, epoch).permutation(n_tr)
        drop_rng = _rng_for(seed, 2, epoch)
        batch_losses: list[float] = []
        for lo in range(0, n_tr, cfg.batch_size):
            pos = perm[lo : lo + cfg.batch_size]
            probs, trace = forward(
                params, feats_tr[pos], tn_tr[pos], adj,
                mode="train", rng=drop_rng,
            )
            aux = LossAux(
                counts=counts_tr[pos],
                pure_mask=counts_tr[pos] == 1,
                ng=ng,
                batch_pos=pos,
            )
            loss, grad_p = total_loss(loss_cfg, probs, y_tr[pos], aux)
            if not np.isfinite(loss):
                diverged = True
                break
            grad_logits = grad_p * probs * (1.0 - probs)
            grads = backward(params, trace, grad_logits)
            if optimizer_step(params, grads, state, lr_t, cfg.weight_decay):
                n_skipped += 1
            batch_losses.append(loss)
        if diverged:
            break

        probs_va, _ = forward(params, feats_va, tn_va, adj)
        val_f1 = _macro_f1_at(probs_va, y_va)
        hist_loss.append(float(np.mean(batch_losses)))
        hist_f1.append(val_f1)
        hist_lr.append(lr_t)

        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = _clone_params(params)
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break

    probs_va, _ = forward(best_params, feats_va, tn_va, adj)
    thresholds, flagged = tune_thresholds(probs_va, y_va)
    record = RunRecord(
        train_loss=np.asarray(hist_loss),
        val_f1=np.asarray(hist_f1),
        lr=np.asarray(hist_lr),
        best_epoch=best_epoch,
        best_val_f1=float(best_f1) if best_epoch >= 0 else float("nan"),
        thresholds=thresholds,
        threshold_flagged=flagged,
        diverged=diverged,
        n_skipped_steps=n_skipped,
    )
    return best_params, record


# -- searches ---------------------------------------------------------------------


def random_search(
    ds: Dataset,
    props: ElementProperties,
    budget: int,
    seed: int,
    base: TrainConfig = TrainConfig(),
    epochs: int = 15,
    lr_range: tuple[float, float] = (1e-4, 1e-2),
    wd_range: tuple[float, float] = (1e-5, 1e-2),
    dropout_range: tuple[float, float] = (0.0, 0.1),
) -> tuple[TrainConfig, list[tuple[float, float, float, float]]]:
    """Seeded random hyperparameter search; lr and decay sample log-uniform.

    Every candidate trains with the same data seed so scores are comparable.
    Returns the winning config (full epochs restored) and the trial table
    (lr, weight_decay, dropout, val_macro_f1).
    """
    if budget < 1:
        raise TrainError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    rows: list[tuple[float, float, float, float]] = []
    best_idx = -1
    best_f1 = -np.inf
    configs: list[TrainConfig] = []
    for _ in range(budget):
        lr = float(np.exp(rng.uniform(*np.log(lr_range))))
        wd = float(np.exp(rng.uniform(*np.log(wd_range))))
        dropout = float(rng.uniform(*dropout_range))
        cand = replace(
            base, lr=lr, weight_decay=wd, dropout=dropout, max_epochs=epochs
        )
        configs.append(cand)
        _, rec = train_one(ds, props, cand, seed)
        rows.append((lr, wd, dropout, rec.best_val_f1))
        if rec.best_val_f1 > best_f1:
            best_f1 = rec.best_val_f1
            best_idx = len(rows) - 1
    winner = replace(configs[best_idx], max_epochs=base.max_epochs)
    return winner, rows


def lambda_sweep(
    ds: Dataset,
    props: ElementProperties,
    q: str,
    lambdas: tuple[float, ...] = LAMBDA_GRID,
    seed: int = 0,
    epochs: int = 20,
    base: TrainConfig = TrainConfig(),
) -> list[tuple[float, float]]:
    """Validation Macro-F1 per penalty weight, each at exactly `epochs`
    epochs (early stopping disabled) with a fixed seed."""
    rows: list[tuple[float, float]] = []
    for lam in lambdas:
        cfg = replace(
            base,
            max_epochs=epochs,
            patience=epochs,  # never triggers within the window
            loss=replace(base.loss, q=q, lambda_q=float(lam)),
        )
        _, rec = train_one(ds, props, cfg, seed)
        rows.append((float(lam), rec.best_val_f1))
    return rows
