"""Graph attention network over element graphs, with handwritten gradients.

Three stacked GATv2 attention layers (shared per-head weight applied to both
edge endpoints, LeakyReLU applied before the attention dot product), mean
pooling over nodes, temperature concatenation, and a two-layer MLP head with
sigmoid outputs. Forward passes record every intermediate needed for an
exact reverse sweep; no autodiff framework is involved, so the backward
functions here are the ground truth and are checked against central finite
differences in the test suite.

All tensors are float64 and batched: node features (B, n, d_in), attention
(B, heads, n, n), so one matmul per layer serves the whole batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.2
CHECKPOINT_MAGIC = "phaseforge-ckpt-v1"


class ModelError(ValueError):
    """Raised for malformed parameters, inputs, or checkpoints."""


@dataclass
class GATLayerParams:
    w: np.ndarray         # (heads, d_in, d_head)
    a: np.ndarray         # (heads, 2*d_head), split into source/target halves
    b: np.ndarray         # (heads, d_head)

    def __post_init__(self) -> None:
        heads, _, d_head = self.w.shape
        if self.a.shape != (heads, 2 * d_head) or self.b.shape != (heads, d_head):
            raise ModelError(
                f"layer tensor shapes disagree: w{self.w.shape} "
                f"a{self.a.shape} b{self.b.shape}"
            )

    @property
    def d_out(self) -> int:
        return self.w.shape[0] * self.w.shape[2]


@dataclass
class MLPParams:
    w1: np.ndarray        # (d_graph + 1, d_hidden)
    b1: np.ndarray
    w2: np.ndarray        # (d_hidden, n_out)
    b2: np.ndarray


@dataclass
class ModelParams:
    layers: tuple[GATLayerParams, ...]
    mlp: MLPParams
    dropout_p: float
    self_loops: bool = True

    def __post_init__(self) -> None:
        if not self.layers:
            raise ModelError("need at least one attention layer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelError(f"dropout_p {self.dropout_p} outside [0, 1)")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.w.shape[1]:
                raise ModelError("consecutive layer dims disagree")
        if self.mlp.w1.shape[0] != self.layers[-1].d_out + 1:
            raise ModelError("mlp input dim must be graph dim + 1")

    @property
    def d_in(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def n_out(self) -> int:
        return self.mlp.w2.shape[1]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, layer in enumerate(self.layers):
            items += [
                (f"layer{i}.w", layer.w),
                (f"layer{i}.a", layer.a),
                (f"layer{i}.b", layer.b),
            ]
        items += [
            ("mlp.w1", self.mlp.w1), ("mlp.b1", self.mlp.b1),
            ("mlp.w2", self.mlp.w2), ("mlp.b2", self.mlp.b2),
        ]
        return items


def init_params(
    rng: np.random.Generator,
    d_in: int = 9,
    n_layers: int = 3,
    n_heads: int = 4,
    d_head: int = 40,
    d_hidden: int = 160,
    n_out: int = 9,
    dropout_p: float = 0.05,
    self_loops: bool = True,
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    layers = []
    din = d_in
    for _ in range(n_layers):
        layers.append(GATLayerParams(
            w=glorot((n_heads, din, d_head), din, d_head),
            a=glorot((n_heads, 2 * d_head), 2 * d_head, 1),
            b=np.zeros((n_heads, d_head)),
        ))
        din = n_heads * d_head
    d_graph = din
    mlp = MLPParams(
        w1=glorot((d_graph + 1, d_hidden), d_graph + 1, d_hidden),
        b1=np.zeros(d_hidden),
        w2=glorot((d_hidden, n_out), d_hidden, n_out),
        b2=np.zeros(n_out),
    )
    return ModelParams(tuple(layers), mlp, dropout_p, self_loops)


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


@dataclass
class LayerTrace:
    x_in: np.ndarray      # (B, n, d_in)
    z: np.ndarray         # (B, h, n, d_head)
    lam: np.ndarray       # LeakyReLU(z)
    alpha: np.ndarray     # (B, h, n, n) attention, zero on non-edges
    out: np.ndarray       # (B, n, h*d_head) post-ELU


@dataclass
class ForwardTrace:
    layers: list[LayerTrace]
    g: np.ndarray          # (B, d_graph) pooled embedding
    z_mlp: np.ndarray      # (B, d_graph + 1) pooled + T column
    h_pre: np.ndarray      # (B, d_hidden) post-ReLU, pre-dropout
    drop_mask: np.ndarray | None
    h_drop: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    adj: np.ndarray
    mode: str


def attention_scores(
    layer: GATLayerParams, h: np.ndarray, adj: np.ndarray
) -> np.ndarray:
    """Per-head edge scores e_ij = a . LeakyReLU([W h_i || W h_j]).

    Returns (B, heads, n, n) with -inf on non-edges so a subsequent softmax
    over j sees only the neighborhood.
    """
    if not np.all(np.isfinite(h)):
        raise ModelError("non-finite node embeddings")
    d_head = layer.w.shape[2]
    z = np.einsum("bnd,hde->bhne", h, layer.w)
    lam = _leaky(z)
    u = np.einsum("bhne,he->bhn", lam, layer.a[:, :d_head])
    v = np.einsum("bhne,he->bhn", lam, layer.a[:, d_head:])
    e = u[:, :, :, None] + v[:, :, None, :]
    return np.where(adj[None, None, :, :], e, -np.inf)


def _layer_forward(
    layer: GATLayerParams, h: np.ndarray, adj: np.ndarray
) -> LayerTrace:
    d_head = layer.w.shape[2]
    z = np.einsum("bnd,hde->bhne", h, layer.w)
    lam = _leaky(z)
    u = np.einsum("bhne,he->bhn", lam, layer.a[:, :d_head])
    v = np.einsum("bhne,he->bhn", lam, layer.a[:, d_head:])
    e = u[:, :, :, None] + v[:, :, None, :]
    e = np.where(adj[None, None, :, :], e, -np.inf)
    e_max = e.max(axis=3, keepdims=True)
    ex = np.exp(e - e_max)
    ex = np.where(adj[None, None, :, :], ex, 0.0)
    alpha = ex / ex.sum(axis=3, keepdims=True)
    m = np.einsum("bhij,bhje->bhie", alpha, z) + layer.b[None, :, None, :]
    batch, heads, n, _ = m.shape
    concat = m.transpose(0, 2, 1, 3).reshape(batch, n, heads * d_head)
    out = _elu(concat)
    if not np.all(np.isfinite(out)):
        raise ModelError("non-finite layer output")
    return LayerTrace(x_in=h, z=z, lam=lam, alpha=alpha, out=out)


def layer_forward(
    layer: GATLayerParams, h: np.ndarray, adj: np.ndarray
) -> np.ndarray:
    """Public single-layer application, (B, n, d_in) -> (B, n, d_out)."""
    if not np.all(np.isfinite(h)):
        raise ModelError("non-finite node embeddings")
    return _layer_forward(layer, h, adj).out


def forward(
    params: ModelParams,
    feats: np.ndarray,
    t_norm: np.ndarray,
    adj: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Batched forward pass. Returns probabilities (B, n_out) and the trace.

    Train mode applies inverted dropout to the MLP hidden layer and needs an
    explicit RNG; eval mode is deterministic.
    """
    feats = np.asarray(feats, dtype=np.float64)
    t_norm = np.asarray(t_norm, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[2] != params.d_in:
        raise ModelError(f"feature shape {feats.shape}, d_in={params.d_in}")
    if not np.all(np.isfinite(feats)):
        raise ModelError("non-finite input features")
    if mode not in ("train", "eval"):
        raise ModelError(f"unknown mode {mode!r}")
    if mode == "train" and params.dropout_p > 0.0 and rng is None:
        raise ModelError("train mode with dropout needs an RNG")

    h = feats
    traces = []
    for i, layer in enumerate(params.layers):
        try:
            tr = _layer_forward(layer, h, adj)
        except ModelError as exc:
            raise ModelError(f"layer {i}: {exc}") from None
        traces.append(tr)
        h = tr.out

    g = h.mean(axis=1)
    z_mlp = np.concatenate([g, t_norm[:, None]], axis=1)
    h_lin = z_mlp @ params.mlp.w1 + params.mlp.b1
    h_pre = np.maximum(h_lin, 0.0)
    if mode == "train" and params.dropout_p > 0.0:
        keep = 1.0 - params.dropout_p
        drop_mask = (rng.random(h_pre.shape) < keep) / keep
        h_drop = h_pre * drop_mask
    else:
        drop_mask = None
        h_drop = h_pre
    logits = h_drop @ params.mlp.w2 + params.mlp.b2
    if not np.all(np.isfinite(logits)):
        raise ModelError("non-finite logits")
    probs = 1.0 / (1.0 + np.exp(-logits))
    trace = ForwardTrace(
        layers=traces, g=g, z_mlp=z_mlp, h_pre=h_pre, drop_mask=drop_mask,
        h_drop=h_drop, logits=logits, probs=probs, adj=adj, mode=mode,
    )
    return probs, trace


def _layer_backward(
    layer: GATLayerParams, tr: LayerTrace, d_out: np.ndarray, adj: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of one attention layer given d(post-ELU output)."""
    batch, n, _ = d_out.shape
    heads, _, d_head = layer.w.shape
    # ELU'(x) recovered from the stored output: 1 where positive, y+1 below
    elu_grad = np.where(tr.out > 0.0, 1.0, tr.out + 1.0)
    d_concat = d_out * elu_grad
    d_m = d_concat.reshape(batch, n, heads, d_head).transpose(0, 2, 1, 3)

    d_b = d_m.sum(axis=(0, 2))
    # value path: m_i = sum_j alpha_ij z_j
    d_alpha = np.einsum("bhie,bhje->bhij", d_m, tr.z)
    d_z = np.einsum("bhij,bhie->bhje", tr.alpha, d_m)
    # softmax over j: ds = alpha * (d_alpha - sum_j alpha*d_alpha)
    inner = (tr.alpha * d_alpha).sum(axis=3, keepdims=True)
    d_e = tr.alpha * (d_alpha - inner)
    d_u = d_e.sum(axis=3)
    d_v = d_e.sum(axis=2)
    a_src, a_dst = layer.a[:, :d_head], layer.a[:, d_head:]
    d_lam = (
        d_u[:, :, :, None] * a_src[None, :, None, :]
        + d_v[:, :, :, None] * a_dst[None, :, None, :]
    )
    d_a_src = np.einsum("bhn,bhne->he", d_u, tr.lam)
    d_a_dst = np.einsum("bhn,bhne->he", d_v, tr.lam)
    leaky_grad = np.where(tr.z >= 0.0, 1.0, LEAKY_SLOPE)
    d_z = d_z + d_lam * leaky_grad
    d_w = np.einsum("bnd,bhne->hde", tr.x_in, d_z)
    d_x = np.einsum("bhne,hde->bnd", d_z, layer.w)
    grads = {
        "w": d_w,
        "a": np.concatenate([d_a_src, d_a_dst], axis=1),
        "b": d_b,
    }
    return grads, d_x


def backward(
    params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of sum(logits * grad_logits) w.r.t. every parameter.

    Callers working in probability space fold sigmoid' into grad_logits
    first (dL/dlogit = dL/dp * p * (1 - p)).
    """
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != trace.logits.shape:
        raise ModelError(
            f"grad shape {grad_logits.shape} != logits {trace.logits.shape}"
        )
    grads: dict[str, np.ndarray] = {}
    grads["mlp.w2"] = trace.h_drop.T @ grad_logits
    grads["mlp.b2"] = grad_logits.sum(axis=0)
    d_h_drop = grad_logits @ params.mlp.w2.T
    if trace.drop_mask is not None:
        d_h_pre = d_h_drop * trace.drop_mask
    else:
        d_h_pre = d_h_drop
    d_h_lin = d_h_pre * (trace.h_pre > 0.0)
    grads["mlp.w1"] = trace.z_mlp.T @ d_h_lin
    grads["mlp.b1"] = d_h_lin.sum(axis=0)
    d_z_mlp = d_h_lin @ params.mlp.w1.T
    d_g = d_z_mlp[:, :-1]

    n_nodes = trace.layers[-1].out.shape[1]
    d_h = np.repeat(d_g[:, None, :], n_nodes, axis=1) / n_nodes
    for i in range(len(params.layers) - 1, -1, -1):
        layer_grads, d_h = _layer_backward(
            params.layers[i], trace.layers[i], d_h, trace.adj
        )
        for key, val in layer_grads.items():
            grads[f"layer{i}.{key}"] = val
    return grads


# -- checkpoint serialization ------------------------------------------------------


def save_checkpoint(
    params: ModelParams, meta: dict, path: str | Path
) -> None:
    """Versioned binary checkpoint: magic line, JSON manifest, raw tensors.

    Tensors are written row-major as little-endian float64 in manifest
    order, so identical parameters always produce identical bytes.
    """
    path = Path(path)
    items = params.tensor_items()
    manifest = {
        "tensors": [[name, list(arr.shape)] for name, arr in items],
        "dropout_p": params.dropout_p,
        "self_loops": params.self_loops,
        "meta": meta,
    }
    blob = bytearray()
    blob += (CHECKPOINT_MAGIC + "\n").encode("ascii")
    blob += (json.dumps(manifest, sort_keys=True, separators=(",", ":"))
             + "\n").encode("utf-8")
    for _, arr in items:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    raw = path.read_bytes()
    nl1 = raw.find(b"\n")
    if nl1 < 0 or raw[:nl1].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    nl2 = raw.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise ModelError(f"{path}: truncated manifest")
    manifest = json.loads(raw[nl1 + 1:nl2].decode("utf-8"))
    offset = nl2 + 1
    tensors: dict[str, np.ndarray] = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ModelError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(
            raw[offset:end], dtype="<f8"
        ).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ModelError(f"{path}: {len(raw) - offset} trailing bytes")

    n_layers = sum(1 for name, _ in manifest["tensors"]
                   if name.endswith(".w") and name.startswith("layer"))
    layers = tuple(
        GATLayerParams(
            w=tensors[f"layer{i}.w"],
            a=tensors[f"layer{i}.a"],
            b=tensors[f"layer{i}.b"],
        )
        for i in range(n_layers)
    )
    mlp = MLPParams(
        w1=tensors["mlp.w1"], b1=tensors["mlp.b1"],
        w2=tensors["mlp.w2"], b2=tensors["mlp.b2"],
    )
    params = ModelParams(
        layers, mlp, manifest["dropout_p"], manifest["self_loops"]
    )
    return params, manifest["meta"]
