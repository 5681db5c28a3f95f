"""Element-graph construction: composition plus z-scored atomic descriptors.

Every state point becomes a small fully connected directed graph with one
node per element. A node's feature row is its mole fraction followed by
eight standardized atomic properties; temperature enters later as a single
global scalar, so the node features of two samples differ only in the
fraction column.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetFormatError, ElementSet, StatePoint, normalize_T_array

PROPERTY_NAMES = (
    "T_melt", "T_b", "rho", "r_atom", "M", "r_cov", "chi", "IE1",
)

N_PROPERTIES = len(PROPERTY_NAMES)
NODE_FEATURE_DIM = 1 + N_PROPERTIES


class PropertyTableError(ValueError):
    """Raised for malformed or degenerate element-property tables."""


@dataclass(frozen=True, eq=False)
class ElementProperties:
    elements: ElementSet
    table: np.ndarray            # (n_elements, 8), row order matches elements

    def __post_init__(self) -> None:
        t = np.asarray(self.table, dtype=np.float64)
        if t.shape != (self.elements.size, N_PROPERTIES):
            raise PropertyTableError(
                f"property table shape {t.shape}, expected "
                f"({self.elements.size}, {N_PROPERTIES})"
            )
        if not np.all(np.isfinite(t)) or np.any(t <= 0.0):
            raise PropertyTableError("properties must be finite and positive")
        object.__setattr__(self, "table", t)


def load_properties(
    path: str | Path, elements: ElementSet
) -> ElementProperties:
    """Read the whitespace property file and align rows to element order."""
    path = Path(path)
    rows: dict[str, list[float]] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 1 + N_PROPERTIES:
            raise PropertyTableError(
                f"{path}:{lineno}: expected symbol plus {N_PROPERTIES} values"
            )
        try:
            rows[tokens[0]] = [float(v) for v in tokens[1:]]
        except ValueError as exc:
            raise PropertyTableError(f"{path}:{lineno}: {exc}") from None
    missing = [sym for sym in elements.names if sym not in rows]
    if missing:
        raise PropertyTableError(f"{path}: no property row for {missing}")
    table = np.array([rows[sym] for sym in elements.names])
    return ElementProperties(elements, table)


def zscore_properties(props: ElementProperties) -> np.ndarray:
    """Standardize each property column across the element set.

    Population standard deviation (ddof 0): with only a handful of elements
    the sample/population distinction matters and the population form keeps
    unit variance exact.
    """
    t = props.table
    mu = t.mean(axis=0)
    sigma = t.std(axis=0)
    dead = sigma < 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(dead):
        names = [PROPERTY_NAMES[i] for i in np.flatnonzero(dead)]
        raise PropertyTableError(f"zero-variance properties: {names}")
    return (t - mu) / sigma


def edge_list(n_nodes: int, self_loops: bool = True) -> tuple[tuple[int, int], ...]:
    return tuple(
        (i, j)
        for i in range(n_nodes)
        for j in range(n_nodes)
        if self_loops or i != j
    )


def adjacency(n_nodes: int, self_loops: bool = True) -> np.ndarray:
    adj = np.ones((n_nodes, n_nodes), dtype=bool)
    if not self_loops:
        np.fill_diagonal(adj, False)
    return adj


@dataclass(frozen=True, eq=False)
class ElementGraph:
    x: np.ndarray                          # (n_nodes, 9) node features
    edges: tuple[tuple[int, int], ...]
    t_norm: float
    t_clamped: bool = False


class FeatureBuilder:
    """Shares one z-scored table across all graphs of a run."""

    def __init__(
        self,
        props: ElementProperties,
        t_min: float,
        t_max: float,
        self_loops: bool = True,
    ) -> None:
        self.props = props
        self.z = zscore_properties(props)
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.self_loops = self_loops
        self.edges = edge_list(props.elements.size, self_loops)
        self.adj = adjacency(props.elements.size, self_loops)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Node feature tensor for compositions (n, C) -> (n, C, 9)."""
        x = np.asarray(x, dtype=np.float64)
        n, c = x.shape
        if c != self.props.elements.size:
            raise DatasetFormatError(
                f"composition width {c} != element count {self.props.elements.size}"
            )
        feats = np.empty((n, c, NODE_FEATURE_DIM))
        feats[:, :, 0] = x
        feats[:, :, 1:] = self.z[None, :, :]
        return feats

    def graphs(
        self, x: np.ndarray, t: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features, normalized T, and clamp flags for a batch."""
        t_norm, clamped = normalize_T_array(self.t_min, self.t_max, np.asarray(t))
        return self.features(x), t_norm, clamped

    def graph(self, q: StatePoint) -> ElementGraph:
        feats, t_norm, clamped = self.graphs(
            np.asarray(q.x)[None, :], np.array([q.t])
        )
        return ElementGraph(
            feats[0], self.edges, float(t_norm[0]), bool(clamped[0])
        )


def build_graph(
    q: StatePoint,
    props: ElementProperties,
    t_range: tuple[float, float],
    self_loops: bool = True,
) -> ElementGraph:
    return FeatureBuilder(props, t_range[0], t_range[1], self_loops).graph(q)
