"""
Multiplex graph module
======================
Directed multiplex networks over one node set, stored as one edge word per
ordered pair.

Word convention: layer k (1-based) is bit k-1 of the word index, so with
K=2 the word order is (no edge, layer 1 only, layer 2 only, both layers).
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.config import MAX_LAYERS, MIN_NODES
from src.modules.result_store import write_text_atomic

logger = logging.getLogger(__name__)

LayerSource = Union[str, Path, np.ndarray]

_HEADER_RE = re.compile(r"^#\s*n\s*=\s*(\d+)\s+base\s*=\s*([01])\s*$")


class GraphFormatError(ValueError):
    pass


class GraphInputWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class MultiplexGraph:
    """Immutable n-node, K-layer directed binary graph."""

    words: np.ndarray
    K: int

    def __post_init__(self):
        words = np.asarray(self.words)
        if words.ndim != 2 or words.shape[0] != words.shape[1]:
            raise GraphFormatError(f"words must be a square matrix, got shape {words.shape}")
        if words.shape[0] < MIN_NODES:
            raise GraphFormatError(f"need at least {MIN_NODES} nodes, got {words.shape[0]}")
        if not 1 <= int(self.K) <= MAX_LAYERS:
            raise GraphFormatError(f"K must be in [1, {MAX_LAYERS}], got {self.K}")
        if not np.issubdtype(words.dtype, np.integer):
            if not np.all(np.equal(np.mod(words, 1), 0)):
                raise GraphFormatError("word indices must be integers")
        words = words.astype(np.int64)
        off = ~np.eye(words.shape[0], dtype=bool)
        bad = (words[off] < 0) | (words[off] >= 2 ** int(self.K))
        if bad.any():
            raise GraphFormatError(f"{int(bad.sum())} word indices outside [0, 2^{self.K})")

        dtype = np.uint8 if self.K <= 8 else np.uint16
        stored = words.astype(dtype)
        np.fill_diagonal(stored, 0)
        stored.setflags(write=False)
        object.__setattr__(self, "words", stored)
        object.__setattr__(self, "K", int(self.K))

    @property
    def n(self) -> int:
        return self.words.shape[0]

    @property
    def n_words(self) -> int:
        return 2 ** self.K

    @cached_property
    def offdiag(self) -> np.ndarray:
        mask = ~np.eye(self.n, dtype=bool)
        mask.setflags(write=False)
        return mask

    @cached_property
    def indicator_stack(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Present word indices and the matching 0/1 indicator matrices.

        stack[m][i, j] = 1 when word(i, j) == present[m] and i != j. Only words
        that actually occur are materialised, which keeps memory bounded for
        large K.
        """
        present = np.flatnonzero(word_counts(self))
        stack = np.empty((len(present), self.n, self.n), dtype=float)
        for idx, w in enumerate(present):
            stack[idx] = (self.words == w) & self.offdiag
        stack.setflags(write=False)
        return present, stack


@dataclass(frozen=True, eq=False)
class EdgeCovariates:
    """Real covariate vector of dimension d for every ordered pair."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2 and y.shape[0] == y.shape[1]:
            y = y[:, :, None]
        if y.ndim != 3 or y.shape[0] != y.shape[1]:
            raise GraphFormatError(f"covariates must have shape (n, n, d), got {y.shape}")
        off = ~np.eye(y.shape[0], dtype=bool)
        if not np.all(np.isfinite(y[off])):
            raise GraphFormatError("covariates must be finite for every ordered pair")
        y = y.copy()
        y[np.eye(y.shape[0], dtype=bool)] = 0.0
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.y.shape[2]

    @classmethod
    def empty(cls, n: int) -> "EdgeCovariates":
        return cls(np.zeros((n, n, 0)))

    def design_matrix(self) -> np.ndarray:
        """Rows [1, y_ij] for the off-diagonal pairs in row-major order."""
        off = ~np.eye(self.n, dtype=bool)
        rows = self.y[off]
        return np.hstack([np.ones((rows.shape[0], 1)), rows])


@dataclass
class LayerLoadReport:
    n: int
    self_loops_dropped: int = 0
    duplicate_edges: int = 0
    warnings: List[str] = field(default_factory=list)


def encode_word(layer_values: Sequence[int], K: Optional[int] = None) -> int:
    values = [int(v) for v in layer_values]
    if K is not None and len(values) != K:
        raise GraphFormatError(f"expected {K} layer values, got {len(values)}")
    if any(v not in (0, 1) for v in values):
        raise GraphFormatError(f"layer values must be 0/1, got {values}")
    return sum(v << k for k, v in enumerate(values))


def decode_word(word: int, K: int) -> Tuple[int, ...]:
    word = int(word)
    if not 0 <= word < 2 ** K:
        raise GraphFormatError(f"word {word} outside [0, 2^{K})")
    return tuple((word >> k) & 1 for k in range(K))


def word_bits(K: int) -> np.ndarray:
    """(2^K, K) table; row w is decode_word(w, K)."""
    w = np.arange(2 ** K)[:, None]
    return (w >> np.arange(K)[None, :]) & 1


def _check_layer(g: MultiplexGraph, k: int) -> None:
    if not 1 <= int(k) <= g.K:
        raise GraphFormatError(f"layer must be in [1, {g.K}], got {k}")


def layer_adjacency(g: MultiplexGraph, k: int) -> np.ndarray:
    _check_layer(g, k)
    adj = ((g.words.astype(np.int64) >> (k - 1)) & 1).astype(np.int64)
    np.fill_diagonal(adj, 0)
    return adj


def word_counts(g: MultiplexGraph) -> np.ndarray:
    return np.bincount(g.words[g.offdiag].astype(np.int64), minlength=g.n_words)


def degree_stats(g: MultiplexGraph, k: int) -> pd.DataFrame:
    adj = layer_adjacency(g, k)
    return pd.DataFrame(
        {
            "node": np.arange(g.n),
            "in_degree": adj.sum(axis=0),
            "out_degree": adj.sum(axis=1),
        }
    )


def permute_nodes(g: MultiplexGraph, perm: Sequence[int]) -> MultiplexGraph:
    """New graph whose node a is node perm[a] of g."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.n)):
        raise GraphFormatError("perm must be a permutation of range(n)")
    return MultiplexGraph(g.words[np.ix_(perm, perm)], g.K)


def _read_edge_list(path: Path, header: str) -> Tuple[int, int, np.ndarray]:
    match = _HEADER_RE.match(header.strip())
    if not match:
        raise GraphFormatError(f"{path}: bad header {header.strip()!r}, expected '# n=<int> base=<0|1>'")
    n, base = int(match.group(1)), int(match.group(2))
    try:
        edges = pd.read_csv(path, sep="\t", comment="#", header=None, names=["src", "dst"])
    except pd.errors.EmptyDataError:
        edges = pd.DataFrame(columns=["src", "dst"])
    if edges.isna().any().any():
        raise GraphFormatError(f"{path}: malformed edge rows")
    return n, base, edges[["src", "dst"]].to_numpy(dtype=np.int64).reshape(-1, 2)


def _read_layer(source: LayerSource, index: int, report: LayerLoadReport) -> Tuple[int, np.ndarray]:
    """Return (n, 0/1 adjacency) for one layer source."""
    if isinstance(source, np.ndarray):
        matrix = np.asarray(source)
        label = f"layer {index}"
    else:
        path = Path(source)
        label = str(path)
        if not path.exists():
            raise GraphFormatError(f"layer file not found: {path}")
        with path.open("r", encoding="utf-8") as f:
            first = f.readline()
        if first.lstrip().startswith("#"):
            n, base, edges = _read_edge_list(path, first)
            return n, _edges_to_adjacency(edges, n, base, label, report)
        matrix = pd.read_csv(path, header=None).to_numpy()

    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise GraphFormatError(f"{label}: adjacency matrix must be square, got {matrix.shape}")
    if not np.isin(matrix, (0, 1)).all():
        raise GraphFormatError(f"{label}: adjacency entries must be 0/1")
    adj = matrix.astype(np.int64)
    loops = int(np.trace(adj))
    if loops:
        report.self_loops_dropped += loops
        np.fill_diagonal(adj, 0)
    return adj.shape[0], adj


def _edges_to_adjacency(
    edges: np.ndarray, n: int, base: int, label: str, report: LayerLoadReport
) -> np.ndarray:
    edges = edges - base
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphFormatError(f"{label}: node index outside [{base}, {n - 1 + base}]")
    loops = edges[:, 0] == edges[:, 1]
    report.self_loops_dropped += int(loops.sum())
    edges = edges[~loops]
    unique = np.unique(edges, axis=0) if edges.size else edges
    report.duplicate_edges += len(edges) - len(unique)
    adj = np.zeros((n, n), dtype=np.int64)
    if unique.size:
        adj[unique[:, 0], unique[:, 1]] = 1
    return adj


def read_layers(
    layer_files: Sequence[LayerSource], n: Optional[int] = None
) -> Tuple[MultiplexGraph, LayerLoadReport]:
    """Load K layer sources into a graph, returning the load report alongside."""
    if not layer_files:
        raise GraphFormatError("at least one layer is required")
    if len(layer_files) > MAX_LAYERS:
        raise GraphFormatError(f"at most {MAX_LAYERS} layers are supported, got {len(layer_files)}")

    report = LayerLoadReport(n=n or 0)
    layers = []
    sizes = set()
    for idx, source in enumerate(layer_files, start=1):
        size, adj = _read_layer(source, idx, report)
        sizes.add(size)
        layers.append(adj)
    if n is not None:
        sizes.add(int(n))
    if len(sizes) != 1:
        raise GraphFormatError(f"inconsistent node counts across layers: {sorted(sizes)}")

    words = np.zeros_like(layers[0])
    for k, adj in enumerate(layers):
        words |= adj << k
    report.n = sizes.pop()

    if report.self_loops_dropped:
        report.warnings.append(f"dropped {report.self_loops_dropped} self-loops")
    if report.duplicate_edges:
        report.warnings.append(f"ignored {report.duplicate_edges} duplicate edges")
    for msg in report.warnings:
        warnings.warn(msg, GraphInputWarning, stacklevel=2)
        logger.warning(msg)

    return MultiplexGraph(words, len(layers)), report


def load_layers(layer_files: Sequence[LayerSource], n: Optional[int] = None) -> MultiplexGraph:
    graph, _ = read_layers(layer_files, n)
    return graph


def write_edge_list(g: MultiplexGraph, k: int, path: Union[str, Path], base: int = 0) -> str:
    adj = layer_adjacency(g, k)
    src, dst = np.nonzero(adj)
    lines = [f"# n={g.n} base={base}"]
    lines.extend(f"{s + base}\t{d + base}" for s, d in zip(src.tolist(), dst.tolist()))
    return write_text_atomic(path, "\n".join(lines) + "\n")


def load_covariates(path: Union[str, Path], n: int, base: int = 0) -> EdgeCovariates:
    """Read a `src dst y1 ... yd` table covering every ordered pair once."""
    path = Path(path)
    if not path.exists():
        raise GraphFormatError(f"covariate file not found: {path}")
    table = pd.read_csv(path, sep=r"\s+", float_precision="round_trip")
    if list(table.columns[:2]) != ["src", "dst"]:
        raise GraphFormatError(f"{path}: header must start with 'src dst'")
    src = table["src"].to_numpy(dtype=np.int64) - base
    dst = table["dst"].to_numpy(dtype=np.int64) - base
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
        raise GraphFormatError(f"{path}: node index outside [{base}, {n - 1 + base}]")
    values = table.iloc[:, 2:].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise GraphFormatError(f"{path}: covariates must be finite")

    y = np.zeros((n, n, values.shape[1]))
    seen = np.zeros((n, n), dtype=np.int64)
    np.add.at(seen, (src, dst), 1)
    y[src, dst] = values
    off = ~np.eye(n, dtype=bool)
    missing = int(((seen == 0) & off).sum())
    repeated = int((seen > 1).sum())
    if missing or repeated:
        raise GraphFormatError(f"{path}: {missing} ordered pairs missing, {repeated} repeated")
    return EdgeCovariates(y)


def write_covariates(cov: EdgeCovariates, path: Union[str, Path], base: int = 0) -> str:
    """Inverse of load_covariates: one `src dst y1 ... yd` row per ordered pair."""
    src, dst = np.nonzero(~np.eye(cov.n, dtype=bool))
    table = pd.DataFrame({"src": src + base, "dst": dst + base})
    for c in range(cov.d):
        table[f"y{c + 1}"] = cov.y[src, dst, c]
    content = table.to_csv(index=False, sep="\t", float_format="%.17g", lineterminator="\n")
    return write_text_atomic(path, content)
