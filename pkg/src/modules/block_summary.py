"""
Block summary module
====================
Describes a fitted partition in terms a reader can check:

- block sizes
- block x attribute cross-frequencies for categorical node attributes
- per-block quartiles (min, Q1, median, Q3, max) for numeric attributes
- per-block quartiles of in/out degree on every layer
- the block connection profile of the fitted parameters
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.config import INDEPENDENCE_TOL
from src.modules.graph import MultiplexGraph, degree_stats
from src.modules.model import BlockParameters, connection_profile

logger = logging.getLogger(__name__)

QUARTILES = {"min": 0.0, "q1": 0.25, "median": 0.5, "q3": 0.75, "max": 1.0}


def _quartile_table(df: pd.DataFrame, value: str) -> pd.DataFrame:
    grouped = df.groupby("block")[value]
    out = pd.DataFrame({name: grouped.quantile(q) for name, q in QUARTILES.items()})
    out.insert(0, "count", grouped.size())
    return out.reset_index()


class BlockSummaryModule:
    """Tables describing the MAP partition of one fit."""

    def __init__(
        self,
        g: MultiplexGraph,
        assignment: np.ndarray,
        theta: Optional[BlockParameters] = None,
        base: int = 0,
        independence_tol: float = INDEPENDENCE_TOL,
    ):
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (g.n,):
            raise ValueError(f"assignment must have length {g.n}, got shape {assignment.shape}")
        self.g = g
        self.assignment = assignment
        self.theta = theta
        self.base = base
        self.independence_tol = independence_tol
        self.unknown_nodes: List = []

    def block_sizes(self) -> pd.DataFrame:
        sizes = pd.Series(self.assignment).value_counts().sort_index()
        return pd.DataFrame({"block": sizes.index, "size": sizes.values, "share": sizes.values / self.g.n})

    def analyze(self, attributes: pd.DataFrame) -> pd.DataFrame:
        """
        Join node attributes (keyed by a `node` column in file numbering) to
        the MAP blocks. Rows whose node id is not a graph node are dropped and
        listed in `unknown_nodes`.
        """
        if "node" not in attributes.columns:
            raise ValueError("attribute table needs a 'node' column")
        df = attributes.copy()
        ids = pd.to_numeric(df["node"], errors="coerce")
        known = ids.notna() & (ids >= self.base) & (ids < self.g.n + self.base) & (ids % 1 == 0)
        self.unknown_nodes = df.loc[~known, "node"].tolist()
        if self.unknown_nodes:
            logger.warning("%d unknown node ids excluded: %s", len(self.unknown_nodes), self.unknown_nodes[:10])
        df = df.loc[known].copy()
        df["node"] = ids[known].astype(np.int64) - self.base
        df["block"] = self.assignment[df["node"].to_numpy()]
        return df

    def crosstabs(self, nodes: pd.DataFrame) -> Dict[str, pd.DataFrame]:
        out = {}
        for col in nodes.columns:
            if col in ("node", "block") or pd.api.types.is_numeric_dtype(nodes[col]):
                continue
            table = pd.crosstab(nodes["block"], nodes[col])
            table.columns = [str(c) for c in table.columns]
            out[col] = table.reset_index()
        return out

    def numeric_summaries(self, nodes: pd.DataFrame) -> Dict[str, pd.DataFrame]:
        out = {}
        for col in nodes.columns:
            if col in ("node", "block") or pd.api.types.is_bool_dtype(nodes[col]):
                continue
            if pd.api.types.is_numeric_dtype(nodes[col]):
                out[col] = _quartile_table(nodes, col)
        return out

    def degree_summary(self) -> pd.DataFrame:
        frames = []
        for k in range(1, self.g.K + 1):
            stats = degree_stats(self.g, k)
            stats["block"] = self.assignment
            for direction in ("in_degree", "out_degree"):
                table = _quartile_table(stats, direction)
                table.insert(1, "layer", k)
                table.insert(2, "direction", direction.split("_")[0])
                frames.append(table)
        return pd.concat(frames, ignore_index=True)

    def report(self, attributes: Optional[pd.DataFrame] = None) -> Dict[str, pd.DataFrame]:
        """Every summary table, keyed by its output name."""
        tables = {"block_sizes": self.block_sizes(), "degrees": self.degree_summary()}
        if self.theta is not None:
            tables["connection_profile"] = connection_profile(self.theta, self.independence_tol)
        if attributes is not None:
            nodes = self.analyze(attributes)
            for name, table in self.crosstabs(nodes).items():
                tables[f"crosstab_{name}"] = table
            for name, table in self.numeric_summaries(nodes).items():
                tables[f"numeric_{name}"] = table
        return tables
