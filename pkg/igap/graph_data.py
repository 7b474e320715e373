"""
Graph data model, Laplacian construction, subgraph extraction and file I/O.

Graph text format (UTF-8):
    line 1: ``N M F d`` (nodes, edges, feature dim, class count; d=0 if unlabeled)
    next M lines: ``u v`` (0-based endpoints, u<v)
    next N lines: F whitespace-separated signal values
    next N lines (iff d>0): one integer label per node, -1 for unlabeled
"""

import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np
import scipy.sparse as sp

from . import errors
from .const import UNLABELED

logger = logging.getLogger(__name__)

GRAPHSET_INDEX = "index.tsv"


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Undirected attributed graph. Immutable after construction.

    ``parent_ids`` records, for subgraphs, the node id each row had in the graph
    it was extracted from; it does not take part in equality.
    """

    n_nodes: int
    edges: np.ndarray
    signals: np.ndarray
    node_labels: np.ndarray | None = None
    n_classes: int = 0
    parent_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        signals = np.array(self.signals, dtype=np.float64)
        if signals.ndim == 1:
            signals = signals.reshape(-1, 1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "signals", signals)
        if self.node_labels is not None:
            labels = np.array(self.node_labels, dtype=np.int64)
            object.__setattr__(self, "node_labels", labels)
            if self.n_classes == 0 and labels.size and labels.max() >= 0:
                object.__setattr__(self, "n_classes", int(labels.max()) + 1)
        for arr in (self.edges, self.signals, self.node_labels, self.parent_ids):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_edges(self):
        return int(self.edges.shape[0])

    @property
    def n_features(self):
        return int(self.signals.shape[1])

    @property
    def is_labeled(self):
        return self.node_labels is not None and self.n_classes > 0

    @cached_property
    def adjacency(self):
        """Symmetric CSR adjacency matrix."""
        n = self.n_nodes
        if self.n_edges == 0:
            return sp.csr_matrix((n, n), dtype=np.float64)
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.shape[0], dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def degrees(self):
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @cached_property
    def edge_set(self):
        return frozenset((int(min(u, v)), int(max(u, v))) for u, v in self.edges)

    def to_networkx(self):
        G = nx.Graph()
        G.add_nodes_from(range(self.n_nodes))
        G.add_edges_from(map(tuple, self.edges.tolist()))
        return G

    def with_signals(self, signals):
        return Graph(self.n_nodes, self.edges, signals, self.node_labels, self.n_classes, self.parent_ids)

    def with_edges(self, edges):
        return Graph(self.n_nodes, edges, self.signals, self.node_labels, self.n_classes, self.parent_ids)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.n_nodes, self.n_classes) != (other.n_nodes, other.n_classes):
            return False
        if self.edges.shape != other.edges.shape or not np.array_equal(self.edges, other.edges):
            return False
        if self.signals.shape != other.signals.shape or not np.array_equal(self.signals, other.signals):
            return False
        if (self.node_labels is None) != (other.node_labels is None):
            return False
        return self.node_labels is None or np.array_equal(self.node_labels, other.node_labels)

    __hash__ = None


@dataclass(frozen=True)
class GraphSet:
    """Ordered collection of graphs sharing one signal dimension."""

    graphs: list
    graph_labels: np.ndarray | None = None

    def __post_init__(self):
        dims = {g.n_features for g in self.graphs}
        if len(dims) > 1:
            raise errors.InvalidGraph(f"graphs in a set must share signal dimension, got {sorted(dims)}")
        if self.graph_labels is not None:
            labels = np.asarray(self.graph_labels)
            if labels.ndim == 1:
                labels = labels.reshape(-1, 1)
            if labels.shape[0] != len(self.graphs):
                raise errors.InvalidGraph(f"{labels.shape[0]} label rows for {len(self.graphs)} graphs")
            object.__setattr__(self, "graph_labels", labels)

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    @property
    def n_features(self):
        return self.graphs[0].n_features if self.graphs else 0


@dataclass(frozen=True)
class Laplacian:
    """Sparse symmetric Laplacian ``L = D - A`` (or its symmetric normalization)."""

    n: int
    entries: sp.csr_matrix
    normalized: bool = False

    def toarray(self):
        return self.entries.toarray()

    def matvec(self, x):
        return self.entries @ x


def validate_graph(g):
    """
    Check a graph against its invariants.

    Args:
        g: Graph to check

    Returns:
        List of violation messages; empty when the graph is valid
    """
    report = []
    seen = set()
    for idx, (u, v) in enumerate(g.edges.tolist()):
        if u == v:
            report.append(f"edge {idx}: self-loop ({u},{v})")
        if not (0 <= u < g.n_nodes and 0 <= v < g.n_nodes):
            report.append(f"edge {idx}: endpoint out of range ({u},{v}) for {g.n_nodes} nodes")
        key = (min(u, v), max(u, v))
        if key in seen:
            report.append(f"edge {idx}: duplicate edge {key}")
        seen.add(key)
    if g.signals.shape[0] != g.n_nodes:
        report.append(f"signals have {g.signals.shape[0]} rows for {g.n_nodes} nodes")
    if not np.all(np.isfinite(g.signals)):
        report.append("signals contain non-finite values")
    if g.node_labels is not None:
        if g.node_labels.shape[0] != g.n_nodes:
            report.append(f"labels have {g.node_labels.shape[0]} entries for {g.n_nodes} nodes")
        bad = (g.node_labels != UNLABELED) & ((g.node_labels < 0) | (g.node_labels >= max(g.n_classes, 1)))
        if np.any(bad):
            report.append(f"{int(bad.sum())} labels outside [0,{g.n_classes})")
    return report


def check_graph(g):
    """Raise InvalidGraph if ``validate_graph`` reports anything."""
    report = validate_graph(g)
    if report:
        raise errors.InvalidGraph("; ".join(report))
    return g


def build_laplacian(g, normalized=False):
    """
    Build the graph Laplacian.

    Args:
        g: Valid Graph
        normalized: Use ``I - D^-1/2 A D^-1/2`` instead of ``D - A``; isolated
            nodes keep an all-zero row

    Returns:
        Laplacian with CSR entries
    """
    A = g.adjacency
    deg = g.degrees
    if normalized:
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
        D_inv = sp.diags(inv_sqrt)
        L = sp.diags((deg > 0).astype(np.float64)) - D_inv @ A @ D_inv
    else:
        L = sp.diags(deg) - A
    return Laplacian(g.n_nodes, sp.csr_matrix(L), normalized)


def induced_subgraph(g, nodes):
    """
    Extract the subgraph induced by ``nodes``, in the given order.

    Args:
        g: Source graph
        nodes: Sequence of node ids; row i of the result is ``nodes[i]``

    Returns:
        Graph with ``parent_ids`` set to ``nodes``
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    index = np.full(g.n_nodes, -1, dtype=np.int64)
    index[nodes] = np.arange(nodes.shape[0])
    if g.n_edges:
        mapped = index[g.edges]
        keep = (mapped[:, 0] >= 0) & (mapped[:, 1] >= 0)
        sub_edges = np.sort(mapped[keep], axis=1)
    else:
        sub_edges = np.zeros((0, 2), dtype=np.int64)
    labels = g.node_labels[nodes] if g.node_labels is not None else None
    return Graph(int(nodes.shape[0]), sub_edges, g.signals[nodes], labels, g.n_classes, nodes)


def ego_subgraph(g, center, radius):
    """
    Induced subgraph on all nodes within ``radius`` hops of ``center``.

    Node 0 of the result is the center; the rest follow in ascending id.
    """
    if not 0 <= center < g.n_nodes:
        raise errors.ContractViolation(f"center {center} out of range for {g.n_nodes} nodes")
    if radius < 1:
        raise errors.ContractViolation(f"radius must be >= 1, got {radius}")
    ball = nx.single_source_shortest_path_length(g.to_networkx(), int(center), cutoff=radius)
    others = sorted(node for node in ball if node != center)
    return induced_subgraph(g, [int(center)] + others)


def disjoint_union(graphs):
    """Place graphs side by side; node ids are offset in order."""
    offset = 0
    edges, signals, labels = [], [], []
    for g in graphs:
        edges.append(g.edges + offset)
        signals.append(g.signals)
        labels.append(g.node_labels if g.node_labels is not None else np.full(g.n_nodes, UNLABELED))
        offset += g.n_nodes
    n_classes = max((g.n_classes for g in graphs), default=0)
    return Graph(offset, np.concatenate(edges) if edges else np.zeros((0, 2)), np.concatenate(signals),
                 np.concatenate(labels) if n_classes else None, n_classes)


def connected_components(g):
    return nx.number_connected_components(g.to_networkx())


def _format_float(value):
    return repr(float(value))


def format_graph(g):
    """Serialize a graph to the text format."""
    lines = [f"{g.n_nodes} {g.n_edges} {g.n_features} {g.n_classes if g.is_labeled else 0}"]
    for u, v in g.edges.tolist():
        lines.append(f"{min(u, v)} {max(u, v)}")
    for row in g.signals:
        lines.append(" ".join(_format_float(value) for value in row))
    if g.is_labeled:
        lines.extend(str(int(label)) for label in g.node_labels)
    return "\n".join(lines) + "\n"


def save_graph(g, path):
    """
    Write a graph to ``path`` in the text format.

    Args:
        g: Graph to save
        path: Destination file path
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_graph(g))
    logger.debug(f"Saved graph with {g.n_nodes} nodes and {g.n_edges} edges to {path}")


def parse_graph(text):
    """
    Parse the text format.

    Raises:
        MalformedHeader, EndpointOutOfRange, SelfLoop, DuplicateEdge,
        RowCountMismatch, LabelOutOfRange: with the 1-based line number
    """
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise errors.MalformedHeader("empty file", line=1)

    header = lines[0].split()
    try:
        n, m, f, d = (int(tok) for tok in header)
    except ValueError:
        raise errors.MalformedHeader(f"expected 'N M F d', got {lines[0]!r}", line=1) from None
    if n < 0 or m < 0 or f < 1 or d < 0:
        raise errors.MalformedHeader(f"invalid counts N={n} M={m} F={f} d={d}", line=1)

    expected = 1 + m + n + (n if d > 0 else 0)
    if len(lines) < expected:
        raise errors.RowCountMismatch(f"expected {expected} lines, file has {len(lines)}", line=len(lines) + 1)
    if len(lines) > expected:
        raise errors.RowCountMismatch(f"expected {expected} lines, file has {len(lines)}", line=expected + 1)

    edges = np.zeros((m, 2), dtype=np.int64)
    seen = set()
    for i in range(m):
        lineno = 2 + i
        toks = lines[1 + i].split()
        try:
            u, v = (int(tok) for tok in toks)
        except ValueError:
            raise errors.MalformedHeader(f"expected 'u v', got {lines[1 + i]!r}", line=lineno) from None
        if not (0 <= u < n and 0 <= v < n):
            raise errors.EndpointOutOfRange(f"edge ({u},{v}) outside [0,{n})", line=lineno)
        if u == v:
            raise errors.SelfLoop(f"self-loop ({u},{v})", line=lineno)
        key = (min(u, v), max(u, v))
        if key in seen:
            raise errors.DuplicateEdge(f"duplicate edge {key}", line=lineno)
        seen.add(key)
        edges[i] = key

    signals = np.zeros((n, f), dtype=np.float64)
    start = 1 + m
    for i in range(n):
        lineno = start + i + 1
        toks = lines[start + i].split()
        if len(toks) != f:
            raise errors.RowCountMismatch(f"signal row has {len(toks)} values, expected {f}", line=lineno)
        try:
            signals[i] = [float(tok) for tok in toks]
        except ValueError:
            raise errors.RowCountMismatch(f"non-numeric signal row {lines[start + i]!r}", line=lineno) from None

    labels = None
    if d > 0:
        labels = np.zeros(n, dtype=np.int64)
        start = 1 + m + n
        for i in range(n):
            lineno = start + i + 1
            try:
                label = int(lines[start + i].strip())
            except ValueError:
                raise errors.RowCountMismatch(f"expected one integer label, got {lines[start + i]!r}",
                                              line=lineno) from None
            if label != UNLABELED and not 0 <= label < d:
                raise errors.LabelOutOfRange(f"label {label} outside [0,{d})", line=lineno)
            labels[i] = label

    return Graph(n, edges, signals, labels, d)


def load_graph(path):
    """
    Load a graph from a text file.

    Args:
        path: Path to the graph file

    Returns:
        Graph parsed from the file
    """
    with open(path, "r", encoding="utf-8") as f:
        g = parse_graph(f.read())
    logger.info(f"Loaded graph {path}: {g.n_nodes} nodes, {g.n_edges} edges, {g.n_features} features")
    return g


def save_graphset(gs, directory):
    """
    Write a graph set as a directory of graph files plus ``index.tsv``.

    Each index line is ``filename<TAB>label1,label2,...`` (labels may be empty).
    """
    os.makedirs(directory, exist_ok=True)
    index_lines = []
    for i, g in enumerate(gs.graphs):
        name = f"graph_{i:05d}.txt"
        save_graph(g, os.path.join(directory, name))
        labels = ""
        if gs.graph_labels is not None:
            labels = ",".join(_format_float(v) for v in gs.graph_labels[i])
        index_lines.append(f"{name}\t{labels}")
    with open(os.path.join(directory, GRAPHSET_INDEX), "w", encoding="utf-8") as f:
        f.write("\n".join(index_lines) + "\n")
    logger.info(f"Saved graph set of {len(gs)} graphs to {directory}")


def load_graphset(directory):
    """Load a graph set written by ``save_graphset``."""
    index_path = os.path.join(directory, GRAPHSET_INDEX)
    graphs, labels = [], []
    with open(index_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            name, _, label_str = line.rstrip("\n").partition("\t")
            graphs.append(load_graph(os.path.join(directory, name)))
            if label_str.strip():
                try:
                    labels.append([float(v) for v in label_str.split(",")])
                except ValueError:
                    raise errors.GraphFormatError(f"bad graph labels {label_str!r}", line=lineno) from None
    if labels and len(labels) != len(graphs):
        raise errors.GraphFormatError(f"{len(labels)} label rows for {len(graphs)} graphs", line=None)
    return GraphSet(graphs, np.asarray(labels) if labels else None)
