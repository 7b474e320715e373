"""
Positive and negative views for contrastive pre-training.

Positive views perturb a graph slightly: a few edges dropped or added, and a
sparse small signal transform ``x <- (I + F_sp) x``. Negative views rewire the
structure heavily (degree-preserving where possible) and apply a dense
transform ``x <- (I + F_dt) x``.
"""

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import networkx as nx
import numpy as np
import scipy.sparse as sp

from . import errors
from .const import (
    NEG_EDGE_RATE,
    NEG_SIGNAL_DENSITY,
    NEG_SIGNAL_SCALE,
    POS_EDGE_RATE,
    POS_SIGNAL_SCALE,
    POS_SIGNAL_SPARSITY,
)
from .rng import child_seed, stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    pos_edge_rate: float = POS_EDGE_RATE
    pos_signal_sparsity: float = POS_SIGNAL_SPARSITY
    pos_signal_scale: float = POS_SIGNAL_SCALE
    neg_edge_rate: float = NEG_EDGE_RATE
    neg_signal_density: float = NEG_SIGNAL_DENSITY
    neg_signal_scale: float = NEG_SIGNAL_SCALE
    seed: int = 0

    def __post_init__(self):
        for name in ("pos_edge_rate", "pos_signal_sparsity", "neg_edge_rate", "neg_signal_density"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise errors.ConfigError(f"{name}={value} must lie in [0,1]")
        for name in ("pos_signal_scale", "neg_signal_scale"):
            if getattr(self, name) < 0:
                raise errors.ConfigError(f"{name} must be non-negative")
        # a kind of perturbation switched off on both sides is allowed
        for pos, neg in (("pos_edge_rate", "neg_edge_rate"), ("pos_signal_sparsity", "neg_signal_density")):
            p, q = getattr(self, pos), getattr(self, neg)
            if p >= q and (p, q) != (0.0, 0.0):
                raise errors.ConfigError(f"{pos}={p} must be below {neg}={q}")

    def with_seed(self, seed):
        return replace(self, seed=seed)


class MaskedEdges(NamedTuple):
    graph: object
    masked: np.ndarray
    negatives: np.ndarray


def perturb_count(rate, n_edges):
    return int(np.floor(rate * n_edges + 1e-9))


def _canonical(edges):
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.sort(np.asarray(edges, dtype=np.int64), axis=1)
    return arr[np.lexsort((arr[:, 1], arr[:, 0]))]


def _sample_non_edges(n, forbidden, count, gen, max_tries=None):
    """Distinct pairs (u<v) absent from ``forbidden``."""
    available = n * (n - 1) // 2 - len(forbidden)
    if count > available:
        raise errors.SamplingError(f"need {count} non-adjacent pairs, only {available} exist")
    chosen = []
    taken = set(forbidden)
    tries = 0
    max_tries = max_tries or 100 * max(count, 1) + 1000
    while len(chosen) < count:
        tries += 1
        if tries > max_tries:
            raise errors.SamplingError(f"could not sample {count} non-adjacent pairs")
        u, v = (int(t) for t in gen.integers(0, n, size=2))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in taken:
            continue
        taken.add(key)
        chosen.append(key)
    return chosen


def drop_add_edges(g, n_perturb, gen):
    """Drop ceil(n/2) existing edges and add the rest as new ones."""
    if n_perturb == 0:
        return g
    n_drop = min((n_perturb + 1) // 2, g.n_edges)
    n_add = n_perturb - n_drop
    keep = np.ones(g.n_edges, dtype=bool)
    if n_drop:
        keep[gen.choice(g.n_edges, size=n_drop, replace=False)] = False
    edges = [tuple(e) for e in g.edges[keep].tolist()]
    max_new = g.n_nodes * (g.n_nodes - 1) // 2 - g.n_edges
    added = _sample_non_edges(g.n_nodes, g.edge_set, min(n_add, max_new), gen) if n_add else []
    return g.with_edges(_canonical(edges + added))


def signal_transform(n, density, magnitude, gen):
    """Symmetric random matrix with Bernoulli(density) off-diagonal support and N(0, magnitude^2) values."""
    n_pairs = n * (n - 1) // 2
    if n_pairs == 0 or density == 0 or magnitude == 0:
        return sp.csr_matrix((n, n))
    count = int(gen.binomial(n_pairs, density))
    if count == 0:
        return sp.csr_matrix((n, n))
    u = gen.integers(0, n, size=2 * count + 16)
    v = gen.integers(0, n, size=2 * count + 16)
    keep = u != v
    pairs = np.unique(np.sort(np.stack([u[keep], v[keep]], axis=1), axis=1), axis=0)
    pairs = pairs[gen.permutation(pairs.shape[0])[:count]]
    values = gen.normal(0.0, magnitude, size=pairs.shape[0])
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return sp.csr_matrix((np.concatenate([values, values]), (rows, cols)), shape=(n, n))


def augment_positive(g, cfg, seed=None):
    """
    Light perturbation: ``pos_edge_rate * M`` edges dropped/added and
    ``x <- (I + F_sp) x`` with a sparse small symmetric ``F_sp``.

    Args:
        g: Graph
        cfg: AugmentConfig
        seed: Overrides ``cfg.seed``

    Returns:
        New Graph with the same node count
    """
    gen = stream(cfg.seed if seed is None else seed, "augment-positive")
    out = drop_add_edges(g, perturb_count(cfg.pos_edge_rate, g.n_edges), gen)
    F = signal_transform(g.n_nodes, cfg.pos_signal_sparsity, cfg.pos_signal_scale, gen)
    if F.nnz:
        out = out.with_signals(g.signals + F @ g.signals)
    return out


def rewire(g, n_swaps, gen):
    """Degree-preserving double-edge swaps, falling back to random drop/add."""
    if n_swaps == 0:
        return g
    G = g.to_networkx()
    try:
        nx.double_edge_swap(G, nswap=n_swaps, max_tries=100 * n_swaps + 100, seed=int(gen.integers(2**31 - 1)))
        return g.with_edges(_canonical(list(G.edges())))
    except (nx.NetworkXError, nx.NetworkXAlgorithmError) as e:
        logger.debug(f"Degree-preserving rewiring failed ({e}); using random drop/add")
        return drop_add_edges(g, 2 * n_swaps, gen)


def augment_negative(g, cfg, seed=None):
    """
    Heavy perturbation: rewiring at ``neg_edge_rate`` and ``x <- (I + F_dt) x``
    with a dense ``F_dt``.
    """
    gen = stream(cfg.seed if seed is None else seed, "augment-negative")
    out = rewire(g, perturb_count(cfg.neg_edge_rate, g.n_edges), gen)
    F = signal_transform(g.n_nodes, cfg.neg_signal_density, cfg.neg_signal_scale, gen)
    if F.nnz:
        out = out.with_signals(g.signals + F @ g.signals)
    return out


def shuffle_features(g, seed):
    """Row-permute the signal matrix, structure unchanged."""
    perm = stream(seed, "shuffle").permutation(g.n_nodes)
    return g.with_signals(g.signals[perm])


def mask_edges(g, rate, seed):
    """
    Remove ``floor(rate * M)`` random edges and sample as many non-adjacent pairs.

    Each negative pair starts at the first endpoint of the matching masked edge
    when that node has a non-neighbour, otherwise anywhere in the graph.

    Returns:
        MaskedEdges(graph without the masked edges, masked pairs, negative pairs)

    Raises:
        SamplingError: not enough non-adjacent pairs in the original graph
    """
    if not 0.0 < rate < 1.0:
        raise errors.ContractViolation(f"mask rate must lie in (0,1), got {rate}")
    gen = stream(seed, "mask-edges")
    n_mask = perturb_count(rate, g.n_edges)
    picked = np.sort(gen.choice(g.n_edges, size=n_mask, replace=False)) if n_mask else np.zeros(0, dtype=np.int64)
    keep = np.ones(g.n_edges, dtype=bool)
    keep[picked] = False
    masked = g.edges[picked]

    adjacency = g.adjacency
    taken = set(g.edge_set)
    negatives = []
    for u, _ in masked.tolist():
        row = adjacency.getrow(u).indices
        candidates = np.setdiff1d(np.arange(g.n_nodes), np.append(row, u))
        candidates = [w for w in candidates.tolist() if (min(u, w), max(u, w)) not in taken]
        if candidates:
            w = candidates[int(gen.integers(len(candidates)))]
            pair = (min(u, w), max(u, w))
        else:
            pair = _sample_non_edges(g.n_nodes, taken, 1, gen)[0]
        taken.add(pair)
        negatives.append(pair)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    return MaskedEdges(g.with_edges(g.edges[keep]), masked, negatives)


def seeded(cfg, *tags):
    """Copy of cfg whose seed is derived from its own seed and tags."""
    return cfg.with_seed(child_seed(cfg.seed, *tags))
