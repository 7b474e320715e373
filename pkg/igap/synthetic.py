"""
Synthetic stochastic-block-model graphs with block-conditioned Gaussian signals.

These stand in for benchmark datasets at desk scale: labels are block indices
and node signals are ``mu_b + sigma * N(0, I)`` for a per-block mean ``mu_b``.
A transfer pair shares the block structure but shifts the signal means and the
edge probabilities of the fine-tune graph.
"""

import logging
from dataclasses import dataclass, replace

import networkx as nx
import numpy as np

from . import errors
from .graph_data import Graph, GraphSet, connected_components
from .rng import child_seed, stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SbmConfig:
    blocks: int = 4
    nodes_per_block: int = 100
    p_in: float = 0.1
    p_out: float = 0.01
    n_features: int = 32
    mean_scale: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.blocks < 1 or self.nodes_per_block < 1 or self.n_features < 1:
            raise errors.ConfigError("blocks, nodes_per_block and n_features must be >= 1")
        for name in ("p_in", "p_out"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise errors.ConfigError(f"{name} must lie in [0,1]")
        if self.blocks > 1 and self.p_in <= self.p_out:
            raise errors.ConfigError(f"p_in={self.p_in} must exceed p_out={self.p_out}")
        if self.sigma < 0 or self.mean_scale < 0:
            raise errors.ConfigError("sigma and mean_scale must be non-negative")


@dataclass(frozen=True)
class FeatureModel:
    """Per-block signal means (blocks x F) and a shared noise scale."""

    means: np.ndarray
    sigma: float

    @classmethod
    def random(cls, blocks, n_features, mean_scale, sigma, seed):
        return cls(stream(seed, "sbm-means").normal(0.0, mean_scale, size=(blocks, n_features)), sigma)

    def shifted(self, distance, seed):
        """Move every block mean by ``distance`` along its own random unit direction."""
        directions = stream(seed, "sbm-shift").standard_normal(self.means.shape)
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return FeatureModel(self.means + distance * directions, self.sigma)


def _sbm_edges(sizes, p_in, p_out, seed):
    blocks = len(sizes)
    probs = [[p_in if a == b else p_out for b in range(blocks)] for a in range(blocks)]
    G = nx.stochastic_block_model(sizes, probs, seed=seed, sparse=True)
    edges = np.array(sorted((min(u, v), max(u, v)) for u, v in G.edges()), dtype=np.int64)
    return edges.reshape(-1, 2)


def gen_sbm(blocks=4, nodes_per_block=100, p_in=0.1, p_out=0.01, feature_model=None, seed=0, n_features=32):
    """
    Stochastic block model graph labeled by block.

    Args:
        blocks: Number of blocks (classes)
        nodes_per_block: Block size
        p_in: Within-block edge probability
        p_out: Between-block edge probability
        feature_model: FeatureModel; default means N(0, I) with sigma 1
        seed: Generator seed
        n_features: Signal dimension when ``feature_model`` is None

    Returns:
        Graph; disconnected output is allowed and logged
    """
    if blocks > 1 and p_in <= p_out:
        raise errors.ConfigError(f"p_in={p_in} must exceed p_out={p_out}")
    if feature_model is None:
        feature_model = FeatureModel.random(blocks, n_features, 1.0, 1.0, child_seed(seed, "features"))
    if feature_model.means.shape[0] != blocks:
        raise errors.DimensionMismatch(f"feature model has {feature_model.means.shape[0]} block means for {blocks} blocks")
    n = blocks * nodes_per_block
    edges = _sbm_edges([nodes_per_block] * blocks, p_in, p_out, child_seed(seed, "sbm-edges"))
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    noise = stream(seed, "sbm-noise").standard_normal((n, feature_model.means.shape[1]))
    signals = feature_model.means[labels] + feature_model.sigma * noise
    g = Graph(n, edges, signals, labels, blocks)
    components = connected_components(g)
    if components > 1:
        logger.warning(f"SBM graph is disconnected ({components} components)")
    logger.info(f"Generated SBM: {n} nodes, {g.n_edges} edges, {blocks} blocks")
    return g


def gen_from_config(cfg, seed=0, feature_model=None):
    if feature_model is None:
        feature_model = FeatureModel.random(cfg.blocks, cfg.n_features, cfg.mean_scale, cfg.sigma,
                                            child_seed(seed, "features"))
    return gen_sbm(cfg.blocks, cfg.nodes_per_block, cfg.p_in, cfg.p_out, feature_model, seed)


def shifted_probabilities(p_in, p_out, structure_shift):
    """Edge probabilities of the fine-tune graph: homophily weakened by ``structure_shift``."""
    gap = p_in - p_out
    return p_in - 0.5 * structure_shift * gap, min(1.0, p_out + 0.5 * structure_shift * gap)


def gen_transfer_pair(base_cfg, signal_shift=0.0, structure_shift=0.0, seed=0):
    """
    Pre-train and fine-tune SBMs from one block-structure family.

    The fine-tune graph's block means are moved by ``signal_shift`` (Euclidean
    distance per block) and its within/between probabilities are pulled
    together by ``structure_shift`` in [0, 1]. Its ``parent_ids`` continue after
    the pre-train node ids, so the two graphs share no node. Class ids are only
    permuted and stay in ``range(blocks)``: the classes are disjoint in node
    identity, not in label space.

    Returns:
        (pretrain Graph, finetune Graph)
    """
    if signal_shift < 0 or structure_shift < 0:
        raise errors.ConfigError("shifts must be non-negative")
    if structure_shift > 1:
        raise errors.ConfigError(f"structure_shift must be <= 1, got {structure_shift}")
    features = FeatureModel.random(base_cfg.blocks, base_cfg.n_features, base_cfg.mean_scale, base_cfg.sigma,
                                   child_seed(seed, "pair-features"))
    g_pt = gen_from_config(base_cfg, child_seed(seed, "pretrain-graph"), features)

    p_in, p_out = shifted_probabilities(base_cfg.p_in, base_cfg.p_out, structure_shift)
    ft_cfg = replace(base_cfg, p_in=p_in, p_out=min(p_out, p_in - 1e-12) if base_cfg.blocks > 1 else p_out)
    ft_features = features.shifted(signal_shift, child_seed(seed, "pair-shift"))
    g_ft = gen_from_config(ft_cfg, child_seed(seed, "finetune-graph"), ft_features)

    relabel = stream(seed, "pair-relabel").permutation(base_cfg.blocks)
    parent_ids = np.arange(g_pt.n_nodes, g_pt.n_nodes + g_ft.n_nodes)
    g_ft = Graph(g_ft.n_nodes, g_ft.edges, g_ft.signals, relabel[g_ft.node_labels], g_ft.n_classes, parent_ids)
    logger.info(f"Generated transfer pair (signal shift {signal_shift}, structure shift {structure_shift})")
    return g_pt, g_ft


def gen_sbm_graphset(n_graphs, cfg, seed=0, label_fn=None):
    """
    GraphSet of small SBMs with binary graph labels.

    The default label is 1 when the graph was drawn with the stronger
    community structure (``p_in``) and 0 when drawn with probabilities pulled
    halfway together.
    """
    graphs, labels = [], []
    features = FeatureModel.random(cfg.blocks, cfg.n_features, cfg.mean_scale, cfg.sigma, child_seed(seed, "features"))
    gen = stream(seed, "graphset-labels")
    for i in range(n_graphs):
        label = int(gen.integers(2)) if label_fn is None else int(label_fn(i))
        p_in, p_out = (cfg.p_in, cfg.p_out) if label else shifted_probabilities(cfg.p_in, cfg.p_out, 1.0)
        g = gen_sbm(cfg.blocks, cfg.nodes_per_block, p_in, min(p_out, p_in - 1e-12) if cfg.blocks > 1 else p_out,
                    features, child_seed(seed, "graph", i))
        graphs.append(g)
        labels.append(label)
    return GraphSet(graphs, np.asarray(labels, dtype=np.float64))
