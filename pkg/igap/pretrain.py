"""
Contrastive pre-training of the spectral backbone.

Three frameworks share one loop and one InfoNCE loss:

- ``subgraph``: 2-hop ego-subgraph readouts contrasted against positive and
  negative augmentations (plus the other centers' positives in the batch).
- ``linkpred``: ego-subgraph readouts around the endpoints of masked edges
  contrasted against the ego-subgraph of a node not adjacent to the anchor.
- ``localglobal``: node embeddings contrasted against the graph readout and
  the readouts of feature-shuffled copies.

The task head is trained along with the backbone and serves as the projection
head for the similarity scores.
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import errors
from . import tape
from .augment import augment_negative, augment_positive, mask_edges, shuffle_features
from .checkpoint import Checkpoint, checkpoint_path, save_checkpoint
from .const import (
    BATCH_SIZE,
    EGO_RADIUS,
    FRAMEWORKS,
    MASK_RATE,
    PRETRAIN_EPOCHS,
    PRETRAIN_FULL_BASIS_CAP,
    PRETRAIN_K,
    PRETRAIN_LR,
    TEMPERATURE,
)
from .graph_data import Graph, ego_subgraph
from .model import AdamState, adam_step, head_forward, readout_mean, spectral_forward
from .rng import child_seed, stream
from .spectral import decompose

logger = logging.getLogger(__name__)

SHARED = -1


def canonical_framework(name):
    """Accept ``link-pred``/``link_pred``/``linkpred`` and friends."""
    key = name.replace("-", "").replace("_", "").lower()
    if key not in FRAMEWORKS:
        raise errors.ConfigError(f"unknown framework {name!r}, expected one of {FRAMEWORKS}")
    return key


@dataclass(frozen=True)
class View:
    """
    One side of a contrastive pair.

    ``node`` selects a node row of the graph embedding; None means the mean
    readout. ``anchor`` is the index of the anchor this view belongs to, or
    ``SHARED`` for negatives every anchor sees.
    """

    graph: Graph
    node: int | None = None
    anchor: int = SHARED


@dataclass
class ContrastiveBatch:
    framework: str
    anchors: list
    positives: list
    negatives: list
    in_batch_negatives: bool = False

    def __post_init__(self):
        if len(self.anchors) != len(self.positives):
            raise errors.ContractViolation(
                f"{len(self.anchors)} anchors but {len(self.positives)} positives")
        rows = self.negative_mask()
        if not np.all(rows.any(axis=1)):
            raise errors.ContractViolation("every anchor needs at least one negative")

    def __len__(self):
        return len(self.anchors)

    def negative_mask(self):
        """B x (B + N) mask of the negatives each anchor is contrasted with."""
        B = len(self.anchors)
        mask = np.zeros((B, B + len(self.negatives)), dtype=bool)
        if self.in_batch_negatives:
            mask[:, :B] = ~np.eye(B, dtype=bool)
        owners = np.array([v.anchor for v in self.negatives], dtype=np.int64)
        if owners.size:
            mask[:, B:] = (owners[None, :] == np.arange(B)[:, None]) | (owners[None, :] == SHARED)
        return mask

    def candidate_mask(self):
        """Negatives plus each anchor's own positive."""
        mask = self.negative_mask()
        B = len(self.anchors)
        mask[np.arange(B), np.arange(B)] = True
        return mask


def _graphs(data):
    return [data] if isinstance(data, Graph) else list(data.graphs)


def _sample_subgraph(graphs, cfg, batch_size, gen, radius):
    centers = [(gi, node) for gi, g in enumerate(graphs) for node in range(g.n_nodes)]
    if batch_size > len(centers):
        raise errors.SamplingError(f"batch of {batch_size} exceeds the {len(centers)} available centers")
    picked = sorted(gen.choice(len(centers), size=batch_size, replace=False).tolist())
    anchors, positives, negatives = [], [], []
    for i, c in enumerate(picked):
        gi, node = centers[c]
        ego = ego_subgraph(graphs[gi], node, radius)
        view_seed = int(gen.integers(2**63 - 1))
        anchors.append(View(ego, None, i))
        positives.append(View(augment_positive(ego, cfg, seed=child_seed(view_seed, "positive")), None, i))
        negatives.append(View(augment_negative(ego, cfg, seed=child_seed(view_seed, "negative")), None, i))
    return ContrastiveBatch("subgraph", anchors, positives, negatives, in_batch_negatives=batch_size > 1)


def _sample_linkpred(graphs, batch_size, gen, mask_rate, radius):
    pairs = []
    for g in graphs:
        masked = mask_edges(g, mask_rate, int(gen.integers(2**63 - 1)))
        for (u, v), (a, b) in zip(masked.masked.tolist(), masked.negatives.tolist()):
            # a negative pair away from u means u neighbours every node
            if u not in (a, b):
                continue
            pairs.append((masked.graph, u, v, b if a == u else a))
    if not pairs:
        raise errors.SamplingError(f"mask rate {mask_rate} leaves no masked edge with a non-adjacent negative")
    take = min(batch_size, len(pairs))
    picked = sorted(gen.choice(len(pairs), size=take, replace=False).tolist())
    anchors, positives, negatives = [], [], []
    for i, p in enumerate(picked):
        g, u, v, w = pairs[p]
        anchors.append(View(ego_subgraph(g, u, radius), None, i))
        positives.append(View(ego_subgraph(g, v, radius), None, i))
        negatives.append(View(ego_subgraph(g, w, radius), None, i))
    return ContrastiveBatch("linkpred", anchors, positives, negatives)


def _sample_localglobal(graphs, batch_size, gen):
    anchors, positives, negatives = [], [], []
    if len(graphs) == 1:
        g = graphs[0]
        if batch_size > g.n_nodes:
            raise errors.SamplingError(f"batch of {batch_size} exceeds the {g.n_nodes} available nodes")
        nodes = sorted(gen.choice(g.n_nodes, size=batch_size, replace=False).tolist())
        for i, node in enumerate(nodes):
            anchors.append(View(g, node, i))
            positives.append(View(g, None, i))
            negatives.append(View(shuffle_features(g, int(gen.integers(2**63 - 1))), None, i))
        return ContrastiveBatch("localglobal", anchors, positives, negatives)
    if batch_size > len(graphs):
        raise errors.SamplingError(f"batch of {batch_size} exceeds the {len(graphs)} available graphs")
    picked = sorted(gen.choice(len(graphs), size=batch_size, replace=False).tolist())
    for i, gi in enumerate(picked):
        g = graphs[gi]
        anchors.append(View(g, int(gen.integers(g.n_nodes)), i))
        positives.append(View(g, None, i))
        negatives.append(View(shuffle_features(g, int(gen.integers(2**63 - 1))), None, i))
    return ContrastiveBatch("localglobal", anchors, positives, negatives, in_batch_negatives=batch_size > 1)


def sample_contrastive_batch(data, framework, cfg, batch_size=BATCH_SIZE, seed=0,
                             mask_rate=MASK_RATE, radius=EGO_RADIUS):
    """
    Draw one batch of anchors with their positives and negatives.

    Args:
        data: Graph or GraphSet
        framework: ``subgraph``, ``linkpred`` or ``localglobal``
        cfg: AugmentConfig
        batch_size: Anchors per batch
        seed: Batch seed
        mask_rate: Edge mask rate for ``linkpred``
        radius: Ego-subgraph radius for ``subgraph`` and ``linkpred``

    Returns:
        ContrastiveBatch

    Raises:
        SamplingError: batch larger than the available centers
    """
    framework = canonical_framework(framework)
    graphs = _graphs(data)
    gen = stream(seed, "contrastive-batch", framework)
    if framework == "subgraph":
        return _sample_subgraph(graphs, cfg, batch_size, gen, radius)
    if framework == "linkpred":
        return _sample_linkpred(graphs, batch_size, gen, mask_rate, radius)
    return _sample_localglobal(graphs, batch_size, gen)


def info_nce(anchor_embs, pos_embs, neg_embs, temperature=TEMPERATURE, neg_owner=None,
             in_batch=False, reduction="sum"):
    """
    InfoNCE over cosine similarities.

    ``-sum_i log[exp(cos(a_i, p_i)/t) / sum_j exp(cos(a_i, s_j)/t)]`` where
    ``s_j`` runs over the positive and the negatives of anchor i.

    Args:
        anchor_embs: B x H
        pos_embs: B x H, row i is the positive of anchor i
        neg_embs: N x H
        temperature: Softmax temperature
        neg_owner: Length-N anchor index per negative, ``SHARED`` for all; None shares every negative
        in_batch: Also contrast each anchor with the other anchors' positives
        reduction: "sum" or "mean"

    Raises:
        ZeroNormError: if any embedding has zero norm
    """
    anchor_embs, pos_embs, neg_embs = tape.lift(anchor_embs), tape.lift(pos_embs), tape.lift(neg_embs)
    B = anchor_embs.shape[0]
    if pos_embs.shape[0] != B:
        raise errors.DimensionMismatch(f"{B} anchors but {pos_embs.shape[0]} positives")
    N = neg_embs.shape[0]
    owners = np.full(N, SHARED, dtype=np.int64) if neg_owner is None else np.asarray(neg_owner, dtype=np.int64)
    mask = np.zeros((B, B + N), dtype=bool)
    mask[:, :B] = True if in_batch else np.eye(B, dtype=bool)
    mask[np.arange(B), np.arange(B)] = True
    mask[:, B:] = (owners[None, :] == np.arange(B)[:, None]) | (owners[None, :] == SHARED)
    candidates = tape.stack_rows([pos_embs, neg_embs]) if N else pos_embs
    scores = tape.scale(tape.cosine_matrix(anchor_embs, candidates), 1.0 / temperature)
    return tape.cross_entropy(scores, np.arange(B), mask[:, :B + N], reduction=reduction)


class BasisCache:
    """Spectral bases keyed by graph structure, so views sharing edges decompose once."""

    def __init__(self, k_pre=PRETRAIN_K, full_basis_cap=PRETRAIN_FULL_BASIS_CAP, normalized=False, seed=0):
        self.k_pre = k_pre
        self.full_basis_cap = full_basis_cap
        self.normalized = normalized
        self.seed = seed
        self._bases = {}

    def _key(self, g):
        digest = hashlib.md5(np.ascontiguousarray(g.edges).tobytes()).hexdigest()
        return g.n_nodes, digest

    def __len__(self):
        return len(self._bases)

    def get(self, g):
        key = self._key(g)
        if key not in self._bases:
            k = None if g.n_nodes <= self.full_basis_cap else self.k_pre
            self._bases[key] = decompose(g, k=k, normalized=self.normalized, seed=self.seed,
                                         size_cap=self.full_basis_cap)
        return self._bases[key]

    def prune(self, keep):
        """Drop every basis except those of the graphs in ``keep``."""
        keys = {self._key(g) for g in keep}
        self._bases = {k: v for k, v in self._bases.items() if k in keys}


def encode_views(views, weights, bases, cache=None):
    """
    Head outputs of a list of views as one stacked Var.

    Graphs shared between views are run through the backbone once.
    """
    cache = {} if cache is None else cache
    rows = []
    for view in views:
        key = id(view.graph)
        if key not in cache:
            cache[key] = spectral_forward(bases.get(view.graph), weights, view.graph.signals)
        Z = cache[key]
        rows.append(readout_mean(Z) if view.node is None else tape.take_rows(Z, [view.node]))
    return head_forward(weights, tape.stack_rows(rows))


def batch_loss(batch, weights, bases, temperature=TEMPERATURE, reduction="mean"):
    """InfoNCE of one ContrastiveBatch under the given weights."""
    cache = {}
    anchors = encode_views(batch.anchors, weights, bases, cache)
    positives = encode_views(batch.positives, weights, bases, cache)
    negatives = encode_views(batch.negatives, weights, bases, cache)
    return info_nce(anchors, positives, negatives, temperature,
                    neg_owner=[v.anchor for v in batch.negatives],
                    in_batch=batch.in_batch_negatives, reduction=reduction)


@dataclass
class PretrainResult:
    params: object
    losses: list = field(default_factory=list)
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0

    def to_checkpoint(self, seed, config=None, config_hash="", framework=""):
        return Checkpoint(
            stage="pretrain",
            epoch=self.epoch,
            model=self.params,
            adam=self.adam,
            trace=list(self.losses),
            rng={"seed": int(seed), "tag": "pretrain"},
            config=config or {},
            config_hash=config_hash,
            extra={"framework": framework},
        )


def pretrain_loop(data, framework, cfg, model, epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR, seed=0, *,
                  batch_size=BATCH_SIZE, temperature=TEMPERATURE, mask_rate=MASK_RATE, radius=EGO_RADIUS,
                  k_pre=PRETRAIN_K, full_basis_cap=PRETRAIN_FULL_BASIS_CAP, normalized=False,
                  resume=None, checkpoint_every=0, checkpoint_dir=None, config=None, config_hash=""):
    """
    Train backbone and head with InfoNCE.

    Each epoch samples a batch from its own seeded stream, so a run resumed
    from a checkpoint continues exactly as the uninterrupted run would.

    Args:
        data: Graph or GraphSet
        framework: Pre-training framework name
        cfg: AugmentConfig
        model: Initial ModelParams (not modified)
        epochs: Total epoch count, including epochs already in ``resume``
        lr: Adam learning rate
        seed: Master seed
        resume: Optional pretrain Checkpoint to continue from
        checkpoint_every: Write a checkpoint every this many epochs (0 disables)
        checkpoint_dir: Directory for periodic checkpoints

    Returns:
        PretrainResult with the trained params and the per-epoch loss trace

    Raises:
        NonFiniteLoss: the loss became NaN or infinite (carries the epoch)
    """
    framework = canonical_framework(framework)
    if resume is not None:
        if resume.stage != "pretrain":
            raise errors.CheckpointError(f"cannot resume pre-training from a {resume.stage} checkpoint")
        params = resume.model.copy(frozen=False)
        adam = AdamState(resume.adam.step, {k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()})
        losses = list(resume.trace)
        start = resume.epoch
    else:
        params = model.copy(frozen=False)
        adam = AdamState()
        losses = []
        start = 0

    bases = BasisCache(k_pre=k_pre, full_basis_cap=full_basis_cap, normalized=normalized, seed=seed)
    result = PretrainResult(params, losses, adam, start)
    log_every = max(1, epochs // 10)
    for epoch in range(start, epochs):
        batch = sample_contrastive_batch(data, framework, cfg, batch_size, child_seed(seed, "pretrain", epoch),
                                         mask_rate=mask_rate, radius=radius)
        weights = params.variables()
        try:
            loss = batch_loss(batch, weights, bases, temperature)
            grads = tape.backward(loss, weights)
        except errors.NonFiniteLoss as e:
            raise errors.NonFiniteLoss(str(e), epoch=epoch) from None
        adam_step(params.arrays, grads, adam, lr)
        losses.append(float(loss.value))
        bases.prune(_graphs(data))
        result.epoch = epoch + 1
        if epoch % log_every == 0 or epoch == epochs - 1:
            logger.info(f"Pretrain [{framework}] epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")
        else:
            logger.debug(f"Pretrain [{framework}] epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")
        if checkpoint_every and checkpoint_dir and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(result.to_checkpoint(seed, config, config_hash, framework),
                            checkpoint_path(checkpoint_dir, "pretrain", epoch + 1))
    return result


def embed_nodes(params, g, basis=None, normalized=False, activation=True):
    """Backbone node embeddings of a whole graph (n x H array)."""
    basis = basis if basis is not None else decompose(g, normalized=normalized)
    return spectral_forward(basis, params, g.signals, activation=activation).value


def write_loss_csv(losses, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame({"epoch": np.arange(1, len(losses) + 1), "loss": losses}).to_csv(path, index=False)
    logger.info(f"Wrote loss trace ({len(losses)} epochs) to {path}")
