"""
Pre-train / fine-tune dataset splits.

transductive: both stages see the whole graph; fine-tuning samples
``per_class_train`` training nodes per class and splits the rest 2:8 into
validation and test.
semi-inductive: pre-training sees the whole graph; fine-tuning runs on the
subgraph induced by a random subset of classes.
inductive: two disjoint class subsets induce disjoint pre-train and fine-tune
subgraphs.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import errors
from .const import PER_CLASS_TRAIN, SEMI_INDUCTIVE_CLASS_RATIO, SETTINGS, VAL_TEST_RATIO
from .graph_data import Graph, induced_subgraph
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass
class DatasetSplit:
    """
    ``pretrain_ids`` and ``finetune_ids`` are node ids of the source graph;
    ``train``/``val``/``test`` index rows of ``finetune_graph``.
    """

    setting: str
    pretrain_ids: np.ndarray
    finetune_ids: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    pretrain_classes: frozenset
    finetune_classes: frozenset
    pretrain_graph: Graph | None = field(default=None, repr=False)
    finetune_graph: Graph | None = field(default=None, repr=False)

    def __post_init__(self):
        self.check()

    def check(self):
        """Raise SplitError unless the setting's invariants hold."""
        parts = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise errors.SplitError("train, validation and test overlap")
        pre, ft = set(self.pretrain_ids.tolist()), set(self.finetune_ids.tolist())
        if self.setting == "transductive":
            if pre != ft:
                raise errors.SplitError("transductive split must pre-train on the fine-tune graph")
        elif self.setting == "semi-inductive":
            if not self.finetune_classes <= self.pretrain_classes or not ft <= pre:
                raise errors.SplitError("semi-inductive fine-tune data must lie inside the pre-train data")
        elif self.setting == "inductive":
            if self.finetune_classes & self.pretrain_classes or ft & pre:
                raise errors.SplitError("inductive pre-train and fine-tune data overlap")
        else:
            raise errors.SplitError(f"unknown setting {self.setting!r}")

    def summary(self):
        return {
            "setting": self.setting,
            "pretrain_nodes": int(self.pretrain_ids.size),
            "finetune_nodes": int(self.finetune_ids.size),
            "train": int(self.train.size),
            "val": int(self.val.size),
            "test": int(self.test.size),
            "pretrain_classes": sorted(self.pretrain_classes),
            "finetune_classes": sorted(self.finetune_classes),
        }


def _relabel(g, classes):
    """Induced subgraph on the nodes of ``classes`` with labels renumbered 0..d-1 in class order."""
    classes = sorted(classes)
    nodes = np.flatnonzero(np.isin(g.node_labels, classes))
    sub = induced_subgraph(g, nodes)
    mapping = np.full(g.n_classes, -1, dtype=np.int64)
    mapping[classes] = np.arange(len(classes))
    return Graph(sub.n_nodes, sub.edges, sub.signals, mapping[sub.node_labels], len(classes), sub.parent_ids)


def _train_val_test(labels, per_class_train, ratios, gen):
    train = []
    for c in range(int(labels.max()) + 1 if labels.size else 0):
        members = np.flatnonzero(labels == c)
        if members.size < per_class_train:
            raise errors.SplitError(f"class {c} has {members.size} nodes, fewer than {per_class_train} for training")
        train.extend(gen.choice(members, size=per_class_train, replace=False).tolist())
    train = np.sort(np.asarray(train, dtype=np.int64))
    rest = np.setdiff1d(np.flatnonzero(labels >= 0), train)
    rest = gen.permutation(rest)
    n_val = int(round(rest.size * ratios[0] / (ratios[0] + ratios[1])))
    return train, np.sort(rest[:n_val]), np.sort(rest[n_val:])


def make_splits(g, setting, ratios=VAL_TEST_RATIO, per_class_train=PER_CLASS_TRAIN, seed=0,
                class_ratio=SEMI_INDUCTIVE_CLASS_RATIO, finetune_classes=None, pretrain_classes=None):
    """
    Build a DatasetSplit of a labeled graph.

    Args:
        g: Labeled Graph
        setting: ``transductive``, ``semi-inductive`` or ``inductive``
        ratios: Validation:test ratio of the non-training nodes
        per_class_train: Training nodes sampled per fine-tune class
        seed: Split seed
        class_ratio: Fraction of classes fine-tuned on when ``finetune_classes`` is None
        finetune_classes: Number of fine-tune classes
        pretrain_classes: Number of pre-train classes (inductive only; default: all others)

    Returns:
        DatasetSplit with the derived pre-train and fine-tune graphs

    Raises:
        SplitError: class too small or too few classes for the request
    """
    if setting not in SETTINGS:
        raise errors.SplitError(f"unknown setting {setting!r}, expected one of {SETTINGS}")
    if not g.is_labeled:
        raise errors.SplitError("splits need a labeled graph")
    gen = stream(seed, "split", setting)
    all_classes = list(range(g.n_classes))
    n_classes = len(all_classes)
    all_ids = np.arange(g.n_nodes)

    if setting == "transductive":
        pre_graph = ft_graph = g
        pre_classes = ft_classes = frozenset(all_classes)
        pre_ids = ft_ids = all_ids
    else:
        n_ft = finetune_classes if finetune_classes is not None else max(1, int(round(class_ratio * n_classes)))
        if setting == "semi-inductive":
            n_pre = n_classes
            if n_ft < 1 or n_ft > n_classes:
                raise errors.SplitError(f"cannot fine-tune on {n_ft} of {n_classes} classes")
        else:
            n_pre = pretrain_classes if pretrain_classes is not None else n_classes - n_ft
            if n_ft < 1 or n_pre < 1 or n_pre + n_ft > n_classes:
                raise errors.SplitError(f"cannot split {n_classes} classes into {n_pre} + {n_ft} disjoint sets")
        order = gen.permutation(n_classes).tolist()
        ft_classes = frozenset(order[:n_ft])
        if setting == "semi-inductive":
            pre_classes = frozenset(all_classes)
            pre_graph, pre_ids = g, all_ids
        else:
            pre_classes = frozenset(order[n_ft:n_ft + n_pre])
            pre_graph = _relabel(g, pre_classes)
            pre_ids = pre_graph.parent_ids
        ft_graph = _relabel(g, ft_classes)
        ft_ids = ft_graph.parent_ids

    train, val, test = _train_val_test(ft_graph.node_labels, per_class_train, ratios, gen)
    split = DatasetSplit(setting, np.asarray(pre_ids), np.asarray(ft_ids), train, val, test,
                         pre_classes, ft_classes, pre_graph, ft_graph)
    logger.info(f"Split ({setting}): pre-train {pre_ids.size} nodes / {len(pre_classes)} classes, "
                f"fine-tune {ft_ids.size} nodes / {len(ft_classes)} classes, "
                f"train {train.size} val {val.size} test {test.size}")
    return split


def split_ids(n, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle ``range(n)`` into train/val/test id arrays (graph-level tasks)."""
    if n < 3:
        raise errors.SplitError(f"need at least 3 samples to split, got {n}")
    perm = stream(seed, "split-ids").permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


def write_split(split, path):
    """Write a split as ``role,node`` rows (role in pretrain/finetune/train/val/test)."""
    rows = [("pretrain", int(i)) for i in split.pretrain_ids]
    rows += [("finetune", int(i)) for i in split.finetune_ids]
    for role in ("train", "val", "test"):
        rows += [(role, int(i)) for i in getattr(split, role)]
    pd.DataFrame(rows, columns=["role", "node"]).to_csv(path, index=False)
    logger.info(f"Wrote {split.setting} split to {path}")
