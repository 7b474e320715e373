"""
Signal, alignment and label prompts and the prompt fine-tuning loop.

With the pre-trained backbone frozen, three small prompt groups adapt it to a
new graph:

- the signal prompt adds ``alpha @ P_s`` to the node signals, a mixture of a
  bank of L prompt vectors;
- the alignment prompt ``P_t`` rotates the fine-tune graph's K lowest-frequency
  eigenvectors, ``U_K -> P_t U_K``, before the frozen filters run on them;
- the label prompt holds one vector per class; a sample is classified by the
  label vector its head output is most cosine-similar to.

Node tasks prompt a single graph. Graph tasks share one prompt set across a
GraphSet: alpha is a map from raw signals (F x L) and P_t acts on spectral
coordinates (K x K), so no prompt shape depends on a graph's node count.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import errors
from . import tape
from .analysis import accuracy, roc_auc
from .checkpoint import Checkpoint, checkpoint_path, save_checkpoint
from .const import (
    ABLATIONS,
    ALIGNED_COMPONENTS,
    CHECKPOINT_EVERY,
    FINETUNE_EPOCHS,
    FINETUNE_LR,
    LOW_RANK,
    PROMPT_BANK_SIZE,
    TEMPERATURE,
)
from .graph_data import Graph
from .model import (
    AdamState,
    ModelParams,
    adam_step,
    backbone_forward,
    head_forward,
    init_head,
    readout_mean,
)
from .rng import stream
from .spectral import decompose

logger = logging.getLogger(__name__)

PT_MODES = ("dense", "lowrank", "graph")
SIGNAL_PROMPT_SCALE = 0.1

_ABLATION_ALIASES = {
    "full": "none",
    "no-ps": "ps",
    "no_ps": "ps",
    "no-pt": "pt",
    "no_pt": "pt",
    "e2e": "pl",
    "end2end": "pl",
    "no-label": "nolabel",
    "linear-probe": "probe",
}


def canonical_ablation(name):
    key = _ABLATION_ALIASES.get(name.lower(), name.lower())
    if key not in ABLATIONS:
        raise errors.ConfigError(f"unknown ablation {name!r}, expected one of {ABLATIONS}")
    return key


def parse_pt_mode(text):
    """``dense`` or ``lowrank:R`` -> (mode, rank)."""
    mode, _, rank = text.partition(":")
    mode = mode.replace("-", "").lower()
    if mode not in ("dense", "lowrank"):
        raise errors.ConfigError(f"unknown P_t mode {text!r}, expected dense or lowrank:R")
    if mode == "dense":
        return "dense", 0
    try:
        rank = int(rank) if rank else LOW_RANK
    except ValueError:
        raise errors.ConfigError(f"bad low-rank size in {text!r}") from None
    if rank < 1:
        raise errors.ConfigError(f"low rank must be >= 1, got {rank}")
    return "lowrank", rank


@dataclass
class PromptConfig:
    L: int = PROMPT_BANK_SIZE
    K: int = ALIGNED_COMPONENTS
    lr: float = FINETUNE_LR
    epochs: int = FINETUNE_EPOCHS
    checkpoint_every: int = CHECKPOINT_EVERY
    pt_mode: str = "dense"
    rank: int = LOW_RANK
    ortho_penalty: float = 0.0
    temperature: float = TEMPERATURE
    ablation: str = "none"
    right_rotation: bool = True
    normalized: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise errors.ConfigError(f"prompt bank size L must be >= 1, got {self.L}")
        if self.K < 1:
            raise errors.ConfigError(f"aligned components K must be >= 1, got {self.K}")
        if self.epochs < 0 or self.checkpoint_every < 1:
            raise errors.ConfigError("epochs must be >= 0 and checkpoint_every >= 1")
        if self.pt_mode not in ("dense", "lowrank"):
            self.pt_mode, self.rank = parse_pt_mode(self.pt_mode)
        self.ablation = canonical_ablation(self.ablation)

    def to_dict(self):
        return asdict(self)


@dataclass
class SignalPrompt:
    """
    ``X~ = X + alpha P_s`` with a bank ``P_s`` (L x F).

    ``alpha`` is N x L per node, or, when ``per_graph`` is set, an F x L map
    giving each graph's coefficients as ``X alpha``.
    """

    P_s: np.ndarray
    alpha: np.ndarray
    per_graph: bool = False

    @classmethod
    def init(cls, n_rows, n_features, L, seed=0, per_graph=False):
        gen = stream(seed, "init-signal-prompt")
        P_s = gen.normal(0.0, SIGNAL_PROMPT_SCALE, size=(L, n_features))
        alpha = np.zeros((n_features if per_graph else n_rows, L))
        return cls(P_s, alpha, per_graph)

    @property
    def L(self):
        return int(self.P_s.shape[0])

    def named_arrays(self):
        return {"alpha": self.alpha, "P_s": self.P_s}

    def trainable_names(self):
        return ["alpha", "P_s"]


@dataclass
class AlignmentPrompt:
    """
    Transformation of the truncated eigenbasis, initialized to the identity.

    ``dense``: ``P_t`` is M x M. ``lowrank``: ``P_t = I + A B^T`` with A, B
    M x r (A starts at zero). ``graph``: ``P_t`` is K x K on spectral coordinates.
    """

    mode: str
    arrays: dict

    @classmethod
    def init(cls, size, mode="dense", rank=LOW_RANK, seed=0):
        if mode not in PT_MODES:
            raise errors.ConfigError(f"unknown P_t mode {mode!r}")
        if mode != "lowrank":
            return cls(mode, {"P_t": np.eye(size)})
        gen = stream(seed, "init-alignment-prompt")
        bound = 1.0 / np.sqrt(size)
        return cls(mode, {"P_t.A": np.zeros((size, rank)),
                          "P_t.B": gen.uniform(-bound, bound, size=(size, rank))})

    @property
    def size(self):
        return int(next(iter(self.arrays.values())).shape[0])

    def matrix(self):
        """Explicit P_t."""
        if self.mode == "lowrank":
            return np.eye(self.size) + self.arrays["P_t.A"] @ self.arrays["P_t.B"].T
        return self.arrays["P_t"]

    def named_arrays(self):
        return dict(self.arrays)

    def trainable_names(self):
        return list(self.arrays)


@dataclass
class LabelPrompt:
    P_l: np.ndarray

    @property
    def n_classes(self):
        return int(self.P_l.shape[0])

    def named_arrays(self):
        return {"P_l": self.P_l}

    def trainable_names(self):
        return ["P_l"]


@dataclass
class PromptSet:
    signal: SignalPrompt
    alignment: AlignmentPrompt
    label: LabelPrompt
    ablation: str = "none"

    def named_arrays(self):
        arrays = {}
        for group in (self.signal, self.alignment, self.label):
            arrays.update(group.named_arrays())
        return arrays

    def trainable_names(self):
        names = []
        if self.ablation not in ("ps", "probe"):
            names += self.signal.trainable_names()
        if self.ablation not in ("pt", "probe"):
            names += self.alignment.trainable_names()
        if self.ablation != "nolabel":
            names += self.label.trainable_names()
        return names

    def copy(self):
        return PromptSet(
            SignalPrompt(self.signal.P_s.copy(), self.signal.alpha.copy(), self.signal.per_graph),
            AlignmentPrompt(self.alignment.mode, {k: v.copy() for k, v in self.alignment.arrays.items()}),
            LabelPrompt(self.label.P_l.copy()),
            self.ablation,
        )

    @classmethod
    def from_arrays(cls, arrays, per_graph=False, ablation="none"):
        if "P_t.A" in arrays:
            alignment = AlignmentPrompt("lowrank", {"P_t.A": arrays["P_t.A"], "P_t.B": arrays["P_t.B"]})
        else:
            alignment = AlignmentPrompt("graph" if per_graph else "dense", {"P_t": arrays["P_t"]})
        return cls(SignalPrompt(arrays["P_s"], arrays["alpha"], per_graph), alignment,
                   LabelPrompt(arrays["P_l"]), ablation)


def apply_signal_prompt(X, sp, alpha=None, P_s=None):
    """
    ``X~ = X + alpha P_s`` (``X + (X alpha) P_s`` for a per-graph prompt).

    ``alpha``/``P_s`` may be passed as tape variables to differentiate through
    them; they default to the prompt's arrays.

    Raises:
        DimensionMismatch: shapes do not line up
    """
    X = tape.lift(X)
    alpha = tape.lift(sp.alpha if alpha is None else alpha)
    P_s = tape.lift(sp.P_s if P_s is None else P_s)
    n, F = X.shape
    if P_s.shape[1] != F:
        raise errors.DimensionMismatch(f"signal prompts have dimension {P_s.shape[1]}, signals {F}")
    if sp.per_graph:
        if alpha.shape != (F, P_s.shape[0]):
            raise errors.DimensionMismatch(f"alpha map is {alpha.shape}, expected {(F, P_s.shape[0])}")
        coeffs = tape.matmul(X, alpha)
    else:
        if alpha.shape != (n, P_s.shape[0]):
            raise errors.DimensionMismatch(f"alpha is {alpha.shape}, expected {(n, P_s.shape[0])}")
        coeffs = alpha
    return tape.add(X, tape.matmul(coeffs, P_s))


def _aligned_basis(U, ap, prompt_vars):
    if ap.mode == "dense":
        P_t = prompt_vars["P_t"]
        if P_t.shape[0] != U.shape[0]:
            raise errors.DimensionMismatch(f"P_t is {P_t.shape}, basis has n={U.shape[0]}")
        return tape.matmul(P_t, U)
    if ap.mode == "lowrank":
        A, B = prompt_vars["P_t.A"], prompt_vars["P_t.B"]
        if A.shape[0] != U.shape[0]:
            raise errors.DimensionMismatch(f"low-rank P_t is {A.shape[0]}-dimensional, basis has n={U.shape[0]}")
        return tape.add(U, tape.matmul(A, tape.matmul(tape.transpose(B), U)))
    k = U.shape[1]
    P_t = prompt_vars["P_t"]
    if P_t.shape[0] < k:
        raise errors.DimensionMismatch(f"P_t is {P_t.shape}, basis has K={k}")
    return tape.matmul(U, tape.block(P_t, k, k))


def aligned_forward(basis, ap, params, X, prompt_vars=None, weights=None, right_rotation=True,
                    activation=True, require_frozen=True):
    """
    Frozen model run on the prompt-aligned truncated basis.

    Per layer ``Z <- P_t U_K diag(g(lambda)) U_K^T P_t^T Z W``, ReLU between
    layers. With ``right_rotation`` off the input projection uses ``U_K^T``.

    Args:
        basis: Truncated SpectralBasis of the fine-tune graph
        ap: AlignmentPrompt
        params: Frozen ModelParams
        X: Prompted signals (array or Var)
        prompt_vars: Optional name -> Var for the P_t arrays
        weights: Optional name -> Var for the model arrays

    Raises:
        ContractViolation: params are not frozen
        DimensionMismatch: shapes do not line up
    """
    if require_frozen and not params.frozen:
        raise errors.ContractViolation("aligned_forward needs a frozen pre-trained model")
    X = tape.lift(X)
    if X.shape[0] != basis.n:
        raise errors.DimensionMismatch(f"signals have {X.shape[0]} rows, basis has n={basis.n}")
    if X.shape[1] != params.in_dim:
        raise errors.DimensionMismatch(f"signals have {X.shape[1]} columns, model expects {params.in_dim}")
    prompt_vars = prompt_vars or {name: tape.Var(arr, name=name) for name, arr in ap.arrays.items()}
    weights = weights or {name: tape.Var(arr, name=name) for name, arr in params.arrays.items()}
    U = basis.eigenvectors
    left = _aligned_basis(U, ap, prompt_vars)
    right_t = tape.transpose(left) if right_rotation else U.T
    return backbone_forward(left, right_t, basis.eigenvalues, weights, X, activation=activation)


def _check_labels(labels, d):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= d):
        raise errors.ContractViolation(f"labels must lie in [0,{d}), got range [{labels.min()}, {labels.max()}]")
    return labels


def label_infonce(Z, labels, lp, temperature=TEMPERATURE, params=None, reduction="sum"):
    """
    Classification InfoNCE against the label prompts.

    ``-sum_i log[exp(cos(p_{y_i}, h_i)/t) / sum_j exp(cos(p_j, h_i)/t)]`` with
    ``h_i = head(z_i)`` when ``params`` is given, else ``h_i = z_i``.

    Args:
        Z: Embeddings (rows)
        labels: Class per row
        lp: LabelPrompt or a d x H Var
        params: ModelParams or name -> Var for the head

    Raises:
        ContractViolation: a label outside [0, d)
        ZeroNormError: zero-norm label prompt or embedding
    """
    P_l = lp if isinstance(lp, tape.Var) else tape.lift(lp.P_l)
    labels = _check_labels(labels, P_l.shape[0])
    H = head_forward(params, Z) if params is not None else tape.lift(Z)
    scores = tape.scale(tape.cosine_matrix(H, P_l), 1.0 / temperature)
    return tape.cross_entropy(scores, labels, reduction=reduction)


def _cosine(H, P_l):
    hn = np.linalg.norm(H, axis=1, keepdims=True)
    pn = np.linalg.norm(P_l, axis=1, keepdims=True)
    if np.any(hn < tape.NORM_EPS) or np.any(pn < tape.NORM_EPS):
        raise errors.ZeroNormError("cosine similarity of a zero-norm vector")
    return (H / hn) @ (P_l / pn).T


def predict(Z, lp, params=None):
    """Class of the most cosine-similar label prompt per row (ties -> lowest index)."""
    H = head_forward(params, Z).value if params is not None else np.atleast_2d(np.asarray(tape.lift(Z).value))
    return np.argmax(_cosine(H, lp.P_l), axis=1)


def class_scores(Z, lp, params=None):
    """Cosine margin ``cos(p_1, h) - cos(p_0, h)`` for binary tasks."""
    H = head_forward(params, Z).value if params is not None else np.atleast_2d(np.asarray(tape.lift(Z).value))
    sims = _cosine(H, lp.P_l)
    return sims[:, 1] - sims[:, 0]


def init_label_prompt(H, labels, n_classes, seed=0):
    """Class means of the head outputs; empty or zero-mean classes get small random rows."""
    gen = stream(seed, "init-label-prompt")
    P_l = np.zeros((n_classes, H.shape[1]))
    for c in range(n_classes):
        rows = H[labels == c]
        mean = rows.mean(axis=0) if rows.shape[0] else np.zeros(H.shape[1])
        if np.linalg.norm(mean) < tape.NORM_EPS:
            mean = gen.normal(0.0, 0.01, size=H.shape[1])
        P_l[c] = mean
    return LabelPrompt(P_l)


class PromptPipeline:
    """
    Prompted forward pass over a fine-tune Graph (node task) or GraphSet
    (graph task), with the truncated bases computed once.
    """

    def __init__(self, params, prompts, data, cfg, seed=0):
        self.params = params
        self.prompts = prompts
        self.data = data
        self.cfg = cfg
        self.node_task = isinstance(data, Graph)
        if self.node_task:
            if cfg.K > data.n_nodes:
                raise errors.InvalidRank(f"K={cfg.K} exceeds the fine-tune graph's {data.n_nodes} nodes")
            self.bases = [decompose(data, k=cfg.K, normalized=cfg.normalized, seed=seed)]
            self.labels = data.node_labels
        else:
            self.bases = [decompose(g, k=min(cfg.K, g.n_nodes), normalized=cfg.normalized, seed=seed)
                          for g in data.graphs]
            if data.graph_labels is None:
                raise errors.TrainingError("graph-level fine-tuning needs graph labels")
            self.labels = np.asarray(data.graph_labels[:, 0], dtype=np.int64)
        logger.debug(f"Prepared {len(self.bases)} truncated bases (K={cfg.K})")

    @property
    def n_classes(self):
        return self.prompts.label.n_classes

    def arrays(self):
        """Model and prompt arrays by name (names are disjoint)."""
        arrays = dict(self.params.arrays)
        arrays.update(self.prompts.named_arrays())
        return arrays

    def trainable_names(self):
        names = self.params.trainable_names() + self.prompts.trainable_names()
        return names

    def variables(self, trainable=None):
        trainable = set(self.trainable_names() if trainable is None else trainable)
        return {name: tape.Var(arr, name=name, requires_grad=name in trainable)
                for name, arr in self.arrays().items()}

    def _prompt_vars(self, variables):
        return {name: variables[name] for name in self.prompts.alignment.arrays}

    def embeddings(self, variables, ids):
        """Backbone embeddings: node rows ``ids`` (node task) or readouts of graphs ``ids``."""
        sp = self.prompts.signal
        kwargs = dict(prompt_vars=self._prompt_vars(variables), weights=variables,
                      right_rotation=self.cfg.right_rotation, require_frozen=self.cfg.ablation != "pl")
        if self.node_task:
            X = apply_signal_prompt(self.data.signals, sp, variables["alpha"], variables["P_s"])
            Z = aligned_forward(self.bases[0], self.prompts.alignment, self.params, X, **kwargs)
            return tape.take_rows(Z, ids)
        rows = []
        for gi in ids:
            g = self.data.graphs[gi]
            X = apply_signal_prompt(g.signals, sp, variables["alpha"], variables["P_s"])
            Z = aligned_forward(self.bases[gi], self.prompts.alignment, self.params, X, **kwargs)
            rows.append(readout_mean(Z))
        return tape.stack_rows(rows)

    def head_outputs(self, variables, ids):
        return head_forward(variables, self.embeddings(variables, ids))

    def loss(self, variables, ids):
        H = self.head_outputs(variables, ids)
        loss = label_infonce(H, self.labels[ids], variables["P_l"], self.cfg.temperature, reduction="mean")
        if self.cfg.ortho_penalty and self.prompts.ablation not in ("pt", "probe"):
            loss = tape.add(loss, tape.scale(self._ortho(variables), self.cfg.ortho_penalty))
        return loss

    def _ortho(self, variables):
        ap = self.prompts.alignment
        if ap.mode == "lowrank":
            A, B = variables["P_t.A"], variables["P_t.B"]
            P = tape.add(np.eye(ap.size), tape.matmul(A, tape.transpose(B)))
        else:
            P = variables["P_t"]
        return tape.sum_squares(tape.sub(tape.matmul(tape.transpose(P), P), np.eye(ap.size)))

    def predict(self, ids):
        H = self.head_outputs(self.variables(trainable=()), ids).value
        return np.argmax(_cosine(H, self.prompts.label.P_l), axis=1)

    def scores(self, ids):
        H = self.head_outputs(self.variables(trainable=()), ids).value
        sims = _cosine(H, self.prompts.label.P_l)
        return sims[:, 1] - sims[:, 0]

    def metric(self, ids):
        """Accuracy for node tasks; ROC-AUC for binary graph tasks (accuracy if one class is present)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return float("nan")
        labels = self.labels[ids]
        if not self.node_task and self.n_classes == 2:
            if np.unique(labels).size == 2:
                return roc_auc(self.scores(ids), labels)
            logger.warning("Evaluation split holds a single graph class; reporting accuracy")
        return accuracy(self.predict(ids), labels)


@dataclass
class FinetuneResult:
    prompts: PromptSet
    params: object
    trace: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")
    pipeline: PromptPipeline | None = None

    @property
    def signal(self):
        return self.prompts.signal

    @property
    def alignment(self):
        return self.prompts.alignment

    @property
    def label(self):
        return self.prompts.label

    def trace_frame(self):
        return pd.DataFrame(self.trace, columns=["epoch", "loss", "train_metric", "val_metric"])


def _snapshot(arrays, names):
    return {name: arrays[name].copy() for name in names}


def _restore(arrays, snapshot):
    for name, value in snapshot.items():
        arrays[name][...] = value


def _finetune_checkpoint(pipeline, adam, trace, epoch, best, best_epoch, best_metric, seed, config, config_hash):
    prompts = dict(pipeline.prompts.named_arrays())
    for name, value in best.items():
        prompts[f"best.{name}"] = value
    return Checkpoint(
        stage="finetune",
        epoch=epoch,
        model=pipeline.params,
        prompts=prompts,
        adam=adam,
        trace=[list(row) for row in trace],
        rng={"seed": int(seed), "tag": "finetune"},
        config=config or {},
        config_hash=config_hash,
        extra={
            "prompt_cfg": pipeline.cfg.to_dict(),
            "per_graph": not pipeline.node_task,
            "best_epoch": best_epoch,
            "best_metric": None if np.isnan(best_metric) else best_metric,
        },
    )


def restore_prompts(ckpt):
    """PromptSet and model of a fine-tune checkpoint (current, not best, state)."""
    arrays = {k: v for k, v in ckpt.prompts.items() if not k.startswith("best.")}
    cfg = ckpt.extra["prompt_cfg"]
    return PromptSet.from_arrays(arrays, ckpt.extra["per_graph"], cfg["ablation"]), ckpt.model


def selected_state(ckpt):
    """PromptSet, model and PromptConfig of a fine-tune checkpoint with the best validation state applied."""
    prompts, params = restore_prompts(ckpt)
    prompts, params = prompts.copy(), params.copy()
    arrays = dict(params.arrays)
    arrays.update(prompts.named_arrays())
    for key, value in ckpt.prompts.items():
        if key.startswith("best."):
            arrays[key[len("best."):]][...] = value
    return prompts, params, PromptConfig(**ckpt.extra["prompt_cfg"])


def finetune_loop(pretrained, data, cfg, seed=0, *, train_ids=None, val_ids=None, resume=None,
                  checkpoint_dir=None, config=None, config_hash=""):
    """
    Train prompts and a fresh head on a fine-tune Graph or GraphSet.

    The backbone stays frozen (except in the ``pl`` end-to-end ablation).
    Every ``cfg.checkpoint_every`` epochs, and after the last one, the
    validation metric is computed; the best of these states is returned.

    Args:
        pretrained: Pre-trained ModelParams (not modified)
        data: Graph (node classification) or GraphSet (graph classification)
        cfg: PromptConfig
        seed: Master seed
        train_ids: Training node or graph ids; defaults to every labeled one
        val_ids: Validation ids; defaults to ``train_ids``
        resume: Optional fine-tune Checkpoint to continue from
        checkpoint_dir: Directory for the periodic checkpoints

    Returns:
        FinetuneResult holding the selected prompts, params and the metric trace

    Raises:
        TrainingError: training ids without labels
        NonFiniteLoss: the loss became NaN or infinite (carries the epoch)
    """
    node_task = isinstance(data, Graph)
    if node_task and not data.is_labeled:
        raise errors.TrainingError("fine-tune graph has no node labels")
    labels_all = data.node_labels if node_task else (
        None if data.graph_labels is None else np.asarray(data.graph_labels[:, 0], dtype=np.int64))
    if labels_all is None:
        raise errors.TrainingError("fine-tune graphs have no labels")
    if train_ids is None:
        train_ids = np.flatnonzero(labels_all >= 0)
    train_ids = np.asarray(train_ids, dtype=np.int64)
    val_ids = train_ids if val_ids is None else np.asarray(val_ids, dtype=np.int64)
    if train_ids.size == 0 or np.any(labels_all[train_ids] < 0):
        raise errors.TrainingError("training split has missing labels")
    n_classes = data.n_classes if node_task else int(labels_all.max()) + 1

    if resume is not None:
        if resume.stage != "finetune":
            raise errors.CheckpointError(f"cannot resume fine-tuning from a {resume.stage} checkpoint")
        prompts, params = restore_prompts(resume)
        prompts = prompts.copy()
        params = params.copy()
        adam = AdamState(resume.adam.step, {k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()})
        trace = [tuple(row) for row in resume.trace]
        start = resume.epoch
        best = {k[len("best."):]: v.copy() for k, v in resume.prompts.items() if k.startswith("best.")}
        best_epoch = resume.extra["best_epoch"]
        best_metric = resume.extra["best_metric"]
        best_metric = float("nan") if best_metric is None else best_metric
        pipeline = PromptPipeline(params, prompts, data, cfg, seed)
    else:
        arrays = {k: v.copy() for k, v in pretrained.arrays.items() if not k.startswith("head.")}
        arrays.update(init_head(pretrained.embed_dim, pretrained.arrays["head.w1"].shape[1],
                                pretrained.out_dim, seed=seed))
        params = ModelParams(arrays, pretrained.n_layers, frozen=cfg.ablation != "pl")
        n_rows = data.n_nodes if node_task else 0
        signal = SignalPrompt.init(n_rows, params.in_dim, cfg.L, seed=seed, per_graph=not node_task)
        if node_task:
            alignment = AlignmentPrompt.init(data.n_nodes, cfg.pt_mode, cfg.rank, seed=seed)
        else:
            alignment = AlignmentPrompt.init(cfg.K, "graph")
        placeholder = LabelPrompt(np.ones((n_classes, params.out_dim)))
        prompts = PromptSet(signal, alignment, placeholder, cfg.ablation)
        pipeline = PromptPipeline(params, prompts, data, cfg, seed)
        H0 = pipeline.head_outputs(pipeline.variables(trainable=()), train_ids).value
        prompts.label = init_label_prompt(H0, labels_all[train_ids], n_classes, seed=seed)
        adam = AdamState()
        trace = []
        start = 0
        best, best_epoch, best_metric = {}, 0, float("nan")

    arrays = pipeline.arrays()
    trainable = pipeline.trainable_names()
    if not best:
        best = _snapshot(arrays, trainable)
    logger.info(f"Fine-tuning {'nodes' if node_task else 'graphs'} ({len(train_ids)} train, {len(val_ids)} val), "
                f"ablation={cfg.ablation}, trainable={sum(arrays[n].size for n in trainable)} scalars")

    for epoch in range(start, cfg.epochs):
        variables = pipeline.variables()
        try:
            loss = pipeline.loss(variables, train_ids)
            grads = tape.backward(loss, variables)
        except errors.NonFiniteLoss as e:
            raise errors.NonFiniteLoss(str(e), epoch=epoch) from None
        adam_step(arrays, grads, adam, cfg.lr)
        done = epoch + 1
        train_metric = val_metric = None
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            train_metric = pipeline.metric(train_ids)
            val_metric = pipeline.metric(val_ids)
            if np.isnan(best_metric) or val_metric > best_metric:
                best, best_epoch, best_metric = _snapshot(arrays, trainable), done, val_metric
            logger.info(f"Fine-tune epoch {done}/{cfg.epochs}: loss {float(loss.value):.4f}, "
                        f"train {train_metric:.4f}, val {val_metric:.4f}")
        else:
            logger.debug(f"Fine-tune epoch {done}/{cfg.epochs}: loss {float(loss.value):.4f}")
        trace.append((done, float(loss.value), train_metric, val_metric))
        if checkpoint_dir and done % cfg.checkpoint_every == 0:
            save_checkpoint(_finetune_checkpoint(pipeline, adam, trace, done, best, best_epoch, best_metric,
                                                 seed, config, config_hash),
                            checkpoint_path(checkpoint_dir, "finetune", done))

    _restore(arrays, best)
    if best_epoch:
        logger.info(f"Selected epoch {best_epoch} (validation {best_metric:.4f})")
    return FinetuneResult(pipeline.prompts, pipeline.params, [tuple(row) for row in trace],
                          best_epoch, best_metric, pipeline)


def finetune_state_checkpoint(result, adam=None, seed=0, config=None, config_hash=""):
    """Checkpoint of a finished fine-tuning run (selected state)."""
    pipeline = result.pipeline
    return _finetune_checkpoint(pipeline, adam or AdamState(), result.trace, len(result.trace),
                                _snapshot(pipeline.arrays(), pipeline.trainable_names()),
                                result.best_epoch, result.best_metric, seed, config, config_hash)
