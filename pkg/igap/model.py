"""
Spectral-filter GNN, task head, parameter containers and the Adam optimizer.

Each layer computes ``Z <- ReLU(U diag(g(lambda)) U^T Z W)`` with a polynomial
filter ``g(lambda) = sum_p c_p lambda^p``; the final layer has no ReLU. Because
the filter is a polynomial in lambda it can be evaluated on any graph's
eigenvalues, which is what lets a pre-trained backbone run on a different
fine-tuning graph.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import errors
from . import tape
from .const import (
    ADAM_BETAS,
    ADAM_EPS,
    FILTER_DEGREE,
    HEAD_HIDDEN_DIM,
    HEAD_OUT_DIM,
    HIDDEN_DIM,
    NUM_LAYERS,
)
from .rng import stream

logger = logging.getLogger(__name__)

HEAD_NAMES = ("head.w1", "head.b1", "head.w2", "head.b2")


@dataclass(frozen=True)
class FilterKernel:
    """Polynomial spectral response ``g(lambda) = sum_p c_p lambda^p``."""

    coeffs: np.ndarray

    @property
    def degree(self):
        return int(self.coeffs.shape[0]) - 1

    def response(self, eigenvalues):
        return np.polynomial.polynomial.polyval(np.asarray(eigenvalues, dtype=np.float64), self.coeffs)


@dataclass
class ModelParams:
    """
    Named parameter arrays of the backbone and the head.

    Backbone arrays are ``layer{i}.coeffs`` (P+1) and ``layer{i}.weight``
    (F_i x F_{i+1}); the head is ``head.w1``, ``head.b1``, ``head.w2``,
    ``head.b2``. When ``frozen`` is set only the head is trainable.
    """

    arrays: dict
    n_layers: int
    frozen: bool = False

    def __post_init__(self):
        dims = [self.arrays[f"layer{i}.weight"].shape for i in range(self.n_layers)]
        for (_, out_dim), (in_dim, _) in zip(dims, dims[1:]):
            if out_dim != in_dim:
                raise errors.DimensionMismatch(f"layer dimensions do not chain: {dims}")
        if self.arrays["head.w1"].shape[0] != dims[-1][1]:
            raise errors.DimensionMismatch(
                f"head input {self.arrays['head.w1'].shape[0]} != backbone output {dims[-1][1]}")

    @property
    def in_dim(self):
        return int(self.arrays["layer0.weight"].shape[0])

    @property
    def embed_dim(self):
        return int(self.arrays[f"layer{self.n_layers - 1}.weight"].shape[1])

    @property
    def out_dim(self):
        return int(self.arrays["head.w2"].shape[1])

    def layers(self):
        """List of (FilterKernel, channel weight matrix) per layer."""
        return [(FilterKernel(self.arrays[f"layer{i}.coeffs"]), self.arrays[f"layer{i}.weight"])
                for i in range(self.n_layers)]

    def backbone_names(self):
        names = []
        for i in range(self.n_layers):
            names += [f"layer{i}.coeffs", f"layer{i}.weight"]
        return names

    def head_names(self):
        return list(HEAD_NAMES)

    def named_arrays(self):
        return dict(self.arrays)

    def trainable_names(self):
        return self.head_names() if self.frozen else self.backbone_names() + self.head_names()

    def copy(self, frozen=None):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.n_layers,
                           self.frozen if frozen is None else frozen)

    def variables(self, trainable=None):
        """
        Wrap the arrays as tape variables.

        Args:
            trainable: Names that receive gradients; defaults to ``trainable_names()``

        Returns:
            Dict name -> Var
        """
        trainable = set(self.trainable_names() if trainable is None else trainable)
        return {name: tape.Var(arr, name=name, requires_grad=name in trainable)
                for name, arr in self.arrays.items()}


def init_model(in_dim, hidden_dim=HIDDEN_DIM, n_layers=NUM_LAYERS, degree=FILTER_DEGREE,
               head_hidden=HEAD_HIDDEN_DIM, head_out=HEAD_OUT_DIM, seed=0):
    """
    Initialize a model: identity filters (c_0=1), uniform(+-1/sqrt(fan_in))
    channel and head weights, zero head biases.

    Args:
        in_dim: Signal dimension F of the input graphs
        hidden_dim: Channel width of every layer
        n_layers: Number of spectral layers
        degree: Filter polynomial degree P
        head_hidden: Head hidden width
        head_out: Head output width
        seed: Master seed

    Returns:
        ModelParams
    """
    gen = stream(seed, "init-model")
    arrays = {}
    dims = [in_dim] + [hidden_dim] * n_layers

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return gen.uniform(-bound, bound, size=shape)

    for i in range(n_layers):
        coeffs = np.zeros(degree + 1)
        coeffs[0] = 1.0
        arrays[f"layer{i}.coeffs"] = coeffs
        arrays[f"layer{i}.weight"] = uniform(dims[i], (dims[i], dims[i + 1]))
    arrays.update(init_head(hidden_dim, head_hidden, head_out, seed=seed))
    logger.debug(f"Initialized model {dims} -> head {head_hidden} -> {head_out}")
    return ModelParams(arrays, n_layers)


def init_head(embed_dim, head_hidden=HEAD_HIDDEN_DIM, head_out=HEAD_OUT_DIM, seed=0):
    """Fresh task head arrays: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    gen = stream(seed, "init-head")
    w1_bound = 1.0 / np.sqrt(embed_dim)
    w2_bound = 1.0 / np.sqrt(head_hidden)
    return {
        "head.w1": gen.uniform(-w1_bound, w1_bound, size=(embed_dim, head_hidden)),
        "head.b1": np.zeros((1, head_hidden)),
        "head.w2": gen.uniform(-w2_bound, w2_bound, size=(head_hidden, head_out)),
        "head.b2": np.zeros((1, head_out)),
    }


def _as_variables(params):
    if isinstance(params, ModelParams):
        return {name: tape.Var(arr, name=name) for name, arr in params.arrays.items()}
    return params


def _n_layers(weights):
    return sum(1 for name in weights if name.endswith(".coeffs"))


def filter_response(eigenvalues, coeffs):
    """``g(lambda)`` as a tape expression of the coefficient vector."""
    coeffs = tape.lift(coeffs)
    vander = np.vander(np.asarray(eigenvalues, dtype=np.float64), coeffs.shape[0], increasing=True)
    return tape.matmul(vander, coeffs)


def spectral_layer(left, right_t, eigenvalues, coeffs, weight, Z):
    """``left diag(g(lambda)) right_t (Z W)``; left/right_t may be tape expressions."""
    Y = tape.matmul(Z, weight)
    T = tape.matmul(right_t, Y)
    T = tape.scale_rows(T, filter_response(eigenvalues, coeffs))
    return tape.matmul(left, T)


def backbone_forward(left, right_t, eigenvalues, weights, X, activation=True):
    """Run every spectral layer with the given (possibly aligned) basis pair."""
    n_layers = _n_layers(weights)
    Z = tape.lift(X)
    for i in range(n_layers):
        Z = spectral_layer(left, right_t, eigenvalues, weights[f"layer{i}.coeffs"], weights[f"layer{i}.weight"], Z)
        if activation and i < n_layers - 1:
            Z = tape.relu(Z)
    return Z


def spectral_forward(basis, params, X, activation=True):
    """
    Node embeddings ``Z = f_theta(A, X)``.

    Args:
        basis: SpectralBasis of the graph (full or truncated)
        params: ModelParams, or a dict name -> Var from ``ModelParams.variables``
        X: n x F signal matrix (array or Var)
        activation: Apply ReLU between layers; False makes the map linear in X

    Returns:
        n x H embedding as a Var
    """
    weights = _as_variables(params)
    X = tape.lift(X)
    if X.shape[0] != basis.n:
        raise errors.DimensionMismatch(f"signals have {X.shape[0]} rows, basis has n={basis.n}")
    if X.shape[1] != weights["layer0.weight"].shape[0]:
        raise errors.DimensionMismatch(
            f"signals have {X.shape[1]} columns, first layer expects {weights['layer0.weight'].shape[0]}")
    U = basis.eigenvectors
    return backbone_forward(U, U.T, basis.eigenvalues, weights, X, activation=activation)


def readout_mean(Z):
    """Graph-level embedding as the row mean (1 x H)."""
    Z = tape.lift(Z)
    if Z.shape[0] == 0:
        raise errors.ContractViolation("readout of an empty graph")
    return tape.mean_rows(Z)


def head_forward(params, Z):
    """``ReLU(Z W1 + b1) W2 + b2``."""
    weights = _as_variables(params)
    Z = tape.lift(Z)
    if Z.shape[1] != weights["head.w1"].shape[0]:
        raise errors.DimensionMismatch(f"head expects {weights['head.w1'].shape[0]} inputs, got {Z.shape[1]}")
    hidden = tape.relu(tape.add(tape.matmul(Z, weights["head.w1"]), weights["head.b1"]))
    return tape.add(tape.matmul(hidden, weights["head.w2"]), weights["head.b2"])


def param_count(obj, trainable_only=True):
    """
    Scalar count per parameter group.

    Args:
        obj: Anything exposing ``named_arrays()`` and ``trainable_names()``
            (ModelParams, SignalPrompt, AlignmentPrompt, LabelPrompt, PromptSet)
        trainable_only: Count only trainable groups

    Returns:
        Dict group -> count
    """
    names = obj.trainable_names() if trainable_only else list(obj.named_arrays())
    arrays = obj.named_arrays()
    return {name: int(arrays[name].size) for name in names}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def named_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out


def adam_step(arrays, grads, state, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    """
    One Adam update without weight decay, applied in place.

    Args:
        arrays: Dict name -> parameter array (updated in place)
        grads: Mapping name -> gradient; names not present are left untouched
        state: AdamState (updated in place and returned)
        lr: Learning rate

    Returns:
        The updated AdamState
    """
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        if g.shape != arrays[name].shape:
            raise errors.DimensionMismatch(f"gradient {name} has shape {g.shape}, parameter {arrays[name].shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        arrays[name] -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def all_finite(arrays):
    return all(np.all(np.isfinite(arr)) for arr in (arrays.values() if isinstance(arrays, Mapping) else arrays))
