"""
Minimal reverse-mode differentiation over numpy arrays.

Each operation records its parents and a closure that pushes the output
gradient back to them; ``backward`` walks the recorded graph in reverse
topological order. The vocabulary is fixed to what the spectral model, the
prompts and the contrastive losses need: matmul, diag-scale, add, ReLU, mean,
cosine, log-sum-exp and a handful of shape helpers.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .rng import stream

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class Var:
    """A node in the recorded computation."""

    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, value, name=None, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def lift(x):
    """Wrap a constant array as a Var (no-op for Vars)."""
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    a, b = lift(a), lift(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise errors.DimensionMismatch(f"matmul {a.shape} @ {b.shape}")
    out_value = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.outer(g, b.value) if b.value.ndim == 1 else g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g if b.value.ndim == 1 else a.value.T @ g)

    return _node(out_value, (a, b), backward)


def add(a, b):
    a, b = lift(a), lift(b)
    try:
        out_value = a.value + b.value
    except ValueError:
        raise errors.DimensionMismatch(f"add {a.shape} + {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_value, (a, b), backward)


def sub(a, b):
    return add(a, scale(b, -1.0))


def scale(a, c):
    """Multiply by a constant scalar."""
    a = lift(a)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.value * c, (a,), backward)


def transpose(a):
    a = lift(a)

    def backward(g):
        a._accumulate(g.T)

    return _node(a.value.T, (a,), backward)


def relu(a):
    a = lift(a)
    mask = a.value > 0

    def backward(g):
        a._accumulate(g * mask)

    return _node(a.value * mask, (a,), backward)


def scale_rows(a, d):
    """``diag(d) @ a`` for a matrix a and a vector d."""
    a, d = lift(a), lift(d)
    if d.value.shape[0] != a.value.shape[0]:
        raise errors.DimensionMismatch(f"diag-scale of {a.shape} by {d.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * d.value[:, None])
        if d.requires_grad:
            d._accumulate(np.sum(g * a.value, axis=1))

    return _node(a.value * d.value[:, None], (a, d), backward)


def mean_rows(a):
    """Row-wise mean as a 1 x H matrix."""
    a = lift(a)
    n = a.value.shape[0]
    if n == 0:
        raise errors.DimensionMismatch("mean over zero rows")

    def backward(g):
        a._accumulate(np.repeat(g / n, n, axis=0))

    return _node(a.value.mean(axis=0, keepdims=True), (a,), backward)


def take_rows(a, index):
    a = lift(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _node(a.value[index], (a,), backward)


def stack_rows(parts):
    """Concatenate matrices along rows."""
    parts = [lift(p) for p in parts]
    sizes = [p.value.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=0), tuple(parts), backward)


def block(a, rows, cols):
    """Top-left ``rows x cols`` block."""
    a = lift(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[:rows, :cols] = g
        a._accumulate(full)

    return _node(a.value[:rows, :cols], (a,), backward)


def sum_squares(a):
    a = lift(a)

    def backward(g):
        a._accumulate(2.0 * g * a.value)

    return _node(np.sum(a.value ** 2), (a,), backward)


def cosine_matrix(a, b):
    """
    Pairwise cosine similarity between the rows of a (p x h) and b (q x h).

    Raises:
        ZeroNormError: if any row has zero norm
    """
    a, b = lift(a), lift(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise errors.DimensionMismatch(f"cosine between {a.shape} and {b.shape}")
    na = np.linalg.norm(a.value, axis=1, keepdims=True)
    nb = np.linalg.norm(b.value, axis=1, keepdims=True)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        raise errors.ZeroNormError("cosine similarity of a zero-norm vector")
    ah, bh = a.value / na, b.value / nb

    def backward(g):
        if a.requires_grad:
            da = g @ bh
            a._accumulate((da - ah * np.sum(da * ah, axis=1, keepdims=True)) / na)
        if b.requires_grad:
            db = g.T @ ah
            b._accumulate((db - bh * np.sum(db * bh, axis=1, keepdims=True)) / nb)

    return _node(ah @ bh.T, (a, b), backward)


def cross_entropy(logits, targets, mask=None, reduction="sum"):
    """
    Masked softmax cross-entropy via log-sum-exp.

    ``-sum_i [logits[i, t_i] - logsumexp_{j in mask_i} logits[i, j]]``

    Args:
        logits: B x C Var
        targets: Length-B integer column of the positive per row
        mask: Optional B x C boolean; False entries are excluded from row i
        reduction: "sum" or "mean"
    """
    logits = lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    B, C = logits.value.shape
    mask = np.ones((B, C), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not np.all(mask[np.arange(B), targets]):
        raise errors.ContractViolation("the positive of every row must be inside its mask")
    z = np.where(mask, logits.value, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.where(mask, np.exp(z - zmax), 0.0)
    denom = ez.sum(axis=1, keepdims=True)
    lse = (zmax + np.log(denom)).ravel()
    per_row = lse - logits.value[np.arange(B), targets]
    factor = 1.0 / B if reduction == "mean" else 1.0
    probs = ez / denom

    def backward(g):
        grad = probs.copy()
        grad[np.arange(B), targets] -= 1.0
        logits._accumulate(g * factor * grad)

    return _node(per_row.sum() * factor, (logits,), backward)


@dataclass
class GradientBundle(Mapping):
    """Gradients keyed by parameter name, shape-congruent with the parameters."""

    grads: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)


def _topological(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss, variables=None):
    """
    Reverse pass from a scalar loss.

    Args:
        loss: Scalar Var produced by recorded operations
        variables: Optional mapping of name -> Var to collect; defaults to every
            named leaf that requires a gradient

    Returns:
        GradientBundle of name -> gradient array; variables that were not
        reached get a zero array, frozen ones are absent

    Raises:
        NonFiniteLoss: if the loss is NaN or infinite
    """
    if loss.value.size != 1:
        raise errors.ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        raise errors.NonFiniteLoss(f"loss is {float(loss.value)}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if variables is None:
        variables = {node.name: node for node in order if node.name and node.requires_grad and not node._parents}
    grads = {}
    for name, var in variables.items():
        if not var.requires_grad:
            continue
        grads[name] = var.grad if var.grad is not None else np.zeros_like(var.value)
    return GradientBundle(grads)


def gradcheck(fn, arrays, n_coords=20, h=1e-4, seed=0):
    """
    Compare reverse-mode gradients with central finite differences.

    Args:
        fn: Callable taking a dict name -> Var and returning a scalar Var
        arrays: Dict name -> ndarray of the parameters to check
        n_coords: Coordinates sampled per array
        h: Finite-difference step
        seed: Seed for coordinate sampling

    Returns:
        Dict name -> maximum relative error over the sampled coordinates
    """
    variables = {name: Var(arr.copy(), name=name, requires_grad=True) for name, arr in arrays.items()}
    grads = backward(fn(variables), variables)
    gen = stream(seed, "gradcheck")
    report = {}
    for name, arr in arrays.items():
        flat_size = arr.size
        coords = gen.choice(flat_size, size=min(n_coords, flat_size), replace=False)
        worst = 0.0
        for coord in coords:
            idx = np.unravel_index(coord, arr.shape)
            values = []
            for step in (h, -h):
                shifted = {k: Var(v.copy(), name=k) for k, v in arrays.items()}
                shifted[name].value[idx] += step
                values.append(float(fn(shifted).value))
            numeric = (values[0] - values[1]) / (2 * h)
            analytic = float(grads[name][idx])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
        report[name] = worst
        logger.debug(f"gradcheck {name}: max relative error {worst:.3e}")
    return report
