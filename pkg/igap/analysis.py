"""
Spectral diagnostics and task metrics.

Sp_SNR of a unit signal x on component i is ``|u_i^T x| / (1 - |u_i^T x|)``;
the graph SNR is its mean over the K components of a basis. Alignment
profiles measure how strongly a set of signals lines up with each component,
and their Spearman trend against eigenvalue rank is the computable form of
"training concentrates signals on low frequencies".
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.metrics import accuracy_score, roc_auc_score

from . import errors
from .const import SNR_CLAMP, SNR_INFINITY

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-8


@dataclass(frozen=True)
class AlignmentProfile:
    """Mean absolute alignment per component, in eigenvalue order."""

    alignment: np.ndarray
    eigenvalues: np.ndarray
    spearman_rho: float
    n_signals: int
    n_skipped: int = 0

    def to_frame(self):
        return pd.DataFrame({
            "component": np.arange(self.alignment.shape[0]),
            "lambda": self.eigenvalues,
            "alignment": self.alignment,
        })


def _check_unit(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if abs(norm - 1.0) > UNIT_TOL:
        raise errors.ContractViolation(f"signal must be unit-norm, got |x| = {norm:.6g}")
    return x


def _snr(projection):
    p = abs(float(projection))
    if 1.0 - p < SNR_CLAMP:
        return SNR_INFINITY
    return p / (1.0 - p)


def sp_snr(basis, x, i):
    """
    Spectral component SNR of unit signal x on component i.

    Returns:
        ``|u_i^T x| / (1 - |u_i^T x|)``, or ``SNR_INFINITY`` when x lies on u_i

    Raises:
        ContractViolation: x not unit-norm
        InvalidRank: i outside the basis
    """
    x = _check_unit(x)
    if not 0 <= i < basis.k:
        raise errors.InvalidRank(f"component {i} outside a {basis.k}-component basis")
    if x.shape[0] != basis.n:
        raise errors.DimensionMismatch(f"signal length {x.shape[0]} != n={basis.n}")
    return _snr(basis.eigenvectors[:, i] @ x)


def graph_snr(basis, x):
    """Mean Sp_SNR over every component of the basis (infinite if any is)."""
    x = _check_unit(x)
    if x.shape[0] != basis.n:
        raise errors.DimensionMismatch(f"signal length {x.shape[0]} != n={basis.n}")
    if basis.k == 0:
        return 0.0
    values = [_snr(p) for p in basis.eigenvectors.T @ x]
    return float(np.mean(values))


def alignment_profile(basis, Z):
    """
    Per-component mean ``|u_i^T z|`` over the unit-normalized rows z of Z.

    Rows are signals on the graph (length n); pass ``Z.T`` for an n x H
    embedding matrix. Zero-norm rows are skipped and counted.

    Returns:
        AlignmentProfile with the Spearman correlation of (i, a_i)
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != basis.n:
        raise errors.DimensionMismatch(f"signals have length {Z.shape[1]}, basis has n={basis.n}")
    norms = np.linalg.norm(Z, axis=1)
    keep = norms > 1e-12
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        logger.warning(f"Skipped {skipped} zero-norm signals in alignment profile")
    if not np.any(keep):
        raise errors.ZeroNormError("every signal has zero norm")
    unit = Z[keep] / norms[keep, None]
    alignment = np.mean(np.abs(unit @ basis.eigenvectors), axis=0)
    alignment = np.clip(alignment, 0.0, 1.0)
    # round away float noise so exact ties stay ties
    rho = _spearman(np.arange(basis.k), np.round(alignment, 12))
    return AlignmentProfile(alignment, basis.eigenvalues.copy(), rho, int(Z.shape[0]), skipped)


def _spearman(x, y):
    if len(x) < 2 or np.all(y == y[0]):
        return 0.0
    return float(spearmanr(x, y).statistic)


def snr_profile(basis, Z):
    """Mean Sp_SNR per component over the unit-normalized rows of Z."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    norms = np.linalg.norm(Z, axis=1)
    unit = Z[norms > 1e-12] / norms[norms > 1e-12, None]
    values = np.array([[_snr(p) for p in row] for row in unit @ basis.eigenvectors])
    return values.mean(axis=0) if values.size else np.zeros(basis.k)


def accuracy(predictions, labels):
    """Exact-match fraction."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise errors.ContractViolation("accuracy of an empty prediction set")
    if predictions.shape != labels.shape:
        raise errors.DimensionMismatch(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    return float(accuracy_score(labels, predictions))


def roc_auc(scores, labels):
    """
    Probability that a random positive outranks a random negative, ties 1/2.

    Raises:
        ContractViolation: only one class present
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise errors.DimensionMismatch(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if np.unique(labels).size != 2:
        raise errors.ContractViolation("ROC-AUC needs both classes present")
    return float(roc_auc_score(labels, scores))


def export_embeddings(Z, path):
    """Write one whitespace-separated row per sample."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in Z:
            f.write(" ".join(f"{value:.17g}" for value in row) + "\n")
    logger.info(f"Exported {Z.shape[0]} x {Z.shape[1]} embeddings to {path}")


def load_embeddings(path):
    return np.loadtxt(path, ndmin=2)


def spectrum_report(basis, Z):
    """
    Per-component table ``component,lambda,alignment,sp_snr`` of the rows of Z.

    Args:
        basis: SpectralBasis
        Z: Signals as rows (pass ``Z.T`` for n x H embeddings)

    Returns:
        DataFrame with one row per component
    """
    profile = alignment_profile(basis, Z)
    frame = profile.to_frame()
    frame["sp_snr"] = snr_profile(basis, Z)
    return frame


def write_csv(frame, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
