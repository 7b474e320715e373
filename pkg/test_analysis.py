import os

import numpy as np
import pandas as pd
import pytest

from igap import errors
from igap.analysis import (
    SNR_INFINITY,
    accuracy,
    alignment_profile,
    export_embeddings,
    graph_snr,
    load_embeddings,
    roc_auc,
    sp_snr,
    spectrum_report,
    write_csv,
)
from igap.spectral import decompose


def mixed_signal(basis, weights):
    x = basis.eigenvectors @ np.asarray(weights, dtype=np.float64)
    return x / np.linalg.norm(x)


def test_sp_snr_of_eigenvector(path3):
    basis = decompose(path3)
    u1 = basis.eigenvectors[:, 1]
    assert sp_snr(basis, u1, 1) == SNR_INFINITY
    assert sp_snr(basis, u1, 0) == pytest.approx(0.0, abs=1e-12)


def test_sp_snr_of_even_mixture(path3):
    basis = decompose(path3)
    x = mixed_signal(basis, [1.0, 1.0, 0.0])
    assert sp_snr(basis, x, 0) == pytest.approx(1 + np.sqrt(2))
    assert graph_snr(basis, x) == pytest.approx(2 * (1 + np.sqrt(2)) / 3)


def test_sp_snr_orders_low_frequency_mixtures(erdos_renyi):
    g = erdos_renyi(25, 0.3, seed=6)
    basis = decompose(g)
    x = mixed_signal(basis, 0.7 ** np.arange(25))
    snrs = [sp_snr(basis, x, i) for i in range(25)]
    assert all(a > b for a, b in zip(snrs, snrs[1:]))


def test_sp_snr_contracts(path3):
    basis = decompose(path3)
    with pytest.raises(errors.ContractViolation):
        sp_snr(basis, np.ones(3), 0)
    with pytest.raises(errors.InvalidRank):
        sp_snr(basis, np.ones(3) / np.sqrt(3), 3)
    with pytest.raises(errors.DimensionMismatch):
        graph_snr(basis, np.ones(4) / 2)


def test_alignment_profile_decreasing_weights(erdos_renyi):
    g = erdos_renyi(10, 0.5, seed=2)
    basis = decompose(g)
    profile = alignment_profile(basis, mixed_signal(basis, np.arange(10, 0, -1)))
    assert profile.spearman_rho == pytest.approx(-1.0)
    assert profile.alignment.shape == (10,)
    assert profile.n_signals == 1


def test_alignment_profile_ties(path3):
    basis = decompose(path3)
    profile = alignment_profile(basis, mixed_signal(basis, [2.0, 1.0, 1.0]))
    assert profile.spearman_rho == pytest.approx(-np.sqrt(3) / 2)


def test_alignment_profile_of_full_basis_is_flat(path3):
    basis = decompose(path3)
    profile = alignment_profile(basis, basis.eigenvectors.T)
    np.testing.assert_allclose(profile.alignment, 1 / 3)
    assert profile.spearman_rho == 0.0


def test_alignment_profile_skips_zero_rows(path3):
    basis = decompose(path3)
    Z = np.vstack([np.zeros(3), basis.eigenvectors[:, 0]])
    profile = alignment_profile(basis, Z)
    assert profile.n_skipped == 1
    np.testing.assert_allclose(profile.alignment, [1.0, 0.0, 0.0], atol=1e-12)
    with pytest.raises(errors.ZeroNormError):
        alignment_profile(basis, np.zeros((2, 3)))
    with pytest.raises(errors.DimensionMismatch):
        alignment_profile(basis, np.ones((2, 4)))


def test_profile_frame(path3):
    frame = alignment_profile(decompose(path3), np.array([[1.0, 0.0, 0.0]])).to_frame()
    assert list(frame.columns) == ["component", "lambda", "alignment"]
    assert frame["component"].tolist() == [0, 1, 2]


def test_accuracy():
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(errors.ContractViolation):
        accuracy([], [])
    with pytest.raises(errors.DimensionMismatch):
        accuracy([0, 1], [0])


def test_roc_auc_matches_pairwise_count():
    gen = np.random.default_rng(3)
    scores = np.round(gen.standard_normal(40), 1)
    labels = np.arange(40) % 2
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert roc_auc(scores, labels) == pytest.approx(wins / (pos.size * neg.size))


def test_roc_auc_extremes():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(errors.ContractViolation):
        roc_auc([0.1, 0.2], [1, 1])


def test_embeddings_round_trip(tmp_path):
    Z = np.random.default_rng(0).standard_normal((5, 3))
    path = os.path.join(tmp_path, "emb", "z.txt")
    export_embeddings(Z, path)
    np.testing.assert_array_equal(load_embeddings(path), Z)


def test_spectrum_report(tmp_path, erdos_renyi):
    g = erdos_renyi(12, 0.4, seed=1)
    basis = decompose(g, k=5)
    frame = spectrum_report(basis, g.signals.T)
    assert list(frame.columns) == ["component", "lambda", "alignment", "sp_snr"]
    assert len(frame) == 5
    assert np.all((frame["alignment"] >= 0) & (frame["alignment"] <= 1))
    path = os.path.join(tmp_path, "report.csv")
    write_csv(frame, path)
    assert len(pd.read_csv(path)) == 5
