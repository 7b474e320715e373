import numpy as np
import pytest

from conftest import path_graph
from igap import errors, tape
from igap.graph_data import build_laplacian
from igap.model import (
    AdamState,
    FilterKernel,
    ModelParams,
    adam_step,
    all_finite,
    head_forward,
    init_head,
    init_model,
    param_count,
    readout_mean,
    spectral_forward,
)
from igap.spectral import decompose, truncate


def identity_params(F, coeffs=(1.0, 0.0), n_layers=1):
    arrays = {}
    for i in range(n_layers):
        arrays[f"layer{i}.coeffs"] = np.array(coeffs, dtype=np.float64)
        arrays[f"layer{i}.weight"] = np.eye(F)
    arrays.update(init_head(F, 4, 3, seed=0))
    return ModelParams(arrays, n_layers)


def test_identity_filter_returns_signals(erdos_renyi):
    g = erdos_renyi(12, 0.3, seed=0, n_features=3)
    Z = spectral_forward(decompose(g), identity_params(3), g.signals)
    np.testing.assert_allclose(Z.value, g.signals, atol=1e-12)


def test_linear_filter_is_laplacian_product():
    g = path_graph(6, n_features=2)
    Z = spectral_forward(decompose(g), identity_params(2, coeffs=(0.0, 1.0)), g.signals)
    np.testing.assert_allclose(Z.value, build_laplacian(g).entries @ g.signals, atol=1e-10)


def test_single_component_basis_averages(erdos_renyi):
    g = erdos_renyi(15, 0.4, seed=1, n_features=2)
    params = identity_params(2)
    W = np.array([[1.0, 2.0], [-1.0, 0.5]])
    params.arrays["layer0.weight"][:] = W
    Z = spectral_forward(truncate(decompose(g), 1), params, g.signals)
    expected = (g.signals @ W).mean(axis=0)
    np.testing.assert_allclose(Z.value, np.tile(expected, (15, 1)), atol=1e-10)


def test_forward_without_activation_is_linear(erdos_renyi):
    g = erdos_renyi(18, 0.3, seed=4, n_features=3)
    basis = decompose(g)
    params = init_model(3, hidden_dim=5, n_layers=2, degree=2, seed=6)
    for i in range(2):
        params.arrays[f"layer{i}.coeffs"][:] = [0.5, -0.3, 0.1]
    gen = np.random.default_rng(8)
    X, Y = gen.standard_normal((18, 3)), gen.standard_normal((18, 3))
    a, b = 1.7, -0.6
    combined = spectral_forward(basis, params, a * X + b * Y, activation=False).value
    separate = (a * spectral_forward(basis, params, X, activation=False).value
                + b * spectral_forward(basis, params, Y, activation=False).value)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_forward_dimension_checks(path3):
    params = identity_params(2)
    with pytest.raises(errors.DimensionMismatch):
        spectral_forward(decompose(path3), params, np.ones((3, 3)))
    with pytest.raises(errors.DimensionMismatch):
        spectral_forward(decompose(path3), params, np.ones((4, 2)))


def test_filter_kernel_response():
    kernel = FilterKernel(np.array([1.0, -0.5, 0.25]))
    np.testing.assert_allclose(kernel.response(np.array([0.0, 2.0])), [1.0, 1.0])
    assert kernel.degree == 2


def test_readout_mean():
    np.testing.assert_array_equal(readout_mean(np.array([[1.0, 0.0], [0.0, 1.0]])).value, [[0.5, 0.5]])
    np.testing.assert_array_equal(readout_mean(np.array([[3.0, 4.0]] * 5)).value, [[3.0, 4.0]])
    np.testing.assert_array_equal(readout_mean(np.array([[7.0, -1.0]])).value, [[7.0, -1.0]])
    with pytest.raises(errors.ContractViolation):
        readout_mean(np.zeros((0, 2)))


def test_head_with_zero_weights_outputs_bias():
    arrays = init_head(3, 4, 2)
    arrays["head.w1"][:] = 0.0
    arrays["head.w2"][:] = 0.0
    arrays["head.b2"][:] = [[1.5, -2.0]]
    out = head_forward(arrays, np.ones((5, 3)))
    np.testing.assert_array_equal(out.value, np.tile([1.5, -2.0], (5, 1)))


def test_head_matches_scalar_loop():
    gen = np.random.default_rng(4)
    arrays = init_head(4, 5, 2, seed=9)
    arrays["head.b1"][:] = gen.standard_normal((1, 5))
    arrays["head.b2"][:] = gen.standard_normal((1, 2))
    Z = gen.standard_normal((3, 4))
    out = head_forward(arrays, Z).value
    w1, b1, w2, b2 = (arrays[k] for k in ("head.w1", "head.b1", "head.w2", "head.b2"))
    for i in range(3):
        hidden = [max(0.0, sum(Z[i, a] * w1[a, h] for a in range(4)) + b1[0, h]) for h in range(5)]
        for o in range(2):
            assert out[i, o] == pytest.approx(sum(hidden[h] * w2[h, o] for h in range(5)) + b2[0, o], abs=1e-12)


def test_head_dimension_mismatch():
    with pytest.raises(errors.DimensionMismatch):
        head_forward(init_head(3, 4, 2), np.ones((2, 5)))


def test_layer_dimensions_must_chain():
    arrays = dict(init_model(3, hidden_dim=4, n_layers=2, head_hidden=2, head_out=2).arrays)
    arrays["layer1.weight"] = np.ones((5, 4))
    with pytest.raises(errors.DimensionMismatch):
        ModelParams(arrays, 2)


def test_init_model_is_seeded():
    a = init_model(5, hidden_dim=4, n_layers=2, head_hidden=3, head_out=2, seed=11)
    b = init_model(5, hidden_dim=4, n_layers=2, head_hidden=3, head_out=2, seed=11)
    for name in a.arrays:
        np.testing.assert_array_equal(a.arrays[name], b.arrays[name])
    np.testing.assert_array_equal(a.arrays["layer0.coeffs"], [1.0, 0.0, 0.0])
    assert (a.in_dim, a.embed_dim, a.out_dim) == (5, 4, 2)


def test_frozen_model_trains_only_head():
    params = init_model(3, hidden_dim=4, n_layers=2, head_hidden=2, head_out=2).copy(frozen=True)
    assert params.trainable_names() == ["head.w1", "head.b1", "head.w2", "head.b2"]
    counts = param_count(params)
    assert counts == {"head.w1": 8, "head.b1": 2, "head.w2": 4, "head.b2": 2}
    assert sum(param_count(params, trainable_only=False).values()) == 3 + 12 + 3 + 16 + 16


def test_model_gradients_match_finite_differences(erdos_renyi):
    g = erdos_renyi(10, 0.4, seed=2, n_features=3)
    basis = decompose(g)
    params = init_model(3, hidden_dim=4, n_layers=2, degree=2, head_hidden=5, head_out=3, seed=3)
    for i in range(2):
        params.arrays[f"layer{i}.coeffs"][:] = [1.0, 0.2, -0.03]
    target = np.random.default_rng(0).standard_normal((10, 3))

    def loss(variables):
        H = head_forward(variables, spectral_forward(basis, variables, g.signals))
        return tape.sum_squares(tape.sub(H, target))

    report = tape.gradcheck(loss, params.arrays, n_coords=20, seed=1)
    assert set(report) == set(params.arrays)
    assert max(report.values()) <= 1e-4


def test_tape_ops_gradients():
    gen = np.random.default_rng(5)
    arrays = {"a": gen.standard_normal((4, 3)), "b": gen.standard_normal((5, 3)), "d": gen.standard_normal(4)}

    def loss(v):
        sims = tape.cosine_matrix(tape.scale_rows(v["a"], v["d"]), v["b"])
        mask = np.ones((4, 5), dtype=bool)
        mask[0, 4] = False
        ce = tape.cross_entropy(tape.scale(sims, 2.0), [0, 1, 2, 3], mask=mask, reduction="mean")
        pooled = tape.mean_rows(tape.block(tape.take_rows(v["b"], [0, 2, 2]), 2, 2))
        return tape.add(ce, tape.sum_squares(tape.stack_rows([pooled, tape.transpose(tape.block(v["a"], 2, 1))])))

    report = tape.gradcheck(loss, arrays, n_coords=12, seed=2)
    assert max(report.values()) <= 1e-4


def test_cross_entropy_uniform_logits():
    loss = tape.cross_entropy(np.zeros((2, 4)), [0, 3])
    assert float(loss.value) == pytest.approx(2 * np.log(4))


def test_cross_entropy_requires_positive_in_mask():
    with pytest.raises(errors.ContractViolation):
        tape.cross_entropy(np.zeros((1, 3)), [1], mask=[[True, False, True]])


def test_cosine_of_zero_vector():
    with pytest.raises(errors.ZeroNormError):
        tape.cosine_matrix(np.zeros((1, 2)), np.ones((1, 2)))


def test_backward_rejects_non_finite_loss():
    x = tape.Var(np.array([np.inf]), name="x", requires_grad=True)
    with pytest.raises(errors.NonFiniteLoss):
        tape.backward(tape.sum_squares(x))


def test_backward_skips_frozen_variables():
    w = tape.Var(np.ones((2, 2)), name="w", requires_grad=True)
    c = tape.Var(np.ones((2, 2)), name="c")
    grads = tape.backward(tape.sum_squares(tape.matmul(w, c)), {"w": w, "c": c})
    assert list(grads) == ["w"]
    np.testing.assert_allclose(grads["w"], 2 * (np.ones((2, 2)) @ np.ones((2, 2))) @ np.ones((2, 2)))


def test_adam_zero_learning_rate_is_noop():
    arrays = {"w": np.array([1.0, -2.0])}
    state = adam_step(arrays, {"w": np.array([0.5, 0.5])}, AdamState(), lr=0.0)
    np.testing.assert_array_equal(arrays["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_zero_gradient():
    arrays = {"w": np.array([1.0, -2.0])}
    state = adam_step(arrays, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(arrays["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], [0.0, 0.0])
    np.testing.assert_array_equal(state.v["w"], [0.0, 0.0])

    state = AdamState(step=3, m={"w": np.array([0.2, -0.4])}, v={"w": np.array([0.01, 0.04])})
    adam_step(arrays, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], [0.9 * 0.2, 0.9 * -0.4])
    np.testing.assert_allclose(state.v["w"], [0.999 * 0.01, 0.999 * 0.04])
    assert state.step == 4


def test_adam_first_step_moves_by_learning_rate():
    arrays = {"w": np.array([1.0, -2.0]), "frozen": np.array([3.0])}
    adam_step(arrays, {"w": np.array([0.5, -4.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(arrays["w"], [0.9, -1.9], atol=1e-7)
    np.testing.assert_array_equal(arrays["frozen"], [3.0])


def test_adam_shape_mismatch():
    with pytest.raises(errors.DimensionMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


def test_all_finite():
    assert all_finite({"a": np.ones(2)})
    assert not all_finite([np.array([np.nan])])
