import numpy as np
import pytest

from anchordiff.errors import ConfigError, DimensionError, FormatError, TapeError
from anchordiff.numkit import (Mlp, MlpSpec, ParamStore, adam_step, grad_check,
                               load_params, save_params, sinusoidal_embed,
                               sinusoidal_embed_batch)


def make_mlp(widths, hidden="tanh", output="identity", seed=0, prefix="net."):
    store = ParamStore()
    mlp = Mlp(MlpSpec(tuple(widths), hidden, output), store, prefix,
              np.random.default_rng(seed))
    return mlp, store


def test_identity_single_layer_passes_input_through():
    mlp, store = make_mlp([3, 3])
    store.params["net.W0"][...] = np.eye(3)
    store.params["net.b0"][...] = 0.0
    out, _ = mlp.forward(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, [1.0, 2.0, 3.0])


def test_zero_weights_tanh_output_gives_zeros():
    mlp, store = make_mlp([4, 5, 2], hidden="relu", output="tanh")
    for p in store.params.values():
        p[...] = 0.0
    out, _ = mlp.forward(np.random.default_rng(1).normal(size=(7, 4)))
    assert np.array_equal(out, np.zeros((7, 2)))


def test_two_layer_forward_matches_hand_computed_chain():
    # independent oracle: evaluate the two matmuls + tanh with raw numpy
    mlp, store = make_mlp([2, 3, 1], hidden="tanh", output="identity", seed=3)
    x = np.array([[1.0, 2.0], [-0.5, 0.25]])
    w0, b0 = store.params["net.W0"], store.params["net.b0"]
    w1, b1 = store.params["net.W1"], store.params["net.b1"]
    expected = np.tanh(x @ w0 + b0) @ w1 + b1
    out, _ = mlp.forward(x)
    np.testing.assert_array_equal(out, expected)


def test_forward_is_deterministic_bitwise():
    mlp, _ = make_mlp([5, 8, 8, 2], hidden="gelu", seed=9)
    x = np.random.default_rng(2).normal(size=(4, 5))
    a, _ = mlp.forward(x)
    b, _ = mlp.forward(x)
    assert np.array_equal(a, b)


def test_forward_shape_mismatch_raises_dimension_error():
    mlp, _ = make_mlp([3, 2])
    with pytest.raises(DimensionError):
        mlp.forward(np.zeros((1, 4)))


def test_bias_gradient_is_ones_for_identity_net_sum_loss():
    mlp, store = make_mlp([3, 3])
    store.params["net.W0"][...] = np.eye(3)
    store.params["net.b0"][...] = 0.0
    out, tape = mlp.forward(np.array([[0.3, -0.2, 0.9]]), record=True)
    mlp.backward(tape, np.ones_like(out))
    np.testing.assert_array_equal(store.grads["net.b0"], np.ones((1, 3)))


def test_backward_accumulates_additively():
    mlp, store = make_mlp([3, 4, 2], hidden="tanh", seed=5)
    x = np.random.default_rng(0).normal(size=(6, 3))
    out, tape = mlp.forward(x, record=True)
    mlp.backward(tape, np.ones_like(out))
    once = {k: g.copy() for k, g in store.grads.items()}
    out, tape = mlp.forward(x, record=True)
    mlp.backward(tape, np.ones_like(out))
    for name, g in store.grads.items():
        np.testing.assert_allclose(g, 2.0 * once[name], rtol=0, atol=0)


def test_stale_tape_raises():
    mlp, _ = make_mlp([2, 2])
    other, _ = make_mlp([2, 2], seed=1)
    out, tape = mlp.forward(np.zeros((1, 2)), record=True)
    with pytest.raises(TapeError):
        other.backward(tape, out)
    mlp.backward(tape, out)
    with pytest.raises(TapeError):
        mlp.backward(tape, out)  # consumed


@pytest.mark.parametrize("hidden,output", [("tanh", "identity"), ("relu", "tanh"),
                                           ("gelu", "sigmoid")])
def test_gradients_match_finite_differences(hidden, output):
    mlp, store = make_mlp([3, 4, 2], hidden=hidden, output=output, seed=11)
    x = np.random.default_rng(4).normal(size=(5, 3))
    target = np.random.default_rng(5).normal(size=(5, 2))

    def loss_fn(s):
        out, tape = mlp.forward(x, record=True)
        diff = out - target
        mlp.backward(tape, 2.0 * diff / diff.size)
        return float((diff ** 2).mean())

    assert grad_check(store, loss_fn) < 1e-4


def test_grad_check_exact_for_linear_quadratic():
    mlp, store = make_mlp([3, 2], seed=2)
    x = np.random.default_rng(6).normal(size=(4, 3))

    def loss_fn(s):
        out, tape = mlp.forward(x, record=True)
        mlp.backward(tape, 2.0 * out / out.size)
        return float((out ** 2).mean())

    assert grad_check(store, loss_fn) < 1e-7


def test_grad_check_empty_store_is_zero():
    assert grad_check(ParamStore(), lambda s: 1.0) == 0.0


def test_adam_zero_gradients_is_noop_but_counts():
    _, store = make_mlp([2, 3], seed=7)
    before = {k: p.copy() for k, p in store.params.items()}
    adam_step(store, lr=0.1)
    assert store.step == 1
    for name, p in store.params.items():
        np.testing.assert_array_equal(p, before[name])


def test_adam_first_step_hand_computed():
    store = ParamStore()
    store.add("w", np.zeros((1, 1)))
    store.grads["w"][...] = 1.0
    adam_step(store, lr=0.1, beta1=0.9, beta2=0.999)
    # bias-corrected m_hat = 1, v_hat = 1: step = -lr * 1 / (1 + 1e-8)
    assert store.params["w"][0, 0] == pytest.approx(-0.1, abs=1e-7)
    assert np.all(store.grads["w"] == 0.0)


def test_adam_constant_gradient_update_approaches_lr():
    store = ParamStore()
    store.add("w", np.zeros((1, 1)))
    lr = 0.01
    prev = 0.0
    for _ in range(1000):
        store.grads["w"][...] = 1.0
        adam_step(store, lr=lr)
        update = abs(store.params["w"][0, 0] - prev)
        prev = store.params["w"][0, 0]
    assert update == pytest.approx(lr, rel=0.02)


def test_adam_rejects_nonpositive_lr():
    _, store = make_mlp([2, 2])
    with pytest.raises(ConfigError):
        adam_step(store, lr=0.0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((3, 0))
    with pytest.raises(ConfigError):
        MlpSpec((3, 2), hidden="softmax")


def test_sinusoidal_index_zero():
    emb = sinusoidal_embed(0, 8)
    np.testing.assert_array_equal(emb[:4], np.zeros(4))
    np.testing.assert_array_equal(emb[4:], np.ones(4))


def test_sinusoidal_bounded_for_many_indices():
    embs = sinusoidal_embed_batch(np.arange(10_001), 16)
    assert np.all(embs >= -1.0) and np.all(embs <= 1.0)


def test_sinusoidal_injective_over_schedule():
    embs = sinusoidal_embed_batch(np.arange(50), 16)
    for i in range(50):
        for j in range(i + 1, 50):
            assert not np.array_equal(embs[i], embs[j])


def test_sinusoidal_odd_dim_rejected():
    with pytest.raises(ConfigError):
        sinusoidal_embed(1, 7)


def test_param_container_round_trip_bit_exact(tmp_path):
    _, store = make_mlp([3, 5, 2], hidden="gelu", seed=13)
    path = tmp_path / "params.anvp"
    save_params(store, path)
    loaded, extras = load_params(path)
    assert extras == ()
    assert set(loaded.params) == set(store.params)
    for name, p in store.params.items():
        assert np.array_equal(loaded.params[name], p)
        assert loaded.params[name].tobytes() == p.tobytes()


def test_param_container_truncated_file_raises_format_error(tmp_path):
    _, store = make_mlp([3, 5, 2], seed=13)
    path = tmp_path / "params.anvp"
    save_params(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(FormatError):
        load_params(path)


def test_param_container_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.anvp"
    path.write_bytes(b"NOPE" + b"\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        load_params(path)


def test_param_container_header_extras_round_trip(tmp_path):
    _, store = make_mlp([2, 2], seed=1)
    path = tmp_path / "x.bin"
    save_params(store, path, magic=b"ANVC", header_extra=(5, 5, 20))
    _, extras = load_params(path, magic=b"ANVC", n_extra=3)
    assert extras == (5, 5, 20)
