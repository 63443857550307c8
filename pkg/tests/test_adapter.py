import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langplace.adapter import (
    AdapterPair, AdapterWeights, DegenerateToken, FormatError, ShapeError, TrainConfig, TrainSample,
    adapter_forward, backward, batch_backward, ce_loss, cosine_matrix, load_weights, parameter_count,
    save_weights, similarity_probs, train,
)
from langplace.core import Tuple
from langplace.embeddings import SyntheticProvider

from helpers import fd_check, random_tokens, scene_with_names, unit_rows


def scalar_forward(w, gate, x):
    """Straight-line re-evaluation of one row, pure Python floats."""
    def affine(W, b, v):
        return [math.fsum(W[i][j] * v[j] for j in range(len(v))) + b[i] for i in range(len(b))]
    W1, b1, W2, b2, W3, b3 = (a.tolist() for a in w.arrays())
    h1 = [max(0.0, z) for z in affine(W1, b1, x)]
    h2 = [max(0.0, z) for z in affine(W2, b2, h1)]
    a = affine(W3, b3, h2)
    return [gate * ai + (1 - gate) * xi for ai, xi in zip(a, x)]


def test_parameter_count_default():
    assert parameter_count() == 255_936
    pair = AdapterPair.create()
    assert sum(a.size for a in pair.arrays()) == 255_936


def test_forward_gate_zero_is_identity(rng):
    w = AdapterWeights.init(16, 4, rng)
    X = rng.standard_normal((3, 16))
    assert np.array_equal(adapter_forward(w, 0.0, X), X)


def test_forward_zero_weights_scales_input(rng):
    X = rng.standard_normal((3, 16))
    assert np.allclose(adapter_forward(AdapterWeights.zeros(16, 4), 0.2, X), 0.8 * X, atol=1e-15)


def test_forward_matches_scalar_oracle(rng):
    w = AdapterWeights.init(512, 112, np.random.default_rng(5))
    x = rng.standard_normal((1, 512))
    assert np.allclose(adapter_forward(w, 0.2, x)[0], scalar_forward(w, 0.2, x[0].tolist()), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_forward_residual_identity(seed, gate):
    rng = np.random.default_rng(seed)
    w = AdapterWeights.init(24, 6, rng)
    X = rng.standard_normal((4, 24))
    ungated = adapter_forward(w, 1.0, X)
    assert np.allclose(adapter_forward(w, gate, X) - (1 - gate) * X, gate * ungated, atol=1e-12)


def test_forward_shape_error(rng):
    with pytest.raises(ShapeError):
        adapter_forward(AdapterWeights.zeros(16, 4), 0.2, rng.standard_normal((2, 15)))
    with pytest.raises(ShapeError):
        AdapterWeights(np.zeros((4, 16)), np.zeros(3), np.zeros((4, 4)), np.zeros(4), np.zeros((16, 4)), np.zeros(16))


def _tokens_with_cosines(cosines):
    """Unit T row e0 and V rows whose cosine with it is exactly each value."""
    D = len(cosines) + 1
    T = np.zeros((1, D))
    T[0, 0] = 1.0
    V = np.zeros((len(cosines), D))
    for n, c in enumerate(cosines):
        V[n, 0] = c
        V[n, n + 1] = math.sqrt(1 - c * c)
    return V, T


def _softmax_oracle(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    return [v / math.fsum(e) for v in e]


def test_probs_orthogonal_text_gives_uniform_row():
    V = np.eye(6)[:, :]
    T = np.zeros((1, 7))
    T[0, 6] = 1.0
    P = similarity_probs(np.hstack([V, np.zeros((6, 1))]), T, 0.01)
    assert np.allclose(P, 1 / 6, atol=1e-15)


def test_probs_sharp_temperature():
    V, T = _tokens_with_cosines([0.5, 0.1, 0.1])
    P = similarity_probs(V, T, 0.01)[0]
    oracle = _softmax_oracle([50.0, 10.0, 10.0])
    assert P[0] == pytest.approx(1.0, abs=1e-15)
    assert P[1] == pytest.approx(oracle[1], rel=1e-9) and P[1] == pytest.approx(math.exp(-40), rel=1e-9)
    assert int(np.argmax(P)) == 0


def test_probs_unit_temperature():
    V, T = _tokens_with_cosines([1.0, 0.0, 0.0])
    P = similarity_probs(V, T, 1.0)[0]
    assert P == pytest.approx([0.5761, 0.2119, 0.2119], abs=5e-5)
    assert P == pytest.approx(_softmax_oracle([1.0, 0.0, 0.0]), rel=1e-12)


def test_degenerate_token():
    with pytest.raises(DegenerateToken):
        similarity_probs(np.zeros((2, 4)), np.ones((1, 4)), 0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 3))
def test_probs_rows_stochastic_and_argmax_matches_cosine(seed, n, L):
    rng = np.random.default_rng(seed)
    V, T = rng.standard_normal((n, 32)), rng.standard_normal((L, 32))
    P = similarity_probs(V, T, 0.01)
    assert np.all(np.abs(P.sum(axis=1) - 1) <= 1e-9)
    assert np.array_equal(np.argmax(P, axis=1), np.argmax(cosine_matrix(V, T), axis=1))


def test_ce_loss_examples():
    assert ce_loss(np.eye(3)[[1]], [1]) == 0.0
    assert ce_loss(np.full((2, 6), 1 / 6), [0, 5]) == pytest.approx(math.log(6), rel=1e-12)
    P = np.array([[0.5, 0.5, 0.0], [0.25, 0.5, 0.25]])
    assert ce_loss(P, [0, 2]) == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2, rel=1e-12)
    assert ce_loss(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        ce_loss(P, [0, 3])


def test_backward_gates_zero_give_zero_gradients(rng):
    pair = AdapterPair.create(32, 8, seed=1, alpha=0.0, beta=0.0)
    V, T = random_tokens(rng, dim=32)
    _, gv, gt = backward(pair, V, T, [0, 3])
    assert all(not np.any(g) for g in gv.arrays() + gt.arrays())


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pair = AdapterPair.create(64, 16, seed=seed)
    V, T = random_tokens(rng, dim=64)
    rows = fd_check(pair, V, T, rng.integers(0, 6, size=2), rng, per_tensor=4)
    worst = max(r[-1] for r in rows)
    assert worst <= 1e-4, rows


def test_backward_loss_matches_forward(rng):
    pair = AdapterPair.create(32, 8, seed=2)
    V, T = random_tokens(rng, dim=32)
    loss, _, _ = backward(pair, V, T, [1, 2])
    assert loss == pytest.approx(ce_loss(pair.probs(V, T), [1, 2]), rel=1e-12)


def test_batch_of_duplicates_equals_single(rng):
    pair = AdapterPair.create(32, 8, seed=3)
    V, T = random_tokens(rng, dim=32)
    loss1, gv, gt = backward(pair, V, T, [2, 4])
    loss2, grads = batch_backward(pair, [(V, T, [2, 4]), (V, T, [2, 4])])
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    for a, b in zip(gv.arrays() + gt.arrays(), grads):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


# -- training -------------------------------------------------------------------------

NAMES = ["red mug", "pear", "white plate", "camera", "peach"]


@pytest.fixture(scope="module")
def tiny_task():
    provider = SyntheticProvider(dim=32, seed=4)
    rng = np.random.default_rng(0)
    data = []
    for rid in range(6):
        scene = scene_with_names(list(rng.permutation(NAMES)), rid)
        k = int(rng.integers(5))
        data.append(TrainSample(scene, [Tuple(scene.objects[k].name, "left")], [k]))
    return provider, data


def _mean_loss(pair, provider, data):
    from langplace.embeddings import tokenize_scene
    return np.mean([ce_loss(pair.probs(*tokenize_scene(provider, s.scene, s.tuples)), s.labels) for s in data])


def test_train_zero_steps_returns_initial_weights(tiny_task):
    provider, data = tiny_task
    pair = AdapterPair.create(32, 8, seed=0)
    out, trace = train(pair, data, TrainConfig(steps=0), provider)
    assert len(trace) == 0
    assert all(np.array_equal(a, b) for a, b in zip(pair.arrays(), out.arrays()))


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_train_zero_lr_keeps_loss(tiny_task, optimizer):
    provider, data = tiny_task
    pair = AdapterPair.create(32, 8, seed=0)
    out, _ = train(pair, data, TrainConfig(optimizer=optimizer, learning_rate=0.0, steps=20), provider)
    assert abs(_mean_loss(out, provider, data) - _mean_loss(pair, provider, data)) <= 1e-9


@pytest.mark.parametrize("optimizer, lr", [("adam", 1e-3), ("sgd", 1e-2)])
def test_train_reduces_loss(tiny_task, optimizer, lr):
    provider, data = tiny_task
    # a softer temperature keeps this 32-dim toy away from the clamped region
    pair = AdapterPair.create(32, 8, seed=0, temperature=0.1)
    out, trace = train(pair, data, TrainConfig(optimizer=optimizer, learning_rate=lr, steps=300), provider)
    assert _mean_loss(out, provider, data) < 0.5 * _mean_loss(pair, provider, data)
    assert len(trace) == 300


def test_train_is_deterministic_and_leaves_input_untouched(tiny_task):
    provider, data = tiny_task
    pair = AdapterPair.create(32, 8, seed=0)
    before = [a.copy() for a in pair.arrays()]
    cfg = TrainConfig(learning_rate=1e-3, steps=50, batch_size=2, seed=9)
    a, ta = train(pair, data, cfg, provider)
    b, tb = train(pair, data, cfg, provider)
    assert ta.tobytes() == tb.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    assert all(np.array_equal(x, y) for x, y in zip(before, pair.arrays()))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    assert TrainConfig.from_dict({"steps": 5, "unknown": 1}).steps == 5
    with pytest.raises(ValueError):
        train(AdapterPair.create(32, 8), [], TrainConfig(), None)


# -- weights file ---------------------------------------------------------------------

def test_weights_round_trip_is_bit_exact(tmp_path):
    pair = AdapterPair.create(48, 8, seed=11, alpha=0.3, beta=0.1, temperature=0.02)
    save_weights(pair, tmp_path / "a.adpt")
    loaded = load_weights(tmp_path / "a.adpt", expected_dim=48)
    for a, b in zip(pair.arrays(), loaded.arrays()):
        assert a.astype("<f4").tobytes() == b.astype("<f4").tobytes()
    assert (loaded.alpha, loaded.beta, loaded.temperature) == pytest.approx((0.3, 0.1, 0.02), rel=1e-7)
    save_weights(loaded, tmp_path / "b.adpt")
    assert (tmp_path / "a.adpt").read_bytes() == (tmp_path / "b.adpt").read_bytes()


def test_weights_header_layout(tmp_path):
    import struct
    save_weights(AdapterPair.create(8, 2, seed=0), tmp_path / "w")
    data = (tmp_path / "w").read_bytes()
    assert data[:4] == b"ADPT"
    assert struct.unpack("<III", data[4:16]) == (1, 8, 2)
    assert len(data) == 28 + 4 * parameter_count(8, 2)


def test_weights_errors(tmp_path):
    save_weights(AdapterPair.create(16, 4, seed=0), tmp_path / "w")
    data = (tmp_path / "w").read_bytes()
    cases = {
        "truncated": data[:-10],
        "short": data[:10],
        "magic": b"XXXX" + data[4:],
        "version": data[:4] + (2).to_bytes(4, "little") + data[8:],
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError):
            load_weights(tmp_path / name)
    with pytest.raises(FormatError) as info:
        load_weights(tmp_path / "w", expected_dim=512)
    assert "16" in str(info.value) and "512" in str(info.value)
    with pytest.raises(FormatError):
        load_weights(tmp_path / "missing")
