import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amil import tensor as T
from amil.errors import ContractError, DimensionError, GeometryError
from amil.model import (
    AmilModel,
    AttentionParams,
    aggregate,
    attention_logits,
    attention_weights,
    bag_label,
    extract_features,
    extractor_geometry,
    forward_bag,
    pool_max,
    pool_mean,
)
from amil.tensor import Tensor

from fd_oracle import params_of
from oracles import loop_aggregate, loop_attention, loop_bag_probability, loop_pool_max, loop_pool_mean


def small_model(seed=0, mode="attention", dtype=np.float64):
    return AmilModel.init(seed, pooling_mode=mode, hidden=5, features=12, conv1=4, conv2=6, dtype=dtype)


def random_attention(rng, L=500, D=128):
    return AttentionParams(V=Tensor(rng.normal(scale=0.1, size=(D, L))), w=Tensor(rng.normal(size=(D, 1))))


# ----------------------------------------------------------------------------
# feature extractor


def test_extractor_stage_shapes():
    assert extractor_geometry(28) == [(3, 28, 28), (20, 24, 24), (20, 12, 12), (50, 8, 8), (50, 4, 4), (800,)]


def test_extract_features_length_500():
    model = AmilModel.init(0)
    patch = np.random.default_rng(0).random((3, 28, 28)).astype(np.float32)
    assert extract_features(patch, model.extractor).shape == (500,)
    assert extract_features(np.stack([patch] * 3), model.extractor).shape == (3, 500)


def test_extract_features_zero_everything():
    model = AmilModel.init(0, dtype=np.float64)
    for p in model.parameters():
        p.data[...] = 0
    out = extract_features(np.zeros((3, 28, 28)), model.extractor)
    np.testing.assert_array_equal(out.data, np.zeros(500))


def test_extract_features_rejects_wrong_patch():
    model = AmilModel.init(0)
    with pytest.raises(GeometryError):
        extract_features(np.zeros((3, 32, 32), dtype=np.float32), model.extractor)


def test_bach_patch_geometry_supported():
    shapes = extractor_geometry(124)
    assert shapes[-1] == (50 * 28 * 28,)
    with pytest.raises(GeometryError):
        extractor_geometry(30)


def test_parameter_shapes():
    model = AmilModel.init(0)
    shapes = {n: p.shape for n, p in model.named_parameters()}
    assert shapes == {
        "extractor.conv1_w": (20, 3, 5, 5), "extractor.conv1_b": (20,),
        "extractor.conv2_w": (50, 20, 5, 5), "extractor.conv2_b": (50,),
        "extractor.fc_w": (500, 800), "extractor.fc_b": (500,),
        "attention.V": (128, 500), "attention.w": (128, 1),
        "head.weight": (1, 500), "head.bias": (1,),
    }


def test_init_is_seeded_glorot():
    a, b = AmilModel.init(3), AmilModel.init(3)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
        if n.endswith("_b") or n.endswith("bias"):
            assert not pa.data.any()
    bound = np.sqrt(6 / (500 + 800))
    assert np.abs(a.extractor.fc_w.data).max() <= bound


# ----------------------------------------------------------------------------
# attention and pooling


def test_attention_single_instance():
    rng = np.random.default_rng(0)
    a = attention_weights(Tensor(rng.random((1, 500))), random_attention(rng))
    assert a.data.tolist() == [1.0]


def test_attention_identical_instances():
    rng = np.random.default_rng(1)
    h = rng.random(500)
    a = attention_weights(Tensor(np.stack([h, h])), random_attention(rng))
    np.testing.assert_array_equal(a.data, [0.5, 0.5])


def test_attention_matches_loop_transcription():
    rng = np.random.default_rng(2)
    H = rng.random((5, 500))
    params = random_attention(rng)
    expected = loop_attention(H, params.V.data, params.w.data[:, 0])
    np.testing.assert_allclose(attention_weights(Tensor(H), params).data, expected, rtol=0, atol=1e-10)


def test_attention_dimension_check():
    with pytest.raises(DimensionError):
        attention_weights(Tensor(np.ones((3, 10))), random_attention(np.random.default_rng(0), L=500))
    with pytest.raises(DimensionError):
        AttentionParams(V=Tensor(np.ones((4, 10))), w=Tensor(np.ones((3, 1))))


def test_aggregate_one_hot_selects_row():
    H = np.random.default_rng(3).random((5, 500))
    a = np.zeros(5)
    a[3] = 1
    np.testing.assert_array_equal(aggregate(Tensor(H), Tensor(a)).data, H[3])


def test_aggregate_uniform_is_mean():
    H = np.random.default_rng(4).random((4, 500))
    z = aggregate(Tensor(H), Tensor(np.full(4, 0.25))).data
    np.testing.assert_allclose(z, H.mean(axis=0), rtol=0, atol=1e-15)


def test_aggregate_matches_loop():
    rng = np.random.default_rng(5)
    H = rng.random((7, 500))
    a = rng.random(7)
    a /= a.sum()
    np.testing.assert_allclose(aggregate(Tensor(H), Tensor(a)).data, loop_aggregate(H, a), rtol=0, atol=1e-12)


def test_aggregate_length_mismatch():
    with pytest.raises(DimensionError):
        aggregate(Tensor(np.ones((3, 4))), Tensor(np.ones(2) / 2))


def test_pooling_small_cases():
    H = Tensor([[0.0, 2.0], [1.0, 0.0]])
    assert pool_max(H).data.tolist() == [1.0, 2.0]
    assert pool_mean(H).data.tolist() == [0.5, 1.0]
    one = Tensor([[3.0, -1.0]])
    assert pool_max(one).data.tolist() == [3.0, -1.0]
    assert pool_mean(one).data.tolist() == [3.0, -1.0]


def test_pooling_matches_loops():
    H = np.random.default_rng(6).normal(size=(9, 500))
    np.testing.assert_allclose(pool_max(Tensor(H)).data, loop_pool_max(H), rtol=0, atol=1e-12)
    np.testing.assert_allclose(pool_mean(Tensor(H)).data, loop_pool_mean(H), rtol=0, atol=1e-12)


def test_pooling_empty_bag():
    with pytest.raises(ContractError):
        pool_max(Tensor(np.ones((0, 3))))
    with pytest.raises(ContractError):
        pool_mean(Tensor(np.ones((0, 3))))


# ----------------------------------------------------------------------------
# forward_bag


def test_zero_head_gives_half():
    model = AmilModel.init(0)
    model.head.weight.data[...] = 0
    bag = np.random.default_rng(0).random((6, 3, 28, 28)).astype(np.float32)
    for mode in ("attention", "max", "mean"):
        model.pooling_mode = mode
        prob, _ = forward_bag(bag, model)
        assert prob.item() == 0.5


def test_single_instance_bag_attention_is_one():
    model = AmilModel.init(1)
    prob, att = forward_bag(np.random.default_rng(1).random((1, 3, 28, 28)).astype(np.float32), model)
    assert att.weights.data.tolist() == [1.0]
    assert 0 < prob.item() < 1


def test_attention_output_only_in_attention_mode():
    bag = np.random.default_rng(2).random((3, 3, 28, 28))
    for mode in ("max", "mean"):
        _, att = forward_bag(bag, small_model(mode=mode))
        assert att is None


@pytest.mark.parametrize("mode", ["attention", "max", "mean"])
def test_forward_matches_composed_loop_oracles(mode):
    model = small_model(7, mode)
    rng = np.random.default_rng(7)
    for p in model.parameters():  # non-zero biases so every term is exercised
        p.data[...] = rng.normal(scale=0.2, size=p.shape)
    patches = rng.random((2, 3, 28, 28))
    expected = loop_bag_probability(patches, params_of(model), mode)
    prob, _ = forward_bag(patches, model)
    assert abs(prob.item() - expected) < 1e-10


def test_empty_bag_rejected():
    with pytest.raises(ContractError):
        forward_bag([], AmilModel.init(0))


def test_unknown_pooling_mode():
    with pytest.raises(ContractError):
        AmilModel.init(0, pooling_mode="gated")


def test_bag_size_independence():
    model = AmilModel.init(2)
    before = [p.data.copy() for p in model.parameters()]
    rng = np.random.default_rng(3)
    for m in (1, 400):
        prob, att = forward_bag(rng.random((m, 3, 28, 28)).astype(np.float32), model)
        assert att.weights.shape == (m,)
        assert abs(att.weights.data.sum() - 1) < 1e-6
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_mean_mode_equals_uniform_attention_exactly():
    model = small_model(4, "mean")
    bag = np.random.default_rng(4).random((5, 3, 28, 28))
    prob, _ = forward_bag(bag, model)
    H = extract_features(bag, model.extractor)
    z = aggregate(H, Tensor(np.full(5, 1 / 5)))
    manual = T.sigmoid(T.add(T.matmul(T.reshape(z, (1, -1)), T.transpose(model.head.weight)), model.head.bias))
    assert prob.item() == manual.item()


def test_end_to_end_gradient_small_model():
    model = small_model(5)
    rng = np.random.default_rng(5)
    for p in model.parameters():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    bag = rng.random((3, 3, 28, 28))
    T.backward(T.bce_loss(forward_bag(bag, model)[0], 1))
    for name, param in model.named_parameters():
        def loss_at(arr, param=param):
            saved = param.data
            param.data = arr
            try:
                return T.bce_loss(forward_bag(bag, model)[0], 1).item()
            finally:
                param.data = saved
        numeric = T.numeric_gradient(loss_at, param.data)
        err = np.max(np.abs(param.grad - numeric) / np.maximum(1.0, np.abs(param.grad)))
        assert err < 1e-6, name


# ----------------------------------------------------------------------------
# properties


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 16), seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 20))
def test_attention_is_probability_vector(m, seed, scale):
    rng = np.random.default_rng(seed)
    params = AttentionParams(V=Tensor(rng.normal(scale=scale, size=(8, 20))), w=Tensor(rng.normal(scale=scale, size=(8, 1))))
    a = attention_weights(Tensor(rng.normal(scale=scale, size=(m, 20))), params).data
    assert np.all(a >= 0)
    assert abs(a.sum() - 1) < 1e-6


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 16), seed=st.integers(0, 2**31 - 1), c=st.floats(-1e3, 1e3))
def test_attention_invariant_to_logit_shift(m, seed, c):
    rng = np.random.default_rng(seed)
    params = AttentionParams(V=Tensor(rng.normal(size=(8, 20))), w=Tensor(rng.normal(size=(8, 1))))
    logits = attention_logits(Tensor(rng.normal(size=(m, 20))), params)
    np.testing.assert_allclose(T.softmax(logits).data, T.softmax(T.add(logits, c)).data, rtol=0, atol=1e-9)


@pytest.mark.parametrize("mode", ["attention", "max", "mean"])
def test_permutation_invariance(mode):
    model = small_model(6, mode)
    rng = np.random.default_rng(6)
    bag = rng.random((6, 3, 28, 28))
    perm = rng.permutation(6)
    p1, a1 = forward_bag(bag, model)
    p2, a2 = forward_bag(bag[perm], model)
    assert abs(p1.item() - p2.item()) <= 1e-9
    assert abs(T.bce_loss(p1, 1).item() - T.bce_loss(p2, 1).item()) <= 1e-9
    if mode == "attention":
        np.testing.assert_allclose(a2.weights.data, a1.weights.data[perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(a2.bag_feature.data, a1.bag_feature.data, rtol=0, atol=1e-9)


def test_bag_label_truth_table():
    assert bag_label([0, 0, 0]) == 0
    assert bag_label([0, 1, 0]) == 1
    assert bag_label([1, 1, 1]) == 1


def test_bag_label_rejects_empty_and_non_binary():
    with pytest.raises(ContractError):
        bag_label([])
    with pytest.raises(ContractError):
        bag_label([0, 2])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=50))
def test_bag_label_is_any(labels):
    assert bag_label(labels) == int(any(labels))


def test_model_copy_is_independent():
    model = small_model(8)
    clone = model.copy()
    clone.head.bias.data += 1
    assert not np.array_equal(clone.head.bias.data, model.head.bias.data)
    assert clone.config() == model.config()
