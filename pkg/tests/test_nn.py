import numpy as np
import pytest

from faultps import nn
from faultps.data import Batch, synthetic, shard


def _batch(images, labels, bid=(0, 0, 0)):
    return Batch(np.asarray(images, dtype=np.float64), np.asarray(labels), bid)


@pytest.fixture(scope="module")
def small_spec():
    return nn.small_cnn()


@pytest.fixture(scope="module")
def ds():
    return synthetic(128, seed=5)


# -- model spec / layout ------------------------------------------------------

def test_default_cnn_param_count_matches_layout_closed_form():
    # conv1 + conv2 + dense(1568->512) + dense(512->10), 3x3 kernels
    expected = (16 * 1 * 3 * 3 + 16) + (32 * 16 * 3 * 3 + 32) \
        + (1568 * 512 + 512) + (512 * 10 + 10)
    assert nn.param_count(nn.fashion_cnn()) == expected == 813258


def test_dense_on_three_inputs_has_eight_parameters():
    spec = nn.ModelSpec(layers=(nn.Flatten(), nn.Dense(2)),
                        input_shape=(3, 1, 1), num_classes=2)
    assert nn.param_count(spec) == 8  # 6 weights + 2 biases


def test_broken_shape_chain_rejected():
    with pytest.raises(nn.ModelError):
        nn.ModelSpec(layers=(nn.Dense(10),), input_shape=(1, 28, 28))
    with pytest.raises(nn.ModelError):
        nn.ModelSpec(layers=(nn.Conv(4), nn.MaxPool(5), nn.Flatten(), nn.Dense(10)),
                     input_shape=(1, 28, 28))


def test_init_is_deterministic_and_biases_zero(small_spec):
    a = nn.init_params(small_spec, seed=7)
    b = nn.init_params(small_spec, seed=7)
    assert a.step == 0
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, nn.init_params(small_spec, seed=8).data)
    for name, off, shape in nn.layout(small_spec):
        if name.endswith(".b"):
            n = int(np.prod(shape))
            assert np.all(a.data[off:off + n] == 0.0)


# -- loss and gradients -------------------------------------------------------

def test_zero_weights_give_uniform_softmax_loss(small_spec):
    params = nn.ParamVector(np.zeros(nn.param_count(small_spec)), small_spec)
    batch = _batch(np.random.default_rng(0).random((1, 1, 28, 28)), [3])
    loss, grad = nn.loss_and_grad(params, batch, dropout_seed=0)
    assert loss == pytest.approx(np.log(10.0), rel=1e-9)
    assert grad.base_step == 0


def test_duplicating_samples_leaves_loss_and_gradient_unchanged():
    # mean invariance; model without dropout so masks cannot differ
    spec = nn.fashion_cnn(num_filters=(2, 4), dense_units=16, dropout_rate=0.0)
    spec = nn.ModelSpec(layers=tuple(l for l in spec.layers
                                     if not isinstance(l, nn.Dropout)),
                        input_shape=spec.input_shape, num_classes=spec.num_classes)
    params = nn.init_params(spec, seed=2)
    rng = np.random.default_rng(3)
    imgs = rng.random((4, 1, 28, 28))
    labs = np.array([1, 5, 2, 7])
    l1, g1 = nn.loss_and_grad(params, _batch(imgs, labs), 0)
    l2, g2 = nn.loss_and_grad(params, _batch(np.tile(imgs, (2, 1, 1, 1)),
                                             np.tile(labs, 2)), 0)
    assert l1 == pytest.approx(l2, rel=1e-12)
    assert np.allclose(g1.data, g2.data, atol=1e-12)


def test_gradient_matches_central_finite_differences(small_spec, ds):
    params = nn.init_params(small_spec, seed=3)
    stream = shard(ds, 1, 0, seed=1, batch_size=4)
    batch = stream.next_batch()
    _, grad = nn.loss_and_grad(params, batch, dropout_seed=11)
    rng = np.random.default_rng(0)
    idx = rng.choice(nn.param_count(small_spec), size=50, replace=False)
    eps = 1e-5
    agree = 0
    for i in idx:
        d = params.data.copy()
        d[i] += eps
        up = nn.training_loss(nn.ParamVector(d, small_spec), batch, 11)
        d[i] -= 2 * eps
        down = nn.training_loss(nn.ParamVector(d, small_spec), batch, 11)
        fd = (up - down) / (2 * eps)
        if abs(grad.data[i] - fd) / max(abs(fd), 1e-6) < 1e-4:
            agree += 1
    assert agree >= 0.99 * len(idx)


def test_shape_mismatch_and_empty_batch_rejected(small_spec):
    params = nn.init_params(small_spec, seed=0)
    with pytest.raises(nn.LayoutMismatchError):
        nn.loss_and_grad(params, _batch(np.zeros((2, 1, 14, 14)), [0, 1]), 0)
    with pytest.raises(ValueError):
        nn.loss_and_grad(params, _batch(np.zeros((0, 1, 28, 28)), []), 0)


def test_non_finite_activation_reports_layer_index(small_spec):
    data = nn.init_params(small_spec, seed=0).data.copy()
    data[0] = np.inf
    params = nn.ParamVector(data, small_spec)
    batch = _batch(np.ones((1, 1, 28, 28)), [0])
    with pytest.raises(nn.NonFiniteError) as err:
        nn.loss_and_grad(params, batch, 0)
    assert err.value.layer_index == 0


def test_dropout_mask_is_pure_function_of_seed(small_spec, ds):
    params = nn.init_params(small_spec, seed=3)
    batch = shard(ds, 1, 0, seed=1, batch_size=8).next_batch()
    l1, g1 = nn.loss_and_grad(params, batch, dropout_seed=42)
    l2, g2 = nn.loss_and_grad(params, batch, dropout_seed=42)
    l3, _ = nn.loss_and_grad(params, batch, dropout_seed=43)
    assert l1 == l2 and np.array_equal(g1.data, g2.data)
    assert l1 != l3


# -- apply_gradients ----------------------------------------------------------

def _pv(values, spec=None):
    spec = spec or nn.ModelSpec(layers=(nn.Flatten(), nn.Dense(2)),
                                input_shape=(1, 1, 1), num_classes=2)
    n = nn.param_count(spec)
    data = np.zeros(n)
    data[:len(values)] = values
    return nn.ParamVector(data, spec), spec


def test_single_update_sgd_arithmetic():
    params, spec = _pv([1.0, 2.0])
    g = np.zeros(nn.param_count(spec))
    g[:2] = [0.1, 0.2]
    update = nn.GradientUpdate(g, base_step=0)
    out = nn.apply_gradients(params, [update], nn.LrPolicy(0.1))
    assert out.data[0] == pytest.approx(0.99)
    assert out.data[1] == pytest.approx(1.98)
    assert out.step == 1
    assert params.data[0] == 1.0  # input unchanged


def test_empty_update_list_is_identity():
    params, _ = _pv([1.0, 2.0])
    out = nn.apply_gradients(params, [], nn.LrPolicy(0.1))
    assert out.step == params.step
    assert np.array_equal(out.data, params.data)


def test_down_tuned_rate_matches_scalar_replay_oracle():
    policy = nn.LrPolicy(0.1, pending_threshold=10, rule="inverse-sqrt-excess")
    k = 100
    assert policy.effective_lr(k) == pytest.approx(0.1 * (10 / 100) ** 0.5)
    assert policy.effective_lr(k) == pytest.approx(0.0316227766, abs=1e-9)
    params, spec = _pv([1.0, 0.0])
    n = nn.param_count(spec)
    rng = np.random.default_rng(1)
    gs = rng.normal(size=(k, n))
    updates = [nn.GradientUpdate(g, base_step=0) for g in gs]
    out = nn.apply_gradients(params, updates, policy)
    # scalar oracle: replay the same rule one coordinate at a time
    lr = 0.1 * min(1.0, (10 / k) ** 0.5)
    for coord_idx in range(n):
        w = params.data[coord_idx]
        for g in gs:
            w -= lr * g[coord_idx]
        assert out.data[coord_idx] == pytest.approx(w, abs=1e-12)
    assert out.step == k


def test_threshold_one_pending_keeps_base_rate():
    policy = nn.LrPolicy(0.05, pending_threshold=4)
    assert policy.effective_lr(1) == 0.05
    assert policy.effective_lr(4) == 0.05
    assert policy.effective_lr(16) == pytest.approx(0.025)


def test_k_equals_one_matches_plain_sgd_for_any_rule():
    for rule in nn.LR_RULES:
        policy = nn.LrPolicy(0.07, pending_threshold=3, rule=rule)
        assert policy.effective_lr(1) == 0.07


def test_aggregate_then_apply_matches_sequential_quarter_rate():
    params, spec = _pv([0.5, -0.5])
    n = nn.param_count(spec)
    rng = np.random.default_rng(2)
    gs = rng.normal(size=(4, n))
    mean = nn.GradientUpdate(gs.mean(axis=0), base_step=0)
    agg = nn.apply_gradients(params, [mean], nn.LrPolicy(0.1, rule="constant"))
    seq = nn.apply_gradients(
        params, [nn.GradientUpdate(g, base_step=0) for g in gs],
        nn.LrPolicy(0.025, rule="constant"))
    assert np.allclose(agg.data, seq.data, atol=1e-6)


def test_stale_base_step_ahead_of_weights_rejected():
    params, spec = _pv([1.0])
    g = np.zeros(nn.param_count(spec))
    with pytest.raises(ValueError):
        nn.apply_gradients(params, [nn.GradientUpdate(g, base_step=5)],
                           nn.LrPolicy(0.1))


def test_step_increases_by_exactly_n(small_spec):
    params = nn.init_params(small_spec, seed=0)
    n = nn.param_count(small_spec)
    updates = [nn.GradientUpdate(np.zeros(n), base_step=0) for _ in range(7)]
    assert nn.apply_gradients(params, updates, nn.LrPolicy(0.1)).step == 7


def test_non_finite_update_rejected_with_warning():
    params, spec = _pv([1.0, 2.0])
    n = nn.param_count(spec)
    bad = np.full(n, np.inf)
    good = np.zeros(n)
    good[0] = 1.0
    with pytest.warns(UserWarning):
        out = nn.apply_gradients(
            params,
            [nn.GradientUpdate(bad, 0), nn.GradientUpdate(good, 0)],
            nn.LrPolicy(0.1, rule="constant"))
    assert out.step == 1  # only the finite update applied
    assert np.all(np.isfinite(out.data))


# -- evaluate -----------------------------------------------------------------

def test_zero_weight_model_predicts_lowest_class(small_spec):
    n = 100
    ds_bal = synthetic(n, seed=9)
    params = nn.ParamVector(np.zeros(nn.param_count(small_spec)), small_spec)
    acc, loss = nn.evaluate(params, ds_bal)
    freq0 = float(np.mean(ds_bal.labels == 0))
    assert acc == pytest.approx(freq0)
    assert 0.05 <= acc <= 0.15
    assert loss == pytest.approx(np.log(10.0), rel=1e-9)


def test_single_sample_correct_prediction(small_spec):
    # a 1-sample dataset whose label equals the model's argmax scores 1.0
    from faultps.data import Dataset
    params = nn.init_params(small_spec, seed=0)
    img = synthetic(10, seed=3).images[:1]
    logits, _, _ = nn._forward(small_spec, params, img, False, None)
    pred = int(np.argmax(logits))
    d1 = Dataset(img.copy(), np.array([pred], dtype=np.int64))
    acc, _ = nn.evaluate(params, d1)
    assert acc == 1.0


def test_evaluation_is_deterministic_and_dropout_free(small_spec, ds):
    params = nn.init_params(small_spec, seed=4)
    a1 = nn.evaluate(params, ds)
    a2 = nn.evaluate(params, ds)
    assert a1 == a2


# -- serialization ------------------------------------------------------------

def test_params_round_trip_bitwise(small_spec):
    params = nn.init_params(small_spec, seed=11)
    params = nn.ParamVector(params.data, small_spec, step=123)
    blob = nn.serialize_params(params)
    back = nn.deserialize_params(blob, small_spec)
    assert back.step == 123
    assert np.array_equal(back.data, params.data)
    assert back.data.tobytes() == params.data.tobytes()


def test_gradient_round_trip_keeps_base_step(small_spec, ds):
    params = nn.init_params(small_spec, seed=1)
    params = nn.ParamVector(params.data, small_spec, step=9)
    batch = shard(ds, 1, 0, seed=1, batch_size=4).next_batch()
    _, grad = nn.loss_and_grad(params, batch, 0)
    blob = nn.serialize_gradient(grad, small_spec)
    back = nn.deserialize_gradient(blob, small_spec, worker_id=2, batch_id=(0, 2, 0))
    assert back.base_step == 9
    assert back.worker_id == 2
    assert np.array_equal(back.data, grad.data)


def test_flipped_byte_fails_checksum(small_spec):
    blob = bytearray(nn.serialize_params(nn.init_params(small_spec, seed=0)))
    blob[40] ^= 0xFF
    with pytest.raises(nn.CorruptPayloadError, match="checksum"):
        nn.deserialize_params(bytes(blob), small_spec)


def test_empty_and_truncated_payloads_rejected(small_spec):
    with pytest.raises(nn.CorruptPayloadError):
        nn.deserialize_params(b"", small_spec)
    blob = nn.serialize_params(nn.init_params(small_spec, seed=0))
    with pytest.raises(nn.CorruptPayloadError):
        nn.deserialize_params(blob[:50], small_spec)


def test_wrong_magic_and_layout_rejected(small_spec, tiny_mlp):
    params = nn.init_params(small_spec, seed=0)
    grad_blob = nn.serialize_gradient(
        nn.GradientUpdate(np.zeros(nn.param_count(small_spec)), 0), small_spec)
    with pytest.raises(nn.CorruptPayloadError, match="magic"):
        nn.deserialize_params(grad_blob, small_spec)
    blob = nn.serialize_params(params)
    with pytest.raises(nn.LayoutMismatchError):
        nn.deserialize_params(blob, tiny_mlp)
