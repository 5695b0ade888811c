"""Tests for network construction, training, gradient flow and model files."""

import numpy as np
import numpy.testing as npt
import pytest

from intentcnn.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InputError,
    TrainingError,
)
from intentcnn.model import (
    BatchNormLayer,
    NetworkConfig,
    TrainSpec,
    _batch_plan,
    build_network,
    check_network_gradients,
    deserialize,
    load_model,
    parse_network_config,
    parse_train_spec,
    plan_layers,
    save_model,
    serialize,
    train,
)
from intentcnn.config import KeyReader

from oracles import simulate_shapes

SMALL = NetworkConfig(channels=3, input_frames=32, conv_filters=(2, 2), kernel_width=3,
                      pool=2, pool_stride=2, fc_sizes=(8,), num_classes=3)


def make_batch(rng, config, n):
    return rng.normal(0.0, 1.0, size=(n, config.channels, config.input_frames)).astype(np.float32)


def separable_data(config, per_class, seed=0):
    """Two constant-offset classes with small noise: +1 vs -1 baselines."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, level in enumerate((-1.0, 1.0)):
        base = np.full((config.channels, config.input_frames), level, dtype=np.float32)
        for _ in range(per_class):
            xs.append(base + rng.normal(0.0, 0.1, size=base.shape).astype(np.float32))
            ys.append(label)
    order = rng.permutation(len(xs))
    x = np.stack(xs)[order]
    y = np.array(ys, dtype=np.int64)[order]
    return x, y


# ---------------------------------------------------------------------------
# configuration and shape planning
# ---------------------------------------------------------------------------

def test_default_config_plan_matches_oracle():
    config = NetworkConfig()
    plan = [entry for entry in plan_layers(config) if entry[0] != "batchnorm"]
    expected = simulate_shapes(24, 2000, [16, 32, 64, 64], 5, 2, 2, [128, 64], 6)
    assert plan == expected
    # frozen walk of the default geometry
    assert dict(plan)["conv1"] == (16, 1996)
    assert dict(plan)["pool4"] == (64, 121)
    assert dict(plan)["flatten"] == (7744,)


def test_plan_names_underflowing_layer():
    with pytest.raises(ConfigError, match="conv4"):
        plan_layers(NetworkConfig(channels=24, input_frames=64))
    with pytest.raises(ConfigError, match="conv1"):
        plan_layers(NetworkConfig(input_frames=3, kernel_width=5))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(num_classes=1)
    with pytest.raises(ConfigError):
        NetworkConfig(conv_filters=())
    with pytest.raises(ConfigError):
        NetworkConfig(pool=0)
    with pytest.raises(ConfigError):
        NetworkConfig(batchnorm_position="nowhere")


def test_batchnorm_position_changes_plan():
    after = plan_layers(NetworkConfig(batchnorm_position="after_last_conv"))
    before = plan_layers(NetworkConfig(batchnorm_position="before_first_fc"))
    assert ("batchnorm", (64, 121)) in after
    assert ("batchnorm", (7744,)) in before


def test_parse_network_config_roundtrip():
    pairs = {"model.conv_filters": "4, 8", "model.kernel_width": "3",
             "model.input_frames": "100", "model.channels": "2",
             "model.fc_sizes": "16", "model.num_classes": "2"}
    config = parse_network_config(KeyReader(pairs))
    assert config.conv_filters == (4, 8)
    assert config.kernel_width == 3
    assert config.fc_sizes == (16,)
    assert config.pool == 2  # default preserved


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_build_network_is_deterministic():
    a = build_network(SMALL, seed=11)
    b = build_network(SMALL, seed=11)
    for (name_a, arr_a), (name_b, arr_b) in zip(a.param_items(), b.param_items()):
        assert name_a == name_b
        npt.assert_array_equal(arr_a, arr_b)
    c = build_network(SMALL, seed=12)
    assert any(not np.array_equal(arr_a, arr_c)
               for (_, arr_a), (_, arr_c) in zip(a.param_items(), c.param_items()))


def test_build_network_init_ranges():
    net = build_network(SMALL, seed=0)
    params = dict(net.param_items())
    conv1 = params["conv1.weights"]
    bound = np.sqrt(6.0 / (3 * 3))  # fan_in = in_channels * kernel_width
    assert conv1.shape == (2, 3, 3)
    assert np.max(np.abs(conv1)) <= bound
    assert np.std(conv1) > 0
    npt.assert_array_equal(params["conv1.bias"], np.zeros(2))
    npt.assert_array_equal(params["batchnorm.gamma"], np.ones(2))
    npt.assert_array_equal(params["batchnorm.beta"], np.zeros(2))
    fc1 = params["fc1.weights"]
    assert fc1.shape == (8, 12)  # flatten = 2 channels * 6 frames
    assert np.max(np.abs(fc1)) <= np.sqrt(6.0 / 12)


def test_forward_shapes_and_input_checks():
    net = build_network(SMALL, seed=1)
    rng = np.random.default_rng(0)
    x = make_batch(rng, SMALL, 4)
    logits, caches = net.forward_train(x)
    assert logits.shape == (4, 3)
    assert len(caches) == len(net.layers())
    assert net.forward_infer(x).shape == (4, 3)
    with pytest.raises(DimensionError):
        net.forward_infer(x[:, :, :10])
    with pytest.raises(DimensionError):
        net.forward_infer(x[0])


def test_predict_proba_rows_sum_to_one():
    net = build_network(SMALL, seed=2)
    rng = np.random.default_rng(3)
    probs = net.predict_proba(make_batch(rng, SMALL, 5))
    assert probs.shape == (5, 3)
    npt.assert_allclose(probs.sum(axis=1), np.ones(5), rtol=1e-5)


def test_predict_is_batch_grouping_invariant():
    # grouping samples differently must not change a single output bit
    net = build_network(SMALL, seed=4)
    rng = np.random.default_rng(5)
    x = make_batch(rng, SMALL, 6)
    whole = net.predict_proba(x)
    singles = np.stack([net.predict_proba(x[i:i + 1])[0] for i in range(6)])
    npt.assert_array_equal(whole, singles)
    halves = np.concatenate([net.predict_proba(x[:2]), net.predict_proba(x[2:])])
    npt.assert_array_equal(whole, halves)


def test_batchnorm_per_channel_normalizes_channels():
    net = build_network(SMALL, seed=6)
    bn = [l for l in net.conv_stack if isinstance(l, BatchNormLayer)]
    assert len(bn) == 1 and bn[0].per_channel
    fc_net = build_network(
        NetworkConfig(channels=3, input_frames=32, conv_filters=(2, 2), kernel_width=3,
                      pool=2, pool_stride=2, fc_sizes=(8,), num_classes=3,
                      batchnorm_position="before_first_fc"), seed=6)
    bn2 = [l for l in fc_net.fc_stack if isinstance(l, BatchNormLayer)]
    assert len(bn2) == 1 and not bn2[0].per_channel
    assert bn2[0].gamma.shape == (12,)


# ---------------------------------------------------------------------------
# gradients through the whole stack
# ---------------------------------------------------------------------------

def test_full_network_gradients_float64():
    net = build_network(SMALL, seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.normal(0.0, 1.0, size=(4, 3, 32))
    labels = np.array([0, 1, 2, 1])
    result = check_network_gradients(net, x, labels, epsilon=1e-5, target_rel_tol=1e-6)
    assert result.max_relative_error < 1e-6
    total = result.checked + result.skipped
    assert result.checked > 0.8 * total


def test_full_network_gradients_float64_bn_before_fc():
    config = NetworkConfig(channels=2, input_frames=24, conv_filters=(2,), kernel_width=3,
                           pool=2, pool_stride=2, fc_sizes=(6,), num_classes=2,
                           batchnorm_position="before_first_fc")
    net = build_network(config, seed=9, dtype=np.float64)
    rng = np.random.default_rng(10)
    x = rng.normal(0.0, 1.0, size=(4, 2, 24))
    result = check_network_gradients(net, x, np.array([0, 1, 0, 1]),
                                     epsilon=1e-5, target_rel_tol=1e-6)
    assert result.max_relative_error < 1e-6


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_batch_plan_drops_trailing_singleton():
    assert _batch_plan(10, 8) == [0, 8]
    assert _batch_plan(9, 8) == [0]
    assert _batch_plan(8, 8) == [0]
    assert _batch_plan(17, 8) == [0, 8]
    assert _batch_plan(2, 8) == [0]


def test_train_spec_validation():
    with pytest.raises(ConfigError):
        TrainSpec(batch_size=1)
    with pytest.raises(ConfigError):
        TrainSpec(optimizer="adagrad")
    with pytest.raises(ConfigError):
        TrainSpec(learning_rate=0.0)


def test_train_learns_separable_classes():
    config = NetworkConfig(channels=3, input_frames=32, conv_filters=(2, 2), kernel_width=3,
                           pool=2, pool_stride=2, fc_sizes=(8,), num_classes=2)
    net = build_network(config, seed=13)
    x, y = separable_data(config, per_class=10)
    spec = TrainSpec(epochs=20, batch_size=4, learning_rate=1e-2, patience=10, seed=1)
    result = train(net, x[:14], y[:14], x[14:], y[14:], spec)
    assert result.history[0].train_loss > result.history[-1].train_loss * 0.9
    assert result.history[result.best_epoch].val_macro_f1 == 1.0
    npt.assert_array_equal(net.predict(x[14:]), y[14:])


def test_train_is_deterministic():
    config = SMALL
    x, y = separable_data(config, per_class=6)
    y = y % config.num_classes
    spec = TrainSpec(epochs=4, batch_size=4, learning_rate=1e-3, seed=5)
    results = []
    for _ in range(2):
        net = build_network(config, seed=3)
        result = train(net, x[:8], y[:8], x[8:], y[8:], spec)
        results.append((result, dict(net.param_items())))
    hist_a, hist_b = results[0][0].history, results[1][0].history
    assert [(r.train_loss, r.val_loss, r.val_macro_f1) for r in hist_a] == \
           [(r.train_loss, r.val_loss, r.val_macro_f1) for r in hist_b]
    for key in results[0][1]:
        npt.assert_array_equal(results[0][1][key], results[1][1][key])


def test_train_restores_best_epoch():
    config = SMALL
    x, y = separable_data(config, per_class=8)
    y = y % config.num_classes
    net = build_network(config, seed=21)
    spec = TrainSpec(epochs=8, batch_size=4, learning_rate=5e-3, patience=8, seed=2)
    result = train(net, x[:10], y[:10], x[10:], y[10:], spec)
    best = min(result.history, key=lambda r: r.val_loss)
    assert result.best_epoch == best.epoch
    assert result.best_val_loss == best.val_loss
    # the returned network must reproduce the best recorded validation loss
    from intentcnn.model import _validate
    val_loss, _ = _validate(net, x[10:], y[10:])
    assert val_loss == pytest.approx(best.val_loss, rel=1e-6)


def test_train_early_stopping_on_plateau():
    config = SMALL
    x, y = separable_data(config, per_class=6)
    y = y % config.num_classes
    net = build_network(config, seed=17)
    # a learning rate this small cannot move the loss: epoch 0 stays the best
    spec = TrainSpec(epochs=30, batch_size=4, learning_rate=1e-12, patience=3, seed=0)
    result = train(net, x[:8], y[:8], x[8:], y[8:], spec)
    assert result.stopped_early
    assert len(result.history) <= 1 + 3 + 1
    assert result.best_epoch == 0


def test_train_rejects_bad_inputs():
    net = build_network(SMALL, seed=0)
    rng = np.random.default_rng(0)
    x = make_batch(rng, SMALL, 6)
    y = np.array([0, 1, 2, 0, 1, 2])
    spec = TrainSpec(epochs=1)
    with pytest.raises(InputError):
        train(net, x, y, x[:0], y[:0], spec)  # empty validation set
    with pytest.raises(DimensionError):
        train(net, x, y[:4], x, y, spec)
    with pytest.raises(InputError):
        train(net, x, y + 5, x, y, spec)


def test_train_raises_on_nonfinite():
    net = build_network(SMALL, seed=1)
    net.conv_stack[0].weights[0, 0, 0] = np.nan
    rng = np.random.default_rng(2)
    x = make_batch(rng, SMALL, 4)
    y = np.array([0, 1, 2, 0])
    with pytest.raises(TrainingError) as info:
        train(net, x, y, x, y, TrainSpec(epochs=1, batch_size=4))
    assert info.value.epoch == 0
    assert info.value.batch == 0


def test_running_stats_move_during_training():
    net = build_network(SMALL, seed=2)
    bn = next(l for l in net.conv_stack if isinstance(l, BatchNormLayer))
    before = bn.running_mean.copy()
    rng = np.random.default_rng(3)
    x = make_batch(rng, SMALL, 8) + 5.0
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    train(net, x, y, x, y, TrainSpec(epochs=1, batch_size=4, seed=0))
    bn_after = next(l for l in net.conv_stack if isinstance(l, BatchNormLayer))
    assert not np.array_equal(bn_after.running_mean, before)


def test_parse_train_spec():
    reader = KeyReader({"train.epochs": "5", "train.learning_rate": "0.01",
                        "train.optimizer": "sgd"})
    spec = parse_train_spec(reader)
    assert spec.epochs == 5
    assert spec.learning_rate == pytest.approx(0.01)
    assert spec.optimizer == "sgd"
    assert spec.batch_size == 8  # default preserved


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def test_serialize_round_trip_bytes_and_predictions():
    net = build_network(SMALL, seed=31)
    rng = np.random.default_rng(32)
    x = make_batch(rng, SMALL, 8) * 2.0
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    train(net, x, y, x, y, TrainSpec(epochs=2, batch_size=4, seed=0))
    blob = serialize(net)
    clone = deserialize(blob)
    assert serialize(clone) == blob
    assert clone.config == net.config
    for (name_a, arr_a), (name_b, arr_b) in zip(net.param_items(), clone.param_items()):
        assert name_a == name_b
        npt.assert_array_equal(arr_a, arr_b)
    probe = make_batch(rng, SMALL, 3)
    npt.assert_array_equal(net.predict_proba(probe), clone.predict_proba(probe))


def test_save_and_load_model_file(tmp_path):
    net = build_network(SMALL, seed=33)
    path = str(tmp_path / "model.intc")
    save_model(net, path)
    clone = load_model(path)
    npt.assert_array_equal(clone.conv_stack[0].weights, net.conv_stack[0].weights)
    assert clone.config == net.config


def test_deserialize_rejects_bad_magic_and_version():
    net = build_network(SMALL, seed=34)
    blob = bytearray(serialize(net))
    with pytest.raises(FormatError, match="magic"):
        deserialize(b"XXXX" + bytes(blob[4:]))
    wrong_version = bytearray(blob)
    wrong_version[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError, match="version"):
        deserialize(bytes(wrong_version))


def test_deserialize_rejects_truncation_with_layer_name():
    net = build_network(SMALL, seed=35)
    blob = serialize(net)
    with pytest.raises(FormatError, match="truncated"):
        deserialize(blob[:len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        deserialize(blob[:10])


def test_deserialize_rejects_trailing_bytes():
    net = build_network(SMALL, seed=36)
    with pytest.raises(FormatError, match="trailing"):
        deserialize(serialize(net) + b"\x00\x00\x00\x00")


def test_deserialize_rejects_unknown_tag():
    net = build_network(SMALL, seed=37)
    blob = bytearray(serialize(net))
    # first record tag sits right after magic+version+count
    assert bytes(blob[12:16]) == b"INPT"
    blob[12:16] = b"WHAT"
    with pytest.raises(FormatError, match="WHAT"):
        deserialize(bytes(blob))


def test_bn_running_stats_survive_round_trip():
    net = build_network(SMALL, seed=38)
    rng = np.random.default_rng(39)
    x = make_batch(rng, SMALL, 8) + 1.5
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    train(net, x, y, x, y, TrainSpec(epochs=1, batch_size=4, seed=0))
    clone = deserialize(serialize(net))
    bn = next(l for l in net.conv_stack if isinstance(l, BatchNormLayer))
    bn_clone = next(l for l in clone.conv_stack if isinstance(l, BatchNormLayer))
    npt.assert_array_equal(bn.running_mean, bn_clone.running_mean)
    npt.assert_array_equal(bn.running_var, bn_clone.running_var)
    assert not np.array_equal(bn.running_mean, np.zeros_like(bn.running_mean))
