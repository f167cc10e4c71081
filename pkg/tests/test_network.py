import numpy as np
import pytest

from veinseg.network import (STAGE_NAMES, TABLE_OUTPUT_SIZES, NetConfig, build_model, forward_infer,
                             parameter_summary, predict_proba, stage_shapes)
from veinseg.tensor import softmax_channels

# stage -> (spatial extent, channels) for a 64x64 single-channel input
TABLE = {
    "conv1": (32, 64), "conv2": (16, 256), "conv3": (8, 512), "deconv4": (16, 256),
    "conv5": (16, 256), "conv6": (16, 256), "deconv7": (32, 128), "conv8": (32, 128),
    "conv9": (32, 128), "deconv10": (64, 64), "conv11": (64, 64), "conv12": (64, 64),
    "conv13": (64, 2),
}


@pytest.fixture(scope="module")
def full_model():
    return build_model(0)


def test_stage_shapes_match_layer_table(full_model):
    shapes = stage_shapes(full_model)
    assert list(shapes) == list(STAGE_NAMES)
    for name, (size, ch) in TABLE.items():
        assert shapes[name] == (1, ch, size, size), name
        assert TABLE_OUTPUT_SIZES[name] == size


def _count_table(C=32, bn=True, in_ch=1, classes=2):
    """Parameter count walked from the layer table, independent of build_model."""
    def conv(cin, cout, k, groups=1, norm=False):
        return k * k * (cin // groups) * cout + (2 * cout if norm else cout)

    def block(cin, width, cout, stride):
        n = conv(cin, width, 1, norm=bn) + conv(width, width, 3, C, norm=bn) + conv(width, cout, 1, norm=bn)
        if cin != cout or stride != 1:
            n += conv(cin, cout, 1, norm=bn)
        return n

    total = conv(in_ch, 64, 3)
    total += block(64, 128, 256, 1) + 2 * block(256, 128, 256, 1)
    total += block(256, 256, 512, 2) + 2 * block(512, 256, 512, 1)
    total += conv(512, 256, 3)           # deconv4: weights (in, out, k, k) + bias
    total += conv(256 + 256, 256, 3) + conv(256, 256, 3)
    total += conv(256, 128, 3)           # deconv7
    total += conv(128 + 64, 128, 3) + conv(128, 128, 3)
    total += conv(128, 64, 3)            # deconv10
    total += conv(64 + in_ch, 64, 3) + conv(64, 64, 3) + conv(64, classes, 3)
    return total


def test_parameter_count_matches_independent_walk(full_model):
    assert full_model.parameter_count() == _count_table()


def test_parameter_count_without_batchnorm():
    m = build_model(0, NetConfig(batchnorm=False, width_div=8, cardinality=4))
    assert sum(p.data.size for p in m.params.values()) == m.parameter_count()
    assert not m.buffers


def test_same_seed_bit_identical():
    cfg = NetConfig(width_div=8, cardinality=4)
    a, b = build_model(5, cfg), build_model(5, cfg)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build_model(6, cfg)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_forward_single_and_batch_of_eight(full_model):
    out = forward_infer(full_model, np.zeros((1, 1, 64, 64), np.float32))
    assert out.shape == (1, 2, 64, 64)
    x = np.random.default_rng(0).random((8, 1, 64, 64)).astype(np.float32)
    logits = forward_infer(full_model, x)
    assert logits.shape == (8, 2, 64, 64)
    probs = softmax_channels(logits).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_wrong_input_size(full_model):
    with pytest.raises(ValueError):
        forward_infer(full_model, np.zeros((1, 1, 70, 70), np.float32))


def test_parameter_summary(full_model):
    text = parameter_summary(full_model)
    rows = text.splitlines()[1:-1]
    assert [r.split()[0] for r in rows] == list(STAGE_NAMES)
    deconv = {r.split()[0]: r.split()[1] for r in rows if r.startswith("deconv")}
    assert deconv == {"deconv4": "256x16x16", "deconv7": "128x32x32", "deconv10": "64x64x64"}
    assert sum(int(r.split()[-1]) for r in rows) == full_model.parameter_count()
    assert int(text.splitlines()[-1].split()[-1]) == full_model.parameter_count()


def test_grouped_convs_use_configured_cardinality(full_model):
    w = full_model.params["conv2.block0.grouped.weight"].data
    assert w.shape == (128, 128 // 32, 3, 3)


def test_reduced_width_keeps_topology():
    m = build_model(0, NetConfig(width_div=16, cardinality=2))
    shapes = stage_shapes(m, batch_size=2)
    for name, (size, _) in TABLE.items():
        assert shapes[name][0] == 2 and shapes[name][2:] == (size, size)
    assert shapes["conv13"][1] == 2


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        build_model(0, NetConfig(cardinality=5))
    with pytest.raises(ValueError):
        build_model(0, NetConfig(input_size=60))


def test_copy_is_independent_and_state_roundtrips():
    m = build_model(1, NetConfig(width_div=16, cardinality=2))
    c = m.copy()
    c.params["conv1.weight"].data += 1
    assert not np.array_equal(c.params["conv1.weight"].data, m.params["conv1.weight"].data)
    c.load_state_arrays(m.state_arrays())
    x = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(predict_proba(c, x), predict_proba(m, x))
