import numpy as np
import pytest

from mslesion import network as nw
from mslesion import ops
from mslesion.optim import AdadeltaState
from mslesion.training import train_step
from conftest import rel_error

TABLE = {"none": 470466, "fc1_fc2_fc3": 172928, "fc2_fc3": 41344, "fc3": 8320}


@pytest.fixture(scope="module")
def model():
    return nw.build_model(3)


def test_canonical_layer_sequence():
    kinds = [s.kind for s in nw.canonical_layers()]
    assert kinds == ["conv3d", "batchnorm", "prelu", "conv3d", "batchnorm", "prelu", "maxpool",
                     "conv3d", "batchnorm", "prelu", "conv3d", "batchnorm", "prelu", "maxpool", "flatten",
                     "dense", "prelu", "dropout", "dense", "prelu", "dropout", "dense", "prelu", "dropout",
                     "dense"]
    dense = [s.size for s in nw.canonical_layers() if s.kind == "dense"]
    assert dense == [(512, 256), (256, 128), (128, 64), (64, 2)]


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_total_count(seed):
    assert nw.count_params(nw.build_model(seed))[0] == 470466


@pytest.mark.parametrize("mode", ["fc1_fc2_fc3", "fc2_fc3", "fc3"])
def test_table_counts(model, mode):
    assert nw.count_params(model, nw.FreezeConfig(mode)) == (470466, TABLE[mode])


def test_counts_are_sums_of_layers(model):
    per_group = {g: nw.group_param_count(model, g) for g in nw.GROUPS}
    assert per_group["FC3"] == 128 * 64 + 64 + 64
    assert per_group["FC2"] + per_group["FC3"] == TABLE["fc2_fc3"]
    assert per_group["FC1"] + per_group["FC2"] + per_group["FC3"] == TABLE["fc1_fc2_fc3"]
    assert per_group["OUT"] == 130
    buffers = sum(v.size for k, v in model.params.items() if nw.is_buffer(k))
    assert sum(per_group.values()) + buffers == 470466
    assert 8320 < 41344 < 172928 < 470466


def test_flatten_length(model):
    x = np.zeros((2, 2, 11, 11, 11), np.float32)
    stop = [s.kind for s in model.layers].index("flatten") + 1
    assert nw.forward_features(model, x, stop).shape == (2, 512)


def test_same_seed_same_weights():
    a, b = nw.build_model(5), nw.build_model(5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = nw.build_model(6)
    assert not np.array_equal(a.params["conv1.weight"], c.params["conv1.weight"])


def test_initial_values(model):
    assert np.all(model.params["act1.slope"] == 0.25)
    assert np.all(model.params["bn1.gamma"] == 1) and np.all(model.params["bn1.running_var"] == 1)
    assert not model.params["bn1.beta"].any() and not model.params["bn1.running_mean"].any()


def test_set_trainable_groups(model):
    assert all(nw.set_trainable(model, nw.FreezeConfig("none")).trainable.values())
    t = nw.set_trainable(model, nw.FreezeConfig("fc3")).trainable
    assert t == {"CONV": False, "FC1": False, "FC2": False, "FC3": True, "OUT": True}
    t = nw.set_trainable(model, nw.FreezeConfig("fc3", retrain_head=False)).trainable
    assert t["OUT"] is False
    assert model.trainable["CONV"]  # original untouched


@pytest.mark.parametrize("mode", ["fc1_fc2_fc3", "fc2_fc3", "fc3"])
def test_frozen_tensors_unchanged_by_training_steps(model, mode, rng):
    m = nw.set_trainable(model, nw.FreezeConfig(mode))
    before = {k: v.copy() for k, v in m.params.items()}
    x = rng.standard_normal((6, 2, 11, 11, 11)).astype(np.float32)
    y = np.array([0, 1, 0, 1, 1, 0])
    state = AdadeltaState()
    r = np.random.default_rng(0)
    for _ in range(2):
        train_step(m, state, x, y, r)
    changed = {k for k in m.params if not np.array_equal(m.params[k], before[k])}
    groups = {spec.name: spec.group for spec in m.layers}
    for k in m.params:
        group = groups[k.split(".")[0]]
        if group in nw.FreezeConfig(mode).groups:
            if not nw.is_buffer(k):
                assert k in changed, k
        else:
            assert k not in changed, k


def test_full_training_updates_running_stats(model, rng):
    m = model.copy()
    x = rng.standard_normal((4, 2, 11, 11, 11)).astype(np.float32)
    train_step(m, AdadeltaState(), x, np.array([0, 1, 0, 1]), np.random.default_rng(0))
    assert not np.array_equal(m.params["bn1.running_mean"], model.params["bn1.running_mean"])


def test_predict_probabilities(model, rng):
    x = rng.standard_normal((5, 2, 11, 11, 11)).astype(np.float32)
    p = nw.predict(model, x)
    assert p.shape == (5,) and np.all((p >= 0) & (p <= 1))
    full = ops.softmax(nw.predict_logits(model, x))
    np.testing.assert_allclose(full.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_array_equal(nw.predict(model, x), p)


def test_predict_independent_of_chunking(model, rng):
    x = rng.standard_normal((70, 2, 11, 11, 11)).astype(np.float32)
    whole = nw.predict(model, x)
    parts = np.concatenate([nw.predict(model, x[:3]), nw.predict(model, x[3:])])
    np.testing.assert_allclose(whole, parts, atol=1e-6)


def test_predict_wrong_shape(model):
    with pytest.raises(ops.ShapeError):
        nw.predict(model, np.zeros((2, 2, 9, 11, 11), np.float32))


def test_serialization_roundtrip(model, tmp_path, rng):
    m = nw.set_trainable(model, nw.FreezeConfig("fc2_fc3"))
    path = tmp_path / "m.bin"
    nw.save_model(m, path)
    back = nw.load_model(path)
    assert back.trainable == m.trainable and back.seed == m.seed
    assert [s for s in back.layers] == [s for s in m.layers]
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    x = rng.standard_normal((3, 2, 11, 11, 11)).astype(np.float32)
    np.testing.assert_array_equal(nw.predict(back, x), nw.predict(m, x))
    assert nw.model_to_bytes(back) == nw.model_to_bytes(m)


def test_container_header_is_text(model):
    blob = nw.model_to_bytes(model)
    header = blob[:blob.index(b"\nend\n")].decode("ascii")
    assert header.startswith("MSLESION-MODEL 1\nseed 3\ntrainable CONV=1")
    assert "layer fc3 dense FC3 128,64" in header


@pytest.mark.parametrize("damage", ["checksum", "truncate", "version", "magic"])
def test_corrupt_containers_rejected(model, damage):
    blob = bytearray(nw.model_to_bytes(model))
    if damage == "checksum":
        blob[-40] ^= 1
    elif damage == "truncate":
        blob = blob[:-100]
    elif damage == "version":
        blob = blob.replace(b"MSLESION-MODEL 1", b"MSLESION-MODEL 2", 1)
    else:
        blob[0:3] = b"XYZ"
    with pytest.raises(nw.FormatError):
        nw.model_from_bytes(bytes(blob))


def test_parameter_table(model):
    rows = nw.parameter_table(model)
    assert [r[2] for r in rows] == [470466, 172928, 41344, 8320]


def _loss(model, x, y, seed):
    out, caches, _ = nw.forward(model, x, "train", np.random.default_rng(seed))
    return ops.softmax_crossentropy(out, y), caches


def test_whole_network_gradient_float64(rng):
    m = nw.build_model(1, dtype=np.float64)
    # Non-trivial slopes and normalization parameters.
    for k, v in m.params.items():
        if k.endswith(("slope", "gamma", "beta", "bias")):
            v[...] = rng.uniform(0.1, 0.6, v.shape) if not k.endswith("beta") and not k.endswith("bias") \
                else rng.normal(0, 0.1, v.shape)
    x = rng.standard_normal((4, 2, 11, 11, 11))
    y = ops.one_hot([0, 1, 1, 0], dtype=np.float64)
    (loss, grad), caches = _loss(m, x, y, 11)
    grads = nw.backward(m, caches, grad)
    learnable = [k for k in m.params if not nw.is_buffer(k)]
    assert set(grads) == set(learnable)
    eps = 1e-6
    worst = 0.0
    for name in learnable:
        g = grads[name]
        if name.startswith("conv") and name.endswith(".bias"):
            # Batch statistics cancel any bias added before normalization.
            assert np.max(np.abs(g)) < 1e-12
            continue
        # The entries carrying the largest gradient of each tensor.
        for flat in np.argsort(-np.abs(g).ravel())[:2]:
            idx = np.unravel_index(flat, g.shape)
            p = m.params[name]
            old = p[idx]
            p[idx] = old + eps
            lp = _loss(m, x, y, 11)[0][0]
            p[idx] = old - eps
            lm = _loss(m, x, y, 11)[0][0]
            p[idx] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, rel_error(fd, g[idx]))
    assert worst < 1e-5


def test_backward_stops_at_frozen_prefix(model, rng):
    m = nw.set_trainable(model, nw.FreezeConfig("fc3"))
    x = rng.standard_normal((2, 2, 11, 11, 11)).astype(np.float32)
    out, caches, _ = nw.forward(m, x, "train", np.random.default_rng(0))
    grads = nw.backward(m, caches, ops.softmax_crossentropy(out, ops.one_hot([0, 1]))[1])
    assert set(grads) == {"fc3.weight", "fc3.bias", "fc3_act.slope", "out.weight", "out.bias"}


def test_forward_from_cached_prefix_matches(model, rng):
    m = nw.set_trainable(model, nw.FreezeConfig("fc2_fc3"))
    x = rng.standard_normal((3, 2, 11, 11, 11)).astype(np.float32)
    start = nw.first_trainable_index(m)
    feats = nw.forward_features(m, x, start)
    a, _, _ = nw.forward(m, x, "train", np.random.default_rng(4))
    b, _, _ = nw.forward(m, feats, "train", np.random.default_rng(4), start=start)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
