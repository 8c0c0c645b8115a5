import numpy as np
import pytest

from mslesion import adapt as ad
from mslesion import cascade as cs
from mslesion.network import FreezeConfig, FreezeMode, build_model
from mslesion.training import TrainConfig
from conftest import block_case

CFG = TrainConfig(max_epochs=2, patience=2, batch_size=16, seed=0)

FROZEN = {
    "fc3": ("conv", "bn", "act", "fc1", "fc2"),
    "fc2_fc3": ("conv", "bn", "act", "fc1"),
    "fc1_fc2_fc3": ("conv", "bn", "act"),
}


@pytest.fixture(scope="module")
def source():
    return cs.CascadeModel(build_model(10), build_model(11), provenance={"kind": "source"})


@pytest.fixture(scope="module")
def targets():
    return [block_case("t0", seed=5), block_case("t1", lesion=((3, 6), (5, 8), (5, 7)), seed=6),
            block_case("t2", lesion=((5, 8), (3, 6), (4, 7)), seed=7)]


def _snapshot(casc):
    return [{k: v.copy() for k, v in net.params.items()} for net in casc.nets]


@pytest.mark.parametrize("mode", list(FROZEN))
def test_freeze_invariance(source, targets, mode):
    before = _snapshot(source)
    blob = cs.cascade_to_bytes(source)
    adapted = ad.adapt(source, targets[:1], mode, CFG)
    # Source untouched.
    assert cs.cascade_to_bytes(source) == blob
    for net_before, net in zip(before, source.nets):
        for k in net.params:
            np.testing.assert_array_equal(net.params[k], net_before[k])
    for src_net, new in zip(source.nets, adapted.nets):
        changed = [k for k in new.params if not np.array_equal(new.params[k], src_net.params[k])]
        frozen = [k for k in new.params if k.startswith(FROZEN[mode])]
        assert frozen
        assert not set(changed) & set(frozen), set(changed) & set(frozen)
        assert changed and all(k.startswith(("fc", "out")) for k in changed)


def test_provenance(source, targets):
    a = ad.adapt(source, targets[:2], FreezeConfig(FreezeMode.FC2_FC3), CFG)
    p = a.provenance
    assert p["kind"] == "adapted" and p["freeze"] == "fc2_fc3" and p["cases"] == ["t0", "t1"]
    assert p["trainable_per_network"] == 41344
    assert p["lesion_volume_ml"] == pytest.approx(sum(c.lesion_volume_ml() for c in targets[:2]))
    assert p["source"] == {"kind": "source"}


def test_head_frozen_when_requested(source, targets):
    a = ad.adapt(source, targets[:1], FreezeConfig(FreezeMode.FC3, retrain_head=False), CFG)
    np.testing.assert_array_equal(a.net1.params["out.weight"], source.net1.params["out.weight"])
    assert not np.array_equal(a.net1.params["fc3.weight"], source.net1.params["fc3.weight"])


def test_store_gives_same_result(source, targets):
    plain = ad.adapt(source, targets[:1], "fc3", CFG)
    cached = ad.adapt(source, targets[:1], "fc3", CFG, store=cs.FeatureStore())
    for a, b in zip(plain.nets, cached.nets):
        for k in a.params:
            np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-4)


def test_errors(source, targets):
    with pytest.raises(ValueError, match="freeze mode"):
        ad.adapt(source, targets, "none", CFG)
    with pytest.raises(ValueError, match="no target"):
        ad.adapt(source, [], "fc3", CFG)
    empty = block_case("e", lesion=((0, 0), (0, 0), (0, 0)))
    with pytest.raises(ValueError, match="no annotated lesions"):
        ad.adapt(source, [empty], "fc3", CFG)
    with pytest.raises(ValueError):
        ad.adapt(source, targets, "fc4", CFG)


@pytest.mark.parametrize("voxels, spacing, expect", [
    (2299, 1.0, "fc3"), (2999, 1.0, "fc3"), (3000, 1.0, "fc1_fc2_fc3"), (8300, 1.0, "fc1_fc2_fc3"),
    (400, 8.0, "fc1_fc2_fc3"), (0, 1.0, "fc3"),
])
def test_recommend_freeze(voxels, spacing, expect):
    assert ad.recommend_freeze(voxels, spacing).mode.value == expect


def test_recommend_freeze_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.recommend_freeze(-1)
    with pytest.raises(ValueError):
        ad.recommend_freeze(10, 0.0)


def test_cell_seed():
    assert ad.cell_seed(0, 1) == int(np.random.SeedSequence([0, 1]).generate_state(1)[0])
    assert len({ad.cell_seed(0, i) for i in range(20)}) == 20


def test_grid(source, targets):
    test = [block_case("x0", seed=9)]
    rep = ad.run_adaptation_grid(source, targets, test, ["fc3", "fc1_fc2_fc3"], [1, 3], CFG, master_seed=4)
    assert [(r.mode, r.n_images) for r in rep.rows] == [("fc3", 1), ("fc3", 3), ("fc1_fc2_fc3", 1),
                                                       ("fc1_fc2_fc3", 3)]
    assert [r.seed for r in rep.rows] == [ad.cell_seed(4, i) for i in range(4)]
    cell = rep.cell("fc3", 3)
    assert cell.lesion_volume_ml == pytest.approx(sum(c.lesion_volume_ml() for c in targets))
    assert len(cell.report.cases) == 1
    # A cell equals a standalone adaptation with the same seed.
    alone = ad.adapt(source, targets[:1], "fc3", TrainConfig(**{**CFG.to_dict(), "seed": rep.rows[0].seed}))
    from mslesion.metrics import evaluate
    assert evaluate(alone, test).summary() == rep.rows[0].report.summary()
    lines = rep.to_dsv().strip().split("\n")
    assert lines[0].split("\t")[:3] == ["mode", "n_images", "lesion_ml"] and len(lines) == 5
    assert "fc1_fc2_fc3" in rep.to_table()
    with pytest.raises(KeyError):
        rep.cell("fc2_fc3", 1)


def test_grid_validation(source, targets):
    with pytest.raises(ValueError, match="overlap"):
        ad.run_adaptation_grid(source, targets, targets[:1], ["fc3"], [1], CFG)
    with pytest.raises(ValueError, match="subset size"):
        ad.run_adaptation_grid(source, targets, [block_case("x")], ["fc3"], [4], CFG)
