import json
import os

import numpy as np
import pytest

from mslesion import cascade as cs
from mslesion import cli
from mslesion.network import build_model
from mslesion.volume_io import load_nifti, save_case_dir
from conftest import block_case

TINY = {"train": {"max_epochs": 2, "patience": 2, "batch_size": 16},
        "phantom": {"preset": "small", "n_cases": 2}}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [ln for ln in err.strip().splitlines() if not ln.startswith(("config ", "INFO", "WARNING"))]
    assert len(lines) == 1, err
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def trained(work):
    """Phantom sets plus a source cascade built through the command line."""
    cfg = work / "tiny.json"
    assert cli.main(["phantom", "--config", str(cfg), "--out", str(work / "src"), "--seed", "1"]) == 0
    assert cli.main(["phantom", "--config", str(cfg), "--out", str(work / "tgt"), "--seed", "2",
                     "--domain", "shifted"]) == 0
    assert cli.main(["train-source", "--config", str(cfg), "--cases", str(work / "src"),
                     "--out", str(work / "src.casc"), "--deterministic"]) == 0
    return work


def test_inspect_lists_parameter_table(tmp_path, capsys):
    path = tmp_path / "m.casc"
    cs.save_cascade(cs.CascadeModel(build_model(0), build_model(1)), path)
    code, out, err = run(capsys, "inspect", "--model", path)
    assert code == 0
    for n in ("470466", "172928", "41344", "8320"):
        assert n in out
    assert err.startswith("config ")
    logged = json.loads(err.split("config ", 1)[1].splitlines()[0])
    assert logged["seed"] == 0 and logged["postprocess"]["l_min"] == 10


def test_defaults_match_published_values():
    cfg = cli.load_config()
    t = cli.train_config(cfg)
    assert (t.batch_size, t.max_epochs, t.patience, t.validation_fraction, t.negative_resample_period) == \
        (128, 400, 50, 0.25, 10)
    p = cli.post_config(cfg)
    assert (p.t_bin, p.l_min) == (0.5, 10)


@pytest.mark.parametrize("doc, fragment", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"learning_rate": 1}}, "learning_rate"),
    ({"train": {"seed": 3}}, "seed"),
    ({"paths": []}, "paths"),
    ({"train": {"batch_size": 0}}, "batch_size"),
])
def test_invalid_config_single_line_error(tmp_path, capsys, doc, fragment):
    (tmp_path / "c.json").write_text(json.dumps(doc))
    (tmp_path / "m.casc").write_bytes(b"")
    code, _, err = run(capsys, "train-source", "--config", tmp_path / "c.json", "--cases", tmp_path,
                       "--out", tmp_path / "x.casc")
    assert code == 2
    e = error_line(err)
    assert e["error"] == "config" and fragment in e["message"]


def test_malformed_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{nope")
    code, _, err = run(capsys, "inspect", "--config", tmp_path / "c.json", "--model", "x")
    assert code == 2 and error_line(err)["error"] == "config"


def test_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "inspect", "--model", tmp_path / "absent.casc")
    assert code == 3 and error_line(err)["error"] == "missing-file"


def test_incompatible_container_version(tmp_path, capsys):
    blob = cs.cascade_to_bytes(cs.CascadeModel(build_model(0), build_model(1)))
    (tmp_path / "v.casc").write_bytes(blob.replace(b"MSLESION-CASCADE 1", b"MSLESION-CASCADE 9", 1))
    code, _, err = run(capsys, "inspect", "--model", tmp_path / "v.casc")
    assert code == 4 and error_line(err)["error"] == "format"


def test_unknown_subcommand_and_flag(capsys):
    assert run(capsys, "explode")[0] == 2
    code, _, err = run(capsys, "inspect", "--cases", "x")
    assert code == 2 and error_line(err)["error"] == "config"


def test_thread_env_validated(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    code, _, err = run(capsys, "inspect", "--model", tmp_path / "m")
    assert code == 2 and cli.THREADS_ENV in error_line(err)["message"]


def test_phantom_layout_and_seed_override(work, tmp_path, capsys):
    cfg = work / "tiny.json"
    assert run(capsys, "phantom", "--config", cfg, "--out", tmp_path / "a", "--seed", "5")[0] == 0
    assert run(capsys, "phantom", "--config", cfg, "--out", tmp_path / "b", "--seed", "5")[0] == 0
    assert run(capsys, "phantom", "--config", cfg, "--out", tmp_path / "c", "--seed", "6")[0] == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["source-000", "source-001"]
    assert sorted(os.listdir(tmp_path / "a" / names[0])) == ["brain.nii", "flair.nii", "lesion.nii", "t1.nii"]
    same = (tmp_path / "a" / names[0] / "flair.nii").read_bytes()
    assert same == (tmp_path / "b" / names[0] / "flair.nii").read_bytes()
    assert same != (tmp_path / "c" / names[0] / "flair.nii").read_bytes()


def test_auto_freeze_by_lesion_volume():
    # 18 lesion voxels of 127.78 mm^3 each: 2.3 ml.
    small = block_case("s", spacing=(5.0, 5.0, 2300 / 18 / 25))
    assert small.lesion_volume_ml() == pytest.approx(2.3)
    cfg = cli.load_config()
    assert cli.choose_freeze(cfg, [small]).mode.value == "fc3"
    big = block_case("b", spacing=(5.0, 5.0, 3000 / 18 / 25))
    assert cli.choose_freeze(cfg, [big]).mode.value == "fc1_fc2_fc3"
    cfg["freeze"]["mode"] = "fc2_fc3"
    assert cli.choose_freeze(cfg, [small]).mode.value == "fc2_fc3"
    cfg["freeze"]["mode"] = "none"
    with pytest.raises(cli.ConfigError):
        cli.choose_freeze(cfg, [small])


def test_train_source_is_reproducible(trained, capsys):
    cfg = trained / "tiny.json"
    code, _, _ = run(capsys, "train-source", "--config", cfg, "--cases", trained / "src",
                     "--out", trained / "again.casc", "--deterministic")
    assert code == 0
    assert (trained / "again.casc").read_bytes() == (trained / "src.casc").read_bytes()


def test_adapt_auto_mode(trained, tmp_path, capsys):
    one = tmp_path / "one"
    first = sorted(os.listdir(trained / "tgt"))[0]
    os.makedirs(one)
    os.symlink(trained / "tgt" / first, one / first)
    code, _, _ = run(capsys, "adapt", "--config", trained / "tiny.json", "--model", trained / "src.casc",
                     "--cases", one, "--out", tmp_path / "a.casc")
    assert code == 0
    adapted = cs.load_cascade(tmp_path / "a.casc")
    assert adapted.provenance["freeze"] == "fc3"
    src = cs.load_cascade(trained / "src.casc")
    for name, value in src.net1.params.items():
        if name.startswith(("conv", "bn", "act", "fc1", "fc2")):
            np.testing.assert_array_equal(adapted.net1.params[name], value)


def test_infer_then_evaluate_against_own_output(trained, tmp_path, capsys):
    model = trained / "src.casc"
    code, _, _ = run(capsys, "infer", "--model", model, "--cases", trained / "tgt", "--out", tmp_path / "pred")
    assert code == 0
    case_dir = tmp_path / "pred" / sorted(os.listdir(trained / "tgt"))[0]
    prob = load_nifti(case_dir / "prob.nii").data
    mask = load_nifti(case_dir / "mask.nii").data
    assert prob.min() >= 0 and prob.max() <= 1
    np.testing.assert_array_equal(mask != 0, cs.postprocess(prob, cs.PostprocessConfig()))

    code, out, _ = run(capsys, "evaluate", "--model", model, "--cases", trained / "tgt",
                       "--reference", tmp_path / "pred", "--out", tmp_path / "r.tsv")
    assert code == 0
    rows = (tmp_path / "r.tsv").read_text().strip().split("\n")
    header = rows[0].split("\t")
    for row in rows[1:-1]:
        vals = dict(zip(header, row.split("\t")))
        assert float(vals["dsc"]) == float(vals["sensitivity"]) == float(vals["precision"]) == 1.0
    assert "1.00 (0.00)" in out

    code, out, _ = run(capsys, "evaluate", "--model", model, "--cases", trained / "tgt", "--reference", model)
    assert code == 0 and out.count("1.00 (0.00)") == 3


def test_evaluate_expert_writes_report(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--model", trained / "src.casc", "--cases", trained / "src",
                       "--out", tmp_path / "e.tsv")
    assert code == 0 and "mean (std)" in out
    assert (tmp_path / "e.tsv").read_text().startswith("case_id\tdsc")


def test_grid(trained, tmp_path, capsys):
    doc = {**TINY, "grid": {"modes": ["fc3"], "sizes": [1]}}
    (tmp_path / "g.json").write_text(json.dumps(doc))
    code, out, _ = run(capsys, "grid", "--config", tmp_path / "g.json", "--model", trained / "src.casc",
                       "--cases", trained / "tgt", "--test-cases", trained / "src", "--out", tmp_path / "g.tsv")
    assert code == 0
    lines = (tmp_path / "g.tsv").read_text().strip().split("\n")
    assert len(lines) == 2 and lines[1].startswith("fc3\t1\t")


def test_grid_rejects_overlap(trained, capsys):
    code, _, err = run(capsys, "grid", "--config", trained / "tiny.json", "--model", trained / "src.casc",
                       "--cases", trained / "tgt", "--test-cases", trained / "tgt")
    assert code == 1 and "overlap" in error_line(err)["message"]


def test_adapt_rejects_unlabelled_target(trained, tmp_path, capsys):
    case = block_case("nolesion", lesion=((0, 0), (0, 0), (0, 0)))
    save_case_dir(case, tmp_path)
    code, _, err = run(capsys, "adapt", "--model", trained / "src.casc", "--cases", tmp_path / "nolesion",
                       "--out", tmp_path / "x.casc", "--mode", "fc3")
    assert code == 1 and "no annotated lesions" in error_line(err)["message"]
