import csv
import json
from collections import Counter

import pytest

from veinseg.cli import main
from veinseg.data_io import load_checkpoint

FAST = ["--bce-epochs", "2", "--focal-epochs", "2", "--epochs", "1", "--patience", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-phantom", "--out", str(d), "--subjects", "5", "--images-per-subject", "3",
                 "--labeled-per-subject", "2", "--seed", "4"]) == 0
    return d


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_gen_phantom_manifest_lists_every_file(dataset):
    m = _manifest(dataset)
    assert m["command"] == "gen-phantom" and m["seed"] == 4
    written = {str(p) for p in dataset.rglob("*") if p.is_file()}
    assert written == set(m["artifacts"])


def test_train_supervised_writes_checkpoint(dataset, tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--method", "supervised", "--data", str(dataset), "--out", str(out), "--seed", "1",
                 *FAST]) == 0
    ck = load_checkpoint(out / "checkpoint.vseg")
    assert ck.meta["method"] == "supervised" and ck.meta["seed"] == 1
    header = (out / "train_log.csv").read_text().splitlines()[0]
    assert header == "iter,phase,loss_sup,loss_cons,loss_total,val_dsc"
    m = _manifest(out)
    assert m["settings"]["method"] == "supervised"
    assert m["train_config"]["bce_max_epochs"] == 2
    assert {str(out / "checkpoint.vseg"), str(out / "train_log.csv")} <= set(m["artifacts"])


def test_train_mean_teacher_then_infer_and_navigate(dataset, tmp_path):
    out = tmp_path / "mt"
    assert main(["train", "--data", str(dataset), "--out", str(out), *FAST]) == 0
    ck = load_checkpoint(out / "checkpoint.vseg")
    assert {"model", "student", "teacher"} <= set(ck.models)
    assert ck.meta["selected"] in ("teacher", "student")

    inf = tmp_path / "inf"
    assert main(["infer", "--data", str(dataset), "--checkpoint", str(out / "checkpoint.vseg"),
                 "--out", str(inf)]) == 0
    assert len(list((inf / "masks").glob("*_pred.pgm"))) == 15

    nav = tmp_path / "nav"
    assert main(["navigate", "--data", str(dataset / "subject_00" / "img_00.pgm"),
                 "--checkpoint", str(out / "checkpoint.vseg"), "--out", str(nav)]) == 0
    rec = json.loads((nav / "navigation.jsonl").read_text().splitlines()[0])
    assert {"centroid", "depth_mm", "axis5_travel_mm", "axis6_travel_mm", "failed"} <= set(rec)


def test_misspelled_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--methdo", "supervised"])
    assert exc.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code = main(["train", "--data", str(missing), "--out", str(tmp_path / "o")])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_eval_summary_rows(dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--method", "mean_teacher", "--folds", "5", "--data", str(dataset), "--out", str(out),
                 *FAST]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    per_exp = Counter(r["experiment"] for r in rows)
    assert "supervised" in per_exp and len(per_exp) >= 2
    for exp in per_exp:
        folds = [r["fold"] for r in rows if r["experiment"] == exp]
        assert folds == ["0", "1", "2", "3", "4", "all"]
    with open(out / "results.csv") as fh:
        assert next(csv.reader(fh)) == ["experiment", "fold", "image_id", "dsc", "centroid_error", "failed"]
    overlays = list((out / "overlays").rglob("*.pgm"))
    assert len(overlays) == 15 * len(per_exp)
    assert {str(p) for p in overlays} <= set(_manifest(out)["artifacts"])


def test_config_file_then_flags(dataset, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"method": "supervised", "seed": 9, "bce_epochs": 1, "focal_epochs": 1,
                                "lambda2": 0.5}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(conf), "--data", str(dataset), "--out", str(out), "--seed", "3"]) == 0
    m = _manifest(out)
    assert m["seed"] == 3  # the flag wins over the file
    assert m["train_config"]["lambda2"] == 0.5 and m["train_config"]["bce_max_epochs"] == 1
    assert m["settings"]["alpha"] is None and m["train_config"]["ema_alpha"] == 0.99


def test_config_rejects_unknown_key_and_bad_values(dataset, tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"methdo": "supervised"}))
    assert main(["train", "--config", str(conf), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2
    assert "methdo" in capsys.readouterr().err
    assert main(["train", "--alpha", "1.5", "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2


def test_checkpoint_required_for_infer(dataset, tmp_path):
    assert main(["infer", "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2
