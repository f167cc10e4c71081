import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from veinseg.data_io import generate_dataset
from veinseg.experiment import benchmark_config, evaluate_model, run_fold, split_validation
from veinseg.network import build_model


@pytest.fixture(scope="module")
def entries():
    return generate_dataset(2, subjects=4, images_per_subject=3, labeled_per_subject=2)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.5), st.integers(0, 1000), st.integers(0, 4))
def test_split_validation_partitions_labeled(fraction, seed, fold):
    entries = generate_dataset(0, subjects=5, images_per_subject=1, labeled_per_subject=1)
    train, val = split_validation(entries, fraction, seed, fold)
    ids = sorted(e.image_id for e in train + val)
    assert ids == sorted(e.image_id for e in entries if e.split == "labeled")
    assert len(val) >= 1 and train
    again = split_validation(entries, fraction, seed, fold)
    assert [e.image_id for e in again[1]] == [e.image_id for e in val]


def test_split_validation_edges(entries):
    train, val = split_validation(entries, 0.0, 0)
    assert val == [] and all(e.split == "labeled" for e in train)
    with pytest.raises(ValueError):
        split_validation(entries, 0.99, 0)
    with pytest.raises(ValueError):
        split_validation([e for e in entries if e.split == "unlabeled"], 0.2, 0)


def test_evaluate_model_scores_every_image(entries):
    cfg = benchmark_config()
    results, preds = evaluate_model(build_model(0, cfg.net), entries, cfg)
    assert [r.image_id for r in results] == [e.image_id for e in entries]
    assert all(preds[e.image_id].shape == (64, 64) for e in entries)
    assert all(0.0 <= r.dsc <= 1.0 for r in results)


def test_run_fold_experiments_and_artifacts(entries):
    cfg = benchmark_config(bce_max_epochs=1, focal_max_epochs=1, semi_epochs=1, patience=1)
    train = [e for e in entries if e.subject != "subject_03"]
    test = [e for e in entries if e.subject == "subject_03"]
    arts = {}
    out = run_fold(train, test, 3, cfg, ["mean_teacher", "pseudo_label"], seed=1, artifacts=arts)
    assert set(out) == {"supervised", "mean_teacher", "mean_teacher_student", "mean_teacher_teacher",
                        "pseudo_label"}
    assert all(len(v) == len(test) for v in out.values())
    art = arts[3]
    assert set(art.predictions) == set(out)
    assert art.selected["mean_teacher"] in ("teacher", "student")
    chosen = out["mean_teacher_" + art.selected["mean_teacher"]]
    assert [r.dsc for r in chosen] == [r.dsc for r in out["mean_teacher"]]
    np.testing.assert_array_equal(art.predictions["supervised"][test[0].image_id],
                                  evaluate_model(art.models["supervised"], test[:1], cfg)[1][test[0].image_id])


def test_benchmark_config_overrides():
    cfg = benchmark_config(semi_epochs=7)
    assert cfg.semi_epochs == 7 and cfg.net.width_div == 16 and cfg.net.cardinality == 2
