"""Subject-grouped cross-validation of supervised vs semi-supervised training."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data_io import DatasetEntry
from .metrics import Aggregate, FoldReport, ImageResult, cross_validate, score_image
from .network import SegModel
from .trainer import (TrainConfig, predict_masks, prepare_eval, prepare_masks, select_inference_model,
                      train_semi, train_supervised)

log = logging.getLogger(__name__)


@dataclass
class FoldArtifacts:
    """Models and predictions of one fold, kept for overlays and checkpoints."""
    fold: int
    models: Dict[str, SegModel] = field(default_factory=dict)
    predictions: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    selected: Dict[str, str] = field(default_factory=dict)
    history: Dict[str, dict] = field(default_factory=dict)
    seconds: float = 0.0


def split_validation(entries: Sequence[DatasetEntry], fraction: float, seed: int,
                     fold: int = 0) -> Tuple[List[DatasetEntry], List[DatasetEntry]]:
    """Hold out a seeded ``fraction`` of the labeled entries for model selection."""
    labeled = [e for e in entries if e.split == "labeled"]
    if not labeled:
        raise ValueError("no labeled training entries")
    if fraction <= 0:
        return labeled, []
    order = np.random.default_rng([seed, fold, 99]).permutation(len(labeled))
    n_val = max(1, int(round(fraction * len(labeled))))
    if n_val >= len(labeled):
        raise ValueError("validation split leaves no training images")
    val_idx = set(order[:n_val].tolist())
    train = [e for i, e in enumerate(labeled) if i not in val_idx]
    val = [e for i, e in enumerate(labeled) if i in val_idx]
    return train, val


def evaluate_model(model: SegModel, entries: Sequence[DatasetEntry], cfg: TrainConfig
                   ) -> Tuple[List[ImageResult], Dict[str, np.ndarray]]:
    """Score a model on every entry with ground truth, at the network resolution."""
    scored = [e for e in entries if e.eval_mask is not None]
    images = prepare_eval([e.image for e in scored], cfg.input_size)
    gts = prepare_masks([e.eval_mask for e in scored], cfg.input_size)
    preds = predict_masks(model, images, cfg)
    results = [score_image(e.image_id, p, g) for e, p, g in zip(scored, preds, gts)]
    return results, {e.image_id: p.mask for e, p in zip(scored, preds)}


def _methods(method: Union[str, Sequence[str]]) -> List[str]:
    ms = [method] if isinstance(method, str) else list(method)
    return [m for m in ms if m != "supervised"]


def run_fold(train: Sequence[DatasetEntry], test: Sequence[DatasetEntry], fold: int,
             cfg: TrainConfig, method: Union[str, Sequence[str]], seed: int, val_fraction: float = 0.2,
             artifacts: Optional[Dict[int, FoldArtifacts]] = None) -> Dict[str, List[ImageResult]]:
    """Train the supervised baseline, then each semi-supervised ``method`` from it; score all on ``test``."""
    t0 = time.perf_counter()
    fold_seed = seed * 1000 + fold
    lab, val = split_validation(train, val_fraction, seed, fold)
    unl = [e for e in train if e.split == "unlabeled"]
    images, masks = [e.image for e in lab], [e.mask for e in lab]
    val_pair = None
    if val:
        val_pair = (prepare_eval([e.image for e in val], cfg.input_size),
                    prepare_masks([e.mask for e in val], cfg.input_size))

    sup = train_supervised(images, masks, cfg, seed=fold_seed, val=val_pair)
    out: Dict[str, List[ImageResult]] = {}
    art = FoldArtifacts(fold)
    res, pred = evaluate_model(sup.model, test, cfg)
    out["supervised"], art.models["supervised"], art.predictions["supervised"] = res, sup.model, pred

    for m_name in _methods(method):
        semi = train_semi(images, masks, [e.image for e in unl], m_name, sup.model, cfg,
                          seed=fold_seed, val=val_pair)
        model = semi.student
        art.history[m_name] = semi.history
        if m_name == "mean_teacher":
            sel_val = val_pair or (prepare_eval(images, cfg.input_size), prepare_masks(masks, cfg.input_size))
            model, which, _ = select_inference_model(semi.teacher, semi.student, *sel_val, cfg)
            art.selected[m_name] = which
            for name, m in (("student", semi.student), ("teacher", semi.teacher)):
                key = f"{m_name}_{name}"
                out[key], art.predictions[key] = evaluate_model(m, test, cfg)
        res, pred = evaluate_model(model, test, cfg)
        out[m_name], art.models[m_name], art.predictions[m_name] = res, model, pred
    art.seconds = time.perf_counter() - t0
    if artifacts is not None:
        artifacts[fold] = art
    log.info("fold %d: %s", fold, ", ".join(f"{k}={np.mean([r.dsc for r in v]):.4f}" for k, v in out.items()))
    return out


def run_cross_validation(entries: Sequence[DatasetEntry], cfg: TrainConfig,
                         method: Union[str, Sequence[str]] = "mean_teacher",
                         seed: int = 0, folds: int = 5, val_fraction: float = 0.2,
                         artifacts: Optional[Dict[int, FoldArtifacts]] = None
                         ) -> Dict[str, Tuple[List[FoldReport], Aggregate]]:
    def runner(train, test, k):
        return run_fold(train, test, k, cfg, method, seed, val_fraction, artifacts)

    return cross_validate(entries, runner, folds=folds, seed=seed)


def benchmark_config(**overrides) -> TrainConfig:
    """Reduced-width network and faster schedule sized for a single CPU core."""
    from .network import NetConfig

    base = dict(net=NetConfig(width_div=16, cardinality=2), lr_bce=1e-2, lr_focal=5e-3,
                bce_max_epochs=30, focal_max_epochs=60, patience=20, semi_epochs=4)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class BenchmarkRun:
    seed: int
    reports: Dict[str, Tuple[List[FoldReport], Aggregate]]
    seconds: float

    def mean_dsc(self, experiment: str) -> float:
        return self.reports[experiment][1].dsc_mean


def run_benchmark(seeds: Sequence[int] = (0, 1, 2), data_seed: int = 0,
                  method: Union[str, Sequence[str]] = "mean_teacher",
                  cfg: Optional[TrainConfig] = None, subjects: int = 10, images_per_subject: int = 30,
                  labeled_per_subject: int = 6, folds: int = 5) -> List[BenchmarkRun]:
    """Cross-validate supervised vs ``method`` on one synthetic cohort, once per seed."""
    from .data_io import generate_dataset

    cfg = cfg or benchmark_config()
    entries = generate_dataset(data_seed, subjects, images_per_subject, labeled_per_subject)
    runs = []
    for s in seeds:
        t0 = time.perf_counter()
        reports = run_cross_validation(entries, cfg, method, seed=s, folds=folds)
        runs.append(BenchmarkRun(s, reports, time.perf_counter() - t0))
    return runs
