"""Dice, centroid error, failure rate and a subject-grouped k-fold harness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .postprocess import FAILURE_CENTROID, VeinMask, centroid

RESULTS_COLUMNS = ["experiment", "fold", "image_id", "dsc", "centroid_error", "failed"]
SUMMARY_COLUMNS = ["experiment", "fold", "dsc_mean", "dsc_std", "cent_mean", "cent_std", "failure_rate"]
AGGREGATE_FOLD = "all"


def _binary(m) -> np.ndarray:
    arr = m.mask if isinstance(m, VeinMask) else np.asarray(m)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("masks must be binary")
    return arr.astype(bool)


def dsc(pred_mask, gt_mask, empty_value: Optional[float] = 1.0) -> float:
    """Dice coefficient ``2|A & B| / (|A| + |B|)``.

    When both masks are empty the result is ``empty_value``; pass ``None`` to
    make that case an error instead.
    """
    a, b = _binary(pred_mask), _binary(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        if empty_value is None:
            raise ValueError("dice is undefined for two empty masks")
        return float(empty_value)
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def centroid_error(pred, gt_mask) -> float:
    """Euclidean pixel distance between predicted and true centroids.

    An empty prediction is scored as if its centroid were the top-left
    corner, ``(0, 0)``.
    """
    g = _binary(gt_mask)
    if not g.any():
        raise ValueError("ground-truth mask is empty")
    p = _binary(pred)
    pc = centroid(p) if p.any() else FAILURE_CENTROID
    gc = centroid(g)
    return math.hypot(pc[0] - gc[0], pc[1] - gc[1])


def failure_rate(results: Sequence) -> float:
    """Percentage of failed predictions.

    Items may be booleans (True = failed) or :class:`VeinMask` objects.
    """
    if len(results) == 0:
        raise ValueError("no results")
    failed = sum(1 for r in results if (r.failed if isinstance(r, VeinMask) else bool(r)))
    return 100.0 * failed / len(results)


@dataclass
class ImageResult:
    image_id: str
    dsc: float
    centroid_error: float
    failed: bool


def score_image(image_id: str, pred: VeinMask, gt_mask) -> ImageResult:
    return ImageResult(image_id, dsc(pred, gt_mask), centroid_error(pred, gt_mask), bool(pred.failed))


@dataclass
class FoldReport:
    fold: int
    image_ids: List[str] = field(default_factory=list)
    dscs: List[float] = field(default_factory=list)
    centroid_errors: List[float] = field(default_factory=list)
    failures: List[bool] = field(default_factory=list)

    @classmethod
    def from_results(cls, fold: int, results: Iterable[ImageResult]) -> "FoldReport":
        rep = cls(fold)
        for r in results:
            rep.image_ids.append(r.image_id)
            rep.dscs.append(float(r.dsc))
            rep.centroid_errors.append(float(r.centroid_error))
            rep.failures.append(bool(r.failed))
        return rep

    @property
    def n(self) -> int:
        return len(self.dscs)

    @property
    def failure_count(self) -> int:
        return int(sum(self.failures))

    @property
    def dsc_mean(self) -> float:
        return float(np.mean(self.dscs))

    @property
    def dsc_std(self) -> float:
        return float(np.std(self.dscs))

    @property
    def cent_mean(self) -> float:
        return float(np.mean(self.centroid_errors))

    @property
    def cent_std(self) -> float:
        return float(np.std(self.centroid_errors))

    @property
    def failure_rate(self) -> float:
        return failure_rate(self.failures)


@dataclass
class Aggregate:
    """Across-fold summary: means are averages of fold means, std is over
    the pooled per-image values."""
    dsc_mean: float
    dsc_std: float
    cent_mean: float
    cent_std: float
    failure_rate: float


def aggregate(reports: Sequence[FoldReport]) -> Aggregate:
    if not reports:
        raise ValueError("no fold reports")
    pooled_dsc = [v for r in reports for v in r.dscs]
    pooled_cent = [v for r in reports for v in r.centroid_errors]
    return Aggregate(
        dsc_mean=float(np.mean([r.dsc_mean for r in reports])),
        dsc_std=float(np.std(pooled_dsc)),
        cent_mean=float(np.mean([r.cent_mean for r in reports])),
        cent_std=float(np.std(pooled_cent)),
        failure_rate=float(np.mean([r.failure_rate for r in reports])),
    )


def subject_folds(subjects: Iterable, folds: int = 5, seed: int = 0) -> List[List]:
    """Partition distinct subject ids into ``folds`` disjoint, near-equal groups."""
    uniq = sorted(set(subjects))
    if folds < 2:
        raise ValueError("need at least two folds")
    if len(uniq) < folds:
        raise ValueError(f"{len(uniq)} subjects cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    return [sorted(uniq[i] for i in part) for part in np.array_split(order, folds)]


FoldRunner = Callable[[List, List, int], Mapping[str, List[ImageResult]]]


def cross_validate(entries: Sequence, run_fold: FoldRunner, folds: int = 5, seed: int = 0,
                   subject_of: Callable = lambda e: e.subject) -> Dict[str, Tuple[List[FoldReport], Aggregate]]:
    """Subject-grouped k-fold evaluation.

    ``run_fold(train_entries, test_entries, fold_index)`` trains whatever it
    needs and returns per-image results keyed by experiment name. Returns, per
    experiment, the fold reports (ordered by fold index) and their aggregate.
    """
    groups = subject_folds([subject_of(e) for e in entries], folds, seed)
    per_exp: Dict[str, List[FoldReport]] = {}
    for k, test_subjects in enumerate(groups):
        test_set = set(test_subjects)
        train = [e for e in entries if subject_of(e) not in test_set]
        test = [e for e in entries if subject_of(e) in test_set]
        for name, results in run_fold(train, test, k).items():
            per_exp.setdefault(name, []).append(FoldReport.from_results(k, results))
    return {name: (reps, aggregate(reps)) for name, reps in per_exp.items()}


def _fmt(v: float) -> str:
    return repr(float(v))


def write_results_csv(path, reports: Mapping[str, Tuple[List[FoldReport], Aggregate]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_COLUMNS)
        for exp, (reps, _) in reports.items():
            for rep in reps:
                for iid, d, c, f in zip(rep.image_ids, rep.dscs, rep.centroid_errors, rep.failures):
                    w.writerow([exp, rep.fold, iid, _fmt(d), _fmt(c), int(f)])


def write_summary_csv(path, reports: Mapping[str, Tuple[List[FoldReport], Aggregate]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for exp, (reps, agg) in reports.items():
            for rep in reps:
                w.writerow([exp, rep.fold, _fmt(rep.dsc_mean), _fmt(rep.dsc_std), _fmt(rep.cent_mean),
                            _fmt(rep.cent_std), _fmt(rep.failure_rate)])
            w.writerow([exp, AGGREGATE_FOLD, _fmt(agg.dsc_mean), _fmt(agg.dsc_std), _fmt(agg.cent_mean),
                        _fmt(agg.cent_std), _fmt(agg.failure_rate)])


def read_results_csv(path) -> Dict[str, List[FoldReport]]:
    """Rebuild fold reports from a results.csv written by :func:`write_results_csv`."""
    out: Dict[str, Dict[int, FoldReport]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            fold = int(row["fold"])
            rep = out.setdefault(row["experiment"], {}).setdefault(fold, FoldReport(fold))
            rep.image_ids.append(row["image_id"])
            rep.dscs.append(float(row["dsc"]))
            rep.centroid_errors.append(float(row["centroid_error"]))
            rep.failures.append(row["failed"] == "1")
    return {exp: [folds[k] for k in sorted(folds)] for exp, folds in out.items()}
