"""Two-stage supervised training and the semi-supervised trainers.

Supervised training runs a cross-entropy stage until validation masks are
reasonable, then a focal-loss stage with early stopping. Semi-supervised
methods start from that converged model:

* ``mean_teacher``: student trained on focal + consistency to an EMA teacher.
* ``pi_model``: one network, consistency between two perturbed views.
* ``temporal_ensemble``: consistency to a per-image moving average of past
  predictions, refreshed after every epoch.
* ``pseudo_label``: labels for unlabeled images predicted once by the
  initial model, then ordinary supervised training on real + pseudo labels.

All randomness derives from ``seed`` through per-stream, per-step keys, so a
run is reproducible regardless of how batches are prepared.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augmentation as aug
from .losses import LossWeights, bce_loss, consistency_mse, focal_loss, ramp_weight, total_loss
from .metrics import dsc
from .network import NetConfig, SegModel, build_model, predict_proba
from .optim import make_optimizer, optimizer_step
from .postprocess import postprocess_mask
from .tensor import NonFiniteError, Tensor, backward_pass, batch_slice, channel_concat, no_grad, softmax_channels

log = logging.getLogger(__name__)

METHODS = ("supervised", "mean_teacher", "pi_model", "temporal_ensemble", "pseudo_label")
LOG_COLUMNS = ["iter", "phase", "loss_sup", "loss_cons", "loss_total", "val_dsc"]

# stream tags for seeding
_BCE, _FOCAL, _SEMI, _INIT = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    batch_size: int = 8
    optimizer: str = "adam"
    lr_bce: float = 1e-3
    lr_focal: float = 5e-4
    switch_dsc: float = 0.5
    bce_max_epochs: int = 30
    focal_max_epochs: int = 200
    patience: int = 20
    semi_epochs: int = 20
    labeled_per_batch: int = 4
    ema_alpha: float = 0.99
    lambda1: float = 1.0
    lambda2: float = 1.0
    rampup_fraction: float = 0.1
    gamma: float = 2.0
    alpha_focal: float = 0.25
    augment: bool = True
    threshold: float = 0.5
    open_radius: int = 1
    close_radius: int = 1
    input_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 < self.labeled_per_batch <= self.batch_size:
            raise ValueError("labeled_per_batch must lie in [1, batch_size]")
        if not 0 <= self.ema_alpha < 1:
            raise ValueError("ema_alpha must lie in [0, 1)")
        if self.lr_bce <= 0 or self.lr_focal <= 0:
            raise ValueError("learning rates must be positive")
        LossWeights(self.lambda1, self.lambda2, 1, 0, self.gamma, self.alpha_focal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        return cls(**d)


@dataclass
class TrainLog:
    rows: List[list] = field(default_factory=list)

    def add(self, it, phase, loss_sup, loss_cons, loss_total, val_dsc=None) -> None:
        self.rows.append([it, phase, loss_sup, loss_cons, loss_total, val_dsc])

    def set_last_val(self, value: float) -> None:
        if self.rows:
            self.rows[-1][5] = value

    def phases(self) -> List[str]:
        return [r[1] for r in self.rows]

    def write_csv(self, path) -> None:
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([fmt(v) for v in r])


@dataclass
class TrainResult:
    model: SegModel
    log: TrainLog
    history: dict = field(default_factory=dict)


@dataclass
class TrainState:
    """Student/teacher pair plus everything the semi-supervised loop mutates."""
    student: SegModel
    teacher: Optional[SegModel]
    method: str
    alpha: float
    k: int = 0
    optimizer: object = None
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.teacher is not None:
            ts, ss = self.teacher.state_arrays(), self.student.state_arrays()
            if any(ts[n].shape != ss[n].shape for n in ss):
                raise ValueError("teacher and student shapes differ")


@dataclass
class SemiResult:
    state: TrainState
    log: TrainLog
    history: dict = field(default_factory=dict)

    @property
    def student(self) -> SegModel:
        return self.state.student

    @property
    def teacher(self) -> Optional[SegModel]:
        return self.state.teacher


# ----------------------------------------------------------------------------
# data preparation
# ----------------------------------------------------------------------------

def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *key])


def to_input(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack 64x64 images in [0, 255] into a (B, 1, 64, 64) network input."""
    return (np.stack(images)[:, None] / 255.0).astype(dtype)


def prepare_eval(images: Sequence[np.ndarray], size: int = 64) -> List[np.ndarray]:
    return [aug.resize(im, size) if im.shape[0] != size else np.asarray(im, dtype=np.float32)
            for im in images]


def prepare_masks(masks: Sequence[np.ndarray], size: int = 64) -> List[np.ndarray]:
    return [aug.resize_mask(m, size) if m.shape[0] != size else np.asarray(m, dtype=np.uint8)
            for m in masks]


def _labeled_sample(image, mask, rng, augment: bool, size: int):
    if not augment:
        im, m = aug.apply_spatial(image, mask, aug.SpatialAug(size=size))
        return im, m
    im, m = aug.apply_spatial(image, mask, aug.sample_spatial(rng, size))
    return aug.apply_intensity(im, aug.sample_intensity(rng)), m


class _CyclicStream:
    """Endless index stream over successive seeded permutations."""

    def __init__(self, n: int, seed: int, tag: int):
        self.n, self.seed, self.tag = n, seed, tag
        self.cycle, self.buf = 0, []

    def take(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if not self.buf:
                self.buf = list(_rng(self.seed, self.tag, 0, self.cycle).permutation(self.n))
                self.cycle += 1
            out.append(int(self.buf.pop(0)))
        return out


def _check_finite_loss(value: float, phase: str, it: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became non-finite in phase {phase!r} at iteration {it}")


# ----------------------------------------------------------------------------
# evaluation helpers
# ----------------------------------------------------------------------------

def predict_masks(model: SegModel, images64: Sequence[np.ndarray], cfg: TrainConfig, chunk: int = 16):
    out = []
    for i in range(0, len(images64), chunk):
        probs = predict_proba(model, to_input(images64[i : i + chunk], model.config.dtype))
        out.extend(postprocess_mask(p, cfg.threshold, cfg.open_radius, cfg.close_radius) for p in probs)
    return out


def mean_dsc(model: SegModel, images64, masks64, cfg: TrainConfig) -> float:
    if len(images64) == 0:
        raise ValueError("empty validation set")
    preds = predict_masks(model, images64, cfg)
    return float(np.mean([dsc(p, m) for p, m in zip(preds, masks64)]))


# ----------------------------------------------------------------------------
# core supervised loop
# ----------------------------------------------------------------------------

def _supervised_epochs(model: SegModel, images, masks, cfg: TrainConfig, seed: int, tag: int,
                       lr: float, loss_kind: str, max_epochs: int, val, tlog: TrainLog,
                       stop_at: Optional[float] = None, patience: Optional[int] = None,
                       it0: int = 0) -> Tuple[int, dict]:
    """Run supervised epochs in place; returns (iterations done, info)."""
    m = len(images)
    stream = _CyclicStream(m, seed, tag)
    opt = make_optimizer(cfg.optimizer)
    steps = max(1, math.ceil(m / cfg.batch_size))
    best, best_state, since_best = -1.0, None, 0
    val_scores = []
    it, epochs_run = it0, 0
    for _ in range(max_epochs):
        epochs_run += 1
        for step in range(steps):
            idx = stream.take(cfg.batch_size)
            xs, ys = [], []
            for slot, i in enumerate(idx):
                im, mk = _labeled_sample(images[i], masks[i], _rng(seed, tag, 1, it, slot), cfg.augment,
                                         cfg.input_size)
                xs.append(im)
                ys.append(mk)
            model.zero_grad()
            logits = model.forward(to_input(xs, model.config.dtype), training=True)
            y = np.stack(ys)
            if loss_kind == "bce":
                loss = bce_loss(logits, y)
            else:
                loss = focal_loss(logits, y, cfg.gamma, cfg.alpha_focal)
            lv = loss.item()
            _check_finite_loss(lv, loss_kind, it)
            grads = backward_pass(loss, params=model.params)
            optimizer_step(opt, model.params, grads, lr)
            tlog.add(it, loss_kind, lv, 0.0, lv)
            it += 1
        if val is not None:
            score = mean_dsc(model, val[0], val[1], cfg)
            val_scores.append(score)
            tlog.set_last_val(score)
            if stop_at is not None and score >= stop_at:
                break
            if patience is not None:
                if score > best:
                    best, best_state, since_best = score, {k: v.copy() for k, v in model.state_arrays().items()}, 0
                else:
                    since_best += 1
                    if since_best >= patience:
                        break
    if patience is not None and best_state is not None:
        model.load_state_arrays(best_state)
    return it - it0, {"epochs": epochs_run, "val": val_scores, "best_val": best}


def train_supervised(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], cfg: TrainConfig,
                     seed: int = 0, val: Optional[Tuple[Sequence, Sequence]] = None,
                     init: Optional[SegModel] = None) -> TrainResult:
    """BCE stage until validation DSC reaches ``cfg.switch_dsc`` (or the epoch
    cap), then focal stage with early stopping on validation DSC.

    ``val`` is a pair of 64x64 image / mask lists; when omitted the training
    images themselves are used.
    """
    if len(images) == 0:
        raise ValueError("empty labeled set")
    if len(images) != len(masks):
        raise ValueError("images and masks differ in length")
    model = init.copy() if init is not None else build_model(seed, cfg.net)
    if val is None:
        val = (prepare_eval(images, cfg.input_size), prepare_masks(masks, cfg.input_size))
    tlog = TrainLog()
    n1, info1 = _supervised_epochs(model, images, masks, cfg, seed, _BCE, cfg.lr_bce, "bce",
                                   cfg.bce_max_epochs, val, tlog, stop_at=cfg.switch_dsc)
    n2, info2 = _supervised_epochs(model, images, masks, cfg, seed, _FOCAL, cfg.lr_focal, "focal",
                                   cfg.focal_max_epochs, val, tlog, patience=cfg.patience, it0=n1)
    log.info("supervised: bce %d epochs, focal %d epochs, best val %.4f",
             info1["epochs"], info2["epochs"], info2["best_val"])
    return TrainResult(model, tlog, {"bce": info1, "focal": info2})


def train_focal_stage(model: SegModel, images, masks, cfg: TrainConfig, seed: int, epochs: int,
                      val=None) -> TrainResult:
    """The second supervised stage alone (fixed epochs, no early stopping)."""
    model = model.copy()
    tlog = TrainLog()
    _, info = _supervised_epochs(model, images, masks, cfg, seed, _FOCAL, cfg.lr_focal, "focal",
                                 epochs, val, tlog)
    return TrainResult(model, tlog, info)


# ----------------------------------------------------------------------------
# semi-supervised
# ----------------------------------------------------------------------------

def ema_update(theta_t_prev, theta_s, alpha: float):
    """``alpha * teacher + (1 - alpha) * student``; arrays, floats or dicts of them."""
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if isinstance(theta_t_prev, dict):
        if set(theta_t_prev) != set(theta_s):
            raise ValueError("parameter names differ")
        return {k: ema_update(theta_t_prev[k], theta_s[k], alpha) for k in theta_t_prev}
    if np.shape(theta_t_prev) != np.shape(theta_s):
        raise ValueError(f"shape mismatch {np.shape(theta_t_prev)} vs {np.shape(theta_s)}")
    return alpha * theta_t_prev + (1.0 - alpha) * theta_s


def ema_update_model(teacher: SegModel, student: SegModel, alpha: float) -> None:
    """In-place EMA of parameters and batchnorm buffers."""
    for name, p in teacher.params.items():
        s = student.params[name].data
        if p.data.shape != s.shape:
            raise ValueError(f"{name}: shape mismatch")
        p.data *= p.data.dtype.type(alpha)
        p.data += p.data.dtype.type(1.0 - alpha) * s
    for name, b in teacher.buffers.items():
        b *= alpha
        b += (1.0 - alpha) * student.buffers[name]


def _frozen_copy(model: SegModel) -> SegModel:
    t = model.copy()
    for p in t.params.values():
        p.requires_grad = False
    return t


def _predict_all(model: SegModel, images64, dtype, chunk: int = 16) -> np.ndarray:
    return np.concatenate([predict_proba(model, to_input(images64[i : i + chunk], dtype))
                           for i in range(0, len(images64), chunk)])


def _two_channel(p_fg: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - p_fg, p_fg], axis=1)


def _hash_masks(masks: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for m in masks:
        h.update(np.ascontiguousarray(m).tobytes())
    return h.hexdigest()


def train_semi(labeled_images, labeled_masks, unlabeled_images, method: str, init: SegModel,
               cfg: TrainConfig, seed: int = 0, val=None, epochs: Optional[int] = None,
               on_step: Optional[Callable[[TrainState], None]] = None) -> SemiResult:
    """Semi-supervised training from a converged supervised model.

    ``on_step(state)`` is called after every iteration, once the student
    and (for the mean teacher) the teacher have been updated.
    """
    if method not in METHODS or method == "supervised":
        raise ValueError(f"unknown semi-supervised method {method!r}")
    if init.config != cfg.net:
        raise ValueError("init checkpoint does not match the configured network")
    if len(labeled_images) == 0:
        raise ValueError("empty labeled set")
    n_unl = len(unlabeled_images)
    if n_unl == 0 and method != "mean_teacher":
        raise ValueError(f"{method} needs unlabeled images")
    epochs = cfg.semi_epochs if epochs is None else epochs
    dtype = cfg.net.dtype

    student = init.copy()
    teacher = _frozen_copy(init) if method == "mean_teacher" else None
    state = TrainState(student, teacher, method, cfg.ema_alpha, optimizer=make_optimizer(cfg.optimizer))
    if val is None:
        val = (prepare_eval(labeled_images, cfg.input_size), prepare_masks(labeled_masks, cfg.input_size))

    size = cfg.input_size
    unl64 = prepare_eval(unlabeled_images, size) if n_unl else []
    history: dict = {"batch_composition": [], "teacher_grad_seen": False, "val": [],
                     "pseudo_digest": [], "ensemble_epochs": 0}

    if method == "pseudo_label":
        # frozen once from the converged model
        pseudo = [vm.mask for vm in predict_masks(init, unl64, cfg)]
        state.buffers["pseudo_masks"] = np.stack(pseudo)
        state.buffers["pseudo_masks"].setflags(write=False)
    if method == "temporal_ensemble":
        state.buffers["ensemble"] = (1.0 - cfg.ema_alpha) * _predict_all(init, unl64, dtype)
        history["ensemble_epochs"] = 1

    n_lab_b = cfg.labeled_per_batch if n_unl else cfg.batch_size
    n_unl_b = cfg.batch_size - n_lab_b if n_unl else 0
    steps = math.ceil(n_unl / n_unl_b) if n_unl else max(1, math.ceil(len(labeled_images) / cfg.batch_size))
    total_steps = steps * epochs
    lab_stream = _CyclicStream(len(labeled_images), seed, _FOCAL if n_unl == 0 else _SEMI)
    unl_stream = _CyclicStream(max(n_unl, 1), seed, _SEMI + 10)
    tag = _FOCAL if n_unl == 0 else _SEMI  # N = 0 replays the supervised focal stage exactly
    tlog = TrainLog()
    it = 0

    for epoch in range(epochs):
        for step in range(steps):
            li = lab_stream.take(n_lab_b)
            xs, ys = [], []
            for slot, i in enumerate(li):
                im, mk = _labeled_sample(labeled_images[i], labeled_masks[i], _rng(seed, tag, 1, it, slot),
                                         cfg.augment, size)
                xs.append(im)
                ys.append(mk)
            target = None
            ui = unl_stream.take(n_unl_b) if n_unl_b else []
            if ui:
                xs_u, tgt = [], []
                for slot, i in enumerate(ui):
                    r = _rng(seed, tag, 2, it, slot)
                    img = unlabeled_images[i]
                    spatial = aug.sample_spatial(r, size) if cfg.augment else aug.SpatialAug(size=size)
                    view, _ = aug.apply_spatial(img, None, spatial)
                    if method == "pseudo_label":
                        # warp image and frozen pseudo mask together on the 64x64 grid
                        s64 = replace(spatial, size=size)
                        view, pm_w = aug.apply_spatial(unl64[i], state.buffers["pseudo_masks"][i], s64)
                        xs_u.append(aug.apply_intensity(view, aug.sample_intensity(r)) if cfg.augment else view)
                        tgt.append(pm_w)
                    elif method == "mean_teacher":
                        xs_u.append(aug.apply_intensity(view, aug.sample_intensity(r)))
                        tgt.append(view)  # teacher input: spatial only
                    elif method == "pi_model":
                        xs_u.append(aug.apply_intensity(view, aug.sample_intensity(r)))
                        tgt.append(aug.apply_intensity(view, aug.sample_intensity(r)))
                    else:  # temporal_ensemble
                        xs_u.append(aug.apply_intensity(view, aug.sample_intensity(r)))
                        zi = state.buffers["ensemble"][i] / (1.0 - cfg.ema_alpha ** history["ensemble_epochs"])
                        # map the ensemble (stored at 64x64) through the same spatial transform
                        tgt.append(np.clip(aug.warp(zi, replace(spatial, size=size), order=1), 0.0, 1.0))
                xs = xs + xs_u
                target = tgt
            history["batch_composition"].append((len(li), len(ui)))

            student.zero_grad()
            logits = student.forward(to_input(xs, dtype), training=True)
            nl = len(li)
            sup_logits = batch_slice(logits, 0, nl) if ui else logits
            loss_sup = focal_loss(sup_logits, np.stack(ys), cfg.gamma, cfg.alpha_focal)
            lam2 = ramp_weight(it, total_steps, cfg.lambda2, cfg.rampup_fraction)
            loss_cons = None
            if ui:
                un_logits = batch_slice(logits, nl, nl + len(ui))
                if method == "pseudo_label":
                    loss_cons = focal_loss(un_logits, np.stack(target), cfg.gamma, cfg.alpha_focal)
                else:
                    if method == "mean_teacher":
                        with no_grad():
                            probs_t = softmax_channels(teacher.forward(to_input(target, dtype), training=False)).data
                    elif method == "pi_model":
                        with no_grad():
                            probs_t = softmax_channels(student.forward(to_input(target, dtype), training=False)).data
                    else:
                        probs_t = _two_channel(np.stack(target)).astype(dtype)
                    loss_cons = consistency_mse(softmax_channels(un_logits), probs_t)
            weights = LossWeights(cfg.lambda1, lam2, nl, len(ui), cfg.gamma, cfg.alpha_focal)
            loss = total_loss(loss_sup, loss_cons if loss_cons is not None else 0.0, weights)
            lv = loss.item()
            _check_finite_loss(lv, method, it)
            grads = backward_pass(loss, params=student.params)
            optimizer_step(state.optimizer, student.params, grads, cfg.lr_focal)
            if teacher is not None:
                if any(p.grad is not None for p in teacher.params.values()):
                    history["teacher_grad_seen"] = True
                ema_update_model(teacher, student, state.alpha)
            tlog.add(it, method, loss_sup.item(), loss_cons.item() if loss_cons is not None else 0.0, lv)
            it += 1
            state.k = it
            if on_step is not None:
                on_step(state)

        if method == "temporal_ensemble":
            z = _predict_all(student, unl64, dtype)
            a = cfg.ema_alpha
            state.buffers["ensemble"] = a * state.buffers["ensemble"] + (1.0 - a) * z
            history["ensemble_epochs"] += 1
        if method == "pseudo_label":
            history["pseudo_digest"].append(_hash_masks(state.buffers["pseudo_masks"]))
        if val is not None and len(val[0]):
            score = mean_dsc(student, val[0], val[1], cfg)
            history["val"].append(score)
            tlog.set_last_val(score)

    return SemiResult(state, tlog, history)


def select_inference_model(teacher: SegModel, student: SegModel, val_images, val_masks,
                           cfg: TrainConfig) -> Tuple[SegModel, str, Dict[str, float]]:
    """Pick whichever of teacher and student scores higher mean validation DSC.

    Ties go to the student.
    """
    if len(val_images) == 0:
        raise ValueError("empty validation set")
    scores = {
        "teacher": mean_dsc(teacher, val_images, val_masks, cfg),
        "student": mean_dsc(student, val_images, val_masks, cfg),
    }
    if scores["teacher"] > scores["student"]:
        return teacher, "teacher", scores
    return student, "student", scores
