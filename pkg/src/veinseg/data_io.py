"""Dataset files, checkpoints and the synthetic vein phantom generator.

Dataset layout::

    root/
      dataset.json                      optional: split tag per image
      subject_00/
        img_00.pgm                      8-bit grayscale, binary PGM (P5)
        img_00_mask.pgm                 training label, values {0, 255}
        img_01.pgm
        img_01_gt.pgm                   evaluation-only ground truth
        ...

An image with a ``_mask`` file is labeled. Images without one are unlabeled;
for synthetic data their ground truth is kept in a ``_gt`` file that the
trainers never read.

Checkpoint layout (little endian)::

    b"VSEG"  u16 version  32-byte sha256 of the network config JSON
    u32 n + n bytes of metadata JSON (contains the config itself)
    u32 record count, then per record:
        u16 n + n bytes name, u8 dtype (0 = f32, 1 = f64), u8 ndim,
        ndim x u32 dims, raw values
    u32 CRC32 of everything before it
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .network import NetConfig, SegModel, build_model

CHECKPOINT_MAGIC = b"VSEG"
CHECKPOINT_VERSION = 1
NATIVE_SIZE = 70
IMAGES_PER_SUBJECT = 30

# Vein radius statistics at network resolution (64x64), in pixels.
VEIN_RADIUS_MEAN = 14.22
VEIN_RADIUS_STD = 4.38
VEIN_RADIUS_CLIP = (4.0, 25.0)


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# PGM
# ----------------------------------------------------------------------------

def _atomic_write(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("PGM values must lie in [0, 255]")
        img = np.rint(img).astype(np.uint8)
    h, w = img.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\s+)|(\S+)")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise DatasetError(f"{path}: truncated PGM header")
        pos = m.end()
        if m.group(3):
            tokens.append(m.group(3))
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pixels = data[pos + 1 :] if data[pos : pos + 1].isspace() else data[pos:]
    if len(pixels) < w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w).copy()


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

SPLITS = ("labeled", "unlabeled", "validation", "test")


@dataclass
class DatasetEntry:
    subject: str
    image_id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    split: str = "labeled"
    gt_mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}")
        if self.split == "labeled" and self.mask is None:
            raise DatasetError(f"labeled entry {self.image_id} has no mask")
        if self.split == "unlabeled" and self.mask is not None:
            raise DatasetError(f"unlabeled entry {self.image_id} carries a mask")

    @property
    def native_size(self) -> Tuple[int, int]:
        return tuple(self.image.shape)

    @property
    def eval_mask(self) -> Optional[np.ndarray]:
        return self.mask if self.mask is not None else self.gt_mask


def _mask_from_pgm(path) -> np.ndarray:
    m = read_pgm(path)
    if not np.isin(m, (0, 255)).all():
        raise DatasetError(f"{path}: mask values must be 0 or 255")
    return (m == 255).astype(np.uint8)


def load_dataset(root) -> List[DatasetEntry]:
    """Read every ``subject_*/img_*.pgm`` under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    manifest = {}
    if (root / "dataset.json").exists():
        manifest = json.loads((root / "dataset.json").read_text()).get("splits", {})
    entries = []
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("subject_")):
        for img_path in sorted(subj_dir.glob("img_*.pgm")):
            stem = img_path.stem
            if stem.endswith("_mask") or stem.endswith("_gt"):
                continue
            image_id = f"{subj_dir.name}/{stem}"
            mask_path = subj_dir / f"{stem}_mask.pgm"
            gt_path = subj_dir / f"{stem}_gt.pgm"
            split = manifest.get(image_id, "labeled" if mask_path.exists() else "unlabeled")
            mask = None
            if split in ("labeled", "validation", "test"):
                if not mask_path.exists():
                    raise DatasetError(f"missing mask file {mask_path}")
                mask = _mask_from_pgm(mask_path)
            gt = _mask_from_pgm(gt_path) if gt_path.exists() else None
            image = read_pgm(img_path)
            if mask is not None and mask.shape != image.shape:
                raise DatasetError(f"{mask_path}: shape {mask.shape} != image {image.shape}")
            entries.append(DatasetEntry(subj_dir.name, image_id, image, mask, split, gt))
    if not entries:
        raise DatasetError(f"no images found under {root}")
    return entries


def write_dataset(root, entries: Sequence[DatasetEntry]) -> List[Path]:
    root = Path(root)
    written = []
    for e in entries:
        subject, stem = e.image_id.split("/")
        base = root / subject
        p = base / f"{stem}.pgm"
        write_pgm(p, e.image)
        written.append(p)
        if e.mask is not None:
            p = base / f"{stem}_mask.pgm"
            write_pgm(p, np.asarray(e.mask, dtype=np.uint8) * 255)
            written.append(p)
        if e.gt_mask is not None and e.mask is None:
            p = base / f"{stem}_gt.pgm"
            write_pgm(p, np.asarray(e.gt_mask, dtype=np.uint8) * 255)
            written.append(p)
    manifest = {"splits": {e.image_id: e.split for e in entries}}
    p = root / "dataset.json"
    _atomic_write(p, json.dumps(manifest, indent=1, sort_keys=True).encode())
    written.append(p)
    return written


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    config: NetConfig
    models: Dict[str, SegModel]
    meta: dict

    @property
    def model(self) -> SegModel:
        if "model" in self.models:
            return self.models["model"]
        return next(iter(self.models.values()))


def save_checkpoint(path, models: Union[SegModel, Dict[str, SegModel]], meta: Optional[dict] = None) -> Path:
    """Write one model (or several sharing a config, e.g. student/teacher)."""
    if isinstance(models, SegModel):
        models = {"model": models}
    configs = {m.config for m in models.values()}
    if len(configs) != 1:
        raise CheckpointError("all models in a checkpoint must share one config")
    config = configs.pop()
    meta = dict(meta or {})
    meta["config"] = config.to_dict()
    meta["models"] = list(models)
    meta_blob = json.dumps(meta, sort_keys=True).encode()

    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), config.digest(),
             struct.pack("<I", len(meta_blob)), meta_blob]
    records = [(f"{key}/{name}", arr) for key, m in models.items() for name, arr in m.state_arrays().items()]
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    path = Path(path)
    _atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: Optional[NetConfig] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 4 + 2 + 32 + 4 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    r.data = body
    digest = r.take(32)
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    config = NetConfig.from_dict(meta["config"])
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config digest does not match stored config")
    if expected_config is not None and expected_config.digest() != digest:
        raise CheckpointError(f"{path}: checkpoint was written for a different network config")
    (count,) = r.unpack("<I")
    arrays: Dict[str, Dict[str, np.ndarray]] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _CODE_DTYPES[code].newbyteorder("<")
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(dims).astype(_CODE_DTYPES[code])
        key, _, pname = name.partition("/")
        arrays.setdefault(key, {})[pname] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after records")
    models = {}
    for key in meta.get("models", list(arrays)):
        m = build_model(0, config)
        m.load_state_arrays(arrays.get(key, {}))
        models[key] = m
    return Checkpoint(config, models, meta)


# ----------------------------------------------------------------------------
# synthetic phantoms
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomParams:
    """Geometry and texture of one phantom; lengths in native (70 px) pixels."""
    center: Tuple[float, float] = (35.0, 35.0)
    radii: Tuple[float, float] = (12.0, 10.0)
    angle: float = 0.0
    vein_level: float = 0.2
    speckle_scale: float = 0.8
    deformation: float = 0.0
    attenuation: float = 0.01
    size: int = NATIVE_SIZE
    distractors: int = 0

    def axes(self) -> Tuple[float, float]:
        """Semi-axes after the probe squashes the vein vertically."""
        a, b = self.radii
        d = self.deformation
        return a * (1.0 + 0.5 * d), b * (1.0 - d)

    def validate(self) -> None:
        a, b = self.axes()
        if min(self.radii) <= 0 or a <= 0 or b <= 0:
            raise ValueError("vein radii must be positive")
        if not 0 <= self.deformation < 1:
            raise ValueError("deformation must lie in [0, 1)")
        cx, cy = self.center
        ex, ey = _ellipse_extent(a, b, self.angle)
        if cx - ex < 0 or cy - ey < 0 or cx + ex > self.size - 1 or cy + ey > self.size - 1:
            raise ValueError(f"vein ellipse at {self.center} with axes {(a, b)} leaves the image")


def _ellipse_extent(a: float, b: float, angle_deg: float) -> Tuple[float, float]:
    t = np.deg2rad(angle_deg)
    ex = np.sqrt((a * np.cos(t)) ** 2 + (b * np.sin(t)) ** 2)
    ey = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
    return float(ex), float(ey)


def ellipse_mask(params: PhantomParams) -> np.ndarray:
    """Pixels whose centres lie inside the (deformed, rotated) vein ellipse."""
    a, b = params.axes()
    yy, xx = np.mgrid[0 : params.size, 0 : params.size].astype(np.float64)
    dx, dy = xx - params.center[0], yy - params.center[1]
    t = np.deg2rad(params.angle)
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
    return n / (n.std() + 1e-12)


def generate_phantom(seed: int, params: PhantomParams, subject_id: int = 0,
                     anatomy_seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """Render one 8-bit ultrasound-like image and its exact vein mask.

    Tissue reflectivity is a smooth random field with a bright skin layer;
    the vein interior reflects weakly. Multiplicative exponential speckle and
    exponential depth attenuation are applied on top. ``anatomy_seed`` fixes
    the tissue field so that images of one subject share a background.
    """
    params.validate()
    n = params.size
    rng = np.random.default_rng(seed)
    arng = np.random.default_rng(seed if anatomy_seed is None else anatomy_seed)

    rows = np.arange(n, dtype=np.float64)[:, None]
    tissue = 0.55 + 0.12 * _smooth_noise(arng, n, 6.0) + 0.05 * _smooth_noise(rng, n, 3.0)
    tissue += 0.35 * np.exp(-0.5 * (rows / 2.5) ** 2)  # skin interface
    for _ in range(2):  # fascia layers
        depth = arng.uniform(8, n - 8)
        tissue += 0.15 * np.exp(-0.5 * ((rows - depth) / 1.2) ** 2)

    mask = ellipse_mask(params)
    dark = np.zeros((n, n))
    for _ in range(params.distractors):
        # small hypoechoic structures away from the vein
        r = rng.uniform(2.0, 4.0)
        for _attempt in range(20):
            cx, cy = rng.uniform(r, n - 1 - r, size=2)
            blob = (np.hypot(np.arange(n)[None, :] - cx, rows - cy) <= r)
            if not (ndimage.binary_dilation(mask, iterations=3) & blob).any():
                dark = np.maximum(dark, blob * rng.uniform(0.4, 0.7))
                break
    vein = ndimage.gaussian_filter(mask.astype(np.float64), 0.8)
    refl = tissue * (1.0 - dark) * (1.0 - (1.0 - params.vein_level) * vein)
    # posterior enhancement below the vein
    below = ndimage.gaussian_filter(np.cumsum(mask, axis=0).clip(0, 1) - mask, 2.0)
    refl += 0.12 * below

    speckle = rng.exponential(1.0, (n, n))
    if params.speckle_scale > 0:
        speckle = ndimage.gaussian_filter(speckle, params.speckle_scale)
        speckle /= speckle.mean()
    atten = np.exp(-params.attenuation * rows)
    gain = rng.uniform(150.0, 200.0)
    image = np.clip(gain * refl * np.clip(speckle, 0, 3) * atten, 0, 255)
    return np.rint(image).astype(np.uint8), mask, subject_id


def sample_vein_radius(rng: np.random.Generator) -> float:
    """Vein radius at 64x64 resolution, pixels."""
    return float(np.clip(rng.normal(VEIN_RADIUS_MEAN, VEIN_RADIUS_STD), *VEIN_RADIUS_CLIP))


def subject_anatomy(seed: int, subject_id: int) -> dict:
    rng = np.random.default_rng([seed, subject_id, 1])
    r = sample_vein_radius(rng) * NATIVE_SIZE / 64.0
    return {
        "radius": r,
        "ecc": rng.uniform(0.0, 0.25),
        "cx": rng.uniform(0.3, 0.7),
        "cy": rng.uniform(0.35, 0.7),
        "vein_level": rng.uniform(0.15, 0.35),
        "attenuation": rng.uniform(0.005, 0.02),
        "anatomy_seed": int(rng.integers(2**31)),
    }


def phantom_params_for(seed: int, subject_id: int, image_index: int) -> Tuple[PhantomParams, int]:
    """Per-image params: subject anatomy plus pressure and placement jitter."""
    base = subject_anatomy(seed, subject_id)
    rng = np.random.default_rng([seed, subject_id, 2, image_index])
    r = base["radius"] * rng.uniform(0.9, 1.1)
    ecc = base["ecc"]
    radii = (r * (1 + ecc), r * (1 - ecc))
    deformation = rng.uniform(0.0, 0.35)
    angle = rng.uniform(-20, 20)
    n = NATIVE_SIZE
    probe = PhantomParams(radii=radii, deformation=deformation, angle=angle)
    ex, ey = _ellipse_extent(*probe.axes(), angle)
    fit = min(1.0, (n - 8) / 2.0 / max(ex, ey))  # the largest veins shrink to fit the frame
    if fit < 1.0:
        radii = (radii[0] * fit, radii[1] * fit)
        ex, ey = ex * fit, ey * fit
    lo_x, hi_x = ex + 1, n - 2 - ex
    lo_y, hi_y = max(ey + 1, 6.0), n - 2 - ey
    if lo_y > hi_y:
        lo_y = hi_y = (n - 1) / 2.0
    cx = np.clip(lo_x + base["cx"] * (hi_x - lo_x) + rng.uniform(-3, 3), lo_x, hi_x)
    cy = np.clip(lo_y + base["cy"] * (hi_y - lo_y) + rng.uniform(-3, 3), lo_y, hi_y)
    params = PhantomParams(
        center=(float(cx), float(cy)), radii=radii, angle=angle,
        vein_level=base["vein_level"] * rng.uniform(0.8, 1.2),
        speckle_scale=0.8, deformation=deformation,
        attenuation=base["attenuation"], distractors=int(rng.integers(0, 3)),
    )
    return params, base["anatomy_seed"]


def generate_dataset(seed: int, subjects: int = 10, images_per_subject: int = IMAGES_PER_SUBJECT,
                     labeled_per_subject: Optional[int] = None) -> List[DatasetEntry]:
    """Synthetic cohort. ``labeled_per_subject`` images of each subject keep a
    training label; the rest are unlabeled with hidden ground truth."""
    if labeled_per_subject is None:
        labeled_per_subject = images_per_subject
    entries = []
    for s in range(subjects):
        for i in range(images_per_subject):
            params, anat = phantom_params_for(seed, s, i)
            img_seed = int(np.random.default_rng([seed, s, 3, i]).integers(2**31))
            image, mask, _ = generate_phantom(img_seed, params, s, anatomy_seed=anat)
            subject = f"subject_{s:02d}"
            iid = f"{subject}/img_{i:02d}"
            if i < labeled_per_subject:
                entries.append(DatasetEntry(subject, iid, image, mask, "labeled"))
            else:
                entries.append(DatasetEntry(subject, iid, image, None, "unlabeled", gt_mask=mask))
    return entries
