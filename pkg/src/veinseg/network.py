"""ResNeXt-Unet: a ResNeXt encoder with a Unet-style decoder for 64x64 inputs.

Stage layout (output spatial size in brackets)::

    conv1    3x3, 64, stride 2                              [32x32]
    conv2    3x3 maxpool stride 2, 3 x ResNeXt(128, C, 256)  [16x16]
    conv3    3 x ResNeXt(256, C, 512), first block stride 2  [8x8]
    deconv4  3x3, 256, stride 2 (transposed)                 [16x16]
    conv5    concat(deconv4, conv2) -> 3x3, 256              [16x16]
    conv6    3x3, 256                                        [16x16]
    deconv7  3x3, 128, stride 2 (transposed)                 [32x32]
    conv8    concat(deconv7, conv1) -> 3x3, 128              [32x32]
    conv9    3x3, 128                                        [32x32]
    deconv10 3x3, 64, stride 2 (transposed)                  [64x64]
    conv11   concat(deconv10, input) -> 3x3, 64              [64x64]
    conv12   3x3, 64                                         [64x64]
    conv13   3x3, 2 (logits)                                 [64x64]

``NetConfig.width_div`` divides every channel count so the same topology can
be trained quickly on a single CPU; cardinality is set independently.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .tensor import LayerSpec, Tensor, ShapeError, add, layer_forward, no_grad, softmax_channels

STAGE_NAMES = tuple(
    ["conv1", "conv2", "conv3", "deconv4", "conv5", "conv6", "deconv7", "conv8", "conv9",
     "deconv10", "conv11", "conv12", "conv13"]
)

# Spatial output extent of every stage for a 64x64 input.
TABLE_OUTPUT_SIZES = {
    "conv1": 32, "conv2": 16, "conv3": 8, "deconv4": 16, "conv5": 16, "conv6": 16,
    "deconv7": 32, "conv8": 32, "conv9": 32, "deconv10": 64, "conv11": 64, "conv12": 64,
    "conv13": 64,
}


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 2
    input_size: int = 64
    width_div: int = 1
    cardinality: int = 32
    blocks: Tuple[int, int] = (3, 3)
    batchnorm: bool = True
    dtype: str = "float32"

    def ch(self, n: int) -> int:
        return max(1, n // self.width_div)

    def validate(self) -> None:
        if self.width_div < 1 or 64 % self.width_div:
            raise ValueError(f"width_div={self.width_div} must divide 64")
        if self.cardinality < 1:
            raise ValueError("cardinality must be positive")
        for width in (self.ch(128), self.ch(256)):
            if width % self.cardinality:
                raise ValueError(
                    f"cardinality {self.cardinality} does not divide bottleneck width {width}"
                )
        if self.input_size != 64:
            raise ValueError("only 64x64 inputs are supported")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["blocks"] = tuple(d.get("blocks", (3, 3)))
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class _Conv:
    """A conv (or transposed conv) optionally followed by batchnorm."""
    name: str
    spec: LayerSpec
    bn: bool = False


@dataclass
class ResNeXtBlock:
    name: str
    reduce: _Conv
    grouped: _Conv
    expand: _Conv
    shortcut: Optional[_Conv]
    stride: int

    @property
    def cardinality(self) -> int:
        return self.grouped.spec.groups


@dataclass
class SegModel:
    config: NetConfig
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    stages: Dict[str, list] = field(default_factory=dict)
    skips: Dict[str, str] = field(default_factory=dict)

    # -- bookkeeping -------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def stage_parameter_count(self, stage: str) -> int:
        prefix = stage + "."
        return int(sum(p.data.size for n, p in self.params.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameters and batchnorm buffers by name, in a stable order."""
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ShapeError(f"state mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise ShapeError(f"{name}: shape {arr.shape} != {expected[name].shape}")
            if name in self.params:
                self.params[name].data = np.array(arr, dtype=self.params[name].dtype, copy=True)
            else:
                self.buffers[name] = np.array(arr, dtype=np.float32, copy=True)

    def copy(self) -> "SegModel":
        clone = build_model(0, self.config)
        clone.load_state_arrays(self.state_arrays())
        return clone

    # -- forward -----------------------------------------------------------
    def _conv(self, unit: _Conv, x: Tensor, training: bool) -> Tensor:
        p = {"weight": self.params[unit.name + ".weight"]}
        if unit.name + ".bias" in self.params:
            p["bias"] = self.params[unit.name + ".bias"]
        y = layer_forward(unit.spec, x, p)
        if unit.bn:
            bn_spec = LayerSpec("batchnorm2d", in_channels=unit.spec.out_channels,
                                out_channels=unit.spec.out_channels)
            y = layer_forward(
                bn_spec, y,
                {"gamma": self.params[unit.name + ".bn.gamma"], "beta": self.params[unit.name + ".bn.beta"]},
                running_mean=self.buffers[unit.name + ".bn.running_mean"],
                running_var=self.buffers[unit.name + ".bn.running_var"],
                training=training,
            )
        return y

    def _block(self, blk: ResNeXtBlock, x: Tensor, training: bool) -> Tensor:
        relu = LayerSpec("relu")
        h = layer_forward(relu, self._conv(blk.reduce, x, training))
        h = layer_forward(relu, self._conv(blk.grouped, h, training))
        h = self._conv(blk.expand, h, training)
        sc = x if blk.shortcut is None else self._conv(blk.shortcut, x, training)
        return layer_forward(relu, add(h, sc))

    def forward(self, x, training: bool = False, return_stages: bool = False):
        """Logits of shape (B, num_classes, 64, 64).

        ``training`` selects batch statistics (and updates running buffers) in
        batchnorm layers.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=cfg.dtype))
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected input of shape (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {x.shape}"
            )
        relu = LayerSpec("relu")
        concat = LayerSpec("channel_concat")
        outs: Dict[str, Tensor] = {"input": x}
        h = x
        for stage in STAGE_NAMES:
            units = self.stages[stage]
            if stage in self.skips:
                h = layer_forward(concat, [h, outs[self.skips[stage]]])
            for unit in units:
                if isinstance(unit, ResNeXtBlock):
                    h = self._block(unit, h, training)
                elif isinstance(unit, LayerSpec):  # maxpool
                    h = layer_forward(unit, h)
                else:
                    h = self._conv(unit, h, training)
                    if stage != "conv13":
                        h = layer_forward(relu, h)
            outs[stage] = h
        if return_stages:
            return h, {k: v for k, v in outs.items() if k != "input"}
        return h


def build_model(seed: int, config: Optional[NetConfig] = None) -> SegModel:
    """Build the network with fan-in scaled normal weights and zero biases."""
    cfg = config or NetConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    model = SegModel(config=cfg)
    bn = cfg.batchnorm

    def conv(name, cin, cout, k, stride=1, padding=None, groups=1, with_bn=False, transpose=False):
        padding = (k // 2) if padding is None else padding
        if transpose:
            spec = LayerSpec("conv_transpose2d", (k, k), stride, padding, cin, cout, 1, output_padding=1)
            fan_in = cin * k * k / (stride * stride)
        else:
            spec = LayerSpec("conv2d", (k, k), stride, padding, cin, cout, groups)
            fan_in = cin // groups * k * k
        shapes = spec.param_shapes()
        std = np.sqrt(2.0 / fan_in)
        model.params[name + ".weight"] = Tensor(
            (rng.standard_normal(shapes["weight"]) * std).astype(dtype), requires_grad=True
        )
        if with_bn:
            model.params[name + ".bn.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            model.params[name + ".bn.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            model.buffers[name + ".bn.running_mean"] = np.zeros(cout, dtype=np.float32)
            model.buffers[name + ".bn.running_var"] = np.ones(cout, dtype=np.float32)
        else:
            model.params[name + ".bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        return _Conv(name, spec, with_bn)

    def block(name, cin, width, cout, stride):
        return ResNeXtBlock(
            name=name,
            reduce=conv(name + ".reduce", cin, width, 1, with_bn=bn),
            grouped=conv(name + ".grouped", width, width, 3, stride=stride, groups=cfg.cardinality, with_bn=bn),
            expand=conv(name + ".expand", width, cout, 1, with_bn=bn),
            shortcut=(conv(name + ".shortcut", cin, cout, 1, stride=stride, padding=0, with_bn=bn)
                      if (cin != cout or stride != 1) else None),
            stride=stride,
        )

    c = cfg.ch
    st = model.stages
    st["conv1"] = [conv("conv1", cfg.in_channels, c(64), 3, stride=2)]
    st["conv2"] = [LayerSpec("maxpool2d", (3, 3), 2, 1)]
    cin = c(64)
    for i in range(cfg.blocks[0]):
        st["conv2"].append(block(f"conv2.block{i}", cin, c(128), c(256), 1))
        cin = c(256)
    st["conv3"] = []
    for i in range(cfg.blocks[1]):
        st["conv3"].append(block(f"conv3.block{i}", cin, c(256), c(512), 2 if i == 0 else 1))
        cin = c(512)
    st["deconv4"] = [conv("deconv4", c(512), c(256), 3, stride=2, transpose=True)]
    st["conv5"] = [conv("conv5", c(256) + c(256), c(256), 3)]
    st["conv6"] = [conv("conv6", c(256), c(256), 3)]
    st["deconv7"] = [conv("deconv7", c(256), c(128), 3, stride=2, transpose=True)]
    st["conv8"] = [conv("conv8", c(128) + c(64), c(128), 3)]
    st["conv9"] = [conv("conv9", c(128), c(128), 3)]
    st["deconv10"] = [conv("deconv10", c(128), c(64), 3, stride=2, transpose=True)]
    st["conv11"] = [conv("conv11", c(64) + cfg.in_channels, c(64), 3)]
    st["conv12"] = [conv("conv12", c(64), c(64), 3)]
    st["conv13"] = [conv("conv13", c(64), cfg.num_classes, 3)]
    model.skips = {"conv5": "conv2", "conv8": "conv1", "conv11": "input"}
    return model


def forward_infer(model: SegModel, batch) -> Tensor:
    """Inference-mode logits, no tape recorded."""
    with no_grad():
        return model.forward(batch, training=False)


def predict_proba(model: SegModel, batch) -> np.ndarray:
    """Foreground probability map (B, 64, 64) from the softmax of the logits."""
    with no_grad():
        probs = softmax_channels(model.forward(batch, training=False))
    return probs.data[:, 1]


def stage_shapes(model: SegModel, batch_size: int = 1) -> Dict[str, Tuple[int, ...]]:
    cfg = model.config
    x = np.zeros((batch_size, cfg.in_channels, cfg.input_size, cfg.input_size), dtype=cfg.dtype)
    with no_grad():
        _, outs = model.forward(x, training=False, return_stages=True)
    return {k: tuple(v.shape) for k, v in outs.items()}


def parameter_summary(model: SegModel) -> str:
    shapes = stage_shapes(model)
    rows: List[Tuple[str, str, int]] = []
    for name in STAGE_NAMES:
        rows.append((name, "x".join(str(s) for s in shapes[name][1:]), model.stage_parameter_count(name)))
    w0 = max(len(r[0]) for r in rows + [("stage", "", 0)])
    w1 = max(len(r[1]) for r in rows + [("", "output", 0)])
    lines = [f"{'stage':<{w0}}  {'output':<{w1}}  params"]
    for name, shape, n in rows:
        lines.append(f"{name:<{w0}}  {shape:<{w1}}  {n}")
    lines.append(f"{'total':<{w0}}  {'':<{w1}}  {model.parameter_count()}")
    return "\n".join(lines)
