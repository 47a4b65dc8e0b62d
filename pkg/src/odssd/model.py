"""OD-SSD network assembly, prior generation, and weight persistence.

The base net is a SqueezeNet-1.1 feature extractor with its last two Fire
layers narrowed to 128/128 expand channels. The stacked stereo input runs
through it as one image; at two points the stacked feature map is folded
(top/bottom halves -> concatenated channels) so the heads see left and
right features of the same cell together. Four separable-conv head pairs
regress per-prior class scores and 6-dim locations (cx, cy, w, h, dx, dy).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BuildError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    view_size: tuple[int, int] = (640, 320)  # (width, height) of one view
    # head width follows the upstream 21-class SSD layout (matches the
    # published model size); the annotation vocabulary uses indices 1..4
    num_classes: int = 21
    priors_per_cell: int = 6
    aspect_ratios: tuple[float, ...] = (2.0, 3.0)
    scale_min: float = 0.1
    scale_max: float = 0.9
    variances: tuple[float, float] = (0.1, 0.2)  # (center, size)
    score_threshold: float = 0.5
    nms_iou_threshold: float = 0.45
    top_k: int = 100
    channel_scale: float = 1.0               # <1 shrinks every width (toy models)

    @property
    def view_w(self) -> int:
        return self.view_size[0]

    @property
    def view_h(self) -> int:
        return self.view_size[1]

    @property
    def stacked_size(self) -> tuple[int, int]:
        return (self.view_w, 2 * self.view_h)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        d = json.loads(s)
        for k in ("view_size", "aspect_ratios", "variances"):
            d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# layers

class Conv2dLayer:
    def __init__(self, rng, name, in_ch, out_ch, k, stride=1, padding=0, groups=1,
                 dtype=np.float32):
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (in_ch // groups) * k * k
        # He init keeps activation variance roughly constant through the
        # ReLU stack; smaller scales let the signal vanish by the heads
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, (out_ch, in_ch // groups, k, k)),
                             requires_grad=True, dtype=dtype, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_ch),
                           requires_grad=True, dtype=dtype, name=f"{name}.bias")
        self.in_ch, self.out_ch = in_ch, out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)

    def params(self):
        return [self.weight, self.bias]


class SeparableConv2dLayer:
    """Depthwise 3x3 -> ReLU -> pointwise 1x1."""

    def __init__(self, rng, name, in_ch, out_ch, stride=1, padding=0,
                 dtype=np.float32):
        self.depthwise = Conv2dLayer(rng, f"{name}.depthwise", in_ch, in_ch, 3,
                                     stride=stride, padding=padding, groups=in_ch,
                                     dtype=dtype)
        self.pointwise = Conv2dLayer(rng, f"{name}.pointwise", in_ch, out_ch, 1,
                                     dtype=dtype)
        self.in_ch, self.out_ch = in_ch, out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return T.separable_conv2d(x, self.depthwise.weight, self.depthwise.bias,
                                  self.pointwise.weight, self.pointwise.bias,
                                  stride=self.depthwise.stride,
                                  padding=self.depthwise.padding)

    def params(self):
        return self.depthwise.params() + self.pointwise.params()


class FireLayer:
    """Squeeze 1x1 then concatenated 1x1/3x3 expands, each followed by ReLU."""

    def __init__(self, rng, name, in_ch, squeeze, expand1, expand3, dtype=np.float32):
        self.squeeze = Conv2dLayer(rng, f"{name}.squeeze", in_ch, squeeze, 1, dtype=dtype)
        self.expand1 = Conv2dLayer(rng, f"{name}.expand1", squeeze, expand1, 1, dtype=dtype)
        self.expand3 = Conv2dLayer(rng, f"{name}.expand3", squeeze, expand3, 3, padding=1,
                                   dtype=dtype)
        self.in_ch, self.out_ch = in_ch, expand1 + expand3

    def __call__(self, x: Tensor) -> Tensor:
        s = T.relu(self.squeeze(x))
        return T.channel_concat(T.relu(self.expand1(s)), T.relu(self.expand3(s)))

    def params(self):
        return self.squeeze.params() + self.expand1.params() + self.expand3.params()


class MaxPoolLayer:
    def __init__(self):
        self.in_ch = self.out_ch = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.maxpool2d_ceil(x, k=3, stride=2)

    def params(self):
        return []


class ReLULayer:
    def __init__(self):
        self.in_ch = self.out_ch = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def params(self):
        return []


class ExtraBlock:
    """1x1 channel reduction -> ReLU -> strided separable conv."""

    def __init__(self, rng, name, in_ch, mid_ch, out_ch, dtype=np.float32):
        self.reduce = Conv2dLayer(rng, f"{name}.reduce", in_ch, mid_ch, 1, dtype=dtype)
        self.expand = SeparableConv2dLayer(rng, f"{name}.expand", mid_ch, out_ch,
                                           stride=2, padding=1, dtype=dtype)
        self.in_ch, self.out_ch = in_ch, out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return self.expand(T.relu(self.reduce(x)))

    def params(self):
        return self.reduce.params() + self.expand.params()


# ---------------------------------------------------------------------------
# model

# index (0-based) of the last base entry whose output feeds the tap; the
# entries after it still run before the second fold
TAP_AFTER_ENTRY = 11


class Model:
    """Built OD-SSD network: parameter registry plus layer structure."""

    def __init__(self, config: ModelConfig, base, extras, reg_heads, cls_heads):
        self.config = config
        self.base = base
        self.extras = extras
        self.reg_heads = reg_heads
        self.cls_heads = cls_heads
        self._params: dict[str, Tensor] = {}
        for layer in [*base, *extras, *reg_heads, *cls_heads]:
            for p in layer.params():
                if p.name in self._params:
                    raise BuildError(f"duplicate parameter name {p.name}")
                self._params[p.name] = p

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def forward(self, stacked_input: Tensor) -> tuple[Tensor, Tensor]:
        """Run the network on a stacked [N,3,2*view_h,view_w] input.

        Returns (confidences [N,P,K] raw scores, locations [N,P,6]).
        """
        cfg = self.config
        n, c, h, w = stacked_input.shape
        if (c, h, w) != (3, 2 * cfg.view_h, cfg.view_w):
            raise T.ShapeError(
                f"input {stacked_input.shape} does not match configured "
                f"stacked resolution (3, {2 * cfg.view_h}, {cfg.view_w})")

        x = stacked_input
        sources = []
        for i, layer in enumerate(self.base):
            x = layer(x)
            if i == TAP_AFTER_ENTRY:
                sources.append(T.fold_stacked(x))
        sources_rest = [T.fold_stacked(x)]
        for block in self.extras:
            sources_rest.append(block(sources_rest[-1]))
        # heads attach to: folded tap, extra0, extra1, extra2
        head_inputs = [sources[0], *sources_rest[1:]]

        confs, locs = [], []
        for src, reg, cls in zip(head_inputs, self.reg_heads, self.cls_heads):
            locs.append(T.to_prior_form(reg(src), 6))
            confs.append(T.to_prior_form(cls(src), cfg.num_classes))
        return T.concat_priors(confs), T.concat_priors(locs)


def _scaled(c: int, scale: float) -> int:
    return max(4, int(round(c * scale)))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Assemble the network and verify its channel arithmetic end-to-end.

    dtype float64 is the gradient-check mode; compute is float32 otherwise.
    """
    rng = np.random.default_rng(seed)
    s = config.channel_scale

    def ch(c):
        return _scaled(c, s)

    base = [
        Conv2dLayer(rng, "base.0", 3, ch(64), 3, stride=2, padding=1, dtype=dtype),
        ReLULayer(),
        MaxPoolLayer(),
        FireLayer(rng, "base.3", ch(64), ch(16), ch(64), ch(64), dtype=dtype),
        FireLayer(rng, "base.4", 2 * ch(64), ch(16), ch(64), ch(64), dtype=dtype),
        MaxPoolLayer(),
        FireLayer(rng, "base.6", 2 * ch(64), ch(32), ch(128), ch(128), dtype=dtype),
        FireLayer(rng, "base.7", 2 * ch(128), ch(32), ch(128), ch(128), dtype=dtype),
        MaxPoolLayer(),
        FireLayer(rng, "base.9", 2 * ch(128), ch(48), ch(192), ch(192), dtype=dtype),
        FireLayer(rng, "base.10", 2 * ch(192), ch(48), ch(192), ch(192), dtype=dtype),
        FireLayer(rng, "base.11", 2 * ch(192), ch(64), ch(128), ch(128), dtype=dtype),
        FireLayer(rng, "base.12", 2 * ch(128), ch(64), ch(128), ch(128), dtype=dtype),
    ]
    tap_ch = base[TAP_AFTER_ENTRY].out_ch        # 256 at full width
    fold_ch = 2 * tap_ch                         # 512 at full width
    final_ch = 2 * base[-1].out_ch               # folded final fire output

    extras = [
        ExtraBlock(rng, "extras.0", final_ch, ch(256), ch(512), dtype=dtype),
        ExtraBlock(rng, "extras.1", ch(512), ch(256), ch(512), dtype=dtype),
        ExtraBlock(rng, "extras.2", ch(512), ch(128), ch(256), dtype=dtype),
    ]
    head_in = [fold_ch, extras[0].out_ch, extras[1].out_ch, extras[2].out_ch]
    ppc = config.priors_per_cell
    reg_heads = [
        SeparableConv2dLayer(rng, f"reg_head.{i}", cin, ppc * 6, padding=1, dtype=dtype)
        for i, cin in enumerate(head_in)
    ]
    cls_heads = [
        SeparableConv2dLayer(rng, f"cls_head.{i}", cin, ppc * config.num_classes,
                             padding=1, dtype=dtype)
        for i, cin in enumerate(head_in)
    ]

    # channel arithmetic check: each base/extras layer consumes what its
    # predecessor produces
    prev = 3
    for i, layer in enumerate(base):
        if layer.in_ch is None:
            continue
        if layer.in_ch != prev:
            raise BuildError(f"base entry {i} expects {layer.in_ch} channels, got {prev}")
        prev = layer.out_ch
    prev = final_ch
    for i, block in enumerate(extras):
        if block.in_ch != prev:
            raise BuildError(f"extras {i} expects {block.in_ch} channels, got {prev}")
        prev = block.out_ch

    return Model(config, base, extras, reg_heads, cls_heads)


# ---------------------------------------------------------------------------
# geometry of the head grids

def _conv_out(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _pool_out(h: int, k: int = 3, s: int = 2) -> int:
    return max(1, math.ceil((h - k) / s) + 1)


def head_grids(config: ModelConfig) -> list[tuple[int, int]]:
    """(H, W) of each of the four head feature maps."""
    w, h = config.view_w, 2 * config.view_h
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    for _ in range(3):
        h, w = _pool_out(h), _pool_out(w)
    grids = [(h // 2, w)]  # folded tap
    eh, ew = h // 2, w
    for _ in range(3):
        eh, ew = _conv_out(eh, 3, 2, 1), _conv_out(ew, 3, 2, 1)
        grids.append((eh, ew))
    return grids


def num_priors(config: ModelConfig) -> int:
    return config.priors_per_cell * sum(h * w for h, w in head_grids(config))


def prior_scales(config: ModelConfig) -> list[float]:
    k = len(head_grids(config))
    scales = list(np.linspace(config.scale_min, config.scale_max, k))
    scales.append(scales[-1] + (scales[-1] - scales[0]) / (k - 1))  # for the last large square
    return scales


def generate_priors(config: ModelConfig) -> np.ndarray:
    """Center-form priors, normalized left-view coordinates.

    Returns a float64 array [P, 4] of (cx, cy, w, h), head-major,
    row-major over cells, ratio-major within a cell:
    small square, large square, then aspect-ratio pairs {2, 1/2, 3, 1/3}.
    """
    scales = prior_scales(config)
    rows = []
    for k, (gh, gw) in enumerate(head_grids(config)):
        sk, sk1 = scales[k], scales[k + 1]
        shapes = [(sk, sk), (math.sqrt(sk * sk1), math.sqrt(sk * sk1))]
        for ar in config.aspect_ratios:
            r = math.sqrt(ar)
            shapes.append((sk * r, sk / r))
            shapes.append((sk / r, sk * r))
        shapes = shapes[: config.priors_per_cell]
        for i in range(gh):
            cy = (i + 0.5) / gh
            for j in range(gw):
                cx = (j + 0.5) / gw
                for pw, ph in shapes:
                    rows.append((cx, cy, pw, ph))
    priors = np.array(rows, dtype=np.float64)
    return np.clip(priors, 0.0, 1.0)


def param_count(model: Model) -> tuple[int, int]:
    """(parameter count, fp32 byte size of the raw buffers)."""
    n = sum(p.data.size for p in model.parameters().values())
    return n, 4 * n


# ---------------------------------------------------------------------------
# weight persistence

_MAGIC = "ODSSD-WEIGHTS v1"


def save_weights(model: Model, path, precision: str = "fp32") -> None:
    """Serialize parameters: text manifest, little-endian blob, sha256 trailer.

    fp32 round-trips bit-exactly; int8 stores per-tensor symmetric
    quantization q = round(w * 127 / max|w|) with the scale in the manifest.
    """
    if precision not in ("fp32", "int8"):
        raise ValueError(f"unknown precision {precision!r}")
    header = [_MAGIC, "config " + model.config.to_json()]
    blob = bytearray()
    for name, p in model.parameters().items():
        dims = ",".join(str(d) for d in p.shape)
        offset = len(blob)
        if precision == "fp32":
            raw = p.data.astype("<f4").tobytes()
            scale = 0.0
        else:
            amax = float(np.max(np.abs(p.data)))
            scale = amax / 127.0 if amax > 0 else 1.0
            q = np.clip(np.round(p.data / scale), -127, 127).astype(np.int8)
            raw = q.tobytes()
        blob.extend(raw)
        header.append(f"{name}\t{dims}\t{precision}\t{scale!r}\t{offset}")
    header.append("END")
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(bytes(blob))
        f.write(digest.encode())


def load_weights(path) -> Model:
    """Rebuild a model from a weights file, validating checksum and shapes."""
    raw = open(path, "rb").read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise WeightsFormatError("not an OD-SSD weights file")
    header_lines = raw[:end].decode().split("\n")
    body = raw[end + len(b"\nEND\n"):]
    if len(body) < 64:
        raise WeightsFormatError("truncated weights file")
    blob, digest = body[:-64], body[-64:].decode()
    if hashlib.sha256(blob).hexdigest() != digest:
        raise WeightsFormatError("checksum mismatch")

    if not header_lines[1].startswith("config "):
        raise WeightsFormatError("missing config line")
    config = ModelConfig.from_json(header_lines[1][len("config "):])
    model = build_model(config, seed=0)
    params = model.parameters()

    seen = set()
    for line in header_lines[2:]:
        name, dims_s, dtype, scale_s, offset_s = line.split("\t")
        if name not in params:
            raise WeightsFormatError(f"unknown parameter {name}")
        shape = tuple(int(d) for d in dims_s.split(","))
        p = params[name]
        if shape != p.shape:
            raise WeightsFormatError(
                f"{name}: stored shape {shape} != model shape {p.shape}")
        offset, scale = int(offset_s), float(scale_s)
        size = int(np.prod(shape))
        if dtype == "fp32":
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            p.data = np.ascontiguousarray(data.reshape(shape))
        elif dtype == "int8":
            q = np.frombuffer(blob, dtype=np.int8, count=size, offset=offset)
            p.data = np.ascontiguousarray(
                (q.astype(np.float32) * scale).reshape(shape))
        else:
            raise WeightsFormatError(f"unknown dtype {dtype}")
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise WeightsFormatError(f"missing parameters: {sorted(missing)[:5]}")
    return model
