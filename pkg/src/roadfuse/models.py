"""U-Net, ResUnet and D-Linknet backbones wired into the four fusion topologies."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, Param, Tensor

BACKBONES = ("unet", "resunet", "dlinknet")
STAGES = ("none", "early", "late1", "late2")
OPERATORS = ("concatenate", "average", "maximum", "multiply")
DILATIONS = (1, 2, 4, 8)
FUSE_HEAD_GAIN = 4.0


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "unet"
    depth: int = 4
    base_width: int = 64
    in_channels: int | None = None  # None: derived from the fusion stage

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.in_channels is not None and self.in_channels not in (1, 4, 5):
            raise ValueError(f"in_channels must be 1, 4 or 5, got {self.in_channels}")


@dataclass(frozen=True)
class FusionSpec:
    stage: str = "none"
    operator: str = "concatenate"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown fusion stage {self.stage!r}; expected one of {STAGES}")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown fusion operator {self.operator!r}; expected one of {OPERATORS}")


def spec_from_json(d: dict) -> tuple[BackboneSpec, FusionSpec]:
    return BackboneSpec(**d["backbone"]), FusionSpec(**d.get("fusion", {}))


def spec_to_json(backbone: BackboneSpec, fusion: FusionSpec) -> dict:
    b = asdict(backbone)
    if b["in_channels"] is None:
        del b["in_channels"]
    return {"backbone": b, "fusion": asdict(fusion)}


# --------------------------------------------------------------------------- fusion


def fuse(g: Graph, a: Tensor, b: Tensor, operator: str) -> Tensor:
    """Combine two streams: [A||B], (A+B)*0.5, max(A,B) or A*B."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"fuse: N,H,W mismatch {a.shape} vs {b.shape}")
    if operator == "concatenate":
        return g.concat_channels(a, b)
    if a.shape != b.shape:
        raise ValueError(f"fuse({operator}) needs equal shapes, got {a.shape} vs {b.shape}")
    if operator == "average":
        return g.scale(g.add(a, b), 0.5)
    if operator == "maximum":
        return g.maximum(a, b)
    if operator == "multiply":
        return g.mul(a, b)
    raise ValueError(f"unknown fusion operator {operator!r}")


# --------------------------------------------------------------------------- layers


class ParamStore:
    """Ordered named parameters plus non-trainable buffers (batchnorm running stats)."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name, value) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, np.ascontiguousarray(value, dtype=self.dtype))
        self.params[name] = p
        return p

    def kaiming(self, name, shape, fan_in) -> Param:
        std = np.sqrt(2.0 / fan_in)
        return self.add(name, self.rng.standard_normal(shape) * std)

    def buffer(self, name, value) -> np.ndarray:
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(dtype)


class Conv:
    def __init__(self, store, name, cin, cout, k=3, dilation=1, bias=True):
        self.w = store.kaiming(f"{name}.w", (cout, cin, k, k), cin * k * k)
        self.b = store.add(f"{name}.b", np.zeros(cout)) if bias else None
        self.dilation = dilation

    def __call__(self, g, x):
        return g.conv2d(x, self.w, self.b, padding="same", dilation=self.dilation)


class UpConv:
    """2x upsampling transposed convolution (k=2, stride 2)."""

    def __init__(self, store, name, cin, cout, bias=True):
        self.w = store.kaiming(f"{name}.w", (cin, cout, 2, 2), cin)
        self.b = store.add(f"{name}.b", np.zeros(cout)) if bias else None

    def __call__(self, g, x):
        return g.conv_transpose2d(x, self.w, self.b, stride=2)


class BatchNorm:
    def __init__(self, store, name, c):
        self.store = store
        self.name = name
        self.gamma = store.add(f"{name}.gamma", np.ones(c))
        self.beta = store.add(f"{name}.beta", np.zeros(c))
        store.buffer(f"{name}.running_mean", np.zeros(c))
        store.buffer(f"{name}.running_var", np.ones(c))

    def __call__(self, g, x, train):
        # buffers are looked up on each call so dtype changes on the store apply
        return g.batchnorm(x, self.gamma, self.beta,
                           self.store.buffers[f"{self.name}.running_mean"],
                           self.store.buffers[f"{self.name}.running_var"], train)


class DoubleConv:
    def __init__(self, store, name, cin, cout):
        self.c1 = Conv(store, f"{name}.conv1", cin, cout)
        self.c2 = Conv(store, f"{name}.conv2", cout, cout)

    def __call__(self, g, x, train):
        return g.relu(self.c2(g, g.relu(self.c1(g, x))))


class ResidualUnit:
    """Pre-activation residual unit: (BN, relu, conv) x 2 plus shortcut."""

    def __init__(self, store, name, cin, cout):
        self.bn1 = BatchNorm(store, f"{name}.bn1", cin)
        self.c1 = Conv(store, f"{name}.conv1", cin, cout)
        self.bn2 = BatchNorm(store, f"{name}.bn2", cout)
        self.c2 = Conv(store, f"{name}.conv2", cout, cout)
        self.proj = Conv(store, f"{name}.proj", cin, cout, k=1) if cin != cout else None

    def __call__(self, g, x, train):
        h = self.c1(g, g.relu(self.bn1(g, x, train)))
        h = self.c2(g, g.relu(self.bn2(g, h, train)))
        short = x if self.proj is None else self.proj(g, x)
        return g.add(h, short)


class BasicBlock:
    """Post-activation ResNet block: conv-BN-relu-conv-BN, add shortcut, relu."""

    def __init__(self, store, name, cin, cout):
        self.c1 = Conv(store, f"{name}.conv1", cin, cout, bias=False)
        self.bn1 = BatchNorm(store, f"{name}.bn1", cout)
        self.c2 = Conv(store, f"{name}.conv2", cout, cout, bias=False)
        self.bn2 = BatchNorm(store, f"{name}.bn2", cout)
        if cin != cout:
            self.proj = Conv(store, f"{name}.proj", cin, cout, k=1, bias=False)
            self.proj_bn = BatchNorm(store, f"{name}.proj_bn", cout)
        else:
            self.proj = None

    def __call__(self, g, x, train):
        h = g.relu(self.bn1(g, self.c1(g, x), train))
        h = self.bn2(g, self.c2(g, h), train)
        short = x if self.proj is None else self.proj_bn(g, self.proj(g, x), train)
        return g.relu(g.add(h, short))


class DilatedCenter:
    """Cascaded dilated convolutions; the block output sums the input and every stage."""

    def __init__(self, store, name, c):
        self.convs = [Conv(store, f"{name}.dil{d}", c, c, dilation=d) for d in DILATIONS]

    def __call__(self, g, x, train):
        outs = [x]
        h = x
        for conv in self.convs:
            h = g.relu(conv(g, h))
            outs.append(h)
        return g.add_n(*outs)


class LinkDecoder:
    """1x1 reduce, 2x transposed conv, 1x1 expand; each followed by BN + relu."""

    def __init__(self, store, name, cin, cout):
        mid = max(1, cin // 4)
        self.reduce = Conv(store, f"{name}.reduce", cin, mid, k=1, bias=False)
        self.bn1 = BatchNorm(store, f"{name}.bn1", mid)
        self.up = UpConv(store, f"{name}.up", mid, mid, bias=False)
        self.bn2 = BatchNorm(store, f"{name}.bn2", mid)
        self.expand = Conv(store, f"{name}.expand", mid, cout, k=1, bias=False)
        self.bn3 = BatchNorm(store, f"{name}.bn3", cout)

    def __call__(self, g, x, train):
        h = g.relu(self.bn1(g, self.reduce(g, x), train))
        h = g.relu(self.bn2(g, self.up(g, h), train))
        return g.relu(self.bn3(g, self.expand(g, h), train))


# --------------------------------------------------------------------------- backbones


class _UShape:
    """Shared encoder/decoder wiring of U-Net and ResUnet; ``block`` differs."""

    block = DoubleConv

    def __init__(self, store, name, in_channels, depth, base_width):
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.enc = []
        cin = in_channels
        for i in range(depth):
            self.enc.append(self.block(store, f"{name}.enc{i}", cin, widths[i]))
            cin = widths[i]
        self.bottleneck = self.block(store, f"{name}.bottleneck", widths[depth - 1], widths[depth])
        self.ups, self.dec = [], []
        for i in reversed(range(depth)):
            self.ups.append(UpConv(store, f"{name}.up{i}", widths[i + 1], widths[i]))
            self.dec.append(self.block(store, f"{name}.dec{i}", 2 * widths[i], widths[i]))
        self.head = Conv(store, f"{name}.head", widths[0], 1, k=1)

    def __call__(self, g, x, train):
        skips = []
        for blk in self.enc:
            x = blk(g, x, train)
            skips.append(x)
            x = g.maxpool2(x)
        x = self.bottleneck(g, x, train)
        for up, blk, skip in zip(self.ups, self.dec, reversed(skips)):
            x = blk(g, g.concat_channels(up(g, x), skip), train)
        return g.sigmoid(self.head(g, x))


class UNet(_UShape):
    block = DoubleConv


class ResUNet(_UShape):
    block = ResidualUnit


class DLinkNet:
    def __init__(self, store, name, in_channels, depth, base_width):
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.stem = Conv(store, f"{name}.stem", in_channels, widths[0], bias=False)
        self.stem_bn = BatchNorm(store, f"{name}.stem_bn", widths[0])
        self.enc = [BasicBlock(store, f"{name}.enc{i}", widths[i - 1], widths[i])
                    for i in range(1, depth + 1)]
        self.center = DilatedCenter(store, f"{name}.center", widths[depth])
        self.dec = [LinkDecoder(store, f"{name}.dec{i}", widths[i], widths[i - 1])
                    for i in range(depth, 0, -1)]
        self.head = Conv(store, f"{name}.head", widths[0], 1, k=1)

    def __call__(self, g, x, train):
        x = g.relu(self.stem_bn(g, self.stem(g, x), train))
        skips = [x]
        for blk in self.enc:
            x = blk(g, g.maxpool2(x), train)
            skips.append(x)
        x = self.center(g, x, train)
        for dec, skip in zip(self.dec, reversed(skips[:-1])):
            x = g.add(dec(g, x, train), skip)
        return g.sigmoid(self.head(g, x))


_BACKBONE_CLASSES = {"unet": UNet, "resunet": ResUNet, "dlinknet": DLinkNet}


# --------------------------------------------------------------------------- model


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


class Model:
    """Backbone(s) plus fusion wiring; forward maps inputs to an N x 1 x H x W probability map."""

    def __init__(self, backbone: BackboneSpec, fusion: FusionSpec, seed: int = 0, dtype=np.float32):
        self.backbone = backbone
        self.fusion = fusion
        self.seed = seed
        stage = fusion.stage
        in_ch = backbone.in_channels
        if in_ch is None:
            in_ch = 5 if stage == "early" else 4
        if stage == "early" and in_ch != 5:
            raise ValueError("early fusion needs in_channels=5 (4 satellite bands + GPS)")
        if stage != "early" and in_ch == 5:
            raise ValueError(f"stage {stage!r} takes the satellite stream only; in_channels=5 is early fusion")
        self.in_channels = in_ch
        self.sat_channels = in_ch - 1 if stage == "early" else in_ch
        self.store = ParamStore(np.random.default_rng(seed), dtype)
        cls = _BACKBONE_CLASSES[backbone.kind]
        d, w = backbone.depth, backbone.base_width
        self.sat_net = cls(self.store, "sat", in_ch, d, w)
        self.gps_net = cls(self.store, "gps", 1, d, w) if stage == "late2" else None
        self.fuse_head = None
        if stage in ("late1", "late2") and fusion.operator == "concatenate":
            self.fuse_head = Conv(self.store, "fuse_head", 2, 1, k=1)
            # evidence-sum start: sigmoid(a*(p + q - 1)); a random signed 1x1 head drives
            # the backbone sigmoid into saturation within a few steps and training stalls
            self.fuse_head.w.data[...] = FUSE_HEAD_GAIN
            self.fuse_head.b.data[...] = -FUSE_HEAD_GAIN

    # -- parameters

    @property
    def params(self) -> dict[str, Param]:
        return self.store.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self.store.buffers

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        self.store.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def divisor(self) -> int:
        return 2 ** self.backbone.depth

    def spec_json(self) -> dict:
        return spec_to_json(self.backbone, self.fusion)

    # -- forward

    def forward(self, satellite, gps=None, train: bool = False, graph: Graph | None = None) -> Tensor:
        g = graph if graph is not None else Graph(record=False)
        stage = self.fusion.stage
        if stage == "none" and gps is not None:
            raise ValueError("stage 'none' consumes the satellite stream only; got a GPS input")
        if stage != "none" and gps is None:
            raise ValueError(f"stage {stage!r} needs a GPS input")
        sat = _as_input(satellite, self.dtype)
        if sat.data.ndim != 4 or sat.shape[1] != self.sat_channels:
            raise ValueError(f"satellite input must be N x {self.sat_channels} x H x W, got {sat.shape}")
        h, w = sat.shape[2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {self.divisor}")
        if gps is not None:
            gps = _as_input(gps, self.dtype)
            if gps.shape != (sat.shape[0], 1, h, w):
                raise ValueError(f"GPS input must be {(sat.shape[0], 1, h, w)}, got {gps.shape}")

        if stage == "none":
            return self.sat_net(g, sat, train)
        if stage == "early":
            return self.sat_net(g, g.concat_channels(sat, gps), train)
        p_sat = self.sat_net(g, sat, train)
        other = gps if stage == "late1" else self.gps_net(g, gps, train)
        fused = fuse(g, p_sat, other, self.fusion.operator)
        if self.fuse_head is not None:
            return g.sigmoid(self.fuse_head(g, fused))
        return fused

    __call__ = forward


def build_model(backbone: BackboneSpec, fusion: FusionSpec, seed: int = 0, dtype=np.float32) -> Model:
    return Model(backbone, fusion, seed=seed, dtype=dtype)


def load_model_spec(path) -> tuple[BackboneSpec, FusionSpec]:
    with open(path) as fh:
        return spec_from_json(json.load(fh))
