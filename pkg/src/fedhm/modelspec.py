"""Declarative model descriptions and the transformations FedHM applies to them.

A :class:`ModelSpec` is a flat list of :class:`LayerSpec` nodes. Each node
names the earlier nodes it reads from (``-1`` is the network input), which is
enough to express residual blocks without nesting. A :class:`Model` pairs a
spec with concrete parameter and buffer arrays keyed ``"<layer>.<param>"``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .factorize import layer_rank, max_rank, recover_weight, spectral_factorize

DENSE = "Dense"
CONV = "Conv2D"
FDENSE = "FactorizedDense"
FCONV = "FactorizedConv"
BN = "BatchNorm"
RELU = "ReLU"
POOL = "AvgPool"
FLATTEN = "Flatten"
ADD = "Add"

KINDS = (DENSE, CONV, FDENSE, FCONV, BN, RELU, POOL, FLATTEN, ADD)
WEIGHT_KINDS = (DENSE, CONV, FDENSE, FCONV)
FACTORIZED = {DENSE: FDENSE, CONV: FCONV}
UNFACTORIZED = {FDENSE: DENSE, FCONV: CONV}


class SpecError(ValueError):
    """A model description does not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    inputs: tuple[int, ...] = ()
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rank: int = 0
    bias: bool = False
    role: str = ""  # "stem" | "classifier" | ""

    @property
    def is_conv(self) -> bool:
        return self.kind in (CONV, FCONV)

    @property
    def is_factorized(self) -> bool:
        return self.kind in (FDENSE, FCONV)

    @property
    def full_shape(self) -> tuple:
        """Shape of the full-rank weight this layer stands for."""
        if self.is_conv:
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        return (self.in_ch, self.out_ch)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    classes: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        validate(self)

    @property
    def num_factorizable(self) -> int:
        return len(factorizable_indices(self))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [{**dataclasses.asdict(l), "inputs": list(l.inputs)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(**{**l, "inputs": tuple(l["inputs"])}) for l in d["layers"])
        return cls(d["name"], tuple(d["input_shape"]), int(d["classes"]), layers)

    def spec_hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def unfactorized(self) -> "ModelSpec":
        layers = tuple(
            dataclasses.replace(l, kind=UNFACTORIZED[l.kind], rank=0) if l.is_factorized else l for l in self.layers
        )
        return ModelSpec(self.name, self.input_shape, self.classes, layers)


def output_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-node output shape (without batch) propagated from ``spec.input_shape``."""
    shapes: list[tuple[int, ...]] = []
    for i, l in enumerate(spec.layers):
        if l.kind not in KINDS:
            raise SpecError(f"{l.name}: unknown layer kind {l.kind!r}")
        need = 2 if l.kind == ADD else 1
        if len(l.inputs) != need:
            raise SpecError(f"{l.name}: expects {need} input(s), got {l.inputs}")
        for j in l.inputs:
            if not -1 <= j < i:
                raise SpecError(f"{l.name}: input {j} is not an earlier node")
        ins = [spec.input_shape if j == -1 else shapes[j] for j in l.inputs]
        x = ins[0]
        if l.kind in (CONV, FCONV):
            if len(x) != 3 or x[0] != l.in_ch:
                raise SpecError(f"{l.name}: expects {l.in_ch} input channels, got shape {x}")
            if l.kernel < 1:
                raise SpecError(f"{l.name}: kernel must be >= 1")
            H = (x[1] + 2 * l.padding - l.kernel) // l.stride + 1
            W = (x[2] + 2 * l.padding - l.kernel) // l.stride + 1
            if H <= 0 or W <= 0:
                raise SpecError(f"{l.name}: non-positive output extent")
            out = (l.out_ch, H, W)
        elif l.kind in (DENSE, FDENSE):
            if len(x) != 1 or x[0] != l.in_ch:
                raise SpecError(f"{l.name}: expects {l.in_ch} input features, got shape {x}")
            out = (l.out_ch,)
        elif l.kind == BN:
            if x[0] != l.in_ch or l.in_ch != l.out_ch:
                raise SpecError(f"{l.name}: channel mismatch ({x[0]} vs {l.in_ch})")
            out = x
        elif l.kind == POOL:
            if len(x) != 3:
                raise SpecError(f"{l.name}: pooling needs a 3D feature map")
            out = (x[0], 1, 1)
        elif l.kind == FLATTEN:
            out = (math.prod(x),)
        elif l.kind == ADD:
            if ins[0] != ins[1]:
                raise SpecError(f"{l.name}: cannot add {ins[0]} and {ins[1]}")
            out = x
        else:
            out = x
        if l.is_factorized and not 1 <= l.rank <= max_rank(l.full_shape):
            raise SpecError(f"{l.name}: rank {l.rank} outside [1, {max_rank(l.full_shape)}]")
        shapes.append(out)
    return shapes


def validate(spec: ModelSpec) -> None:
    if spec.classes < 2:
        raise SpecError("classes must be >= 2")
    names = [l.name for l in spec.layers]
    if len(set(names)) != len(names):
        raise SpecError("layer names must be unique")
    shapes = output_shapes(spec)
    if shapes and shapes[-1] != (spec.classes,):
        raise SpecError(f"network output {shapes[-1]} does not match {spec.classes} classes")


def factorizable_indices(spec: ModelSpec) -> list[int]:
    return [i for i, l in enumerate(spec.layers) if l.kind in WEIGHT_KINDS]


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, kind, name, src=None, **kw) -> int:
        if src is None:
            src = (len(self.layers) - 1,)
        elif isinstance(src, int):
            src = (src,)
        self.layers.append(LayerSpec(kind=kind, name=name, inputs=tuple(src), **kw))
        return len(self.layers) - 1

    def conv_bn(self, prefix, cin, cout, k, stride, pad, src=None, role="", suffix=""):
        self.add(CONV, f"{prefix}conv{suffix}", src, in_ch=cin, out_ch=cout, kernel=k, stride=stride, padding=pad, role=role)
        return self.add(BN, f"{prefix}bn{suffix}", in_ch=cout, out_ch=cout)


def _resnet(name, blocks, classes, in_channels, image_size):
    b = _Builder()
    b.conv_bn("", in_channels, 64, 3, 1, 1, src=-1, role="stem", suffix="1")
    prev = b.add(RELU, "relu1")
    cin = 64
    for stage, (width, count) in enumerate(zip((64, 128, 256, 512), blocks), start=1):
        for j in range(count):
            stride = 2 if (stage > 1 and j == 0) else 1
            p = f"layer{stage}.{j}."
            block_in = prev
            b.conv_bn(p, cin, width, 3, stride, 1, src=block_in, suffix="1")
            b.add(RELU, p + "relu1")
            main = b.conv_bn(p, width, width, 3, 1, 1, suffix="2")
            if stride != 1 or cin != width:
                b.add(CONV, p + "shortcut.conv", block_in, in_ch=cin, out_ch=width, kernel=1, stride=stride)
                skip = b.add(BN, p + "shortcut.bn", in_ch=width, out_ch=width)
            else:
                skip = block_in
            b.add(ADD, p + "add", (main, skip))
            prev = b.add(RELU, p + "relu2")
            cin = width
    b.add(POOL, "pool")
    b.add(FLATTEN, "flatten")
    b.add(DENSE, "fc", in_ch=512, out_ch=classes, bias=True, role="classifier")
    return ModelSpec(name, (in_channels, image_size, image_size), classes, tuple(b.layers))


def build_resnet18_cifar(classes: int = 10, in_channels: int = 3, image_size: int = 32) -> ModelSpec:
    return _resnet("resnet18", (2, 2, 2, 2), classes, in_channels, image_size)


def build_resnet34_cifar(classes: int = 100, in_channels: int = 3, image_size: int = 32) -> ModelSpec:
    return _resnet("resnet34", (3, 4, 6, 3), classes, in_channels, image_size)


def build_tiny_cnn(in_channels: int = 1, classes: int = 2, image_size: int = 8, widths=(16, 32, 32)) -> ModelSpec:
    """Three conv-BN-ReLU stages, global pool and a dense classifier."""
    b = _Builder()
    cin = in_channels
    for i, w in enumerate(widths, start=1):
        b.conv_bn("", cin, w, 3, 1, 1, src=-1 if i == 1 else None, role="stem" if i == 1 else "", suffix=str(i))
        b.add(RELU, f"relu{i}")
        cin = w
    b.add(POOL, "pool")
    b.add(FLATTEN, "flatten")
    b.add(DENSE, "fc", in_ch=cin, out_ch=classes, bias=True, role="classifier")
    return ModelSpec("tiny_cnn", (in_channels, image_size, image_size), classes, tuple(b.layers))


def build_mlp(in_features: int, hidden: int, classes: int) -> ModelSpec:
    b = _Builder()
    b.add(DENSE, "fc1", -1, in_ch=in_features, out_ch=hidden, bias=True, role="stem")
    b.add(RELU, "relu1")
    b.add(DENSE, "fc2", in_ch=hidden, out_ch=hidden, bias=True)
    b.add(RELU, "relu2")
    b.add(DENSE, "fc", in_ch=hidden, out_ch=classes, bias=True, role="classifier")
    return ModelSpec("mlp", (in_features,), classes, tuple(b.layers))


BUILDERS = {
    "resnet18": build_resnet18_cifar,
    "resnet34": build_resnet34_cifar,
    "tiny_cnn": build_tiny_cnn,
    "mlp": build_mlp,
}


# ---------------------------------------------------------------------------
# hybrid construction


@dataclass(frozen=True)
class HybridPlan:
    """Factorize every eligible weight layer whose factorizable index is >= rho at rank ratio ``ratio``."""

    rho: int
    ratio: float
    factorize_stem: bool = False
    factorize_classifier: bool = False

    def eligible(self, layer: LayerSpec) -> bool:
        if layer.role == "stem":
            return self.factorize_stem
        if layer.role == "classifier":
            return self.factorize_classifier
        return True


def rho_for_stage(spec: ModelSpec, stage: int) -> int:
    """First factorizable index inside ResNet stage ``stage`` (layer1..layer4)."""
    for pos, i in enumerate(factorizable_indices(spec)):
        if spec.layers[i].name.startswith(f"layer{stage}."):
            return pos
    raise SpecError(f"{spec.name} has no stage {stage}")


def make_hybrid(spec: ModelSpec, plan: HybridPlan) -> ModelSpec:
    spec = spec.unfactorized()
    idx = factorizable_indices(spec)
    if not 0 <= plan.rho <= len(idx):
        raise SpecError(f"rho must be in [0, {len(idx)}], got {plan.rho}")
    layers = list(spec.layers)
    for pos, i in enumerate(idx):
        l = layers[i]
        if pos >= plan.rho and plan.eligible(l):
            layers[i] = dataclasses.replace(l, kind=FACTORIZED[l.kind], rank=layer_rank(l.full_shape, plan.ratio))
    return ModelSpec(spec.name, spec.input_shape, spec.classes, tuple(layers))


def width_slim(spec: ModelSpec, ratio: float) -> ModelSpec:
    """Scale every hidden channel width to max(1, floor(ratio * width)).

    The network input channels and the classifier output stay fixed, so the
    slim model's tensors are leading slices of the full model's.
    """
    if not 0 < ratio <= 1:
        raise SpecError(f"width ratio must be in (0, 1], got {ratio}")
    if any(l.is_factorized for l in spec.layers):
        raise SpecError("width slimming expects an unfactorized spec")

    def scale(c):
        return max(1, math.floor(ratio * c + 1e-9))

    layers = []
    for l in spec.layers:
        if l.kind in (CONV, DENSE, BN):
            in_ch = l.in_ch if l.inputs == (-1,) else scale(l.in_ch)
            out_ch = l.out_ch if l.role == "classifier" else scale(l.out_ch)
            if l.kind == BN:
                out_ch = in_ch
            l = dataclasses.replace(l, in_ch=in_ch, out_ch=out_ch)
        layers.append(l)
    return ModelSpec(spec.name, spec.input_shape, spec.classes, tuple(layers))


# ---------------------------------------------------------------------------
# parameter sets


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    n, m, k, r = layer.out_ch, layer.in_ch, layer.kernel, layer.rank
    if layer.kind == DENSE:
        shapes = {"W": (m, n)}
    elif layer.kind == FDENSE:
        shapes = {"U": (m, r), "V": (n, r)}
    elif layer.kind == CONV:
        return {"W": (n, m, k, k)}
    elif layer.kind == FCONV:
        return {"U": (r, m, k, 1), "V": (n, r, 1, k)}
    elif layer.kind == BN:
        return {"gamma": (m,), "beta": (m,)}
    else:
        return {}
    if layer.bias:
        shapes["b"] = (n,)
    return shapes


def buffer_shapes(layer: LayerSpec) -> dict[str, tuple]:
    if layer.kind == BN:
        return {"running_mean": (layer.in_ch,), "running_var": (layer.in_ch,)}
    return {}


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in spec order."""
        return {**self.params, **self.buffers}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def _empty_model(spec: ModelSpec) -> Model:
    return Model(spec, {}, {})


def materialize(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """He-normal (fan-in) initialization; factorized layers get the spectral split of a He-initialized full weight."""
    rng = np.random.default_rng(seed)
    model = _empty_model(spec)
    for l in spec.layers:
        if l.kind in WEIGHT_KINDS:
            shape = l.full_shape
            fan_in = l.in_ch * (l.kernel**2 if l.is_conv else 1)
            W = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            if l.is_factorized:
                pair = spectral_factorize(W, l.rank)
                model.params[f"{l.name}.U"] = pair.U.astype(dtype)
                model.params[f"{l.name}.V"] = pair.V.astype(dtype)
            else:
                model.params[f"{l.name}.W"] = W.astype(dtype)
            if l.bias:
                model.params[f"{l.name}.b"] = np.zeros(l.out_ch, dtype=dtype)
        elif l.kind == BN:
            model.params[f"{l.name}.gamma"] = np.ones(l.in_ch, dtype=dtype)
            model.params[f"{l.name}.beta"] = np.zeros(l.in_ch, dtype=dtype)
            model.buffers[f"{l.name}.running_mean"] = np.zeros(l.in_ch, dtype=dtype)
            model.buffers[f"{l.name}.running_var"] = np.ones(l.in_ch, dtype=dtype)
    return model


def factorize_model(model: Model, plan: HybridPlan) -> Model:
    hybrid = make_hybrid(model.spec, plan)
    out = Model(hybrid, {}, {k: v.copy() for k, v in model.buffers.items()})
    for old, new in zip(model.spec.layers, hybrid.layers):
        for pname in param_shapes(new):
            key = f"{new.name}.{pname}"
            if pname in ("U", "V"):
                continue
            out.params[key] = model.params[key].copy()
        if new.is_factorized:
            if old.is_factorized:
                raise SpecError(f"{old.name}: refactorizing an already factorized layer")
            W = model.params[f"{old.name}.W"]
            pair = spectral_factorize(W, new.rank)
            out.params[f"{new.name}.U"] = pair.U
            out.params[f"{new.name}.V"] = pair.V
    out.params = _in_spec_order(hybrid, out.params)
    return out


def recover_model(model: Model) -> Model:
    """Replace every factor pair by its full-rank product; full layers pass through."""
    full = model.spec.unfactorized()
    out = Model(full, {}, {k: v.copy() for k, v in model.buffers.items()})
    dtype = model.dtype
    for l in model.spec.layers:
        for pname in param_shapes(l):
            if pname in ("U", "V"):
                continue
            key = f"{l.name}.{pname}"
            out.params[key] = model.params[key].copy()
        if l.is_factorized:
            W = recover_weight(model.params[f"{l.name}.U"], model.params[f"{l.name}.V"])
            out.params[f"{l.name}.W"] = W.astype(dtype)
    out.params = _in_spec_order(full, out.params)
    return out


def _in_spec_order(spec, params):
    ordered = {}
    for l in spec.layers:
        for pname in param_shapes(l):
            ordered[f"{l.name}.{pname}"] = params[f"{l.name}.{pname}"]
    return ordered


def slice_model(model: Model, slim_spec: ModelSpec) -> Model:
    """Leading-slice sub-model matching ``slim_spec`` (a width_slim of ``model.spec``)."""
    out = _empty_model(slim_spec)
    for l in slim_spec.layers:
        for group, shapes, src in (
            (out.params, param_shapes(l), model.params),
            (out.buffers, buffer_shapes(l), model.buffers),
        ):
            for pname, shape in shapes.items():
                key = f"{l.name}.{pname}"
                full = src[key]
                if len(shape) != full.ndim or any(s > f for s, f in zip(shape, full.shape)):
                    raise SpecError(f"{key}: {shape} is not a prefix slice of {full.shape}")
                group[key] = full[tuple(slice(0, s) for s in shape)].copy()
    return out


# ---------------------------------------------------------------------------
# binary weight container
#
# header: magic b"FEDHM1", 32-byte sha256 of the spec, uint32 tensor count.
# per tensor: uint16 name length, utf-8 name, uint8 ndim, uint32 dims,
# 2-byte dtype tag (b"f4" | b"f8"), little-endian payload.

MAGIC = b"FEDHM1"
_DTYPE_TAGS = {np.dtype(np.float32): b"f4", np.dtype(np.float64): b"f8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


def save_weights(model: Model, path) -> None:
    tensors = model.tensors()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(model.spec.spec_hash())
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(_DTYPE_TAGS[arr.dtype])
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_weights(path, spec: ModelSpec) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    if data[:6] != MAGIC:
        raise FormatError("bad magic at offset 0")
    if data[6:38] != spec.spec_hash():
        raise FormatError("spec hash mismatch at offset 6")
    (count,) = struct.unpack_from("<I", data, 38)
    pos = 42
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            dtype = _TAG_DTYPES[data[pos : pos + 2]]
            pos += 2
            nbytes = math.prod(shape) * dtype.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"truncated payload for {name} at offset {pos}")
            tensors[name] = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=math.prod(shape), offset=pos).reshape(shape).astype(dtype)
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"malformed tensor record near offset {pos}") from exc
    model = _empty_model(spec)
    for l in spec.layers:
        for pname in param_shapes(l):
            model.params[f"{l.name}.{pname}"] = tensors[f"{l.name}.{pname}"]
        for bname in buffer_shapes(l):
            model.buffers[f"{l.name}.{bname}"] = tensors[f"{l.name}.{bname}"]
    return model
