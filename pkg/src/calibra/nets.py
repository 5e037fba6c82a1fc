"""Network specs, parameter sets and forward passes.

Four roles share one representation: the source classifier (a sequential
conv/linear stack split into a feature extractor and a head), the residual
data calibrator, and the pixel/feature group discriminators.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ROLES = ("classifier", "calibrator", "pixel_disc", "feat_disc")
N_GROUPS = 4


class SpecError(ValueError):
    """A network spec or calibrator config is malformed."""


class FrozenParameterError(RuntimeError):
    """An optimizer tried to modify a frozen parameter set."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or truncated."""


class SpecMismatchError(ValueError):
    """A checkpoint was written for a different network spec."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | tanh | maxpool | flatten | linear
    width: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class CalibratorConfig:
    """Residual encoder/decoder calibrator.

    ``epsilon`` is the L-infinity budget in normalized pixel units; 0 makes the
    calibrator inert.  ``blocks`` residual blocks sit at the bottleneck.
    """

    epsilon: float = 0.05
    width: int = 4
    depth: int = 1
    blocks: int = 0
    skip: bool = True

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 2.0):
            raise SpecError(f"epsilon must lie in [0, 2], got {self.epsilon}")
        if self.width < 1 or self.depth < 0 or self.blocks < 0:
            raise SpecError("width must be >= 1; depth and blocks must be >= 0")


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...] = ()
    split_index: int | None = None
    calibrator: CalibratorConfig | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if any(d <= 0 for d in self.input_shape):
            raise SpecError(f"input shape must be positive, got {self.input_shape}")
        if self.role == "calibrator":
            if self.calibrator is None:
                raise SpecError("calibrator spec needs a CalibratorConfig")
            if len(self.input_shape) != 3:
                raise SpecError("calibrator input must be C x H x W")
            _, H, W = self.input_shape
            if H % (2 ** self.calibrator.depth) or W % (2 ** self.calibrator.depth):
                raise SpecError(f"image size {H}x{W} not divisible by 2**depth={2 ** self.calibrator.depth}")
        else:
            if not self.layers:
                raise SpecError(f"{self.role} spec has no layers")
            shapes = layer_shapes(self)
            if self.role == "classifier":
                if self.split_index is None or not (0 < self.split_index < len(self.layers)):
                    raise SpecError("classifier spec needs a split index inside the layer list")
                if len(shapes[self.split_index]) != 1:
                    raise SpecError("classifier features must be flat at the split index")
            elif shapes[-1] != (N_GROUPS,):
                raise SpecError(f"discriminator must output {N_GROUPS} logits, got {shapes[-1]}")

    def to_dict(self) -> dict:
        d = {
            "role": self.role,
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "split_index": self.split_index,
            "calibrator": asdict(self.calibrator) if self.calibrator else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            role=d["role"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            split_index=d.get("split_index"),
            calibrator=CalibratorConfig(**d["calibrator"]) if d.get("calibrator") else None,
        )

    def hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()

    @property
    def feature_dim(self) -> int:
        if self.role != "classifier":
            raise SpecError("only classifiers have a feature split")
        return layer_shapes(self)[self.split_index][0]

    @property
    def n_classes(self) -> int:
        return layer_shapes(self)[-1][0]


def layer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-sample shape entering each layer, plus the final output shape."""
    shape = spec.input_shape
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if k == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv needs C x H x W input, got {shape}")
            c, h, w = shape
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if layer.width < 1 or layer.kernel < 1 or ho < 1 or wo < 1:
                raise SpecError(f"layer {i}: conv {layer} does not fit input {shape}")
            shape = (layer.width, ho, wo)
        elif k == "maxpool":
            if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                raise SpecError(f"layer {i}: maxpool {layer.kernel} does not fit {shape}")
            shape = (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "linear":
            if len(shape) != 1 or layer.width < 1:
                raise SpecError(f"layer {i}: linear needs flat input, got {shape}")
            shape = (layer.width,)
        elif k not in ("relu", "tanh"):
            raise SpecError(f"layer {i}: unknown kind {k!r}")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# parameter sets

@dataclass
class ParameterSet:
    """Named learnable tensors of one network.

    A frozen set has every tensor detached from autodiff and refuses optimizer
    updates (see :func:`calibra.optim.adam_step`).
    """

    spec: NetworkSpec
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def freeze(self) -> "ParameterSet":
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
        return self

    def frozen_view(self) -> "ParameterSet":
        """Read-only view sharing storage; updates to ``self`` show through."""
        view = OrderedDict((n, Tensor(t.data)) for n, t in self.tensors.items())
        return ParameterSet(self.spec, view, frozen=True)

    def copy(self) -> "ParameterSet":
        out = OrderedDict(
            (n, Tensor(t.data.copy(), requires_grad=not self.frozen)) for n, t in self.tensors.items()
        )
        return ParameterSet(self.spec, out, frozen=self.frozen)

    def load_values(self, other: "ParameterSet") -> None:
        for name, t in self.tensors.items():
            t.data[...] = other[name].data

    def digest(self) -> str:
        """SHA-256 over names and raw values; equal digests mean bit-identical weights."""
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def count_parameters(params: ParameterSet | None) -> int:
    if params is None:
        return 0
    return int(sum(t.size for t in params.values()))


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_sequential(spec: NetworkSpec, seed: int, zero_last: bool = False) -> ParameterSet:
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(spec)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    learnable = [i for i, layer in enumerate(spec.layers) if layer.kind in ("conv", "linear")]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c = shapes[i][0]
            shape = (layer.width, c, layer.kernel, layer.kernel)
            fan_in = c * layer.kernel * layer.kernel
        elif layer.kind == "linear":
            shape = (layer.width, shapes[i][0])
            fan_in = shapes[i][0]
        else:
            continue
        if zero_last and i == learnable[-1]:
            w = np.zeros(shape)
        else:
            w = _he_uniform(rng, shape, fan_in)
        tensors[f"{layer.kind}{i}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{layer.kind}{i}.bias"] = Tensor(np.zeros(layer.width), requires_grad=True)
    return ParameterSet(spec, tensors)


def build_classifier(spec: NetworkSpec, seed: int = 0) -> ParameterSet:
    if spec.role != "classifier":
        raise SpecError(f"expected a classifier spec, got role {spec.role!r}")
    return _init_sequential(spec, seed)


def build_discriminator(kind: str, input_dim: int, seed: int = 0, hidden: int = 64,
                        zero_init: bool = False) -> ParameterSet:
    """Two fully connected layers producing one logit per group."""
    if kind not in ("pixel", "feature"):
        raise SpecError(f"discriminator kind must be 'pixel' or 'feature', got {kind!r}")
    if input_dim < 1 or hidden < 1:
        raise SpecError("discriminator input_dim and hidden must be positive")
    spec = NetworkSpec(
        role="pixel_disc" if kind == "pixel" else "feat_disc",
        input_shape=(input_dim,),
        layers=(LayerSpec("linear", hidden), LayerSpec("relu"), LayerSpec("linear", N_GROUPS)),
    )
    return _init_sequential(spec, seed, zero_last=zero_init)


def calibrator_spec(cfg: CalibratorConfig, input_shape: tuple[int, int, int]) -> NetworkSpec:
    return NetworkSpec(role="calibrator", input_shape=tuple(input_shape), calibrator=cfg)


def _calibrator_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    cfg = spec.calibrator
    c_in = spec.input_shape[0]
    w = cfg.width
    out = [("stem", (w, c_in, 3, 3))]
    for i in range(cfg.depth):
        out.append((f"down{i}", (w * 2 ** (i + 1), w * 2 ** i, 3, 3)))
    cb = w * 2 ** cfg.depth
    for b in range(cfg.blocks):
        out.append((f"res{b}a", (cb, cb, 3, 3)))
        out.append((f"res{b}b", (cb, cb, 3, 3)))
    for i in reversed(range(cfg.depth)):
        out.append((f"up{i}", (w * 2 ** i, w * 2 ** (i + 1), 3, 3)))
    out.append(("head", (c_in, w, 3, 3)))
    return out


def build_calibrator(cfg: CalibratorConfig, input_shape: tuple[int, int, int], seed: int = 0) -> ParameterSet:
    """Encoder/decoder calibrator whose final conv starts at zero (identity map)."""
    spec = calibrator_spec(cfg, input_shape)
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _calibrator_shapes(spec):
        fan_in = shape[1] * shape[2] * shape[3]
        w = np.zeros(shape) if name == "head" else _he_uniform(rng, shape, fan_in)
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return ParameterSet(spec, tensors)


# ---------------------------------------------------------------------------
# forward passes

def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _run_layers(params: ParameterSet, x: Tensor, start: int, stop: int) -> Tensor:
    for i in range(start, stop):
        layer = params.spec.layers[i]
        k = layer.kind
        if k == "conv":
            x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                         stride=layer.stride, padding=layer.padding)
        elif k == "linear":
            x = T.linear(x, params[f"linear{i}.weight"], params[f"linear{i}.bias"])
        elif k == "relu":
            x = T.relu(x)
        elif k == "tanh":
            x = T.tanh(x)
        elif k == "maxpool":
            x = T.max_pool2d(x, layer.kernel)
        elif k == "flatten":
            x = T.flatten(x)
    return x


def _check_input(params: ParameterSet, x: Tensor, shape: tuple[int, ...]) -> None:
    if x.shape[1:] != shape:
        raise ShapeError(f"{params.spec.role} expects inputs of shape (B, {', '.join(map(str, shape))}), got {x.shape}")


def features(params: ParameterSet, x) -> Tensor:
    """Flattened activations entering the classifier head."""
    x = _as_input(x)
    _check_input(params, x, params.spec.input_shape)
    return _run_layers(params, x, 0, params.spec.split_index)


def head(params: ParameterSet, feats) -> Tensor:
    feats = _as_input(feats)
    return _run_layers(params, feats, params.spec.split_index, len(params.spec.layers))


def logits(params: ParameterSet, x) -> Tensor:
    return head(params, features(params, x))


def discriminate(params: ParameterSet, x) -> Tensor:
    """Group logits (B x 4) of a pixel or feature discriminator."""
    x = _as_input(x)
    _check_input(params, x, params.spec.input_shape)
    return _run_layers(params, x, 0, len(params.spec.layers))


def raw_residual(params: ParameterSet, x) -> Tensor:
    """Unbounded residual the calibrator squashes into its L-infinity ball."""
    x = _as_input(x)
    spec = params.spec
    if spec.role != "calibrator":
        raise SpecError(f"expected calibrator parameters, got role {spec.role!r}")
    _check_input(params, x, spec.input_shape)
    cfg = spec.calibrator

    def conv(h, name, stride=1):
        return T.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)

    h = T.relu(conv(x, "stem"))
    skips = [h]
    for i in range(cfg.depth):
        h = T.relu(conv(h, f"down{i}", stride=2))
        skips.append(h)
    for b in range(cfg.blocks):
        h = T.add(h, conv(T.relu(conv(h, f"res{b}a")), f"res{b}b"))
    for i in reversed(range(cfg.depth)):
        h = T.upsample_nearest2x(T.relu(conv(h, f"up{i}")))
        if cfg.skip:
            h = T.add(h, skips[i])
    return conv(h, "head")


def calibrate(params: ParameterSet, x, epsilon: float | None = None) -> Tensor:
    """``clip(x + epsilon * tanh(residual(x)), -1, 1)``.

    ``epsilon`` defaults to the budget stored in the calibrator config.
    """
    if epsilon is None:
        epsilon = params.spec.calibrator.epsilon
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    x = _as_input(x)
    r = T.tanh(raw_residual(params, x))
    return T.clip(T.add(x, T.scalar_mul(r, epsilon)), -1.0, 1.0)


# ---------------------------------------------------------------------------
# reference specs

def desk_classifier_spec(input_shape=(1, 28, 28), n_classes: int = 10,
                         widths=(8, 16), hidden: int = 512) -> NetworkSpec:
    """Two conv+pool stages and two linear layers; features tap the flatten output."""
    c1, c2 = widths
    layers = (
        LayerSpec("conv", c1, 5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2),
        LayerSpec("conv", c2, 5), LayerSpec("relu"), LayerSpec("maxpool", kernel=2),
        LayerSpec("flatten"),
        LayerSpec("linear", hidden), LayerSpec("relu"), LayerSpec("linear", n_classes),
    )
    return NetworkSpec("classifier", input_shape, layers, split_index=7)


def reference_digits_classifier_spec() -> NetworkSpec:
    """LeNet-class classifier on 3x32x32 digits sized to roughly 3.1M parameters."""
    return desk_classifier_spec((3, 32, 32), 10, widths=(64, 128), hidden=900)


REFERENCE_DIGITS_CALIBRATOR = CalibratorConfig(epsilon=0.05, width=15, depth=2, blocks=2)
REFERENCE_SEGMENTATION_CALIBRATOR = CalibratorConfig(epsilon=0.01, width=8, depth=2, blocks=2)
# deployed segmentation model size; the model itself is not built here
REFERENCE_SEGMENTATION_MODEL_PARAMS = 20_600_000


# ---------------------------------------------------------------------------
# checkpoints: b"CALC", u32 version, u32 role len, role, 32-byte spec hash,
# u32 spec-json len, spec json, u8 frozen, u32 count, then (u32 name len, name, tensor)*

CKPT_MAGIC = b"CALC"
CKPT_VERSION = 1


def encode_checkpoint(params: ParameterSet) -> bytes:
    role = params.spec.role.encode()
    spec_json = json.dumps(params.spec.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(role)), role, params.spec.hash(),
             struct.pack("<I", len(spec_json)), spec_json,
             struct.pack("<BI", int(params.frozen), len(params))]
    for name, t in params.items():
        b = name.encode()
        parts += [struct.pack("<I", len(b)), b, T.encode_tensor(t)]
    return b"".join(parts)


def decode_checkpoint(buf: bytes, spec: NetworkSpec | None = None) -> ParameterSet:
    try:
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError("not a calibra checkpoint (bad magic)")
        version, rlen = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        role = buf[pos:pos + rlen].decode()
        pos += rlen
        digest = buf[pos:pos + 32]
        pos += 32
        (slen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        stored = NetworkSpec.from_dict(json.loads(buf[pos:pos + slen].decode()))
        pos += slen
        frozen, count = struct.unpack_from("<BI", buf, pos)
        pos += 5
        tensors: OrderedDict[str, Tensor] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            t, pos = T.decode_tensor(buf, pos)
            t.requires_grad = not frozen
            tensors[name] = t
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, T.TensorFormatError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    if stored.hash() != digest or stored.role != role:
        raise CheckpointError("corrupt checkpoint: header does not match embedded spec")
    if spec is not None and spec.hash() != digest:
        raise SpecMismatchError(f"checkpoint was written for a different {role} spec")
    return ParameterSet(stored, tensors, frozen=bool(frozen))


def save_checkpoint(params: ParameterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path, spec: NetworkSpec | None = None) -> ParameterSet:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), spec)
