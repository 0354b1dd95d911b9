"""Compact CNN classifiers built from a layer-list descriptor, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "gap", "dense")

CKPT_MAGIC = 0x464F4F4C  # "FOOL"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ArchError(ValueError):
    """Invalid descriptor; ``layer_index`` is the first failing layer (or None)."""

    def __init__(self, msg, layer_index=None):
        super().__init__(msg)
        self.layer_index = layer_index


class CheckpointError(ValueError):
    code = "checkpoint_error"


class BadMagic(CheckpointError):
    code = "bad_magic"


class VersionMismatch(CheckpointError):
    code = "version_mismatch"


class Truncated(CheckpointError):
    code = "truncated"


@dataclass
class ArchDescriptor:
    input_shape: tuple
    num_classes: int
    layers: list
    target_layers: list = field(default_factory=list)
    norm: dict | None = None

    def to_text(self) -> str:
        d = {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": self.layers,
            "target_layers": list(self.target_layers),
            "norm": self.norm,
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ArchDescriptor":
        d = json.loads(text)
        return cls(tuple(d["input_shape"]), int(d["num_classes"]), d["layers"],
                   list(d.get("target_layers", [])), d.get("norm"))


def smallnet(num_classes=10, input_shape=(1, 28, 28), widths=(16, 32, 64), bias=True) -> ArchDescriptor:
    """conv-relu-maxpool ×2, conv-relu, gap, dense; target layer is the last conv."""
    layers = []
    n = len(widths)
    for i, w in enumerate(widths, 1):
        layers.append({"kind": "conv", "name": f"conv{i}", "out": w, "kernel": 3, "stride": 1,
                       "pad": 1, "bias": bias})
        layers.append({"kind": "relu", "name": f"relu{i}"})
        if i < n:
            layers.append({"kind": "maxpool", "name": f"pool{i}", "size": 2})
    layers.append({"kind": "gap", "name": "gap"})
    layers.append({"kind": "dense", "name": "fc", "units": num_classes, "bias": bias})
    return ArchDescriptor(tuple(input_shape), num_classes, layers, [f"conv{n}"])


def _layer_name(layer, i):
    return layer.get("name") or f"{layer['kind']}{i}"


class Model:
    """Executable network. Parameters live outside, in a name -> Tensor dict."""

    def __init__(self, desc: ArchDescriptor):
        self.desc = desc
        self.layers = [dict(l, name=_layer_name(l, i)) for i, l in enumerate(desc.layers)]
        self.param_shapes: dict[str, tuple] = {}
        self.spatial_agnostic = True
        self._validate()

    def _validate(self):
        d = self.desc
        if len(d.input_shape) != 3:
            raise ArchError("input_shape must be (C, H, W)")
        shape = tuple(d.input_shape)
        names = set()
        seen_flatten = False
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            name = layer["name"]
            if name in names:
                raise ArchError(f"layer {i}: duplicate name {name!r}", i)
            names.add(name)
            if kind not in LAYER_KINDS:
                raise ArchError(f"layer {i}: unknown kind {kind!r}", i)
            if kind == "conv":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: conv needs a spatial input, got {shape}", i)
                k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("pad", 0)
                ho = (shape[1] + 2 * p - k) // s + 1
                wo = (shape[2] + 2 * p - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ArchError(f"layer {i}: conv kernel {k} too large for {shape}", i)
                self.param_shapes[f"{name}.weight"] = (layer["out"], shape[0], k, k)
                if layer.get("bias", True):
                    self.param_shapes[f"{name}.bias"] = (layer["out"],)
                shape = (layer["out"], ho, wo)
            elif kind in ("maxpool", "avgpool"):
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: pooling needs a spatial input", i)
                k = layer.get("size", 2)
                if shape[1] // k < 1 or shape[2] // k < 1:
                    raise ArchError(f"layer {i}: pool size {k} too large for {shape}", i)
                shape = (shape[0], shape[1] // k, shape[2] // k)
            elif kind == "gap":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: gap needs a spatial input", i)
                shape = (shape[0],)
            elif kind == "dense":
                fan_in = int(np.prod(shape))
                if len(shape) == 3:
                    seen_flatten = True
                self.param_shapes[f"{name}.weight"] = (fan_in, layer["units"])
                if layer.get("bias", True):
                    self.param_shapes[f"{name}.bias"] = (layer["units"],)
                shape = (layer["units"],)
        if shape != (d.num_classes,):
            raise ArchError(f"network output {shape} is not ({d.num_classes},) logits", len(self.layers) - 1)
        for t in d.target_layers:
            if t not in names:
                raise ArchError(f"target layer {t!r} does not exist")
        self.spatial_agnostic = not seen_flatten

    # -- execution ---------------------------------------------------------

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l["name"] == name:
                return i
        raise KeyError(f"unknown layer {name!r}")

    def check_input(self, x: Tensor):
        c, h, w = self.desc.input_shape
        if x.ndim != 4 or x.shape[1] != c:
            raise E.ShapeError(f"model input must be [N,{c},H,W], got {x.shape}")
        if not self.spatial_agnostic and x.shape[2:] != (h, w):
            raise E.ShapeError(f"model input must be [N,{c},{h},{w}], got {x.shape}")

    def run(self, params, x: Tensor) -> "ForwardResult":
        """Forward pass keeping every layer's input and output node.

        The activation recorded for a conv layer directly followed by a ReLU
        is the rectified output, i.e. the feature map A^k an interpreter sees.
        """
        self.check_input(x)
        trace = []
        acts = {}
        h = x
        for i, layer in enumerate(self.layers):
            kind, name = layer["kind"], layer["name"]
            inp = h
            h = _apply(layer, params, h)
            trace.append((layer, inp, h))
            acts[name] = h
            if kind == "relu" and i > 0 and self.layers[i - 1]["kind"] == "conv":
                acts[self.layers[i - 1]["name"]] = h
        return ForwardResult(h, trace, acts)

    def forward_from(self, params, name: str, a: Tensor) -> Tensor:
        """Continue the forward pass from the recorded activation of layer ``name``."""
        start = self.layer_index(name) + 1
        if start < len(self.layers) and self.layers[start]["kind"] == "relu" \
                and self.layers[start - 1]["kind"] == "conv":
            start += 1
        h = a
        for layer in self.layers[start:]:
            h = _apply(layer, params, h)
        return h


def _apply(layer, params, h):
    kind, name = layer["kind"], layer["name"]
    if kind == "conv":
        h = E.conv2d(h, params[f"{name}.weight"], layer.get("stride", 1), layer.get("pad", 0))
        if f"{name}.bias" in params:
            h = h + E.reshape(params[f"{name}.bias"], (1, -1, 1, 1))
    elif kind == "relu":
        h = E.relu(h)
    elif kind == "maxpool":
        h = E.maxpool2d(h, layer.get("size", 2))
    elif kind == "avgpool":
        h = E.avgpool2d(h, layer.get("size", 2))
    elif kind == "gap":
        h = E.global_avg_pool(h)
    elif kind == "dense":
        if h.ndim > 2:
            h = E.reshape(h, (h.shape[0], -1))
        h = E.matmul(h, params[f"{name}.weight"])
        if f"{name}.bias" in params:
            h = h + params[f"{name}.bias"]
    else:
        raise ArchError(f"no forward rule for layer {name!r} ({kind})")
    return h


@dataclass
class ForwardResult:
    logits: Tensor
    trace: list
    acts: dict


def build_model(desc: ArchDescriptor) -> Model:
    return Model(desc)


def init_params(model: Model, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """He-normal weights scaled by fan-in, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in model.param_shapes.items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(arr.astype(dtype), name=name)
    return params


def as_params(arrays: dict) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v), name=k) for k, v in arrays.items()}


def forward_logits(model: Model, params, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    return model.run(params, x).logits


def predict(model: Model, params, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Numeric logits for a stack of images, without keeping any graph."""
    out = []
    with E.no_record():
        for s in range(0, len(images), batch_size):
            out.append(forward_logits(model, params, images[s:s + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.desc.num_classes))


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params, desc: ArchDescriptor) -> bytes:
    text = desc.to_text().encode("utf-8")
    parts = [struct.pack("<III", CKPT_MAGIC, CKPT_VERSION, len(text)), text,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    def need(pos, n):
        if pos + n > len(buf):
            raise Truncated("truncated checkpoint")

    need(0, 4)
    (magic,) = struct.unpack_from("<I", buf, 0)
    if magic != CKPT_MAGIC:
        raise BadMagic(f"bad magic 0x{magic:08x}")
    need(4, 4)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"version mismatch: file {version}, supported {CKPT_VERSION}")
    need(8, 4)
    (tlen,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    need(pos, tlen)
    desc = ArchDescriptor.from_text(buf[pos:pos + tlen].decode("utf-8"))
    pos += tlen
    need(pos, 4)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        need(pos, 4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, nlen + 2)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        need(pos, 8 * ndim)
        dims = struct.unpack_from("<" + "Q" * ndim, buf, pos)
        pos += 8 * ndim
        dt = _CODE_DTYPES[code].newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(pos, nbytes)
        arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=pos)
        params[name] = arr.reshape(dims).astype(_CODE_DTYPES[code])
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return params, desc


def save_checkpoint(path, params, desc: ArchDescriptor) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(params, desc))


def load_checkpoint(path):
    """Return ``(params, desc)`` with params as a name -> Tensor dict."""
    with open(path, "rb") as f:
        arrays, desc = decode_checkpoint(f.read())
    return as_params(arrays), desc


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
