"""Small convolutional classifiers with a unified pool-and-project head.

Three desk-scale families are provided as presets: a plain conv stack
("vgg-small"), a residual network ("resnet-small"), and a parallel
multi-kernel network ("inception-small"). Every variant ends in adaptive
average pooling followed by one fully connected layer, so any spatial input
size that survives the pooling stages is accepted.

Checkpoint format: magic ``HYPN``, format version (u32 little-endian),
length-prefixed JSON architecture config (u32 length + UTF-8 bytes), then
the parameter blob as little-endian float32 in the documented name order
(the order reported by ``param_spec``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CheckpointCorruptError, CheckpointFormatError, ConfigError, InputError
from .tensor import Tensor

_MAGIC = b"HYPN"
_VERSION = 1

_KINDS = ("plain", "residual", "inception")


@dataclass(frozen=True)
class Block:
    """One stage of the network.

    kind: "plain" (convs 3x3 stack), "residual" (two 3x3 convs on a skip
    path, 1x1 projection added only when the width changes), or "inception"
    (parallel 1x1/3x3/5x5/pooled-1x1 branches, each channels//4 wide).
    ``pool`` appends a max pool of that kernel/stride after the stage
    (1 disables it; booleans are accepted as 2/1).
    """

    kind: str
    channels: int
    convs: int = 2  # plain stacks only
    pool: int = 2


def _pool_size(blk: Block) -> int:
    if blk.pool is True:
        return 2
    if blk.pool is False:
        return 1
    return int(blk.pool)


@dataclass(frozen=True)
class ArchitectureConfig:
    name: str = "custom"
    input_shape: tuple = (1, 32, 32)
    blocks: tuple = ()
    num_classes: int = 10

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "blocks": [
                    {"kind": b.kind, "channels": b.channels, "convs": b.convs, "pool": _pool_size(b)}
                    for b in self.blocks
                ],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureConfig":
        try:
            raw = json.loads(text)
            blocks = tuple(
                Block(b["kind"], int(b["channels"]), int(b["convs"]), int(b["pool"]))
                for b in raw["blocks"]
            )
            return cls(
                name=raw["name"],
                input_shape=tuple(raw["input_shape"]),
                blocks=blocks,
                num_classes=int(raw["num_classes"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CheckpointCorruptError(f"unreadable architecture config: {exc}") from None


def preset(name: str, input_shape=(1, 32, 32), num_classes: int = 10) -> ArchitectureConfig:
    """Named desk-scale architectures (each well under 300k parameters)."""
    if name == "vgg-small":
        blocks = (Block("plain", 16, convs=1, pool=4), Block("plain", 32, convs=1, pool=4),
                  Block("plain", 128, convs=1, pool=2))
    elif name == "resnet-small":
        blocks = (Block("plain", 16, convs=1, pool=4), Block("residual", 32, pool=4),
                  Block("residual", 128, pool=2))
    elif name == "inception-small":
        blocks = (Block("plain", 16, convs=1, pool=4), Block("inception", 32, pool=4),
                  Block("inception", 128, pool=2))
    else:
        raise ConfigError(f"unknown architecture preset {name!r}")
    return ArchitectureConfig(name=name, input_shape=input_shape, blocks=blocks, num_classes=num_classes)


def param_spec(config: ArchitectureConfig):
    """Flat parameter layout: list of (name, shape, fan_in) in storage order.

    Also validates the config; raises ConfigError naming the offending block.
    """
    if len(config.input_shape) != 3 or any(int(d) < 1 for d in config.input_shape):
        raise ConfigError(f"input shape must be (C,H,W) positive, got {config.input_shape}")
    if config.num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {config.num_classes}")
    spec = []
    c, h, w = config.input_shape
    for i, blk in enumerate(config.blocks):
        p = f"block{i}"
        if blk.channels < 1:
            raise ConfigError(f"block {i}: channels must be positive, got {blk.channels}")
        if blk.kind == "plain":
            if blk.convs < 1:
                raise ConfigError(f"block {i}: plain stack needs >= 1 convs")
            cin = c
            for j in range(blk.convs):
                spec.append((f"{p}.conv{j}.weight", (blk.channels, cin, 3, 3), cin * 9))
                spec.append((f"{p}.conv{j}.bias", (blk.channels,), cin * 9))
                cin = blk.channels
        elif blk.kind == "residual":
            if c != blk.channels:
                spec.append((f"{p}.proj.weight", (blk.channels, c, 1, 1), c))
                spec.append((f"{p}.proj.bias", (blk.channels,), c))
            spec.append((f"{p}.conv0.weight", (blk.channels, c, 3, 3), c * 9))
            spec.append((f"{p}.conv0.bias", (blk.channels,), c * 9))
            spec.append((f"{p}.conv1.weight", (blk.channels, blk.channels, 3, 3), blk.channels * 9))
            spec.append((f"{p}.conv1.bias", (blk.channels,), blk.channels * 9))
        elif blk.kind == "inception":
            if blk.channels % 4:
                raise ConfigError(f"block {i}: inception channels must be divisible by 4, got {blk.channels}")
            width = blk.channels // 4
            for bname, k in (("b1", 1), ("b3", 3), ("b5", 5), ("bp", 1)):
                spec.append((f"{p}.{bname}.weight", (width, c, k, k), c * k * k))
                spec.append((f"{p}.{bname}.bias", (width,), c * k * k))
        else:
            raise ConfigError(f"block {i}: unknown kind {blk.kind!r} (expected one of {_KINDS})")
        c = blk.channels
        k = _pool_size(blk)
        if k > 1:
            h, w = h // k, w // k
            if h < 1 or w < 1:
                raise ConfigError(f"block {i}: pooling exhausts the {config.input_shape[1:]} spatial extent")
    spec.append(("head.weight", (c, config.num_classes), c))
    spec.append(("head.bias", (config.num_classes,), c))
    return spec


def parameter_count(config: ArchitectureConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_spec(config))


class Classifier:
    """A configured network plus its named parameter tensors."""

    def __init__(self, config: ArchitectureConfig, params: dict):
        expected = parameter_count(config)
        actual = sum(t.data.size for t in params.values())
        if actual != expected:
            raise ConfigError(f"parameter count {actual} does not match config ({expected})")
        self.config = config
        self.params = params
        self.training = False

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def parameters(self):
        return list(self.params.values())

    def state_blob(self) -> bytes:
        """Parameters as little-endian float32 bytes in storage order."""
        parts = [
            self.params[name].data.astype("<f4", copy=False).tobytes()
            for name, _, _ in param_spec(self.config)
        ]
        return b"".join(parts)


def build_classifier(config: ArchitectureConfig, rng: np.random.Generator, dtype=np.float32) -> Classifier:
    """Fan-in-scaled uniform init: each tensor ~ U(-a, a), a = sqrt(6/fan_in).

    Draw order equals storage order, so equal seeds give bit-identical
    parameters.
    """
    params = {}
    for name, shape, fan_in in param_spec(config):
        a = float(np.sqrt(6.0 / fan_in))
        params[name] = Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)
    return Classifier(config, params)


def forward(classifier: Classifier, batch: Tensor) -> Tensor:
    """Logits [N, num_classes]; differentiable w.r.t. parameters and batch."""
    cfg = classifier.config
    if batch.data.ndim != 4 or batch.data.shape[1:] != tuple(cfg.input_shape):
        raise InputError(
            f"batch shape {batch.data.shape} does not match input shape {tuple(cfg.input_shape)}"
        )
    return forward_tail(classifier, T.cast(batch, classifier.dtype), 0)


def forward_tail(classifier: Classifier, x: Tensor, from_block: int) -> Tensor:
    """Logits from an intermediate activation: applies blocks[from_block:]
    and the classification head. ``x`` must already have the channel count
    the target block expects."""
    cfg = classifier.config
    p = classifier.params
    for i, blk in list(enumerate(cfg.blocks))[from_block:]:
        pre = f"block{i}"
        if blk.kind == "plain":
            for j in range(blk.convs):
                x = T.relu(T.conv2d(x, p[f"{pre}.conv{j}.weight"], p[f"{pre}.conv{j}.bias"], padding=1))
        elif blk.kind == "residual":
            if f"{pre}.proj.weight" in p:
                skip = T.conv2d(x, p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"])
            else:
                skip = x
            r = T.relu(T.conv2d(x, p[f"{pre}.conv0.weight"], p[f"{pre}.conv0.bias"], padding=1))
            r = T.conv2d(r, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], padding=1)
            x = T.relu(skip + r)
        else:  # inception
            b1 = T.relu(T.conv2d(x, p[f"{pre}.b1.weight"], p[f"{pre}.b1.bias"]))
            b3 = T.relu(T.conv2d(x, p[f"{pre}.b3.weight"], p[f"{pre}.b3.bias"], padding=1))
            b5 = T.relu(T.conv2d(x, p[f"{pre}.b5.weight"], p[f"{pre}.b5.bias"], padding=2))
            bp = T.relu(T.conv2d(T.maxpool2d(x, 3, stride=1, padding=1), p[f"{pre}.bp.weight"], p[f"{pre}.bp.bias"]))
            x = T.concat([b1, b3, b5, bp], axis=1)
        k = _pool_size(blk)
        if k > 1:
            x = T.maxpool2d(x, k)
    return T.linear(T.global_avg_pool(x), p["head.weight"], p["head.bias"])


def predict(classifier: Classifier, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax labels for an image array [N,C,H,W]; no graph is recorded."""
    out = np.empty(len(images), dtype=np.int64)
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            logits = forward(classifier, Tensor(images[lo:lo + batch_size]))
            out[lo:lo + batch_size] = logits.data.argmax(axis=1)
    return out


def save_checkpoint(classifier: Classifier, path) -> None:
    """Write magic/version/config/f32-blob; parameters are stored as float32."""
    cfg_bytes = classifier.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(_VERSION).tobytes())
        fh.write(np.uint32(len(cfg_bytes)).tobytes())
        fh.write(cfg_bytes)
        fh.write(classifier.state_blob())


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointCorruptError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    cfg_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if len(raw) < 12 + cfg_len:
        raise CheckpointCorruptError(f"{path}: truncated architecture config")
    config = ArchitectureConfig.from_json(raw[12:12 + cfg_len].decode("utf-8", errors="replace"))
    blob = raw[12 + cfg_len:]
    spec = param_spec(config)
    expected = sum(int(np.prod(shape)) for _, shape, _ in spec) * 4
    if len(blob) != expected:
        raise CheckpointCorruptError(f"{path}: parameter blob is {len(blob)} bytes, expected {expected}")
    params, offset = {}, 0
    for name, shape, _ in spec:
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset:offset + n], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += n
    return Classifier(config, params)
