"""Dataset loading, 32x32 resampling, backdoor poisoning, and splits.

Supported sources:

* IDX files (the MNIST container): big-endian magic 0x00000803 for image
  tensors and 0x00000801 for label vectors, optionally gzip-compressed
  (sniffed from the 0x1f8b prefix). Images of any spatial size are
  bilinearly resampled to 32x32 and scaled to [0,1].
* A builtin synthetic glyph set: ten procedurally drawn shape classes with
  per-sample jitter, rendered at 28x28 and pushed through the same resample
  path. It needs no downloads, and its labels are exact by construction.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .tensor import Tensor

IMAGE_SIZE = 32
NUM_CLASSES = 10
MAX_TRIGGER_DIM = 12

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledSample:
    image: np.ndarray  # [C, 32, 32] float32 in [0,1]
    label: int


@dataclass(frozen=True)
class SplitSpec:
    learn: int
    inference: int
    auxiliary: int
    normative_per_class: int = 10
    unlearning_per_class: int = 10


@dataclass(frozen=True)
class Splits:
    learn: list
    inference: list
    auxiliary: list
    normative: list
    unlearning: list


class TriggerSpec:
    """A patch, its binary placement mask, and the attacker's target class.

    The mask is 1 exactly on the patch rectangle at ``origin`` (row, col).
    """

    def __init__(self, patch: np.ndarray, origin: tuple, target_class: int,
                 image_shape: tuple = (1, IMAGE_SIZE, IMAGE_SIZE), max_dim: int = MAX_TRIGGER_DIM):
        patch = np.asarray(patch, dtype=np.float32)
        if patch.ndim != 3 or patch.shape[0] != image_shape[0]:
            raise InputError(f"patch shape {patch.shape} incompatible with image shape {image_shape}")
        c, ph, pw = patch.shape
        if ph > max_dim or pw > max_dim:
            raise InputError(f"patch {ph}x{pw} exceeds maximum trigger dimension {max_dim}")
        if patch.size and (patch.min() < 0 or patch.max() > 1):
            raise InputError("patch pixels must lie in [0,1]")
        r, col = int(origin[0]), int(origin[1])
        if r < 0 or col < 0 or r + ph > image_shape[1] or col + pw > image_shape[2]:
            raise InputError(f"patch at {origin} with size {ph}x{pw} leaves the {image_shape[1:]} canvas")
        mask = np.zeros((1,) + tuple(image_shape[1:]), dtype=np.float32)
        mask[0, r:r + ph, col:col + pw] = 1.0
        self.patch = patch
        self.mask = mask
        self.origin = (r, col)
        self.target_class = int(target_class)
        self.image_shape = tuple(image_shape)

    @property
    def center(self) -> tuple:
        return (self.origin[0] + self.patch.shape[1] // 2, self.origin[1] + self.patch.shape[2] // 2)


def default_trigger(image_shape=(1, IMAGE_SIZE, IMAGE_SIZE), target_class: int = 0) -> TriggerSpec:
    """4x4 solid white square in the bottom-right corner."""
    c = image_shape[0]
    size = 4
    origin = (image_shape[1] - size, image_shape[2] - size)
    return TriggerSpec(np.ones((c, size, size), dtype=np.float32), origin, target_class, image_shape)


def checkerboard_trigger(image_shape=(1, IMAGE_SIZE, IMAGE_SIZE), target_class: int = 0) -> TriggerSpec:
    """4x4 checkerboard in the top-left corner; used for surrogate infection."""
    c = image_shape[0]
    tile = np.indices((4, 4)).sum(axis=0) % 2
    patch = np.broadcast_to(tile.astype(np.float32), (c, 4, 4)).copy()
    return TriggerSpec(patch, (0, 0), target_class, image_shape)


def apply_trigger(image: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """(1 - mask) * image + mask * placed patch; untouched pixels bit-identical."""
    if image.shape != trig.image_shape:
        raise InputError(f"image shape {image.shape} does not match trigger canvas {trig.image_shape}")
    out = image.copy()
    r, c = trig.origin
    _, ph, pw = trig.patch.shape
    out[:, r:r + ph, c:c + pw] = trig.patch
    return out


def poison_dataset(samples: list, trig: TriggerSpec, rate: float, rng: np.random.Generator) -> list:
    """Relabel and stamp a uniformly chosen round(rate*N) subset; all-to-one."""
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"poison rate must be in [0,1], got {rate}")
    n = len(samples)
    k = int(np.rint(rate * n))
    chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    out = []
    for i, s in enumerate(samples):
        if i in chosen:
            out.append(LabeledSample(apply_trigger(s.image, trig), trig.target_class))
        else:
            out.append(s)
    return out


def draw_per_class_subset(samples: list, n_per_class: int, rng: np.random.Generator,
                          num_classes: int = NUM_CLASSES) -> list:
    """Exactly n_per_class members of each class, in ascending class order."""
    if n_per_class < 0:
        raise InputError(f"n_per_class must be >= 0, got {n_per_class}")
    by_class = {c: [] for c in range(num_classes)}
    for i, s in enumerate(samples):
        by_class[s.label].append(i)
    out = []
    for c in range(num_classes):
        pool = by_class[c]
        if len(pool) < n_per_class:
            raise InputError(f"class {c} has only {len(pool)} samples, need {n_per_class}")
        idx = rng.choice(len(pool), size=n_per_class, replace=False)
        out.extend(samples[pool[j]] for j in sorted(idx.tolist()))
    return out


def split_dataset(samples: list, spec: SplitSpec, rng: np.random.Generator) -> Splits:
    """Disjoint learn/inference/auxiliary partition; normative and unlearning
    subsets are drawn from auxiliary and may overlap each other."""
    total = spec.learn + spec.inference + spec.auxiliary
    if total > len(samples):
        raise InputError(f"splits need {total} samples but only {len(samples)} available")
    order = rng.permutation(len(samples))
    learn = [samples[i] for i in order[:spec.learn]]
    inference = [samples[i] for i in order[spec.learn:spec.learn + spec.inference]]
    auxiliary = [samples[i] for i in order[spec.learn + spec.inference:total]]
    normative = draw_per_class_subset(auxiliary, spec.normative_per_class, rng)
    unlearning = draw_per_class_subset(auxiliary, spec.unlearning_per_class, rng)
    return Splits(learn, inference, auxiliary, normative, unlearning)


def stack(samples: list):
    """(images [N,C,32,32] float32, labels [N] int64) views of a sample list."""
    images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


def label_histogram(samples: list, num_classes: int = NUM_CLASSES) -> np.ndarray:
    return np.bincount([s.label for s in samples], minlength=num_classes)


# ------------------------------------------------------------------ IDX files


def _read_idx_payload(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise InputError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(raw: bytes, path) -> tuple:
    if len(raw) < 4:
        raise InputError(f"{path}: too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic == _IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == _IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise InputError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise InputError(f"{path}: truncated IDX dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise InputError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return magic, data


def read_idx_images(path) -> np.ndarray:
    magic, data = _parse_idx(_read_idx_payload(path), path)
    if magic != _IDX_IMAGES_MAGIC:
        raise InputError(f"{path}: expected an IDX image file, found labels")
    return data  # [N, H, W] uint8


def read_idx_labels(path, num_classes: int = NUM_CLASSES) -> np.ndarray:
    magic, data = _parse_idx(_read_idx_payload(path), path)
    if magic != _IDX_LABELS_MAGIC:
        raise InputError(f"{path}: expected an IDX label file, found images")
    if data.size and int(data.max()) >= num_classes:
        raise InputError(f"{path}: label {int(data.max())} out of range [0, {num_classes})")
    return data.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of read_idx_images, for fixtures and round-trip tests."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_IDX_IMAGES_MAGIC.to_bytes(4, "big"))
        for d in (n, h, w):
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(_IDX_LABELS_MAGIC.to_bytes(4, "big"))
        fh.write(int(labels.shape[0]).to_bytes(4, "big"))
        fh.write(labels.tobytes())


def resample_to_canvas(images: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """[N,H,W] or [N,C,H,W] floats -> [N,C,size,size] float32 in [0,1]."""
    if images.ndim == 3:
        images = images[:, None]
    out = T.resample_bilinear(Tensor(images.astype(np.float32)), size, size).data
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------- synthetic glyph set

# Each class is a distinct stroke pattern on a [-1,1]^2 canvas.
_GLYPH_NAMES = ("ring", "vbar", "hbar", "plus", "cross", "box", "disk", "slash", "tee", "ell")


def _glyph_field(cls: int, xx: np.ndarray, yy: np.ndarray, thick: float) -> np.ndarray:
    """Signed distance to the class stroke; <= 0 means inside the stroke."""
    rr = np.sqrt(xx * xx + yy * yy)
    inside_v = np.maximum(np.abs(xx) - thick, np.abs(yy) - 0.7)
    inside_h = np.maximum(np.abs(yy) - thick, np.abs(xx) - 0.7)
    if cls == 0:
        return np.abs(rr - 0.55) - thick
    if cls == 1:
        return inside_v
    if cls == 2:
        return inside_h
    if cls == 3:
        return np.minimum(inside_v, inside_h)
    if cls == 4:
        d1 = np.maximum(np.abs(xx - yy) / np.sqrt(2) - thick, np.maximum(np.abs(xx), np.abs(yy)) - 0.7)
        d2 = np.maximum(np.abs(xx + yy) / np.sqrt(2) - thick, np.maximum(np.abs(xx), np.abs(yy)) - 0.7)
        return np.minimum(d1, d2)
    if cls == 5:
        return np.abs(np.maximum(np.abs(xx), np.abs(yy)) - 0.55) - thick
    if cls == 6:
        return rr - 0.5
    if cls == 7:
        return np.maximum(np.abs(xx + yy) / np.sqrt(2) - thick, np.maximum(np.abs(xx), np.abs(yy)) - 0.7)
    if cls == 8:
        top = np.maximum(np.abs(yy + 0.5) - thick, np.abs(xx) - 0.6)
        return np.minimum(top, inside_v)
    if cls == 9:
        left = np.maximum(np.abs(xx + 0.5) - thick, np.abs(yy) - 0.6)
        bottom = np.maximum(np.abs(yy - 0.5) - thick, np.abs(xx) - 0.6)
        return np.minimum(left, bottom)
    raise InputError(f"glyph class {cls} out of range [0, {len(_GLYPH_NAMES)})")


def _render_glyph(cls: int, rng: np.random.Generator, grid: int = 28) -> np.ndarray:
    """One jittered 28x28 glyph: translation, scale, stroke width, intensity,
    plus faint background noise so images are not mostly exact zeros."""
    coords = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = rng.uniform(-0.1, 0.1, size=2)
    scale = rng.uniform(0.9, 1.1)
    thick = rng.uniform(0.11, 0.15)
    sx = (xx - dx) / scale
    sy = (yy - dy) / scale
    field = _glyph_field(cls, sx, sy, thick)
    soft = 2.0 / grid  # one-pixel anti-aliasing band
    stroke = np.clip(-field / soft + 0.5, 0.0, 1.0)
    intensity = rng.uniform(0.85, 1.0)
    noise = rng.uniform(0.0, 0.05, size=(grid, grid))
    return np.clip(stroke * intensity + (1.0 - stroke) * noise, 0.0, 1.0).astype(np.float32)


def synthesize_dataset(seed: int, n: int, num_classes: int = NUM_CLASSES) -> list:
    """n glyph samples with balanced classes (class i gets ceil-or-floor share),
    resampled to the 32x32 canvas. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    raw = np.empty((n, 28, 28), dtype=np.float32)
    for i, cls in enumerate(labels):
        raw[i] = _render_glyph(int(cls), rng)
    images = resample_to_canvas(raw)
    order = rng.permutation(n)
    return [LabeledSample(images[i], int(labels[i])) for i in order]


def load_dataset(source, fmt: str, *, labels_path=None, seed: int = 0, n: int = 100) -> list:
    """Load samples from an IDX image/label pair or the builtin synthetic set.

    For fmt="idx", ``source`` is the image file; the label file is either
    ``labels_path`` or derived by the MNIST naming convention
    (images->labels, idx3->idx1).
    """
    if fmt == "builtin-synthetic":
        return synthesize_dataset(seed, n)
    if fmt != "idx":
        raise InputError(f"unknown dataset format {fmt!r}")
    source = str(source)
    if labels_path is None:
        labels_path = source.replace("images", "labels").replace("idx3", "idx1")
        if labels_path == source:
            raise InputError(f"cannot derive a label path from {source!r}; pass labels_path")
    images = read_idx_images(source)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise InputError(f"{len(images)} images but {len(labels)} labels")
    scaled = resample_to_canvas(images.astype(np.float32) / 255.0)
    return [LabeledSample(scaled[i], int(labels[i])) for i in range(len(scaled))]
