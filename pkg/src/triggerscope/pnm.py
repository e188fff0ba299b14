"""Portable graymap/pixmap (binary P5/P6) reading and writing.

Images travel as [C, H, W] float arrays in [0, 1]; one channel maps to P5,
three channels to P6. Files are written with maxval 65535 (16-bit big-endian
samples) so a quantize/round-trip stays within half a step (~7.6e-6) of the
original float values. The reader accepts any maxval up to 65535 and
whitespace/comment layouts the Netpbm grammar allows.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError

MAXVAL = 65535


def write_pnm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise InputError(f"expected [1|3, H, W] image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise InputError("pixel values must be finite and in [0, 1]")
    c, h, w = image.shape
    magic = b"P5" if c == 1 else b"P6"
    quantized = np.rint(image.astype(np.float64) * MAXVAL).astype(">u2")
    # P6 interleaves channels per pixel: [H, W, C]
    payload = (quantized[0] if c == 1 else quantized.transpose(1, 2, 0)).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, MAXVAL))
        fh.write(payload)


def _read_tokens(data: bytes, count: int):
    """First `count` whitespace-separated header tokens after the magic,
    skipping '#' comments; returns (tokens, payload offset)."""
    tokens = []
    i = 2  # past the magic
    while len(tokens) < count:
        if i >= len(data):
            raise InputError("truncated header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data) or not data[i:i + 1].isspace():
        raise InputError("missing whitespace after maxval")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """[C, H, W] float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _read_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise InputError(f"{path}: non-numeric header fields {tokens}") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= MAXVAL:
        raise InputError(f"{path}: bad dimensions or maxval ({w}x{h}, {maxval})")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * channels * dtype.itemsize
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise InputError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dtype).astype(np.float32) / maxval
    if channels == 1:
        return flat.reshape(1, h, w)
    return flat.reshape(h, w, 3).transpose(2, 0, 1)


def mental_image_filename(label: int, trial: int, channels: int = 1) -> str:
    return f"{label}_{trial}." + ("pgm" if channels == 1 else "ppm")


def dump_mental_images(images: list, outdir) -> list:
    """Write every mental image as <class>_<trial>.pgm/ppm; returns paths."""
    outdir = Path(outdir)
    paths = []
    for im in images:
        path = outdir / mental_image_filename(im.label, im.trial, im.pixels.shape[0])
        write_pnm(path, im.pixels)
        paths.append(path)
    return paths
