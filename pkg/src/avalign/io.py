"""File formats: AVT1 tensors, 16-bit PGM heatmaps, mono 16 kHz WAV."""

from __future__ import annotations

import struct

import numpy as np
from scipy.io import wavfile

from .errors import InputError

AVT1_MAGIC = b"AVT1"


def save_avt1(path, array) -> None:
    """Write a tensor file: magic, u32 rank, u32 extents, f32 row-major payload."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(AVT1_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def load_avt1(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != AVT1_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected AVT1")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise InputError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_pgm16(path, matrix) -> None:
    """Write a row-max-scaled 16-bit PGM (P5, maxval 65535, big-endian)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"PGM expects a 2-d matrix, got shape {m.shape}")
    row_max = m.max(axis=1, keepdims=True)
    row_max[row_max <= 0] = 1.0
    pix = np.clip(np.rint(m / row_max * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n65535\n".encode())
        f.write(pix.tobytes())


def load_pgm16(path) -> np.ndarray:
    """Read a binary PGM written by save_pgm16; returns uint16 pixels."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise InputError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pix = np.frombuffer(blob[pos : pos + 2 * width * height], dtype=">u2")
    if pix.size != width * height:
        raise InputError(f"{path}: truncated pixel data")
    return pix.reshape(height, width).astype(np.uint16)


def save_ppm(path, image) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InputError(f"PPM expects (H, W, 3) uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise InputError(f"{path}: not a binary PPM")
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    width, height = int(fields[1]), int(fields[2])
    pos += 1
    pix = np.frombuffer(blob[pos : pos + 3 * width * height], dtype=np.uint8)
    if pix.size != 3 * width * height:
        raise InputError(f"{path}: truncated pixel data")
    return pix.reshape(height, width, 3).copy()


def load_image(path) -> np.ndarray:
    """Read a PNG (via Pillow, when installed) or PPM frame as (H, W, 3) uint8."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        return load_ppm(p)
    try:
        from PIL import Image
    except ImportError as e:
        raise InputError(f"{p}: reading PNG requires Pillow (pip install Pillow)") from e
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono PCM16 or float32 WAV; return (samples in [-1,1], sample_rate)."""
    try:
        rate, data = wavfile.read(path)
    except Exception as e:
        raise InputError(f"{path}: cannot read WAV ({e})") from e
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return samples, int(rate)


def write_wav(path, samples, sample_rate=16000) -> None:
    """Write float samples in [-1,1] as PCM16."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, (pcm * 32767.0).astype(np.int16))
