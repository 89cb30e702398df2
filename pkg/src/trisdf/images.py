"""Minimal binary PPM/PGM/PFM readers and writers.

PPM (P6) carries 8-bit RGB, PGM (P5) 8-bit gray, PFM 32-bit float gray or
RGB. PFM rows are stored bottom-to-top with a negative scale marking
little-endian data, per the format's convention; readers return top-down
arrays like everything else here.
"""

from __future__ import annotations

import numpy as np


def _read_header_tokens(fh, n):
    """Read n whitespace-separated tokens, skipping # comments."""
    tokens = []
    while len(tokens) < n:
        line = fh.readline()
        if not line:
            raise ValueError("truncated image header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def write_ppm(path, img):
    """img: (H, W, 3) uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm wants (H, W, 3) uint8, got "
                         f"{img.dtype} {img.shape}")
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().split()[0]
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        W, H, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(W * H * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3).copy()


def write_pgm(path, img):
    """img: (H, W) uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"write_pgm wants (H, W) uint8, got "
                         f"{img.dtype} {img.shape}")
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().split()[0]
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        W, H, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(W * H)
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W).copy()


def write_pfm(path, img):
    """img: (H, W) or (H, W, 3) float; stored float32 little-endian."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"write_pfm wants (H, W) or (H, W, 3), got {img.shape}")
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{W} {H}\n".encode())
        fh.write(b"-1.0\n")  # negative scale: little-endian
        fh.write(np.flipud(img).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM")
        W, H = (int(t) for t in _read_header_tokens(fh, 2))
        scale = float(_read_header_tokens(fh, 1)[0])
        channels = 3 if magic == b"PF" else 1
        count = W * H * channels
        data = fh.read(count * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype).astype(np.float32)
    shape = (H, W, 3) if channels == 3 else (H, W)
    return np.flipud(arr.reshape(shape)).copy()


def to_u8(img):
    """Quantize floats in [0, 1] to uint8 with round-half-away behavior."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
