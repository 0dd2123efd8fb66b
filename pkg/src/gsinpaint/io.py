"""File formats: 8-bit PNG, little-endian PFM, ASCII PLY and the GSIP Gaussian container."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

GSIP_MAGIC = b"GSIP"
GSIP_VERSION = 1
GSIP_FIELDS = 30


class FormatError(ValueError):
    """Raised when a file is missing, truncated or does not match its declared format."""


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1] (or an HxW uint8 array) as 8-bit PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path)


def read_png_rgb(path: str | Path) -> np.ndarray:
    """Read an RGB PNG as float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path.name} not found")
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as err:
        raise FormatError(f"cannot read {path}: {err}") from err
    return data / 255.0


def read_png_gray(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path.name} not found")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as err:
        raise FormatError(f"cannot read {path}: {err}") from err


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path: str | Path) -> np.ndarray:
    return read_png_gray(path) >= 128


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel (HxW) or RGB (HxWx3) little-endian PFM.

    Rows are stored bottom-to-top as the format requires. Negative depths
    (the in-memory "no surface" sentinel) are written as 0.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM expects HxW or HxWx3, got {data.shape}")
    if data.ndim == 2:
        data = np.where(data < 0, 0.0, data)
    h, w = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data), dtype="<f4").tobytes())


def read_pfm(path: str | Path, sentinel: float | None = -1.0) -> np.ndarray:
    """Read a PFM file as float64. Zero depths in single-channel files map to ``sentinel``."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path.name} not found")
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"{path}: malformed PFM dimensions")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        raw = f.read()
    expected = w * h * channels * 4
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated PFM ({len(raw)} of {expected} bytes)")
    data = np.frombuffer(raw[:expected], dtype=dtype).astype(np.float64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    data = np.flipud(data.reshape(shape)).copy()
    if channels == 1 and sentinel is not None:
        data[data <= 0] = sentinel
    return data


# ---------------------------------------------------------------------------
# PLY (ASCII point clouds)
# ---------------------------------------------------------------------------

def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = to_uint8(colors).reshape(-1, 3)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        for name in ("x", "y", "z"):
            f.write(f"property float {name}\n")
        for name in ("red", "green", "blue"):
            f.write(f"property uchar {name}\n")
        f.write("end_header\n")
        for p, c in zip(points, rgb):
            f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ASCII PLY written by :func:`write_ply`; returns (points, colors in [0,1])."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path.name} not found")
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        count = None
        for line in f:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise FormatError(f"{path}: only ASCII PLY is supported")
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line == "end_header":
                break
        if count is None:
            raise FormatError(f"{path}: no vertex element")
        rows = [line.split() for _, line in zip(range(count), f)]
    if len(rows) != count:
        raise FormatError(f"{path}: expected {count} vertices, found {len(rows)}")
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    table = np.array(rows, dtype=np.float64)
    return table[:, :3], table[:, 3:6] / 255.0


# ---------------------------------------------------------------------------
# GSIP
# ---------------------------------------------------------------------------

def write_gsip(path: str | Path, table: np.ndarray) -> None:
    """Write an (N, 30) parameter table. Values are stored as float32."""
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[1] != GSIP_FIELDS:
        raise ValueError(f"expected (N, {GSIP_FIELDS}) table, got {table.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(GSIP_MAGIC)
        f.write(struct.pack("<IQ", GSIP_VERSION, table.shape[0]))
        f.write(np.ascontiguousarray(table, dtype="<f4").tobytes())


def read_gsip(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path.name} not found")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != GSIP_MAGIC:
        raise FormatError(f"{path}: bad magic, not a GSIP file")
    version, count = struct.unpack("<IQ", raw[4:16])
    if version != GSIP_VERSION:
        raise FormatError(f"{path}: unsupported GSIP version {version} (expected {GSIP_VERSION})")
    expected = count * GSIP_FIELDS * 4
    body = raw[16:]
    if len(body) != expected:
        raise FormatError(f"{path}: truncated or oversized body ({len(body)} of {expected} bytes)")
    return np.frombuffer(body, dtype="<f4").reshape(count, GSIP_FIELDS).astype(np.float64)
