"""On-disk formats: CTRL tensor dumps, binary PPM/PGM images, CSV reports."""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTRL"
VERSION = 1


class FormatError(ValueError):
    pass


def tensor_bytes(array) -> bytes:
    """``CTRL``, u32 version, u32 ndim, u32 dims, then row-major little-endian float64."""
    a = np.asarray(array, dtype=np.float64)
    header = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).astype("<f8").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise FormatError("missing CTRL magic")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported CTRL version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(data) - offset != 8 * count:
        raise FormatError(f"payload has {len(data) - offset} bytes, expected {8 * count}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)


def write_tensor(path, array) -> Path:
    path = Path(path)
    path.write_bytes(tensor_bytes(array))
    return path


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def ppm_bytes(rgb) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def pgm_bytes(values, height: int, width: int) -> bytes:
    """Grayscale P5 of a map, min-max scaled to 0..255 (a constant map is black)."""
    v = np.asarray(values, dtype=np.float64).reshape(height, width)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    gray = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + gray.tobytes()


def write_ppm(path, rgb) -> Path:
    path = Path(path)
    path.write_bytes(ppm_bytes(rgb))
    return path


def write_pgm(path, values, height: int, width: int) -> Path:
    path = Path(path)
    path.write_bytes(pgm_bytes(values, height, width))
    return path


def read_pnm(path) -> tuple[str, np.ndarray]:
    """Parse a P5/P6 file written by this module (no comments, maxval 255)."""
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255":
        raise FormatError(f"unsupported maxval {maxval!r}")
    pixels = np.frombuffer(body, dtype=np.uint8)
    if magic == b"P6":
        return "P6", pixels.reshape(h, w, 3)
    if magic == b"P5":
        return "P5", pixels.reshape(h, w)
    raise FormatError(f"unsupported magic {magic!r}")


def fmt_float(v: float) -> str:
    return format(float(v), ".12g")


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.write_bytes(csv_bytes(header, rows))
    return path


def export_attention(directory, timestep: int, block: int, maps) -> list[Path]:
    """One ``attn_t{t}_l{l}_h{h}.ctrl`` file per head of a ``(heads, rows, keys)`` map stack."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        write_tensor(directory / f"attn_t{timestep}_l{block}_h{h}.ctrl", head)
        for h, head in enumerate(np.asarray(maps))
    ]


def dump_trace(trace, directory) -> list[Path]:
    """Write latents, per-block concept maps and concept masks of a generation trace.

    Attention files hold the head- and concept-token-averaged map as ``(H, W)``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = trace.height, trace.width
    start, end = trace.concept_span
    total = len(trace.timesteps)
    written = [write_tensor(directory / f"latent_t{total}.ctrl", trace.x_T.reshape(h, w, -1))]
    for k, t in enumerate(trace.timesteps):
        written.append(write_tensor(directory / f"latent_t{t - 1}.ctrl", trace.latents[k].reshape(h, w, -1)))
        for l, maps in enumerate(trace.text_maps[k]):
            reduced = np.asarray(maps)[:, :, start:end].mean(axis=(0, 2))
            written.append(write_tensor(directory / f"attn_t{t}_l{l}.ctrl", reduced.reshape(h, w)))
        written.append(write_tensor(directory / f"mask_t{t}.ctrl", trace.masks[k].values.reshape(h, w)))
    return written
