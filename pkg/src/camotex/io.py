"""File formats used by the pipeline.

Viewable 8-bit images are binary PPM (P6). Float tensors use the "TNSR"
format: magic ``TNSR``, u8 version, u8 rank, one u32 per dimension, then
the payload as little-endian f32 in row-major order. Sparse texel-to-pixel
render maps use the "RMAP" format: magic ``RMAP``, u32 pixel count, then
per pixel a u32 tap count followed by (u32 texel index, f32 weight) pairs.
Checkpoints are TNSR bundles: a JSON header naming the tensors, followed
by one TNSR record per tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

TNSR_MAGIC = b"TNSR"
RMAP_MAGIC = b"RMAP"
BUNDLE_MAGIC = b"TNSB"
TNSR_VERSION = 1


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM image must be HxWx3, got shape {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an H x W x 3 float32 image in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # Header is three whitespace-separated tokens after the magic; comments
    # are not emitted by this package but are tolerated.
    tokens: List[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def write_tnsr(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank too large for TNSR")
    with open(path, "wb") as f:
        f.write(TNSR_MAGIC)
        f.write(struct.pack("<BB", TNSR_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _read_tnsr_stream(f, str(path))


def _read_tnsr_stream(f, label: str) -> np.ndarray:
    magic = f.read(4)
    if magic != TNSR_MAGIC:
        raise ValueError(f"{label}: bad TNSR magic {magic!r}")
    version, rank = struct.unpack("<BB", f.read(2))
    if version != TNSR_VERSION:
        raise ValueError(f"{label}: unsupported TNSR version {version}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"{label}: truncated TNSR payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_rmap(path, counts: np.ndarray, texel_indices: np.ndarray,
               weights: np.ndarray) -> None:
    """Write a sparse render map.

    ``counts`` has one entry per pixel in row-major order; taps for pixel p
    are the next ``counts[p]`` entries of ``texel_indices`` / ``weights``.
    """
    counts = np.asarray(counts, dtype="<u4")
    texel_indices = np.asarray(texel_indices, dtype="<u4")
    weights = np.asarray(weights, dtype="<f4")
    if texel_indices.shape != weights.shape or texel_indices.ndim != 1:
        raise ValueError("texel_indices and weights must be equal-length 1-D")
    if int(counts.sum()) != texel_indices.size:
        raise ValueError("tap counts do not sum to the number of taps")
    npix = counts.size
    ntaps = texel_indices.size
    # The stream is 4-byte aligned throughout, so assemble it as one u32/f32
    # word array: per pixel a count word, then two words per tap.
    prefix = np.zeros(npix, dtype=np.int64)
    np.cumsum(counts[:-1], out=prefix[1:])
    words = np.empty(npix + 2 * ntaps, dtype="<u4")
    count_pos = np.arange(npix, dtype=np.int64) + 2 * prefix
    words[count_pos] = counts
    pixel_of_tap = np.repeat(np.arange(npix, dtype=np.int64), counts)
    tap_pos = pixel_of_tap + 1 + 2 * np.arange(ntaps, dtype=np.int64)
    words[tap_pos] = texel_indices
    words[tap_pos + 1] = weights.view("<u4")
    with open(path, "wb") as f:
        f.write(RMAP_MAGIC)
        f.write(struct.pack("<I", npix))
        f.write(words.tobytes())


def read_rmap(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a render map; returns (counts, texel_indices, weights)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RMAP_MAGIC:
        raise ValueError(f"{path}: bad RMAP magic {raw[:4]!r}")
    (npix,) = struct.unpack_from("<I", raw, 4)
    body = raw[8:]
    if len(body) % 4:
        raise ValueError(f"{path}: RMAP payload is not 4-byte aligned")
    words = np.frombuffer(body, dtype="<u4")
    counts = np.empty(npix, dtype=np.int64)
    count_pos = np.empty(npix, dtype=np.int64)
    pos = 0
    for p in range(npix):
        if pos >= words.size:
            raise ValueError(f"{path}: truncated RMAP file")
        c = int(words[pos])
        counts[p] = c
        count_pos[p] = pos
        pos += 1 + 2 * c
    if pos != words.size:
        raise ValueError(f"{path}: trailing bytes in RMAP file")
    ntaps = int(counts.sum())
    pixel_of_tap = np.repeat(np.arange(npix, dtype=np.int64), counts)
    tap_pos = count_pos[pixel_of_tap] + 1 + 2 * (
        np.arange(ntaps, dtype=np.int64)
        - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts))
    idx = words[tap_pos].astype(np.int64)
    wts = words[tap_pos + 1].view("<f4").astype(np.float32)
    return counts, idx, wts


def write_bundle(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors as a single-file TNSR bundle with a JSON header."""
    names = list(tensors.keys())
    header = {
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)}
                    for n in names],
        "meta": meta or {},
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", len(hjson)))
        f.write(hjson)
        for n in names:
            arr = np.ascontiguousarray(tensors[n], dtype="<f4")
            f.write(TNSR_MAGIC)
            f.write(struct.pack("<BB", TNSR_VERSION, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_bundle(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BUNDLE_MAGIC:
            raise ValueError(f"{path}: bad bundle magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors: Dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            arr = _read_tnsr_stream(f, f"{path}:{entry['name']}")
            if list(arr.shape) != list(entry["shape"]):
                raise ValueError(f"{path}: shape mismatch for {entry['name']}")
            tensors[entry["name"]] = arr
    return tensors, header.get("meta", {})


def write_detections(path, rows: Iterable[tuple]) -> None:
    """Write a detection dump: one line per detection.

    Each row is (image_id, class_index, cx, cy, w, h, confidence) with the
    box in pixel center format.
    """
    with open(path, "w", encoding="ascii") as f:
        for image_id, cls, cx, cy, w, h, conf in rows:
            f.write(f"{image_id} {int(cls)} {cx:.6f} {cy:.6f} "
                    f"{w:.6f} {h:.6f} {conf:.6f}\n")


def read_detections(path) -> List[tuple]:
    rows: List[tuple] = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            rows.append((parts[0], int(parts[1]), float(parts[2]), float(parts[3]),
                         float(parts[4]), float(parts[5]), float(parts[6])))
    return rows


def write_json(path, obj) -> None:
    """Stable JSON writer: sorted keys, fixed separators, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
