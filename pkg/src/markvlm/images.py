"""Image loading and small synthetic-image helpers.

Images move through the model as (H, W, 3) float64 arrays scaled to [0, 1].
PPM/PGM are parsed directly (they are the deterministic interchange format
for generated corpora); PNG goes through Pillow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class ImageIOError(ValueError):
    pass


def _read_pnm_header(blob: bytes, path: str) -> tuple[bytes, list[int], int]:
    if blob[:1] != b"P":
        raise ImageIOError(f"{path}: not a PNM file")
    magic = blob[:2]
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated PNM header")
        fields.append(int(blob[start:pos]))
    return magic, fields, pos + 1  # single whitespace byte after maxval


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, (w, h, maxval), off = _read_pnm_header(blob, str(path))
    if magic != b"P6":
        raise ImageIOError(f"{path}: expected binary PPM (P6), got {magic!r}")
    if maxval != 255:
        raise ImageIOError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(blob, np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageIOError(f"write_ppm expects (H, W, 3), got {arr.shape}")
    bytes_ = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + bytes_.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Grayscale PGM as an int array (used for label maps)."""
    blob = Path(path).read_bytes()
    magic, (w, h, maxval), off = _read_pnm_header(blob, str(path))
    if magic != b"P5":
        raise ImageIOError(f"{path}: expected binary PGM (P5), got {magic!r}")
    if maxval >= 256:
        raise ImageIOError(f"{path}: only 8-bit PGM supported, got maxval {maxval}")
    data = np.frombuffer(blob, np.uint8, count=w * h, offset=off)
    return data.reshape(h, w).astype(np.int64)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ImageIOError(f"write_pgm expects (H, W), got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ImageIOError("write_pgm: values outside [0, 255]")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Any supported image file -> (H, W, 3) float64 in [0, 1]."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".ppm":
        return read_ppm(p)
    if suffix == ".pgm":
        gray = read_pgm(p).astype(np.float64) / 255.0
        return np.repeat(gray[:, :, None], 3, axis=2)
    if suffix == ".png":
        with Image.open(p) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        return rgb / 255.0
    raise ImageIOError(f"{path}: unsupported image format {suffix!r}")


def read_label_map(path: str | Path) -> np.ndarray:
    """Indexed label map (PGM or paletted/grayscale PNG) -> (H, W) int array."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(p)
    if suffix == ".png":
        with Image.open(p) as im:
            if im.mode not in ("L", "P", "I"):
                im = im.convert("L")
            return np.asarray(im, dtype=np.int64)
    raise ImageIOError(f"{path}: unsupported label-map format {suffix!r}")


def paint_rect(image: np.ndarray, box: tuple[int, int, int, int], color) -> None:
    """Fill the half-open rect [x1, x2) x [y1, y2) in place."""
    x1, y1, x2, y2 = box
    image[y1:y2, x1:x2] = np.asarray(color, dtype=np.float64)
