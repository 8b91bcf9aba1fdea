"""Image and file helpers: 8-bit PNG quantization and atomic writes."""

from __future__ import annotations

import contextlib
import io
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round(value * 255)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


def encode_png(img: np.ndarray) -> bytes:
    arr = quantize(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(img))


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float32 in [0, 1]; grayscale comes back H x W."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return dequantize(np.asarray(im))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextlib.contextmanager
def staged_directory(out_dir, overwrite: bool = False):
    """Yield a temporary sibling directory that replaces ``out_dir`` on success.

    On any exception the temporary directory is removed and ``out_dir`` is
    left as it was.  An existing non-empty ``out_dir`` is only replaced when
    ``overwrite`` is set.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise FileExistsError(f"{out_dir}: output directory exists and is not empty (use --force)")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}."))
    try:
        yield tmp
        if out_dir.exists():
            old = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}.old."))
            os.replace(out_dir, old / "d")
            os.replace(tmp, out_dir)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
