"""
File helpers: image I/O (PGM/PPM via Pillow) and raw float sidecars
"""
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage

from app.errors import InvalidArgumentError, MissingArtifactError
from app.utils.containers import ByteReader, ByteWriter, check_magic

SIDECAR_MAGIC = b"GSCF"
SIDECAR_VERSION = 1

PathLike = Union[str, Path]


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check an image is (H, W) or (H, W, 3) with values in [0, 1]"""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise InvalidArgumentError(f"image must be HxW or HxWx3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < -1e-9 or arr.max(initial=0.0) > 1.0 + 1e-9:
        raise InvalidArgumentError("image values must be finite and within [0, 1]")
    return arr


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for RGB, identity for grayscale"""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr @ np.array([0.299, 0.587, 0.114])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(image: np.ndarray, path: PathLike) -> Path:
    """8-bit PGM (grayscale) or PPM (RGB); format follows the suffix"""
    arr = validate_image(image)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if arr.ndim == 2 else "RGB"
    PILImage.fromarray(to_uint8(arr), mode=mode).save(p)
    return p


def read_image(path: PathLike) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"image not found: {p}")
    with PILImage.open(p) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.float64) / 255.0


def write_sidecar(image: np.ndarray, path: PathLike) -> Path:
    """Exact float64 copy of an image next to its 8-bit rendition"""
    arr = validate_image(image)
    channels = 1 if arr.ndim == 2 else 3
    w = ByteWriter()
    w.raw(SIDECAR_MAGIC)
    w.pack("BHHB", SIDECAR_VERSION, arr.shape[0], arr.shape[1], channels)
    w.floats(arr)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(w.getvalue())
    return p


def read_sidecar(path: PathLike) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"sidecar not found: {p}")
    r = ByteReader(p.read_bytes(), what=str(p))
    check_magic(r, SIDECAR_MAGIC, SIDECAR_VERSION)
    height, width, channels = r.unpack("HHB")
    data = r.floats(height * width * channels)
    return data.reshape((height, width) if channels == 1 else (height, width, channels))


def load_image_any(path: PathLike) -> np.ndarray:
    """Prefer the exact sidecar when one sits next to the image"""
    p = Path(path)
    if p.suffix == ".f64":
        return read_sidecar(p)
    sidecar = p.with_suffix(".f64")
    if sidecar.is_file():
        return read_sidecar(sidecar)
    return read_image(p)


def write_png(gray: np.ndarray, path: PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(gray), mode="L").save(p, format="PNG")
    return p
