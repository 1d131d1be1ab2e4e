"""Grayscale image ingestion: Otsu thresholding, binarization, PNG/PGM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .renderer import SilhouetteImage

Polarity = Literal["vessels_dark", "vessels_bright"]


class ConstantImage(ValueError):
    """Single-intensity image; a threshold is undefined."""


@dataclass(frozen=True)
class GrayImage:
    """8- or 16-bit grayscale raster."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.pixels))
        if p.dtype not in (np.uint8, np.uint16):
            raise ValueError("pixels must be uint8 or uint16")
        if p.ndim != 2 or p.size == 0:
            raise ValueError("pixels must be a non-empty 2D array")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def max_value(self) -> int:
        return 255 if self.pixels.dtype == np.uint8 else 65535


def otsu_threshold(img: GrayImage) -> int:
    """Threshold maximizing between-class variance of the intensity histogram.

    A candidate t splits pixels into {intensity < t} and {intensity >= t};
    candidates run from 1 to the maximum representable intensity, and ties are
    broken toward the lower threshold.  Raises ConstantImage when the image
    has a single distinct intensity.
    """
    levels = img.max_value + 1
    hist = np.bincount(img.pixels.ravel(), minlength=levels).astype(float)
    if np.count_nonzero(hist) < 2:
        raise ConstantImage("image has a single intensity; cannot threshold")

    total = hist.sum()
    intensities = np.arange(levels, dtype=float)
    cum_count = np.cumsum(hist)
    cum_mass = np.cumsum(hist * intensities)

    # class 0 = {p < t} for t in [1, levels-1]
    w0 = cum_count[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(cum_mass[:-1], w0, out=np.zeros(levels - 1), where=w0 > 0)
    mu1 = np.divide(cum_mass[-1] - cum_mass[:-1], w1, out=np.zeros(levels - 1), where=w1 > 0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    return int(np.argmax(var_between)) + 1


def binarize(img: GrayImage, threshold: int, polarity: Polarity = "vessels_dark") -> SilhouetteImage:
    """Hard {0, 1} silhouette from a grayscale image.

    Intensities strictly above the threshold are "bright"; the polarity flag
    states which side is vasculature, and vessels always map to 1.0.
    """
    if polarity not in ("vessels_dark", "vessels_bright"):
        raise ValueError(f"unknown polarity {polarity!r}")
    bright = img.pixels > threshold
    mask = ~bright if polarity == "vessels_dark" else bright
    return SilhouetteImage(mask.astype(float))


def silhouette_to_gray(sil: SilhouetteImage, bits: int = 16, invert: bool = False) -> GrayImage:
    """Quantize a silhouette to a gray raster, optionally video-inverted.

    ``invert=True`` produces the DSA convention (dark vessels on a bright
    background).
    """
    if bits == 8:
        maxval, dtype = 255, np.uint8
    elif bits == 16:
        maxval, dtype = 65535, np.uint16
    else:
        raise ValueError("bits must be 8 or 16")
    v = sil.values
    if invert:
        v = 1.0 - v
    return GrayImage(np.rint(v * maxval).astype(dtype))


def load_gray(path) -> GrayImage:
    """Read a grayscale PNG (8/16-bit) or binary PGM (P5) file."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _load_pgm(path)
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
        elif im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise ValueError(f"{path}: intensities outside 16-bit range")
            arr = arr.astype(np.uint16)
        else:
            raise ValueError(f"{path}: unsupported image mode {im.mode!r}; expected grayscale")
    return GrayImage(arr)


def save_gray(path, img: GrayImage) -> None:
    """Write a grayscale raster as PNG (mode from bit depth)."""
    path = Path(path)
    if img.pixels.dtype == np.uint8:
        Image.fromarray(img.pixels, mode="L").save(path)
    else:
        Image.fromarray(img.pixels.astype(np.uint16)).save(path)


def _load_pgm(path: Path) -> GrayImage:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed through the end of the header
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    count = width * height
    if maxval < 256:
        raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=i)
        arr = raw.reshape(height, width).copy()
    else:
        raw = np.frombuffer(data, dtype=">u2", count=count, offset=i)
        arr = raw.astype(np.uint16).reshape(height, width)
    return GrayImage(arr)


def normalize_to_silhouette(img: GrayImage, polarity: Polarity = "vessels_dark") -> SilhouetteImage:
    """Rescale a grayscale image to [0, 1] occupancy without thresholding.

    Preserves soft silhouette values (e.g. synthetic renders stored as 16-bit
    PNGs); the polarity flag flips DSA-convention images so vessels end up
    bright.
    """
    if polarity not in ("vessels_dark", "vessels_bright"):
        raise ValueError(f"unknown polarity {polarity!r}")
    values = img.pixels.astype(float) / img.max_value
    if polarity == "vessels_dark":
        values = 1.0 - values
    return SilhouetteImage(values)


def ingest_silhouette(path, polarity: Polarity = "vessels_dark",
                      segment: str = "otsu") -> SilhouetteImage:
    """Load a grayscale image as a registration target.

    ``segment="otsu"`` applies global Otsu thresholding (the right choice for
    raw intensity images); ``"none"`` keeps the normalized grayscale values,
    which is lossless for images that already are silhouettes.
    """
    img = load_gray(path)
    if segment == "otsu":
        return binarize(img, otsu_threshold(img), polarity)
    if segment == "none":
        return normalize_to_silhouette(img, polarity)
    raise ValueError(f"unknown segmentation mode {segment!r}")
