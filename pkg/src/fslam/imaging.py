"""Exposure distortion by gamma power transform, plus grayscale image IO.

Images are 2-D ``uint8`` numpy arrays. Colour inputs are converted to luma
with ITU-R 601 weights when read.
"""
from __future__ import annotations

import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnreadableInput, UnwritableOutput

IMAGE_SUFFIXES = (".png", ".pgm")

# robustness grid: <1 overexposes, >1 underexposes
GAMMA_GRID = (0.25, 0.5, 2.0, 4.0)


@dataclass(frozen=True)
class GammaParam:
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be a positive real, got {self.gamma}")


def gamma_lut(gamma: float) -> np.ndarray:
    """256-entry table of round(255 * (p/255)**gamma), halves rounded away from zero."""
    GammaParam(gamma)
    x = np.arange(256, dtype=np.float64) / 255.0
    return np.clip(np.floor(255.0 * x**gamma + 0.5), 0, 255).astype(np.uint8)


def gamma_transform(img: np.ndarray, gamma: float | GammaParam) -> np.ndarray:
    g = gamma.gamma if isinstance(gamma, GammaParam) else float(gamma)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("expected an 8-bit image")
    return gamma_lut(g)[img]


def to_gray(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return arr.astype(np.uint8)
    rgb = arr[..., :3].astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = (np.asarray(im, dtype=np.float64) / 257.0).round().astype(np.uint8)
            else:
                arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB", "RGBA") else im)
    except (OSError, ValueError) as exc:
        raise UnreadableInput(f"cannot read image {path}: {exc}") from exc
    return to_gray(arr)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    try:
        Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path, format=fmt)
    except OSError as exc:
        raise UnwritableOutput(f"cannot write image {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UnreadableInput(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _is_plain_gray(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            return im.mode == "L"
    except OSError:
        return False


def distort_sequence(input_dir, output_dir, gamma: float | GammaParam, workers: int = 1) -> int:
    """Gamma-transform every image of a directory into ``output_dir``.

    Filenames are preserved. With gamma == 1 an 8-bit grayscale file is
    copied byte for byte.
    """
    g = gamma if isinstance(gamma, GammaParam) else GammaParam(float(gamma))
    files = list_images(input_dir)
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritableOutput(f"cannot create {out}: {exc}") from exc
    lut = gamma_lut(g.gamma)

    def work(src: Path):
        dst = out / src.name
        if g.gamma == 1.0 and _is_plain_gray(src):
            try:
                shutil.copyfile(src, dst)
            except OSError as exc:
                raise UnwritableOutput(f"cannot write {dst}: {exc}") from exc
            return
        write_image(dst, lut[read_image(src)])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, files))
    else:
        for f in files:
            work(f)
    return len(files)
