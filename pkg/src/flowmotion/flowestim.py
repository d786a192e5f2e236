"""Coarse-to-fine Horn-Schunck optical flow over grayscale image pairs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .flowcore import FlowField, bilinear_grid, resize_grid

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
INTENSITY_SCALE = 255.0  # alpha is expressed in 8-bit intensity units
MIN_PYRAMID_SIDE = 8


class GrayImage:
    """Grayscale image with intensities in [0, 1], stored as float64 ``(H, W)``."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.array(pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"gray image must be a non-empty 2D array, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr.setflags(write=False)
        self._pixels = arr

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        if arr.ndim == 3:
            rgb = arr[..., :3].astype(np.float64)
            arr = rgb @ np.array(LUMA_WEIGHTS)
        return cls(np.clip(arr / 255.0, 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.round(self._pixels * 255.0).astype(np.uint8)


def load_gray(path: Union[str, Path]) -> GrayImage:
    """Read an 8-bit PNG/PGM (gray or RGB) as a :class:`GrayImage`."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return GrayImage.from_uint8(np.asarray(im))


def save_gray(img: GrayImage, path: Union[str, Path]) -> None:
    from PIL import Image

    Image.fromarray(img.to_uint8(), mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class HsConfig:
    alpha: float = 15.0
    iterations: int = 100
    pyramid_levels: int = 3

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape[::-1]} vs {b.shape[::-1]}")


def _spatial_gradients(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # central differences inside, one-sided on the border
    ix = np.gradient(img, axis=1) if img.shape[1] > 1 else np.zeros_like(img)
    iy = np.gradient(img, axis=0) if img.shape[0] > 1 else np.zeros_like(img)
    return ix, iy


def gradient_grids(im1: np.ndarray, im2: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_pair(im1, im2)
    ix1, iy1 = _spatial_gradients(im1)
    ix2, iy2 = _spatial_gradients(im2)
    return (ix1 + ix2) / 2, (iy1 + iy2) / 2, im2 - im1


def image_gradients(
    img1: GrayImage, img2: GrayImage
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spatial derivatives averaged over the pair, and the temporal difference."""
    return gradient_grids(img1.pixels, img2.pixels)


def _neighbour_mean(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    return (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4.0


def _pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape
        if min(h, w) < 2 * MIN_PYRAMID_SIDE:
            break
        blurred = gaussian_filter(pyr[-1], sigma=1.0, mode="nearest")
        pyr.append(resize_grid(blurred, (w + 1) // 2, (h + 1) // 2))
    return pyr


def _hs_level(
    im1: np.ndarray, im2: np.ndarray, u: np.ndarray, v: np.ndarray, cfg: HsConfig
) -> Tuple[np.ndarray, np.ndarray]:
    h, w = im1.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = bilinear_grid(im2, xs + u, ys + v)
    ix, iy, it = gradient_grids(im1, warped)
    # linearize brightness constancy around the current estimate
    it = it - ix * u - iy * v
    denom = cfg.alpha ** 2 + ix ** 2 + iy ** 2
    for _ in range(cfg.iterations):
        u_bar = _neighbour_mean(u)
        v_bar = _neighbour_mean(v)
        common = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * common
        v = v_bar - iy * common
    return u, v


def estimate_flow(img1: GrayImage, img2: GrayImage, cfg: HsConfig = HsConfig()) -> FlowField:
    """Dense flow from ``img1`` to ``img2``.

    Each pyramid level warps ``img2`` by the upsampled coarser estimate and
    runs Jacobi Horn-Schunck sweeps on the total flow.
    """
    _check_pair(img1.pixels, img2.pixels)
    pyr1 = _pyramid(img1.pixels * INTENSITY_SCALE, cfg.pyramid_levels)
    pyr2 = _pyramid(img2.pixels * INTENSITY_SCALE, cfg.pyramid_levels)
    u = v = None
    for im1, im2 in zip(reversed(pyr1), reversed(pyr2)):
        h, w = im1.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            ph, pw = u.shape
            u = resize_grid(u, w, h) * (w / pw)
            v = resize_grid(v, w, h) * (h / ph)
        u, v = _hs_level(im1, im2, u, v, cfg)
    return FlowField(np.stack([u, v], axis=-1))


def total_variation(field: FlowField) -> float:
    """Anisotropic total variation summed over both channels."""
    d = field.data.astype(np.float64)
    return float(np.abs(np.diff(d, axis=0)).sum() + np.abs(np.diff(d, axis=1)).sum())


def endpoint_error(estimate: FlowField, truth: FlowField) -> np.ndarray:
    diff = estimate.data.astype(np.float64) - truth.data.astype(np.float64)
    return np.hypot(diff[..., 0], diff[..., 1])
