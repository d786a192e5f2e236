"""Dense flow fields: storage, NPY codec, resampling, flipping and visualization.

A flow field is a ``(height, width, 2)`` float32 grid of per-pixel
displacements ``(u, v)`` in pixels between the two frames of a pair.
"""

from __future__ import annotations

import ast
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import (
    NpyFormatError,
    NpyLengthError,
    NpyShapeError,
    UnsupportedDtypeError,
)

NPY_MAGIC = b"\x93NUMPY"
_NPY_VERSION = b"\x01\x00"
_NPY_PREAMBLE = len(NPY_MAGIC) + 2 + 2  # magic, version, header length


class FlowField:
    """Immutable dense 2-channel motion field.

    Args:
        data: array of shape ``(height, width, 2)``; channel 0 is ``u``
            (horizontal), channel 1 is ``v`` (vertical). Copied to float32.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise NpyShapeError(f"flow data must have shape (H, W, 2), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"flow dimensions must be positive, got {arr.shape[:2]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow contains non-finite values")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def constant(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        data = np.empty((height, width, 2), dtype=np.float32)
        data[..., 0] = u
        data[..., 1] = v
        return cls(data)

    @property
    def data(self) -> np.ndarray:
        """Read-only ``(H, W, 2)`` float32 view."""
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def u(self) -> np.ndarray:
        return self._data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self._data[..., 1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u.astype(np.float64), self.v.astype(np.float64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlowField):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __hash__(self) -> int:
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"FlowField(width={self.width}, height={self.height})"


# ---------------------------------------------------------------------------
# NPY codec (version 1.0, '<f4', C order, shape (H, W, 2))
# ---------------------------------------------------------------------------


def write_npy(field: FlowField) -> bytes:
    """Encode ``field`` as NPY 1.0 bytes."""
    h, w = field.height, field.width
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': (%d, %d, 2), }" % (h, w)
    # pad with spaces so the payload starts on a 64-byte boundary
    total = _NPY_PREAMBLE + len(header) + 1
    header += " " * (-total % 64) + "\n"
    payload = field.data.astype("<f4", copy=False).tobytes(order="C")
    return NPY_MAGIC + _NPY_VERSION + struct.pack("<H", len(header)) + header.encode("latin1") + payload


def read_npy(data: bytes) -> FlowField:
    """Decode NPY 1.0 bytes holding a little-endian float32 ``(H, W, 2)`` array."""
    data = bytes(data)
    if len(data) < _NPY_PREAMBLE or not data.startswith(NPY_MAGIC):
        raise NpyFormatError("missing NPY magic string")
    if data[6:8] != _NPY_VERSION:
        raise NpyFormatError(f"unsupported NPY version {data[6]}.{data[7]}")
    (hlen,) = struct.unpack("<H", data[8:10])
    end = _NPY_PREAMBLE + hlen
    if len(data) < end:
        raise NpyFormatError("NPY header is truncated")
    try:
        header = ast.literal_eval(data[_NPY_PREAMBLE:end].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unparseable NPY header: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"NPY header must have descr/fortran_order/shape keys: {header!r}")
    if header["descr"] != "<f4":
        raise UnsupportedDtypeError(f"expected dtype '<f4', got {header['descr']!r}")
    if header["fortran_order"] is not False:
        raise NpyFormatError("Fortran-ordered arrays are not supported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise NpyFormatError(f"invalid shape entry {shape!r}")
    if len(shape) != 3 or shape[2] != 2:
        raise NpyShapeError(f"expected shape (H, W, 2), got {shape}")
    nbytes = shape[0] * shape[1] * 2 * 4
    payload = data[end:]
    if len(payload) != nbytes:
        raise NpyLengthError(f"payload has {len(payload)} bytes, header implies {nbytes}")
    return FlowField(np.frombuffer(payload, dtype="<f4").reshape(shape))


def load_flow(path: Union[str, Path]) -> FlowField:
    return read_npy(Path(path).read_bytes())


def save_flow(field: FlowField, path: Union[str, Path]) -> None:
    Path(path).write_bytes(write_npy(field))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def bilinear_grid(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``grid`` (H, W[, C]) at float coordinates, edge-clamped.

    Computation runs in float64. Lerps are written as ``a + t * (b - a)`` so
    constant neighbourhoods and integer coordinates reproduce stored values
    exactly.
    """
    h, w = grid.shape[:2]
    g = grid.astype(np.float64, copy=False)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if g.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    a, b = g[y0, x0], g[y0, x1]
    c, d = g[y1, x0], g[y1, x1]
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    return top + fy * (bottom - top)


def bilinear_sample(field: FlowField, x: float, y: float) -> Tuple[float, float]:
    """Sample ``(u, v)`` at pixel coordinate ``(x, y)`` with edge clamping."""
    out = bilinear_grid(field.data, np.array(x), np.array(y))
    return float(out[0]), float(out[1])


def resize_coords(n_in: int, n_out: int) -> np.ndarray:
    """Source coordinates of ``n_out`` output samples (align-corners false)."""
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_grid(grid: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of an ``(H, W[, C])`` array; values are not rescaled."""
    h, w = grid.shape[:2]
    xs = resize_coords(w, out_w)
    ys = resize_coords(h, out_h)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_grid(grid, gx, gy)


def resize_bilinear(field: FlowField, out_w: int, out_h: int) -> FlowField:
    """Resize a flow field to ``out_w`` x ``out_h``.

    Flow values are interpolated as-is; they are not multiplied by the
    geometric scale ratio.
    """
    if int(out_w) != out_w or int(out_h) != out_h or out_w <= 0 or out_h <= 0:
        raise ValueError(f"target size must be positive integers, got {out_w}x{out_h}")
    if (out_w, out_h) == (field.width, field.height):
        return field
    return FlowField(resize_grid(field.data, int(out_w), int(out_h)))


def hflip(field: FlowField) -> FlowField:
    """Mirror columns and negate ``u``; a mirrored world moves the other way."""
    flipped = field.data[:, ::-1, :].copy()
    flipped[..., 0] = -flipped[..., 0]
    return FlowField(flipped)


# ---------------------------------------------------------------------------
# Visualization
# ---------------------------------------------------------------------------


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.intp) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_rgb(field: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Float RGB in [0, 1]: hue from flow direction, saturation from magnitude.

    ``max_magnitude=None`` normalizes by the field's largest magnitude (1 for
    an all-zero field). Zero flow maps to white.
    """
    u = field.u.astype(np.float64)
    v = field.v.astype(np.float64)
    if max_magnitude is None:
        max_magnitude = float(np.max(np.hypot(u, v))) or 1.0
    elif not max_magnitude > 0:
        raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")
    un = u / max_magnitude
    vn = v / max_magnitude
    sat = np.minimum(np.hypot(un, vn), 1.0)
    hue = (np.arctan2(vn, un) / (2 * np.pi)) % 1.0
    return _hsv_to_rgb(hue, sat, np.ones_like(sat))


def render_colorwheel(field: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Render ``field`` as an 8-bit ``(H, W, 3)`` RGB image."""
    rgb = flow_to_rgb(field, max_magnitude)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def save_png(rgb: np.ndarray, path: Union[str, Path]) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")
