"""Heatmap rendering to binary PPM (P6) rasters.

Layout of every file written here::

    b"P6\\n<width> <height>\\n255\\n" followed by width*height RGB byte triples,
    rows top to bottom, grid row 0 first.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class ColorMap:
    name: str
    fractions: tuple[float, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        if len(self.fractions) != len(self.colors) or len(self.fractions) < 2:
            raise RenderError("a colormap needs at least two control points, one color each")
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise RenderError("control fractions must increase strictly from 0 to 1")

    def __call__(self, frac: np.ndarray) -> np.ndarray:
        """Map fractions (clamped to [0, 1]) to uint8 RGB."""
        frac = np.clip(np.asarray(frac, dtype=np.float64), 0.0, 1.0)
        cols = np.asarray(self.colors, dtype=np.float64)
        rgb = np.stack([np.interp(frac, self.fractions, cols[:, k]) for k in range(3)], axis=-1)
        return np.floor(rgb + 0.5).astype(np.uint8)


SEQUENTIAL = ColorMap(
    "sequential",
    (0.0, 0.25, 0.5, 0.75, 1.0),
    ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)),
)
DIVERGING = ColorMap("diverging", (0.0, 0.5, 1.0), ((33, 102, 172), (247, 247, 247), (178, 24, 43)))
SEPARATOR = (255, 255, 255)


def _grid(field) -> np.ndarray:
    a = np.asarray(getattr(field, "data", field), dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2:
        raise RenderError(f"expected a single 2-D field, got shape {np.shape(field)}")
    return a


def heatmap_rgb(field, lo: float, hi: float, cmap: ColorMap = SEQUENTIAL) -> np.ndarray:
    if not lo < hi:
        raise RenderError(f"empty value range: lo={lo} must be below hi={hi}")
    a = _grid(field)
    return cmap((a - lo) / (hi - lo))


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise RenderError("not a binary P6 raster")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _write(path, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as err:
        raise RenderError(f"cannot write {path}: {err}") from err
    return path


def render_heatmap(field, value_range: tuple[float, float], cmap: ColorMap = SEQUENTIAL, path=None) -> bytes:
    """Render one grid; writes ``path`` when given and returns the bytes."""
    payload = encode_ppm(heatmap_rgb(field, *value_range, cmap))
    if path is not None:
        _write(path, payload)
    return payload


def symmetric_range(field) -> tuple[float, float]:
    r = float(np.max(np.abs(_grid(field))))
    r = r if r > 0 else 1.0
    return -r, r


def render_panel(
    panels: Sequence[tuple[str, object]],
    value_range: tuple[float, float],
    path=None,
    cmap: ColorMap = SEQUENTIAL,
) -> bytes:
    """Horizontal strip of heatmaps separated by 2-pixel white columns.

    Labels are kept for the caller's bookkeeping; nothing is drawn for them.
    """
    if not panels:
        raise RenderError("no panels to render")
    tiles = [heatmap_rgb(f, *value_range, cmap) for _, f in panels]
    shape = tiles[0].shape
    if any(t.shape != shape for t in tiles):
        raise RenderError("all panels must share the same grid dimensions")
    sep = np.empty((shape[0], 2, 3), dtype=np.uint8)
    sep[...] = SEPARATOR
    strip = [tiles[0]]
    for t in tiles[1:]:
        strip += [sep, t]
    payload = encode_ppm(np.concatenate(strip, axis=1))
    if path is not None:
        _write(path, payload)
    return payload


def panel_filename(variable: str, method: str, kind: str) -> str:
    safe = method.replace("+", "_").replace(".", "")
    return f"{variable}_{safe}_{kind}.ppm"
