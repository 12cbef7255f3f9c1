"""Heatmaps, false-colour maps and max-activation reports.

Rasters are north-up: raster row 0 is the grid row with the largest y.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .geoindex import GridSpec, ReferenceIndex, distances
from .imageio import write_ppm
from .models import MultiScaleNet, Network
from .synthworld import CLASS_NAMES, WorldSpec, render_aerial

RED = np.array([255.0, 0.0, 0.0])
GRAY = np.array([128.0, 128.0, 128.0])
BLUE = np.array([0.0, 0.0, 255.0])
HEAT_ALPHA = 0.6
LEVELS = 256


@dataclass
class Raster:
    pixels: np.ndarray  # [height, width, 3] uint8
    georef: Optional[GridSpec] = None
    values: Optional[np.ndarray] = None  # scalar field behind the colours, same layout

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def pixel_of_cell(self, cell: int) -> tuple[int, int]:
        i, j = divmod(int(cell), self.georef.cols)
        return self.georef.rows - 1 - i, j

    def write(self, path) -> Path:
        path = Path(path)
        write_ppm(path, self.pixels, layout="hwc")
        if self.georef is not None:
            g = self.georef
            sidecar = path.with_suffix(path.suffix + ".geo")
            sidecar.write_text(f"{g.x0!r}\n{g.y0!r}\n{g.cell!r}\n{g.cols}\n{g.rows}\n")
        return path


def _north_up(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return values.reshape((grid.rows, grid.cols) + values.shape[1:])[::-1]


def red_blue(values: np.ndarray) -> np.ndarray:
    """Linear red (minimum) -> gray -> blue (maximum) map; constant input gives gray.

    Values are quantized to 257 levels so the middle level is exactly gray.
    Red minus blue falls by about 2 per level, so distinct levels keep distinct
    colours after rounding each channel.
    """
    v = np.asarray(values, np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.broadcast_to(GRAY.astype(np.uint8), v.shape + (3,)).copy()
    t = (np.rint((v - lo) / (hi - lo) * LEVELS) / LEVELS)[..., None]
    rgb = np.where(t <= 0.5, RED + (GRAY - RED) * (t / 0.5), GRAY + (BLUE - GRAY) * ((t - 0.5) / 0.5))
    return np.rint(rgb).astype(np.uint8)


def redness(pixels: np.ndarray) -> np.ndarray:
    """Signed position toward the red end of :func:`red_blue` (larger is redder)."""
    p = pixels.astype(np.int64)
    return p[..., 0] - p[..., 2]


def distance_heatmap(index: ReferenceIndex, query_feature, truth_location: Optional[tuple[float, float]] = None) -> Raster:
    d = distances(index, query_feature)
    field2d = _north_up(d, index.grid)
    px = red_blue(field2d)
    if truth_location is not None:
        r, c = Raster(px, index.grid).pixel_of_cell(index.grid.cell_of(*truth_location))
        px[r, c] = 0
    return Raster(px, index.grid, field2d.copy())


def _offsets(span_meters: float, stride_meters: float) -> np.ndarray:
    n = int(np.floor(span_meters / stride_meters + 1e-9))
    if n < 1:
        raise ValueError("span must be at least one stride")
    return (np.arange(n) - (n - 1) / 2) * stride_meters


def window_features(model: Union[Network, MultiScaleNet], world: WorldSpec, points: np.ndarray,
                    window_meters: float) -> np.ndarray:
    """Features of aerial windows centred at ``points`` ([n, 2])."""
    side = model.spec.input_side
    if isinstance(model, MultiScaleNet):
        scales = [window_meters * 4 ** k for k in range(3)]  # fine, mid, coarse
    else:
        scales = [window_meters]
    stacks = [np.stack([render_aerial(world, x, y, None, side, meters=m) for x, y in points]) for m in scales]
    return model.features(*stacks)


def fine_heatmap(model: Union[Network, MultiScaleNet], world: WorldSpec, center: tuple[float, float],
                 window_meters: float, stride_meters: float, query_feature, span_meters: Optional[float] = None,
                 alpha: float = HEAT_ALPHA) -> Raster:
    """Sliding-window distance map around ``center``, blended over the aerial view.

    The sampling grid has ``floor(span / stride)`` points per side, centred on
    ``center``. Each point's window is rendered and passed through ``model``.
    """
    span = stride_meters if span_meters is None else span_meters
    off = _offsets(span, stride_meters)
    n = len(off)
    cx, cy = map(float, center)
    reach = (max(window_meters * (16 if isinstance(model, MultiScaleNet) else 1), span)) / 2 + abs(off).max()
    if cx - reach < 0 or cy - reach < 0 or cx + reach > world.extent or cy + reach > world.extent:
        raise ValueError(f"sliding window around ({cx}, {cy}) samples outside the world")
    ys = cy - off  # row 0 is north
    pts = np.array([(cx + dx, y) for y in ys for dx in off])
    feats = window_features(model, world, pts, window_meters)
    q = np.asarray(query_feature, np.float64).reshape(-1)
    if q.shape[0] != feats.shape[1]:
        raise ValueError(f"query has {q.shape[0]} dims, model produces {feats.shape[1]}")
    d = np.sqrt(((feats.astype(np.float64) - q) ** 2).sum(axis=1)).reshape(n, n)
    heat = red_blue(d).astype(np.float64)
    base = render_aerial(world, cx, cy, None, n, meters=n * stride_meters).transpose(1, 2, 0).astype(np.float64)
    px = np.rint(alpha * heat + (1 - alpha) * base).astype(np.uint8)
    grid = GridSpec(cx + off[0] - stride_meters / 2, cy + off[0] - stride_meters / 2, stride_meters, n, n)
    return Raster(px, grid, d)


@dataclass
class CategoryGroups:
    """Feature-coordinate sets averaged into the red, green and blue channels."""

    red: Sequence[int]
    green: Sequence[int]
    blue: Sequence[int]
    names: tuple[str, str, str] = ("urban", "rural", "water-related")
    allow_overlap: bool = False

    @classmethod
    def default(cls) -> "CategoryGroups":
        idx = {n: i for i, n in enumerate(CLASS_NAMES)}
        return cls([idx["suburban"], idx["urban"]], [idx["rural"], idx["forest"]], [idx["water"], idx["coast"]])

    def validate(self, dim: int) -> None:
        groups = (self.red, self.green, self.blue)
        for name, g in zip(self.names, groups):
            if len(g) == 0:
                raise ValueError(f"category group {name!r} is empty")
            bad = [i for i in g if not 0 <= i < dim]
            if bad:
                raise ValueError(f"category group {name!r} has coordinates {bad} outside [0, {dim})")
        if not self.allow_overlap:
            seen: set[int] = set()
            for g in groups:
                if seen & set(g):
                    raise ValueError(f"category groups overlap on {sorted(seen & set(g))}")
                seen |= set(g)


def falsecolor_map(index: ReferenceIndex, groups: Optional[CategoryGroups] = None) -> Raster:
    """Group-mean activations per cell, each channel rescaled to [0, 255] over the raster."""
    groups = groups or CategoryGroups.default()
    groups.validate(index.dim)
    f = index.features.astype(np.float64)
    chans = []
    for g in (groups.red, groups.green, groups.blue):
        v = f[:, list(g)].mean(axis=1)
        lo, hi = v.min(), v.max()
        chans.append((v - lo) / (hi - lo) if hi > lo else np.zeros_like(v))
    rgb = np.stack(chans, axis=1)
    px = np.rint(rgb * 255).astype(np.uint8)
    return Raster(_north_up(px, index.grid).copy(), index.grid, _north_up(rgb, index.grid).copy())


def max_activation_report(model: Union[Network, MultiScaleNet], images, image_ids: Sequence[int],
                          coordinates: Sequence[int], k: int = 5) -> dict[int, list[tuple[int, float]]]:
    """Top-``k`` images per embedding coordinate, highest activation first.

    Ties are broken by ascending image id; repeated ids are counted once.
    ``images`` is one stack, or a (fine, mid, coarse) triple for a multi-scale model.
    """
    stacks = images if isinstance(model, MultiScaleNet) else (images,)
    ids = np.asarray(image_ids, np.int64)
    if len(ids) == 0:
        raise ValueError("image set is empty")
    _, first = np.unique(ids, return_index=True)
    keep = np.sort(first)
    feats = model.features(*(np.asarray(s)[keep] for s in stacks))
    ids = ids[keep]
    dim = feats.shape[1]
    report = {}
    for c in coordinates:
        if not 0 <= c < dim:
            raise ValueError(f"coordinate {c} outside [0, {dim})")
        order = np.lexsort((ids, -feats[:, c].astype(np.float64)))[:k]
        report[int(c)] = [(int(ids[i]), float(feats[i, c])) for i in order]
    return report


def report_csv(report: Mapping[int, list[tuple[int, float]]]) -> str:
    lines = ["coordinate,rank,image_id,activation"]
    for c, rows in report.items():
        lines += [f"{c},{r},{i},{a:.9g}" for r, (i, a) in enumerate(rows, start=1)]
    return "\n".join(lines) + "\n"
