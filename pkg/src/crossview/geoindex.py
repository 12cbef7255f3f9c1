"""Aerial reference database over a regular grid, exact search and rank metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .models import MultiScaleNet, Network, checksum
from .params import FormatError
from .synthworld import WorldSpec, render_aerial

INDEX_MAGIC = b"CVIX"
INDEX_VERSION = 1
THRESHOLDS = (0.001, 0.005, 0.01, 0.02, 0.05) + tuple(round(0.1 * k, 1) for k in range(1, 11))
TIE_RULE = "ties broken by ascending cell index"


class OutsideGridError(ValueError):
    """A location does not fall inside any grid cell."""


@dataclass(frozen=True)
class GridSpec:
    x0: float
    y0: float
    cell: float
    cols: int
    rows: int

    @property
    def size(self) -> int:
        return self.cols * self.rows

    def center(self, index: int) -> tuple[float, float]:
        i, j = divmod(int(index), self.cols)
        return (self.x0 + (j + 0.5) * self.cell, self.y0 + (i + 0.5) * self.cell)

    def centers(self) -> np.ndarray:
        """[rows*cols, 2] cell centres in row-major order."""
        j, i = np.meshgrid(np.arange(self.cols), np.arange(self.rows))
        return np.stack([self.x0 + (j.ravel() + 0.5) * self.cell, self.y0 + (i.ravel() + 0.5) * self.cell], axis=1)

    def cell_of(self, x: float, y: float) -> int:
        j = int(np.floor((x - self.x0) / self.cell))
        i = int(np.floor((y - self.y0) / self.cell))
        # the far edges belong to the last row / column
        if j == self.cols and x == self.x0 + self.cols * self.cell:
            j -= 1
        if i == self.rows and y == self.y0 + self.rows * self.cell:
            i -= 1
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise OutsideGridError(f"location ({x}, {y}) is outside the {self.cols}x{self.rows} grid")
        return i * self.cols + j


def default_grid(world: WorldSpec, cols: int = 50, rows: int = 50) -> GridSpec:
    """Square grid over the region where samples may be drawn."""
    m = world.margin
    side = world.extent - 2 * m
    return GridSpec(m, m, side / max(cols, rows), cols, rows)


@dataclass
class ReferenceIndex:
    grid: GridSpec
    features: np.ndarray
    model_id: bytes = bytes(32)
    zooms: tuple[int, ...] = (18,)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or len(self.features) != self.grid.size:
            raise ValueError(f"expected {self.grid.size} feature rows, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("index features must be finite")
        self._f64 = self.features.astype(np.float64)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_bytes(self) -> bytes:
        g = self.grid
        head = INDEX_MAGIC + struct.pack("<H", INDEX_VERSION)
        # cell width and height are stored separately; this grid is square
        head += struct.pack("<4d2I", g.x0, g.y0, g.cell, g.cell, g.cols, g.rows)
        head += struct.pack("<I", self.dim) + self.model_id.ljust(32, b"\0")[:32]
        head += struct.pack(f"<B{len(self.zooms)}B", len(self.zooms), *self.zooms)
        return head + self.features.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ReferenceIndex":
        if buf[:4] != INDEX_MAGIC:
            raise FormatError("not a CVIX index file")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported CVIX version {version}")
        x0, y0, cell, cell_h, cols, rows = struct.unpack_from("<4d2I", buf, 6)
        if cell_h != cell:
            raise FormatError("non-square grid cells are not supported")
        off = 6 + 40
        (d,) = struct.unpack_from("<I", buf, off)
        model_id = buf[off + 4 : off + 36]
        off += 36
        (nz,) = struct.unpack_from("<B", buf, off)
        zooms = struct.unpack_from(f"<{nz}B", buf, off + 1)
        off += 1 + nz
        n = cols * rows
        if len(buf) - off != 4 * n * d:
            raise FormatError("CVIX payload size does not match the header")
        feats = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d)
        return cls(GridSpec(x0, y0, cell, cols, rows), feats.astype(np.float32), model_id, tuple(zooms))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ReferenceIndex":
        return cls.from_bytes(Path(path).read_bytes())


TileSource = Callable[[float, float, int], np.ndarray]


def world_tiles(world: WorldSpec, side: int = 64) -> TileSource:
    return lambda x, y, zoom: render_aerial(world, x, y, zoom, side)


def build_index(model: Union[Network, MultiScaleNet], source: Union[WorldSpec, TileSource], grid: GridSpec,
                zoom: int = 18, batch_size: int = 128) -> ReferenceIndex:
    """Aerial feature for every grid cell, computed at the cell centre."""
    zooms = tuple(model.zooms) if isinstance(model, MultiScaleNet) else (zoom,)
    if isinstance(source, WorldSpec):
        world = source
        if not set(zooms) <= set(world.zooms):
            raise ValueError(f"model needs zooms {zooms}, world provides {list(world.zooms)}")
        m = max(world.tiles[z] for z in zooms) / 2
        x_lo, y_lo = grid.x0 + grid.cell / 2, grid.y0 + grid.cell / 2
        x_hi = grid.x0 + (grid.cols - 0.5) * grid.cell
        y_hi = grid.y0 + (grid.rows - 0.5) * grid.cell
        if x_lo - m < 0 or y_lo - m < 0 or x_hi + m > world.extent or y_hi + m > world.extent:
            raise OutsideGridError("grid cells lie too close to the world boundary for the required tiles")
        tiles = world_tiles(world, model.spec.input_side)
    else:
        tiles = source

    centers = grid.centers()
    feats = np.empty((grid.size, model.spec.feature_dim), np.float32)
    for s in range(0, grid.size, batch_size):
        chunk = centers[s : s + batch_size]
        stacks = [np.stack([tiles(float(x), float(y), z) for x, y in chunk]) for z in zooms]
        feats[s : s + len(chunk)] = model.features(*stacks)
    return ReferenceIndex(grid, feats, checksum(model), zooms)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

@dataclass
class LocalizationResult:
    query_id: Optional[int]
    order: np.ndarray  # cell indices, best first
    distances: np.ndarray  # aligned with order
    truth_cell: Optional[int] = None
    rank: Optional[int] = None
    rank_percentile: Optional[float] = None

    @property
    def candidates(self) -> list[tuple[int, float]]:
        return list(zip(self.order.tolist(), self.distances.tolist()))


def distances(index: ReferenceIndex, query: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``query`` to every cell (float64)."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query has {q.shape[0]} dims, index has {index.dim}")
    diff = index._f64 - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _truth_cells(grid: GridSpec, truth: tuple[float, float], radius: float) -> np.ndarray:
    cell = grid.cell_of(*truth)
    if radius <= 0:
        return np.array([cell])
    c = grid.centers()
    near = np.flatnonzero(np.hypot(c[:, 0] - truth[0], c[:, 1] - truth[1]) <= radius)
    return np.union1d(near, [cell])


def localize(index: ReferenceIndex, query_feature, truth_location: Optional[tuple[float, float]] = None,
             query_id: Optional[int] = None, radius: float = 0.0) -> LocalizationResult:
    """Rank every cell by feature distance; ties resolve to the lower cell index.

    With ``radius > 0`` every cell whose centre lies within ``radius`` of the
    truth counts as correct and the best of their ranks is reported.
    """
    d = distances(index, query_feature)
    order = np.argsort(d, kind="stable")
    res = LocalizationResult(query_id, order, d[order])
    if truth_location is not None:
        cells = _truth_cells(index.grid, truth_location, radius)
        pos = np.empty(len(order), np.int64)
        pos[order] = np.arange(len(order))
        best = cells[np.argmin(pos[cells])]
        res.truth_cell = int(best)
        res.rank = int(pos[best]) + 1
        res.rank_percentile = res.rank / index.grid.size
    return res


def truth_ranks(index: ReferenceIndex, query_features: np.ndarray, truths: Sequence[tuple[float, float]],
                radius: float = 0.0) -> np.ndarray:
    """1-based rank of each query's truth cell, vectorised over queries."""
    q = np.asarray(query_features, np.float64)
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise ValueError(f"queries have shape {q.shape}, index has {index.dim} dims")
    ranks = np.empty(len(q), np.int64)
    for k in range(len(q)):
        ranks[k] = localize(index, q[k], truths[k], radius=radius).rank
    return ranks


@dataclass
class AccuracyCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> float:
        return float(self.values[np.flatnonzero(np.isclose(self.thresholds, t))[0]])

    def to_csv(self) -> str:
        lines = ["threshold,accuracy"] + [f"{t:g},{v:.6f}" for t, v in zip(self.thresholds, self.values)]
        return "\n".join(lines) + "\n"


@dataclass
class Evaluation:
    curve: AccuracyCurve
    percentiles: np.ndarray
    top1pct: float
    median_percentile: float
    auc: float
    tie_rule: str = TIE_RULE

    def summary(self) -> dict:
        return {
            "top1pct": round(self.top1pct, 6),
            "median_percentile": round(self.median_percentile, 6),
            "auc": round(self.auc, 6),
            "queries": int(len(self.percentiles)),
            "tie_rule": self.tie_rule,
        }

    def write(self, out_dir, prefix: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}_curve.csv").write_text(self.curve.to_csv())
        (out / f"{prefix}_summary.json").write_text(json.dumps(self.summary(), sort_keys=True) + "\n")


def accuracy_curve(percentiles: np.ndarray, thresholds: Sequence[float] = THRESHOLDS) -> AccuracyCurve:
    p = np.asarray(percentiles, float)
    t = np.asarray(thresholds, float)
    # tolerate float noise in rank / count at the threshold itself
    vals = np.array([(p <= x + 1e-12).mean() for x in t])
    return AccuracyCurve(t, vals)


def curve_auc(curve: AccuracyCurve) -> float:
    """Trapezoid area under the sampled curve, anchored at (0, 0)."""
    t = np.concatenate([[0.0], curve.thresholds])
    v = np.concatenate([[0.0], curve.values])
    return float(np.sum((t[1:] - t[:-1]) * (v[1:] + v[:-1]) / 2))


def evaluate(index: ReferenceIndex, queries: Sequence[tuple[np.ndarray, tuple[float, float]]],
             radius: float = 0.0) -> Evaluation:
    """Rank-percentile evaluation over (ground feature, truth location) pairs."""
    if not len(queries):
        raise ValueError("evaluation needs at least one query")
    feats = np.stack([np.asarray(f, np.float64).reshape(-1) for f, _ in queries])
    truths = [tuple(map(float, loc)) for _, loc in queries]
    for k, loc in enumerate(truths):
        try:
            index.grid.cell_of(*loc)
        except OutsideGridError as exc:
            raise OutsideGridError(f"query {k}: {exc}") from None
    pct = truth_ranks(index, feats, truths, radius) / index.grid.size
    curve = accuracy_curve(pct)
    return Evaluation(curve, pct, curve.at(0.01), float(np.median(pct)), curve_auc(curve))
