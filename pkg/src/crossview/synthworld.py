"""Procedural paired ground/aerial imagery over a synthetic planar continent.

The world is an fBm value-noise "elevation" field cut into class bands at its
quantiles, so every class covers roughly the same area and "coast" always
borders "water". Both views shade each class by the position of the elevation
inside its band, which gives a continuous, spatially smooth signal on top of
the class label. Aerial tiles are north-up orthographic renders; ground images
are perspective views looking north from the location, with their own palette,
a sky and a class-dependent skyline.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .imageio import ppm_size, read_ppm, write_ppm

CLASS_NAMES = ("water", "coast", "rural", "forest", "desert", "suburban", "urban", "mountain")
DEFAULT_TILE_METERS = {18: 200.0, 16: 800.0, 14: 3200.0}
MANIFEST_COLUMNS = ["id", "x", "y", "class", "split", "ground", "aerial_z18", "aerial_z16", "aerial_z14"]
SPLITS = ("train", "val", "test")

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Landmark:
    """Disc of a fixed class painted over the field (used by test fixtures)."""

    x: float
    y: float
    radius: float
    scene_class: int


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    extent: float = 32000.0
    class_count: int = 8
    noise_octaves: int = 4
    tile_meters: tuple[tuple[int, float], ...] = tuple(DEFAULT_TILE_METERS.items())
    feature_meters: float = 6000.0
    ground_depth: tuple[float, float] = (100.0, 100.0)
    landmarks: tuple[Landmark, ...] = ()

    def __post_init__(self):
        tm = dict(self.tile_meters)
        object.__setattr__(self, "tile_meters", tuple(sorted(tm.items(), reverse=True)))
        zooms = sorted(tm, reverse=True)
        for fine, coarse in zip(zooms, zooms[1:]):
            if not tm[coarse] > tm[fine]:
                raise ValueError("tile_meters must increase as zoom decreases")
            if fine - coarse == 2 and not np.isclose(tm[coarse], 4 * tm[fine]):
                raise ValueError("two zoom levels apart must differ by a factor of 4 in coverage")
        if self.extent < 10 * max(tm.values()):
            raise ValueError(f"extent {self.extent} must be at least 10x the largest tile ({max(tm.values())})")
        if not 2 <= self.class_count <= len(CLASS_NAMES):
            raise ValueError(f"class_count must be in [2, {len(CLASS_NAMES)}]")
        lo, hi = self.ground_depth
        if not 0 < lo <= hi:
            raise ValueError("ground_depth must be an increasing pair of positive distances")

    @property
    def tiles(self) -> dict[int, float]:
        return dict(self.tile_meters)

    @property
    def zooms(self) -> tuple[int, ...]:
        return tuple(z for z, _ in self.tile_meters)

    @property
    def margin(self) -> float:
        """Closest a sample may sit to the world edge."""
        return max(self.tiles.values()) / 2

    def to_text(self) -> str:
        lines = [
            f"seed={self.seed}",
            f"extent={self.extent!r}",
            f"class_count={self.class_count}",
            f"noise_octaves={self.noise_octaves}",
            "tile_meters=" + ",".join(f"{z}:{m!r}" for z, m in self.tile_meters),
            f"feature_meters={self.feature_meters!r}",
            f"ground_depth={self.ground_depth[0]!r},{self.ground_depth[1]!r}",
        ]
        for lm in self.landmarks:
            lines.append(f"landmark={lm.x!r},{lm.y!r},{lm.radius!r},{lm.scene_class}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WorldSpec":
        kw: dict = {}
        landmarks = []
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if k == "landmark":
                x, y, r, c = v.split(",")
                landmarks.append(Landmark(float(x), float(y), float(r), int(c)))
            elif k == "tile_meters":
                kw[k] = tuple((int(a), float(b)) for a, b in (p.split(":") for p in v.split(",")))
            elif k == "ground_depth":
                a, b = v.split(",")
                kw[k] = (float(a), float(b))
            elif k in ("seed", "class_count", "noise_octaves"):
                kw[k] = int(v)
            elif k in ("extent", "feature_meters"):
                kw[k] = float(v)
            else:
                raise ValueError(f"unknown world key {k!r}")
        return cls(landmarks=tuple(landmarks), **kw)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def _mix(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xFF51AFD7ED558CCD)
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xC4CEB9FE1A85EC53)
    return h ^ (h >> np.uint64(33))


def hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0, 1) value per integer lattice point."""
    with np.errstate(over="ignore"):
        a = np.asarray(ix, dtype=np.int64).astype(np.uint64)
        b = np.asarray(iy, dtype=np.int64).astype(np.uint64)
        s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        h = _mix(a * np.uint64(0x9E3779B97F4A7C15) ^ _mix(b * np.uint64(0xC2B2AE3D27D4EB4F) ^ s))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1]."""
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    ix, iy = x0.astype(np.int64), y0.astype(np.int64)
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    v00 = hash01(ix, iy, seed)
    v10 = hash01(ix + 1, iy, seed)
    v01 = hash01(ix, iy + 1, seed)
    v11 = hash01(ix + 1, iy + 1, seed)
    top = v00 + (v10 - v00) * sx
    bot = v01 + (v11 - v01) * sx
    return top + (bot - top) * sy


def fbm(x: np.ndarray, y: np.ndarray, seed: int, octaves: int, persistence: float = 0.5) -> np.ndarray:
    total = np.zeros(np.broadcast(x, y).shape)
    amp, freq, norm = 1.0, 1.0, 0.0
    for o in range(octaves):
        total += amp * value_noise(x * freq, y * freq, seed * 1000003 + o * 7919)
        norm += amp
        amp *= persistence
        freq *= 2.0
    return total / norm


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# World field
# ---------------------------------------------------------------------------

class WorldField:
    """Deterministic sampler of class labels and within-band shading."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        g = np.linspace(0, spec.extent, 256)
        gx, gy = np.meshgrid(g, g)
        e = self.elevation(gx.ravel(), gy.ravel())
        qs = np.quantile(e, np.linspace(0, 1, spec.class_count + 1))
        self.lo, self.hi = float(qs[0]), float(qs[-1])
        self.thresholds = qs[1:-1]
        self.edges = np.concatenate([[self.lo], self.thresholds, [self.hi]])

    def elevation(self, x, y) -> np.ndarray:
        s = self.spec
        return fbm(np.asarray(x, float) / s.feature_meters, np.asarray(y, float) / s.feature_meters, s.seed, s.noise_octaves)

    def sample(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """(class label, position within the class band in [0, 1])."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        e = self.elevation(x, y)
        cls = np.searchsorted(self.thresholds, e, side="right")
        lo, hi = self.edges[cls], self.edges[cls + 1]
        u = np.clip((e - lo) / (hi - lo), 0.0, 1.0)
        for lm in self.spec.landmarks:
            inside = (x - lm.x) ** 2 + (y - lm.y) ** 2 <= lm.radius ** 2
            cls = np.where(inside, lm.scene_class, cls)
            u = np.where(inside, 0.5, u)
        return cls.astype(np.int64), u

    def classes(self, x, y) -> np.ndarray:
        return self.sample(x, y)[0]


@functools.lru_cache(maxsize=16)
def world_field(spec: WorldSpec) -> WorldField:
    return WorldField(spec)


def generate_world_field(spec: WorldSpec) -> WorldField:
    return world_field(spec)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

# [class, (low-end, high-end)] RGB, shaded by the within-band position.
AERIAL_PALETTE = np.array(
    [
        [[10, 30, 80], [40, 80, 140]],  # water
        [[200, 185, 140], [235, 220, 175]],  # coast
        [[150, 170, 70], [200, 190, 100]],  # rural
        [[15, 70, 25], [50, 110, 45]],  # forest
        [[190, 150, 100], [225, 185, 130]],  # desert
        [[120, 130, 110], [160, 165, 145]],  # suburban
        [[80, 80, 85], [125, 120, 120]],  # urban
        [[110, 90, 70], [235, 235, 240]],  # mountain
    ],
    dtype=np.float64,
)
GROUND_PALETTE = np.array(
    [
        [[60, 120, 160], [110, 170, 200]],  # water
        [[225, 210, 160], [245, 235, 200]],  # coast
        [[170, 190, 60], [220, 200, 90]],  # rural
        [[40, 100, 35], [80, 140, 60]],  # forest
        [[220, 170, 110], [245, 205, 150]],  # desert
        [[150, 150, 140], [190, 185, 170]],  # suburban
        [[100, 100, 110], [160, 150, 150]],  # urban
        [[130, 110, 95], [250, 250, 250]],  # mountain
    ],
    dtype=np.float64,
)
# skyline height (fraction of the sky band) and block width in meters per class
SKYLINE = {0: (0.0, 1.0), 1: (0.0, 1.0), 2: (0.04, 40.0), 3: (0.3, 8.0), 4: (0.02, 80.0),
           5: (0.12, 25.0), 6: (0.6, 30.0), 7: (0.8, 300.0)}


def _pattern(cls: np.ndarray, x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Class-specific world-space texture in [0, 1] (0 = base colour, 1 = darkest)."""
    p = np.zeros_like(x)
    n = value_noise(x / 9.0, y / 9.0, seed + 11)
    m = cls == 2  # field stripes, orientation varies per 300 m patch
    if m.any():
        ang = np.pi * value_noise(x[m] / 300.0, y[m] / 300.0, seed + 12)
        t = x[m] * np.cos(ang) + y[m] * np.sin(ang)
        p[m] = 0.5 * (np.sin(2 * np.pi * t / 30.0) > 0.3)
    m = cls == 3  # tree crowns
    if m.any():
        p[m] = 0.8 * (n[m] > 0.55)
    m = cls == 4  # dunes
    if m.any():
        p[m] = 0.25 * (0.5 + 0.5 * np.sin(2 * np.pi * (x[m] + 30 * n[m]) / 45.0))
    m = cls == 5  # sparse houses on a 50 m grid
    if m.any():
        gx, gy = np.mod(x[m], 50.0), np.mod(y[m], 50.0)
        p[m] = 0.5 * ((gx < 5) | (gy < 5)) + 0.35 * ((gx > 15) & (gx < 30) & (gy > 15) & (gy < 30))
    m = cls == 6  # dense blocks and streets
    if m.any():
        gx, gy = np.mod(x[m], 40.0), np.mod(y[m], 40.0)
        p[m] = 0.7 * ((gx < 8) | (gy < 8)) + 0.2 * (n[m] > 0.5)
    m = cls == 7  # rock
    if m.any():
        p[m] = 0.45 * value_noise(x[m] / 25.0, y[m] / 25.0, seed + 13)
    m = (cls == 0) | (cls == 1)
    if m.any():
        p[m] = 0.12 * n[m]
    return np.clip(p, 0.0, 1.0)


def _shade(palette: np.ndarray, cls: np.ndarray, u: np.ndarray, pat: np.ndarray) -> np.ndarray:
    base = palette[cls, 0] + (palette[cls, 1] - palette[cls, 0]) * u[..., None]
    return base * (1.0 - 0.5 * pat[..., None])


def render_aerial(spec: WorldSpec, x: float, y: float, zoom: int, side: int = 64, meters: Optional[float] = None) -> np.ndarray:
    """North-up orthographic tile centred at (x, y) as [3, side, side] uint8."""
    cover = spec.tiles[zoom] if meters is None else float(meters)
    half = cover / 2
    if x - half < 0 or y - half < 0 or x + half > spec.extent or y + half > spec.extent:
        raise ValueError(f"tile of {cover} m at ({x}, {y}) leaves the world [0, {spec.extent}]")
    off = (np.arange(side) + 0.5) / side * cover - half
    px = x + off[None, :]
    py = y - off[:, None]  # row 0 is north
    px, py = np.broadcast_arrays(px, py)
    field = world_field(spec)
    cls, u = field.sample(px, py)
    pat = _pattern(cls, px, py, spec.seed)
    rgb = _shade(AERIAL_PALETTE, cls, u, pat)
    grain = value_noise(px / 4.0, py / 4.0, spec.seed + 21)
    rgb = rgb * (0.92 + 0.16 * grain[..., None])
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8).transpose(2, 0, 1).copy()


def ground_depth_at(spec: WorldSpec, x: float, y: float) -> float:
    lo, hi = spec.ground_depth
    if lo == hi:
        return lo
    r = hash01(np.array([int(round(x * 1000))]), np.array([int(round(y * 1000))]), spec.seed + 31)[0]
    return float(lo + (hi - lo) * r)


def render_ground(spec: WorldSpec, x: float, y: float, side: int = 64) -> np.ndarray:
    """Perspective view looking north from (x, y), [3, side, side] uint8."""
    depth = ground_depth_at(spec, x, y)
    horizon = int(round(side * 0.4))
    field = world_field(spec)
    img = np.empty((side, side, 3))

    # ground: row v in (0, 1] maps to distance depth*(1-v)^2 + 1 along the view axis
    rows = side - horizon
    v = (np.arange(rows) + 0.5) / rows
    dist = depth * (1 - v) ** 2 + 1.0
    lat = (np.arange(side) + 0.5) / side * 2 - 1  # 90 degree field of view
    gy = y + dist[:, None] * np.ones((1, side))
    gx = x + dist[:, None] * lat[None, :]
    cls, u = field.sample(gx, gy)
    pat = _pattern(cls, gx, gy, spec.seed)
    rgb = _shade(GROUND_PALETTE, cls, u, pat)
    haze = (dist / depth)[:, None, None] * 0.35
    sky_low = np.array([200.0, 215.0, 230.0])
    img[horizon:] = rgb * (1 - haze) + sky_low * haze

    # sky gradient with a skyline from the classes at the far edge of the view
    t = (np.arange(horizon) + 0.5) / horizon
    sky_top = np.array([70.0, 120.0, 200.0])
    img[:horizon] = sky_top + (sky_low - sky_top) * t[:, None, None]
    far_x = x + depth * lat
    far_cls, far_u = field.sample(far_x, np.full(side, y + depth))
    for j in range(side):
        frac, block = SKYLINE[int(far_cls[j])]
        if frac <= 0:
            continue
        jitter = hash01(np.array([int(far_x[j] // block)]), np.array([int(far_cls[j])]), spec.seed + 41)[0]
        height = int(round(horizon * frac * (0.5 + 0.5 * jitter)))
        if height:
            col = GROUND_PALETTE[far_cls[j], 0] * (0.55 + 0.2 * far_u[j])
            img[horizon - height : horizon, j] = col

    sensor = hash01(np.arange(side * side).reshape(side, side), np.full((side, side), int(round(x * 1000)) ^ int(round(y * 1000))), spec.seed + 51)
    img = img * (0.95 + 0.1 * sensor[..., None])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(2, 0, 1).copy()


@dataclass
class Sample:
    id: int
    location: tuple[float, float]
    scene_class: int
    ground_image: np.ndarray
    aerial_tiles: dict[int, np.ndarray] = field(default_factory=dict)


def check_location(spec: WorldSpec, x: float, y: float) -> None:
    m = spec.margin
    if not (m <= x <= spec.extent - m and m <= y <= spec.extent - m):
        raise ValueError(
            f"location ({x}, {y}) is closer than {m} m to the world boundary (extent {spec.extent})"
        )


def render_pair(spec: WorldSpec, location: tuple[float, float], side: int = 64, sample_id: int = 0) -> Sample:
    x, y = map(float, location)
    check_location(spec, x, y)
    label = int(world_field(spec).classes(np.array([x]), np.array([y]))[0])
    tiles = {z: render_aerial(spec, x, y, z, side) for z in spec.zooms}
    return Sample(sample_id, (x, y), label, render_ground(spec, x, y, side), tiles)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

class ManifestError(Exception):
    """Base class for manifest problems."""


class MissingAssetError(ManifestError):
    pass


class MalformedManifestError(ManifestError):
    pass


class ImageSizeError(ManifestError):
    pass


@dataclass
class Record:
    id: int
    x: float
    y: float
    scene_class: int
    split: str
    ground: Path
    aerial: dict[int, Path]

    @property
    def location(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class Manifest:
    path: Path
    records: list[Record]
    side: int

    def __len__(self) -> int:
        return len(self.records)

    @property
    def zooms(self) -> tuple[int, ...]:
        zs = set.intersection(*(set(r.aerial) for r in self.records)) if self.records else set()
        return tuple(sorted(zs, reverse=True))

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def by_id(self, rid: int) -> Record:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(f"no record with id {rid}")

    def ground(self, rec: Record) -> np.ndarray:
        return read_ppm(rec.ground)

    def aerial(self, rec: Record, zoom: int) -> np.ndarray:
        if zoom not in rec.aerial:
            raise KeyError(f"record {rec.id} has no aerial tile at zoom {zoom}")
        return read_ppm(rec.aerial[zoom])

    def ground_stack(self, records: Sequence[Record]) -> np.ndarray:
        return _stack([self.ground(r) for r in records], self.side)

    def aerial_stack(self, records: Sequence[Record], zoom: int) -> np.ndarray:
        return _stack([self.aerial(r, zoom) for r in records], self.side)


def _stack(imgs: list, side: int) -> np.ndarray:
    if not imgs:
        return np.zeros((0, 3, side, side), np.uint8)
    return np.stack(imgs)


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def generate_dataset(spec: WorldSpec, n: int, holdout_val: int, holdout_test: int, out_dir,
                     side: int = 64) -> Manifest:
    """Render ``n`` pairs at seeded uniform locations and write images plus ``manifest.csv``."""
    if n <= holdout_val + holdout_test:
        raise ValueError(f"n={n} must exceed holdout_val + holdout_test = {holdout_val + holdout_test}")
    if holdout_val < 0 or holdout_test < 0:
        raise ValueError("holdout counts must be non-negative")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sub in ["ground"] + [f"aerial_z{z}" for z in spec.zooms]:
            (out / sub).mkdir(exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    rng = np.random.default_rng(derive_seed("locations", spec.seed))
    m = spec.margin
    xy = np.round(rng.uniform(m, spec.extent - m, size=(n, 2)), 3)
    order = np.random.default_rng(derive_seed("splits", spec.seed)).permutation(n)
    split = np.array(["train"] * n, dtype=object)
    split[order[:holdout_val]] = "val"
    split[order[holdout_val : holdout_val + holdout_test]] = "test"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    aerial_cols = [f"aerial_z{z}" for z in (18, 16, 14)]
    writer.writerow(MANIFEST_COLUMNS)
    for i in range(n):
        x, y = float(xy[i, 0]), float(xy[i, 1])
        sample = render_pair(spec, (x, y), side, sample_id=i)
        g = f"ground/{i:06d}.ppm"
        write_ppm(out / g, sample.ground_image)
        paths = {}
        for z, tile in sample.aerial_tiles.items():
            paths[z] = f"aerial_z{z}/{i:06d}.ppm"
            write_ppm(out / paths[z], tile)
        row = [i, _fmt(x), _fmt(y), sample.scene_class, split[i], g]
        row += [paths.get(int(c[len("aerial_z"):]), "") for c in aerial_cols]
        writer.writerow(row)
    (out / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "world.cfg").write_text(spec.to_text(), encoding="utf-8")
    return load_manifest(out / "manifest.csv")


def load_manifest(path, class_blocklist: Iterable[int] = (), side: Optional[int] = None) -> Manifest:
    """Parse and validate a manifest; images are decoded lazily.

    ``class_blocklist`` drops records of the listed classes (the filtering
    stage that removes unwanted scene types).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAssetError(f"manifest not found: {path}")
    root = path.parent
    blocked = set(class_blocklist)
    records: list[Record] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:6] != MANIFEST_COLUMNS[:6]:
            raise MalformedManifestError(f"{path}: bad header {header}")
        zoom_cols = {}
        for i, col in enumerate(header[6:], start=6):
            if not col.startswith("aerial_z"):
                raise MalformedManifestError(f"{path}: unexpected column {col!r}")
            zoom_cols[i] = int(col[len("aerial_z"):])
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rid, x, y, cls = int(row[0]), float(row[1]), float(row[2]), int(row[3])
            except ValueError as exc:
                raise MalformedManifestError(f"{path}:{lineno}: {exc}") from exc
            if row[4] not in SPLITS:
                raise MalformedManifestError(f"{path}:{lineno}: unknown split {row[4]!r}")
            if rid in seen:
                raise MalformedManifestError(f"{path}:{lineno}: duplicate id {rid}")
            seen.add(rid)
            aerial = {z: root / row[i] for i, z in zoom_cols.items() if row[i]}
            rec = Record(rid, x, y, cls, row[4], root / row[5], aerial)
            if cls in blocked:
                continue
            records.append(rec)

    for rec in records:
        for p in [rec.ground, *rec.aerial.values()]:
            if not p.is_file():
                raise MissingAssetError(f"missing asset for record {rec.id}: {p}")
            w, h = ppm_size(p)
            if w != h or (side is not None and w != side):
                raise ImageSizeError(f"{p}: image is {w}x{h}, expected square side {side}")
            if side is None:
                side = w
    return Manifest(path, records, side or 0)
