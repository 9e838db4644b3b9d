"""Multiview honeycomb grids over a bounding box.

Three pointy-top hexagonal tilings (micro/meso/macro diameters) of one area,
each a graph whose nodes carry level-specific traffic features, plus the
hop-limited V2V visibility mask. Hexagon math runs in a local planar frame
(equirectangular around the bbox center); geodesic-exact edges are a
non-goal at dispatch scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_KM, GeoPoint

LEVELS = ("micro", "meso", "macro")

# Feature schema widths per level.
FEATURE_DIMS = {"micro": 3, "meso": 4, "macro": 3}

_KM_PER_DEG = math.pi * EARTH_RADIUS_KM / 180.0

# Axial neighbor directions, pointy-top orientation.
_NEIGHBOR_DIRS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


@dataclass(frozen=True)
class ViewSpec:
    """One view level and its cell size; the radius band must match the level."""

    level: str
    cell_diameter_km: float
    feature_dim: int = 0

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown view level {self.level!r}")
        if not self.cell_diameter_km > 0:
            raise ValueError(f"cell diameter must be positive, got {self.cell_diameter_km}")
        radius = self.cell_diameter_km / 2
        if self.level == "micro" and radius > 1.0:
            raise ValueError(f"micro radius {radius} km exceeds 1 km band")
        if self.level == "meso" and not 1.0 < radius < 5.0:
            raise ValueError(f"meso radius {radius} km outside (1, 5) km band")
        if self.level == "macro" and radius < 5.0:
            raise ValueError(f"macro radius {radius} km below 5 km band")
        if self.feature_dim == 0:
            object.__setattr__(self, "feature_dim", FEATURE_DIMS[self.level])
        elif self.feature_dim != FEATURE_DIMS[self.level]:
            raise ValueError(f"{self.level} feature_dim must be {FEATURE_DIMS[self.level]}, got {self.feature_dim}")


@dataclass(frozen=True)
class HexCell:
    view: str
    q: int
    r: int
    center: GeoPoint

    @property
    def axial(self) -> tuple[int, int]:
        return (self.q, self.r)


@dataclass(frozen=True)
class HopVisibility:
    """V2V relay channel limits: per-hop delay range and total latency budget."""

    hop_delay_ms: tuple[float, float] = (50.0, 200.0)
    budget_ms: float = 1000.0

    def __post_init__(self):
        lo, hi = self.hop_delay_ms
        if not 0 < lo <= hi:
            raise ValueError(f"bad hop delay range {self.hop_delay_ms}")
        if self.budget_ms <= 0:
            raise ValueError("latency budget must be positive")

    @property
    def max_hops(self) -> int:
        """Hops guaranteed within budget even at worst-case per-hop delay."""
        return int(self.budget_ms // self.hop_delay_ms[1])


class _Frame:
    """Local planar frame: km east/north of the bbox center."""

    def __init__(self, lat_min, lat_max, lon_min, lon_max):
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError(f"degenerate bbox ({lat_min}, {lon_min}) - ({lat_max}, {lon_max})")
        self.lat_min, self.lat_max = lat_min, lat_max
        self.lon_min, self.lon_max = lon_min, lon_max
        self.lat0 = (lat_min + lat_max) / 2
        self.lon0 = (lon_min + lon_max) / 2
        self.kx = _KM_PER_DEG * math.cos(math.radians(self.lat0))
        self.ky = _KM_PER_DEG

    def to_xy(self, p: GeoPoint) -> tuple[float, float]:
        return (p.lon - self.lon0) * self.kx, (p.lat - self.lat0) * self.ky

    def to_point(self, x: float, y: float) -> GeoPoint:
        return GeoPoint(self.lat0 + y / self.ky, self.lon0 + x / self.kx)

    def contains(self, p: GeoPoint) -> bool:
        return self.lat_min <= p.lat <= self.lat_max and self.lon_min <= p.lon <= self.lon_max

    @property
    def rect_xy(self) -> list[tuple[float, float]]:
        xs = [(self.lon_min - self.lon0) * self.kx, (self.lon_max - self.lon0) * self.kx]
        ys = [(self.lat_min - self.lat0) * self.ky, (self.lat_max - self.lat0) * self.ky]
        return [(xs[0], ys[0]), (xs[1], ys[0]), (xs[1], ys[1]), (xs[0], ys[1])]


def _axial_center(q: int, r: int, size: float) -> tuple[float, float]:
    return size * math.sqrt(3.0) * (q + r / 2.0), size * 1.5 * r


def _axial_round(qf: float, rf: float) -> tuple[int, int]:
    xf, zf = qf, rf
    yf = -xf - zf
    rx, ry, rz = round(xf), round(yf), round(zf)
    dx, dy, dz = abs(rx - xf), abs(ry - yf), abs(rz - zf)
    if dx > dy and dx > dz:
        rx = -ry - rz
    elif dy > dz:
        ry = -rx - rz
    else:
        rz = -rx - ry
    return int(rx), int(rz)


def _hex_vertices(cx: float, cy: float, size: float) -> list[tuple[float, float]]:
    """Pointy-top hexagon: vertices at 30 + 60k degrees from +x."""
    out = []
    for k in range(6):
        a = math.radians(30 + 60 * k)
        out.append((cx + size * math.cos(a), cy + size * math.sin(a)))
    return out


def _point_in_hex(px, py, cx, cy, size, eps=1e-9) -> bool:
    dx, dy = px - cx, py - cy
    inradius = size * math.sqrt(3.0) / 2
    for a in (0.0, math.pi / 3, 2 * math.pi / 3):
        if abs(dx * math.cos(a) + dy * math.sin(a)) > inradius + eps:
            return False
    return True


def _polygons_intersect(poly_a, poly_b) -> bool:
    """Separating-axis test for convex polygons (closed: touching counts)."""
    for poly in (poly_a, poly_b):
        n = len(poly)
        for i in range(n):
            ex = poly[(i + 1) % n][0] - poly[i][0]
            ey = poly[(i + 1) % n][1] - poly[i][1]
            ax, ay = -ey, ex
            proj_a = [ax * x + ay * y for x, y in poly_a]
            proj_b = [ax * x + ay * y for x, y in poly_b]
            if max(proj_a) < min(proj_b) - 1e-12 or max(proj_b) < min(proj_a) - 1e-12:
                return False
    return True


class HexGrid:
    """One level's tiling: cells, adjacency, and point-to-cell lookup."""

    def __init__(self, bbox: tuple[GeoPoint, GeoPoint], spec: ViewSpec):
        sw, ne = bbox
        self.spec = spec
        self.frame = _Frame(sw.lat, ne.lat, sw.lon, ne.lon)
        self.size_km = spec.cell_diameter_km / 2
        self.cells: list[HexCell] = []
        self._index: dict[tuple[int, int], int] = {}
        self._build()
        self.adjacency = self._build_adjacency()

    def _build(self):
        rect = self.frame.rect_xy
        qfs, rfs = [], []
        for x, y in rect:
            qf = (math.sqrt(3.0) / 3.0 * x - y / 3.0) / self.size_km
            rf = (2.0 / 3.0 * y) / self.size_km
            qfs.append(qf)
            rfs.append(rf)
        pad = 2
        found = []
        for r in range(math.floor(min(rfs)) - pad, math.ceil(max(rfs)) + pad + 1):
            for q in range(math.floor(min(qfs) - max(rfs) / 2) - pad, math.ceil(max(qfs) - min(rfs) / 2) + pad + 1):
                cx, cy = _axial_center(q, r, self.size_km)
                hexagon = _hex_vertices(cx, cy, self.size_km)
                if _polygons_intersect(hexagon, rect):
                    found.append((q, r, cx, cy))
        found.sort(key=lambda t: (t[0], t[1]))
        for idx, (q, r, cx, cy) in enumerate(found):
            self.cells.append(HexCell(self.spec.level, q, r, self.frame.to_point(cx, cy)))
            self._index[(q, r)] = idx

    def _build_adjacency(self) -> np.ndarray:
        n = len(self.cells)
        adj = np.zeros((n, n), dtype=np.float64)
        for (q, r), i in self._index.items():
            for dq, dr in _NEIGHBOR_DIRS:
                j = self._index.get((q + dq, r + dr))
                if j is not None:
                    adj[i, j] = 1.0
                    adj[j, i] = 1.0
        return adj

    def __len__(self):
        return len(self.cells)

    def cell_index(self, cell: HexCell) -> int:
        return self._index[(cell.q, cell.r)]

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())

    def point_to_index(self, p: GeoPoint) -> int:
        """Index of the cell whose hexagon contains p; boundary ties go to the
        lexicographically smallest (q, r)."""
        if not self.frame.contains(p):
            raise ValueError(f"point ({p.lat}, {p.lon}) outside grid bbox")
        x, y = self.frame.to_xy(p)
        qf = (math.sqrt(3.0) / 3.0 * x - y / 3.0) / self.size_km
        rf = (2.0 / 3.0 * y) / self.size_km
        q0, r0 = _axial_round(qf, rf)
        candidates = [(q0, r0)] + [(q0 + dq, r0 + dr) for dq, dr in _NEIGHBOR_DIRS]
        containing = []
        for q, r in candidates:
            if (q, r) not in self._index:
                continue
            cx, cy = _axial_center(q, r, self.size_km)
            if _point_in_hex(x, y, cx, cy, self.size_km):
                containing.append((q, r))
        if not containing:  # numeric corner: fall back to nearest known center
            best = min(
                self._index,
                key=lambda qr: (x - _axial_center(*qr, self.size_km)[0]) ** 2
                + (y - _axial_center(*qr, self.size_km)[1]) ** 2,
            )
            return self._index[best]
        return self._index[min(containing)]

    def point_to_cell(self, p: GeoPoint) -> HexCell:
        return self.cells[self.point_to_index(p)]

    def hex_vertices_xy(self, i: int) -> list[tuple[float, float]]:
        cell = self.cells[i]
        cx, cy = _axial_center(cell.q, cell.r, self.size_km)
        return _hex_vertices(cx, cy, self.size_km)


def build_grid(bbox: tuple[GeoPoint, GeoPoint], spec: ViewSpec) -> HexGrid:
    return HexGrid(bbox, spec)


def default_view_specs(micro_km=2.0, meso_km=5.0, macro_km=10.0) -> dict[str, ViewSpec]:
    return {
        "micro": ViewSpec("micro", micro_km),
        "meso": ViewSpec("meso", meso_km),
        "macro": ViewSpec("macro", macro_km),
    }


class GridSet:
    """The three per-level grids over one bounding box."""

    def __init__(self, bbox: tuple[GeoPoint, GeoPoint], specs: dict[str, ViewSpec] | None = None):
        self.bbox = bbox
        specs = specs or default_view_specs()
        self.grids = {level: HexGrid(bbox, specs[level]) for level in LEVELS}
        # Micro cells grouped under the macro cell containing their center.
        self._micro_in_macro: dict[int, list[int]] = {i: [] for i in range(len(self.grids["macro"]))}
        for mi, cell in enumerate(self.grids["micro"].cells):
            try:
                self._micro_in_macro[self.grids["macro"].point_to_index(cell.center)].append(mi)
            except ValueError:
                pass  # micro cell center just outside the bbox

    def __getitem__(self, level: str) -> HexGrid:
        return self.grids[level]

    def micro_indices_in_macro(self, macro_idx: int) -> list[int]:
        return self._micro_in_macro[macro_idx]


@dataclass
class MultiviewGraph:
    """Per-level node sets/adjacency plus one tick's feature matrices."""

    grids: GridSet
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        for level in LEVELS:
            x = self.features[level]
            expect = (len(self.grids[level]), FEATURE_DIMS[level])
            if x.shape != expect:
                raise ValueError(f"{level} feature matrix shape {x.shape} != {expect}")
            if not np.isfinite(x).all():
                raise ValueError(f"{level} features contain non-finite values")


# -- feature computation ----------------------------------------------------


def empty_cell_features(grids: GridSet, level: str) -> np.ndarray:
    """Feature rows of a snapshot with no vehicles (used as the masked default)."""
    n = len(grids[level])
    if level == "micro":
        out = np.zeros((n, 3))
        out[:, 2] = 1.0  # free-flow congestion ratio
    elif level == "meso":
        out = np.zeros((n, 4))
    else:
        out = np.zeros((n, 3))
        grid = grids["macro"]
        for i in range(n):
            out[i, 1] = grid.degree(i) / 6.0
            out[i, 2] = 1.0
    return out


def compute_features(snapshot, grids: GridSet, level: str) -> np.ndarray:
    """Raw (un-normalized) per-cell traffic proxies for one level.

    micro: vehicle count, mean speed (km/h), congestion ratio (speed/free-flow).
    meso: entered-cell volume, mean speed, sharp-turn fraction, idle count.
    macro: mean travel time of trips ending in cell (trailing window),
           degree/6 connectivity, mean micro congestion of contained cells.
    """
    out = empty_cell_features(grids, level)
    grid = grids[level]
    positions = snapshot.vehicle_positions
    n_veh = len(positions)
    cell_of = np.full(n_veh, -1, dtype=int)
    for vi, p in enumerate(positions):
        try:
            cell_of[vi] = grid.point_to_index(p)
        except ValueError:
            continue

    if level == "micro":
        for ci in range(len(grid)):
            sel = cell_of == ci
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            mean_speed = float(np.mean(snapshot.vehicle_speeds_kmh[sel]))
            out[ci] = (cnt, mean_speed, mean_speed / snapshot.free_flow_kmh)
    elif level == "meso":
        prev = snapshot.prev_positions
        entered = np.zeros(n_veh, dtype=bool)
        if prev is not None:
            for vi, pp in enumerate(prev):
                if pp is None or cell_of[vi] < 0:
                    continue
                try:
                    entered[vi] = grid.point_to_index(pp) != cell_of[vi]
                except ValueError:
                    entered[vi] = True
        for ci in range(len(grid)):
            sel = cell_of == ci
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            out[ci, 0] = int(entered[sel].sum())
            out[ci, 1] = float(np.mean(snapshot.vehicle_speeds_kmh[sel]))
            out[ci, 2] = float(np.mean(snapshot.heading_changes_deg[sel] >= 45.0))
            out[ci, 3] = int(snapshot.vehicle_idle[sel].sum())
    else:
        micro = compute_features(snapshot, grids, "micro")
        for ci in range(len(grid)):
            times = [t for (dest, t) in snapshot.recent_trips if _safe_index(grid, dest) == ci]
            if times:
                out[ci, 0] = float(np.mean(times))
            contained = grids.micro_indices_in_macro(ci)
            if contained:
                out[ci, 2] = float(np.mean(micro[contained, 2]))
    return out


def _safe_index(grid: HexGrid, p: GeoPoint) -> int:
    try:
        return grid.point_to_index(p)
    except ValueError:
        return -1


class FeatureNormalizer:
    """Per-level, per-column z-normalization with training-set statistics."""

    def __init__(self, mean: dict[str, np.ndarray], std: dict[str, np.ndarray]):
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, raw_by_level: dict[str, list[np.ndarray]]) -> "FeatureNormalizer":
        mean, std = {}, {}
        for level, mats in raw_by_level.items():
            stacked = np.concatenate(mats, axis=0)
            mean[level] = stacked.mean(axis=0)
            s = stacked.std(axis=0)
            std[level] = np.where(s > 1e-12, s, 1.0)
        return cls(mean, std)

    def apply(self, x: np.ndarray, level: str) -> np.ndarray:
        return (x - self.mean[level]) / self.std[level]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for level in self.mean:
            out[f"norm/{level}/mean"] = self.mean[level]
            out[f"norm/{level}/std"] = self.std[level]
        return out

    @classmethod
    def from_tensors(cls, params: dict[str, np.ndarray]) -> "FeatureNormalizer":
        mean = {lv: params[f"norm/{lv}/mean"] for lv in LEVELS if f"norm/{lv}/mean" in params}
        std = {lv: params[f"norm/{lv}/std"] for lv in LEVELS if f"norm/{lv}/std" in params}
        return cls(mean, std)


# -- hop-limited visibility ---------------------------------------------------


def sample_edge_delays(grid: HexGrid, vis: HopVisibility, rng) -> dict[tuple[int, int], float]:
    """One relay delay per undirected edge, drawn from the configured range.

    Sampled once per tick and shared by every vehicle observing that tick.
    """
    lo, hi = vis.hop_delay_ms
    edge_delay: dict[tuple[int, int], float] = {}
    ii, jj = np.nonzero(grid.adjacency)
    for i, j in zip(ii.tolist(), jj.tolist()):
        if i < j:
            edge_delay[(i, j)] = lo + (hi - lo) * rng.random()
    return edge_delay


def hop_delays(
    grid: HexGrid,
    ego_index: int,
    vis: HopVisibility,
    rng=None,
    edge_delays: dict[tuple[int, int], float] | None = None,
) -> np.ndarray:
    """Cumulative relay delay (ms) to every cell along minimum-hop paths.

    A cell's delay is the cheapest over its minimum-hop predecessors;
    unreachable cells get +inf.
    """
    n = len(grid)
    adj = grid.adjacency
    edge_delay = edge_delays if edge_delays is not None else sample_edge_delays(grid, vis, rng)

    delay = np.full(n, np.inf)
    hop = np.full(n, -1, dtype=int)
    delay[ego_index] = 0.0
    hop[ego_index] = 0
    frontier = [ego_index]
    h = 0
    while frontier:
        nxt: dict[int, float] = {}
        for i in frontier:
            for j in np.nonzero(adj[i])[0].tolist():
                if hop[j] != -1 and hop[j] <= h:
                    continue
                d = delay[i] + edge_delay[(min(i, j), max(i, j))]
                if j not in nxt or d < nxt[j]:
                    nxt[j] = d
        for j, d in nxt.items():
            hop[j] = h + 1
            delay[j] = d
        frontier = sorted(nxt)
        h += 1
    return delay


def restrict_by_hops(
    grid: HexGrid,
    ego_index: int,
    features: np.ndarray,
    default_rows: np.ndarray,
    vis: HopVisibility,
    rng=None,
    edge_delays: dict[tuple[int, int], float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Replace feature rows of cells whose relay delay exceeds the budget.

    Returns (masked features, visibility mask). The ego cell is always visible.
    """
    delay = hop_delays(grid, ego_index, vis, rng, edge_delays=edge_delays)
    visible = delay <= vis.budget_ms
    visible[ego_index] = True
    masked = np.where(visible[:, None], features, default_rows)
    return masked, visible


# -- serialization ------------------------------------------------------------


def save_grid(grid: HexGrid, path) -> None:
    lines = ["hexfleet-grid v1"]
    lines.append(f"view {grid.spec.level}")
    lines.append(f"diameter_km {grid.spec.cell_diameter_km!r}")
    f = grid.frame
    lines.append(f"bbox {f.lat_min!r} {f.lon_min!r} {f.lat_max!r} {f.lon_max!r}")
    lines.append(f"cells {len(grid.cells)}")
    for c in grid.cells:
        lines.append(f"{c.q} {c.r} {c.center.lat!r} {c.center.lon!r}")
    ii, jj = np.nonzero(np.triu(grid.adjacency))
    lines.append(f"edges {len(ii)}")
    for i, j in zip(ii.tolist(), jj.tolist()):
        lines.append(f"{i} {j}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path) -> HexGrid:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "hexfleet-grid v1":
        raise ValueError(f"{path}: not a hexfleet grid file")
    level = lines[1].split()[1]
    diameter = float(lines[2].split()[1])
    _, lat_min, lon_min, lat_max, lon_max = lines[3].split()
    bbox = (GeoPoint(float(lat_min), float(lon_min)), GeoPoint(float(lat_max), float(lon_max)))
    grid = HexGrid(bbox, ViewSpec(level, diameter))
    n_cells = int(lines[4].split()[1])
    stored = set()
    for k in range(n_cells):
        q, r, _, _ = lines[5 + k].split()
        stored.add((int(q), int(r)))
    if stored != set(grid._index):
        raise ValueError(f"{path}: stored cells disagree with rebuilt tiling")
    return grid
