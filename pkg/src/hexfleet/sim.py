"""Synthetic-city fleet simulator.

Straight-line kinematics on a bounded box: empty vehicles move by their
dispatch actions (capped at what free-flow speed allows per tick), assigned
vehicles drive to the pickup then the drop-off, orders arrive as a Poisson
stream mixed between a uniform background and Gaussian hotspots.

Ground-truth driver behavior gives the learning stack its signal: each
driver cruises inside a familiar cell cluster (headings sampled by
familiarity, slower in crowded cells, farther during demand surges) and
beelines home after drop-offs outside it.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geo import GeoPoint, azimuth_deg, displace, haversine_km
from .hexgraph import GridSet, default_view_specs
from .policy import Action

log = logging.getLogger(__name__)


@dataclass
class SimParams:
    dt_s: float = 30.0
    cruise_kmh: float = 40.0
    free_flow_kmh: float = 60.0
    r_max_km: float = 5.0
    base_fare: float = 2.5
    fare_per_km: float = 1.5
    pickup_deadline_s: float = 600.0
    median_fare_window_s: float = 3600.0
    trip_time_window_s: float = 1800.0
    hotspot_sigma_km: float = 1.2
    hotspot_background_frac: float = 0.15  # orders not tied to any hotspot
    hotspot_inset_frac: float = 0.3  # hotspots stay this deep inside the bbox
    # ground-truth behavior knobs
    cluster_cells: int = 6
    crowd_slowdown: float = 0.2
    hustle_factor: float = 1.5
    heading_jitter_deg: float = 8.0
    surge_period_ticks: int = 40
    surge_order_multiplier: float = 4.0
    surge_dis_multiplier: float = 1.3


@dataclass
class Order:
    id: int
    origin: GeoPoint
    destination: GeoPoint
    fare: float
    created_at: float
    deadline: float
    state: str = "waiting"  # waiting | assigned | completed | expired
    assigned_to: int | None = None
    assigned_at: float | None = None
    pickup_time: float | None = None
    dropoff_time: float | None = None

    def __post_init__(self):
        if self.fare <= 0:
            raise ValueError(f"order fare must be positive, got {self.fare}")


@dataclass
class Vehicle:
    id: int
    pos: GeoPoint
    familiarity: np.ndarray  # weight per micro cell, sums to 1
    status: str = "empty"  # empty | occupied
    phase: str | None = None  # to_pickup | to_dropoff while occupied
    order: Order | None = None
    idle_s: float = 0.0  # seconds without a passenger aboard (incl. pickup legs)
    total_s: float = 0.0
    prev_pos: GeoPoint | None = None
    heading_prev: float | None = None
    heading_change_deg: float = 0.0
    trajectory: list = field(default_factory=list)  # (t_s, lat, lon, status01, fare)

    def speed_kmh(self, dt_s: float) -> float:
        if self.prev_pos is None:
            return 0.0
        return haversine_km(self.prev_pos, self.pos) / dt_s * 3600.0


@dataclass
class SimSnapshot:
    """One tick's immutable observation set for feature computation."""

    time_s: float
    vehicle_positions: list
    vehicle_speeds_kmh: np.ndarray
    vehicle_idle: np.ndarray
    prev_positions: list | None
    heading_changes_deg: np.ndarray
    free_flow_kmh: float
    recent_trips: list  # (destination, travel_time_s)


@dataclass
class Metrics:
    error_km: float
    empty_loaded_rate: float
    order_acceptance_rate: float


class World:
    """Mutable simulation state; one owner mutates it tick by tick."""

    def __init__(self, seed, bbox, grids: GridSet, vehicles, order_rate_per_min, hotspots, params: SimParams):
        self.bbox = bbox
        self.grids = grids
        self.vehicles = vehicles
        self.order_rate_per_min = order_rate_per_min
        self.hotspots = hotspots
        self.params = params
        self.time_s = 0.0
        self.tick = 0
        self.orders: list[Order] = []
        self._order_seq = 0
        self.recent_trips: deque = deque()  # (destination, travel_time_s, completed_at)
        self.cell_fares: deque = deque()  # (meso_cell_index, fare, completed_at)
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(3 + len(vehicles))
        self.orders_rng = np.random.default_rng(children[0])
        self.delay_rng = np.random.default_rng(children[1])
        self.misc_rng = np.random.default_rng(children[2])
        self.behavior_rngs = {v.id: np.random.default_rng(children[3 + i]) for i, v in enumerate(vehicles)}

    # -- bookkeeping helpers ------------------------------------------------

    def waiting_orders(self) -> list[Order]:
        return [o for o in self.orders if o.state == "waiting"]

    def surge_active(self) -> bool:
        half = self.params.surge_period_ticks // 2
        return (self.tick % self.params.surge_period_ticks) >= half

    def clamp(self, p: GeoPoint) -> GeoPoint:
        sw, ne = self.bbox
        lat = min(max(p.lat, sw.lat), ne.lat)
        lon = min(max(p.lon, sw.lon), ne.lon)
        return p if (lat == p.lat and lon == p.lon) else GeoPoint(lat, lon)

    def snapshot(self) -> SimSnapshot:
        cutoff = self.time_s - self.params.trip_time_window_s
        trips = [(dest, tt) for dest, tt, at in self.recent_trips if at >= cutoff]
        return SimSnapshot(
            time_s=self.time_s,
            vehicle_positions=[v.pos for v in self.vehicles],
            vehicle_speeds_kmh=np.array([v.speed_kmh(self.params.dt_s) for v in self.vehicles]),
            vehicle_idle=np.array([v.status == "empty" for v in self.vehicles]),
            prev_positions=[v.prev_pos for v in self.vehicles],
            heading_changes_deg=np.array([v.heading_change_deg for v in self.vehicles]),
            free_flow_kmh=self.params.free_flow_kmh,
            recent_trips=trips,
        )

    def regional_median_fare(self, p: GeoPoint) -> float:
        """Median completed-trip fare in the meso cell of p over the trailing window."""
        cutoff = self.time_s - self.params.median_fare_window_s
        while self.cell_fares and self.cell_fares[0][2] < cutoff:
            self.cell_fares.popleft()
        try:
            cell = self.grids["meso"].point_to_index(p)
        except ValueError:
            return 0.0
        fares = [f for c, f, _ in self.cell_fares if c == cell]
        return float(np.median(fares)) if fares else 0.0


# -- city generation ----------------------------------------------------------


def _intensity_weight(p: GeoPoint, hotspots, sigma_km) -> float:
    w = 0.25
    for h in hotspots:
        d = haversine_km(p, h)
        w += math.exp(-0.5 * (d / sigma_km) ** 2)
    return w


def _grow_cluster(grid, seed_idx: int, n_cells: int, rng) -> list[int]:
    cluster = [seed_idx]
    frontier = {seed_idx}
    while len(cluster) < n_cells:
        edge = sorted({j for i in frontier for j in np.nonzero(grid.adjacency[i])[0].tolist()} - set(cluster))
        if not edge:
            break
        pick = edge[int(rng.integers(0, len(edge)))]
        cluster.append(pick)
        frontier.add(pick)
    return cluster


def make_familiarity(grid, rng, n_cells: int, anchor: GeoPoint | None, hotspots, sigma_km) -> np.ndarray:
    """Smoothed weight field concentrated on a contiguous cell cluster.

    The cluster seed is drawn proportionally to order intensity (drivers
    favor demand-rich areas) unless an explicit anchor is given.
    """
    n = len(grid)
    if anchor is not None:
        seed_idx = grid.point_to_index(anchor)
    else:
        weights = np.array([_intensity_weight(c.center, hotspots, sigma_km) for c in grid.cells])
        weights /= weights.sum()
        seed_idx = int(rng.choice(n, p=weights))
    cluster = _grow_cluster(grid, seed_idx, n_cells, rng)
    fam = np.full(n, 0.02)
    fam[cluster] = 1.0
    adj = grid.adjacency + np.eye(n)
    deg = adj.sum(axis=1)
    for _ in range(2):  # neighbor-averaging smoothing passes
        fam = 0.5 * fam + 0.5 * (adj @ fam) / deg
    return fam / fam.sum()


def _seed_key(seed) -> tuple[int, ...]:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def generate_city(
    seed,
    bbox: tuple[GeoPoint, GeoPoint],
    n_vehicles: int,
    order_rate_per_min: float,
    n_hotspots: int = 0,
    params: SimParams | None = None,
    specs=None,
    cluster_anchors: list[GeoPoint] | None = None,
    anchor_to_hotspots: bool = False,
) -> World:
    if n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    params = params or SimParams()
    grids = GridSet(bbox, specs or default_view_specs())
    sw, ne = bbox
    layout_rng = np.random.default_rng(np.random.SeedSequence(_seed_key(seed) + (0xC17,)))

    inset = params.hotspot_inset_frac
    lat_span, lon_span = ne.lat - sw.lat, ne.lon - sw.lon
    min_sep_km = 0.35 * min(lat_span, lon_span) * 111.0
    hotspots: list[GeoPoint] = []
    attempts = 0
    while len(hotspots) < n_hotspots:
        cand = GeoPoint(
            layout_rng.uniform(sw.lat + inset * lat_span, ne.lat - inset * lat_span),
            layout_rng.uniform(sw.lon + inset * lon_span, ne.lon - inset * lon_span),
        )
        attempts += 1
        if attempts > 50 or all(haversine_km(cand, h) >= min_sep_km for h in hotspots):
            hotspots.append(cand)
            attempts = 0

    if anchor_to_hotspots and hotspots and cluster_anchors is None:
        cluster_anchors = hotspots

    vehicles = []
    micro = grids["micro"]
    for i in range(n_vehicles):
        pos = GeoPoint(layout_rng.uniform(sw.lat, ne.lat), layout_rng.uniform(sw.lon, ne.lon))
        anchor = cluster_anchors[i % len(cluster_anchors)] if cluster_anchors else None
        fam = make_familiarity(micro, layout_rng, params.cluster_cells, anchor, hotspots, params.hotspot_sigma_km)
        vehicles.append(Vehicle(id=i, pos=pos, familiarity=fam))
    return World(_seed_key(seed), bbox, grids, vehicles, order_rate_per_min, hotspots, params)


def sample_order_location(world: World) -> GeoPoint:
    sw, ne = world.bbox
    rng = world.orders_rng
    if not world.hotspots or rng.random() < world.params.hotspot_background_frac:
        return GeoPoint(rng.uniform(sw.lat, ne.lat), rng.uniform(sw.lon, ne.lon))
    h = world.hotspots[int(rng.integers(0, len(world.hotspots)))]
    sigma_deg = world.params.hotspot_sigma_km / 111.0
    for _ in range(20):
        p_lat = rng.normal(h.lat, sigma_deg)
        p_lon = rng.normal(h.lon, sigma_deg / max(0.2, math.cos(math.radians(h.lat))))
        if sw.lat <= p_lat <= ne.lat and sw.lon <= p_lon <= ne.lon:
            return GeoPoint(p_lat, p_lon)
    return GeoPoint(h.lat, h.lon)


def _spawn_orders(world: World, dt: float) -> None:
    rate = world.order_rate_per_min * dt / 60.0
    if world.surge_active():
        rate *= world.params.surge_order_multiplier
    count = int(world.orders_rng.poisson(rate))
    sw, ne = world.bbox
    for _ in range(count):
        origin = sample_order_location(world)
        dest = GeoPoint(world.orders_rng.uniform(sw.lat, ne.lat), world.orders_rng.uniform(sw.lon, ne.lon))
        fare = world.params.base_fare + world.params.fare_per_km * haversine_km(origin, dest)
        world.orders.append(
            Order(
                id=world._order_seq,
                origin=origin,
                destination=dest,
                fare=fare,
                created_at=world.time_s,
                deadline=world.time_s + world.params.pickup_deadline_s,
            )
        )
        world._order_seq += 1


# -- dynamics -----------------------------------------------------------------


def _advance_along(world: World, v: Vehicle, target: GeoPoint, budget_km: float) -> bool:
    """Move v toward target; True when it arrives within this tick's budget."""
    gap = haversine_km(v.pos, target)
    if gap <= budget_km or gap < 1e-9:
        v.pos = target
        return True
    v.pos = displace(v.pos, budget_km, azimuth_deg(v.pos, target))
    return False


def step(world: World, actions: dict[int, Action], dt: float | None = None) -> None:
    """Advance one tick: apply relocations, drive trips, expire and spawn orders."""
    p = world.params
    dt = p.dt_s if dt is None else dt
    new_time = world.time_s + dt
    cap_km = p.free_flow_kmh * dt / 3600.0

    for v in world.vehicles:
        v.prev_pos = v.pos
        fare_booked = 0.0
        heading = None

        if v.status == "empty":
            act = actions.get(v.id)
            if act is not None:
                d = min(act.dis_norm * p.r_max_km, cap_km)
                if d > 1e-12:
                    heading = act.deg
                    v.pos = world.clamp(displace(v.pos, d, act.deg))
            v.idle_s += dt
        else:
            if v.phase == "to_pickup":
                v.idle_s += dt  # empty-loaded: no passenger aboard yet
            if v.id in actions:
                log.warning("action for occupied vehicle %d ignored", v.id)
            order = v.order
            if v.phase == "to_pickup":
                if v.pos.lat != order.origin.lat or v.pos.lon != order.origin.lon:
                    heading = azimuth_deg(v.pos, order.origin)
                if _advance_along(world, v, order.origin, cap_km):
                    order.pickup_time = new_time
                    v.phase = "to_dropoff"
            elif v.phase == "to_dropoff":
                if v.pos.lat != order.destination.lat or v.pos.lon != order.destination.lon:
                    heading = azimuth_deg(v.pos, order.destination)
                if _advance_along(world, v, order.destination, cap_km):
                    order.dropoff_time = new_time
                    order.state = "completed"
                    fare_booked = order.fare
                    travel_time = order.dropoff_time - order.pickup_time
                    world.recent_trips.append((order.destination, travel_time, new_time))
                    try:
                        meso_cell = world.grids["meso"].point_to_index(order.destination)
                        world.cell_fares.append((meso_cell, order.fare, new_time))
                    except ValueError:
                        pass
                    v.status = "empty"
                    v.phase = None
                    v.order = None

        v.total_s += dt
        if heading is not None and v.heading_prev is not None:
            diff = abs(heading - v.heading_prev) % 360.0
            v.heading_change_deg = min(diff, 360.0 - diff)
        else:
            v.heading_change_deg = 0.0
        if heading is not None:
            v.heading_prev = heading
        status01 = 0 if v.status == "empty" else 1
        v.trajectory.append((new_time, v.pos.lat, v.pos.lon, status01, fare_booked))

    for o in world.orders:
        if o.state == "waiting" and o.deadline < new_time:
            o.state = "expired"

    world.time_s = new_time
    world.tick += 1
    _spawn_orders(world, dt)

    cutoff = new_time - p.trip_time_window_s
    while world.recent_trips and world.recent_trips[0][2] < cutoff:
        world.recent_trips.popleft()


def greedy_assign(world: World) -> list[tuple[int, int]]:
    """Assign each waiting order (in creation order) to the nearest empty
    vehicle; ties go to the lower vehicle id. Applies the assignments."""
    assignments = []
    free = {v.id: v for v in world.vehicles if v.status == "empty"}
    for order in sorted(world.waiting_orders(), key=lambda o: (o.created_at, o.id)):
        if not free:
            break
        best_id = min(free, key=lambda vid: (haversine_km(free[vid].pos, order.origin), vid))
        v = free.pop(best_id)
        order.state = "assigned"
        order.assigned_to = v.id
        order.assigned_at = world.time_s
        v.status = "occupied"
        v.phase = "to_pickup"
        v.order = order
        assignments.append((order.id, v.id))
    return assignments


# -- ground-truth driver behavior ----------------------------------------------


def intent_action(world: World, v: Vehicle) -> Action:
    """The driver's own relocation intent at the current state.

    In-cluster: head toward a neighbor cell sampled by familiarity, slower in
    crowded cells, farther during surges. Out-of-cluster: beeline back toward
    the familiarity mass at hustle speed.
    """
    p = world.params
    micro = world.grids["micro"]
    rng = world.behavior_rngs[v.id]
    cell = micro.point_to_index(world.clamp(v.pos))
    fam = v.familiarity
    in_cluster = fam[cell] >= 0.25 * fam.max()

    counts = getattr(world, "_tick_cell_counts", None)
    local_count = int(counts[cell]) if counts is not None else 1

    if in_cluster:
        neighbor_idx = [cell] + [micro._index[n] for n in _neighbor_axials(micro, cell)]
        weights = fam[neighbor_idx] + 1e-9
        weights = weights / weights.sum()
        target_cell = neighbor_idx[int(rng.choice(len(neighbor_idx), p=weights))]
        target = micro.cells[target_cell].center
        speed = p.cruise_kmh / (1.0 + p.crowd_slowdown * max(0, local_count - 1))
        if world.surge_active():
            speed *= p.surge_dis_multiplier
    else:
        target = _familiarity_centroid(micro, fam)
        speed = p.cruise_kmh * p.hustle_factor
    speed = min(speed, p.free_flow_kmh)

    if v.pos.lat == target.lat and v.pos.lon == target.lon:
        heading = rng.uniform(0, 360)
    else:
        heading = azimuth_deg(v.pos, target)
    heading = (heading + rng.normal(0, p.heading_jitter_deg)) % 360.0
    dis_km = speed * p.dt_s / 3600.0
    return Action(min(1.0, dis_km / p.r_max_km), heading if heading < 360.0 else 0.0)


def _neighbor_axials(grid, cell_idx: int):
    c = grid.cells[cell_idx]
    out = []
    for dq, dr in ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)):
        qr = (c.q + dq, c.r + dr)
        if qr in grid._index:
            out.append(qr)
    return out


def _familiarity_centroid(grid, fam: np.ndarray) -> GeoPoint:
    lats = np.array([c.center.lat for c in grid.cells])
    lons = np.array([c.center.lon for c in grid.cells])
    return GeoPoint(float((fam * lats).sum() / fam.sum()), float((fam * lons).sum() / fam.sum()))


def cache_cell_counts(world: World) -> None:
    """Per-tick micro-cell occupancy used by the congestion slowdown."""
    micro = world.grids["micro"]
    counts = np.zeros(len(micro))
    for v in world.vehicles:
        try:
            counts[micro.point_to_index(world.clamp(v.pos))] += 1
        except ValueError:
            pass
    world._tick_cell_counts = counts


def run(world: World, n_ticks: int, action_provider, on_tick=None) -> None:
    """Drive the loop: assign orders, collect relocations, step."""
    for _ in range(n_ticks):
        greedy_assign(world)
        cache_cell_counts(world)
        actions = action_provider(world)
        step(world, actions)
        if on_tick is not None:
            on_tick(world)


def intent_provider(world: World) -> dict[int, Action]:
    return {v.id: intent_action(world, v) for v in world.vehicles if v.status == "empty"}


# -- metrics --------------------------------------------------------------------


def error_metric(pred: Action, truth: Action, origin: GeoPoint, r_max_km: float) -> float:
    """Distance in km between the predicted and intended target points."""
    a = displace(origin, pred.dis_norm * r_max_km, pred.deg)
    b = displace(origin, truth.dis_norm * r_max_km, truth.deg)
    return haversine_km(a, b)


def empty_loaded_rate(world: World) -> float:
    total = sum(v.total_s for v in world.vehicles)
    if total <= 0:
        raise ValueError("empty-loaded rate undefined before any running time")
    return sum(v.idle_s for v in world.vehicles) / total


def order_acceptance_rate(orders: list[Order]) -> float:
    if not orders:
        raise ValueError("order acceptance rate undefined with zero orders")
    ok = sum(1 for o in orders if o.pickup_time is not None and o.pickup_time <= o.deadline)
    return ok / len(orders)


def ratio_sweep(
    bbox,
    ratios: list[float],
    seed: int,
    sim_minutes: float = 30.0,
    target_orders: int = 60,
    params: SimParams | None = None,
    n_hotspots: int = 2,
) -> list[dict]:
    """Run the full dispatch loop per car:order ratio with fixed seeds."""
    params = params or SimParams()
    out = []
    for ratio in ratios:
        n_vehicles = max(1, round(ratio * target_orders))
        order_rate = target_orders / sim_minutes / (1 + (params.surge_order_multiplier - 1) / 2)
        world = generate_city(seed, bbox, n_vehicles, order_rate, n_hotspots=n_hotspots, params=params)
        n_ticks = int(sim_minutes * 60 / params.dt_s)
        run(world, n_ticks, intent_provider)
        out.append(
            {
                "ratio": ratio,
                "n_vehicles": n_vehicles,
                "n_orders": len(world.orders),
                "empty_loaded_rate": empty_loaded_rate(world),
                "order_acceptance_rate": order_acceptance_rate(world.orders) if world.orders else float("nan"),
            }
        )
    return out
