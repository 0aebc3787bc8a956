"""Synthetic ground-truth routes and link-level reconstruction scoring.

``generate`` builds feasible driver sessions, flattens them into a shuffled,
re-identified trip pool, and returns the truth alongside. In isolation mode
each driver works inside a private spatial tile and time slot, so no trip of
one driver is a feasible successor for another driver's trip.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, InvariantError
from .geo import EARTH_RADIUS_MI, haversine_miles
from .ingest import LAT_RANGE, LON_RANGE, RegionMap, TripRecord, default_region_map
from .rng import generator
from .simulator import DriverRoute, SimParams, validate_routes

MILES_PER_DEG_LAT = math.pi * EARTH_RADIUS_MI / 180.0

# (region, lat, lon, share of session starts)
DEFAULT_CENTERS: tuple[tuple[str, float, float, float], ...] = (
    ("Central", 41.885, -87.630, 0.30),
    ("North", 41.950, -87.665, 0.22),
    ("Northwest", 41.950, -87.765, 0.03),
    ("West", 41.880, -87.705, 0.18),
    ("Southwest", 41.800, -87.705, 0.06),
    ("South", 41.805, -87.605, 0.10),
    ("Far Southwest", 41.720, -87.680, 0.015),
    ("Far Southeast", 41.710, -87.580, 0.05),
    ("Airport", 41.978, -87.905, 0.045),
)

_ISO_TILE_MI = 2.0
_ISO_SLOT_STARTS = (timedelta(hours=1), timedelta(hours=12))


@dataclass(frozen=True)
class SynthParams:
    n_drivers: int = 100
    trips_per_driver: tuple[int, int] = (3, 15)
    gap_minutes: tuple[int, int] = (0, 12)
    jump_miles: tuple[float, float] = (0.0, 0.8)
    duration_minutes: tuple[int, int] = (5, 35)
    fare_base: float = 2.5
    fare_per_mile: float = 1.1
    fare_per_minute: float = 0.3
    fare_noise: float = 0.1
    tip_probability: float = 0.3
    tip_fraction: tuple[float, float] = (0.1, 0.25)
    charges: tuple[float, float] = (0.5, 3.0)
    centers: tuple[tuple[str, float, float, float], ...] = DEFAULT_CENTERS
    scatter_miles: float = 1.5
    speed_mph: float = 14.0
    isolation_mode: bool = False
    start_date: date = date(2019, 8, 5)
    n_days: int = 1
    seed: int = 0
    feasible: bool = True
    sim: SimParams = field(default_factory=SimParams)

    def __post_init__(self) -> None:
        if self.n_drivers < 0 or self.n_days < 1:
            raise ConfigError("n_drivers must be >= 0 and n_days >= 1")
        for name in ("trips_per_driver", "gap_minutes", "jump_miles", "duration_minutes", "tip_fraction", "charges"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"SynthParams.{name} must be a non-negative (lo, hi) range")
        if self.trips_per_driver[0] < 1 or self.duration_minutes[0] < 1:
            raise ConfigError("drivers need >= 1 trip and trips >= 1 minute")
        if self.feasible:
            if self.gap_minutes[1] > self.sim.alpha_hours * 60:
                raise ConfigError("gap_minutes exceeds alpha; truth would be infeasible")
            if self.jump_miles[1] > self.sim.max_dist_mi:
                raise ConfigError("jump_miles exceeds max_dist_mi; truth would be infeasible")
            if self.trips_per_driver[1] > self.sim.max_trips:
                raise ConfigError("trips_per_driver exceeds max_trips; truth would be infeasible")
        if self.isolation_mode and self.duration_minutes[1] > 60 * 2:
            raise ConfigError("isolation mode supports trips of at most two hours")

    @classmethod
    def from_dict(cls, data: Mapping, sim: SimParams | None = None) -> SynthParams:
        """Build from JSON-style values: lists become tuples, dates are ISO strings."""
        known = {f.name for f in fields(cls)} - {"sim"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth parameters: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key == "start_date" and isinstance(value, str):
                try:
                    value = date.fromisoformat(value)
                except ValueError:
                    raise ConfigError(f"synth.start_date {value!r} is not an ISO date") from None
            elif key == "centers":
                value = tuple(tuple(c) for c in value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        if sim is not None:
            kwargs["sim"] = sim
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad synth parameters: {exc}") from None


@dataclass(frozen=True)
class ReconstructionScore:
    pair_precision: float | None
    pair_recall: float | None
    pair_f1: float | None
    exact_partition: bool
    route_count_delta: int
    n_truth_links: int
    n_pred_links: int
    n_common_links: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- geometry helpers ---------------------------------------------------------


def _offset(lat: float, lon: float, north_mi: float, east_mi: float) -> tuple[float, float]:
    lat2 = lat + north_mi / MILES_PER_DEG_LAT
    lon2 = lon + east_mi / (MILES_PER_DEG_LAT * math.cos(math.radians(lat)))
    return lat2, lon2


def _clamp(lat: float, lon: float, box: tuple[float, float, float, float]) -> tuple[float, float]:
    lat_lo, lat_hi, lon_lo, lon_hi = box
    return min(max(lat, lat_lo), lat_hi), min(max(lon, lon_lo), lon_hi)


_CITY_BOX = (LAT_RANGE[0], LAT_RANGE[1], LON_RANGE[0], LON_RANGE[1])


def _tiles(gap_mi: float) -> list[tuple[float, float, float, float]]:
    """Disjoint tiles covering the bounding box, at least ``gap_mi`` apart everywhere."""
    lat_pitch = (_ISO_TILE_MI + gap_mi) / MILES_PER_DEG_LAT
    lat_tile = _ISO_TILE_MI / MILES_PER_DEG_LAT
    # degrees of longitude per mile peak at the box's northern edge
    lon_per_mi = 1.0 / (MILES_PER_DEG_LAT * math.cos(math.radians(LAT_RANGE[1])))
    lon_pitch = (_ISO_TILE_MI + gap_mi) * lon_per_mi
    lon_tile = _ISO_TILE_MI / (MILES_PER_DEG_LAT * math.cos(math.radians(LAT_RANGE[0])))
    tiles = []
    lat = LAT_RANGE[0]
    while lat + lat_tile <= LAT_RANGE[1]:
        lon = LON_RANGE[0]
        while lon + lon_tile <= LON_RANGE[1]:
            tiles.append((lat, lat + lat_tile, lon, lon + lon_tile))
            lon += lon_pitch
        lat += lat_pitch
    return tiles


class _Areas:
    def __init__(self, centers, region_map: RegionMap):
        self.centers = [(name, lat, lon) for name, lat, lon, _ in centers]
        self.by_region = {r: sorted(a for a, n in region_map.entries.items() if n == r) for r in region_map.region_order}
        for name, _, _ in self.centers:
            if not self.by_region.get(name):
                raise ConfigError(f"synthetic center {name!r} is not a region of the region map")

    def area_at(self, lat: float, lon: float, u: float) -> int:
        k = math.cos(math.radians(lat))
        best = None
        for name, c_lat, c_lon in self.centers:
            d2 = (lat - c_lat) ** 2 + (k * (lon - c_lon)) ** 2
            if best is None or d2 < best[0]:
                best = (d2, name)
        areas = self.by_region[best[1]]
        return areas[min(int(u * len(areas)), len(areas) - 1)]


# -- generation ---------------------------------------------------------------


def _driver_trips(d: int, p: SynthParams, areas: _Areas, tile, slot_start: datetime | None) -> list[TripRecord]:
    rng = generator(p.seed, 1, d)
    sim = p.sim
    n = int(rng.integers(p.trips_per_driver[0], p.trips_per_driver[1] + 1))
    box = tile if tile is not None else _CITY_BOX

    if tile is not None:
        lat = rng.uniform(tile[0], tile[1])
        lon = rng.uniform(tile[2], tile[3])
        t = slot_start + timedelta(minutes=int(rng.integers(0, 60)))
    else:
        weights = np.array([c[3] for c in p.centers], dtype=float)
        c = p.centers[int(rng.choice(len(p.centers), p=weights / weights.sum()))]
        lat, lon = _clamp(*_offset(c[1], c[2], *rng.normal(0.0, p.scatter_miles, 2)), box)
        day = int(rng.integers(0, p.n_days))
        t = datetime.combine(p.start_date, datetime.min.time()) + timedelta(days=day, minutes=int(rng.integers(0, 1440)))

    session_start = t
    session_limit = timedelta(hours=sim.max_session_hours)
    trips: list[TripRecord] = []
    for k in range(n):
        if k > 0:
            t = t + timedelta(minutes=int(rng.integers(p.gap_minutes[0], p.gap_minutes[1] + 1)))
            dist = rng.uniform(*p.jump_miles)
            ang = rng.uniform(0.0, 2 * math.pi)
            prev = (lat, lon)
            lat, lon = _clamp(*_offset(lat, lon, dist * math.cos(ang), dist * math.sin(ang)), box)
            if haversine_miles(prev, (lat, lon)) > sim.max_dist_mi:
                lat, lon = prev
        minutes = int(rng.integers(p.duration_minutes[0], p.duration_minutes[1] + 1))
        end = t + timedelta(minutes=minutes)
        if p.feasible and end - session_start > session_limit:
            break
        if tile is not None:
            d_lat = rng.uniform(tile[0], tile[1])
            d_lon = rng.uniform(tile[2], tile[3])
        else:
            reach = minutes / 60.0 * p.speed_mph / 1.3
            ang = rng.uniform(0.0, 2 * math.pi)
            d_lat, d_lon = _clamp(*_offset(lat, lon, reach * math.cos(ang), reach * math.sin(ang)), box)
        miles = round(float(max(0.1, 1.3 * haversine_miles((lat, lon), (d_lat, d_lon)))), 2)
        u_pick, u_drop, u_noise, u_tip, u_tipfrac, u_fee = rng.random(6)
        fare = (p.fare_base + p.fare_per_mile * miles + p.fare_per_minute * minutes) * (
            1.0 + p.fare_noise * (2.0 * u_noise - 1.0)
        )
        fare_cents = max(0, round(fare * 100))
        tip_cents = 0
        if u_tip < p.tip_probability:
            tip_cents = round(fare_cents * (p.tip_fraction[0] + u_tipfrac * (p.tip_fraction[1] - p.tip_fraction[0])))
        fee_cents = round(100 * (p.charges[0] + u_fee * (p.charges[1] - p.charges[0])))
        trips.append(
            TripRecord(
                trip_id="",
                start_ts=t,
                end_ts=end,
                duration_s=minutes * 60,
                distance_mi=miles,
                pickup_area=areas.area_at(lat, lon, u_pick),
                dropoff_area=areas.area_at(d_lat, d_lon, u_drop),
                pickup_centroid=(round(float(lat), 6), round(float(lon), 6)),
                dropoff_centroid=(round(float(d_lat), 6), round(float(d_lon), 6)),
                fare_cents=fare_cents,
                tip_cents=tip_cents,
                additional_charges_cents=fee_cents,
                trip_total_cents=fare_cents + tip_cents + fee_cents,
            )
        )
        lat, lon = trips[-1].dropoff_centroid
        t = end
    if trips and p.feasible:
        # A rounded jump can land a hair over max_dist; snap onto the drop-off.
        fixed = [trips[0]]
        for tr in trips[1:]:
            if haversine_miles(fixed[-1].dropoff_centroid, tr.pickup_centroid) > sim.max_dist_mi:
                tr = _replace_pickup(tr, fixed[-1].dropoff_centroid)
            fixed.append(tr)
        trips = fixed
    return trips


def _replace_pickup(trip: TripRecord, point: tuple[float, float]) -> TripRecord:
    return replace(trip, pickup_centroid=point)


def generate(params: SynthParams, region_map: RegionMap | None = None) -> tuple[list[list[str]], list[TripRecord]]:
    """Return ``(truth_routes, trips)``: truth as trip-id lists, trips shuffled.

    Trip ids are derived from the seed and the shuffled position, so the
    ordering of ``trips`` carries no information about the truth.
    """
    region_map = region_map or default_region_map()
    areas = _Areas(params.centers, region_map)
    tiles = slots = None
    if params.isolation_mode:
        tiles = _tiles(params.sim.max_dist_mi + 0.5)
        per_day = len(tiles) * len(_ISO_SLOT_STARTS)
        base = datetime.combine(params.start_date, datetime.min.time())
        slots = []
        for d in range(params.n_drivers):
            day, rest = divmod(d, per_day)
            slot, tile = divmod(rest, len(tiles))
            slots.append((tiles[tile], base + timedelta(days=day) + _ISO_SLOT_STARTS[slot]))

    routes: list[list[TripRecord]] = []
    for d in range(params.n_drivers):
        tile, slot_start = slots[d] if slots else (None, None)
        trips = _driver_trips(d, params, areas, tile, slot_start)
        if trips:
            routes.append(trips)

    flat = [(r, k) for r, trips in enumerate(routes) for k in range(len(trips))]
    order = generator(params.seed, 0).permutation(len(flat))
    ids: dict[tuple[int, int], str] = {}
    pool: list[TripRecord] = []
    for pos, i in enumerate(order.tolist()):
        r, k = flat[i]
        tid = hashlib.sha1(f"{params.seed}:{pos}".encode()).hexdigest()
        ids[(r, k)] = tid
        pool.append(replace(routes[r][k], trip_id=tid))
    truth = [[ids[(r, k)] for k in range(len(trips))] for r, trips in enumerate(routes)]

    if params.feasible:
        by_id = {t.trip_id: t for t in pool}
        truth_routes = [DriverRoute.from_trips(i, [by_id[t] for t in ids_]) for i, ids_ in enumerate(truth)]
        problems = validate_routes(truth_routes, pool, params.sim)
        if problems:
            raise InvariantError(f"generated truth is infeasible: {problems[:3]}")
    return truth, pool


def cross_driver_links(truth: Sequence[Sequence[str]], trips: Iterable[TripRecord], params: SimParams) -> int:
    """Brute-force count of feasible (time and distance) links between different drivers."""
    by_id = {t.trip_id: t for t in trips}
    owner = {tid: i for i, route in enumerate(truth) for tid in route}
    items = [by_id[tid] for tid in owner]
    alpha = timedelta(hours=params.alpha_hours)
    bad = 0
    for a in items:
        for b in items:
            if owner[a.trip_id] == owner[b.trip_id]:
                continue
            gap = b.start_ts - a.end_ts
            if timedelta(0) <= gap <= alpha and haversine_miles(a.dropoff_centroid, b.pickup_centroid) <= params.max_dist_mi:
                bad += 1
    return bad


def _links(routes: Iterable[Sequence[str]]) -> set[tuple[str, str]]:
    return {(r[i], r[i + 1]) for r in routes for i in range(len(r) - 1)}


def score(truth_routes: Sequence[Sequence[str]], predicted_routes: Sequence[Sequence[str]]) -> ReconstructionScore:
    """Link precision/recall of predicted routes against the truth.

    An exact partition scores 1 on every rate. Otherwise, with no predicted
    links precision is None, and with no truth links recall is None.
    """
    truth_ids = [t for r in truth_routes for t in r]
    pred_ids = [t for r in predicted_routes for t in r]
    if len(set(truth_ids)) != len(truth_ids) or len(set(pred_ids)) != len(pred_ids):
        raise DataError("a trip id appears in more than one position")
    if set(truth_ids) != set(pred_ids):
        raise DataError("truth and predicted routes cover different trip ids")
    t_links = _links(truth_routes)
    p_links = _links(predicted_routes)
    common = len(t_links & p_links)
    exact = {tuple(r) for r in truth_routes} == {tuple(r) for r in predicted_routes}
    if exact:
        return ReconstructionScore(1.0, 1.0, 1.0, True, 0, len(t_links), len(p_links), common)
    precision = common / len(p_links) if p_links else None
    recall = common / len(t_links) if t_links else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ReconstructionScore(
        pair_precision=precision,
        pair_recall=recall,
        pair_f1=f1,
        exact_partition=False,
        route_count_delta=len(predicted_routes) - len(truth_routes),
        n_truth_links=len(t_links),
        n_pred_links=len(p_links),
        n_common_links=common,
    )


def write_truth(truth: Sequence[Sequence[str]], dest: str | Path) -> None:
    """Truth sidecar in the same ``driver_id,seq,trip_id`` layout as simulated routes."""
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["driver_id", "seq", "trip_id"])
        for d, route in enumerate(truth):
            for seq, tid in enumerate(route):
                w.writerow([d, seq, tid])
