"""Per-route earning metrics and clustering features."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import UNKNOWN, RegionMap, TripRecord, map_area_to_region
from .simulator import DriverRoute

WAIT_HOURS_PER_TRIP = 0.25
N_TIME_BINS = 8
TIME_BIN_LABELS = tuple(f"{3 * i:02d}-{3 * i + 3:02d}" for i in range(N_TIME_BINS))
BASE_FEATURES = ("n_trips", "mean_fare", "mean_tip", "mean_trip_total", "mean_distance_mi", "driving_hours")


class FeatureError(ValueError):
    """A route cannot be turned into a feature vector."""


@dataclass(frozen=True)
class RouteMetrics:
    n_trips: int
    income_usd: float
    fares_usd: float
    driving_hours: float
    est_hours: float
    e_per_trip: float
    e_per_drive_hr: float | None
    est_e_per_hr: float

    @property
    def has_rates(self) -> bool:
        return self.e_per_drive_hr is not None


def route_metrics(
    route: DriverRoute, trips: Mapping[str, TripRecord], wait_hours: float = WAIT_HOURS_PER_TRIP
) -> RouteMetrics:
    """Income and hourly rates for one route.

    Estimated hours add ``wait_hours`` per trip to in-trip driving time.
    ``e_per_drive_hr`` is None when every trip has zero duration.
    """
    members = [trips[t] for t in route.trips]
    n = len(members)
    income_cents = sum(t.trip_total_cents for t in members)
    fare_cents = sum(t.fare_cents for t in members)
    driving_hours = sum(t.duration_s for t in members) / 3600
    est_hours = driving_hours + wait_hours * n
    income = income_cents / 100
    return RouteMetrics(
        n_trips=n,
        income_usd=income,
        fares_usd=fare_cents / 100,
        driving_hours=driving_hours,
        est_hours=est_hours,
        e_per_trip=income / n,
        e_per_drive_hr=income / driving_hours if driving_hours > 0 else None,
        est_e_per_hr=income / est_hours,
    )


def est_rate_from_summary(
    income: float, e_per_drive_hr: float, n_trips: float, wait_hours: float = WAIT_HOURS_PER_TRIP
) -> float:
    """Estimated hourly rate recovered from income, driving-hour rate and trip count.

    Driving hours are income / e_per_drive_hr; the wait allowance is then
    added per trip exactly as in :func:`route_metrics`.
    """
    if e_per_drive_hr <= 0:
        raise ValueError("e_per_drive_hr must be positive")
    return income / (income / e_per_drive_hr + wait_hours * n_trips)


def feature_names(region_map: RegionMap, include_dropoff: bool = False) -> tuple[str, ...]:
    names = list(BASE_FEATURES)
    names += [f"start_{label}" for label in TIME_BIN_LABELS]
    names += [f"pickup_{r}" for r in region_map.region_order]
    if include_dropoff:
        names += [f"dropoff_{r}" for r in region_map.region_order]
    return tuple(names)


def time_bin(hour: int) -> int:
    return hour // 3


def _region_shares(areas: Sequence[int | None], region_map: RegionMap) -> list[float] | None:
    counts = dict.fromkeys(region_map.region_order, 0)
    known = 0
    for a in areas:
        name = map_area_to_region(a, region_map)
        if name != UNKNOWN:
            counts[name] += 1
            known += 1
    if not known:
        return None
    return [counts[r] / known for r in region_map.region_order]


def route_features(
    route: DriverRoute,
    trips: Mapping[str, TripRecord],
    region_map: RegionMap,
    include_dropoff: bool = False,
) -> np.ndarray:
    """Fixed-layout feature vector; see :func:`feature_names` for the columns.

    Region shares skip trips with an Unknown area and renormalize; a route
    whose pickups are all Unknown raises FeatureError.
    """
    members = [trips[t] for t in route.trips]
    n = len(members)
    bins = [0] * N_TIME_BINS
    for t in members:
        bins[time_bin(t.start_ts.hour)] += 1
    pickups = _region_shares([t.pickup_area for t in members], region_map)
    if pickups is None:
        raise FeatureError(f"route {route.driver_id} has no pickup with a known region")
    values = [
        float(n),
        sum(t.fare_cents for t in members) / 100 / n,
        sum(t.tip_cents for t in members) / 100 / n,
        sum(t.trip_total_cents for t in members) / 100 / n,
        sum(t.distance_mi for t in members) / n,
        sum(t.duration_s for t in members) / 3600,
    ]
    values += [b / n for b in bins]
    values += pickups
    if include_dropoff:
        dropoffs = _region_shares([t.dropoff_area for t in members], region_map)
        if dropoffs is None:
            raise FeatureError(f"route {route.driver_id} has no drop-off with a known region")
        values += dropoffs
    return np.array(values, dtype=float)


def filter_active(routes: Sequence[DriverRoute], min_trips: int = 2) -> list[DriverRoute]:
    """Routes with strictly more than ``min_trips`` trips, order preserved."""
    return [r for r in routes if r.n_trips > min_trips]


def feature_matrix(
    routes: Sequence[DriverRoute],
    trips: Mapping[str, TripRecord],
    region_map: RegionMap,
    include_dropoff: bool = False,
) -> tuple[np.ndarray, list[int], int]:
    """Stack route features; returns (matrix, kept route positions, rejected count)."""
    rows, kept = [], []
    rejected = 0
    for i, route in enumerate(routes):
        try:
            rows.append(route_features(route, trips, region_map, include_dropoff))
        except FeatureError:
            rejected += 1
            continue
        kept.append(i)
    width = len(feature_names(region_map, include_dropoff))
    matrix = np.vstack(rows) if rows else np.empty((0, width))
    return matrix, kept, rejected


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray  # True where the column had no variance and std was set to 1

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=float) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def standardize(matrix: np.ndarray) -> tuple[np.ndarray, StandardizationStats]:
    """Column-wise z-scores with population standard deviation."""
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("standardize needs a non-empty 2-D matrix")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # a constant column can still show float noise in std, so test the range
    flagged = np.ptp(x, axis=0) == 0
    std = np.where(flagged, 1.0, std)
    mean = np.where(flagged, x[0], mean)
    stats = StandardizationStats(mean=mean, std=std, flagged=flagged)
    return stats.transform(x), stats


def write_feature_csv(
    dest: str | Path, names: Sequence[str], route_ids: Sequence[int], matrix: np.ndarray
) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["route_id", *names])
        for rid, row in zip(route_ids, matrix):
            w.writerow([rid, *(repr(float(v)) for v in row)])


def read_feature_csv(path: str | Path) -> tuple[list[str], list[int], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for row in reader:
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    names = header[1:]
    return names, ids, np.array(rows, dtype=float).reshape(len(rows), len(names))
