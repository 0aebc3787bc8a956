"""Monthly, regional and per-cluster reporting tables."""

from __future__ import annotations

import csv
import dataclasses
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .features import N_TIME_BINS, TIME_BIN_LABELS, RouteMetrics, time_bin
from .ingest import UNKNOWN, RegionMap, TripRecord, map_area_to_region
from .simulator import DriverRoute

log = logging.getLogger(__name__)

ENDPOINTS = ("pickup", "dropoff")
EXCLUDED_YEARS = (2018,)


class AnalyticsError(ValueError):
    pass


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


# --- monthly -------------------------------------------------------------------


@dataclass(frozen=True)
class MonthRow:
    year: int
    month: int
    total_trip_total_usd: float
    total_driving_hours: float
    cost_per_driving_hour: float | None  # ratio of sums
    n_trips: int
    mean_of_ratios: float | None = None
    cpi_factor: float | None = None

    @property
    def period(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"


@dataclass
class MonthlySeries:
    rows: list[MonthRow]
    excluded_zero_duration: int = 0
    base_period: str | None = None

    def rate(self, year: int, month: int) -> float | None:
        for r in self.rows:
            if (r.year, r.month) == (year, month):
                return r.cost_per_driving_hour
        raise KeyError(f"{year:04d}-{month:02d} not in series")


def _month_span(first: tuple[int, int], last: tuple[int, int]):
    y, m = first
    while (y, m) <= last:
        yield y, m
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)


def monthly_cost_per_hour(trips: Iterable[TripRecord]) -> MonthlySeries:
    """Cost per driving hour by start month, as total dollars over total hours.

    Zero-duration trips are skipped and counted. Months inside the span with
    no trips get a row with a null rate.
    """
    cents: dict[tuple[int, int], int] = defaultdict(int)
    secs: dict[tuple[int, int], int] = defaultdict(int)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    ratio_sums: dict[tuple[int, int], float] = defaultdict(float)
    excluded = 0
    for t in trips:
        if t.duration_s <= 0:
            excluded += 1
            continue
        key = (t.start_ts.year, t.start_ts.month)
        cents[key] += t.trip_total_cents
        secs[key] += t.duration_s
        counts[key] += 1
        ratio_sums[key] += t.trip_total_usd / t.driving_hours
    rows = []
    if counts:
        for key in _month_span(min(counts), max(counts)):
            n = counts.get(key, 0)
            usd = cents.get(key, 0) / 100
            hours = secs.get(key, 0) / 3600
            rows.append(
                MonthRow(
                    year=key[0],
                    month=key[1],
                    total_trip_total_usd=usd,
                    total_driving_hours=hours,
                    cost_per_driving_hour=_ratio(usd, hours),
                    n_trips=n,
                    mean_of_ratios=ratio_sums[key] / n if n else None,
                )
            )
    if excluded:
        log.info("monthly: skipped %d zero-duration trips", excluded)
    return MonthlySeries(rows, excluded_zero_duration=excluded)


def _period_key(key) -> str:
    if isinstance(key, str):
        y, m = key.split("-")
        return f"{int(y):04d}-{int(m):02d}"
    y, m = key
    return f"{int(y):04d}-{int(m):02d}"


def cpi_adjust(series: MonthlySeries, cpi: Mapping, base_period) -> MonthlySeries:
    """Deflate dollar columns to ``base_period`` prices.

    ``cpi`` maps "YYYY-MM" strings or (year, month) pairs to index levels.
    """
    table = {_period_key(k): float(v) for k, v in cpi.items()}
    base = _period_key(base_period)
    if base not in table:
        raise AnalyticsError(f"CPI table has no entry for base period {base}")
    rows = []
    for r in series.rows:
        if r.period not in table:
            raise AnalyticsError(f"CPI table has no entry for {r.period}")
        if table[r.period] <= 0:
            raise AnalyticsError(f"CPI for {r.period} must be positive")
        f = table[base] / table[r.period]
        rows.append(
            dataclasses.replace(
                r,
                total_trip_total_usd=r.total_trip_total_usd * f,
                cost_per_driving_hour=None if r.cost_per_driving_hour is None else r.cost_per_driving_hour * f,
                mean_of_ratios=None if r.mean_of_ratios is None else r.mean_of_ratios * f,
                cpi_factor=f,
            )
        )
    return MonthlySeries(rows, series.excluded_zero_duration, base_period=base)


# --- regional ------------------------------------------------------------------


@dataclass(frozen=True)
class RegionalRow:
    year: int | None
    region: str
    endpoint: str
    n_trips: int
    trip_share_pct: float
    total_trip_total_usd: float
    total_driving_hours: float
    cost_per_driving_hour: float | None
    mean_of_ratios: float | None


@dataclass
class RegionalTable:
    rows: list[RegionalRow]
    unknown: dict[str, int] = field(default_factory=dict)
    excluded_zero_duration: int = 0

    def get(self, region: str, endpoint: str) -> RegionalRow:
        for r in self.rows:
            if r.region == region and r.endpoint == endpoint:
                return r
        raise KeyError((region, endpoint))

    def shares(self, endpoint: str) -> dict[str, float]:
        return {r.region: r.trip_share_pct for r in self.rows if r.endpoint == endpoint}

    def rates(self, endpoint: str) -> dict[str, float | None]:
        return {r.region: r.cost_per_driving_hour for r in self.rows if r.endpoint == endpoint}


def regional_table(trips: Iterable[TripRecord], region_map: RegionMap, year: int | None = None) -> RegionalTable:
    """Trip shares and cost per driving hour for each region and endpoint.

    Shares are over trips whose endpoint maps to a known region. Rates skip
    zero-duration trips. ``year`` restricts to trips starting in that year.
    """
    order = region_map.region_order
    n = {e: dict.fromkeys(order, 0) for e in ENDPOINTS}
    cents = {e: dict.fromkeys(order, 0) for e in ENDPOINTS}
    secs = {e: dict.fromkeys(order, 0) for e in ENDPOINTS}
    rates = {e: dict.fromkeys(order, 0.0) for e in ENDPOINTS}
    timed = {e: dict.fromkeys(order, 0) for e in ENDPOINTS}
    unknown = dict.fromkeys(ENDPOINTS, 0)
    zero = 0
    for t in trips:
        if year is not None and t.start_ts.year != year:
            continue
        if t.duration_s <= 0:
            zero += 1
        for endpoint, area in (("pickup", t.pickup_area), ("dropoff", t.dropoff_area)):
            region = map_area_to_region(area, region_map)
            if region == UNKNOWN:
                unknown[endpoint] += 1
                continue
            n[endpoint][region] += 1
            if t.duration_s > 0:
                cents[endpoint][region] += t.trip_total_cents
                secs[endpoint][region] += t.duration_s
                rates[endpoint][region] += t.trip_total_usd / t.driving_hours
                timed[endpoint][region] += 1
    rows = []
    for endpoint in ENDPOINTS:
        known = sum(n[endpoint].values())
        if known == 0:
            raise AnalyticsError(f"no trips with a known {endpoint} region" + (f" in {year}" if year else ""))
        for region in order:
            usd = cents[endpoint][region] / 100
            hours = secs[endpoint][region] / 3600
            m = timed[endpoint][region]
            rows.append(
                RegionalRow(
                    year=year,
                    region=region,
                    endpoint=endpoint,
                    n_trips=n[endpoint][region],
                    trip_share_pct=100.0 * n[endpoint][region] / known,
                    total_trip_total_usd=usd,
                    total_driving_hours=hours,
                    cost_per_driving_hour=_ratio(usd, hours),
                    mean_of_ratios=rates[endpoint][region] / m if m else None,
                )
            )
    return RegionalTable(rows, unknown=unknown, excluded_zero_duration=zero)


def regional_distribution(trips, region_map: RegionMap, year: int | None = None) -> dict[str, dict[str, float]]:
    """Percent of trips per region, keyed by endpoint then region."""
    table = regional_table(trips, region_map, year)
    return {e: table.shares(e) for e in ENDPOINTS}


def regional_cost_per_hour(trips, region_map: RegionMap, year: int | None = None) -> dict[str, dict[str, float | None]]:
    table = regional_table(trips, region_map, year)
    return {e: table.rates(e) for e in ENDPOINTS}


def regional_by_year(
    trips: Sequence[TripRecord], region_map: RegionMap, exclude_years: Sequence[int] = EXCLUDED_YEARS
) -> dict[int, RegionalTable]:
    years = sorted({t.start_ts.year for t in trips} - set(exclude_years))
    return {y: regional_table(trips, region_map, y) for y in years}


# --- clusters ------------------------------------------------------------------

REPORT_COLUMNS = ("n_trips", "e_per_trip", "e_per_drive_hr", "est_e_per_hr", "total_fares", "total_income")


@dataclass(frozen=True)
class ClusterReportRow:
    cluster: int
    members: int
    n_trips: float
    e_per_trip: float
    e_per_drive_hr: float | None
    est_e_per_hr: float
    total_fares: float
    total_income: float
    # ratio-of-totals variants
    rt_e_per_trip: float
    rt_e_per_drive_hr: float | None
    rt_est_e_per_hr: float
    rate_members: int  # routes with positive driving time, used for e_per_drive_hr


@dataclass
class ClusterReport:
    rows: list[ClusterReportRow]
    highest: dict[str, int]
    lowest: dict[str, int]
    excluded_no_rate: int = 0
    empty_clusters: list[int] = field(default_factory=list)

    def row(self, cluster: int) -> ClusterReportRow:
        for r in self.rows:
            if r.cluster == cluster:
                return r
        raise KeyError(cluster)


def cluster_report(
    metrics: Sequence[RouteMetrics], assignments: Sequence[int], k: int | None = None
) -> ClusterReport:
    """Per-cluster means of route metrics, with ratio-of-totals alongside.

    Routes with zero driving time are left out of the E/DriveHr mean only.
    """
    if len(metrics) != len(assignments):
        raise AnalyticsError("need one cluster assignment per route")
    k = k if k is not None else (max(assignments) + 1 if len(assignments) else 0)
    groups: list[list[RouteMetrics]] = [[] for _ in range(k)]
    for m, c in zip(metrics, assignments):
        groups[int(c)].append(m)
    rows, empty = [], []
    no_rate = 0
    for c, members in enumerate(groups):
        if not members:
            log.warning("cluster %d has no members; left out of the report", c)
            empty.append(c)
            continue
        n = len(members)
        rated = [m.e_per_drive_hr for m in members if m.e_per_drive_hr is not None]
        no_rate += n - len(rated)
        income = sum(m.income_usd for m in members)
        trips = sum(m.n_trips for m in members)
        drive = sum(m.driving_hours for m in members)
        est = sum(m.est_hours for m in members)
        rows.append(
            ClusterReportRow(
                cluster=c,
                members=n,
                n_trips=trips / n,
                e_per_trip=sum(m.e_per_trip for m in members) / n,
                e_per_drive_hr=sum(rated) / len(rated) if rated else None,
                est_e_per_hr=sum(m.est_e_per_hr for m in members) / n,
                total_fares=sum(m.fares_usd for m in members) / n,
                total_income=income / n,
                rt_e_per_trip=income / trips,
                rt_e_per_drive_hr=_ratio(income, drive),
                rt_est_e_per_hr=income / est,
                rate_members=len(rated),
            )
        )
    highest, lowest = {}, {}
    for col in REPORT_COLUMNS:
        vals = [(getattr(r, col), r.cluster) for r in rows if getattr(r, col) is not None]
        if vals:
            # ties resolve to the lower cluster id
            highest[col] = min(vals, key=lambda v: (-v[0], v[1]))[1]
            lowest[col] = min(vals)[1]
    return ClusterReport(rows, highest, lowest, excluded_no_rate=no_rate, empty_clusters=empty)


def temporal_proportions(
    routes: Sequence[DriverRoute], assignments: Sequence[int], trips: Mapping[str, TripRecord]
) -> dict[int, list[float]]:
    """Share of each cluster's trips starting in each 3-hour bin."""
    counts: dict[int, list[int]] = {}
    for route, c in zip(routes, assignments):
        bins = counts.setdefault(int(c), [0] * N_TIME_BINS)
        for tid in route.trips:
            bins[time_bin(trips[tid].start_ts.hour)] += 1
    return {c: [b / sum(bins) for b in bins] for c, bins in sorted(counts.items())}


@dataclass
class RegionalProportions:
    shares: dict[int, dict[str, dict[str, float]]]  # cluster -> endpoint -> region -> share
    unknown: dict[int, dict[str, int]]


def regional_proportions(
    routes: Sequence[DriverRoute],
    assignments: Sequence[int],
    trips: Mapping[str, TripRecord],
    region_map: RegionMap,
) -> RegionalProportions:
    """Per-cluster pickup and drop-off region shares over trips, Unknown excluded."""
    order = region_map.region_order
    counts: dict[int, dict[str, dict[str, int]]] = {}
    unknown: dict[int, dict[str, int]] = {}
    for route, c in zip(routes, assignments):
        c = int(c)
        if c not in counts:
            counts[c] = {e: dict.fromkeys(order, 0) for e in ENDPOINTS}
            unknown[c] = dict.fromkeys(ENDPOINTS, 0)
        for tid in route.trips:
            t = trips[tid]
            for endpoint, area in (("pickup", t.pickup_area), ("dropoff", t.dropoff_area)):
                region = map_area_to_region(area, region_map)
                if region == UNKNOWN:
                    unknown[c][endpoint] += 1
                else:
                    counts[c][endpoint][region] += 1
    shares = {}
    for c in sorted(counts):
        shares[c] = {}
        for endpoint in ENDPOINTS:
            total = sum(counts[c][endpoint].values())
            shares[c][endpoint] = {r: (v / total if total else 0.0) for r, v in counts[c][endpoint].items()}
    return RegionalProportions(shares, {c: unknown[c] for c in sorted(unknown)})


# --- output --------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(dest: str | Path, rows: Sequence, columns: Sequence[str] | None = None) -> None:
    """CSV of dataclass rows; None becomes an empty cell."""
    if columns is None:
        if not rows:
            raise AnalyticsError("cannot infer columns of an empty table")
        columns = [f.name for f in dataclasses.fields(rows[0])]
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in columns])


def write_long(dest: str | Path, triples: Iterable[tuple]) -> None:
    """Plot-ready ``group,key,value`` CSV."""
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "key", "value"])
        for g, k, v in triples:
            w.writerow([g, k, _fmt(v)])


def temporal_long(props: Mapping[int, Sequence[float]]) -> list[tuple]:
    return [(f"cluster_{c}", TIME_BIN_LABELS[i], p) for c, vals in props.items() for i, p in enumerate(vals)]


def regional_long(props: RegionalProportions) -> list[tuple]:
    return [
        (f"cluster_{c}", f"{endpoint}:{region}", share)
        for c, by_end in props.shares.items()
        for endpoint, regions in by_end.items()
        for region, share in regions.items()
    ]
