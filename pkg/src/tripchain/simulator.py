"""Randomized greedy weaving of anonymized trips into hypothetical driver routes.

A route starts from a randomly picked unassigned trip and is extended, one
trip at a time, by a uniform draw among the first ``top_k`` feasible
candidates ranked by (start time, pickup distance, trip id). A candidate is
feasible when it starts within ``alpha_hours`` after the current trip ends,
picks up within ``max_dist_mi`` of its drop-off, and keeps the route within
``max_trips`` trips and ``max_session_hours`` of elapsed time.
"""

from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError, InvariantError
from .geo import CandidateIndex, _rad, haversine_miles, to_seconds
from .ingest import TripRecord
from .rng import Stream

logger = logging.getLogger(__name__)

WORKERS_ENV = "TRIPCHAIN_WORKERS"
TEMPORAL, SPATIAL, MAX_TRIPS, SESSION_HOURS = "temporal", "spatial", "max_trips", "session_hours"


@dataclass(frozen=True)
class SimParams:
    """Simulation thresholds and knobs.

    ``start_policy`` "auto" draws route starts uniformly when ``top_k > 1``
    and takes the earliest unassigned trip when ``top_k == 1``, which makes
    ``top_k=1`` a fully deterministic earliest-then-nearest greedy.
    ``bucket_minutes`` and ``cell_miles`` size the candidate index and do not
    change results.
    """

    alpha_hours: float = 0.25
    max_dist_mi: float = 1.0
    max_trips: int = 25
    max_session_hours: float = 8.0
    top_k: int = 10
    seed: int = 0
    start_policy: str = "auto"
    partition: str = "day"
    distance_mode: str = "centroid"
    bucket_minutes: float = 5.0
    cell_miles: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha_hours", "max_dist_mi", "max_session_hours", "bucket_minutes", "cell_miles"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"SimParams.{name} must be > 0")
        if self.max_trips < 1 or self.top_k < 1:
            raise ConfigError("SimParams.max_trips and top_k must be >= 1")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("SimParams.seed must be a 64-bit unsigned integer")
        if self.start_policy not in ("auto", "random", "earliest"):
            raise ConfigError(f"unknown start_policy {self.start_policy!r}")
        if self.partition not in ("day", "none"):
            raise ConfigError(f"unknown partition mode {self.partition!r}")
        if self.distance_mode != "centroid":
            # same_area is reserved; only centroid distances are implemented.
            raise ConfigError(f"distance_mode {self.distance_mode!r} is not supported")

    @property
    def effective_start_policy(self) -> str:
        if self.start_policy == "auto":
            return "earliest" if self.top_k == 1 else "random"
        return self.start_policy

    @classmethod
    def from_dict(cls, data: Mapping) -> SimParams:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown simulation parameters: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DriverRoute:
    driver_id: int
    trips: tuple[str, ...]
    day: date
    n_trips: int
    income_cents: int
    fare_cents: int
    driving_seconds: int

    @classmethod
    def from_trips(cls, driver_id: int, trips: Sequence[TripRecord]) -> DriverRoute:
        if not trips:
            raise ValueError("a route needs at least one trip")
        return cls(
            driver_id=driver_id,
            trips=tuple(t.trip_id for t in trips),
            day=trips[0].start_ts.date(),
            n_trips=len(trips),
            income_cents=sum(t.trip_total_cents for t in trips),
            fare_cents=sum(t.fare_cents for t in trips),
            driving_seconds=sum(t.duration_s for t in trips),
        )


@dataclass
class SimStats:
    n_drivers: int = 0
    n_trips: int = 0
    singletons: int = 0
    length_histogram: dict[int, int] = field(default_factory=dict)
    stop_reasons: Counter = field(default_factory=Counter)
    partitions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_drivers": self.n_drivers,
            "n_trips": self.n_trips,
            "singletons": self.singletons,
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
            "stop_reasons": dict(sorted(self.stop_reasons.items())),
            "partitions": self.partitions,
        }


@dataclass
class SimOutput:
    routes: list[DriverRoute]
    stats: SimStats


def pick_start(live: Sequence, rng: Stream):
    """Uniform draw from a non-empty live pool; removes nothing."""
    return live[rng.randbelow(len(live))]


def pick_next(candidates: Sequence, top_k: int, rng: Stream):
    """Uniform draw among the first ``min(top_k, len(candidates))`` entries."""
    return candidates[rng.randbelow(min(top_k, len(candidates)))]


def check_extension(
    route: Sequence[TripRecord], candidate: TripRecord, params: SimParams
) -> tuple[bool, str | None]:
    """Whether ``candidate`` may be appended to ``route``; else the first violated constraint."""
    last = route[-1]
    gap = to_seconds(candidate.start_ts) - to_seconds(last.end_ts)
    if gap < 0 or gap > params.alpha_hours * 3600.0:
        return False, TEMPORAL
    if haversine_miles(last.dropoff_centroid, candidate.pickup_centroid) > params.max_dist_mi:
        return False, SPATIAL
    if len(route) >= params.max_trips:
        return False, MAX_TRIPS
    if to_seconds(candidate.end_ts) - to_seconds(route[0].start_ts) > params.max_session_hours * 3600.0:
        return False, SESSION_HOURS
    return True, None


# -- partition worker ---------------------------------------------------------

# Partition payload: (trip ids, start_s, end_s, pickups, dropoffs), all aligned.
_Payload = tuple[list, list, list, list, list]


def _payload(trips: Sequence[TripRecord]) -> _Payload:
    return (
        [t.trip_id for t in trips],
        [to_seconds(t.start_ts) for t in trips],
        [to_seconds(t.end_ts) for t in trips],
        [t.pickup_centroid for t in trips],
        [t.dropoff_centroid for t in trips],
    )


def _weave(payload: _Payload, params: SimParams, key: tuple[int, ...]) -> tuple[list[list[int]], Counter]:
    """Run the assignment loop on one partition; routes are lists of payload positions."""
    ids, start, end, pickups, dropoffs = payload
    n = len(ids)
    lat_bound = max((abs(p[0]) for p in (*pickups, *dropoffs)), default=0.0)
    index = CandidateIndex(params.bucket_minutes, params.cell_miles, lat_bound=lat_bound)
    order_by_id = sorted(range(n), key=ids.__getitem__)
    rank = [0] * n
    for r, i in enumerate(order_by_id):
        rank[i] = r
    for i in range(n):
        index.insert(ids[i], start[i], end[i], pickups[i], rank[i])
    drop = [_rad(d) for d in dropoffs]

    stream = Stream(params.seed, *key)
    alpha_s = params.alpha_hours * 3600.0
    session_s = params.max_session_hours * 3600.0
    max_d = params.max_dist_mi
    max_trips = params.max_trips
    top_k = params.top_k
    earliest = params.effective_start_policy == "earliest"
    if earliest:
        by_start = sorted(range(n), key=lambda i: (start[i], rank[i]))
        cursor = 0
    scan = index.scan
    remove = index.remove_slot
    is_live = index.is_live
    live = index.live_slots

    routes: list[list[int]] = []
    reasons: Counter = Counter()
    while len(live):
        if earliest:
            while not is_live(by_start[cursor]):
                cursor += 1
            cur = by_start[cursor]
        else:
            cur = pick_start(live, stream)
        remove(cur)
        route = [cur]
        session_end = start[cur] + session_s
        while True:
            if len(route) >= max_trips:
                reasons[MAX_TRIPS] += 1
                break
            t_lo = end[cur]
            cands = scan(drop[cur], t_lo, t_lo + alpha_s, max_d, limit=top_k, end_max=session_end)
            if not cands:
                if scan(drop[cur], t_lo, t_lo + alpha_s, max_d, limit=1):
                    reasons[SESSION_HOURS] += 1
                else:
                    reasons["no_candidates"] += 1
                break
            cur = pick_next(cands, top_k, stream)[3]
            remove(cur)
            route.append(cur)
        routes.append(route)
    return routes, reasons


def _weave_job(args):
    return _weave(*args)


def _partitions(trips: Sequence[TripRecord], params: SimParams) -> list[tuple[str, tuple[int, ...], list[TripRecord]]]:
    # members sorted by id so results depend on the trip set, not its order
    by_id = sorted(trips, key=lambda t: t.trip_id)
    if params.partition == "none":
        return [("all", (), by_id)]
    groups: dict[date, list[TripRecord]] = defaultdict(list)
    for t in by_id:
        groups[t.start_ts.date()].append(t)
    return [(d.isoformat(), (d.toordinal(),), groups[d]) for d in sorted(groups)]


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return 1


def simulate(trips: Sequence[TripRecord], params: SimParams, workers: int | None = None) -> SimOutput:
    """Partition ``trips`` into driver routes.

    Partitions (calendar days of trip start by default) are independent and
    each draws from its own substream keyed by the date, so results do not
    depend on ``workers``. Driver ids are dense, ordered by partition and
    then by route creation.
    """
    seen: set[str] = set()
    for t in trips:
        if not t.has_centroids:
            raise DataError(f"trip {t.trip_id!r} lacks a pickup or drop-off centroid")
        if t.trip_id in seen:
            raise DataError(f"duplicate trip id {t.trip_id!r}")
        seen.add(t.trip_id)

    parts = _partitions(trips, params)
    jobs = [(_payload(members), params, key) for _, key, members in parts]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_weave_job, jobs))
    else:
        results = [_weave(*job) for job in jobs]

    stats = SimStats(n_trips=len(trips))
    routes: list[DriverRoute] = []
    for (label, _, members), (local_routes, reasons) in zip(parts, results):
        for r in local_routes:
            routes.append(DriverRoute.from_trips(len(routes), [members[i] for i in r]))
        stats.stop_reasons.update(reasons)
        stats.partitions.append({"label": label, "n_trips": len(members), "n_routes": len(local_routes)})

    hist = Counter(r.n_trips for r in routes)
    stats.n_drivers = len(routes)
    stats.singletons = hist.get(1, 0)
    stats.length_histogram = dict(sorted(hist.items()))
    covered = sum(r.n_trips for r in routes)
    if covered != len(trips) or len({tid for r in routes for tid in r.trips}) != len(trips):
        raise InvariantError("simulated routes do not partition the input trips")
    logger.info("simulated %d trips into %d routes", len(trips), len(routes))
    return SimOutput(routes=routes, stats=stats)


def validate_routes(
    routes: Iterable[DriverRoute], trips: Iterable[TripRecord], params: SimParams
) -> list[str]:
    """Re-check routes against raw trip records; returns human-readable violations.

    Independent of the simulator's internal state: uses only TripRecord fields
    and :func:`check_extension`.
    """
    by_id = {t.trip_id: t for t in trips}
    problems: list[str] = []
    seen: Counter = Counter()
    driver_ids = []
    for route in routes:
        driver_ids.append(route.driver_id)
        if not route.trips:
            problems.append(f"driver {route.driver_id}: empty route")
            continue
        members = []
        for tid in route.trips:
            seen[tid] += 1
            if tid not in by_id:
                problems.append(f"driver {route.driver_id}: unknown trip {tid!r}")
            else:
                members.append(by_id[tid])
        if len(members) != len(route.trips):
            continue
        if len(members) > params.max_trips:
            problems.append(f"driver {route.driver_id}: {len(members)} trips > {params.max_trips}")
        for i in range(1, len(members)):
            ok, tag = check_extension(members[:i], members[i], params)
            if not ok:
                problems.append(f"driver {route.driver_id}: link {i - 1}->{i} violates {tag}")
        span = to_seconds(members[-1].end_ts) - to_seconds(members[0].start_ts)
        if span > params.max_session_hours * 3600.0:
            problems.append(f"driver {route.driver_id}: session span {span}s too long")
        if route.n_trips != len(members) or route.income_cents != sum(t.trip_total_cents for t in members):
            problems.append(f"driver {route.driver_id}: cached totals disagree with trips")
    for tid, count in seen.items():
        if count > 1:
            problems.append(f"trip {tid!r} appears in {count} routes")
    missing = set(by_id) - set(seen)
    if missing:
        problems.append(f"{len(missing)} trips are not in any route")
    if sorted(driver_ids) != list(range(len(driver_ids))):
        problems.append("driver ids are not dense 0..n-1")
    return problems


# -- files --------------------------------------------------------------------


def write_routes(routes: Iterable[DriverRoute], dest: str | Path) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["driver_id", "seq", "trip_id"])
        for r in routes:
            for seq, tid in enumerate(r.trips):
                w.writerow([r.driver_id, seq, tid])


def read_route_ids(path: str | Path) -> list[list[str]]:
    """Read a ``driver_id,seq,trip_id`` file into trip-id lists ordered by driver id."""
    groups: dict[int, list[tuple[int, str]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"driver_id", "seq", "trip_id"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns driver_id,seq,trip_id")
        for row in reader:
            groups[int(row["driver_id"])].append((int(row["seq"]), row["trip_id"]))
    return [[tid for _, tid in sorted(groups[d])] for d in sorted(groups)]


def routes_from_ids(id_lists: Iterable[Sequence[str]], trips_by_id: Mapping[str, TripRecord]) -> list[DriverRoute]:
    try:
        return [DriverRoute.from_trips(i, [trips_by_id[t] for t in ids]) for i, ids in enumerate(id_lists)]
    except KeyError as exc:
        raise DataError(f"route references unknown trip {exc.args[0]!r}") from None
