"""Trip-level CSV ingestion for the Chicago TNP export schema.

Rows are parsed one at a time, so memory is bounded by the accepted output.
Malformed rows are counted by reason and never stop the parse; a schema that
names a column the file does not have is fatal.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence, Union

from .errors import ConfigError

logger = logging.getLogger(__name__)

N_AREAS = 77
UNKNOWN = "Unknown"
LAT_RANGE = (41.0, 42.5)
LON_RANGE = (-88.5, -87.0)
DEFAULT_TIMESTAMP_FORMAT = "%m/%d/%Y %I:%M:%S %p"

DEFAULT_COLUMNS: dict[str, str | None] = {
    "trip_id": "Trip ID",
    "start_ts": "Trip Start Timestamp",
    "end_ts": "Trip End Timestamp",
    "duration_s": "Trip Seconds",
    "distance_mi": "Trip Miles",
    "pickup_area": "Pickup Community Area",
    "dropoff_area": "Dropoff Community Area",
    "pickup_lat": "Pickup Centroid Latitude",
    "pickup_lon": "Pickup Centroid Longitude",
    "dropoff_lat": "Dropoff Centroid Latitude",
    "dropoff_lon": "Dropoff Centroid Longitude",
    "fare": "Fare",
    "tip": "Tip",
    "additional_charges": "Additional Charges",
    "trip_total": "Trip Total",
}

# Logical fields that may be mapped to None (column absent from the export).
OPTIONAL_FIELDS = frozenset(
    {"pickup_area", "dropoff_area", "pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon"}
)

REJECT_REASONS = (
    "missing-id",
    "timestamp",
    "unparseable",
    "negative-money",
    "money-mismatch",
    "invariant",
    "missing-geography",
)

CsvSource = Union[str, Path, IO[str], Iterable[str]]


@dataclass(frozen=True, slots=True)
class TripRecord:
    """One anonymized trip. Money is held in integer cents."""

    trip_id: str
    start_ts: datetime
    end_ts: datetime
    duration_s: int
    distance_mi: float
    pickup_area: int | None
    dropoff_area: int | None
    pickup_centroid: tuple[float, float] | None
    dropoff_centroid: tuple[float, float] | None
    fare_cents: int
    tip_cents: int
    additional_charges_cents: int
    trip_total_cents: int

    @property
    def fare_usd(self) -> float:
        return self.fare_cents / 100

    @property
    def tip_usd(self) -> float:
        return self.tip_cents / 100

    @property
    def additional_charges_usd(self) -> float:
        return self.additional_charges_cents / 100

    @property
    def trip_total_usd(self) -> float:
        return self.trip_total_cents / 100

    @property
    def driving_hours(self) -> float:
        return self.duration_s / 3600

    @property
    def has_centroids(self) -> bool:
        return self.pickup_centroid is not None and self.dropoff_centroid is not None


@dataclass
class IngestStats:
    rows_read: int = 0
    rows_accepted: int = 0
    rejects_by_reason: Counter = field(default_factory=Counter)

    @property
    def rows_rejected(self) -> int:
        return sum(self.rejects_by_reason.values())

    def reject(self, reason: str) -> None:
        self.rejects_by_reason[reason] += 1

    def merge(self, other: IngestStats) -> None:
        self.rows_read += other.rows_read
        self.rows_accepted += other.rows_accepted
        self.rejects_by_reason.update(other.rejects_by_reason)

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_accepted": self.rows_accepted,
            "rejects_by_reason": dict(sorted(self.rejects_by_reason.items())),
        }


@dataclass(frozen=True)
class SchemaConfig:
    """Maps logical trip fields to CSV column names.

    ``require_geography`` rejects rows where either endpoint has neither a
    community area nor a centroid. It is off by default so monthly
    aggregation keeps those rows.
    """

    columns: Mapping[str, str | None] = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    timestamp_format: str = DEFAULT_TIMESTAMP_FORMAT
    money_tolerance_cents: int = 2
    require_geography: bool = False

    def __post_init__(self) -> None:
        unknown = set(self.columns) - set(DEFAULT_COLUMNS)
        if unknown:
            raise ConfigError(f"unknown logical fields in schema: {sorted(unknown)}")
        for name in DEFAULT_COLUMNS:
            if name not in self.columns:
                raise ConfigError(f"schema does not map logical field {name!r}")
            if self.columns[name] is None and name not in OPTIONAL_FIELDS:
                raise ConfigError(f"logical field {name!r} is required")

    @classmethod
    def from_dict(cls, data: Mapping) -> SchemaConfig:
        columns = dict(DEFAULT_COLUMNS)
        columns.update(data.get("columns", {}))
        return cls(
            columns=columns,
            timestamp_format=data.get("timestamp_format", DEFAULT_TIMESTAMP_FORMAT),
            money_tolerance_cents=int(data.get("money_tolerance_cents", 2)),
            require_geography=bool(data.get("require_geography", False)),
        )


class _Reject(Exception):
    def __init__(self, reason: str):
        self.reason = reason


@lru_cache(maxsize=1 << 16)
def _parse_ts(text: str, fmt: str) -> datetime:
    # The public export rounds to 15-minute marks, so the cache hit rate is high.
    return datetime.strptime(text, fmt)


def _clean_number(text: str) -> str:
    return text.strip().replace(",", "").lstrip("$")


def _to_cents(text: str) -> int:
    text = _clean_number(text)
    if not text:
        raise _Reject("unparseable")
    try:
        return round(float(text) * 100)
    except ValueError:
        raise _Reject("unparseable") from None


def _opt_float(text: str | None) -> float | None:
    if text is None:
        return None
    text = _clean_number(text)
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise _Reject("unparseable") from None


def _opt_area(text: str | None) -> int | None:
    value = _opt_float(text)
    if value is None:
        return None
    if value != int(value) or not 1 <= value <= N_AREAS:
        raise _Reject("invariant")
    return int(value)


def _centroid(lat: float | None, lon: float | None) -> tuple[float, float] | None:
    if lat is None and lon is None:
        return None
    if lat is None or lon is None:
        raise _Reject("invariant")
    if not (LAT_RANGE[0] <= lat <= LAT_RANGE[1] and LON_RANGE[0] <= lon <= LON_RANGE[1]):
        raise _Reject("invariant")
    return (lat, lon)


def validate_trip(trip: TripRecord, money_tolerance_cents: int = 2) -> str | None:
    """Return the reject reason for a constructed record, or None if it is valid."""
    if not trip.trip_id:
        return "missing-id"
    money = (trip.fare_cents, trip.tip_cents, trip.additional_charges_cents, trip.trip_total_cents)
    if any(m < 0 for m in money):
        return "negative-money"
    if abs(trip.fare_cents + trip.tip_cents + trip.additional_charges_cents - trip.trip_total_cents) > money_tolerance_cents:
        return "money-mismatch"
    if trip.end_ts < trip.start_ts or trip.duration_s < 0 or trip.distance_mi < 0:
        return "invariant"
    for area in (trip.pickup_area, trip.dropoff_area):
        if area is not None and not 1 <= area <= N_AREAS:
            return "invariant"
    for point in (trip.pickup_centroid, trip.dropoff_centroid):
        if point is not None:
            lat, lon = point
            if not (LAT_RANGE[0] <= lat <= LAT_RANGE[1] and LON_RANGE[0] <= lon <= LON_RANGE[1]):
                return "invariant"
    return None


def _open_lines(source: CsvSource):
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8-sig")
    return None


def _row_to_trip(row: Sequence[str], pos: Mapping[str, int | None], schema: SchemaConfig) -> TripRecord:
    def get(name: str) -> str | None:
        i = pos[name]
        return None if i is None else row[i]

    trip_id = get("trip_id").strip()
    if not trip_id:
        raise _Reject("missing-id")

    fmt = schema.timestamp_format
    try:
        start = _parse_ts(get("start_ts").strip(), fmt)
        end = _parse_ts(get("end_ts").strip(), fmt)
    except ValueError:
        raise _Reject("timestamp") from None

    duration = _opt_float(get("duration_s"))
    distance = _opt_float(get("distance_mi"))
    if duration is None or distance is None:
        raise _Reject("unparseable")
    fare = _to_cents(get("fare"))
    tip = _to_cents(get("tip"))
    charges = _to_cents(get("additional_charges"))
    total = _to_cents(get("trip_total"))

    trip = TripRecord(
        trip_id=trip_id,
        start_ts=start,
        end_ts=end,
        duration_s=int(round(duration)),
        distance_mi=distance,
        pickup_area=_opt_area(get("pickup_area")),
        dropoff_area=_opt_area(get("dropoff_area")),
        pickup_centroid=_centroid(_opt_float(get("pickup_lat")), _opt_float(get("pickup_lon"))),
        dropoff_centroid=_centroid(_opt_float(get("dropoff_lat")), _opt_float(get("dropoff_lon"))),
        fare_cents=fare,
        tip_cents=tip,
        additional_charges_cents=charges,
        trip_total_cents=total,
    )
    reason = validate_trip(trip, schema.money_tolerance_cents)
    if reason is not None:
        raise _Reject(reason)
    if schema.require_geography:
        if (trip.pickup_area is None and trip.pickup_centroid is None) or (
            trip.dropoff_area is None and trip.dropoff_centroid is None
        ):
            raise _Reject("missing-geography")
    return trip


def iter_trips(
    source: CsvSource, schema: SchemaConfig | None = None, stats: IngestStats | None = None
) -> Iterator[TripRecord]:
    """Yield accepted trips one by one, updating ``stats`` in place."""
    schema = schema or SchemaConfig()
    stats = stats if stats is not None else IngestStats()
    handle = _open_lines(source)
    lines = handle if handle is not None else source
    try:
        reader = csv.reader(lines)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError("CSV source has no header row") from None
        index = {name: i for i, name in enumerate(header)}
        missing = [c for c in schema.columns.values() if c is not None and c not in index]
        if missing:
            raise ConfigError(f"CSV header is missing columns: {missing}")
        pos = {name: (None if col is None else index[col]) for name, col in schema.columns.items()}
        width = len(header)
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error:
                # e.g. a NUL byte; the reader resumes at the next line
                stats.rows_read += 1
                stats.reject("unparseable")
                continue
            if not row:
                continue
            stats.rows_read += 1
            if len(row) != width:
                stats.reject("unparseable")
                continue
            try:
                trip = _row_to_trip(row, pos, schema)
            except _Reject as exc:
                stats.reject(exc.reason)
                continue
            stats.rows_accepted += 1
            yield trip
    finally:
        if handle is not None:
            handle.close()


def parse_trips(source: CsvSource, schema: SchemaConfig | None = None) -> tuple[list[TripRecord], IngestStats]:
    stats = IngestStats()
    trips = list(iter_trips(source, schema, stats))
    if stats.rows_rejected:
        logger.info("rejected %d of %d rows: %s", stats.rows_rejected, stats.rows_read, dict(stats.rejects_by_reason))
    return trips, stats


def _fmt_cents(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(cents)
    return f"{sign}{cents // 100}.{cents % 100:02d}"


def _fmt_opt(value) -> str:
    if value is None:
        return ""
    # float() also strips numpy scalar wrappers from the repr
    return repr(float(value)) if isinstance(value, float) else str(value)


def trip_rows(trips: Iterable[TripRecord], schema: SchemaConfig | None = None) -> Iterator[list[str]]:
    """Serialize trips as CSV rows (header first) that ``iter_trips`` reads back exactly."""
    schema = schema or SchemaConfig()
    cols = [(name, col) for name, col in schema.columns.items() if col is not None]
    yield [col for _, col in cols]
    fmt = schema.timestamp_format
    for t in trips:
        p = t.pickup_centroid or (None, None)
        d = t.dropoff_centroid or (None, None)
        values = {
            "trip_id": t.trip_id,
            "start_ts": t.start_ts.strftime(fmt),
            "end_ts": t.end_ts.strftime(fmt),
            "duration_s": str(t.duration_s),
            "distance_mi": repr(float(t.distance_mi)),
            "pickup_area": _fmt_opt(t.pickup_area),
            "dropoff_area": _fmt_opt(t.dropoff_area),
            "pickup_lat": _fmt_opt(p[0]),
            "pickup_lon": _fmt_opt(p[1]),
            "dropoff_lat": _fmt_opt(d[0]),
            "dropoff_lon": _fmt_opt(d[1]),
            "fare": _fmt_cents(t.fare_cents),
            "tip": _fmt_cents(t.tip_cents),
            "additional_charges": _fmt_cents(t.additional_charges_cents),
            "trip_total": _fmt_cents(t.trip_total_cents),
        }
        yield [values[name] for name, _ in cols]


def write_trips(trips: Iterable[TripRecord], dest: str | Path | IO[str], schema: SchemaConfig | None = None) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(trip_rows(trips, schema))
    else:
        csv.writer(dest, lineterminator="\n").writerows(trip_rows(trips, schema))


def trips_to_csv_text(trips: Iterable[TripRecord], schema: SchemaConfig | None = None) -> str:
    buf = io.StringIO()
    write_trips(trips, buf, schema)
    return buf.getvalue()


# --- regions -----------------------------------------------------------------


@dataclass(frozen=True)
class RegionMap:
    entries: Mapping[int, str]
    region_order: tuple[str, ...]

    def __post_init__(self) -> None:
        missing = [a for a in range(1, N_AREAS + 1) if a not in self.entries]
        if missing:
            raise ConfigError(f"region map does not cover community areas {missing}")
        extra = sorted(a for a in self.entries if not 1 <= a <= N_AREAS)
        if extra:
            raise ConfigError(f"region map has ids outside 1..{N_AREAS}: {extra}")
        stray = sorted(set(self.entries.values()) - set(self.region_order))
        if stray:
            raise ConfigError(f"regions {stray} are not listed in region_order")
        if len(set(self.region_order)) != len(self.region_order):
            raise ConfigError("region_order has duplicates")
        if UNKNOWN in self.region_order:
            raise ConfigError(f"{UNKNOWN!r} is reserved for trips without an area")

    def region_of(self, area_id: int | None) -> str:
        return map_area_to_region(area_id, self)


def _check_area_id(raw, seen: set[int]) -> int:
    try:
        area = int(str(raw).strip())
    except ValueError:
        raise ConfigError(f"region map area id {raw!r} is not an integer") from None
    if not 1 <= area <= N_AREAS:
        raise ConfigError(f"region map area id {area} is outside 1..{N_AREAS}")
    if area in seen:
        raise ConfigError(f"region map lists area {area} more than once")
    seen.add(area)
    return area


def _region_map_from_pairs(pairs: Iterable[tuple], order: Sequence[str] | None) -> RegionMap:
    seen: set[int] = set()
    entries: dict[int, str] = {}
    appearance: list[str] = []
    for raw_id, name in pairs:
        area = _check_area_id(raw_id, seen)
        name = str(name).strip()
        if not name:
            raise ConfigError(f"region map area {area} has an empty region name")
        entries[area] = name
        if name not in appearance:
            appearance.append(name)
    return RegionMap(entries=entries, region_order=tuple(order) if order is not None else tuple(appearance))


def load_region_map(config_file: str | Path) -> RegionMap:
    """Load ``area_id,region`` CSV or a JSON object.

    JSON is either ``{"1": "North", ...}`` or
    ``{"areas": {"1": "North", ...}, "order": ["Central", ...]}``.
    Without an explicit order, regions are ordered by first appearance.
    """
    path = Path(config_file)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":

        def no_dupes(pairs):
            keys = [k for k, _ in pairs]
            dupes = {k for k in keys if keys.count(k) > 1}
            if dupes:
                raise ConfigError(f"region map lists areas {sorted(dupes)} more than once")
            return dict(pairs)

        data = json.loads(text, object_pairs_hook=no_dupes)
        if "areas" in data:
            return _region_map_from_pairs(data["areas"].items(), data.get("order"))
        return _region_map_from_pairs(data.items(), None)

    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] and rows[0][0].strip().lower() in ("area_id", "area", "community_area"):
        rows = rows[1:]
    pairs = []
    for row in rows:
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise ConfigError(f"region map row {row!r} must have two fields")
        pairs.append((row[0], row[1]))
    return _region_map_from_pairs(pairs, None)


def default_region_map() -> RegionMap:
    ref = resources.files("tripchain") / "data" / "regions_default.csv"
    with resources.as_file(ref) as path:
        return load_region_map(path)


def map_area_to_region(area_id: int | None, region_map: RegionMap) -> str:
    if area_id is None:
        return UNKNOWN
    try:
        return region_map.entries[area_id]
    except KeyError:
        raise ConfigError(f"community area {area_id} is outside 1..{N_AREAS}") from None
