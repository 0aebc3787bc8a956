"""Haversine distance and a time-bucket x spatial-grid candidate index.

The index answers "live trips starting in [t, t + alpha] whose pickup lies
within max_dist of p" by visiting only the time buckets overlapping the
window and the grid cells that can hold a point within max_dist of p.

Cells are laid out on an equirectangular projection whose longitude scale is
taken at the highest latitude the index has seen, so projected distances
never exceed true great-circle distances; pruning a cell on projected
distance therefore never drops a real candidate. The longitude seam at +/-180
is not handled.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Iterator, Sequence, Union

EARTH_RADIUS_MI = 3958.8
EPOCH = datetime(1970, 1, 1)
ONE_SECOND = timedelta(seconds=1)

# Mixed-radix packing of (bucket, cell_x, cell_y) into one int key.
_CELL_OFFSET = 1 << 20
_CELL_RADIX = 1 << 21
_PRUNE_SLACK = 1.0 + 1e-6

_sin = math.sin
_asin = math.asin
_sqrt = math.sqrt


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"invalid coordinates ({self.lat}, {self.lon})")

    def __iter__(self) -> Iterator[float]:
        yield self.lat
        yield self.lon


PointLike = Union[GeoPoint, Sequence[float]]


def to_seconds(ts: datetime) -> int:
    """Wall-clock seconds since 1970-01-01, ignoring any tzinfo."""
    return (ts.replace(tzinfo=None) - EPOCH) // ONE_SECOND


def from_seconds(seconds: int) -> datetime:
    return EPOCH + timedelta(seconds=seconds)


def _hav(phi1: float, lam1: float, cos1: float, phi2: float, lam2: float, cos2: float) -> float:
    # Shared by haversine_miles and the index scan so both produce identical floats.
    s_phi = _sin((phi2 - phi1) * 0.5)
    s_lam = _sin((lam2 - lam1) * 0.5)
    a = s_phi * s_phi + cos1 * cos2 * s_lam * s_lam
    if a > 1.0:
        a = 1.0
    return 2.0 * EARTH_RADIUS_MI * _asin(_sqrt(a))


def _rad(point: PointLike) -> tuple[float, float, float]:
    lat, lon = point
    phi = math.radians(lat)
    return phi, math.radians(lon), math.cos(phi)


def haversine_miles(a: PointLike, b: PointLike) -> float:
    """Great-circle distance in miles on a sphere of radius 3958.8 mi."""
    return _hav(*_rad(a), *_rad(b))


class CandidateIndex:
    """Live-trip index keyed by (start-time bucket, pickup grid cell).

    Trips are stored in integer slots; ``ids[slot]`` is the trip id. A slot is
    live until :meth:`remove` is called on it. Removal deletes the slot from
    its cell set and drops the set once empty, so no tombstones accumulate.
    """

    def __init__(self, bucket_minutes: float = 5.0, cell_miles: float = 1.0, lat_bound: float = 0.0):
        if bucket_minutes <= 0 or cell_miles <= 0:
            raise ValueError("bucket_minutes and cell_miles must be positive")
        if not 0.0 <= lat_bound < 89.0:
            raise ValueError("index supports |lat| < 89 degrees")
        self.bucket_s = bucket_minutes * 60.0
        self.cell_miles = cell_miles
        self.lat_bound_rad = math.radians(lat_bound)
        self.cos_ref = math.cos(self.lat_bound_rad)
        self._x_scale = EARTH_RADIUS_MI * self.cos_ref / cell_miles
        self._y_scale = EARTH_RADIUS_MI / cell_miles
        self._bucket_base: int | None = None

        self.ids: list[str] = []
        self.slot_of: dict[str, int] = {}
        self.start_s: list[int] = []
        self.end_s: list[int] = []
        self.p_phi: list[float] = []
        self.p_lam: list[float] = []
        self.p_cos: list[float] = []
        self.rank: list[int] = []
        self._key: list[int] = []
        self._cells: dict[int, set[int]] = {}
        self._live_list: list[int] = []
        self._live_pos: list[int] = []
        self.excluded: list[str] = []

    # -- construction ---------------------------------------------------------

    def _bucket(self, t: int) -> int:
        return math.floor(t / self.bucket_s) - self._bucket_base

    def _cell(self, phi: float, lam: float) -> tuple[int, int]:
        return math.floor(lam * self._x_scale), math.floor(phi * self._y_scale)

    def insert(self, trip_id: str, start_s: int, end_s: int, pickup: PointLike, rank: int | None = None) -> int:
        if trip_id in self.slot_of:
            raise ValueError(f"duplicate trip id {trip_id!r}")
        phi, lam, cos_phi = _rad(pickup)
        if abs(phi) > self.lat_bound_rad + 1e-12:
            raise ValueError(f"pickup latitude of {trip_id!r} exceeds the index latitude bound")
        if self._bucket_base is None:
            self._bucket_base = math.floor(start_s / self.bucket_s)
        slot = len(self.ids)
        cx, cy = self._cell(phi, lam)
        key = (self._bucket(start_s) * _CELL_RADIX + cx + _CELL_OFFSET) * _CELL_RADIX + cy + _CELL_OFFSET
        self.ids.append(trip_id)
        self.slot_of[trip_id] = slot
        self.start_s.append(start_s)
        self.end_s.append(end_s)
        self.p_phi.append(phi)
        self.p_lam.append(lam)
        self.p_cos.append(cos_phi)
        self.rank.append(slot if rank is None else rank)
        self._key.append(key)
        cell = self._cells.get(key)
        if cell is None:
            self._cells[key] = {slot}
        else:
            cell.add(slot)
        self._live_pos.append(len(self._live_list))
        self._live_list.append(slot)
        return slot

    # -- live-set access ------------------------------------------------------

    def __len__(self) -> int:
        return len(self._live_list)

    def __contains__(self, trip_id: str) -> bool:
        slot = self.slot_of.get(trip_id)
        return slot is not None and self._live_pos[slot] >= 0

    def is_live(self, slot: int) -> bool:
        return self._live_pos[slot] >= 0

    @property
    def live_slots(self) -> Sequence[int]:
        """Live slots in an order that depends only on the insert/remove history."""
        return self._live_list

    @property
    def live(self) -> set[str]:
        return {self.ids[s] for s in self._live_list}

    def remove_slot(self, slot: int) -> None:
        pos = self._live_pos[slot]
        if pos < 0:
            raise AssertionError(f"trip {self.ids[slot]!r} is not live")
        last = self._live_list.pop()
        if last != slot:
            self._live_list[pos] = last
            self._live_pos[last] = pos
        self._live_pos[slot] = -1
        key = self._key[slot]
        cell = self._cells[key]
        cell.remove(slot)
        if not cell:
            del self._cells[key]

    def remove(self, trip_id: str) -> None:
        slot = self.slot_of.get(trip_id)
        if slot is None:
            raise AssertionError(f"trip {trip_id!r} is not in the index")
        self.remove_slot(slot)

    # -- inspection -----------------------------------------------------------

    def _unpack(self, key: int) -> tuple[int, int, int]:
        cy = key % _CELL_RADIX - _CELL_OFFSET
        key //= _CELL_RADIX
        cx = key % _CELL_RADIX - _CELL_OFFSET
        return key // _CELL_RADIX, cx, cy

    def bucket_start(self, bucket: int) -> datetime:
        return from_seconds(round((bucket + self._bucket_base) * self.bucket_s))

    @property
    def time_buckets(self) -> dict[datetime, set[str]]:
        out: dict[datetime, set[str]] = {}
        for key, slots in self._cells.items():
            b, _, _ = self._unpack(key)
            out.setdefault(self.bucket_start(b), set()).update(self.ids[s] for s in slots)
        return out

    @property
    def grid(self) -> dict[tuple[int, int], set[str]]:
        out: dict[tuple[int, int], set[str]] = {}
        for key, slots in self._cells.items():
            _, cx, cy = self._unpack(key)
            out.setdefault((cx, cy), set()).update(self.ids[s] for s in slots)
        return out

    def cell_of(self, trip_id: str) -> tuple[int, int]:
        return self._unpack(self._key[self.slot_of[trip_id]])[1:]

    def bucket_of(self, trip_id: str) -> datetime:
        return self.bucket_start(self._unpack(self._key[self.slot_of[trip_id]])[0])

    # -- queries --------------------------------------------------------------

    def _cell_codes(self, phi: float, lam: float, max_d: float) -> list[int]:
        cell = self.cell_miles
        lat_hi = max(self.lat_bound_rad, abs(phi) + max_d / EARTH_RADIUS_MI)
        c_low = math.cos(min(lat_hi, math.radians(89.5)))
        # x distances in the projection overstate true distance by at most this factor
        # for pairs whose latitudes reach lat_hi.
        stretch = max(1.0, self.cos_ref / c_low)
        x = lam * self._x_scale
        y = phi * self._y_scale
        qcx = math.floor(x)
        qcy = math.floor(y)
        rx = math.ceil(max_d * stretch / cell) + 1
        ry = math.ceil(max_d / cell) + 1
        limit = (max_d * _PRUNE_SLACK / cell) ** 2
        fx = x - qcx
        fy = y - qcy
        codes = []
        for dx in range(-rx, rx + 1):
            gx = (dx - fx) if dx > 0 else (fx - dx - 1) if dx < 0 else 0.0
            gx /= stretch
            gx2 = gx * gx
            if gx2 > limit:
                continue
            base = (qcx + dx + _CELL_OFFSET) * _CELL_RADIX + _CELL_OFFSET + qcy
            for dy in range(-ry, ry + 1):
                gy = (dy - fy) if dy > 0 else (fy - dy - 1) if dy < 0 else 0.0
                if gx2 + gy * gy <= limit:
                    codes.append(base + dy)
        return codes

    def scan(
        self,
        point: tuple[float, float, float],
        t_lo: int,
        t_hi: int,
        max_d: float,
        limit: int | None = None,
        end_max: int | None = None,
    ) -> list[tuple[int, float, int, int]]:
        """Candidates as sorted ``(start_s, miles, rank, slot)`` tuples.

        ``point`` is ``(phi, lam, cos(phi))`` in radians. With ``limit`` the
        scan stops after the first time bucket that completes ``limit``
        candidates; buckets are visited in time order, so the returned prefix
        equals the prefix of the full result. ``end_max`` additionally drops
        candidates ending after it.
        """
        if self._bucket_base is None or not self._cells:
            return []
        phi, lam, cos_phi = point
        codes = self._cell_codes(phi, lam, max_d)
        cells_get = self._cells.get
        start_s = self.start_s
        end_s = self.end_s
        p_phi, p_lam, p_cos, rank = self.p_phi, self.p_lam, self.p_cos, self.rank
        hav = _hav
        out: list[tuple[int, float, int, int]] = []
        for b in range(self._bucket(t_lo), self._bucket(t_hi) + 1):
            offset = b * _CELL_RADIX * _CELL_RADIX
            for code in codes:
                slots = cells_get(offset + code)
                if slots is None:
                    continue
                for j in slots:
                    st = start_s[j]
                    if st < t_lo or st > t_hi:
                        continue
                    if end_max is not None and end_s[j] > end_max:
                        continue
                    d = hav(phi, lam, cos_phi, p_phi[j], p_lam[j], p_cos[j])
                    if d <= max_d:
                        out.append((st, d, rank[j], j))
            if limit is not None and len(out) >= limit:
                return heapq.nsmallest(limit, out)
        out.sort()
        return out if limit is None else out[:limit]

    def query_candidates(
        self, dropoff: PointLike, end_ts: datetime, alpha_hours: float, max_dist_mi: float
    ) -> list[str]:
        """Live trips starting in [end_ts, end_ts + alpha] within max_dist of ``dropoff``.

        Ordered by (start time, distance, trip id).
        """
        if alpha_hours <= 0 or max_dist_mi <= 0:
            raise ValueError("alpha_hours and max_dist_mi must be positive")
        t_lo = to_seconds(end_ts)
        t_hi = t_lo + alpha_hours * 3600.0
        hits = self.scan(_rad(dropoff), t_lo, t_hi, max_dist_mi)
        return [self.ids[j] for _, _, _, j in hits]


def _lat_bound(points: Iterable[PointLike | None]) -> float:
    bound = 0.0
    for p in points:
        if p is not None:
            bound = max(bound, abs(p[0]))
    return bound


def build_index(trips: Iterable, bucket_minutes: float = 5.0, cell_miles: float = 1.0) -> CandidateIndex:
    """Index trips by start bucket and pickup cell.

    Trips without a pickup centroid are skipped and listed in ``excluded``.
    Ties in the candidate ordering break on trip id.
    """
    trips = list(trips)
    lat_bound = _lat_bound(
        p for t in trips for p in (t.pickup_centroid, t.dropoff_centroid)
    )
    index = CandidateIndex(bucket_minutes, cell_miles, lat_bound=lat_bound)
    usable = []
    for t in trips:
        if t.pickup_centroid is None:
            index.excluded.append(t.trip_id)
        else:
            usable.append(t)
    ranks = {tid: r for r, tid in enumerate(sorted(t.trip_id for t in usable))}
    for t in usable:
        index.insert(t.trip_id, to_seconds(t.start_ts), to_seconds(t.end_ts), t.pickup_centroid, ranks[t.trip_id])
    return index
