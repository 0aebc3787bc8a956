from __future__ import annotations

import math
from datetime import datetime, timedelta

import pytest

from tripchain.ingest import TripRecord, default_region_map

BASE = datetime(2019, 8, 5, 10, 0)
ORIGIN = (41.88, -87.63)
MILES_PER_DEG_LAT = math.pi * 3958.8 / 180.0


def offset(point, north_mi=0.0, east_mi=0.0):
    lat, lon = point
    return (
        lat + north_mi / MILES_PER_DEG_LAT,
        lon + east_mi / (MILES_PER_DEG_LAT * math.cos(math.radians(lat))),
    )


def make_trip(
    tid,
    start_min,
    dur_min,
    pickup=ORIGIN,
    dropoff=None,
    total_cents=1000,
    pickup_area=8,
    dropoff_area=8,
    tip_cents=0,
    charges_cents=0,
    distance_mi=1.0,
    base=BASE,
):
    """Trip starting ``start_min`` minutes after ``base``; fare makes up the rest of the total."""
    start = base + timedelta(minutes=start_min)
    end = start + timedelta(minutes=dur_min)
    return TripRecord(
        trip_id=tid,
        start_ts=start,
        end_ts=end,
        duration_s=int(round(dur_min * 60)),
        distance_mi=distance_mi,
        pickup_area=pickup_area,
        dropoff_area=dropoff_area,
        pickup_centroid=pickup,
        dropoff_centroid=dropoff if dropoff is not None else pickup,
        fare_cents=total_cents - tip_cents - charges_cents,
        tip_cents=tip_cents,
        additional_charges_cents=charges_cents,
        trip_total_cents=total_cents,
    )


def chain(n, dur_min, gap_min, prefix="t", start_min=0.0):
    """n trips at one spot, each starting ``gap_min`` after the previous one ends."""
    out = []
    t = start_min
    for i in range(n):
        out.append(make_trip(f"{prefix}{i:03d}", t, dur_min))
        t += dur_min + gap_min
    return out


@pytest.fixture(scope="session")
def region_map():
    return default_region_map()
