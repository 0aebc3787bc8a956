"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION n ... PASS|FAIL`` line to the terminal
(even under output capture) before asserting.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
import textwrap
import time
from datetime import datetime, timedelta

import numpy as np
import pytest

from conftest import ORIGIN, make_trip, offset
from tripchain.analytics import cpi_adjust, monthly_cost_per_hour, regional_table
from tripchain.clustering import kmeans, model_to_dict, nearest, select_k
from tripchain.features import est_rate_from_summary
from tripchain.geo import build_index, haversine_miles, to_seconds
from tripchain.ingest import default_region_map
from tripchain.simulator import SimParams, simulate, validate_routes
from tripchain.synth import SynthParams, generate, score


@pytest.fixture
def announce(capsys):
    def _announce(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")

    return _announce


# 1 ---------------------------------------------------------------------------

# (year, cluster, trips, e_per_trip, e_per_drive_hr, est_e_per_hr, total_fares, total_income)
REFERENCE_ROWS = [
    (2019, 0, 20.91, 13.23, 48.05, 25.70, 216.10, 288.70),
    (2019, 1, 7.48, 11.58, 51.40, 24.89, 66.68, 90.17),
    (2019, 2, 4.49, 12.33, 48.60, 25.00, 43.23, 57.85),
    (2019, 3, 6.30, 12.43, 43.94, 23.75, 61.16, 81.41),
    (2019, 4, 5.53, 12.14, 47.71, 24.53, 51.43, 69.80),
    (2019, 5, 5.63, 13.22, 49.22, 26.04, 58.28, 77.80),
    (2019, 6, 5.30, 11.66, 57.89, 26.44, 48.44, 64.49),
    (2019, 7, 6.47, 13.22, 46.81, 25.33, 66.83, 89.27),
    (2019, 8, 5.52, 13.95, 40.53, 29.77, 60.93, 80.92),
    (2023, 0, 20.87, 17.08, 62.59, 33.44, 277.59, 374.54),
    (2023, 1, 7.97, 15.52, 69.37, 33.52, 97.63, 129.15),
    (2023, 2, 6.77, 17.16, 59.81, 32.60, 91.12, 121.25),
    (2023, 3, 5.88, 18.75, 70.41, 37.17, 84.82, 115.73),
    (2023, 4, 4.57, 18.68, 76.01, 38.58, 65.70, 89.55),
    (2023, 5, 5.48, 17.20, 68.31, 34.96, 71.71, 98.16),
    (2023, 6, 5.34, 17.38, 88.12, 39.73, 76.50, 96.59),
    (2023, 7, 6.85, 17.40, 60.80, 33.19, 92.64, 125.10),
    (2023, 8, 6.51, 12.74, 52.47, 26.76, 68.96, 88.91),
    (2023, 9, 5.31, 21.28, 96.66, 46.40, 90.20, 118.42),
    (2023, 10, 5.32, 15.68, 58.39, 31.00, 66.67, 87.82),
]


def test_criterion_1_metric_identity(announce):
    t0 = time.perf_counter()
    bad = []
    for year, cluster, n, _, drive_rate, est, _, income in REFERENCE_ROWS:
        got = est_rate_from_summary(income, drive_rate, n)
        if abs(got - est) > 0.15:
            bad.append(f"{year}/{cluster}: {got:.2f} vs {est:.2f}")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1.0
    announce(1, ok, f"{len(REFERENCE_ROWS) - len(bad)}/{len(REFERENCE_ROWS)} rows within 0.15, "
             f"{elapsed * 1000:.1f} ms" + (f"; mismatches {bad}" if bad else ""))
    assert elapsed < 1.0
    assert not bad


# 2 ---------------------------------------------------------------------------


def random_pool(rng: np.random.Generator, n: int) -> list:
    hubs = [offset(ORIGIN, *rng.uniform(-4, 4, 2)) for _ in range(int(rng.integers(1, 6)))]
    span = float(rng.choice([60, 600, 1440, 2880]))
    trips = []
    for i in range(n):
        hub = hubs[int(rng.integers(len(hubs)))]
        pickup = offset(hub, *rng.normal(0, 0.8, 2))
        dropoff = offset(pickup, *rng.normal(0, 1.5, 2))
        dur = int(rng.integers(0, 45))
        start = int(rng.integers(0, int(span)))
        trips.append(make_trip(f"p{i:05d}", start - 600, dur, pickup=pickup, dropoff=dropoff))
    return trips


def test_criterion_2_partition_and_feasibility(announce):
    rng = np.random.default_rng(20240801)
    sizes = np.unique(np.geomspace(1, 10_000, 100).astype(int))
    sizes = np.concatenate([sizes, rng.integers(1, 10_000, 100 - len(sizes) + 5)])
    sizes[-1] = 10_000
    violations = []
    total = chained = 0
    for p, n in enumerate(sizes.tolist()):
        params = SimParams(
            alpha_hours=float(rng.choice([0.05, 0.25, 0.5])),
            max_dist_mi=float(rng.choice([0.3, 1.0, 2.5])),
            max_trips=int(rng.choice([2, 5, 25])),
            max_session_hours=float(rng.choice([0.75, 3.0, 8.0])),
            top_k=int(rng.choice([1, 3, 10])),
            seed=p,
            partition=str(rng.choice(["day", "none"])),
        )
        trips = random_pool(rng, n)
        out = simulate(trips, params)
        problems = validate_routes(out.routes, trips, params)
        total += n
        chained += sum(r.n_trips > 1 for r in out.routes)
        if problems:
            violations.append((p, n, problems[:3]))
    ok = not violations
    announce(2, ok, f"{len(sizes)} pools, {total} trips, max pool {int(sizes.max())}, "
             f"{chained} multi-trip routes, {len(violations)} pools with violations")
    assert len(sizes) >= 100
    assert not violations


# 3 ---------------------------------------------------------------------------


def test_criterion_3_exact_recovery(announce):
    sizes = np.linspace(50, 500, 20).astype(int).tolist()
    failures = []
    for seed, n in enumerate(sizes, start=1):
        params = SynthParams(n_drivers=n, isolation_mode=True, seed=seed, sim=SimParams(top_k=1))
        truth, trips = generate(params)
        out = simulate(trips, params.sim)
        result = score(truth, [list(r.trips) for r in out.routes])
        if not result.exact_partition:
            failures.append((seed, n, result.to_dict()))
    ok = not failures
    announce(3, ok, f"{len(sizes) - len(failures)}/{len(sizes)} isolation pools recovered exactly "
             f"({sizes[0]}-{sizes[-1]} drivers)")
    assert not failures


# 4 ---------------------------------------------------------------------------


def brute_candidates(trips, live, dropoff, end_ts, alpha_h, max_d):
    lo = to_seconds(end_ts)
    hi = lo + alpha_h * 3600.0
    hits = []
    for t in trips:
        if t.trip_id in live:
            s = to_seconds(t.start_ts)
            if lo <= s <= hi:
                d = haversine_miles(dropoff, t.pickup_centroid)
                if d <= max_d:
                    hits.append((s, d, t.trip_id))
    return [h[2] for h in sorted(hits)]


def test_criterion_4_candidate_query_oracle(announce):
    rng = np.random.default_rng(4)
    mismatches = 0
    queries = 0
    nonempty = 0
    base = datetime(2019, 8, 5, 10)
    for round_ in range(20):
        n = int(rng.integers(1, 5001)) if round_ else 5000
        trips = [
            make_trip(f"q{i:04d}", int(rng.integers(0, 240)), int(rng.integers(0, 30)),
                      pickup=offset(ORIGIN, *rng.uniform(-3, 3, 2)))
            for i in range(n)
        ]
        idx = build_index(trips, bucket_minutes=float(rng.choice([1.0, 5.0, 12.5])),
                          cell_miles=float(rng.choice([0.25, 1.0, 2.0])))
        for i in rng.choice(n, size=n // 4, replace=False).tolist():
            idx.remove(trips[i].trip_id)
        live = idx.live
        for _ in range(50):
            end = base + timedelta(seconds=int(rng.integers(-600, 250 * 60)))
            point = offset(ORIGIN, *rng.uniform(-3.5, 3.5, 2))
            alpha = float(rng.choice([0.05, 0.25, 0.5]))
            max_d = float(rng.choice([0.2, 1.0, 1.7]))
            got = idx.query_candidates(point, end, alpha, max_d)
            want = brute_candidates(trips, live, point, end, alpha, max_d)
            queries += 1
            nonempty += bool(want)
            mismatches += got != want
    ok = mismatches == 0 and queries >= 1000
    announce(4, ok, f"{queries} queries over 20 indexes (<=5000 trips), {nonempty} non-empty, "
             f"{mismatches} mismatches")
    assert queries >= 1000
    assert mismatches == 0


# 5 ---------------------------------------------------------------------------

SIGMA = 0.1
PLANTED_CENTERS = 10 * SIGMA * np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])


def planted(seed: int, n: int = 3000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), n // 3)
    return PLANTED_CENTERS[labels] + rng.normal(0.0, SIGMA, (n, 2))


def test_criterion_5_planted_recovery(announce):
    picked, scores = [], []
    for seed in range(10):
        x = planted(seed)
        model, report = select_k(x, k_min=2, k_max=10, seed=seed)
        picked.append(model.k)
        scores.append(report.scores[model.k])
    ok = all(k == 3 for k in picked) and min(scores) >= 0.9
    announce(5, ok, f"k picked {sorted(set(picked))} over 10 seeds, silhouette "
             f"min {min(scores):.3f} max {max(scores):.3f} (need k=3 and >= 0.9)")
    assert all(k == 3 for k in picked)
    assert min(scores) >= 0.9


# 6 ---------------------------------------------------------------------------


def test_criterion_6_kmeans_invariants(announce):
    rng = np.random.default_rng(6)
    failures = []
    runs = 0
    for trial in range(200):
        n = int(rng.integers(5, 400))
        d = int(rng.integers(1, 6))
        k = int(rng.integers(1, min(n, 8) + 1))
        x = np.round(rng.normal(0, 1, (n, d)) * rng.uniform(0.1, 10), 4)
        if rng.random() < 0.3:
            x = x[rng.integers(0, n, n)]  # duplicates
        if len(np.unique(x, axis=0)) < k:
            continue
        seed = int(rng.integers(0, 2**31))
        model = kmeans(x, k, seed=seed, n_restarts=3)
        runs += 1
        labels, d2 = nearest(x, model.centroids)
        own = ((x - model.centroids[model.assignments]) ** 2).sum(axis=1)
        if not np.all(own <= d2 + 1e-9 * (1 + d2)):
            failures.append((trial, "assignment"))
        hist = np.array(model.inertia_history)
        if np.any(np.diff(hist) > 1e-9 * (1 + hist[:-1])):
            failures.append((trial, "inertia"))
        if np.any(model.sizes() == 0):
            failures.append((trial, "empty"))
        again = kmeans(x, k, seed=seed, n_restarts=3)
        a = json.dumps(model_to_dict(model), sort_keys=True)
        b = json.dumps(model_to_dict(again), sort_keys=True)
        if a != b or model.assignments.tobytes() != again.assignments.tobytes():
            failures.append((trial, "determinism"))
    ok = not failures
    announce(6, ok, f"{runs} runs, {len(failures)} invariant failures")
    assert runs >= 100
    assert not failures


# 7 ---------------------------------------------------------------------------

_DAY_SCRIPT = textwrap.dedent(
    """
    import json, resource, sys, time
    from datetime import date, timedelta
    from tripchain.simulator import SimParams, simulate
    from tripchain.synth import SynthParams, generate

    n_days = int(sys.argv[1])
    sim_s = gen_s = 0.0
    n = 0
    for d in range(n_days):
        t0 = time.perf_counter()
        _, trips = generate(SynthParams(n_drivers=34000, seed=7 + d, start_date=date(2019, 8, 5) + timedelta(days=d)))
        t1 = time.perf_counter()
        out = simulate(trips, SimParams(seed=d))
        t2 = time.perf_counter()
        gen_s += t1 - t0
        sim_s += t2 - t1
        n += len(trips)
        del trips, out
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    print(json.dumps({"trips": n, "sim_s": sim_s, "gen_s": gen_s, "rss": rss}))
    """
)


def run_days(n_days: int) -> dict:
    proc = subprocess.run([sys.executable, "-c", _DAY_SCRIPT, str(n_days)], capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


@pytest.mark.slow
def test_criterion_7_throughput(announce):
    day = run_days(1)
    week = run_days(7)
    day_ok = day["trips"] >= 300_000 and day["sim_s"] <= 60 and day["rss"] <= 4 * 2**30
    week_ok = week["trips"] >= 2_000_000 and week["sim_s"] <= 600
    announce(7, day_ok and week_ok,
             f"day {day['trips']} trips simulated in {day['sim_s']:.1f} s, peak RSS {day['rss'] / 2**20:.0f} MiB; "
             f"week {week['trips']} trips in {week['sim_s']:.1f} s (+{week['gen_s']:.1f} s generation)")
    assert day["trips"] >= 300_000
    assert day["sim_s"] <= 60
    assert day["rss"] <= 4 * 2**30
    assert week["trips"] >= 2_000_000
    assert week["sim_s"] <= 600


# 8 ---------------------------------------------------------------------------


def test_criterion_8_aggregation_fixtures(announce, region_map):
    checks = {}
    # ratio of sums: $30 over 0.5 h and $10 over 1 h is 26.67/h, not the 35/h mean of ratios
    month = monthly_cost_per_hour([make_trip("a", 0, 30, total_cents=3000), make_trip("b", 60, 60, total_cents=1000)])
    row = month.rows[0]
    checks["monthly ratio of sums"] = math.isclose(row.cost_per_driving_hour, 40 / 1.5, abs_tol=1e-9)
    checks["monthly mean of ratios kept apart"] = math.isclose(row.mean_of_ratios, 35.0, abs_tol=1e-9)

    airport = region_map.entries
    airport_area = next(a for a, r in airport.items() if r == "Airport")
    central_area = next(a for a, r in airport.items() if r == "Central")
    fixture = [
        make_trip("x1", 0, 60, pickup_area=airport_area, dropoff_area=central_area, total_cents=9717),
        make_trip("x2", 0, 30, pickup_area=central_area, dropoff_area=central_area, total_cents=1000),
        make_trip("x3", 0, 90, pickup_area=central_area, dropoff_area=airport_area, total_cents=2000),
        make_trip("x4", 0, 10, pickup_area=None, dropoff_area=central_area, total_cents=500),
    ]
    table = regional_table(fixture, region_map)
    checks["airport pickup rate"] = abs(table.get("Airport", "pickup").cost_per_driving_hour - 97.17) <= 0.01
    checks["central pickup ratio of sums"] = math.isclose(table.get("Central", "pickup").cost_per_driving_hour, 30 / 2.0)
    checks["unknown pickup counted"] = table.unknown["pickup"] == 1

    _, trips = generate(SynthParams(n_drivers=400, seed=8))
    shares = regional_table(trips, default_region_map())
    for endpoint in ("pickup", "dropoff"):
        checks[f"{endpoint} shares sum to 100"] = abs(sum(shares.shares(endpoint).values()) - 100.0) <= 0.01

    many = [make_trip(f"m{i}", 0, 20 + i, total_cents=1000 + 37 * i, base=datetime(2019, 1 + i % 12, 3, 9))
            for i in range(30)]
    series = monthly_cost_per_hour(many)
    cpi = {r.period: 251.7 for r in series.rows}
    real = cpi_adjust(series, cpi, series.rows[0].period)
    checks["cpi identity"] = all(
        math.isclose(a.cost_per_driving_hour, b.cost_per_driving_hour, rel_tol=1e-12)
        for a, b in zip(series.rows, real.rows)
    )
    failed = [name for name, ok in checks.items() if not ok]
    announce(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} fixture checks" +
             (f"; failed {failed}" if failed else ""))
    assert not failed


# 9 ---------------------------------------------------------------------------


def test_criterion_9_pipeline_determinism(announce, tmp_path):
    from tripchain.cli import main

    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "seed": 9,
        "synth": {"n_drivers": 300},
        "clustering": {"k_min": 2, "k_max": 6, "n_restarts": 3},
    }))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["pipeline", "-c", str(cfg), "-o", str(o)]) for o in outs]
    first = {p.name: p for p in outs[0].iterdir()}
    second = {p.name: p for p in outs[1].iterdir()}
    differing = []
    for name in sorted(first.keys() | second.keys()):
        if name not in first or name not in second:
            differing.append(name)
            continue
        if name.startswith("manifest-"):
            a, b = json.loads(first[name].read_text()), json.loads(second[name].read_text())
            a.pop("wall_time_s"), b.pop("wall_time_s")
            same = a == b
        else:
            same = first[name].read_bytes() == second[name].read_bytes()
        if not same:
            differing.append(name)
    ok = codes == [0, 0] and not differing
    announce(9, ok, f"{len(first)} artifacts compared across two runs, {len(differing)} differ "
             "(manifest wall time excluded)")
    assert codes == [0, 0]
    assert not differing
