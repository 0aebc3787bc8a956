"""Command-line front end: ``tripchain <subcommand> --config run.json``.

Each subcommand computes whatever upstream stages it needs in memory and
writes only its own artifacts; ``pipeline`` writes every stage's artifacts.
Artifact names carry the run id, a prefix of the config hash.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Mapping

from . import __version__
from .analytics import (
    AnalyticsError,
    cluster_report,
    cpi_adjust,
    monthly_cost_per_hour,
    regional_by_year,
    regional_long,
    regional_proportions,
    temporal_long,
    temporal_proportions,
    write_long,
    write_table,
)
from .clustering import ClusteringError, select_k, write_assignments, write_model_json
from .errors import ConfigError, DataError, InvariantError
from .features import (
    feature_matrix,
    feature_names,
    filter_active,
    route_metrics,
    standardize,
    write_feature_csv,
)
from .ingest import IngestStats, SchemaConfig, default_region_map, load_region_map, parse_trips, write_trips
from .simulator import SimParams, default_workers, read_route_ids, simulate, write_routes
from .synth import SynthParams, generate, score, write_truth

log = logging.getLogger("tripchain")

SUBCOMMANDS = ("ingest", "monthly", "regional", "simulate", "features", "cluster", "report", "synth", "evaluate", "pipeline")
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3, 4
# keys that say where or how fast to run, not what to compute
UNHASHED_KEYS = ("output_dir", "workers")


@dataclass
class FeatureConfig:
    include_dropoff: bool = False
    min_trips: int = 2


@dataclass
class ClusterConfig:
    k_min: int = 4
    k_max: int = 16
    n_restarts: int = 10
    subsample_size: int = 10000


@dataclass
class RunConfig:
    seed: int
    output_dir: str = "out"
    input: list[str] = field(default_factory=list)
    region_map: str | None = None
    truth: str | None = None
    windows: list[list[str]] = field(default_factory=list)
    sim: dict = field(default_factory=dict)
    schema: dict = field(default_factory=dict)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    synth: dict | None = None
    cpi: dict | None = None
    exclude_years: list[int] = field(default_factory=lambda: [2018])
    workers: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in UNHASHED_KEYS}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return self.config_hash()[:12]

    def sim_params(self) -> SimParams:
        data = dict(self.sim)
        data.setdefault("seed", self.seed)
        return _build("sim", SimParams.from_dict, data)

    def schema_config(self) -> SchemaConfig:
        return _build("schema", SchemaConfig.from_dict, self.schema)

    def synth_params(self) -> SynthParams:
        if self.synth is None:
            raise ConfigError("config.synth: section is required for this subcommand")
        data = dict(self.synth)
        data.setdefault("seed", self.seed)
        return _build("synth", lambda d: SynthParams.from_dict(d, sim=self.sim_params()), data)

    def parsed_windows(self) -> list[tuple[date, date]]:
        out = []
        for i, w in enumerate(self.windows):
            if not isinstance(w, (list, tuple)) or len(w) != 2:
                raise ConfigError(f"config.windows[{i}]: expected [start_date, end_date]")
            try:
                lo, hi = date.fromisoformat(w[0]), date.fromisoformat(w[1])
            except (TypeError, ValueError):
                raise ConfigError(f"config.windows[{i}]: dates must be ISO YYYY-MM-DD") from None
            if lo > hi:
                raise ConfigError(f"config.windows[{i}]: start is after end")
            out.append((lo, hi))
        return out


def _build(section: str, fn: Callable, data):
    try:
        return fn(data)
    except ConfigError as exc:
        raise ConfigError(f"config.{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.{section}: {exc}") from None


def _typed_section(cls, data, name: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"config.{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config.{name}: unknown keys {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: Mapping, base_dir: Path | None = None) -> RunConfig:
    """Validate a raw config mapping. Relative paths resolve against ``base_dir``."""
    if not isinstance(data, Mapping):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    if "seed" not in data or data["seed"] is None:
        raise ConfigError("config.seed: required (there is no clock-based default)")
    seed = data["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 1 << 64:
        raise ConfigError("config.seed: must be an integer in [0, 2**64)")
    raw = dict(data)
    raw["features"] = _typed_section(FeatureConfig, raw.get("features", {}), "features")
    raw["clustering"] = _typed_section(ClusterConfig, raw.get("clustering", {}), "clustering")
    for name in ("sim", "schema"):
        if not isinstance(raw.get(name, {}), Mapping):
            raise ConfigError(f"config.{name}: expected an object")
    if isinstance(raw.get("input"), str):
        raw["input"] = [raw["input"]]

    def resolve(p):
        if p is None:
            return None
        path = Path(p)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return str(path)

    raw["input"] = [resolve(p) for p in raw.get("input", [])]
    for key in ("region_map", "truth"):
        raw[key] = resolve(raw.get(key))
    if raw.get("output_dir") is not None:
        raw["output_dir"] = resolve(raw["output_dir"])
    cfg = RunConfig(**raw)
    for i, p in enumerate(cfg.input):
        if not Path(p).is_file():
            raise ConfigError(f"config.input[{i}]: {p} does not exist")
    for key in ("region_map", "truth"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"config.{key}: {p} does not exist")
    cfg.parsed_windows()
    cfg.sim_params()
    cfg.schema_config()
    k = cfg.clustering
    if not 2 <= k.k_min <= k.k_max:
        raise ConfigError("config.clustering: need 2 <= k_min <= k_max")
    if k.n_restarts < 1 or k.subsample_size < 2:
        raise ConfigError("config.clustering: n_restarts >= 1 and subsample_size >= 2 required")
    if cfg.features.min_trips < 0:
        raise ConfigError("config.features.min_trips: must be >= 0")
    if cfg.synth is not None:
        cfg.synth_params()
    if cfg.cpi is not None:
        if not isinstance(cfg.cpi, Mapping) or "table" not in cfg.cpi or "base" not in cfg.cpi:
            raise ConfigError("config.cpi: expected {\"table\": {...} or path, \"base\": \"YYYY-MM\"}")
        if isinstance(cfg.cpi["table"], str):
            p = resolve(cfg.cpi["table"])
            if not Path(p).is_file():
                raise ConfigError(f"config.cpi.table: {p} does not exist")
            cfg.cpi = {**cfg.cpi, "table": p}
    return cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else stay strings."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
            node = nxt
        node[parts[-1]] = value
    return out


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    data: dict = {}
    base = None
    if path is not None:
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
        base = p.parent
    return config_from_dict(apply_overrides(data, overrides), base)


# --- artifacts -----------------------------------------------------------------


class Artifacts:
    """Tracks files written by a run; writes go to a temp file then rename."""

    def __init__(self, out_dir: Path, run_id: str):
        self.out_dir = out_dir
        self.run_id = run_id
        self.written: list[Path] = []
        self.counts: dict[str, Any] = {}

    def path(self, stem: str, ext: str) -> Path:
        return self.out_dir / f"{stem}-{self.run_id}.{ext}"

    def write(self, stem: str, ext: str, writer: Callable[[Path], None]) -> Path:
        dest = self.path(stem, ext)
        dest.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.", dir=dest.parent)
        os.close(fd)
        try:
            writer(Path(tmp))
            os.replace(tmp, dest)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise
        self.written.append(dest)
        return dest

    def write_json(self, stem: str, payload) -> Path:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        return self.write(stem, "json", lambda p: p.write_text(text, encoding="utf-8"))

    def discard(self) -> None:
        for p in self.written:
            with contextlib.suppress(FileNotFoundError):
                p.unlink()
        self.written.clear()


# --- stages --------------------------------------------------------------------


class Run:
    """Lazily computed pipeline state for one config."""

    def __init__(self, cfg: RunConfig, artifacts: Artifacts, workers: int):
        self.cfg = cfg
        self.art = artifacts
        self.workers = workers
        self.region_map = load_region_map(cfg.region_map) if cfg.region_map else default_region_map()
        self._cache: dict[str, Any] = {}

    def _once(self, name: str, fn: Callable):
        if name not in self._cache:
            self._cache[name] = fn()
        return self._cache[name]

    def synth(self):
        def go():
            params = self.cfg.synth_params()
            truth, trips = generate(params, self.region_map)
            self.art.counts["synth"] = {"drivers": len(truth), "trips": len(trips)}
            return truth, trips

        return self._once("synth", go)

    def trips(self):
        def go():
            stats = IngestStats()
            if self.cfg.input:
                trips = []
                schema = self.cfg.schema_config()
                for path in self.cfg.input:
                    part, st = parse_trips(path, schema)
                    trips.extend(part)
                    stats.merge(st)
            elif self.cfg.synth is not None:
                trips = list(self.synth()[1])
                stats.rows_read = stats.rows_accepted = len(trips)
            else:
                raise ConfigError("config.input: no trip files given and no synth section to generate from")
            windows = self.cfg.parsed_windows()
            if windows:
                before = len(trips)
                trips = [t for t in trips if any(lo <= t.start_ts.date() <= hi for lo, hi in windows)]
                self.art.counts["outside_windows"] = before - len(trips)
            self.art.counts["ingest"] = stats.to_dict()
            self.art.counts["trips"] = len(trips)
            return trips

        return self._once("trips", go)

    def trips_by_id(self):
        return self._once("trips_by_id", lambda: {t.trip_id: t for t in self.trips()})

    def sim(self):
        def go():
            out = simulate(self.trips(), self.cfg.sim_params(), workers=self.workers)
            self.art.counts["simulate"] = {"routes": out.stats.n_drivers, "singletons": out.stats.singletons}
            return out

        return self._once("sim", go)

    def features(self):
        def go():
            active = filter_active(self.sim().routes, self.cfg.features.min_trips)
            matrix, kept, rejected = feature_matrix(
                active, self.trips_by_id(), self.region_map, self.cfg.features.include_dropoff
            )
            routes = [active[i] for i in kept]
            self.art.counts["features"] = {"active_routes": len(active), "rows": len(routes), "rejected": rejected}
            names = feature_names(self.region_map, self.cfg.features.include_dropoff)
            return names, routes, matrix

        return self._once("features", go)

    def model(self):
        def go():
            names, routes, matrix = self.features()
            c = self.cfg.clustering
            if len(routes) < c.k_max:
                raise DataError(f"only {len(routes)} active routes; clustering needs at least k_max={c.k_max}")
            z, stats = standardize(matrix)
            model, report = select_k(z, c.k_min, c.k_max, seed=self.cfg.seed, n_restarts=c.n_restarts,
                                     subsample_size=c.subsample_size)
            self.art.counts["cluster"] = {"best_k": report.best_k, "points": len(routes)}
            return model, report, stats

        return self._once("model", go)

    # stage writers

    def stage_synth(self):
        truth, trips = self.synth()
        self.art.write("synth-trips", "csv", lambda p: write_trips(trips, p))
        self.art.write("truth", "csv", lambda p: write_truth(truth, p))

    def stage_ingest(self):
        trips = self.trips()
        self.art.write("trips", "csv", lambda p: write_trips(trips, p))
        self.art.write_json("ingest", {"stats": self.art.counts["ingest"], "trips": len(trips)})

    def stage_monthly(self):
        series = monthly_cost_per_hour(self.trips())
        self.art.write("monthly", "csv", lambda p: write_table(p, series.rows))
        if self.cfg.cpi is not None:
            table = self.cfg.cpi["table"]
            if isinstance(table, str):
                table = json.loads(Path(table).read_text(encoding="utf-8"))
            real = cpi_adjust(series, table, self.cfg.cpi["base"])
            self.art.write("monthly-real", "csv", lambda p: write_table(p, real.rows))
        self.art.counts["monthly"] = {"months": len(series.rows), "zero_duration": series.excluded_zero_duration}

    def stage_regional(self):
        tables = regional_by_year(self.trips(), self.region_map, self.cfg.exclude_years)
        rows = [r for t in tables.values() for r in t.rows]
        if not rows:
            raise DataError("no trips left for regional tables after excluding years")
        self.art.write("regional", "csv", lambda p: write_table(p, rows))
        self.art.counts["regional"] = {"years": sorted(tables)}

    def stage_simulate(self):
        out = self.sim()
        self.art.write("routes", "csv", lambda p: write_routes(out.routes, p))
        self.art.write_json("sim-stats", out.stats.to_dict())

    def stage_features(self):
        names, routes, matrix = self.features()
        ids = [r.driver_id for r in routes]
        self.art.write("features", "csv", lambda p: write_feature_csv(p, names, ids, matrix))

    def stage_cluster(self):
        names, routes, _ = self.features()
        model, report, stats = self.model()
        self.art.write("model", "json", lambda p: write_model_json(p, model, report, stats, names))
        ids = [r.driver_id for r in routes]
        self.art.write("assignments", "csv", lambda p: write_assignments(p, ids, model.assignments))

    def stage_report(self):
        _, routes, _ = self.features()
        model, _, _ = self.model()
        by_id = self.trips_by_id()
        metrics = [route_metrics(r, by_id) for r in routes]
        report = cluster_report(metrics, model.assignments.tolist(), model.k)
        self.art.write("cluster-report", "csv", lambda p: write_table(p, report.rows))
        self.art.write_json(
            "cluster-markers",
            {"highest": report.highest, "lowest": report.lowest, "excluded_no_rate": report.excluded_no_rate},
        )
        temporal = temporal_proportions(routes, model.assignments.tolist(), by_id)
        self.art.write("temporal", "csv", lambda p: write_long(p, temporal_long(temporal)))
        regional = regional_proportions(routes, model.assignments.tolist(), by_id, self.region_map)
        self.art.write("cluster-regions", "csv", lambda p: write_long(p, regional_long(regional)))

    def stage_evaluate(self):
        if self.cfg.truth is not None:
            truth = read_route_ids(self.cfg.truth)
        elif self.cfg.synth is not None and not self.cfg.input:
            truth = self.synth()[0]
        else:
            raise ConfigError("config.truth: evaluate needs a truth file or a synth section without input")
        pred = [list(r.trips) for r in self.sim().routes]
        result = score(truth, pred)
        self.art.counts["evaluate"] = result.to_dict()
        self.art.write_json("evaluation", result.to_dict())

    def stage_pipeline(self):
        if not self.cfg.input and self.cfg.synth is not None:
            self.stage_synth()
        for name in ("ingest", "monthly", "regional", "simulate", "features", "cluster", "report"):
            getattr(self, f"stage_{name}")()
        if self.cfg.truth is not None or (self.cfg.synth is not None and not self.cfg.input):
            self.stage_evaluate()


def run(subcommand: str, cfg: RunConfig, workers: int | None = None) -> tuple[int, Path | None]:
    """Execute one subcommand; returns (exit status, manifest path)."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out_dir = Path(cfg.output_dir)
    art = Artifacts(out_dir, cfg.run_id)
    t0 = time.perf_counter()
    try:
        if workers is None:
            workers = cfg.workers if cfg.workers is not None else default_workers()
        state = Run(cfg, art, workers)
        getattr(state, f"stage_{subcommand}")()
    except BaseException:
        art.discard()
        raise
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "run_id": cfg.run_id,
        "config": {k: v for k, v in cfg.to_dict().items() if k not in UNHASHED_KEYS},
        "seeds": {"run": cfg.seed, "sim": cfg.sim_params().seed},
        "counts": art.counts,
        "artifacts": [
            {"name": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in art.written
        ],
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    path = art.write_json(f"manifest-{subcommand}", manifest)
    return EXIT_OK, path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripchain",
        description="Link anonymized ride-hail trips into driver sessions and report on earnings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="stage to run; 'pipeline' runs all of them")
    parser.add_argument("-c", "--config", help="JSON run config")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set sim.top_k=1 (value parsed as JSON when possible)",
    )
    parser.add_argument("-o", "--output-dir", help="shortcut for --set output_dir=DIR")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("-j", "--workers", type=int, help="process count for simulation (env TRIPCHAIN_WORKERS)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = list(args.overrides)
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        _, manifest = run(args.subcommand, cfg, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ClusteringError, AnalyticsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"internal invariant failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
