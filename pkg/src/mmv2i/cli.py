"""Command-line entry point: ``mmv2i {coverage,connectivity,throughput,validate}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 I/O error,
3 validation failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from . import connectivity as cx
from . import coverage as cov
from . import validation as val
from .channel import ChannelParams
from .units import RAW_DEFAULTS, AntennaArray, ConfigError, ScenarioParams, convert_units

log = logging.getLogger("mmv2i")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 1, 2, 3

DENSITIES_PER_KM = [10.0 * i for i in range(1, 11)]
ARRAYS_4X4 = [[2, 2], [2, 2]]
ARRAYS_64X16 = [[8, 8], [4, 4]]
MIMO_CONFIGS = {"4x4": ARRAYS_4X4, "4x16": [[2, 2], [4, 4]], "64x4": [[8, 8], [2, 2]],
                "64x16": ARRAYS_64X16}

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "scenario": {**RAW_DEFAULTS, "speed_kmh": 90.0, "slot_s": 0.2},
    "channel": {},
    "coverage": {
        "densities_per_km": DENSITIES_PER_KM,
        "arrays": [ARRAYS_4X4, ARRAYS_64X16],
        "trials": cov.DEFAULT_TRIALS,
    },
    "connectivity": {
        "densities_per_km": DENSITIES_PER_KM,
        "arrays": [ARRAYS_4X4, ARRAYS_64X16],
        "single_array": ARRAYS_64X16,
        "speeds_kmh": [10.0, 30.0, 90.0, 130.0],
        "slots_s": [0.025, 0.1, 0.2, 0.5, 1.0],
        "sweeps": ["mimo", "speed", "slot"],
        "r_comm_m": None,
    },
    "throughput": {
        "densities_per_km": DENSITIES_PER_KM,
        "arrays": [ARRAYS_4X4, ARRAYS_64X16],
        "single_array": ARRAYS_64X16,
        "speeds_kmh": [30.0, 90.0, 130.0],
        "sweeps": ["mimo", "speed"],
        "table": True,
        "table_rho_per_km": 20.0,
        "table_speeds_kmh": [30.0, 90.0, 130.0],
        "rate_samples": 2000,
        "r_comm_m": None,
    },
    "validation": {
        "rho_per_km": list(val.GRID_RHO_PER_KM),
        "speed_kmh": list(val.GRID_SPEED_KMH),
        "slot_s": list(val.GRID_SLOT_S),
        "r_comm_m": val.GRID_R_COMM_M,
        "n_slots": val.DEFAULT_SLOTS,
    },
}

# Figure presets: the command they belong to and the config they overlay.
PRESETS: dict[str, tuple[str, dict]] = {
    "fig1": ("coverage", {}),
    "fig3": ("connectivity", {"connectivity": {"sweeps": ["mimo"]}}),
    "fig5": ("connectivity", {"connectivity": {"sweeps": ["mimo", "speed", "slot"]}}),
    "fig6": ("connectivity", {"connectivity": {"sweeps": ["mimo", "speed", "slot"]}}),
    "fig7": ("throughput", {"throughput": {"sweeps": ["mimo", "speed"], "table": False}}),
    "fig8": ("throughput", {"throughput": {"sweeps": [], "table": True}}),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration --------------------------------------------------------------------


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    unknown = []
    for k, v in over.items():
        if k not in base:
            unknown.append(f"{path}{k}")
        elif isinstance(base[k], dict) and k != "channel":
            if not isinstance(v, dict):
                raise ConfigError("expected an object", [f"{path}{k}"])
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    if unknown:
        raise ConfigError("unknown configuration keys", unknown)
    return out


def load_config(path: str | None, preset: str | None = None) -> dict:
    """Defaults, then the preset overlay, then the file.

    Scenario keys may sit at the top level of the file or under ``scenario``.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if preset:
        cfg = _merge(cfg, PRESETS[preset][1])
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_USAGE) from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must hold a JSON object", EXIT_USAGE)
    top_scenario = {k: raw.pop(k) for k in list(raw) if k in RAW_DEFAULTS}
    if top_scenario:
        raw.setdefault("scenario", {}).update(top_scenario)
    return _merge(cfg, raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _scenario(cfg: dict) -> ScenarioParams:
    return convert_units(cfg["scenario"])


def _channel(cfg: dict) -> ChannelParams:
    return ChannelParams.from_raw(cfg["channel"])


def _arrays(pairs, field: str) -> list[tuple[AntennaArray, AntennaArray]]:
    out = []
    try:
        for pair in pairs:
            if isinstance(pair, str):
                pair = MIMO_CONFIGS[pair]
            bs, veh = pair
            out.append((AntennaArray(*bs), AntennaArray(*veh)))
    except (TypeError, ValueError, KeyError):
        raise ConfigError("arrays must be [[bs_rows, bs_cols], [veh_rows, veh_cols]] pairs "
                          f"or one of {', '.join(MIMO_CONFIGS)}", [field]) from None
    if not out:
        raise ConfigError("at least one array configuration is required", [field])
    return out


def _floats(values, field: str, positive: bool = True) -> list[float]:
    try:
        out = [float(v) for v in values]
    except (TypeError, ValueError):
        raise ConfigError("expected a list of numbers", [field]) from None
    if positive and any(not v > 0 for v in out):
        raise ConfigError("values must be positive", [field])
    return out


def _int(value, field: str, minimum: int = 1) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError("expected an integer", [field]) from None
    if out < minimum:
        raise ConfigError(f"must be >= {minimum}", [field])
    return out


# -- outputs and manifest ---------------------------------------------------------------


def source_version() -> str:
    """Package version plus a short digest of the installed sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+g{h.hexdigest()[:10]}"


def _prepare_out(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc.strerror or exc}",
                       EXIT_IO) from None
    return path


def _write(path: Path, text: str) -> str:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None
    return hashlib.sha256(text.encode()).hexdigest()


def _manifest(out: Path, command: str, cfg: dict, sums: dict, started: float, jobs: int):
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": source_version(),
        "outputs": sums,
        "jobs": jobs,
        "duration_s": round(time.monotonic() - started, 3),
    }
    _write(out / f"manifest_{command}.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def gnuplot_script(csv_name: str, x_col: int, y_col: int, y_label: str) -> str:
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'node density (nodes/km)'\n"
        f"set ylabel '{y_label}'\n"
        f"plot '{csv_name}' using {x_col}:{y_col} with linespoints\n"
    )


# -- commands ---------------------------------------------------------------------------


def cmd_coverage(cfg: dict, out: Path, jobs: int) -> dict[str, str]:
    sec = cfg["coverage"]
    params = _scenario(cfg)
    densities = _floats(sec["densities_per_km"], "coverage.densities_per_km")
    arrays = _arrays(sec["arrays"], "coverage.arrays")
    trials = _int(sec["trials"], "coverage.trials", cov.MIN_TRIALS)
    results = cov.coverage_sweep(densities, arrays, params, int(cfg["seed"]), trials,
                                 _channel(cfg), jobs)
    for r in results:
        log.info("rho=%g/km bs=%s veh=%s R_comm=%.1f m +/- %.1f", r.rho_per_km, r.bs_array,
                 r.veh_array, r.r_comm_m, r.ci95_m)
    return {"coverage.csv": _write(out / "coverage.csv", cov.coverage_csv(results))}


def _r_comm_source(sec: dict, coverage_path: str | None, out: Path, field: str):
    fixed = sec.get("r_comm_m")
    if fixed is not None:
        try:
            r = float(fixed)
        except (TypeError, ValueError):
            raise ConfigError("expected a number", [f"{field}.r_comm_m"]) from None
        if not r > 0:
            raise ConfigError("must be positive", [f"{field}.r_comm_m"])
        return r
    path = Path(coverage_path) if coverage_path else out / "coverage.csv"
    try:
        table = cx.RCommTable(cov.read_coverage_csv(path))
    except OSError as exc:
        raise CliError(f"cannot read coverage CSV {path}: {exc.strerror or exc}; "
                       f"run the coverage command first or set {field}.r_comm_m", EXIT_IO) from None
    except (KeyError, ValueError) as exc:
        raise CliError(f"coverage CSV {path} is malformed: {exc}", EXIT_USAGE) from None
    return table


def _sweep_grids(sec: dict, params: ScenarioParams, field: str) -> dict[str, list[ScenarioParams]]:
    densities = _floats(sec["densities_per_km"], f"{field}.densities_per_km")
    arrays = _arrays(sec["arrays"], f"{field}.arrays")
    single = _arrays([sec["single_array"]], f"{field}.single_array")[0]
    grids: dict[str, list[ScenarioParams]] = {}
    for name in sec["sweeps"]:
        if name == "mimo":
            grids[name] = [params.replace(rho=d / 1000.0, bs_array=bs, veh_array=veh)
                           for bs, veh in arrays for d in densities]
        elif name == "speed":
            speeds = _floats(sec["speeds_kmh"], f"{field}.speeds_kmh", positive=False)
            grids[name] = [params.replace(rho=d / 1000.0, speed=v / 3.6, bs_array=single[0],
                                          veh_array=single[1])
                           for v in speeds for d in densities]
        elif name == "slot":
            slots = _floats(sec["slots_s"], f"{field}.slots_s")
            grids[name] = [params.replace(rho=d / 1000.0, slot_duration=t, bs_array=single[0],
                                          veh_array=single[1])
                           for t in slots for d in densities]
        else:
            raise ConfigError(f"unknown sweep {name!r}", [f"{field}.sweeps"])
    return grids


def _metrics(grid, r_source, **kw):
    try:
        return cx.metrics_sweep(grid, r_source, **kw)
    except cx.MissingRCommError as exc:
        raise CliError(f"density grid does not match the coverage data: {exc}", EXIT_USAGE) from None


def cmd_connectivity(cfg: dict, out: Path, jobs: int, coverage_path: str | None) -> dict[str, str]:
    sec = cfg["connectivity"]
    params = _scenario(cfg)
    r_source = _r_comm_source(sec, coverage_path, out, "connectivity")
    grids = _sweep_grids(sec, params, "connectivity")
    sums, everything = {}, []
    for name, grid in grids.items():
        rows = _metrics(grid, r_source)
        everything.extend(rows)
        fname = f"connectivity_{name}.csv"
        sums[fname] = _write(out / fname, cx.metrics_csv(rows))
    sums["connectivity.csv"] = _write(out / "connectivity.csv", cx.metrics_csv(everything))
    return sums


def cmd_throughput(cfg: dict, out: Path, jobs: int, coverage_path: str | None) -> dict[str, str]:
    sec = cfg["throughput"]
    params = _scenario(cfg)
    r_source = _r_comm_source(sec, coverage_path, out, "throughput")
    grids = _sweep_grids(sec, params, "throughput")
    n_rate = _int(sec["rate_samples"], "throughput.rate_samples")
    kw = dict(with_rate=True, n_rate_samples=n_rate, seed=int(cfg["seed"]),
              channel=_channel(cfg), jobs=jobs)
    rows = []
    for grid in grids.values():
        rows.extend(_metrics(grid, r_source, **kw))
    if sec["table"]:
        rho = float(sec["table_rho_per_km"]) / 1000.0
        speeds = _floats(sec["table_speeds_kmh"], "throughput.table_speeds_kmh", positive=False)
        table = [params.replace(rho=rho, speed=v / 3.6, bs_array=bs, veh_array=veh)
                 for bs, veh in _arrays(sec["arrays"], "throughput.arrays") for v in speeds]
        rows.extend(_metrics(table, r_source, **kw))
    if not rows:
        raise ConfigError("nothing to compute: no sweeps and no table", ["throughput.sweeps"])
    return {"throughput.csv": _write(out / "throughput.csv", cx.metrics_csv(rows))}


def cmd_validate(cfg: dict, out: Path, jobs: int, corrupt: str | None = None):
    sec = cfg["validation"]
    base = _scenario(cfg)
    grid = val.validation_grid(_floats(sec["rho_per_km"], "validation.rho_per_km"),
                               _floats(sec["speed_kmh"], "validation.speed_kmh", positive=False),
                               _floats(sec["slot_s"], "validation.slot_s"), base)
    r_comm = float(sec["r_comm_m"])
    if not r_comm > 0:
        raise ConfigError("must be positive", ["validation.r_comm_m"])
    n_slots = _int(sec["n_slots"], "validation.n_slots", 1000)
    formulas = None
    if corrupt:
        good = val.default_formulas()
        if corrupt not in good:
            raise ConfigError(f"cannot corrupt unknown metric {corrupt!r}", ["--corrupt"])
        formulas = {corrupt: _Corrupted(good[corrupt])}
    rows = val.run_validation(grid, r_comm, n_slots, int(cfg["seed"]), formulas, jobs)
    sums = {"validation.csv": _write(out / "validation.csv", val.validation_csv(rows))}
    return sums, val.failures(rows), rows


class _Corrupted:
    """Negative control: a closed form off by 20%."""

    def __init__(self, f):
        self.f = f

    def __call__(self, *args):
        return 1.2 * self.f(*args)


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--trials", type=int, metavar="N",
                        help="coverage trials per cell, rate samples per point, or slots per "
                             "validation run, depending on the command")
    common.add_argument("--preset", choices=sorted(PRESETS), help="figure preset")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    common.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="mmv2i", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("coverage", parents=[common], help="Monte Carlo coverage radius sweep")
    for name, helptext in (("connectivity", "closed-form connectivity sweeps"),
                           ("throughput", "throughput sweeps and configuration table")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--coverage", metavar="CSV",
                       help="coverage CSV with R_comm (default: OUT/coverage.csv)")
    p = sub.add_parser("validate", parents=[common], help="closed forms vs road simulation")
    p.add_argument("--corrupt", metavar="METRIC", help=argparse.SUPPRESS)
    return parser


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.trials is not None:
        key = {"coverage": ("coverage", "trials"), "throughput": ("throughput", "rate_samples"),
               "validate": ("validation", "n_slots")}.get(args.command)
        if key is None:
            raise CliError("--trials has no effect on the connectivity command", EXIT_USAGE)
        cfg[key[0]][key[1]] = args.trials
    return cfg


def run(args) -> int:
    started = time.monotonic()
    if args.preset and PRESETS[args.preset][0] != args.command:
        raise CliError(f"preset {args.preset} belongs to the {PRESETS[args.preset][0]} command",
                       EXIT_USAGE)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_USAGE)
    cfg = _apply_overrides(load_config(args.config, args.preset), args)
    out = _prepare_out(args.out)
    code = EXIT_OK
    if args.command == "coverage":
        sums = cmd_coverage(cfg, out, args.jobs)
        plot = ("coverage.csv", 1, 6, "R_comm (m)")
    elif args.command == "connectivity":
        sums = cmd_connectivity(cfg, out, args.jobs, args.coverage)
        plot = ("connectivity.csv", 1, 9, "P_NL")
    elif args.command == "throughput":
        sums = cmd_throughput(cfg, out, args.jobs, args.coverage)
        plot = ("throughput.csv", 1, 14, "throughput (bit/s)")
    else:
        sums, failed, rows = cmd_validate(cfg, out, args.jobs, args.corrupt)
        plot = ("validation.csv", 1, 10, "z score")
        gated = [r for r in rows if r.gated]
        print(f"{len(gated) - len(failed)}/{len(gated)} gated comparisons within "
              f"{val.Z_LIMIT:g} standard errors")
        if failed:
            code = EXIT_VALIDATION
            print(",".join(val.CSV_COLUMNS), file=sys.stderr)
            for r in failed:
                print(",".join(str(x) for x in r.as_row()), file=sys.stderr)
    if args.gnuplot:
        name = plot[0].rsplit(".", 1)[0] + ".gp"
        sums[name] = _write(out / name, gnuplot_script(*plot))
    _manifest(out, args.command, cfg, sums, started, args.jobs)
    for name in sums:
        print(out / name)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return run(args)
    except CliError as exc:
        print(f"mmv2i: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"mmv2i: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
