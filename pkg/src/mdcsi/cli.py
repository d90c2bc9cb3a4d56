"""Command-line entry point: simulate, fit, crlb, analyze, scale-correct and
reproduce-paper-sim.

Every command reads an optional JSON run configuration (validated against
`CONFIG_SCHEMA`, unknown keys rejected), writes its outputs under a run
directory and appends an entry to ``manifest.json`` there.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 unidentifiable CRLB protocol, 6 output exists (use ``--force``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Sequence

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import (
    PeakSet,
    ScaleCorrectionError,
    SpectralRegion,
    detect_peaks,
    integrate_region,
    mean_spectrum,
    pearson,
    scale_correct_ti0,
    signed_ti0,
    user_peaks,
)
from .container import (
    ContainerError,
    config_hash,
    read_dataset,
    read_image,
    write_dataset,
    write_image,
    write_maps,
)
from .crlb import (
    CrlbResult,
    FisherSpec,
    Unidentifiable,
    compare_protocols,
    crlb,
    standard_protocols,
    standard_spatial_specs,
    shared_improvement,
    spec_from_mapping,
)
from .model import (
    ConfigurationError,
    ContrastEncoding,
    Mode,
    STANDARD_COMPARTMENTS,
    CompartmentModel,
    DecayDictionary,
    SpectralGrid,
    build_dictionary,
    kernel_matrix,
    standard_schedule,
    product_schedule,
    schedule_arrays,
    t1_baseline_schedule,
    t2_baseline_schedule,
)
from .phantom import (
    STANDARD_AMPLITUDES,
    MeasuredDataset,
    NoiseModel,
    NoiseSpec,
    add_noise,
    calibrate_sigma,
    compute_snr,
    standard_phantom,
    rasterize_phantom,
)
from .solver import (
    ConvergenceReport,
    NumericalFailure,
    SolverConfig,
    SpectroscopicImage,
    nnls_init,
    rescale_penalties,
    solve_dataset,
)

log = logging.getLogger("mdcsi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_UNIDENTIFIABLE = 5
EXIT_EXISTS = 6


class DataError(ValueError):
    """Input files are unreadable or inconsistent with the configuration."""


# -- configuration ------------------------------------------------------------------

_range = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2}
_range_or_null = {"oneOf": [_range, {"type": "null"}]}
_region = {
    "type": "object", "additionalProperties": False,
    "required": ["label", "t1_range", "t2_range"],
    "properties": {"label": {"type": "string"}, "t1_range": _range, "t2_range": _range},
}
_schedule = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["standard", "t1_baseline", "t2_baseline"]},
        "ti_ms": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0}, "minItems": 1},
        "te_ms": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    },
}
_grid = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "t1_range": _range_or_null,
        "t2_range": _range_or_null,
        "n_t1": {"type": "integer", "minimum": 2},
        "n_t2": {"type": "integer", "minimum": 2},
    },
}
_protocol = {
    "type": "object", "additionalProperties": False,
    "required": ["name", "schedule"],
    "properties": {
        "name": {"type": "string"},
        "schedule": {
            "type": "object", "additionalProperties": False, "required": ["te_ms"],
            "properties": {
                "ti_ms": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0}},
                "te_ms": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
        },
        "mode": {"enum": ["T1T2", "T1_ONLY", "T2_ONLY"]},
        "sharing": {"enum": ["PER_VOXEL", "SHARED_RELAXATION"]},
        "averages": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "compartments": {
            "type": "object", "additionalProperties": False, "required": ["t1", "t2"],
            "properties": {
                "t1": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "t2": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "amplitudes": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "voxels": {"type": "array", "items": {"type": "array", "items": {"type": "number", "minimum": 0}},
                   "minItems": 1},
    },
}

CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mdcsi run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "run_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "phantom": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["standard"]},
                "width": {"type": "integer", "minimum": 2},
                "height": {"type": "integer", "minimum": 2},
                "amplitudes": {"type": "array", "items": {"type": "number", "minimum": 0},
                               "minItems": 3, "maxItems": 3},
                "lineshape_sigma_log10": {"type": "number", "exclusiveMinimum": 0},
                "peaks_ms": {"type": "array", "minItems": 3, "maxItems": 3,
                             "items": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                       "minItems": 2, "maxItems": 2}},
            },
        },
        "schedule": _schedule,
        "grid": _grid,
        "noise": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "sigma": {"type": ["number", "null"], "minimum": 0},
                "max_snr": {"type": "number", "exclusiveMinimum": 0},
                "model": {"enum": [m.value for m in NoiseModel]},
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "minimum": 0},
                "mu": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "minimum": 0},
                "penalty_units": {"enum": ["dictionary", "unit_weight"]},
                "block_size": {"type": ["integer", "null"], "minimum": 1},
                "objective_every": {"type": "integer", "minimum": 0},
                "init": {"type": ["string", "null"]},
            },
        },
        "analysis": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "min_height_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "min_separation": {"type": "number", "minimum": 0},
                "exclude_edges": {"type": "boolean"},
                "regions": {"type": "array", "items": _region},
            },
        },
        "crlb": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "protocols": {"type": "array", "items": _protocol, "minItems": 1},
                "reference": {"type": "string"},
                "spatial": {"type": "boolean"},
                "condition_cap": {"type": "number", "exclusiveMinimum": 1},
            },
        },
        "scale_correction": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": ["mean", "median"]},
                "signed_input": {"type": ["boolean", "null"]},
            },
        },
        "baselines": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "t2_averages": {"type": "integer", "minimum": 1},
                "n_nodes": {"type": ["integer", "null"], "minimum": 2},
            },
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "run_dir": "run",
    "seed": 0,
    "phantom": {"kind": "standard", "width": 64, "height": 64, "amplitudes": list(STANDARD_AMPLITUDES),
                "lineshape_sigma_log10": 0.03,
                "peaks_ms": [[t1, t2] for t1, t2 in zip(STANDARD_COMPARTMENTS.t1, STANDARD_COMPARTMENTS.t2)]},
    "schedule": {"preset": "standard"},
    "grid": {"t1_range": [100.0, 3000.0], "t2_range": [2.0, 300.0], "n_t1": 100, "n_t2": 100},
    "noise": {"sigma": None, "max_snr": 200.0, "model": NoiseModel.GAUSSIAN_MAGNITUDE.value},
    "solver": {"lambda": 0.01, "mu": 1.0, "max_iters": 5000, "tolerance": 1e-6,
               "penalty_units": "dictionary", "block_size": None, "objective_every": 10, "init": None},
    "analysis": {"min_height_frac": 0.05, "min_separation": 0.1, "exclude_edges": False, "regions": []},
    "crlb": {"sigma": 1.0, "reference": "2D", "spatial": True, "condition_cap": 1e14},
    "scale_correction": {"method": "mean", "signed_input": None},
    "baselines": {"t2_averages": 7, "n_nodes": None},
}


def _json_path(path: Sequence) -> str:
    out = "$"
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def validate_config(doc: Any) -> None:
    """Raise ConfigurationError listing every schema violation with its JSON path."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"{_json_path(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(lines))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | os.PathLike | None = None, doc: dict | None = None) -> dict:
    """Validated configuration merged over `DEFAULTS`."""
    if doc is None:
        doc = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    validate_config(doc)
    return _merge(DEFAULTS, doc)


def make_schedule(cfg: dict) -> list[ContrastEncoding]:
    sch = cfg["schedule"]
    if "ti_ms" in sch or "te_ms" in sch:
        return product_schedule(sch.get("ti_ms", [None]), sch.get("te_ms", [0.0]))
    return {"standard": standard_schedule, "t1_baseline": t1_baseline_schedule,
            "t2_baseline": t2_baseline_schedule}[sch.get("preset", "standard")]()


def make_grid(cfg: dict) -> SpectralGrid:
    g = cfg["grid"]
    t1r = tuple(g["t1_range"]) if g["t1_range"] is not None else None
    t2r = tuple(g["t2_range"]) if g["t2_range"] is not None else None
    if t1r is None and t2r is None:
        raise ConfigurationError("$.grid: at least one of t1_range/t2_range must be set")
    return SpectralGrid.logarithmic(t1r, t2r, g["n_t1"], g["n_t2"])


def grid_mode(grid: SpectralGrid) -> Mode:
    n1, n2 = grid.shape
    if n1 == 1:
        return Mode.T2
    if n2 == 1:
        return Mode.T1
    return Mode.T1T2


def solver_config(cfg: dict, grid: SpectralGrid, init: np.ndarray | None = None) -> SolverConfig:
    s = cfg["solver"]
    conf = SolverConfig(lam=s["lambda"], mu=s["mu"], max_iters=s["max_iters"], tolerance=s["tolerance"],
                        init=init, block_size=s["block_size"], objective_every=s["objective_every"])
    if s["penalty_units"] == "unit_weight":
        conf = rescale_penalties(conf, grid)
    return conf


def make_phantom(cfg: dict):
    p = cfg["phantom"]
    peaks = p["peaks_ms"]
    comps = CompartmentModel((1.0,) * len(peaks), tuple(pk[0] for pk in peaks), tuple(pk[1] for pk in peaks))
    return standard_phantom(p["width"], p["height"], p["lineshape_sigma_log10"], p["amplitudes"], comps)


def forward_matrix(schedule: Sequence[ContrastEncoding], grid: SpectralGrid) -> np.ndarray:
    """Weighted kernel for any schedule on any grid; encodings without TI use the T2 factor only."""
    _, ti = schedule_arrays(schedule)
    mode = Mode.T2 if np.any(np.isnan(ti)) else Mode.T1T2
    t1, t2 = grid.nodes()
    return kernel_matrix(schedule, t1, t2, mode) * grid.weights[None, :]


# -- run directory bookkeeping ---------------------------------------------------------

@dataclass
class RunContext:
    run_dir: Path
    force: bool
    command: str
    config: dict
    argv: list[str]
    explicit: frozenset[str] = frozenset()  # top-level keys present in the config file

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def claim(self, *names: str) -> list[Path]:
        """Output paths for this command; fails fast if any exists and --force is off."""
        paths = [self.path(n) for n in names]
        if not self.force:
            taken = [str(p) for p in paths if p.exists()]
            if taken:
                raise FileExistsError(f"outputs already exist: {', '.join(taken)} (use --force)")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return paths

    def provenance(self, **extra) -> dict:
        return {"command": self.command, "config_hash": config_hash(self.config),
                "seed": self.config.get("seed"), "version": __version__, **extra}

    def record(self, outputs: dict[str, Path], started: float, **extra) -> None:
        manifest = self.path("manifest.json")
        doc = {"run_dir": str(self.run_dir.resolve()), "entries": []}
        if manifest.exists():
            try:
                doc = json.loads(manifest.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                log.warning("manifest %s is corrupt; starting a new one", manifest)
        doc["entries"].append({
            "command": self.command, "argv": self.argv, "config_hash": config_hash(self.config),
            "seed": self.config.get("seed"), "elapsed_s": round(time.perf_counter() - started, 3),
            "outputs": {role: str(p.relative_to(self.run_dir)) for role, p in outputs.items()},
            **extra,
        })
        tmp = manifest.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, default=str), encoding="utf-8")
        os.replace(tmp, manifest)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- pipeline steps (importable) -------------------------------------------------------

def simulate(cfg: dict) -> dict[str, Any]:
    """Ground truth, noiseless and noisy datasets for the configured phantom."""
    grid = make_grid(cfg)
    if grid_mode(grid) is not Mode.T1T2:
        raise ConfigurationError("$.grid: simulation needs a 2D (T1, T2) grid")
    schedule = make_schedule(cfg)
    spec = make_phantom(cfg)
    truth = rasterize_phantom(spec, grid)
    clean = MeasuredDataset(forward_matrix(schedule, grid) @ truth.values, schedule,
                            spec.width, spec.height, spec.support())
    n = cfg["noise"]
    sigma = n["sigma"] if n["sigma"] is not None else calibrate_sigma(clean, n["max_snr"])
    noisy = add_noise(clean, NoiseSpec(sigma, cfg["seed"], n["model"]))
    snr = compute_snr(clean, sigma) if sigma > 0 else None
    return {"truth": truth, "clean": clean, "noisy": noisy, "sigma": float(sigma), "snr": snr,
            "phantom": spec}


def check_schedules(ds_schedule, cfg_schedule) -> None:
    a, b = list(ds_schedule), list(cfg_schedule)
    if a == b:
        return
    lines = [f"dataset has {len(a)} encodings, config has {len(b)}"] if len(a) != len(b) else []
    for k, (x, y) in enumerate(zip(a, b)):
        if x != y:
            lines.append(f"  encoding {k}: dataset (te={x.te}, ti={x.ti}) != config (te={y.te}, ti={y.ti})")
            if len(lines) > 10:
                lines.append("  ...")
                break
    raise DataError("schedule mismatch between dataset and config:\n" + "\n".join(lines))


def initial_image(cfg: dict, ds: MeasuredDataset, dictionary: DecayDictionary) -> np.ndarray | None:
    """Starting F for the solver: None (zero), per-voxel NNLS, or a stored image."""
    init = cfg["solver"]["init"]
    if init in (None, "zero", "ZERO"):
        return None
    if init == "nnls":
        t = time.perf_counter()
        F = nnls_init(dictionary, ds.data, ds.mask)
        log.info("NNLS warm start for %d voxels in %.1f s", int(np.sum(ds.mask > 0)), time.perf_counter() - t)
        return F
    return _read_image(init).values


def fit(ds: MeasuredDataset, grid: SpectralGrid, config: SolverConfig,
        dictionary: DecayDictionary | None = None) -> tuple[SpectroscopicImage, ConvergenceReport]:
    dictionary = dictionary or build_dictionary(ds.schedule, grid, grid_mode(grid))
    return solve_dataset(ds, dictionary, config)


def analyze(image: SpectroscopicImage, cfg: dict) -> dict[str, Any]:
    a = cfg["analysis"]
    spectrum = mean_spectrum(image)
    if a["regions"]:
        regions = [SpectralRegion(r["label"], tuple(r["t1_range"]), tuple(r["t2_range"])) for r in a["regions"]]
        peaks = user_peaks(regions, spectrum, image.grid)
    else:
        peaks = detect_peaks(spectrum, image.grid, a["min_height_frac"], a["min_separation"], a["exclude_edges"])
    maps = np.stack([integrate_region(image, p.region) for p in peaks]) if len(peaks) else \
        np.zeros((0, image.height, image.width))
    return {"spectrum": spectrum, "peaks": peaks, "maps": maps}


def match_peaks(peaks: PeakSet, grid: SpectralGrid, targets: Sequence[tuple[float, float]]) -> list[dict]:
    """Assign each target (T1, T2) to the nearest unused detected peak; distances in grid nodes."""
    l1, l2 = np.log10(grid.t1_values), np.log10(grid.t2_values)
    d1 = np.median(np.diff(l1)) if l1.size > 1 else 1.0
    d2 = np.median(np.diff(l2)) if l2.size > 1 else 1.0
    used: set[int] = set()
    out = []
    for t1, t2 in targets:
        best, best_d = None, math.inf
        for k, p in enumerate(peaks):
            if k in used:
                continue
            dn = max(abs(math.log10(p.t1 / t1)) / d1 if l1.size > 1 else 0.0,
                     abs(math.log10(p.t2 / t2)) / d2 if l2.size > 1 else 0.0)
            if dn < best_d:
                best, best_d = k, dn
        if best is not None:
            used.add(best)
        out.append({"target": (t1, t2), "peak": best, "node_distance": best_d})
    return out


def crlb_tables(cfg: dict) -> dict[str, Any]:
    c = cfg["crlb"]
    cap = c["condition_cap"]
    if c.get("protocols"):
        specs = {p["name"]: spec_from_mapping({"sigma": c["sigma"], **p}) for p in c["protocols"]}
    else:
        specs = standard_protocols(c["sigma"])
    results: dict[str, CrlbResult | Unidentifiable] = {}
    for name, spec in specs.items():
        try:
            results[name] = crlb(spec, cap)
        except Unidentifiable as exc:
            results[name] = exc
    ref = c["reference"] if c["reference"] in specs else next(iter(specs))
    ratios: dict[str, dict[str, float]] = {}
    if isinstance(results[ref], CrlbResult):
        for name, res in results.items():
            if name != ref and isinstance(res, CrlbResult):
                common = [p for p in res.parameter_names if p in results[ref].parameter_names]
                ratios[name] = compare_protocols(results[ref], res, common)
    spatial = None
    if c["spatial"] and not c.get("protocols"):
        sp = standard_spatial_specs(c["sigma"])
        pv, sh = crlb(sp["per-voxel"], cap), crlb(sp["shared"], cap)
        spatial = {"per_voxel": pv, "shared": sh, "improvement": shared_improvement(pv, sh)}
    return {"specs": specs, "results": results, "reference": ref, "ratios": ratios, "spatial": spatial}


# -- commands ----------------------------------------------------------------------------

def cmd_simulate(ctx: RunContext) -> int:
    t0 = time.perf_counter()
    out = ctx.claim("dataset_noiseless.mdc", "dataset.mdc", "ground_truth.mdc", "snr.csv")
    sim = simulate(ctx.config)
    prov = ctx.provenance(sigma=sim["sigma"], noise_model=ctx.config["noise"]["model"])
    write_dataset(out[0], sim["clean"], prov)
    write_dataset(out[1], sim["noisy"], prov)
    write_image(out[2], sim["truth"], prov, kind="ground_truth")
    te, ti = schedule_arrays(sim["clean"].schedule)
    snr = sim["snr"] if sim["snr"] is not None else np.full(te.size, np.inf)
    write_csv(out[3], ["encoding", "ti_ms", "te_ms", "snr"],
              ((k, ti[k], te[k], snr[k]) for k in range(te.size)))
    ctx.record({"noiseless": out[0], "dataset": out[1], "ground_truth": out[2], "snr": out[3]}, t0,
               sigma=sim["sigma"])
    print(f"simulated {sim['noisy'].data.shape[0]} encodings x {sim['noisy'].n_voxels} voxels, "
          f"sigma={sim['sigma']:.6g} -> {ctx.run_dir}")
    return EXIT_OK


def _read_dataset(path) -> MeasuredDataset:
    try:
        return read_dataset(path)
    except (OSError, ContainerError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def _read_image(path) -> SpectroscopicImage:
    try:
        return read_image(path)
    except (OSError, ContainerError, ValueError) as exc:
        raise DataError(f"cannot read spectroscopic image {path}: {exc}") from exc


def write_convergence(path: Path, report: ConvergenceReport) -> Path:
    return write_csv(path, ["iteration", "primal_residual", "dual_residual", "objective"], report.rows())


def oracle_check(ds: MeasuredDataset, dictionary: DecayDictionary, image: SpectroscopicImage,
                 tol: float = 1e-4) -> float:
    """Worst per-voxel relative residual-norm gap between the fit and scipy's NNLS (lambda = 0 only)."""
    from scipy.optimize import nnls

    K = dictionary.kernel
    worst = 0.0
    for i in np.flatnonzero(ds.mask > 0):
        x, rn = nnls(K, ds.data[:, i], maxiter=50 * K.shape[1])
        r_fit = np.linalg.norm(ds.data[:, i] - K @ image.values[:, i])
        worst = max(worst, (r_fit - rn) / max(rn, np.linalg.norm(ds.data[:, i]), 1e-300))
    return worst


def cmd_fit(ctx: RunContext, dataset: str, oracle: bool = False) -> int:
    t0 = time.perf_counter()
    out = ctx.claim("image.mdc", "convergence.csv")
    ds = _read_dataset(dataset)
    if "schedule" in ctx.explicit:
        check_schedules(ds.schedule, make_schedule(ctx.config))
    grid = make_grid(ctx.config)
    dictionary = build_dictionary(ds.schedule, grid, grid_mode(grid))
    conf = solver_config(ctx.config, grid, initial_image(ctx.config, ds, dictionary))
    image, report = fit(ds, grid, conf, dictionary)
    prov = ctx.provenance(dataset=str(dataset), lam=conf.lam, mu=conf.mu, iterations=report.iterations,
                          converged=report.converged, returned_iterate=report.returned_iterate)
    write_image(out[0], image, prov)
    write_convergence(out[1], report)
    extra = {"iterations": report.iterations, "converged": report.converged,
             "final_objective": report.final_objective, "lambda": conf.lam, "mu": conf.mu}
    if oracle:
        if conf.lam != 0:
            raise ConfigurationError("--oracle-check requires lambda = 0")
        gap = oracle_check(ds, dictionary, image)
        extra["oracle_gap"] = gap
        print(f"oracle check: worst relative residual gap {gap:.3g}")
        if gap > 1e-4:
            ctx.record({"image": out[0], "convergence": out[1]}, t0, **extra)
            raise NumericalFailure(f"fit differs from the NNLS oracle by {gap:.3g} (> 1e-4)")
    ctx.record({"image": out[0], "convergence": out[1]}, t0, **extra)
    print(f"fit Q={grid.size} x N={ds.n_voxels}: {report.iterations} iterations, "
          f"converged={report.converged}, objective={report.final_objective:.6g}")
    return EXIT_OK


def _write_crlb_outputs(ctx: RunContext, tabs: dict) -> tuple[dict[str, Path], bool]:
    paths = ctx.claim("crlb_table.csv", "crlb_ratios.csv", "crlb_summary.txt")
    rows, flagged = [], False
    for name, res in tabs["results"].items():
        if isinstance(res, Unidentifiable):
            flagged = True
            rows.append((name, "*", math.nan, math.nan, "unidentifiable", res.condition))
            continue
        for lab, var, std in zip(res.parameter_names, res.crlb, res.std_bound):
            rows.append((name, lab, var, std, "ok", res.fisher_condition))
    write_csv(paths[0], ["protocol", "parameter", "crlb", "std_bound", "status", "fisher_condition"], rows)
    ratio_rows = [(tabs["reference"], other, p, r) for other, d in tabs["ratios"].items() for p, r in d.items()]
    extra_paths = {}
    if tabs["spatial"] is not None:
        sp = tabs["spatial"]
        ratio_rows += [("shared", "per-voxel", k, v) for k, v in sp["improvement"].items()]
        (p_sp,) = ctx.claim("crlb_spatial.csv")
        sp_rows = [(name, lab, var, std) for name, res in (("per-voxel", sp["per_voxel"]), ("shared", sp["shared"]))
                   for lab, var, std in zip(res.parameter_names, res.crlb, res.std_bound)]
        write_csv(p_sp, ["model", "parameter", "crlb", "std_bound"], sp_rows)
        extra_paths["spatial"] = p_sp
    write_csv(paths[1], ["reference", "protocol", "parameter", "std_ratio"], ratio_rows)
    lines = [f"CRLB standard-deviation ratios (protocol / {tabs['reference']})"]
    for other, d in tabs["ratios"].items():
        lines.append(f"  {other}: " + ", ".join(f"{p}={r:.3g}" for p, r in d.items()))
    for name, res in tabs["results"].items():
        if isinstance(res, Unidentifiable):
            lines.append(f"  {name}: UNIDENTIFIABLE ({res})")
    if tabs["spatial"] is not None:
        imp = tabs["spatial"]["improvement"]
        lines.append("shared-relaxation CRLB improvement: " + ", ".join(f"{k}={v:.3g}" for k, v in imp.items()))
    lines.append("assumptions: white Gaussian noise of equal sigma per sample, averages scale the "
                 "Fisher matrix, 1D T1 protocol has no echo attenuation (TE = 0)")
    text = "\n".join(lines) + "\n"
    paths[2].write_text(text, encoding="utf-8")
    print(text, end="")
    return {"table": paths[0], "ratios": paths[1], "summary": paths[2], **extra_paths}, flagged


def cmd_crlb(ctx: RunContext) -> int:
    t0 = time.perf_counter()
    tabs = crlb_tables(ctx.config)
    outputs, flagged = _write_crlb_outputs(ctx, tabs)
    ctx.record(outputs, t0, unidentifiable=flagged)
    return EXIT_UNIDENTIFIABLE if flagged else EXIT_OK


def _write_analysis(ctx: RunContext, result: dict, image: SpectroscopicImage, prefix: str = "") -> dict[str, Path]:
    names = [f"{prefix}peaks.csv", f"{prefix}maps.mdc", f"{prefix}maps.csv", f"{prefix}mean_spectrum.csv"]
    paths = ctx.claim(*names)
    peaks = result["peaks"]
    write_csv(paths[0], ["label", "t1_ms", "t2_ms", "height", "t1_min", "t1_max", "t2_min", "t2_max", "source"],
              ((p.region.label, p.t1, p.t2, p.height, *p.region.t1_range, *p.region.t2_range, p.source)
               for p in peaks))
    labels = [p.region.label for p in peaks]
    regions = [{"label": p.region.label, "t1_range": list(p.region.t1_range),
                "t2_range": list(p.region.t2_range)} for p in peaks]
    write_maps(paths[1], result["maps"], labels, regions, ctx.provenance())
    H, W = image.height, image.width
    write_csv(paths[2], ["x", "y", *labels],
              ((x, y, *(result["maps"][k, y, x] for k in range(len(labels)))) for y in range(H) for x in range(W)))
    t1, t2 = image.grid.nodes()
    write_csv(paths[3], ["t1_ms", "t2_ms", "weight", "mean_density"],
              zip(t1, t2, image.grid.weights, result["spectrum"]))
    return {"peaks": paths[0], "maps": paths[1], "maps_csv": paths[2], "mean_spectrum": paths[3]}


def cmd_analyze(ctx: RunContext, image_path: str) -> int:
    t0 = time.perf_counter()
    image = _read_image(image_path)
    if image.mask is not None and not np.any(image.mask > 0):
        raise DataError(f"{image_path}: mask is empty")
    result = analyze(image, ctx.config)
    outputs = _write_analysis(ctx, result, image)
    ctx.record(outputs, t0, n_peaks=len(result["peaks"]))
    for p in result["peaks"]:
        print(f"{p.region.label}: T1={p.t1:.4g} ms, T2={p.t2:.4g} ms, height={p.height:.4g} ({p.source})")
    if not len(result["peaks"]):
        print("no peaks detected")
    return EXIT_OK


def ti0_is_signed(ds: MeasuredDataset) -> bool:
    """True when the TI = 0 samples already carry the inverted (negative) polarity."""
    _, ti = schedule_arrays(ds.schedule)
    rows = ti == 0
    if not np.any(rows):
        raise ScaleCorrectionError("dataset has no TI = 0 encodings")
    sel = ds.mask > 0
    return bool(np.median(ds.data[np.ix_(rows, sel)]) < 0)


def cmd_scale_correct(ctx: RunContext, dataset: str) -> int:
    t0 = time.perf_counter()
    paths = ctx.claim("dataset_scaled.mdc", "scale_report.json", "scale_histogram.csv")
    ds = _read_dataset(dataset)
    sc = ctx.config["scale_correction"]
    already = sc["signed_input"]
    if already is None:
        already = ti0_is_signed(ds)
        log.info("TI=0 polarity auto-detected: %s", "signed" if already else "magnitude")
    signed = ds if already else signed_ti0(ds)
    corrected, report = scale_correct_ti0(signed, sc["method"])
    write_dataset(paths[0], corrected, ctx.provenance(dataset=str(dataset), ti0_scale=report.scale))
    vals = report.voxel_scales[np.isfinite(report.voxel_scales)]
    counts, edges = np.histogram(vals, bins=min(50, max(1, vals.size)))
    write_csv(paths[2], ["bin_lo", "bin_hi", "count"], zip(edges[:-1], edges[1:], counts))
    rep = {"scale": report.scale, "method": report.method, "n_used": report.n_used,
           "n_excluded": report.n_excluded, "te_used_ms": report.te_used,
           "voxel_scale_mean": float(vals.mean()), "voxel_scale_std": float(vals.std())}
    paths[1].write_text(json.dumps(rep, indent=2), encoding="utf-8")
    ctx.record({"dataset": paths[0], "report": paths[1], "histogram": paths[2]}, t0, scale=report.scale)
    print(f"global TI=0 scale {report.scale:.6g} from {report.n_used} voxels ({report.n_excluded} excluded)")
    return EXIT_OK


# -- phantom reproduction ----------------------------------------------------------------------

def baseline_grids(grid: SpectralGrid, n_nodes: int | None = None) -> tuple[SpectralGrid, SpectralGrid]:
    """1D T1 and 1D T2 grids over the same ranges as the 2D grid."""
    n1, n2 = grid.shape
    t1 = SpectralGrid.logarithmic((grid.t1_values[0], grid.t1_values[-1]), None, n_nodes or n1, 1)
    t2 = SpectralGrid.logarithmic(None, (grid.t2_values[0], grid.t2_values[-1]), 1, n_nodes or n2)
    return t1, t2


def reproduce_paper_sim(cfg: dict) -> dict[str, Any]:
    """2D fit plus the two 1D baselines on the simulated phantom, with peak/map scoring.

    The 1D T1 data use the 2D inversion times with no echo attenuation; the 1D
    T2 data use the baseline echo train with ``t2_averages`` averages folded
    into the noise level. All three fits share the solver and detection settings.
    """
    sim = simulate(cfg)
    sigma, spec, truth = sim["sigma"], sim["phantom"], sim["truth"]
    grid = truth.grid
    targets = [(c.peak_t1, c.peak_t2) for c in spec.compartments]
    maps = spec.maps
    mask = spec.support()
    runs: dict[str, Any] = {}

    def one(name, ds, fit_grid):
        t = time.perf_counter()
        dictionary = build_dictionary(ds.schedule, fit_grid, grid_mode(fit_grid))
        conf = solver_config(cfg, fit_grid, initial_image(cfg, ds, dictionary))
        image, report = fit(ds, fit_grid, conf, dictionary)
        res = analyze(image, cfg)
        runs[name] = {"image": image, "report": report, "analysis": res, "dataset": ds,
                      "seconds": time.perf_counter() - t, "solver": conf}
        log.info("%s fit: %d iterations in %.1f s, %d peaks", name, report.iterations,
                 runs[name]["seconds"], len(res["peaks"]))

    one("2D", sim["noisy"], grid)
    g1, g2 = baseline_grids(grid, cfg["baselines"]["n_nodes"])
    noise = cfg["noise"]
    sched_t1, sched_t2 = t1_baseline_schedule(), t2_baseline_schedule()
    for name, sched, fit_grid, sig in (
            ("1D-T1", sched_t1, g1, sigma),
            ("1D-T2", sched_t2, g2, sigma / math.sqrt(cfg["baselines"]["t2_averages"]))):
        clean = MeasuredDataset(forward_matrix(sched, grid) @ truth.values, sched, spec.width, spec.height, mask)
        noisy = add_noise(clean, NoiseSpec(sig, cfg["seed"], noise["model"]))
        one(name, noisy, fit_grid)

    r2d = runs["2D"]["analysis"]
    matches = match_peaks(r2d["peaks"], grid, targets)
    # scored over the object mask: outside it the estimate is set by the smoothness prior alone
    correlations, correlations_full = [], []
    for c, m in enumerate(matches):
        if m["peak"] is None:
            correlations.append(math.nan)
            correlations_full.append(math.nan)
            continue
        correlations.append(pearson(r2d["maps"][m["peak"]], maps[c], mask=mask))
        correlations_full.append(pearson(r2d["maps"][m["peak"]], maps[c]))
    return {"sim": sim, "runs": runs, "targets": targets, "matches": matches,
            "correlations": correlations, "correlations_full": correlations_full,
            "n_peaks": {k: len(v["analysis"]["peaks"]) for k, v in runs.items()}}


def cmd_reproduce(ctx: RunContext) -> int:
    t0 = time.perf_counter()
    paths = ctx.claim("comparison.csv", "recovery.csv")
    res = reproduce_paper_sim(ctx.config)
    outputs: dict[str, Path] = {"comparison": paths[0], "recovery": paths[1]}
    sim = res["sim"]
    prov = ctx.provenance(sigma=sim["sigma"])
    for role, name, obj in (("dataset", "dataset.mdc", sim["noisy"]),):
        (p,) = ctx.claim(name)
        write_dataset(p, obj, prov)
        outputs[role] = p
    (p,) = ctx.claim("ground_truth.mdc")
    write_image(p, sim["truth"], prov, kind="ground_truth")
    outputs["ground_truth"] = p
    for name, run in res["runs"].items():
        tag = name.lower().replace("-", "_")
        p_img, p_conv = ctx.claim(f"image_{tag}.mdc", f"convergence_{tag}.csv")
        write_image(p_img, run["image"], ctx.provenance(lam=run["solver"].lam, mu=run["solver"].mu))
        write_convergence(p_conv, run["report"])
        outputs.update({f"image_{tag}": p_img, f"convergence_{tag}": p_conv})
        outputs.update({f"{k}_{tag}": v for k, v in
                        _write_analysis(ctx, run["analysis"], run["image"], prefix=f"{tag}_").items()})
    write_csv(paths[0], ["method", "n_peaks", "iterations", "converged", "seconds", "peaks_t1_t2_ms"],
              ((name, res["n_peaks"][name], run["report"].iterations, run["report"].converged, run["seconds"],
                "; ".join(f"({p.t1:.4g},{p.t2:.4g})" for p in run["analysis"]["peaks"]))
               for name, run in res["runs"].items()))
    peaks = res["runs"]["2D"]["analysis"]["peaks"].peaks
    rows = []
    for c, (m, r, rf) in enumerate(zip(res["matches"], res["correlations"], res["correlations_full"])):
        pk = peaks[m["peak"]] if m["peak"] is not None else None
        rows.append((c + 1, m["target"][0], m["target"][1], pk.t1 if pk else math.nan,
                     pk.t2 if pk else math.nan, m["node_distance"], r, rf))
    write_csv(paths[1], ["compartment", "true_t1_ms", "true_t2_ms", "peak_t1_ms", "peak_t2_ms",
                         "node_distance", "map_pearson", "map_pearson_full_image"], rows)
    tabs = crlb_tables(ctx.config)
    crlb_out, _ = _write_crlb_outputs(ctx, tabs)
    outputs.update({f"crlb_{k}": v for k, v in crlb_out.items()})
    ctx.record(outputs, t0, n_peaks=res["n_peaks"], correlations=res["correlations"])
    print(f"peaks detected: {res['n_peaks']}")
    for row in rows:
        print(f"compartment {row[0]}: true ({row[1]:.4g}, {row[2]:.4g}) ms, peak ({row[3]:.4g}, {row[4]:.4g}) ms, "
              f"{row[5]:.2f} nodes, map r={row[6]:.3f}")
    return EXIT_OK


# -- argument handling -----------------------------------------------------------------------

@contextmanager
def _threads(n: int | None) -> Iterator[None]:
    if n is None:
        yield
        return
    import numba

    prev = numba.get_num_threads()
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        numba.set_num_threads(prev)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--run-dir", metavar="DIR", help="output directory (overrides config run_dir)")
    common.add_argument("--seed", type=int, metavar="U64", help="noise seed (overrides config)")
    common.add_argument("--lambda", dest="lam", type=float, metavar="F", help="spatial regularization weight")
    common.add_argument("--mu", type=float, metavar="F", help="augmented Lagrangian parameter")
    common.add_argument("--max-iters", type=int, metavar="N")
    common.add_argument("--tol", type=float, metavar="F", help="relative primal/dual residual tolerance")
    common.add_argument("--threads", type=int, metavar="N",
                        help="thread count (default: $MDSPEC_THREADS, else library default)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdcsi", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate the phantom dataset and ground truth")
    p = sub.add_parser("fit", parents=[common], help="estimate a spectroscopic image from a dataset")
    p.add_argument("dataset")
    p.add_argument("--oracle-check", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("crlb", parents=[common], help="CRLB tables and protocol ratios")
    p = sub.add_parser("analyze", parents=[common], help="peaks, region maps and mean spectrum")
    p.add_argument("image")
    p = sub.add_parser("scale-correct", parents=[common], help="TI=0 polarity and scale correction")
    p.add_argument("dataset")
    sub.add_parser("reproduce-paper-sim", parents=[common],
                   help="phantom simulation with 2D and 1D fits and comparison tables")
    return parser


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    for flag, key in (("lam", "lambda"), ("mu", "mu"), ("max_iters", "max_iters"), ("tol", "tolerance")):
        value = getattr(args, flag)
        if value is not None:
            cfg["solver"][key] = value
    if args.run_dir is not None:
        cfg["run_dir"] = args.run_dir
    # re-validate so flag values obey the same rules as config values
    validate_config(cfg)
    return cfg


def _thread_count(args) -> int | None:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("MDSPEC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigurationError(f"MDSPEC_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigurationError("MDSPEC_THREADS must be >= 1")
        return n
    return None


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = {}
        if args.config:
            cfg = load_config(args.config)
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        else:
            cfg = load_config()
        cfg = _apply_overrides(cfg, args)
        ctx = RunContext(Path(cfg["run_dir"]), args.force, args.command, cfg, argv, frozenset(raw))
        with _threads(_thread_count(args)):
            if args.command == "simulate":
                return cmd_simulate(ctx)
            if args.command == "fit":
                return cmd_fit(ctx, args.dataset, args.oracle_check)
            if args.command == "crlb":
                return cmd_crlb(ctx)
            if args.command == "analyze":
                return cmd_analyze(ctx, args.image)
            if args.command == "scale-correct":
                return cmd_scale_correct(ctx, args.dataset)
            if args.command == "reproduce-paper-sim":
                return cmd_reproduce(ctx)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, ScaleCorrectionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Unidentifiable as exc:
        print(f"unidentifiable: {exc}", file=sys.stderr)
        return EXIT_UNIDENTIFIABLE
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
