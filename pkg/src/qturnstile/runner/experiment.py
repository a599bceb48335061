"""Experiment orchestration: one independent simulation per lambda, then FCS analysis."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .. import __version__
from ..exact import InitialStateSpec, NoiseModel, ancilla_xy, build_initial, iter_schedule, make_kraus
from ..fcs import (
    ChargeDistribution,
    CumulantSet,
    FCSError,
    GFSamples,
    assemble_gf,
    cumulant_grid,
    cumulants_from_distributions,
    cumulants_from_fit,
    distribution_from_gf,
    distribution_grid,
    uniform_grid,
)
from ..gates import ChainSpec, CircuitSchedule, build_random_schedule, build_xxz_schedule
from ..tnet import MPDO, CycleRecord, evolve, mpdo_from_product
from .config import ExperimentConfig, thread_cap

log = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


class BackendError(RuntimeError):
    """A backend failed; carries the offending ``lam`` and ``cycle``."""

    def __init__(self, lam: float, cycle: int, cause: BaseException):
        super().__init__(f"backend failed at lambda={lam!r}, cycle={cycle}: {type(cause).__name__}: {cause}")
        self.lam = lam
        self.cycle = cycle


@dataclass
class LambdaRun:
    """Ancilla readout of one lambda, one entry per cycle ``0..T``."""

    lam: float
    x: np.ndarray
    y: np.ndarray
    max_bond: list[int] = field(default_factory=list)
    discarded: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    resumed_from: int = 0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    gf: GFSamples
    runs: list[LambdaRun]
    distributions: list[ChargeDistribution] | None
    cumulants: CumulantSet | None
    provenance: dict[str, Any]
    diagnostics: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# building blocks


def make_chain(cfg: ExperimentConfig) -> ChainSpec:
    c = cfg.chain
    return ChainSpec(c.n_sites, c.central_site, c.first_sublayer, c.leading_turnstile)


def make_schedule(cfg: ExperimentConfig, lam: float) -> CircuitSchedule:
    chain = make_chain(cfg)
    if cfg.model.kind == "xxz":
        return build_xxz_schedule(chain, cfg.model.theta, cfg.model.phi, lam, cfg.cycles)
    return build_random_schedule(chain, lam, cfg.cycles, cfg.seed)


def make_initial(cfg: ExperimentConfig) -> InitialStateSpec:
    occ = tuple(cfg.initial.occupations) if cfg.initial.occupations is not None else None
    return InitialStateSpec(cfg.initial.kind, float(cfg.initial.mu), occ)


def make_noise(cfg: ExperimentConfig) -> NoiseModel | None:
    nz = cfg.noise
    if nz.kind == "none" or nz.gamma == 0:
        return None
    sites = tuple(nz.sites) if nz.sites is not None else None
    return NoiseModel(make_kraus(nz.kind, float(nz.gamma)), nz.on_ancilla, sites)


def run_lambdas(cfg: ExperimentConfig) -> list[float]:
    """The lambda values that are actually simulated."""
    lam = cfg.lambdas
    if lam.mode == "cumulant":
        grid = cumulant_grid(lam.points, lam.lam_max)
    elif lam.mode == "distribution":
        grid = distribution_grid(lam.m) if lam.conjugate_fill else uniform_grid(lam.m)
    else:
        grid = np.asarray(lam.values, dtype=float)
    vals = [float(v) for v in grid]
    if lam.conjugate_fill and lam.mode != "explicit":
        # f(0) = 1 exactly; no need to simulate it
        vals = [v for v in vals if v != 0.0]
    return sorted(set(vals))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, mpdo: MPDO, cycle: int, xs: Sequence[float], ys: Sequence[float], config_hash: str) -> None:
    """Atomically write an ``.npz`` with the MPDO tensors and the readout so far."""
    arrays = {f"tensor_{k}": t for k, t in enumerate(mpdo.tensors)}
    arrays.update(
        dims=np.asarray(mpdo.dims),
        super_site=np.asarray(-1 if mpdo.super_site is None else mpdo.super_site),
        center=np.asarray(-1 if mpdo.center is None else mpdo.center),
        cycle=np.asarray(cycle),
        x=np.asarray(xs, float),
        y=np.asarray(ys, float),
        config_hash=np.asarray(config_hash),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> tuple[MPDO, int, list[float], list[float], str]:
    with np.load(path) as z:
        n = len(z["dims"])
        tensors = [z[f"tensor_{k}"] for k in range(n)]
        ss, center = int(z["super_site"]), int(z["center"])
        mpdo = MPDO(tensors, [int(d) for d in z["dims"]], None if ss < 0 else ss, None if center < 0 else center)
        return mpdo, int(z["cycle"]), list(z["x"]), list(z["y"]), str(z["config_hash"])


def checkpoint_path(cfg: ExperimentConfig, lam: float) -> Path:
    return Path(cfg.output.dir) / "checkpoints" / f"lambda_{lam:+.12f}.npz"


# ---------------------------------------------------------------------------
# per-lambda backends


def _run_exact(cfg: ExperimentConfig, lam: float) -> LambdaRun:
    schedule = make_schedule(cfg, lam)
    state = build_initial(make_initial(cfg), schedule.chain)
    xs, ys = [], []
    cycle = 0
    try:
        for cycle, s in iter_schedule(state, schedule, make_noise(cfg)):
            x, y = ancilla_xy(s)
            xs.append(x)
            ys.append(y)
    except Exception as exc:
        raise BackendError(lam, cycle + 1, exc) from exc
    return LambdaRun(lam, np.array(xs), np.array(ys))


def _run_tnet(cfg: ExperimentConfig, lam: float) -> LambdaRun:
    be = cfg.backend
    schedule = make_schedule(cfg, lam)
    chash = cfg.config_hash()
    ckpt = checkpoint_path(cfg, lam)
    xs: list[float] = []
    ys: list[float] = []
    start = 0
    mpdo = None
    if cfg.output.resume and ckpt.exists():
        mpdo, start, xs, ys, saved_hash = load_checkpoint(ckpt)
        if saved_hash != chash:
            log.warning("checkpoint %s belongs to another config; starting over", ckpt)
            mpdo, start, xs, ys = None, 0, [], []
        else:
            # the stored readout already contains cycle `start`
            xs, ys = xs[:-1], ys[:-1]
    if mpdo is None:
        mpdo = mpdo_from_product(make_initial(cfg), schedule.chain)
    remaining = dataclasses.replace(schedule, cycles=schedule.cycles[start:])
    bonds: list[int] = []
    weights: list[float] = []
    last = [start]

    def on_cycle(rec: CycleRecord) -> None:
        cyc = rec.cycle + start
        last[0] = cyc
        xs.append(rec.x)
        ys.append(rec.y)
        bonds.append(rec.report.max_bond)
        weights.append(rec.report.cumulative)
        every = cfg.output.checkpoint_every
        if every and cyc > start and cyc % every == 0:
            save_checkpoint(ckpt, mpdo, cyc, xs, ys, chash)

    try:
        evolve(mpdo, remaining, make_noise(cfg), be.kind, be.max_bond, be.trunc_tol, be.cadence, be.weight_budget, on_cycle)
    except Exception as exc:
        raise BackendError(lam, last[0] + 1, exc) from exc
    return LambdaRun(lam, np.array(xs), np.array(ys), bonds, weights, resumed_from=start)


def run_single_lambda(cfg: ExperimentConfig, lam: float, blas_threads: int | None = None) -> LambdaRun:
    """Simulate one lambda with the configured backend."""
    t0 = time.perf_counter()
    with threadpool_limits(blas_threads):
        run = _run_exact(cfg, lam) if cfg.backend.kind == "exact" else _run_tnet(cfg, lam)
    run.wall_time = time.perf_counter() - t0
    log.info("lambda=%.6g done in %.1fs", lam, run.wall_time)
    return run


# ---------------------------------------------------------------------------
# orchestration


def _gf_from_runs(cfg: ExperimentConfig, runs: list[LambdaRun]) -> GFSamples:
    cycles = np.arange(cfg.cycles + 1)
    if cfg.lambdas.conjugate_fill:
        return assemble_gf([(r.lam, r.x, r.y) for r in runs], cycles, synthesize_zero=cfg.lambdas.mode != "explicit")
    lams = np.array([r.lam for r in runs])
    vals = np.stack([r.x + 1j * r.y for r in runs], axis=1)
    return GFSamples(lams, vals, cycles)


def analyze(cfg: ExperimentConfig, gf: GFSamples) -> tuple[list[ChargeDistribution] | None, CumulantSet | None, list[str]]:
    """Distributions and cumulants per cycle; failures become diagnostics instead of errors."""
    diagnostics: list[str] = []
    dists = None
    cums = None
    mode = cfg.lambdas.mode
    try:
        if mode == "distribution":
            dists = [distribution_from_gf(gf, cycle_row=k) for k in range(len(gf.cycles))]
            cums = cumulants_from_distributions(dists, gf.cycles)
        else:
            window = cfg.lambdas.lam_max if mode == "cumulant" else float(np.max(np.abs(gf.lambdas)))
            cums = cumulants_from_fit(gf, cfg.fcs.order, window)
    except FCSError as exc:
        msg = f"cumulant extraction refused: {exc}"
        log.warning(msg)
        diagnostics.append(msg)
    return dists, cums, diagnostics


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run every lambda (in parallel when ``cfg.workers > 1``), analyze and persist.

    Raises:
        BackendError: with the offending lambda and cycle.
    """
    t0 = time.perf_counter()
    lams = run_lambdas(cfg)
    cap = thread_cap()
    workers = min(cfg.workers, len(lams)) if lams else 1
    if cap is not None:
        workers = max(1, min(workers, cap))
    blas = None if cap is None else max(1, cap // workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run_single_lambda, [cfg] * len(lams), lams, [blas] * len(lams)))
    else:
        runs = [run_single_lambda(cfg, lam, blas) for lam in lams]
    gf = _gf_from_runs(cfg, runs)
    dists, cums, diagnostics = analyze(cfg, gf)
    prov = provenance(cfg, runs, time.perf_counter() - t0)
    result = ExperimentResult(cfg, gf, runs, dists, cums, prov, diagnostics)
    if write:
        write_outputs(result, Path(cfg.output.dir))
    return result


def source_digest() -> str:
    """sha256 over the package sources, so results can be tied to the exact code."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for f in sorted(root.rglob("*.py")):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def provenance(cfg: ExperimentConfig, runs: Sequence[LambdaRun], total: float) -> dict[str, Any]:
    return {
        "package": "qturnstile",
        "code_version": __version__,
        "source_digest": source_digest(),
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": {"circuit": cfg.seed if cfg.model.kind == "random_circuit" else None},
        "lambdas_run": [r.lam for r in runs],
        "wall_times": {f"{r.lam:.17g}": r.wall_time for r in runs},
        "resumed_from": {f"{r.lam:.17g}": r.resumed_from for r in runs if r.resumed_from},
        "total_wall_time": total,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


# ---------------------------------------------------------------------------
# persistence


def _header(prov: dict[str, Any]) -> str:
    # wall-times stay in meta.json so the CSVs are reproducible byte for byte
    return f"# qturnstile {prov['code_version']} config_hash={prov['config_hash']} seed={prov['config']['seed']}\n"


def atomic_write(path: Path, text: str) -> None:
    """Write-then-rename so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def csv_text(header: str, columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [header.rstrip("\n"), ",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_outputs(result: ExperimentResult, out: Path) -> None:
    """``gf.csv``, ``pq.csv``, ``cumulants.csv``, ``truncation.csv`` and ``meta.json``."""
    prov = result.provenance
    head = _header(prov)
    gf = result.gf
    rows = [(int(c), lam, gf.values[k, j].real, gf.values[k, j].imag) for k, c in enumerate(gf.cycles) for j, lam in enumerate(gf.lambdas)]
    atomic_write(out / "gf.csv", csv_text(head, ["cycle", "lambda", "re_f", "im_f"], rows))
    if result.distributions is not None:
        rows = [
            (int(c), int(q), d.prob(int(q)))
            for c, d in zip(gf.cycles, result.distributions)
            for q in range(d.q_min, d.q_max + 1)
        ]
        atomic_write(out / "pq.csv", csv_text(head, ["cycle", "Q", "p"], rows))
    if result.cumulants is not None:
        cs = result.cumulants
        skew = cs.skewness_normalized
        rows = [(int(c), cs.mean[k], cs.variance[k], cs.kappa3[k], skew[k], cs.residual[k]) for k, c in enumerate(cs.cycles)]
        cols = ["cycle", "mean", "variance", "kappa3", "skewness_normalized", "fit_residual"]
        atomic_write(out / "cumulants.csv", csv_text(head, cols, rows))
    trunc = [
        (r.lam, k + 1 + r.resumed_from, b, w)
        for r in result.runs
        for k, (b, w) in enumerate(zip(r.max_bond[1:], r.discarded[1:]))
    ]
    if trunc:
        atomic_write(out / "truncation.csv", csv_text(head, ["lambda", "cycle", "max_bond", "discarded"], trunc))
    meta = dict(prov)
    meta["diagnostics"] = result.diagnostics
    atomic_write(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_csv(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Columns of a result CSV (comment lines skipped)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    names, body = rows[0], rows[1:]
    return {name: np.array([float(r[k]) for r in body]) for k, name in enumerate(names)}
