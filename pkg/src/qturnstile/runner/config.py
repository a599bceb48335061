"""Experiment configuration: nested dataclasses, YAML loading, overrides, validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..exact import MAX_MIXED_QUBITS

OUTPUT_DIR_ENV = "QTURNSTILE_OUTPUT_DIR"
THREADS_ENV = "QTURNSTILE_THREADS"

MODELS = ("xxz", "random_circuit")
INITIAL_KINDS = ("domain_wall", "polarized_domain_wall", "neel", "product")
LAMBDA_MODES = ("cumulant", "distribution", "explicit")
BACKENDS = ("exact", "tebd", "dmt")
NOISE_KINDS = ("none", "depolarizing", "amplitude_damping")


class ConfigError(ValueError):
    """Validation failure; ``errors`` lists ``"field.path: message"`` strings."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class ModelConfig:
    kind: str = "xxz"
    theta: float = 0.4 * math.pi
    phi: float = 0.8 * math.pi


@dataclass
class ChainConfig:
    n_sites: int = 10
    central_site: int | None = None
    first_sublayer: str = "left"
    leading_turnstile: bool = False


@dataclass
class InitialConfig:
    kind: str = "domain_wall"
    mu: float = 0.0
    occupations: list[int] | None = None


@dataclass
class LambdaConfig:
    """Counting-field grid.

    ``cumulant``: ``points`` values on ``[0, lam_max]`` (fit window ``lam_max``).
    ``distribution``: the ``m``-point uniform grid on ``(-pi, pi]``.
    ``explicit``: exactly ``values``.
    """

    mode: str = "cumulant"
    points: int = 9
    lam_max: float = 0.2
    m: int = 64
    values: list[float] | None = None
    conjugate_fill: bool = True


@dataclass
class BackendConfig:
    kind: str = "exact"
    max_bond: int = 256
    trunc_tol: float = 0.0
    cadence: str = "layer"
    weight_budget: float | None = None


@dataclass
class NoiseConfig:
    kind: str = "none"
    gamma: float = 0.0
    sites: list[int] | None = None
    on_ancilla: bool = False


@dataclass
class FcsConfig:
    order: int = 4


@dataclass
class OutputConfig:
    dir: str = "results"
    checkpoint_every: int = 0
    resume: bool = False


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one turnstile experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    lambdas: LambdaConfig = field(default_factory=LambdaConfig)
    cycles: int = 10
    backend: BackendConfig = field(default_factory=BackendConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fcs: FcsConfig = field(default_factory=FcsConfig)
    seed: int = 0
    workers: int = 1
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the physics-relevant fields (output settings and workers excluded)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _from_dict(cls, data: dict[str, Any], path: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        return cls()
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in fields:
            errors.append(f"{sub}: unknown field")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, sub, errors)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config; raises :class:`ConfigError` listing every problem."""
    errors: list[str] = []
    cfg = _from_dict(ExperimentConfig, data or {}, "", errors)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML file (or start from defaults) and apply ``a.b=value`` overrides.

    Override values are parsed as YAML scalars, so ``noise.gamma=0.15`` gives a
    float and ``chain.central_site=null`` gives ``None``. The output directory
    comes from, in increasing priority: the file, ``QTURNSTILE_OUTPUT_DIR``,
    an ``output.dir`` override.
    """
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        data.setdefault("output", {})
        if isinstance(data["output"], dict):
            data["output"]["dir"] = env_dir
    for item in overrides or []:
        apply_override(data, item)
    return config_from_dict(data)


def apply_override(data: dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise ConfigError([f"{item}: override must look like field.path=value"])
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError([f"{key}: {p} is not a section"])
        node = nxt
    node[parts[-1]] = yaml.safe_load(raw)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig) -> list[str]:
    """All validation errors as ``"field.path: message"``; empty when valid."""
    err: list[str] = []
    m, ch, ini, lam, be, nz = cfg.model, cfg.chain, cfg.initial, cfg.lambdas, cfg.backend, cfg.noise
    if m.kind not in MODELS:
        err.append(f"model.kind: must be one of {MODELS}, got {m.kind!r}")
    for name in ("theta", "phi"):
        if not _is_num(getattr(m, name)):
            err.append(f"model.{name}: must be a number")
    n = ch.n_sites
    if not _is_int(n) or n < 2 or n % 2:
        err.append(f"chain.n_sites: must be an even integer >= 2, got {n!r}")
        n = None
    if ch.central_site is not None and (not _is_int(ch.central_site) or (n and not 0 <= ch.central_site < n - 1)):
        err.append(f"chain.central_site: must be an integer in [0, n_sites - 2], got {ch.central_site!r}")
    if ch.first_sublayer not in ("left", "right"):
        err.append(f"chain.first_sublayer: must be 'left' or 'right', got {ch.first_sublayer!r}")
    if ini.kind not in INITIAL_KINDS:
        err.append(f"initial.kind: must be one of {INITIAL_KINDS}, got {ini.kind!r}")
    if not _is_num(ini.mu):
        err.append("initial.mu: must be a number")
    if ini.kind == "product":
        occ = ini.occupations
        if occ is None or (n and len(occ) != n) or any(o not in (0, 1) for o in occ):
            err.append("initial.occupations: product state needs n_sites entries in {0, 1}")
    if lam.mode not in LAMBDA_MODES:
        err.append(f"lambdas.mode: must be one of {LAMBDA_MODES}, got {lam.mode!r}")
    if lam.mode == "cumulant":
        if not _is_int(lam.points) or lam.points < 2:
            err.append("lambdas.points: must be an integer >= 2")
        if not _is_num(lam.lam_max) or not 0 < lam.lam_max <= math.pi:
            err.append("lambdas.lam_max: must lie in (0, pi]")
    if lam.mode == "distribution" and (not _is_int(lam.m) or lam.m < 2):
        err.append("lambdas.m: must be an integer >= 2")
    if lam.mode == "explicit":
        if not lam.values:
            err.append("lambdas.values: explicit mode needs a non-empty list")
        else:
            for k, v in enumerate(lam.values):
                if not _is_num(v) or not -math.pi < v <= math.pi:
                    err.append(f"lambdas.values[{k}]: must lie in (-pi, pi], got {v!r}")
    if not _is_int(cfg.cycles) or cfg.cycles < 0:
        err.append(f"cycles: must be a non-negative integer, got {cfg.cycles!r}")
    if be.kind not in BACKENDS:
        err.append(f"backend.kind: must be one of {BACKENDS}, got {be.kind!r}")
    if not _is_int(be.max_bond) or be.max_bond < 1:
        err.append("backend.max_bond: must be a positive integer")
    if not _is_num(be.trunc_tol) or be.trunc_tol < 0:
        err.append("backend.trunc_tol: must be >= 0")
    if be.cadence not in ("layer", "gate"):
        err.append(f"backend.cadence: must be 'layer' or 'gate', got {be.cadence!r}")
    if nz.kind not in NOISE_KINDS:
        err.append(f"noise.kind: must be one of {NOISE_KINDS}, got {nz.kind!r}")
    if not _is_num(nz.gamma) or not 0.0 <= nz.gamma <= 1.0:
        err.append(f"noise.gamma: must lie in [0, 1], got {nz.gamma!r}")
    if nz.sites is not None and n and any(not _is_int(s) or not 0 <= s < n for s in nz.sites):
        err.append("noise.sites: entries must be data-qubit indices")
    if be.kind == "exact" and n:
        mixed = (nz.kind != "none" and nz.gamma > 0) or ini.kind == "domain_wall"
        if mixed and n + 1 > MAX_MIXED_QUBITS:
            err.append(f"backend.kind: exact backend holds at most {MAX_MIXED_QUBITS} qubits in mixed mode, N + 1 = {n + 1}")
    if not _is_int(cfg.fcs.order) or cfg.fcs.order < 2:
        err.append("fcs.order: must be an integer >= 2")
    if not _is_int(cfg.seed):
        err.append("seed: must be an integer")
    if not _is_int(cfg.workers) or cfg.workers < 1:
        err.append("workers: must be a positive integer")
    if not _is_int(cfg.output.checkpoint_every) or cfg.output.checkpoint_every < 0:
        err.append("output.checkpoint_every: must be a non-negative integer")
    return err


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output.dir)


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        val = int(raw)
    except ValueError as exc:
        raise ConfigError([f"{THREADS_ENV}: must be a positive integer, got {raw!r}"]) from exc
    if val < 1:
        raise ConfigError([f"{THREADS_ENV}: must be a positive integer, got {raw!r}"])
    return val
