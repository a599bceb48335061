"""Generating-function assembly, distribution inversion and cumulant fits.

The ancilla readout gives ``f(lambda) = <X> + i <Y> = sum_Q p_Q exp(i Q lambda)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

NEG_TOL = 1e-8
CLIP_BUDGET = 1e-4
IMAG_TOL = 1e-6
SUPPORT_TOL = 1e-12


class FCSError(ValueError):
    """Raised when a generating function cannot be analysed as requested."""


@dataclass
class ChargeDistribution:
    """Probabilities ``p_Q`` on the integer support ``q_min, ..., q_min + len(p) - 1``."""

    q_min: int
    probabilities: NDArray[np.float64]
    valid: bool = True
    clipped_mass: float = 0.0

    def __post_init__(self) -> None:
        self.probabilities = np.asarray(self.probabilities, dtype=float)

    @classmethod
    def from_dict(cls, probs: dict[int, float]) -> ChargeDistribution:
        if not probs:
            return cls(0, np.array([1.0]))
        lo, hi = min(probs), max(probs)
        p = np.zeros(hi - lo + 1)
        for q, v in probs.items():
            p[q - lo] += v
        return cls(lo, p)

    @property
    def support(self) -> NDArray[np.int64]:
        return np.arange(self.q_min, self.q_min + len(self.probabilities))

    @property
    def q_max(self) -> int:
        return self.q_min + len(self.probabilities) - 1

    def as_dict(self) -> dict[int, float]:
        return {int(q): float(p) for q, p in zip(self.support, self.probabilities)}

    def prob(self, q: int) -> float:
        i = q - self.q_min
        return float(self.probabilities[i]) if 0 <= i < len(self.probabilities) else 0.0

    def total(self) -> float:
        return float(self.probabilities.sum())

    def moment(self, m: int) -> float:
        return float(np.sum(self.probabilities * self.support.astype(float) ** m))

    @property
    def mean(self) -> float:
        return float(np.sum(self.probabilities * self.support))

    def central_moment(self, m: int) -> float:
        return float(np.sum(self.probabilities * (self.support - self.mean) ** m))

    @property
    def variance(self) -> float:
        return self.central_moment(2)

    @property
    def kappa3(self) -> float:
        return self.central_moment(3)

    def generating_function(self, lambdas: Iterable[float]) -> NDArray[np.complex128]:
        lam = np.asarray(list(lambdas), dtype=float)
        return np.exp(1j * np.outer(lam, self.support)) @ self.probabilities

    def max_abs_diff(self, other: ChargeDistribution) -> float:
        lo = min(self.q_min, other.q_min)
        hi = max(self.q_max, other.q_max)
        return max(abs(self.prob(q) - other.prob(q)) for q in range(lo, hi + 1))

    def trimmed(self, tol: float = SUPPORT_TOL) -> ChargeDistribution:
        keep = np.nonzero(np.abs(self.probabilities) > tol)[0]
        if keep.size == 0:
            return ChargeDistribution(0, np.array([0.0]), self.valid, self.clipped_mass)
        lo, hi = keep[0], keep[-1]
        return ChargeDistribution(self.q_min + int(lo), self.probabilities[lo : hi + 1].copy(), self.valid, self.clipped_mass)


@dataclass
class CumulantSet:
    """Mean, variance and third central moment, one entry per recorded cycle."""

    cycles: NDArray[np.int64]
    mean: NDArray[np.float64]
    variance: NDArray[np.float64]
    kappa3: NDArray[np.float64]
    residual: NDArray[np.float64]
    order: int = 0
    window: float = 0.0
    method: str = "fit"

    @property
    def skewness_normalized(self) -> NDArray[np.float64]:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.kappa3 / np.power(np.where(self.variance > 0, self.variance, np.nan), 1.5)
        return out


@dataclass
class GFSamples:
    """Generating function samples on a sorted grid symmetric about zero.

    ``values[k, j]`` is ``f(lambdas[j])`` at ``cycles[k]``.
    """

    lambdas: NDArray[np.float64]
    values: NDArray[np.complex128]
    cycles: NDArray[np.int64] = field(default_factory=lambda: np.array([0]))

    def __post_init__(self) -> None:
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.complex128))
        self.cycles = np.asarray(self.cycles, dtype=np.int64)

    def at_cycle(self, cycle: int) -> NDArray[np.complex128]:
        k = int(np.nonzero(self.cycles == cycle)[0][0])
        return self.values[k]

    def value(self, lam: float, cycle_row: int = 0) -> complex:
        j = int(np.argmin(np.abs(self.lambdas - lam)))
        return complex(self.values[cycle_row, j])


def assemble_gf(
    runs: Sequence[tuple[float, Sequence[float], Sequence[float]]],
    cycles: Sequence[int] | None = None,
    synthesize_zero: bool = True,
) -> GFSamples:
    """Build ``GFSamples`` from per-lambda ancilla readouts.

    Args:
        runs: ``(lambda, x, y)`` triples; ``x`` and ``y`` are scalars or one value
            per recorded cycle.
        cycles: recorded cycle indices (defaults to ``0..T-1``).
        synthesize_zero: add ``f(0) = 1`` when lambda = 0 was not run.

    Negative lambdas are filled in from ``f(-lambda) = conj f(lambda)``.
    """
    lams = [float(r[0]) for r in runs]
    if len(set(lams)) != len(lams):
        raise FCSError("duplicate lambda values")
    columns: dict[float, NDArray[np.complex128]] = {}
    n_t = None
    for lam, x, y in runs:
        col = np.atleast_1d(np.asarray(x, dtype=float)) + 1j * np.atleast_1d(np.asarray(y, dtype=float))
        if n_t is None:
            n_t = len(col)
        elif len(col) != n_t:
            raise FCSError("runs record different numbers of cycles")
        columns[float(lam)] = col
    if n_t is None:
        n_t = len(cycles) if cycles is not None else 1
    if synthesize_zero and 0.0 not in columns:
        columns[0.0] = np.ones(n_t, dtype=np.complex128)
    for lam in list(columns):
        if lam != 0.0 and -lam not in columns and abs(lam) < math.pi:
            columns[-lam] = np.conj(columns[lam])
    grid = np.array(sorted(columns))
    values = np.stack([columns[lam] for lam in grid], axis=1) if len(grid) else np.zeros((n_t, 0), complex)
    cyc = np.arange(n_t) if cycles is None else np.asarray(cycles)
    return GFSamples(grid, values, cyc)


def cumulant_grid(n_points: int = 9, lam_max: float = 0.2) -> NDArray[np.float64]:
    """Default fit grid: ``n_points`` uniform points on ``[0, lam_max]``."""
    return np.linspace(0.0, lam_max, n_points)


def uniform_grid(m: int) -> NDArray[np.float64]:
    """All ``m`` points ``2*pi*k/m`` that lie in ``(-pi, pi]``."""
    return 2 * math.pi * np.arange(m // 2 - m + 1, m // 2 + 1) / m


def distribution_grid(m: int = 64) -> NDArray[np.float64]:
    """Non-negative half of the uniform ``m``-point grid on ``(-pi, pi]``."""
    return 2 * math.pi * np.arange(0, m // 2 + 1) / m


def _fit_one(lam: NDArray[np.float64], f: NDArray[np.complex128], order: int) -> tuple[NDArray[np.float64], float]:
    if np.any(np.abs(f) < 1e-6):
        raise FCSError("|f| < 1e-6 inside the fit window; log branch unreliable")
    srt = np.argsort(lam)
    lam, f = lam[srt], f[srt]
    i0 = int(np.argmin(np.abs(lam)))
    phase = np.angle(f)
    # unwrap outward from the origin so chi(0) sits on the principal branch
    phase[i0:] = np.unwrap(phase[i0:])
    phase[: i0 + 1] = np.unwrap(phase[: i0 + 1][::-1])[::-1]
    chi = np.log(np.abs(f)) + 1j * phase
    powers = np.arange(1, order + 1)
    design = (1j * lam[:, None]) ** powers[None, :]
    scale = math.factorial
    design = design / np.array([scale(int(m)) for m in powers])[None, :]
    # chi(lambda) = sum_m kappa_m (i lambda)^m / m!, kappa real
    a = np.vstack([design.real, design.imag])
    b = np.concatenate([chi.real, chi.imag])
    kappa, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = float(np.sqrt(np.mean((a @ kappa - b) ** 2)))
    return kappa, resid


def cumulants_from_fit(gf: GFSamples, order: int = 4, window: float = 0.2) -> CumulantSet:
    """Polynomial fit of ``chi = log f`` on ``[-window, window]``.

    Returns kappa_1, kappa_2, kappa_3 per recorded cycle.

    Raises:
        FCSError: fewer than ``order + 2`` grid points in the window, or ``|f|``
            too small to take the log.
    """
    sel = np.abs(gf.lambdas) <= window + 1e-12
    if int(sel.sum()) < order + 2:
        raise FCSError(f"need >= {order + 2} grid points within |lambda| <= {window}, have {int(sel.sum())}")
    lam = gf.lambdas[sel]
    n = len(gf.cycles)
    out = np.zeros((n, 3))
    res = np.zeros(n)
    for k in range(n):
        kappa, res[k] = _fit_one(lam, gf.values[k, sel], order)
        padded = np.zeros(3)
        padded[: min(3, order)] = kappa[:3]
        out[k] = padded
    return CumulantSet(gf.cycles.copy(), out[:, 0], out[:, 1], out[:, 2], res, order, window, "fit")


def _check_uniform(lambdas: NDArray[np.float64]) -> int:
    m = len(lambdas)
    if m < 1:
        raise FCSError("empty grid")
    expected = uniform_grid(m)
    if not np.allclose(np.sort(lambdas), expected, atol=1e-12):
        raise FCSError("distribution inversion needs the uniform grid 2*pi*k/M on (-pi, pi]")
    return m


def distribution_from_gf(
    gf: GFSamples,
    q_range: tuple[int, int] | None = None,
    cycle_row: int = 0,
) -> ChargeDistribution:
    """Discrete Fourier inversion of ``f`` sampled on the uniform ``M``-point grid.

    Args:
        gf: samples; must cover the full grid ``2*pi*k/M`` on ``(-pi, pi]``.
        q_range: inclusive support ``(q_min, q_max)``; defaults to
            ``[-M/2, M/2 - 1]``. Charges outside alias onto it.
        cycle_row: which recorded cycle to invert.

    Raises:
        FCSError: non-uniform grid, support larger than ``M``, or an imaginary
            residue above ``1e-6`` (aliasing).
    """
    m = _check_uniform(gf.lambdas)
    lo, hi = q_range if q_range is not None else (-(m // 2), m - m // 2 - 1)
    if hi - lo + 1 > m:
        raise FCSError(f"support of {hi - lo + 1} charges exceeds M = {m}")
    q = np.arange(lo, hi + 1)
    f = gf.values[cycle_row]
    p = (np.exp(-1j * np.outer(q, gf.lambdas)) @ f) / m
    if np.max(np.abs(p.imag)) > IMAG_TOL:
        raise FCSError(f"imaginary residue {np.max(np.abs(p.imag)):.3g}; increase M")
    return _sanitize(int(lo), p.real)


def _sanitize(q_min: int, p: NDArray[np.float64]) -> ChargeDistribution:
    neg = p < 0
    clipped = float(-p[neg].sum())
    valid = True
    if np.any(p < -NEG_TOL):
        if clipped < CLIP_BUDGET:
            log.info("clipping %.3g of negative probability mass", clipped)
            p = np.where(neg, 0.0, p)
            p = p / p.sum()
        else:
            log.warning("negative probability mass %.3g exceeds budget; distribution flagged invalid", clipped)
            valid = False
    dist = ChargeDistribution(q_min, p, valid=valid, clipped_mass=clipped)
    return dist.trimmed()


def cumulants_from_distributions(dists: Sequence[ChargeDistribution], cycles: Sequence[int]) -> CumulantSet:
    mean = np.array([d.mean for d in dists])
    var = np.array([d.variance for d in dists])
    k3 = np.array([d.kappa3 for d in dists])
    return CumulantSet(np.asarray(cycles), mean, var, k3, np.zeros(len(dists)), method="distribution")


def shots_required(lam: float, t: float, t2: float) -> float:
    """Order-of-magnitude shot count ``min(1/lam^2, (t/t2)^2 / lam^4)``."""
    if lam == 0:
        raise FCSError("shots_required is undefined at lambda = 0")
    if t2 <= 0:
        raise FCSError("t2 must be positive")
    lam = abs(lam)
    return min(1.0 / lam**2, (t / t2) ** 2 / lam**4)


def sample_readout(
    x: float,
    y: float,
    shots: int | float | None,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Finite-shot estimates of ``<X>`` and ``<Y>`` from +-1 projective outcomes.

    ``shots=None`` or ``inf`` returns the exact values.
    """
    if shots is None or shots == math.inf:
        return float(x), float(y)
    n = int(shots)
    if n < 1:
        raise ValueError("shots must be >= 1")
    px = min(max((1.0 + x) / 2.0, 0.0), 1.0)
    py = min(max((1.0 + y) / 2.0, 0.0), 1.0)
    kx = rng.binomial(n, px)
    ky = rng.binomial(n, py)
    return 2.0 * kx / n - 1.0, 2.0 * ky / n - 1.0
