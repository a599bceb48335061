"""Circuit variance versus SSEP variance on a common time grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Protocol, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

_FAMILY = {
    "neel": "neel",
    "domain_wall": "domain_wall",
    "polarized_domain_wall": "domain_wall",
    "bernoulli": "domain_wall",
    "product": "custom",
    "custom": "custom",
}


class VarianceCurve(Protocol):
    """What the comparison needs from an SSEP run (``SsepResult`` satisfies it)."""

    times: np.ndarray

    def variance(self) -> np.ndarray: ...

    def variance_stderr(self) -> np.ndarray: ...


@dataclass
class SsepCurve:
    """Variance curve read back from ``ssep.csv``."""

    times: np.ndarray
    var: np.ndarray
    stderr: np.ndarray

    def variance(self) -> np.ndarray:
        return self.var

    def variance_stderr(self) -> np.ndarray:
        return self.stderr


class IncompatibleInitialStates(ValueError):
    """The circuit and SSEP runs start from different initial-state families."""


@dataclass
class ComparisonResult:
    """Per-cycle variance pairs on the comparison window.

    Attributes:
        cycles: circuit cycles inside the window.
        circuit_variance: circuit variance at those cycles.
        ssep_variance: SSEP variance at ``rescale * cycle``.
        circuit_err: circuit error bar (zeros when not supplied).
        ssep_err: SSEP standard error, interpolated like the variance.
        rescale: SSEP time per circuit cycle.
        discrepancy: ``max |circuit - ssep| / ssep`` over the window.
        z_max: ``max |circuit - ssep| / combined_err``; ``inf`` when every error bar is zero
            and the curves differ.
    """

    cycles: np.ndarray
    circuit_variance: np.ndarray
    ssep_variance: np.ndarray
    circuit_err: np.ndarray
    ssep_err: np.ndarray
    rescale: float
    discrepancy: float
    z_max: float

    @property
    def combined_err(self) -> np.ndarray:
        return np.hypot(self.circuit_err, self.ssep_err)

    def within_errors(self, n_sigma: float = 2.0) -> bool:
        diff = np.abs(self.circuit_variance - self.ssep_variance)
        return bool(np.all(diff <= n_sigma * self.combined_err + 1e-12))

    def rows(self) -> list[tuple]:
        return list(zip(self.cycles, self.circuit_variance, self.ssep_variance, self.circuit_err, self.ssep_err))


def _check_families(circuit_initial: str | None, ssep_initial: str | None) -> None:
    if circuit_initial is None or ssep_initial is None:
        return
    a, b = _FAMILY.get(circuit_initial, circuit_initial), _FAMILY.get(ssep_initial, ssep_initial)
    if a != b:
        raise IncompatibleInitialStates(f"circuit starts from {circuit_initial!r}, SSEP from {ssep_initial!r}")


def compare_to_ssep(
    cycles: Sequence[int],
    circuit_variance: Sequence[float],
    ssep: VarianceCurve,
    rescale: Literal["fitted", "fixed"] = "fitted",
    time_per_cycle: float = 1.0,
    window: tuple[int, int] | None = None,
    circuit_err: Sequence[float] | None = None,
    circuit_initial: str | None = None,
    ssep_initial: str | None = None,
    bounds: tuple[float, float] = (0.1, 10.0),
) -> ComparisonResult:
    """Align circuit and SSEP variance curves and measure their mismatch.

    With ``rescale="fitted"`` a single factor ``s`` (SSEP time per cycle) is
    chosen to minimize the error-weighted squared difference over the window;
    ``"fixed"`` uses ``time_per_cycle``. Only time is rescaled, never amplitude.

    Raises:
        IncompatibleInitialStates: the two initial states belong to different families.
        ValueError: empty window, or the window runs past the SSEP time range for every ``s``.
    """
    _check_families(circuit_initial, ssep_initial)
    cyc = np.asarray(cycles, dtype=float)
    var = np.asarray(circuit_variance, dtype=float)
    err = np.zeros_like(var) if circuit_err is None else np.asarray(circuit_err, dtype=float)
    lo, hi = window if window is not None else (cyc.min(), cyc.max())
    sel = (cyc >= lo) & (cyc <= hi)
    if not sel.any():
        raise ValueError(f"no circuit cycles inside window {window}")
    cyc, var, err = cyc[sel], var[sel], err[sel]
    s_var, s_err, t_end = ssep.variance(), ssep.variance_stderr(), float(ssep.times[-1])

    def ssep_at(s: float) -> tuple[np.ndarray, np.ndarray]:
        t = cyc * s
        return np.interp(t, ssep.times, s_var), np.interp(t, ssep.times, s_err)

    if rescale == "fixed":
        s = float(time_per_cycle)
        if cyc.max() * s > t_end + 1e-12:
            raise ValueError(f"window ends at SSEP time {cyc.max() * s:g} beyond t_max {t_end:g}")
    elif rescale == "fitted":
        upper = min(bounds[1], t_end / cyc.max()) if cyc.max() > 0 else bounds[1]
        if upper <= bounds[0]:
            raise ValueError("SSEP time range too short for the requested window and bounds")

        def cost(s: float) -> float:
            v, e = ssep_at(s)
            sig2 = err**2 + e**2
            w = 1.0 / sig2 if np.all(sig2 > 0) else np.ones_like(var)
            return float(np.sum(w * (var - v) ** 2))

        # coarse log grid, then a bounded refinement around the best point
        grid = np.geomspace(bounds[0], upper, 400)
        k = int(np.argmin([cost(g) for g in grid]))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        s = float(minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-12}).x) if b > a else float(grid[k])
    else:
        raise ValueError(f"rescale must be 'fitted' or 'fixed', got {rescale!r}")
    v, e = ssep_at(s)
    diff = np.abs(var - v)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(v > 0, diff / v, np.where(diff > 0, np.inf, 0.0))
        comb = np.hypot(err, e)
        z = np.where(comb > 0, diff / comb, np.where(diff > 0, np.inf, 0.0))
    return ComparisonResult(cyc.astype(int), var, v, err, e, s, float(rel.max()), float(z.max()))
