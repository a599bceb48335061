"""Symmetric simple exclusion process: kinetic Monte Carlo and master equation.

Both routes count the signed number of particles crossing the central bond
``(N/2 - 1, N/2)`` (0-based), positive for left-to-right, on a closed chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numba
import numpy as np
from scipy import sparse

from .fcs import ChargeDistribution

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

MAX_MASTER_SITES = 12
MASTER_TOL = 1e-9
OVERFLOW_TOL = 1e-12


class WindowOverflowError(RuntimeError):
    """Probability reached the edge of the tracked crossing-count window."""


@dataclass(frozen=True)
class SsepConfig:
    """SSEP run parameters.

    Attributes:
        n_sites: even chain length.
        initial: "neel" (``1010...``), "domain_wall" (left half filled),
            "custom" (fixed ``occupations``) or "bernoulli" (each site filled
            independently with probability ``densities``).
        occupations: 0/1 per site for "custom".
        densities: one probability, or one per site, for "bernoulli".
        hop_rate: rate of each allowed nearest-neighbour hop.
        t_max: final time.
        trajectories: Monte Carlo sample size.
        seed: base seed; trajectory ``k`` uses the stream spawned with key ``k``.
        sample_times: observation times; default ``0, 1, ..., floor(t_max)``.
        window: crossing-count window ``[-window, window]`` for the master
            equation; default ``n_sites // 2``, which cannot overflow.
    """

    n_sites: int
    initial: str = "neel"
    occupations: tuple[int, ...] | None = None
    densities: float | tuple[float, ...] | None = None
    hop_rate: float = 1.0
    t_max: float = 10.0
    trajectories: int = 1000
    seed: int = 0
    sample_times: tuple[float, ...] | None = None
    window: int | None = None

    def __post_init__(self) -> None:
        if self.n_sites < 2 or self.n_sites % 2:
            raise ValueError(f"n_sites must be even and >= 2, got {self.n_sites}")
        if not self.hop_rate > 0:
            raise ValueError("hop_rate must be positive")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.trajectories < 1:
            raise ValueError("trajectories must be >= 1")
        if self.initial not in ("neel", "domain_wall", "custom", "bernoulli"):
            raise ValueError(f"unknown initial state {self.initial!r}")
        if self.initial == "custom":
            occ = self.occupations
            if occ is None or len(occ) != self.n_sites or any(o not in (0, 1) for o in occ):
                raise ValueError("custom initial state needs n_sites occupations in {0, 1}")
        if self.initial == "bernoulli":
            dens = np.broadcast_to(np.asarray(self.densities if self.densities is not None else 0.5, float), (self.n_sites,))
            if np.any((dens < 0) | (dens > 1)):
                raise ValueError("densities must lie in [0, 1]")
        times = self.times
        if np.any(np.diff(times) < 0) or times[0] < 0 or times[-1] > self.t_max + 1e-12:
            raise ValueError("sample_times must be sorted and within [0, t_max]")

    @property
    def central_bond(self) -> int:
        """Left site of the counting bond."""
        return self.n_sites // 2 - 1

    @property
    def times(self) -> NDArray[np.float64]:
        if self.sample_times is None:
            return np.arange(0, math.floor(self.t_max) + 1, dtype=float)
        return np.asarray(self.sample_times, dtype=float)

    def site_densities(self) -> NDArray[np.float64]:
        """Initial filling probability per site."""
        n = self.n_sites
        if self.initial == "neel":
            return (np.arange(n) % 2 == 0).astype(float)
        if self.initial == "domain_wall":
            return (np.arange(n) < n // 2).astype(float)
        if self.initial == "custom":
            return np.asarray(self.occupations, dtype=float)
        return np.broadcast_to(np.asarray(self.densities if self.densities is not None else 0.5, float), (n,)).copy()


@dataclass
class SsepResult:
    """Crossing statistics at the sample times.

    ``counts`` holds the per-trajectory crossing numbers (Monte Carlo only).
    """

    times: NDArray[np.float64]
    distributions: list[ChargeDistribution]
    method: str
    counts: NDArray[np.int64] | None = None

    def mean(self) -> NDArray[np.float64]:
        return np.array([d.mean for d in self.distributions])

    def variance(self) -> NDArray[np.float64]:
        return np.array([d.variance for d in self.distributions])

    def kappa3(self) -> NDArray[np.float64]:
        return np.array([d.kappa3 for d in self.distributions])

    def variance_stderr(self) -> NDArray[np.float64]:
        """Standard error of the sample variance, ``sqrt((mu4 - sigma^4) / M)``; zero for exact results."""
        if self.counts is None:
            return np.zeros(len(self.times))
        m = self.counts.shape[0]
        c = self.counts - self.counts.mean(axis=0)
        mu4 = np.mean(c**4, axis=0)
        var = np.mean(c**2, axis=0)
        return np.sqrt(np.clip(mu4 - var**2, 0.0, None) / m)


def trajectory_seeds(seed: int, n: int) -> NDArray[np.uint32]:
    """One 32-bit seed per trajectory from ``SeedSequence(seed, spawn_key=(k,))``."""
    return np.array(
        [np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1)[0] for k in range(n)],
        dtype=np.uint32,
    )


@numba.njit(cache=True)
def _kmc(occ0, densities, random_fill, seeds, times, rate, bond):  # pragma: no cover - compiled
    n_traj = seeds.shape[0]
    n = occ0.shape[0]
    n_t = times.shape[0]
    out = np.zeros((n_traj, n_t), dtype=np.int64)
    occ = np.empty(n, dtype=np.int8)
    active = np.empty(n - 1, dtype=np.int64)
    for k in range(n_traj):
        np.random.seed(seeds[k])
        for i in range(n):
            if random_fill:
                occ[i] = 1 if np.random.random() < densities[i] else 0
            else:
                occ[i] = occ0[i]
        t = 0.0
        q = 0
        ti = 0
        while ti < n_t:
            n_act = 0
            for b in range(n - 1):
                if occ[b] != occ[b + 1]:
                    active[n_act] = b
                    n_act += 1
            if n_act == 0:
                t_next = np.inf
            else:
                t_next = t + np.random.exponential(1.0 / (rate * n_act))
            while ti < n_t and times[ti] < t_next:
                out[k, ti] = q
                ti += 1
            if ti >= n_t:
                break
            b = active[np.random.randint(0, n_act)]
            if b == bond:
                q += 1 if occ[b] == 1 else -1
            occ[b], occ[b + 1] = occ[b + 1], occ[b]
            t = t_next
    return out


def _histograms(counts: NDArray[np.int64]) -> list[ChargeDistribution]:
    dists = []
    m = counts.shape[0]
    for col in counts.T:
        lo = int(col.min())
        p = np.bincount(col - lo).astype(float) / m
        dists.append(ChargeDistribution(lo, p))
    return dists


def ssep_sample(config: SsepConfig) -> SsepResult:
    """Kinetic Monte Carlo estimate of the crossing distribution.

    Each trajectory draws exponential waiting times with total rate
    ``hop_rate * (number of allowed hops)`` and picks one allowed hop uniformly.
    Results are deterministic per ``(seed, trajectory index)``.
    """
    dens = config.site_densities()
    random_fill = config.initial == "bernoulli"
    occ0 = np.rint(dens).astype(np.int8)
    seeds = trajectory_seeds(config.seed, config.trajectories)
    counts = _kmc(occ0, dens, random_fill, seeds, config.times, float(config.hop_rate), config.central_bond)
    return SsepResult(config.times, _histograms(counts), "kmc", counts)


def master_generator(n: int, rate: float, bond: int, window: int) -> sparse.csr_matrix:
    """Generator on states ``(configuration, crossings)`` flattened as ``config * (2 w + 1) + q + w``.

    Bit ``i`` of a configuration index is the occupation of site ``i``. Jumps
    that would leave the window are dropped, so leaked mass signals overflow.
    """
    nq = 2 * window + 1
    configs = np.arange(2**n, dtype=np.int64)
    qs = np.arange(nq, dtype=np.int64)
    rows, cols, vals = [], [], []
    exit_rate = np.zeros(2**n)
    for b in range(n - 1):
        lo = (configs >> b) & 1
        hi = (configs >> (b + 1)) & 1
        src = configs[lo != hi]
        exit_rate[src] += rate
        dst = src ^ ((1 << b) | (1 << (b + 1)))
        # after the hop the particle sits at b + 1 exactly when it moved left-to-right
        shift = np.where((dst >> (b + 1)) & 1 == 1, 1, -1) if b == bond else np.zeros_like(dst)
        q_src = np.repeat(qs[None, :], src.size, axis=0)
        q_dst = q_src + shift[:, None]
        ok = (q_dst >= 0) & (q_dst < nq)
        rows.append((np.repeat(dst[:, None], nq, axis=1) * nq + q_dst)[ok])
        cols.append((np.repeat(src[:, None], nq, axis=1) * nq + q_src)[ok])
        vals.append(np.full(int(ok.sum()), rate))
    diag = np.repeat(-exit_rate, nq)
    idx = np.arange(diag.size)
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    size = 2**n * nq
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))


def _rk4(gen: sparse.csr_matrix, p: NDArray[np.float64], h: float, steps: int) -> NDArray[np.float64]:
    for _ in range(steps):
        k1 = gen @ p
        k2 = gen @ (p + 0.5 * h * k1)
        k3 = gen @ (p + 0.5 * h * k2)
        k4 = gen @ (p + h * k3)
        p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def rk4_step_size(gen: sparse.csr_matrix, p0: NDArray[np.float64], t_final: float, tol: float = MASTER_TOL) -> float:
    """Largest step ``h`` (halving from ``0.5 / max exit rate``) meeting ``tol`` by step doubling.

    The error over a probe interval is estimated as ``|p_h - p_{h/2}| * 16 / 15``
    and extrapolated linearly to ``t_final``.
    """
    lam = float(np.max(np.abs(gen.diagonal()), initial=1.0))
    h = 0.5 / lam
    if t_final <= 0:
        return h
    probe = min(t_final, 1.0)
    while True:
        steps = max(1, int(math.ceil(probe / h)))
        hh = probe / steps
        coarse = _rk4(gen, p0, hh, steps)
        fine = _rk4(gen, p0, hh / 2, 2 * steps)
        err = float(np.abs(coarse - fine).sum()) * 16 / 15 * (t_final / probe)
        if err < tol or h < 1e-6:
            return hh
        h = hh / 2


def ssep_master(config: SsepConfig) -> SsepResult:
    """Exact crossing distribution from the master equation over (configuration, crossings).

    Integrated with classical fixed-step RK4; the step is chosen by step doubling
    so that the estimated probability error stays below ``1e-9``.

    Raises:
        ValueError: for chains longer than 12 sites.
        WindowOverflowError: when probability leaves the window.
    """
    n = config.n_sites
    if n > MAX_MASTER_SITES:
        raise ValueError(f"master equation limited to {MAX_MASTER_SITES} sites, got {n}")
    w = n // 2 if config.window is None else int(config.window)
    nq = 2 * w + 1
    gen = master_generator(n, float(config.hop_rate), config.central_bond, w)
    dens = config.site_densities()
    bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    p = np.zeros((2**n, nq))
    p[:, w] = np.prod(np.where(bits == 1, dens[None, :], 1 - dens[None, :]), axis=1)
    p = p.ravel()
    times = config.times
    h_max = rk4_step_size(gen, p, float(times[-1]))
    dists = []
    t = 0.0
    for target in times:
        span = float(target) - t
        steps = int(math.ceil(span / h_max - 1e-12)) if span > 0 else 0
        if steps:
            p = _rk4(gen, p, span / steps, steps)
        t = float(target)
        pq = p.reshape(2**n, nq).sum(axis=0)
        leaked = 1.0 - float(pq.sum())
        if leaked > OVERFLOW_TOL:
            raise WindowOverflowError(f"crossing window +-{w} overflowed by t={t:g} (lost mass {leaked:.2e})")
        dists.append(ChargeDistribution(-w, np.clip(pq, 0.0, None)).trimmed())
    return SsepResult(times, dists, "master")


def total_variation(a: ChargeDistribution, b: ChargeDistribution) -> float:
    qs = range(min(a.q_min, b.q_min), max(a.q_max, b.q_max) + 1)
    return 0.5 * float(sum(abs(a.prob(q) - b.prob(q)) for q in qs))


def tv_bound(m: int) -> float:
    """Statistical acceptance threshold ``4 sqrt(ln M / M)`` for ``M`` trajectories."""
    return 4.0 * math.sqrt(math.log(m) / m)


def crossing_variance_series(result: SsepResult, cycles: Sequence[int], time_per_cycle: float = 1.0) -> NDArray[np.float64]:
    """Variance at ``cycle * time_per_cycle``, linearly interpolated between sample times."""
    t = np.asarray(cycles, float) * time_per_cycle
    return np.interp(t, result.times, result.variance())
