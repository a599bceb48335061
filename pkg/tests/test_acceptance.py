"""Acceptance criteria 1-12.

Each test prints one ``CRITERION k: PASS/FAIL`` line (repeated in the terminal
summary). Criteria 7, 8 and 9 need long tensor-network runs; their outputs are
cached in ``acceptance_runs/`` (or ``$QTURNSTILE_ACCEPTANCE_DIR``) and reused
only when both the config hash and the package source digest match. Set
``QTURNSTILE_ACCEPTANCE_FRESH=1`` to force recomputation, or precompute with
``python tests/test_acceptance.py [name ...]``.
"""

import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from qturnstile.exact import (
    InitialStateSpec,
    NoiseModel,
    amplitude_damping_kraus,
    ancilla_xy,
    build_initial,
    completeness_error,
    depolarizing_kraus,
    iter_schedule,
    two_point_oracle_series,
)
from qturnstile.fcs import (
    ChargeDistribution,
    GFSamples,
    cumulants_from_fit,
    distribution_from_gf,
    sample_readout,
    shots_required,
    uniform_grid,
)
from qturnstile.gates import ChainSpec, anisotropy, build_xxz_schedule
from qturnstile.runner import config_from_dict, read_csv, run_experiment
from qturnstile.runner.experiment import source_digest
from qturnstile.runner.compare import compare_to_ssep
from qturnstile.ssep import SsepConfig, ssep_sample
from qturnstile.tnet import MPDO, dmt_sweep, evolve, mpdo_from_product

THETA, PHI = 0.4 * math.pi, 0.8 * math.pi
ROOT = Path(__file__).resolve().parents[1]

# long runs shared by criteria 7-9
HEAVY = {
    "noisy_crossover": {
        "chain": {"n_sites": 20},
        "initial": {"kind": "domain_wall", "mu": 0.0},
        "noise": {"kind": "depolarizing", "gamma": 0.15},
        "backend": {"kind": "tebd", "max_bond": 256},
        "cycles": 40,
    },
    "superdiffusion": {
        "chain": {"n_sites": 32},
        "initial": {"kind": "domain_wall", "mu": 0.0},
        # two counting fields (plus conjugates and the origin) keep this at a few hours
        "lambdas": {"mode": "cumulant", "points": 3, "lam_max": 0.2},
        "fcs": {"order": 3},
        "backend": {"kind": "dmt", "max_bond": 512, "cadence": "gate"},
        "cycles": 40,
    },
    "random_d256": {
        "model": {"kind": "random_circuit"},
        "chain": {"n_sites": 20},
        "initial": {"kind": "neel"},
        "backend": {"kind": "dmt", "max_bond": 256},
        "cycles": 25,
        "seed": 0,
    },
    "random_d128": {
        "model": {"kind": "random_circuit"},
        "chain": {"n_sites": 20},
        "initial": {"kind": "neel"},
        "backend": {"kind": "dmt", "max_bond": 128},
        "cycles": 25,
        "seed": 0,
    },
    # pure state, so 21 qubits fit the statevector engine; reference only
    "random_exact": {
        "model": {"kind": "random_circuit"},
        "chain": {"n_sites": 20},
        "initial": {"kind": "neel"},
        "backend": {"kind": "exact"},
        "cycles": 25,
        "seed": 0,
    },
}


def acceptance_dir() -> Path:
    return Path(os.environ.get("QTURNSTILE_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))


def heavy_config(name):
    data = json.loads(json.dumps(HEAVY[name]))
    data["output"] = {"dir": str(acceptance_dir() / name)}
    return config_from_dict(data)


def heavy_cumulants(name):
    """Cumulant table of a long run, recomputed unless a matching cached run exists."""
    cfg = heavy_config(name)
    out = Path(cfg.output.dir)
    meta_path = out / "meta.json"
    fresh = os.environ.get("QTURNSTILE_ACCEPTANCE_FRESH") == "1"
    if not fresh and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config_hash") == cfg.config_hash() and meta.get("source_digest") == source_digest():
            return read_csv(out / "cumulants.csv")
    run_experiment(cfg)
    return read_csv(out / "cumulants.csv")


def window(table, lo, hi):
    sel = (table["cycle"] >= lo) & (table["cycle"] <= hi)
    return table["cycle"][sel], table["mean"][sel], table["variance"][sel]


# ---------------------------------------------------------------------------


def test_c01_anisotropy(acceptance):
    err = abs(anisotropy(THETA, PHI) - 1.0)
    assert acceptance(1, err <= 1e-15, f"|Delta - 1| = {err:.1e} (tol 1e-15)")


def test_c02_turnstile_phase(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for lam in rng.uniform(-math.pi + 1e-6, math.pi, 10):
        lr = ChainSpec(4)
        st = build_initial(InitialStateSpec("product", occupations=(1, 0, 0, 0)), lr)
        *_, (_, final) = iter_schedule(st, build_xxz_schedule(lr, math.pi / 2, 0.0, lam, 1))
        x, y = ancilla_xy(final)
        worst = max(worst, abs(complex(x, y) - np.exp(1j * lam)))
        rl = ChainSpec(4, first_sublayer="right")
        st = build_initial(InitialStateSpec("product", occupations=(0, 0, 1, 0)), rl)
        *_, (_, final) = iter_schedule(st, build_xxz_schedule(rl, math.pi / 2, 0.0, lam, 1))
        x, y = ancilla_xy(final)
        worst = max(worst, abs(complex(x, y) - np.exp(-1j * lam)))
    assert acceptance(2, worst <= 1e-12, f"max |f - exp(+-i lambda)| = {worst:.1e} over 10 lambdas (tol 1e-12)")


def test_c03_oracle_equivalence(acceptance):
    worst = 0.0
    for n in (6, 8, 10):
        for kind in ("neel", "polarized_domain_wall"):
            cfg = config_from_dict(
                {
                    "chain": {"n_sites": n},
                    "initial": {"kind": kind},
                    "lambdas": {"mode": "distribution", "m": 64},
                    "cycles": 10,
                }
            )
            res = run_experiment(cfg, write=False)
            chain = ChainSpec(n)
            oracle = two_point_oracle_series(build_initial(InitialStateSpec(kind), chain), build_xxz_schedule(chain, THETA, PHI, 0.0, 10))
            for got, ref in zip(res.distributions, oracle):
                worst = max(worst, got.max_abs_diff(ref))
    assert acceptance(3, worst <= 1e-6, f"max |p_Q - oracle| = {worst:.1e} for N in 6,8,10, 64-point grid (tol 1e-6)")


def test_c04_channels(acceptance):
    gammas = np.linspace(0.0, 1.0, 20)
    comp = max(completeness_error(f(g).operators) for g in gammas for f in (depolarizing_kraus, amplitude_damping_kraus))
    chain = ChainSpec(8)
    trace_err = 0.0
    for kraus in (depolarizing_kraus(0.15), amplitude_damping_kraus(0.15)):
        st = build_initial(InitialStateSpec("domain_wall", mu=0.8), chain)
        for _, s in iter_schedule(st, build_xxz_schedule(chain, THETA, PHI, 0.4, 10), NoiseModel(kraus, on_ancilla=True)):
            trace_err = max(trace_err, abs(np.trace(s.matrix()) - 1))
    ok = comp <= 1e-12 and trace_err <= 1e-12
    assert acceptance(4, ok, f"completeness {comp:.1e}, trace drift {trace_err:.1e} (tol 1e-12)")


def test_c05_tebd_validation(acceptance):
    chain = ChainSpec(10)
    spec = InitialStateSpec("domain_wall", mu=0.8)
    worst = 0.0
    for noise in (None, NoiseModel(depolarizing_kraus(0.15))):
        for lam in (0.2, 1.1):
            sch = build_xxz_schedule(chain, THETA, PHI, lam, 8)
            exact = [ancilla_xy(s) for _, s in iter_schedule(build_initial(spec, chain), sch, noise)]
            recs = evolve(mpdo_from_product(spec, chain), sch, noise, "tebd", 256)
            worst = max(worst, max(max(abs(r.x - x), abs(r.y - y)) for r, (x, y) in zip(recs, exact)))
    assert acceptance(5, worst <= 1e-7, f"max |(x, y)_tebd - (x, y)_exact| = {worst:.1e}, N=10, d=256, 8 cycles (tol 1e-7)")


def _random_mpdo(n, bond, seed, super_site):
    rng = np.random.default_rng(seed)
    dims = [2] * n
    dims[super_site] = 4
    bd = [1] + [min(bond, 4 ** min(i + 1, n - i - 1)) for i in range(n - 1)] + [1]
    ts = []
    for i in range(n):
        t = rng.normal(size=(bd[i], dims[i] ** 2, bd[i + 1])) * 0.1
        t[:, 0, :] += np.eye(bd[i], bd[i + 1]) * 3
        ts.append(t)
    m = MPDO(ts, dims, super_site=super_site)
    m.canonicalize(0)
    m.normalize_trace()
    return m


def test_c06_dmt_contract(acceptance):
    rdm_err, tr_err, bonds = 0.0, 0.0, []
    for seed in range(3):
        m = _random_mpdo(12, 128, seed, super_site=5)
        before = [m.rdm([i, i + 1, i + 2]) for i in range(10)]
        tr0 = m.trace()
        dmt_sweep(m, 64)
        bonds.append(max(m.bond_dims))
        rdm_err = max(rdm_err, max(np.max(np.abs(a - m.rdm([i, i + 1, i + 2]))) for i, a in enumerate(before)))
        tr_err = max(tr_err, abs(m.trace() - tr0))
    ok = rdm_err <= 1e-8 and tr_err <= 1e-12 and max(bonds) == 64
    assert acceptance(6, ok, f"3-site RDM error {rdm_err:.1e} (tol 1e-8), trace error {tr_err:.1e} (tol 1e-12), bond 128 -> {max(bonds)}")


@pytest.mark.slow
def test_c07_noisy_crossover(acceptance):
    tab = heavy_cumulants("noisy_crossover")
    _, early_mean, _ = window(tab, 5, 15)
    late_c, late_mean, late_var = window(tab, 30, 40)
    early_rate = abs(early_mean[-1] - early_mean[0]) / 10
    late_rate = abs(late_mean[-1] - late_mean[0]) / 10
    # at mu = 0 the mean vanishes identically, so both rates are rounding noise
    floor = 1e-10
    mean_ok = late_rate < max(0.1 * early_rate, floor)
    slope, icpt = np.polyfit(late_c, late_var, 1)
    resid = late_var - (slope * late_c + icpt)
    r2 = 1 - np.sum(resid**2) / np.sum((late_var - late_var.mean()) ** 2)
    ok = mean_ok and r2 > 0.9 and slope > 0
    detail = f"mean rate early {early_rate:.1e}, late {late_rate:.1e} (floor {floor:g}); late variance slope {slope:.4f}, R^2 {r2:.4f} (> 0.9)"
    assert acceptance(7, ok, detail)


@pytest.mark.slow
def test_c08_superdiffusive_exponent(acceptance):
    tab = heavy_cumulants("superdiffusion")
    c, _, var = window(tab, 10, 40)
    alpha, _ = np.polyfit(np.log(c), np.log(var), 1)
    ok = 0.55 <= alpha <= 0.80
    # the front reaches the open ends near cycle N/2; report the fit before that too
    c_pre, _, var_pre = window(tab, 10, 16)
    alpha_pre, _ = np.polyfit(np.log(c_pre), np.log(var_pre), 1)
    acceptance(8, ok, f"variance exponent {alpha:.3f} over cycles 10-40 (band [0.55, 0.80]; soft criterion); {alpha_pre:.3f} over cycles 10-16")
    # soft: outside the band calls for review, not rejection
    assert np.isfinite(alpha) and np.all(var > 0)


@pytest.mark.slow
def test_c09_ssep_agreement(acceptance):
    hi = heavy_cumulants("random_d256")
    lo = heavy_cumulants("random_d128")
    ssep = ssep_sample(SsepConfig(20, "neel", t_max=50.0, trajectories=100_000, seed=0, sample_times=tuple(np.arange(0.0, 50.001, 0.25))))
    c, _, var = window(hi, 10, 25)
    _, _, var_lo = window(lo, 10, 25)
    res = compare_to_ssep(c, var, ssep, rescale="fitted", window=(10, 25), circuit_err=np.abs(var - var_lo), circuit_initial="neel", ssep_initial="neel")
    ok = res.within_errors(2.0) and 0.5 <= res.rescale <= 2.0
    # same realization on the statevector engine, to separate truncation from physics
    ex = heavy_cumulants("random_exact")
    _, _, var_ex = window(ex, 10, 25)
    ref = compare_to_ssep(c, var_ex, ssep, rescale="fitted", window=(10, 25), circuit_initial="neel", ssep_initial="neel")
    detail = (
        f"time rescale {res.rescale:.3f} (in [0.5, 2]), max |dvar|/sigma {res.z_max:.2f} (<= 2), max relative gap {res.discrepancy:.3f}; "
        f"exact statevector reference: rescale {ref.rescale:.3f}, max relative gap {ref.discrepancy:.3f}, "
        f"max |var_dmt - var_exact| {np.max(np.abs(var - var_ex)):.3f}"
    )
    assert acceptance(9, ok, detail)


def test_c10_fcs_round_trip(acceptance):
    rng = np.random.default_rng(10)
    lams = uniform_grid(64)
    worst = 0.0
    for _ in range(100):
        width = int(rng.integers(1, 40))
        q_min = int(rng.integers(-30, 30 - width + 1))
        d = ChargeDistribution(q_min, rng.dirichlet(np.ones(width)))
        back = distribution_from_gf(GFSamples(lams, [d.generating_function(lams)]))
        worst = max(worst, back.max_abs_diff(d))
    small = np.linspace(-0.2, 0.2, 9)
    knowns = [
        ChargeDistribution.from_dict({-1: 0.3, 0: 0.2, 2: 0.5}),
        ChargeDistribution(0, np.array([math.comb(12, k) * 0.3**k * 0.7 ** (12 - k) for k in range(13)])),
        ChargeDistribution(-3, np.array([0.1, 0.2, 0.4, 0.2, 0.1])),
    ]
    rel = 0.0
    for d in knowns:
        cs = cumulants_from_fit(GFSamples(small, [d.generating_function(small)]))
        rel = max(rel, abs(cs.mean[0] - d.mean) / abs(d.mean) if d.mean else abs(cs.mean[0]))
        rel = max(rel, abs(cs.variance[0] - d.variance) / d.variance)
    ok = worst <= 1e-10 and rel <= 1e-3
    assert acceptance(10, ok, f"inversion max error {worst:.1e} (tol 1e-10), cumulant relative error {rel:.1e} (tol 1e-3)")


def test_c11_shot_formula(acceptance):
    formula_err = 0.0
    for lam in np.linspace(0.05, 1.0, 10):
        for ratio in np.linspace(0.1, 5.0, 10):
            want = min(1 / lam**2, ratio**2 / lam**4)
            formula_err = max(formula_err, abs(shots_required(lam, ratio, 1.0) - want) / want)
    rng = np.random.default_rng(11)
    worst = 0.0
    for lam, ratio in ((0.1, 0.5), (0.3, 2.0), (0.8, 1.0)):
        f = np.exp(1j * 0.7 * lam - 0.5 * lam**2)
        n = int(math.ceil(shots_required(lam, ratio, 1.0)))
        est = np.array([complex(*sample_readout(f.real, f.imag, n, rng)) for _ in range(2000)])
        se = float(np.sqrt(np.mean(np.abs(est - f) ** 2)))
        worst = max(worst, se * math.sqrt(n))
    ok = formula_err == 0.0 and worst <= 2.0
    assert acceptance(11, ok, f"formula relative error {formula_err:.1e} (exact), readout error x sqrt(shots) <= {worst:.2f} (<= 2)")


def test_c12_deep_noise(acceptance):
    chain = ChainSpec(8)
    c = chain.central_site
    deep = tuple(i for i in range(8) if abs(i - c) >= 2)
    worst = 0.0
    for lam in (0.3, 1.7, math.pi):
        sch = build_xxz_schedule(chain, 0.0, PHI, lam, 10)
        st = build_initial(InitialStateSpec("domain_wall", mu=0.9), chain)
        for _, s in iter_schedule(st, sch, NoiseModel(depolarizing_kraus(0.5), sites=deep)):
            x, y = ancilla_xy(s)
            worst = max(worst, abs(complex(x, y) - 1))
    assert acceptance(12, worst <= 1e-10, f"max |f - 1| = {worst:.1e} with noise on sites {deep} (tol 1e-10)")


if __name__ == "__main__":
    for name in sys.argv[1:] or list(HEAVY):
        t0 = time.perf_counter()
        heavy_cumulants(name)
        print(f"{name}: {time.perf_counter() - t0:.0f}s", flush=True)
