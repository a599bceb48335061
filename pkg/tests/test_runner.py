import dataclasses
import json
import math

import numpy as np
import pytest
import yaml

from qturnstile.exact import InitialStateSpec, ancilla_xy, build_initial, run_schedule
from qturnstile.gates import ChainSpec, build_xxz_schedule
from qturnstile.runner import (
    BackendError,
    ConfigError,
    IncompatibleInitialStates,
    compare_to_ssep,
    config_from_dict,
    load_config,
    read_csv,
    run_experiment,
)
from qturnstile.runner.cli import main
from qturnstile.runner.compare import SsepCurve
from qturnstile.runner.experiment import (
    checkpoint_path,
    load_checkpoint,
    make_initial,
    make_schedule,
    run_lambdas,
    save_checkpoint,
    source_digest,
)
from qturnstile.ssep import SsepConfig, ssep_master
from qturnstile.tnet import evolve, mpdo_from_product


def small(tmp_path, **sections):
    data = {
        "chain": {"n_sites": 6},
        "initial": {"kind": "domain_wall", "mu": 0.6},
        "cycles": 3,
        "output": {"dir": str(tmp_path / "out")},
    }
    for key, val in sections.items():
        if isinstance(val, dict):
            data.setdefault(key, {}).update(val)
        else:
            data[key] = val
    return config_from_dict(data)


class TestConfig:
    def test_defaults_valid(self):
        cfg = config_from_dict({})
        assert cfg.backend.kind == "exact" and cfg.lambdas.mode == "cumulant"

    def test_every_error_reported_with_path(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"chain": {"n_sites": 7}, "noise": {"gamma": 2.0}, "lambdas": {"mode": "explicit"}, "bogus": 1})
        errs = info.value.errors
        for path in ("chain.n_sites", "noise.gamma", "lambdas.values", "bogus"):
            assert any(e.startswith(path + ":") for e in errs), path

    def test_unknown_nested_field(self):
        with pytest.raises(ConfigError, match="backend.bond: unknown field"):
            config_from_dict({"backend": {"bond": 3}})

    def test_exact_mixed_size_limit(self):
        with pytest.raises(ConfigError, match="backend.kind"):
            config_from_dict({"chain": {"n_sites": 14}, "initial": {"kind": "domain_wall"}})
        # pure states fit
        config_from_dict({"chain": {"n_sites": 14}, "initial": {"kind": "neel"}})
        config_from_dict({"chain": {"n_sites": 12}, "noise": {"kind": "depolarizing", "gamma": 0.1}})

    def test_explicit_lambda_range(self):
        with pytest.raises(ConfigError, match=r"lambdas.values\[1\]"):
            config_from_dict({"lambdas": {"mode": "explicit", "values": [0.1, 4.0]}})

    def test_yaml_and_overrides(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump({"chain": {"n_sites": 8}, "noise": {"kind": "depolarizing", "gamma": 0.1}}))
        cfg = load_config(p, ["noise.gamma=0.15", "chain.central_site=null", "backend.kind=tebd"])
        assert cfg.noise.gamma == 0.15 and cfg.chain.n_sites == 8 and cfg.backend.kind == "tebd"

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            load_config(None, ["noise.gamma"])

    def test_output_dir_priority(self, tmp_path, monkeypatch):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump({"output": {"dir": "from_file"}}))
        monkeypatch.setenv("QTURNSTILE_OUTPUT_DIR", "from_env")
        assert load_config(p).output.dir == "from_env"
        assert load_config(p, ["output.dir=from_set"]).output.dir == "from_set"

    def test_hash_ignores_output_and_workers(self):
        a = config_from_dict({"output": {"dir": "a"}, "workers": 1})
        b = config_from_dict({"output": {"dir": "b"}, "workers": 3})
        c = config_from_dict({"seed": 5})
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestLambdas:
    def test_cumulant_grid_skips_origin(self):
        cfg = config_from_dict({})
        np.testing.assert_allclose(run_lambdas(cfg), np.linspace(0, 0.2, 9)[1:])

    def test_distribution_grid_half(self):
        cfg = config_from_dict({"lambdas": {"mode": "distribution", "m": 8}})
        lams = run_lambdas(cfg)
        assert len(lams) == 4 and lams[-1] == pytest.approx(math.pi)

    def test_explicit_kept_verbatim(self):
        cfg = config_from_dict({"lambdas": {"mode": "explicit", "values": [0.0, 0.3]}})
        assert run_lambdas(cfg) == [0.0, 0.3]


class TestRun:
    def test_matches_direct_engine(self, tmp_path):
        cfg = small(tmp_path)
        res = run_experiment(cfg, write=False)
        chain = ChainSpec(6)
        lam = 0.2
        states = run_schedule(build_initial(InitialStateSpec("domain_wall", 0.6), chain), build_xxz_schedule(chain, cfg.model.theta, cfg.model.phi, lam, 3))
        x, y = ancilla_xy(states[-1])
        assert res.gf.value(lam, -1) == pytest.approx(x + 1j * y, abs=1e-14)
        assert res.gf.value(-lam, -1) == pytest.approx(x - 1j * y, abs=1e-14)

    def test_zero_lambda_only(self, tmp_path):
        cfg = small(tmp_path, lambdas={"mode": "explicit", "values": [0.0]})
        res = run_experiment(cfg)
        np.testing.assert_allclose(res.gf.values, 1.0, atol=1e-14)
        assert res.cumulants is None
        assert any("cumulant extraction refused" in d for d in res.diagnostics)
        meta = json.loads((tmp_path / "out" / "meta.json").read_text())
        assert meta["diagnostics"] == res.diagnostics

    def test_outputs_and_provenance(self, tmp_path):
        cfg = small(tmp_path, lambdas={"mode": "distribution", "m": 16}, initial={"kind": "neel"})
        res = run_experiment(cfg)
        out = tmp_path / "out"
        for name in ("gf.csv", "pq.csv", "cumulants.csv", "meta.json"):
            assert (out / name).exists()
        assert not list(out.glob("*.tmp"))
        first = (out / "gf.csv").read_text().splitlines()[0]
        assert first.startswith("# qturnstile") and f"config_hash={cfg.config_hash()}" in first
        meta = json.loads((out / "meta.json").read_text())
        assert meta["config"] == cfg.to_dict()
        assert meta["source_digest"] == source_digest()
        pq = read_csv(out / "pq.csv")
        last = pq["cycle"] == 3
        assert pq["p"][last].sum() == pytest.approx(1.0, abs=1e-10)
        assert res.cumulants.mean[0] == 0

    def test_deterministic_bytes(self, tmp_path):
        a = small(tmp_path / "a", model={"kind": "random_circuit"}, seed=7)
        b = small(tmp_path / "b", model={"kind": "random_circuit"}, seed=7)
        run_experiment(a)
        run_experiment(b)
        for name in ("gf.csv", "cumulants.csv"):
            assert (tmp_path / "a" / "out" / name).read_bytes() == (tmp_path / "b" / "out" / name).read_bytes()

    def test_parallel_matches_serial(self, tmp_path):
        serial = run_experiment(small(tmp_path / "s", lambdas={"points": 3}), write=False)
        par = run_experiment(small(tmp_path / "p", lambdas={"points": 3}, workers=2), write=False)
        np.testing.assert_array_equal(serial.gf.values, par.gf.values)

    def test_backends_agree(self, tmp_path):
        ex = run_experiment(small(tmp_path, lambdas={"points": 3}), write=False)
        tn = run_experiment(small(tmp_path, lambdas={"points": 3}, backend={"kind": "dmt", "max_bond": 512}), write=False)
        np.testing.assert_allclose(tn.gf.values, ex.gf.values, atol=1e-10)
        assert (tmp_path / "out").exists() is False

    def test_truncation_table(self, tmp_path):
        cfg = small(tmp_path, lambdas={"points": 2}, backend={"kind": "tebd", "max_bond": 4})
        run_experiment(cfg)
        tr = read_csv(tmp_path / "out" / "truncation.csv")
        assert set(tr["cycle"]) == {1, 2, 3}
        assert np.all(tr["max_bond"] <= 4)

    def test_backend_error_carries_lambda_and_cycle(self, tmp_path):
        cfg = small(tmp_path, lambdas={"mode": "explicit", "values": [0.3]}, backend={"kind": "tebd", "max_bond": 2, "weight_budget": 1e-12})
        with pytest.raises(BackendError) as info:
            run_experiment(cfg)
        assert info.value.lam == 0.3 and info.value.cycle >= 1


class TestCheckpoint:
    common = dict(lambdas={"mode": "explicit", "values": [0.4]}, backend={"kind": "tebd"}, cycles=4)

    def test_round_trip(self, tmp_path):
        full = run_experiment(small(tmp_path / "full", **self.common), write=False)
        cfg = small(tmp_path / "ck", **self.common, output={"checkpoint_every": 2})
        run_experiment(cfg)
        mpdo, cycle, xs, ys, chash = load_checkpoint(checkpoint_path(cfg, 0.4))
        assert cycle == 4 and chash == cfg.config_hash() and len(xs) == 5
        np.testing.assert_allclose(xs, full.runs[0].x, atol=1e-13)
        assert mpdo.ancilla_xy() == pytest.approx((xs[-1], ys[-1]), abs=1e-13)

    def test_resume_continues_from_checkpoint(self, tmp_path):
        full = run_experiment(small(tmp_path / "full", **self.common), write=False)
        cfg = small(tmp_path / "ck", **self.common)
        sch = make_schedule(cfg, 0.4)
        m = mpdo_from_product(make_initial(cfg), sch.chain)
        recs = evolve(m, dataclasses.replace(sch, cycles=sch.cycles[:2]), algorithm="tebd", max_bond=256)
        save_checkpoint(checkpoint_path(cfg, 0.4), m, 2, [r.x for r in recs], [r.y for r in recs], cfg.config_hash())
        res = run_experiment(small(tmp_path / "ck", **self.common, output={"resume": True}))
        run = res.runs[0]
        assert run.resumed_from == 2
        np.testing.assert_allclose(run.x, full.runs[0].x, atol=1e-12)
        np.testing.assert_allclose(run.y, full.runs[0].y, atol=1e-12)
        meta = json.loads((tmp_path / "ck" / "out" / "meta.json").read_text())
        assert list(meta["resumed_from"].values()) == [2]

    def test_foreign_checkpoint_ignored(self, tmp_path):
        run_experiment(small(tmp_path, **{**self.common, "cycles": 2}, output={"checkpoint_every": 2}))
        res = run_experiment(small(tmp_path, **self.common, output={"resume": True}))
        assert res.runs[0].resumed_from == 0 and len(res.runs[0].x) == 5


class TestCompare:
    @pytest.fixture
    def ssep(self):
        return ssep_master(SsepConfig(8, "neel", t_max=8.0, sample_times=tuple(np.arange(0, 8.01, 0.25))))

    def test_identical_curve(self, ssep):
        cyc = np.arange(1, 7)
        var = np.interp(cyc, ssep.times, ssep.variance())
        res = compare_to_ssep(cyc, var, ssep)
        assert res.rescale == pytest.approx(1.0, abs=1e-6)
        assert res.discrepancy < 1e-6

    def test_time_rescale_recovered(self, ssep):
        cyc = np.arange(1, 7)
        var = np.interp(cyc * 1.25, ssep.times, ssep.variance())
        res = compare_to_ssep(cyc, var, ssep)
        assert res.rescale == pytest.approx(1.25, abs=1e-4)

    def test_amplitude_mismatch_not_absorbed(self, ssep):
        cyc = np.arange(1, 7)
        var = 2 * np.interp(cyc, ssep.times, ssep.variance())
        res = compare_to_ssep(cyc, var, ssep, rescale="fixed")
        assert res.discrepancy == pytest.approx(1.0)
        assert not res.within_errors()

    def test_error_bars(self, ssep):
        cyc = np.arange(1, 5)
        v = np.interp(cyc, ssep.times, ssep.variance())
        res = compare_to_ssep(cyc, v + 0.01, ssep, rescale="fixed", circuit_err=np.full(4, 0.01))
        assert res.within_errors(2.0) and not res.within_errors(0.5)
        assert res.z_max == pytest.approx(1.0)

    def test_window(self, ssep):
        res = compare_to_ssep(np.arange(0, 8), np.ones(8), ssep, rescale="fixed", window=(2, 4))
        np.testing.assert_array_equal(res.cycles, [2, 3, 4])
        with pytest.raises(ValueError):
            compare_to_ssep(np.arange(0, 8), np.ones(8), ssep, window=(20, 30))

    def test_incompatible_initial_states(self, ssep):
        with pytest.raises(IncompatibleInitialStates):
            compare_to_ssep([1, 2], [0.1, 0.2], ssep, circuit_initial="neel", ssep_initial="domain_wall")
        compare_to_ssep([1, 2], [0.1, 0.2], ssep, circuit_initial="polarized_domain_wall", ssep_initial="domain_wall")

    def test_curve_from_arrays(self):
        curve = SsepCurve(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 2.0]), np.zeros(3))
        res = compare_to_ssep([1, 2], [1.0, 2.0], curve, rescale="fixed")
        assert res.discrepancy == 0


class TestCli:
    def test_xxz_fcs(self, tmp_path, capsys):
        out = tmp_path / "x"
        rc = main(["xxz-fcs", "--n-sites", "6", "--cycles", "2", "--mu", "0.5", "--out", str(out), "--set", "lambdas.points=4"])
        assert rc == 0 and (out / "cumulants.csv").exists()
        assert "variance=" in capsys.readouterr().out

    def test_random_fcs_config_file(self, tmp_path):
        p = tmp_path / "rc.yaml"
        p.write_text(yaml.safe_dump({"chain": {"n_sites": 6}, "cycles": 2, "initial": {"kind": "neel"}, "lambdas": {"points": 3}}))
        out = tmp_path / "r"
        assert main(["random-fcs", "--config", str(p), "--seed", "3", "--out", str(out)]) == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["config"]["model"]["kind"] == "random_circuit" and meta["seeds"]["circuit"] == 3

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        assert main(["xxz-fcs", "--n-sites", "7", "--out", str(tmp_path)]) == 2
        assert "chain.n_sites" in capsys.readouterr().err

    def test_validate_config(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"noise": {"kind": "depolarizing", "gamma": 0.15}}))
        assert main(["validate-config", str(p)]) == 0
        assert "config_hash=" in capsys.readouterr().out
        assert main(["validate-config", str(p), "--set", "noise.gamma=-1"]) == 2

    def test_ssep_and_compare(self, tmp_path, capsys):
        s_out, c_out = tmp_path / "s", tmp_path / "c"
        assert main(["ssep", "--n-sites", "6", "--t-max", "4", "--method", "master", "--out", str(s_out)]) == 0
        assert main(["xxz-fcs", "--n-sites", "6", "--cycles", "4", "--initial", "neel", "--out", str(c_out)]) == 0
        table = tmp_path / "cmp.csv"
        assert main(["compare", "--circuit", str(c_out), "--ssep", str(s_out), "--window", "1", "4", "--out", str(table)]) == 0
        assert "rescale=" in capsys.readouterr().out
        rows = read_csv(table)
        np.testing.assert_array_equal(rows["cycle"], [1, 2, 3, 4])

    def test_compare_rejects_mismatched_families(self, tmp_path, capsys):
        s_out, c_out = tmp_path / "s", tmp_path / "c"
        main(["ssep", "--n-sites", "6", "--t-max", "3", "--initial", "domain_wall", "--method", "master", "--out", str(s_out)])
        main(["xxz-fcs", "--n-sites", "6", "--cycles", "3", "--initial", "neel", "--out", str(c_out)])
        assert main(["compare", "--circuit", str(c_out), "--ssep", str(s_out)]) == 1
        assert "neel" in capsys.readouterr().err

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QTURNSTILE_OUTPUT_DIR", str(tmp_path / "env"))
        assert main(["xxz-fcs", "--n-sites", "4", "--cycles", "1", "--set", "lambdas.points=2"]) == 0
        assert (tmp_path / "env" / "gf.csv").exists()

    def test_thread_cap_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QTURNSTILE_THREADS", "zero")
        assert main(["xxz-fcs", "--n-sites", "4", "--cycles", "1", "--out", str(tmp_path)]) == 2
