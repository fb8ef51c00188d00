"""Config parsing, experiment runs, exports and the command line."""
import math
import warnings

import pytest

from ehrelay.exact import policy_kernel
from ehrelay.harness.cli import main
from ehrelay.harness.config import ConfigError, ExperimentConfig, load_config, parse_config
from ehrelay.harness.experiment import aggregate, mean_se, run_experiment
from ehrelay.harness.export import COLUMNS, export, read_table
from ehrelay.policy import PolicyParams

TINY = """
[system]
num_relays = 2
buffer_capacity = 2
battery_capacity = 2
power_levels = [0, 1]
packet_size_bits = 1250
mean_arrival = 0.4
[channel]
boundaries_db = [0.0]
[experiment]
controllers = {controllers}
horizon = {horizon}
seeds = {seeds}
trace_stride = 500
snapshot_every = 20
"""


def tiny_cfg(controllers=("dltpc", "online-hr", "naive"), horizon=3000, seeds=(1, 2), extra=""):
    text = TINY.format(controllers=list(controllers).__repr__().replace("'", '"'), horizon=horizon,
                       seeds=list(seeds)) + extra
    return parse_config(text)


class TestConfig:
    def test_empty_gives_reference_setup(self):
        cfg = parse_config("")
        p = cfg.params
        assert p.num_relays == 8 and p.slot_duration == 2.0 and p.bandwidth == 2.5e6
        assert p.packet_size == 8192 and p.buffer_capacity == 9
        assert p.battery_capacity == (4,) * 8 and p.mean_harvest == (0.25,) * 8
        assert p.source_power == 5.0 and cfg.channel.num_bins == 6
        assert cfg.schedule.alpha0 == 2.5e-4 and cfg.schedule.decay == 0.9 and cfg.schedule.period == 100
        a = cfg.anchor_for(p)
        assert a.buffer == 9 and a.batteries == (4,) * 8
        assert cfg.warmup_slots == cfg.horizon // 10
        assert cfg == ExperimentConfig()

    def test_single_arrival_point(self):
        cfg = parse_config("[sweep]\nmean_arrival = [2.0]\n")
        assert cfg.points() == [("mean_arrival", 2.0)]
        assert cfg.at_point("mean_arrival", 2.0).params.mean_arrival == 2.0

    def test_unknown_key_has_line(self):
        with pytest.raises(ConfigError, match=r"system\.foo: unknown key \(line 3\)"):
            parse_config("[system]\nnum_relays = 2\nfoo = 1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"unknown section \[bogus\] \(line 1\)"):
            parse_config("[bogus]\nx = 1\n")

    def test_warmup_not_below_horizon(self):
        with pytest.raises(ConfigError, match="warmup"):
            parse_config("[experiment]\nhorizon = 100\nwarmup = 200\n")
        with pytest.raises(ConfigError, match="warmup"):
            parse_config("[experiment]\nhorizon = 100\nwarmup = 100\n")

    def test_non_integer_spend(self):
        with pytest.raises(ConfigError, match=r"power_levels.*line 2"):
            parse_config("[system]\npower_levels = [0, 1.5]\n")

    def test_no_seeds(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("[experiment]\nseeds = []\n")

    def test_bad_sweep_point(self):
        with pytest.raises(ConfigError, match="sweep.battery_capacity"):
            parse_config("[sweep]\nbattery_capacity = [4, -1]\n")

    def test_fixed_policy_needs_file(self):
        with pytest.raises(ConfigError, match="policy_file"):
            parse_config('[experiment]\ncontrollers = ["fixed-policy"]\n')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.toml")


class TestExperiment:
    def test_common_random_numbers(self):
        cfg = tiny_cfg(seeds=(3,))
        series = run_experiment(cfg)
        digests = {s.summary["stream_digest"] for s in series}
        assert len(series) == 3 and len(digests) == 1
        other = run_experiment(tiny_cfg(seeds=(4,), controllers=("naive",)))
        assert other[0].summary["stream_digest"] not in digests

    def test_fixed_uniform_policy_matches_exact(self, tmp_path, tiny, tiny_kernel):
        params, _ = tiny
        uniform = PolicyParams.for_system(params, 2)
        (tmp_path / "u.json").write_text(uniform.to_json())
        text = TINY.format(controllers='["fixed-policy"]', horizon=40_000, seeds=list(range(1, 9)))
        text = text.replace("snapshot_every = 20", 'snapshot_every = 20\npolicy_file = "u.json"')
        cfg = parse_config(text, tmp_path)
        series = run_experiment(cfg)
        m, se = mean_se([s.summary["mean_reward"] for s in series])
        exact = policy_kernel(tiny_kernel, uniform).average_reward
        assert abs(m - exact) < 3 * se

    def test_policy_layout_checked(self, tmp_path):
        from ehrelay.model import SystemParams
        (tmp_path / "p.json").write_text(PolicyParams.for_system(SystemParams.symmetric(num_relays=3), 2).to_json())
        text = TINY.format(controllers='["fixed-policy"]', horizon=100, seeds=[1])
        text = text.replace("snapshot_every = 20", 'snapshot_every = 20\npolicy_file = "p.json"')
        series = run_experiment(parse_config(text, tmp_path))
        assert series[0].error and "layout" in series[0].error
        assert aggregate(series)[0]["failures"] == 1

    def test_naive_occupancy_grows_with_load(self):
        cfg = tiny_cfg(controllers=("naive",), horizon=20_000, seeds=(1, 2, 3),
                       extra="[sweep]\nmean_arrival = [0.25, 0.375, 0.5]\n")
        rows = sorted((r["value"], r["mean_occupancy"]) for r in aggregate(run_experiment(cfg)))
        occ = [o for _, o in rows]
        if any(b < a for a, b in zip(occ, occ[1:])):
            warnings.warn(f"naive occupancy not monotone in load: {rows}")
        assert all(0 <= o <= 2 for o in occ)

    def test_summary_consistency(self):
        for s in run_experiment(tiny_cfg()):
            sm = s.summary
            assert 0 <= sm["mean_occupancy"] <= 2
            assert 0 <= sm["drop_rate"] <= 1
            assert sm["drop_rate"] == (sm["drops"] / sm["arrivals"] if sm["arrivals"] else 0.0)
            assert sm["slots"] == 3000 - 300
            assert all(0 <= row[1] <= 2 for row in s.trace)

    def test_dltpc_records(self):
        s = run_experiment(tiny_cfg(controllers=("dltpc",), seeds=(1,)))[0]
        assert s.cycles and s.snapshots and s.policy_json
        alphas = [c[3] for c in s.cycles]
        assert alphas[0] == 2.5e-4
        assert all(abs(sum(r[4] for r in s.snapshots if r[0] == m) - 1) < 1e-12 for m in {r[0] for r in s.snapshots})

    def test_mean_se(self):
        assert mean_se([1.0, 3.0]) == (2.0, 1.0)
        assert math.isnan(mean_se([1.0])[1])


class TestExport:
    def test_round_trip_csv(self, tmp_path):
        cfg = tiny_cfg(extra="[sweep]\nmean_arrival = [0.3, 0.4]\n")
        series = run_experiment(cfg)
        export(series, cfg, tmp_path, "csv")
        cols, rows = read_table(tmp_path / "runs.csv")
        assert cols == COLUMNS["runs"]
        for s, row in zip(series, rows):
            rec = dict(zip(cols, row))
            assert (rec["controller"], rec["axis"], rec["value"], rec["seed"]) == (s.controller, s.axis, s.value,
                                                                                  s.seed)
            for k, v in s.summary.items():
                assert rec[k] == v or (isinstance(v, float) and math.isinf(v) and rec[k] == v)
        _, trace = read_table(tmp_path / "fig2.csv")
        assert [r[4:] for r in trace] == [list(r) for s in series for r in s.trace]

    def test_round_trip_json(self, tmp_path):
        cfg = tiny_cfg(controllers=("naive",))
        series = run_experiment(cfg)
        export(series, cfg, tmp_path, "json")
        cols, rows = read_table(tmp_path / "fig2.json")
        assert [r[4:] for r in rows] == [list(r) for s in series for r in s.trace]

    def test_fig4_schema_and_metadata(self, tmp_path):
        import json
        cfg = tiny_cfg(extra="[sweep]\nmean_arrival = [0.3, 0.4]\n")
        export(run_experiment(cfg), cfg, tmp_path)
        _, rows = read_table(tmp_path / "fig4.csv")
        keys = [(r[0], r[2]) for r in rows]
        assert len(keys) == len(set(keys)) == 6
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["hr_stand_in"] is True and "stand-in" in meta["hr_stand_in_note"]
        assert meta["config_hash"] == cfg.digest() and meta["seeds"] == [1, 2]
        assert meta["version"].startswith("ehrelay-")

    def test_deterministic_files(self, tmp_path):
        cfg = tiny_cfg()
        for d in ("a", "b"):
            export(run_experiment(cfg), cfg, tmp_path / d)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_checkpoint_resume_identical(self, tmp_path):
        cfg = tiny_cfg(seeds=(5,))
        export(run_experiment(cfg), cfg, tmp_path / "straight")
        ck = tmp_path / "ck"
        ck.mkdir()
        from ehrelay.harness.experiment import RunInterrupted
        # each controller is interrupted once, then resumed
        series, interrupts = None, 0
        for _ in range(10):
            try:
                series = run_experiment(cfg, checkpoint_dir=ck, stop_after=1234)
                break
            except RunInterrupted:
                interrupts += 1
        assert interrupts == 3
        assert series is not None
        assert sorted(f.name.split(".done")[0].split("_", 1)[1] for f in ck.iterdir()) == \
            ["dltpc_none_None_5", "naive_none_None_5", "online-hr_none_None_5"]
        export(series, cfg, tmp_path / "resumed")
        for f in (tmp_path / "straight").iterdir():
            assert f.read_bytes() == (tmp_path / "resumed" / f.name).read_bytes(), f.name


class TestCli:
    def write(self, tmp_path, text):
        p = tmp_path / "c.toml"
        p.write_text(text)
        return str(p)

    def test_run_ok(self, tmp_path, capsys):
        text = TINY.format(controllers='["naive", "mdp-optimal"]', horizon=2000, seeds=[1])
        rc = main(["run", "--config", self.write(tmp_path, text), "--out", str(tmp_path / "o"), "--seed", "7"])
        assert rc == 0
        _, rows = read_table(tmp_path / "o" / "runs.csv")
        assert {r[0] for r in rows} == {"naive", "mdp-optimal"} and {r[3] for r in rows} == {7}

    def test_sweep_json(self, tmp_path):
        text = TINY.format(controllers='["naive"]', horizon=1000, seeds=[1]) + "[sweep]\nmean_harvest = [0.25, 0.5]\n"
        rc = main(["sweep", "--config", self.write(tmp_path, text), "--out", str(tmp_path / "o"), "--format", "json"])
        assert rc == 0 and (tmp_path / "o" / "fig6.json").exists()

    def test_oracle_and_solve(self, tmp_path):
        import json
        path = self.write(tmp_path, TINY.format(controllers='["naive"]', horizon=1000, seeds=[1]))
        assert main(["oracle", "--config", path, "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "oracle.json").read_text())
        assert rep["states"] == 432 and rep["max_row_sum_error"] < 1e-12
        assert rep["optimal"]["average_reward"] == pytest.approx(0.9574, abs=1e-4)
        assert main(["solve-mdp", "--config", path, "--out", str(tmp_path / "o")]) == 0
        _, rows = read_table(tmp_path / "o" / "mdp_policy.csv")
        assert len(rows) == 432

    def test_config_error(self, tmp_path, capsys):
        assert main(["run", "--config", self.write(tmp_path, "[system]\nfoo = 1\n")]) == 1
        assert "system.foo" in capsys.readouterr().err

    def test_runtime_error(self, tmp_path):
        text = TINY.format(controllers='["fixed-policy"]', horizon=100, seeds=[1])
        text = text.replace("snapshot_every = 20", 'snapshot_every = 20\npolicy_file = "missing.json"')
        assert main(["run", "--config", self.write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2

    def test_too_large(self, tmp_path):
        assert main(["oracle", "--out", str(tmp_path / "o")]) == 3
        assert main(["run", "--config", self.write(tmp_path, '[experiment]\ncontrollers = ["mdp-optimal"]\n'),
                     "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("name", ["tiny", "desk", "reference"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    cfg = load_config(Path(__file__).parent.parent / "configs" / f"{name}.toml")
    assert cfg.horizon > cfg.warmup_slots
