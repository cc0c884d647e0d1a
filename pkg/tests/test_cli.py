import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revshield.cli import main
from revshield.config import ConfigError, apply_overrides, default_config, load_config, parse_config_text
from revshield.experiment import (
    SEED_COLUMNS,
    aggregate,
    aggregate_cell,
    load_manifest,
    moving_average,
    parse_manifest,
    read_aggregate,
    read_seed_csv,
    read_summary,
    run_experiment,
)

TINY = {"train.episodes": 2, "train.timesteps": 8}


def write_manifest(tmp_path, cells, window=2):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"out": "out", "window": window, "workers": 1, "cells": cells}))
    return path


def full_matrix(seeds=(0, 1, 2)):
    return [
        {"env": e, "shield": s, "seeds": list(seeds), "overrides": TINY}
        for e in ("cartpole", "nav2d")
        for s in ("none", "savmpc", "oracle")
    ]


@pytest.fixture(scope="module")
def matrix_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("matrix")
    manifest = write_manifest(tmp, full_matrix())
    assert main(["experiment", "--manifest", str(manifest)]) == 0
    return tmp, manifest


class TestExperiment:
    def test_counting_contract(self, matrix_run):
        tmp, _ = matrix_run
        out = tmp / "out"
        assert len(list(out.glob("*/*/seed_*.csv"))) == 18
        assert len(list(out.glob("*/*/seed_*.json"))) == 18
        assert len(list(out.glob("*/*/aggregate.csv"))) == 6
        assert len(list(out.glob("*/plots/*.svg"))) == 6

    def test_seed_csv_schema(self, matrix_run):
        tmp, _ = matrix_run
        for path in (tmp / "out").glob("*/*/seed_*.csv"):
            raw = path.read_bytes()
            assert b"\r" not in raw
            assert raw.split(b"\n")[0] == b",".join(c.encode() for c in SEED_COLUMNS)
            d = read_seed_csv(path)
            assert len(d["episode"]) == 2
            assert np.all(np.diff(d["cum_violations"]) >= 0) and np.all(np.diff(d["cum_aborts"]) >= 0)
            np.testing.assert_array_equal(d["cum_violations"], np.cumsum(d["violated"]))
            np.testing.assert_array_equal(d["cum_aborts"], np.cumsum(d["aborted"]))

    def test_shielded_cells_never_violate(self, matrix_run):
        tmp, _ = matrix_run
        for shield in ("savmpc", "oracle"):
            for path in (tmp / "out").glob(f"*/{shield}/seed_*.csv"):
                assert read_seed_csv(path)["violated"].sum() == 0

    def test_summaries_match_csvs(self, matrix_run):
        tmp, _ = matrix_run
        for cell_dir in (tmp / "out").glob("*/*"):
            if cell_dir.name == "plots":
                continue
            for seed in (0, 1, 2):
                d = read_seed_csv(cell_dir / f"seed_{seed}.csv")
                s = read_summary(cell_dir, seed)
                assert s["episodes"] == len(d["episode"]) and s["env_steps"] == d["steps"].sum()
                assert s["violations"] == d["violated"].sum() and s["aborts"] == d["aborted"].sum()
                assert s["plan_failures"] == 0

    def test_rerun_is_idempotent(self, matrix_run):
        tmp, manifest = matrix_run
        out = tmp / "out"
        before = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in out.glob("*/*/seed_*.csv")}
        aggs = {p: p.read_bytes() for p in out.glob("*/*/aggregate.csv")}
        assert main(["experiment", "--manifest", str(manifest)]) == 0
        for p, (mtime, data) in before.items():
            assert p.stat().st_mtime_ns == mtime and p.read_bytes() == data
        for p, data in aggs.items():
            assert p.read_bytes() == data

    def test_forced_rerun_is_byte_identical(self, matrix_run):
        tmp, _ = matrix_run
        cells = [c for c in full_matrix() if c["shield"] == "savmpc" and c["env"] == "cartpole"]
        again = tmp / "again"
        again.mkdir()
        manifest = write_manifest(again, cells)
        run_experiment(load_manifest(manifest), force=True, plot=False)
        for seed in (0, 1, 2):
            a = (tmp / "out" / "cartpole" / "savmpc" / f"seed_{seed}.csv").read_bytes()
            b = (tmp / "again" / "out" / "cartpole" / "savmpc" / f"seed_{seed}.csv").read_bytes()
            assert a == b

    def test_force_retrains(self, tmp_path):
        manifest = write_manifest(tmp_path, [{"env": "cartpole", "shield": "none", "seeds": [5], "overrides": TINY}])
        assert main(["experiment", "--manifest", str(manifest), "--no-plots"]) == 0
        path = tmp_path / "out" / "cartpole" / "none" / "seed_5.csv"
        stale = ",".join(SEED_COLUMNS) + "\n0,1,12345.0,0,0,0,0\n"
        path.write_text(stale)
        assert main(["experiment", "--manifest", str(manifest), "--no-plots"]) == 0
        assert path.read_text() == stale
        assert main(["experiment", "--manifest", str(manifest), "--no-plots", "--force"]) == 0
        assert 12345.0 not in read_seed_csv(path)["reward"]


class TestManifest:
    def test_default_and_full_seeds(self):
        cells = [{"env": "cartpole", "shield": "none"}]
        assert parse_manifest({"cells": cells}).cells[0].seeds == (0, 1, 2)
        assert parse_manifest({"cells": cells}, full=True).cells[0].seeds == tuple(range(10))

    @pytest.mark.parametrize(
        "cells",
        [
            [],
            [{"env": "mujoco", "shield": "none"}],
            [{"env": "cartpole", "shield": "magic"}],
            [{"env": "cartpole", "shield": "none", "seeds": []}],
            [{"env": "cartpole", "shield": "none", "seeds": [1, 1]}],
            [{"env": "cartpole", "shield": "none"}, {"env": "cartpole", "shield": "none"}],
        ],
    )
    def test_invalid_manifests(self, cells):
        with pytest.raises(ConfigError):
            parse_manifest({"cells": cells})

    def test_cli_reports_invalid_cell(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path, [{"env": "cartpole", "shield": "bogus"}])
        assert main(["experiment", "--manifest", str(manifest)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        m = parse_manifest({"out": str(blocker / "sub"), "cells": [{"env": "cartpole", "shield": "none"}]})
        with pytest.raises(ConfigError):
            run_experiment(m)


class TestAggregate:
    def test_single_seed_has_zero_std(self):
        agg = aggregate([np.arange(10.0)], 3)
        assert not agg.std.any()

    def test_two_constant_series_closed_form(self):
        agg = aggregate([np.full(7, 2.0), np.full(7, 5.0)], 4)
        np.testing.assert_allclose(agg.mean, 3.5)
        np.testing.assert_allclose(agg.std, abs(2.0 - 5.0) / 2)
        # population std of two points
        assert agg.std[0] == pytest.approx(np.std([2.0, 5.0]))

    def test_window_one_is_identity(self):
        x = np.random.default_rng(0).normal(size=20)
        np.testing.assert_array_equal(aggregate([x], 1).mean, x)

    def test_moving_average_values(self):
        np.testing.assert_allclose(moving_average([1.0, 2.0, 3.0, 4.0], 2), [1.0, 1.5, 2.5, 3.5])

    def test_short_series_are_padded(self):
        agg = aggregate([np.array([1.0, 1.0, 1.0]), np.array([3.0])], 1)
        np.testing.assert_allclose(agg.mean, [2.0, 2.0, 2.0])

    def test_empty_input(self):
        with pytest.raises(ValueError):
            aggregate([], 3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5), min_size=1, max_size=5), st.integers(1, 6))
    def test_std_nonnegative_and_mean_bounded(self, series, window):
        agg = aggregate([np.array(s) for s in series], window)
        assert np.all(agg.std >= 0)
        lo = min(min(s) for s in series)
        hi = max(max(s) for s in series)
        assert np.all(agg.mean >= lo - 1e-9) and np.all(agg.mean <= hi + 1e-9)

    def test_constant_reward_cell_has_zero_std(self, tmp_path, capsys):
        cell = tmp_path / "cell"
        cell.mkdir()
        for seed in (1, 2):
            rows = ["episode,steps,reward,violated,aborted,cum_violations,cum_aborts"]
            rows += [f"{i},10,-10.0,0,0,0,0" for i in range(5)]
            (cell / f"seed_{seed}.csv").write_text("\n".join(rows) + "\n")
        assert main(["aggregate", "--cell", str(cell), "--window", "3"]) == 0
        agg = read_aggregate(cell / "aggregate.csv")
        assert not agg["reward_std"].any() and np.all(agg["reward_mean"] == -10.0)
        assert agg["env_steps_mean"].tolist() == [10.0, 20.0, 30.0, 40.0, 50.0]
        assert capsys.readouterr().out.strip().endswith("aggregate.csv")

    def test_aggregate_cell_without_seeds(self, tmp_path):
        with pytest.raises(ValueError):
            aggregate_cell(tmp_path, 3)


class TestConfigFiles:
    def test_parse_lines(self):
        text = "# comment\n\nmppi.T = 15\nmppi.delta = 0.2\ncartpole.lambda = 3\ntrain.E = 10\nnav.region = (-4, 4, -4, 4)\ntrain.audit_plans = false\n"
        cfg = apply_overrides(default_config("cartpole", "savmpc"), parse_config_text(text))
        assert cfg.mppi.horizon == 15 and cfg.mppi.delta == 0.2
        assert cfg.cartpole.reward_scale == 3.0 and isinstance(cfg.cartpole.reward_scale, float)
        assert cfg.episodes == 10 and cfg.nav.region == (-4.0, 4.0, -4.0, 4.0)
        assert cfg.audit_plans is False

    @pytest.mark.parametrize(
        "text", ["mppi.T", "nokey = 3", "bogus.x = 1", "mppi.bogus = 1", "mppi.delta = -1", "train.E = 0", "train.update_mode = 'weekly'"]
    )
    def test_bad_config(self, text):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), parse_config_text(text))

    def test_command_line_wins(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.seed = 99\ntrain.env = 'nav2d'\ntrain.E = 3\n", encoding="utf-8")
        cfg = load_config(path, "cartpole", "oracle", 4)
        assert (cfg.env, cfg.shield, cfg.seed, cfg.episodes) == ("cartpole", "oracle", 4, 3)

    def test_train_command(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("train.E = 2\ntrain.N_timesteps = 5\n")
        out = tmp_path / "run"
        argv = ["train", "--env", "nav2d", "--shield", "savmpc", "--seed", "1", "--config", str(cfg), "--out", str(out)]
        assert main(argv) == 0
        d = read_seed_csv(out / "seed_1.csv")
        assert len(d["episode"]) == 2 and np.all(d["steps"] <= 5)
        assert (out / "seed_1.params").exists()
        assert capsys.readouterr().out.strip() == str(out / "seed_1.csv")

    def test_bad_choice_exits(self):
        with pytest.raises(SystemExit):
            main(["train", "--env", "pong", "--shield", "none", "--seed", "0"])


def test_manifest_file_round_trip(tmp_path):
    path = write_manifest(tmp_path, full_matrix(seeds=(4, 7)), window=5)
    m = load_manifest(path)
    assert m.out == tmp_path / "out" and m.window == 5 and m.workers == 1
    assert len(m.cells) == 6 and all(c.seeds == (4, 7) for c in m.cells)
