"""Pipeline staging, config validation, and the command-line front end.

Most tests run against a periodic 16x16 decaying-vortex case with one
mode each for velocity, pressure, and supremizers.  Every stage then
finishes in well under a second, and because the working rank equals
the data rank the exact correction series are identically zero, which
makes rank selection and the model matrix fully deterministic.
"""

import csv
import hashlib
import json
import os
import types

import numpy as np
import pytest

from romlab import cli
from romlab.archive import load_archive
from romlab.pipeline import (MATRIX_ROWS, STAGES, ConfigError, Pipeline,
                             load_config)


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)


def write_config(path, sections):
    lines = []
    for name, table in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {_toml_value(v)}" for key, v in table.items())
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def tg_sections(outdir, **over):
    sections = {
        "fom": {"scenario": "taylor-green", "nx": 16, "ny": 16, "nu": 0.05,
                "dt": 0.01, "n_steps": 100, "save_every": 5,
                "spinup_steps": 0},
        "pod": {"n_u": 1, "n_p": 1, "n_sup": 1, "d": 1, "d_p": 1},
        "fit": {"rank_grid": [0, 1]},
        "rom": {"formulation": "SUP", "scheme": "implicit-euler", "c_u": 1},
        "output": {"directory": str(outdir)},
    }
    for section, table in over.items():
        sections.setdefault(section, {}).update(table)
    return sections


def mini_cfg(tmp_path, **over):
    path = write_config(tmp_path / "mini.toml",
                        tg_sections(tmp_path / "mini_out", **over))
    return load_config(path)


def tree_hash(root):
    digests = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                digests[os.path.relpath(path, root)] = \
                    hashlib.sha256(fh.read()).hexdigest()
    return digests


# ---------------------------------------------------------------------------
# configuration loading


class TestConfigLoading:
    def test_defaults_fill_missing_sections(self, tmp_path):
        path = write_config(tmp_path / "bare.toml",
                            {"output": {"directory": str(tmp_path / "o")}})
        cfg = load_config(path)
        assert cfg["fom"]["scenario"] == "channel-obstacle"
        assert cfg["pod"]["d"] == 20
        assert cfg["rom"]["formulation"] == "SUP"
        assert cfg["rom"]["tau_pen"] == 1000.0
        assert cfg["fit"]["sup_pressure"] == "joint"
        der = cfg["_derived"]
        assert der["cadence"] == pytest.approx(0.04)
        assert der["window"] == pytest.approx(12.0)
        assert der["horizon"] == pytest.approx(12.0)
        assert der["train_time"] == pytest.approx(6.0)
        assert der["stride"] == 1

    def test_rom_dt_stride(self, tmp_path):
        cfg = mini_cfg(tmp_path, rom={"dt": 0.1})
        assert cfg["_derived"]["cadence"] == pytest.approx(0.05)
        assert cfg["_derived"]["stride"] == 2
        assert cfg["_derived"]["dt_rom"] == pytest.approx(0.1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[fom\nscenario =", encoding="utf-8")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(path)

    def test_section_must_be_table(self, tmp_path):
        path = tmp_path / "flat.toml"
        path.write_text('fom = 3\n[output]\ndirectory = "x"\n',
                        encoding="utf-8")
        with pytest.raises(ConfigError, match="must be a table"):
            load_config(path)

    @pytest.mark.parametrize("over,match", [
        ({"pod": {"n_u": 0}}, "positive integer"),
        ({"pod": {"n_u": 5, "d": 3}}, "n_u must not exceed d"),
        ({"pod": {"n_p": 7, "d_p": 2}}, "n_p must not exceed d_p"),
        ({"rom": {"formulation": "QGC"}}, "formulation"),
        ({"rom": {"scheme": "leapfrog"}}, "scheme"),
        ({"rom": {"c_p2": 2}}, "c_p2 must be 0 or 1"),
        ({"rom": {"tau_pen": -1.0}}, "tau_pen"),
        ({"fit": {"sup_pressure": "solo"}}, "sup_pressure"),
        ({"fit": {"ppe_pressure": "solo"}}, "ppe_pressure"),
        ({"fit": {"ppe_full": "solo"}}, "ppe_full"),
        ({"fit": {"rank_grid": [3, -1]}}, "rank_grid"),
        ({"fit": {"rank_grid": "dense"}}, "rank_grid"),
        ({"rom": {"horizon": 2.5}}, "horizon exceeds"),
        ({"fit": {"train_time": 9.0}}, "train_time"),
        ({"rom": {"dt": 0.07}}, "multiple of the snapshot cadence"),
        ({"fom": {"bogus": 1}}, "unknown keys"),
        ({"fom": {"scenario": "pipe"}}, r"\[fom\]"),
        ({"junk": {"x": 1}}, "unknown config sections"),
    ])
    def test_rejects_bad_values(self, tmp_path, over, match):
        path = write_config(tmp_path / "bad.toml",
                            tg_sections(tmp_path / "o", **over))
        with pytest.raises(ConfigError, match=match):
            load_config(path)

    def test_obstacle_list_accepted(self, tmp_path):
        over = {"fom": {"scenario": "channel-obstacle", "nx": 32, "ny": 16,
                        "nu": 2e-3, "dt": 2e-3, "n_steps": 50,
                        "save_every": 5, "obstacle": [7, 5, 4, 4]}}
        cfg = mini_cfg(tmp_path, **over)
        assert cfg["fom"]["obstacle"] == [7, 5, 4, 4]


# ---------------------------------------------------------------------------
# mode-count clipping and the supremizer warning


class TestModeClipping:
    def test_supremizer_deficit_warns_and_proceeds(self, tmp_path, capsys):
        cfg = mini_cfg(tmp_path, pod={"n_u": 2, "n_p": 2, "d": 4, "d_p": 4})
        bases = {"vel": types.SimpleNamespace(n_modes=4),
                 "chi": types.SimpleNamespace(n_modes=4),
                 "sup": types.SimpleNamespace(n_modes=1)}
        assert Pipeline(cfg)._dims(bases) == (2, 2, 1)
        assert "may be unstable" in capsys.readouterr().err

    def test_rank_deficit_clips_with_warning(self, tmp_path, capsys):
        cfg = mini_cfg(tmp_path, pod={"n_u": 3, "n_p": 2, "n_sup": 3,
                                      "d": 4, "d_p": 4})
        bases = {"vel": types.SimpleNamespace(n_modes=2),
                 "chi": types.SimpleNamespace(n_modes=2),
                 "sup": types.SimpleNamespace(n_modes=3)}
        assert Pipeline(cfg)._dims(bases) == (2, 2, 3)
        assert "clipped" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# one staged run end to end, shared by the reuse tests below


@pytest.fixture(scope="module")
def tg_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tgrun")
    root = base / "out"
    config = write_config(base / "run.toml", tg_sections(root))
    rc = cli.main(["pipeline", "--config", str(config)])
    assert rc == 0
    return {"config": config, "root": root, "base": base}


class TestStagedRun:
    def test_artifacts_exist(self, tg_run):
        root = tg_run["root"]
        for stage in STAGES:
            assert (root / f"{stage}.rom" / "manifest.json").is_file()
        for name in ("errors.csv", "reconstruction.csv", "metrics.json"):
            assert (root / name).is_file()

    def test_state_records_the_hash_chain(self, tg_run):
        state = json.loads((tg_run["root"] / "state.json").read_text())
        cfg = load_config(tg_run["config"])
        assert state == Pipeline(cfg)._hashes()

    def test_generate_archive_contents(self, tg_run):
        entries, meta = load_archive(tg_run["root"] / "generate.rom")
        n_cells = 16 * 16  # periodic box: every cell is fluid
        assert entries["velocity"].shape == (20, 2 * n_cells)
        assert entries["pressure"].shape == (20, n_cells)
        times = entries["times"].ravel()
        assert times[0] == pytest.approx(0.05)
        assert meta["fom"]["scenario"] == "taylor-green"

    def test_metrics_summary(self, tg_run):
        summary = json.loads((tg_run["root"] / "metrics.json").read_text())
        assert set(summary) == {"error_metric_u", "error_metric_p",
                                "eps_u_final", "eps_p_final"}
        assert all(np.isfinite(v) for v in summary.values())

    def test_rerun_skips_and_changes_nothing(self, tg_run):
        before = tree_hash(tg_run["root"])
        logs = []
        Pipeline(load_config(tg_run["config"]), log=logs.append).run_all()
        assert len(logs) == len(STAGES)
        assert all(line.startswith("[skip]") for line in logs)
        assert tree_hash(tg_run["root"]) == before

    def test_cli_single_stage_on_fresh_state_skips(self, tg_run, capsys):
        assert cli.main(["pod", "--config", str(tg_run["config"])]) == 0
        assert "[skip] pod" in capsys.readouterr().out

    def test_force_reruns_stage_and_invalidates_downstream(self, tg_run,
                                                           capsys):
        rc = cli.main(["pod", "--config", str(tg_run["config"]), "--force"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "[skip] generate" in out
        assert "[done] pod" in out
        state = json.loads((tg_run["root"] / "state.json").read_text())
        assert set(state) == {"generate", "pod"}
        logs = []
        Pipeline(load_config(tg_run["config"]), log=logs.append).run_all()
        assert [line.split()[0] for line in logs] == \
            ["[skip]", "[skip]", "[done]", "[done]", "[done]", "[done]"]

    def test_config_change_invalidates_dependent_stages(self, tg_run):
        # tau_pen feeds the assemble hash, so generate and pod stay fresh
        config = write_config(tg_run["base"] / "tau.toml",
                              tg_sections(tg_run["root"],
                                          rom={"tau_pen": 500.0}))
        logs = []
        Pipeline(load_config(config), log=logs.append).run_all()
        assert [line.split()[0] for line in logs] == \
            ["[skip]", "[skip]", "[done]", "[done]", "[done]", "[done]"]
        # restore the original chain for the export tests
        logs = []
        Pipeline(load_config(tg_run["config"]), log=logs.append).run_all()
        assert [line.split()[0] for line in logs] == \
            ["[skip]", "[skip]", "[done]", "[done]", "[done]", "[done]"]


class TestExports:
    def test_export_all(self, tg_run, capsys):
        rc = cli.main(["export", "--config", str(tg_run["config"])])
        assert rc == 0
        plots = tg_run["root"] / "plots"
        for name in ("error_vs_time.dat", "error_vs_time.gp",
                     "eigen_decay_u.dat", "eigen_decay_p.dat",
                     "eigen_decay.gp", "metric_vs_rank_u.dat",
                     "metric_vs_rank.gp"):
            assert (plots / name).is_file()

    def test_error_data_matches_evaluate_csv(self, tg_run):
        with open(tg_run["root"] / "errors.csv", newline="",
                  encoding="utf-8") as fh:
            csv_rows = list(csv.reader(fh))[1:]
        dat = np.loadtxt(tg_run["root"] / "plots" / "error_vs_time.dat")
        assert dat.shape == (len(csv_rows), 3)
        np.testing.assert_allclose(dat[:, 0],
                                   [float(r[0]) for r in csv_rows],
                                   rtol=1e-12)

    def test_eigen_data(self, tg_run):
        dat = np.loadtxt(tg_run["root"] / "plots" / "eigen_decay_u.dat",
                         ndmin=2)
        assert dat.shape == (1, 2)  # one retained velocity mode
        assert dat[0, 0] == 1.0
        assert dat[0, 1] > 0.0

    def test_rank_table_includes_rank_zero(self, tg_run):
        dat = np.loadtxt(tg_run["root"] / "plots" / "metric_vs_rank_u.dat",
                         ndmin=2)
        assert dat[:, 0].tolist() == [0.0, 1.0]
        assert np.all(np.isfinite(dat[:, 1]))
        # the exact correction is zero here, so every rank scores the same
        np.testing.assert_allclose(dat[1, 1], dat[0, 1], rtol=1e-12)

    def test_export_subset(self, tg_run, capsys):
        import shutil
        plots = tg_run["root"] / "plots"
        shutil.rmtree(plots)
        rc = cli.main(["export", "--config", str(tg_run["config"]),
                       "--which", "eigen"])
        assert rc == 0
        assert (plots / "eigen_decay_u.dat").is_file()
        assert not (plots / "error_vs_time.dat").exists()

    def test_unknown_selection_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="export selection"):
            Pipeline(mini_cfg(tmp_path)).export(which="spectra")

    def test_export_before_evaluate_is_an_io_error(self, tmp_path, capsys):
        config = write_config(tmp_path / "fresh.toml",
                              tg_sections(tmp_path / "fresh_out"))
        rc = cli.main(["export", "--config", str(config)])
        assert rc == cli.EXIT_IO
        assert "error [io]" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# exit codes


class TestCliErrors:
    def test_missing_config(self, tmp_path, capsys):
        rc = cli.main(["pipeline", "--config", str(tmp_path / "gone.toml")])
        assert rc == cli.EXIT_CONFIG
        assert "error [config]" in capsys.readouterr().err

    def test_bad_value(self, tmp_path, capsys):
        config = write_config(tmp_path / "bad.toml",
                              tg_sections(tmp_path / "o",
                                          rom={"formulation": "XYZ"}))
        rc = cli.main(["pipeline", "--config", str(config)])
        assert rc == cli.EXIT_CONFIG
        assert "formulation" in capsys.readouterr().err

    def test_numerical_failure(self, tmp_path, capsys, monkeypatch):
        from romlab.pipeline import NumericalError

        def boom(self):
            raise NumericalError("reduced model diverged at step 3")

        monkeypatch.setattr(Pipeline, "generate", boom)
        config = write_config(tmp_path / "run.toml",
                              tg_sections(tmp_path / "o"))
        rc = cli.main(["generate", "--config", str(config)])
        assert rc == cli.EXIT_NUMERICAL
        assert "error [numerical]" in capsys.readouterr().err

    def test_linalg_failure(self, tmp_path, capsys, monkeypatch):
        def boom(self):
            raise np.linalg.LinAlgError("singular matrix")

        monkeypatch.setattr(Pipeline, "generate", boom)
        config = write_config(tmp_path / "run.toml",
                              tg_sections(tmp_path / "o"))
        rc = cli.main(["generate", "--config", str(config)])
        assert rc == cli.EXIT_NUMERICAL

    def test_unwritable_output_directory(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory", encoding="utf-8")
        config = write_config(tmp_path / "run.toml",
                              tg_sections(blocker / "out"))
        rc = cli.main(["generate", "--config", str(config)])
        assert rc == cli.EXIT_IO
        assert "error [io]" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# worker-count resolution


class TestJobs:
    def test_env_sets_the_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROMLAB_JOBS", "4")
        assert Pipeline(mini_cfg(tmp_path)).jobs == 4

    @pytest.mark.parametrize("value", ["", "garbage", "0", "-3"])
    def test_bad_env_falls_back_to_serial(self, tmp_path, monkeypatch, value):
        monkeypatch.setenv("ROMLAB_JOBS", value)
        assert Pipeline(mini_cfg(tmp_path)).jobs == 1

    def test_explicit_jobs_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROMLAB_JOBS", "4")
        assert Pipeline(mini_cfg(tmp_path), jobs=2).jobs == 2


# ---------------------------------------------------------------------------
# the model matrix


@pytest.fixture(scope="module")
def matrix_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tgmatrix")
    root = base / "out"
    config = write_config(base / "run.toml", tg_sections(root))
    rc = cli.main(["matrix", "--config", str(config)])
    assert rc == 0
    with open(root / "matrix.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {"root": root, "rows": rows}


class TestMatrix:
    def test_every_row_is_present_in_order(self, matrix_run):
        names = [row["model"] for row in matrix_run["rows"]]
        assert names == [name for name, _, _ in MATRIX_ROWS]

    def test_no_row_diverges(self, matrix_run):
        for row in matrix_run["rows"]:
            assert row["diverged"] == "0"
            assert float(row["eps_u"]) >= 0.0
            assert float(row["eps_p"]) >= 0.0

    def test_zero_rank_correction_matches_baseline(self, matrix_run):
        # with zero exact series the searched rank is 0 and the corrected
        # model must reproduce the uncorrected trajectory
        byname = {row["model"]: row for row in matrix_run["rows"]}
        assert float(byname["SUP-U"]["eps_u"]) == \
            pytest.approx(float(byname["SUP"]["eps_u"]), rel=1e-12)
        assert float(byname["PPE-DG"]["eps_p"]) == \
            pytest.approx(float(byname["PPE"]["eps_p"]), rel=1e-12)

    def test_flag_columns(self, matrix_run):
        byname = {row["model"]: row for row in matrix_run["rows"]}
        assert byname["PPE"]["flags"] == "c_D=0;c_G=0;c_u=0"
        assert byname["SUP-P1"]["flags"] == "c_p1=1;c_p2=0;c_u=0"

    def test_row_archive_holds_trajectories_and_tables(self, matrix_run):
        entries, meta = load_archive(matrix_run["root"] / "matrix.rom")
        assert len(meta["rows"]) == len(MATRIX_ROWS)
        assert meta["rows"][0]["name"] == "SUP"
        a0 = entries["row0_a"]
        assert a0.shape[0] == entries["row0_times"].ravel().size
        assert "row1_ranktable_u" in entries  # SUP-U searched a table
