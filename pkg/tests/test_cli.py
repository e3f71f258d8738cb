"""Command-line interface: artifacts, exit codes and reproducibility."""

import json
import shutil
import subprocess
import sys

import pytest

from mlcirt import __version__
from mlcirt.synthetic import emit, two_trait_generator
from mlcirt.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, effective_config, main, ConfigError

READING_LOGLIK = [-350474, -329109, -326171, -325516, -324970, -324863, -324764, -324684, -324583]


def write_config(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = write_config(root / "sim.json", {"simulate": {"n": 1500, "seed": 3}})
    assert main(["simulate", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    return root / "data"


@pytest.fixture(scope="module")
def two_trait(tmp_path_factory):
    root = tmp_path_factory.mktemp("tt")
    emit(two_trait_generator(1500, seed=4), root)
    return root


CLUSTER_CONFIG = {"em": {"n_starts": 1, "max_iters": 1500}, "cold_starts": 0}


def data_args(simulated):
    return ["--data", str(simulated / "data.csv"), "--schema", str(simulated / "schema.json")]


class TestSimulate:

    def test_artifacts(self, simulated):
        assert sorted(p.name for p in simulated.iterdir()) == ["data.csv", "schema.json", "truth.json"]
        lines = (simulated / "data.csv").read_text().splitlines()
        assert len(lines) == 1501
        assert lines[0] == "i1,i2,i3,i4,i5,i6,i7,i8,q1"

    def test_provenance(self, simulated):
        truth = json.loads((simulated / "truth.json").read_text())
        assert truth["tool_version"] == __version__
        assert truth["config"]["simulate"] == {"n": 1500, "seed": 3}
        assert truth["config"]["command"] == "simulate"

    def test_seed_flag_overrides(self, tmp_path):
        assert main(["simulate", "--seed", "9", "--out", str(tmp_path)]) == EXIT_OK
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["seed"] == 9 and truth["config"]["em"]["seed"] == 9


class TestFit:

    def test_fit_outputs(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"em": {"n_starts": 2}})
        out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_OK
        record = json.loads((out / "fit.json").read_text())
        assert record["tool_version"] == __version__
        assert record["config"]["em"]["n_starts"] == 2
        assert record["config"]["model"]["dim_of_item"] == "unidimensional"
        assert record["config"]["data"].endswith("data.csv")
        rows = (out / "support_points.csv").read_text().splitlines()
        assert rows[0] == "dimension,items,class_1,class_2"
        assert rows[-1].startswith("weight,")
        weights = [float(x) for x in rows[-1].split(",")[2:]]
        assert sum(weights) == pytest.approx(1.0, abs=1e-9)

    def test_dimension_labels(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {
            "model": {"k": 3, "dim_of_item": [1, 1, 1, 1, 2, 2, 2, 2]}, "em": {"n_starts": 1}})
        out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_OK
        rows = (out / "support_points.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 + 1

    def test_bad_dimension_labels(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"model": {"dim_of_item": [1, 2]}})
        out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()


class TestTestDif:

    def test_outputs(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"em": {"n_starts": 2}})
        out = tmp_path / "dif"
        assert main(["test-dif", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == [
            "dif_coefficients.csv", "dif_test.json", "fit.json"]
        record = json.loads((out / "dif_test.json").read_text())
        assert record["tool_version"] == __version__
        test = record["test"]
        assert test["kind"] == "LR" and test["df"] == 8
        assert test["statistic"] == pytest.approx(
            2 * (record["full"]["loglik"] - record["restricted"]["loglik"]), abs=1e-6)
        # the default generator carries DIF on four items
        assert test["p_value"] < 0.01
        rows = (out / "dif_coefficients.csv").read_text().splitlines()
        assert rows[0] == "item,criterion,group,phi,se,z,stars"
        assert len(rows) == 1 + 8
        assert rows[1].startswith("i1,q1,")

    def test_needs_dif_criterion(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"model": {"dif_criteria": []}})
        out = tmp_path / "dif"
        assert main(["test-dif", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()


class TestSelectK:

    def test_published_replay(self, tmp_path, capsys):
        rows = [{"k": k, "loglik": ll, "n_par": 180 + 31 * (k - 1)}
                for k, ll in enumerate(READING_LOGLIK, start=1)]
        cfg = write_config(tmp_path / "run.json", {"replay": {"n": 21397, "rows": rows}})
        out = tmp_path / "sel"
        assert main(["select-k", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert "best k = 5" in capsys.readouterr().out
        record = json.loads((out / "selection.json").read_text())
        assert record["best_k"] == 5
        assert abs(record["rows"][0]["bic"] - 702743) <= 2
        table = (out / "selection.csv").read_text().splitlines()
        assert table[0] == "k,loglik,n_par,BIC" and len(table) == 10

    def test_bad_replay(self, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"replay": {"rows": [{"k": 1}]}})
        assert main(["select-k", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_INVALID

    def test_fitting_path(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {
            "model": {"k_range": [1, 2, 3], "dim_of_item": "unidimensional"}, "em": {"n_starts": 2}})
        out = tmp_path / "sel"
        assert main(["select-k", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_OK
        record = json.loads((out / "selection.json").read_text())
        assert record["best_k"] == 2


class TestCluster:

    @pytest.mark.parametrize("model", [{"k": 2}, {"k": 3, "rasch_mode": True},
                                       {"k": 3, "dim_of_item": "unidimensional"}])
    def test_invalid_setups(self, simulated, tmp_path, model):
        cfg = write_config(tmp_path / "run.json", {"model": model})
        out = tmp_path / "cl"
        assert main(["cluster", "--config", cfg, *data_args(simulated), "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()

    def test_two_trait_run(self, two_trait, tmp_path):
        cfg = write_config(tmp_path / "run.json", CLUSTER_CONFIG)
        out = tmp_path / "cl"
        assert main(["cluster", "--config", cfg, *data_args(two_trait), "--out", str(out)]) == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == [
            "cut.json", "dendrogram.json", "dendrogram.newick", "dendrogram.tsv", "support_points.csv"]
        cut = json.loads((out / "cut.json").read_text())
        assert cut["s"] == 2 and cut["cut_step"] == 6 and cut["complete"]
        assert cut["partition"] == [["i1", "i2", "i3", "i4"], ["i5", "i6", "i7", "i8"]]
        dendro = json.loads((out / "dendrogram.json").read_text())
        assert dendro["tool_version"] == __version__ and dendro["config"]["cold_starts"] == 0
        assert len((out / "dendrogram.tsv").read_text().splitlines()) == 8
        rows = (out / "support_points.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 + 1

    def test_format_selection(self, two_trait, tmp_path):
        cfg = write_config(tmp_path / "run.json", {**CLUSTER_CONFIG, "formats": ["newick"]})
        out = tmp_path / "cl"
        assert main(["cluster", "--config", cfg, *data_args(two_trait), "--out", str(out)]) == EXIT_OK
        assert not (out / "dendrogram.tsv").exists()
        assert (out / "dendrogram.newick").read_text().endswith(";\n")

    def test_unknown_format(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"formats": ["tsv", "png"]})
        assert main(["cluster", "--config", cfg, *data_args(simulated),
                     "--out", str(tmp_path / "cl")]) == EXIT_INVALID


class TestValidation:

    def test_missing_schema_leaves_nothing(self, simulated, tmp_path):
        out = tmp_path / "fit"
        code = main(["fit", "--data", str(simulated / "data.csv"),
                     "--schema", str(tmp_path / "absent.json"), "--out", str(out)])
        assert code == EXIT_INVALID
        assert not out.exists()

    def test_unknown_config_key(self, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"modle": {}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_INVALID

    def test_unreadable_config(self, tmp_path):
        bad = tmp_path / "run.json"
        bad.write_text("{not json", encoding="utf-8")
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INVALID

    def test_bad_em_settings(self, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"em": {"tol_loglik": -1}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_INVALID

    def test_effective_config_layers(self):
        cfg = effective_config("fit", {"out": "a", "em": {"seed": 4}}, {"out": "b", "data": None})
        assert cfg["out"] == "b" and cfg["em"]["seed"] == 4 and cfg["em"]["n_starts"] == 5
        assert cfg["model"]["k"] == 2
        with pytest.raises(ConfigError):
            effective_config("fit", {"model": {"k_range": [3, 2]}}, {})

    def test_exit_code_constants(self):
        assert (EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL) == (0, 2, 3)


class TestDeterminism:

    def test_byte_identical_tables(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "run.json", {"em": {"n_starts": 2}})
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["test-dif", "--config", cfg, *data_args(simulated),
                         "--out", str(out / "dif")]) == EXIT_OK
            assert main(["simulate", "--seed", "5", "--out", str(out / "sim")]) == EXIT_OK
            outs.append(out)
        for rel in ("dif/dif_coefficients.csv", "sim/data.csv"):
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()

    def test_byte_identical_dendrogram(self, two_trait, tmp_path):
        cfg = write_config(tmp_path / "run.json", {**CLUSTER_CONFIG, "formats": ["tsv", "newick"]})
        for run in ("a", "b"):
            assert main(["cluster", "--config", cfg, *data_args(two_trait),
                         "--out", str(tmp_path / run)]) == EXIT_OK
        for name in ("dendrogram.tsv", "dendrogram.newick", "support_points.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.skipif(shutil.which("mlcirt") is None, reason="console script not installed")
    def test_console_script(self, tmp_path):
        proc = subprocess.run(["mlcirt", "simulate", "--seed", "1", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_OK, proc.stderr
        assert (tmp_path / "data.csv").exists()

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mlcirt.cli", "fit", "--out", str(tmp_path / "o")],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_INVALID
        assert "invalid input" in proc.stderr
