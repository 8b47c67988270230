import csv
import json
import subprocess
import sys

import pytest

from ertickets import __version__
from ertickets.cli import main


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out-dir", str(out), "--jobs", "1"])
    return code, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def load(path):
    return json.loads(path.read_text())


class TestSampleMask:
    def test_dense(self, tmp_path):
        code, out = run(tmp_path, "dense", "sample-mask", "--widths", "3,4,2", "--density", "1.0")
        assert code == 0
        mask = load(out / "mask.json")["mask"]
        assert [layer["nnz"] for layer in mask["layers"]] == [12, 8]
        flow = load(out / "flow.json")["flow"]
        assert flow["edges_added"] == 0 and sum(flow["zero_in_degree"]) == 0

    def test_pyramidal_plan(self, tmp_path):
        code, out = run(tmp_path, "pyr", "sample-mask", "--widths", "1,10,1", "--plan", "pyramidal", "--density", "0.5")
        assert code == 0
        p = load(out / "plan.json")["plan"]["p_per_layer"]
        assert p == pytest.approx([0.618034, 0.381966], abs=1e-6)

    def test_byte_identical(self, tmp_path):
        args = ("sample-mask", "--widths", "8,16,4", "--density", "0.2", "--repair", "random-add", "--seed", "3")
        _, a = run(tmp_path, "a", *args)
        _, b = run(tmp_path, "b", *args)
        for name in ("mask.json", "flow.json", "plan.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_meta_embedded(self, tmp_path):
        _, out = run(tmp_path, "m", "sample-mask", "--widths", "3,2", "--density", "0.5", "--seed", "9")
        d = load(out / "mask.json")
        assert d["tool_version"] == __version__
        assert d["command"] == "sample-mask"
        assert d["master_seed"] == 9
        assert d["config"]["density"] == 0.5
        assert "out_dir" not in d["config"]

    def test_config_replay(self, tmp_path):
        _, first = run(tmp_path, "first", "sample-mask", "--widths", "6,6,3", "--density", "0.3", "--seed", "2")
        code, second = run(tmp_path, "second", "sample-mask", "--config", str(first / "mask.json"))
        assert code == 0
        for name in ("mask.json", "flow.json", "plan.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_arch_file_roundtrip(self, tmp_path):
        _, first = run(tmp_path, "first", "sample-mask", "--widths", "3,4,2", "--density", "0.5")
        code, _ = run(tmp_path, "second", "sample-mask", "--arch", str(first / "plan.json"), "--density", "0.5")
        assert code == 0

    def test_infeasible_repair(self, tmp_path):
        code, _ = run(tmp_path, "x", "sample-mask", "--widths", "40,40,1", "--density", "0.0001", "--repair", "reject")
        assert code == 3


class TestProbes:
    def test_lower_bound_row(self, tmp_path):
        code, out = run(
            tmp_path, "lb", "probe-lower-bound", "--p", "0.5", "--d", "1", "--n-grid", "4", "--trials", "1000"
        )
        assert code in (0, 1)
        rows = read_csv(out / "lower_bound.csv")
        assert rows[0]["n"] == "4" and rows[0]["analytic"] == "0.68359375"

    def test_dense_probe_matches_unthinned(self, tmp_path):
        common = ("--epsilon", "0.05", "--n-grid", "4:12:4", "--trials", "200", "--seed", "1")
        _, a = run(tmp_path, "a", "probe-subset-sum", "--p", "1.0", *common)
        _, b = run(tmp_path, "b", "probe-subset-sum", "--p", "0.3", "--no-thinning", *common)
        assert (a / "probe.csv").read_bytes() == (b / "probe.csv").read_bytes()

    def test_malformed_flag(self, tmp_path, capsys):
        assert main(["probe-subset-sum", "--bogus"]) == 2
        assert main(["no-such-command"]) == 2

    def test_domain_error_is_usage(self, tmp_path):
        code, _ = run(tmp_path, "x", "probe-subset-sum", "--p", "1.5", "--n-grid", "4", "--trials", "100")
        assert code == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"p": 0.5, "frobnicate": 1}))
        assert main(["probe-subset-sum", "--config", str(cfg)]) == 2


class TestConstruct:
    def test_wlt_dense(self, tmp_path):
        code, out = run(
            tmp_path, "w", "construct-wlt-fc", "--target-widths", "3,4,2", "--density", "1.0", "--trials", "5"
        )
        assert code == 0
        agg = load(out / "aggregate.json")["aggregate"]
        assert agg["failure_rate"] == 0.0 and agg["trials"] == 5
        assert len(read_csv(out / "reports.csv")) == 5

    def test_wlt_violation_exit(self, tmp_path):
        # a tiny delta with forced sparse input layer makes failures common
        code, out = run(
            tmp_path, "w", "construct-wlt-fc", "--target-widths", "4,6,2", "--density", "0.5",
            "--delta", "0.001", "--input-density", "0.05", "--trials", "20",
        )
        agg = load(out / "aggregate.json")["aggregate"]
        assert (code == 1) == (agg["failure_rate"] > 0.001)

    def test_wlt_conv(self, tmp_path):
        code, out = run(
            tmp_path, "c", "construct-wlt-conv", "--target-channels", "1,2,1", "--density", "1.0", "--trials", "3"
        )
        assert code == 0
        assert load(out / "aggregate.json")["aggregate"]["failures"] == 0

    def test_kind_mismatch(self, tmp_path):
        code, _ = run(tmp_path, "x", "construct-wlt-conv", "--target-widths", "3,2", "--trials", "1")
        assert code == 2

    def test_target_file_and_report_merge(self, tmp_path):
        _, a = run(tmp_path, "a", "construct-wlt-fc", "--target-widths", "3,4,2", "--trials", "6", "--seed", "1")
        code, b = run(
            tmp_path, "b", "construct-wlt-fc", "--target", str(a / "target.json"), "--trials", "6", "--seed", "2"
        )
        assert code in (0, 1)
        assert load(a / "target.json")["target"] == load(b / "target.json")["target"]
        code, merged = run(tmp_path, "m", "report", str(a / "reports.json"), str(b / "reports.json"))
        agg = load(merged / "aggregate.json")["aggregate"]
        assert agg["trials"] == 12
        assert code == (0 if agg["failure_rate"] <= 0.1 else 1)

    def test_slt_block_override(self, tmp_path):
        code, out = run(
            tmp_path, "s", "construct-slt", "--target-widths", "1,1,1", "--target-domain", "0,1", "--zero-bias",
            "--density", "1.0", "--epsilon", "0.5", "--block-sizes", "30,10", "--trials", "3",
        )
        agg = load(out / "aggregate.json")["aggregate"]
        assert code == 0 and agg["failures"] == 0
        assert agg["max_verification_error"] <= 0.5

    def test_slt_needs_zero_bias(self, tmp_path):
        code, _ = run(tmp_path, "s", "construct-slt", "--target-widths", "1,2,1", "--block-sizes", "4,4", "--trials", "1")
        assert code == 2

    def test_jobs_do_not_change_results(self, tmp_path):
        args = ["construct-wlt-fc", "--target-widths", "3,4,2", "--trials", "8", "--seed", "4"]
        main([*args, "--out-dir", str(tmp_path / "one"), "--jobs", "1"])
        main([*args, "--out-dir", str(tmp_path / "two"), "--jobs", "2"])
        for name in ("reports.json", "aggregate.json", "reports.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


class TestTrain:
    small = ("--widths", "4,8,2", "--n-train", "128", "--n-test", "64", "--epochs", "2")

    def test_sgd_zero_lr_flat(self, tmp_path):
        code, out = run(tmp_path, "s", "train-sgd", *self.small, "--lr", "0", "--density", "0.5")
        assert code == 0
        values = {row["loss"] for row in read_csv(out / "curve.csv")}
        assert len(values) == 1

    def test_edge_popup_paired(self, tmp_path):
        code, out = run(
            tmp_path, "e", "train-edge-popup", *self.small, "--density", "0.5", "--end-keep", "0.1",
            "--levels", "3", "--paired-baseline",
        )
        assert code == 0
        assert (out / "curve.csv").exists() and (out / "baseline_curve.csv").exists()
        s = load(out / "summary.json")
        assert s["accuracy_gap"] == pytest.approx(s["baseline_final_accuracy"] - s["final_accuracy"])

    def test_rigl_nnz_constant(self, tmp_path):
        code, out = run(tmp_path, "r", "train-rigl", *self.small, "--density", "0.3", "--update-every", "2")
        assert code == 0
        rows = read_csv(out / "nnz.csv")
        assert len(rows) > 1
        for key in ("nnz_0", "nnz_1"):
            assert len({row[key] for row in rows}) == 1

    def test_teacher_student(self, tmp_path):
        code, out = run(
            tmp_path, "t", "train-sgd", "--widths", "3,16,1", "--dataset", "teacher-student",
            "--teacher-widths", "3,4,1", "--n-train", "256", "--epochs", "3", "--lr", "0.01", "--density", "0.5",
        )
        assert code == 0
        assert "network" in load(out / "network.json")


def test_console_script(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "ertickets.cli", "--version"], capture_output=True, text=True, check=True
    )
    assert __version__ in res.stdout
