"""CLI contract: flags, exit codes, determinism, report structure."""

import numpy as np
import pandas as pd
import pytest

from addsubhaz.cli import main
from addsubhaz.report import parse_machine_block


@pytest.fixture(scope="module")
def sim_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    rc = main([
        "simulate", "--model", "m1", "--n", "30", "--m", "6", "--rho", "0.5",
        "--theta", "0.7", "--beta1", "1.0", "--beta2", "0.2", "--gamma", "0.35",
        "--seed", "7", "--output", str(path),
    ])
    assert rc == 0
    return path


class TestSimulate:
    def test_row_count_and_truth_columns(self, tmp_path):
        out = tmp_path / "d.csv"
        rc = main([
            "simulate", "--n", "10", "--m", "4", "--gamma", "0.35",
            "--seed", "1", "--truth", "--output", str(out),
        ])
        assert rc == 0
        df = pd.read_csv(out, comment="#")
        assert len(df) == 40
        for col in ("cluster", "time", "status", "x1", "ctime", "true_time",
                    "true_cause", "frailty"):
            assert col in df.columns

    def test_invalid_rho_exits_2(self, tmp_path):
        rc = main([
            "simulate", "--n", "10", "--m", "4", "--rho", "1.5",
            "--gamma", "0.35", "--output", str(tmp_path / "x.csv"),
        ])
        assert rc == 2

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["simulate", "--n", "10", "--m", "4", "--gamma", "0.35", "--seed", "3"]
        assert main(args + ["--output", str(a)]) == 0
        assert main(args + ["--output", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestFit:
    def test_report_structure_and_determinism(self, sim_file, tmp_path):
        out1, out2 = tmp_path / "f1.txt", tmp_path / "f2.txt"
        args = [
            "fit", "--input", str(sim_file), "--cause", "1", "--mode", "ipcw",
            "--basis", "exp-decay", "--variance", "cluster",
        ]
        assert main(args + ["--output", str(out1)]) == 0
        assert main(args + ["--output", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        payload = parse_machine_block(out1.read_text())
        assert payload["kind"] == "fit"
        assert len(payload["beta"]) == 1
        assert len(payload["robust_se"]) == 1
        assert payload["manifest"]["options"]["cause"] == 1
        assert list(payload["manifest"]["input_digests"]) == [str(sim_file)]

    def test_cc_mode_without_ctime_exits_2(self, tmp_path):
        path = tmp_path / "nocc.csv"
        path.write_text(
            "cluster,time,status,x1\na,1,1,0.2\na,2,0,0.4\nb,1.5,2,0.7\nb,2.5,1,0.1\n"
        )
        rc = main(["fit", "--input", str(path), "--mode", "cc"])
        assert rc == 2

    def test_singular_design_exits_3(self, tmp_path):
        path = tmp_path / "flat.csv"
        path.write_text(
            "cluster,time,status,x1\na,1,1,0.5\na,2,0,0.5\nb,1.5,2,0.5\nb,2.5,1,0.5\n"
        )
        rc = main(["fit", "--input", str(path)])
        assert rc == 3

    def test_individual_variance_flag(self, sim_file, tmp_path):
        out = tmp_path / "ind.txt"
        rc = main([
            "fit", "--input", str(sim_file), "--basis", "exp-decay",
            "--variance", "individual", "--output", str(out),
        ])
        assert rc == 0
        assert parse_machine_block(out.read_text())["clustering"] == "by_individual"


class TestGof:
    def test_draw_floor_enforced(self, sim_file):
        rc = main([
            "gof", "--input", str(sim_file), "--draws", "0",
            "--basis", "exp-decay",
        ])
        assert rc == 2

    def test_report_and_trace_export(self, sim_file, tmp_path):
        out = tmp_path / "g.txt"
        trace = tmp_path / "trace.csv"
        rc = main([
            "gof", "--input", str(sim_file), "--basis", "exp-decay",
            "--test", "additivity", "--covariate", "all", "--draws", "150",
            "--seed", "5", "--export-processes", str(trace),
            "--plot-draws", "6", "--output", str(out),
        ])
        assert rc == 0
        payload = parse_machine_block(out.read_text())
        targets = {e["target"] for e in payload["entries"]}
        assert targets == {"x1", "overall"}
        df = pd.read_csv(trace)
        value_cols = [c for c in df.columns if c.startswith("draw_")]
        assert len(value_cols) == 6
        assert {"axis", "observed", "test", "target"} <= set(df.columns)

    def test_deterministic_output(self, sim_file, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.txt"
            assert main([
                "gof", "--input", str(sim_file), "--basis", "exp-decay",
                "--draws", "150", "--seed", "5", "--output", str(out),
            ]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestReplicate:
    def test_parallel_worker_invariance(self, tmp_path):
        outs = []
        for par, name in ((1, "p1"), (2, "p2")):
            out = tmp_path / f"{name}.txt"
            rc = main([
                "replicate", "--study", "table1", "--n", "20", "--m", "5",
                "--reps", "8", "--seed", "5", "--parallel", str(par),
                "--output", str(out),
            ])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_summary_has_four_arms(self, tmp_path):
        out = tmp_path / "r.txt"
        rc = main([
            "replicate", "--study", "table1", "--n", "20", "--m", "5",
            "--reps", "6", "--seed", "4", "--parallel", "1",
            "--output", str(out),
        ])
        assert rc == 0
        payload = parse_machine_block(out.read_text())
        assert set(payload["arms"]) == {"crc", "ccc", "ucrc", "uccc"}
        text = out.read_text()
        for arm in ("CRC", "CCC", "UCRC", "UCCC"):
            assert arm in text
