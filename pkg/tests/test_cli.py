import csv
import json

import numpy as np
import pytest

from fedtoe import cli

SMALL = """[scenario]
N = 12
[sim]
M = 15
K = 4
schemes = fedtoe, baseline3
"""


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestAllocate:
    def test_defaults_flat_outage(self, tmp_path, capsys):
        assert cli.main(["allocate", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "allocation.csv") as fh:
            assert fh.readline().strip() == "client_id,d_m,W_hz,B_bits,R_bps,q"
        rows = read_csv(tmp_path / "allocation.csv")
        assert len(rows) == 100
        np.testing.assert_allclose([float(r["q"]) for r in rows], 0.1, atol=1e-8)
        assert sum(float(r["W_hz"]) for r in rows) <= 20e6 * (1 + 1e-12)
        out = capsys.readouterr().out
        assert "objective" in out and "iterations" in out

    def test_delay_too_tight(self, tmp_path, capsys):
        cfg = write(tmp_path, "[allocator]\ntau_max = 1 ms\n")
        assert cli.main(["allocate", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_ERROR
        err = capsys.readouterr().err
        assert "one-bit bandwidths" in err
        assert not (tmp_path / "allocation.csv").exists()

    def test_single_client_takes_everything(self, tmp_path):
        cfg = write(tmp_path, "[scenario]\nN = 1\n")
        assert cli.main(["allocate", "--config", cfg, "--out", str(tmp_path)]) == 0
        (row,) = read_csv(tmp_path / "allocation.csv")
        assert float(row["W_hz"]) == pytest.approx(20e6, rel=1e-12)


class TestSimulate:
    def test_outputs(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "rounds.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        assert len(recs) == 30
        assert {r["scheme"] for r in recs} == {"fedtoe-offline", "baseline3"}
        summary = read_csv(tmp_path / "summary.csv")
        assert [r["scheme"] for r in summary] == ["fedtoe-offline", "baseline3"]
        svg = (tmp_path / "curves.svg").read_text()
        # one polyline per scheme in each of the two panels
        assert svg.count("<polyline") == 4
        assert svg.count("<title>fedtoe-offline</title>") == 2

    def test_scheme_filter(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path),
                         "--scheme", "ideal"]) == 0
        assert [r["scheme"] for r in read_csv(tmp_path / "summary.csv")] == ["ideal"]

    def test_twelve_significant_digits(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)])
        value = read_csv(tmp_path / "summary.csv")[0]["final_loss"]
        assert value == f"{float(value):.12g}"

    def test_rerun_identical(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        for sub in ("a", "b"):
            assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / sub)]) == 0
        for name in ("rounds.jsonl", "summary.csv", "curves.svg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_run(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        assert (tmp_path / "a" / "rounds.jsonl").read_bytes() != (tmp_path / "b" / "rounds.jsonl").read_bytes()

    def test_unknown_scheme(self, tmp_path):
        cfg = write(tmp_path, SMALL + "[output]\nsvg = false\n")
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path),
                         "--scheme", "baseline7"]) == cli.EXIT_ERROR


class TestVerify:
    def test_default_passes(self, tmp_path):
        assert cli.main(["verify", "--out", str(tmp_path)]) == 0
        report = (tmp_path / "verify_report.txt").read_text().splitlines()
        assert report[-1].startswith("ALL PASS")
        assert all(line.startswith("PASS") for line in report[:-1])
        assert all("measured" in line and "tolerance" in line for line in report[:-1])

    def test_wrong_theta_fails_outage(self, tmp_path):
        assert cli.main(["verify", "--out", str(tmp_path), "--inject", "wrong-theta"]) == cli.EXIT_FAIL
        failed = [x for x in (tmp_path / "verify_report.txt").read_text().splitlines()
                  if x.startswith("FAIL ")]
        assert failed and all("outage" in x for x in failed)


class TestBound:
    def test_terms_written(self, tmp_path, capsys):
        cfg = write(tmp_path, "[scenario]\nN = 10\n[sim]\nM = 1000\nK = 4\nschemes = fedtoe\n")
        assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path)]) == 0
        rows = {r["term"]: float(r["value"]) for r in read_csv(tmp_path / "bound_terms.csv")}
        parts = ["optimization", "sgd_variance", "qe", "partial_participation", "data_variance",
                 "outage_bias", "outage_variance"]
        assert rows["total"] == pytest.approx(sum(rows[k] for k in parts), rel=1e-10)
        assert rows["outage_bias"] == 0.0
        assert rows["empirical_lhs"] <= rows["total"]
        assert "<= bound" in capsys.readouterr().out

    def test_short_horizon_rejected(self, tmp_path, capsys):
        cfg = write(tmp_path, "[scenario]\nN = 10\n[sim]\nM = 10\nschemes = fedtoe\n")
        assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_ERROR
        assert "does not apply" in capsys.readouterr().err

    def test_needs_quadratic(self, tmp_path):
        cfg = write(tmp_path, "[scenario]\ntask = logistic\nN = 4\n[sim]\nM = 1000\n")
        assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_ERROR


class TestSweep:
    def test_tighter_delay_learns_faster(self, tmp_path):
        cfg = write(tmp_path, "[scenario]\nN = 20\nheterogeneity = 3\n[sim]\ngamma = 0.01\n"
                              "schemes = fedtoe\n[sweep]\ntotal_time = 2 s\n")
        assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        assert [float(r["tau_max_s"]) for r in rows] == [0.04, 0.05, 0.1, 0.2]
        assert [int(r["rounds"]) for r in rows] == [50, 40, 20, 10]
        loss = [float(r["final_loss"]) for r in rows]
        assert all(a < b for a, b in zip(loss, loss[1:]))

    def test_outage_point_reported(self, tmp_path):
        cfg = write(tmp_path, "[sim]\nschemes = baseline1:5\n"
                              "retransmit_cap = 50\n[sweep]\ntau_max = 40 ms\ntotal_time = 0.4 s\n")
        assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
        (row,) = read_csv(tmp_path / "sweep.csv")
        assert row["status"] == "outage" and row["final_loss"] == ""
