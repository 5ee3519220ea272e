"""CLI subcommands: exit codes, CSV determinism, config-file precedence."""

import csv
import subprocess
import sys

from relayserve.cli import main


def run_cli(args):
    return main(list(args))


class TestVerify:
    def test_passes_and_exits_zero(self, capsys):
        assert run_cli(["verify", "--cases", "25", "--model-cases", "4"]) == 0
        out = capsys.readouterr().out
        assert "relay-vs-oracle" in out and "pass" in out


class TestSpeedupCurves:
    def test_byte_identical_across_runs(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            assert run_cli(["speedup-curves", "--output", str(p),
                            "--system-len-grid", "64,256,1024"]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_measured_column_matches_theory(self, tmp_path):
        path = tmp_path / "curves.csv"
        assert run_cli(["speedup-curves", "--output", str(path),
                        "--batch-sizes", "4", "--context-lens", "128",
                        "--system-len-grid", "64,128",
                        "--with-measured-traffic"]) == 0
        with open(path) as f:
            for row in csv.DictReader(f):
                assert (abs(float(row["p_measured_traffic"])
                            - float(row["p_theoretical"])) < 1e-12)


class TestBenchCommands:
    def test_bench_batch_csv(self, tmp_path):
        path = tmp_path / "bb.csv"
        assert run_cli(["bench-batch", "--output", str(path),
                        "--system-len-grid", "128,512",
                        "--num-requests", "16"]) == 0
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4  # two prefix lengths x two modes
        by_s = {}
        for row in rows:
            by_s.setdefault(row["system_len"], {})[row["mode"]] = float(
                row["tokens_per_s"])
        for s, modes in by_s.items():
            assert modes["relay"] > modes["baseline"]

    def test_bench_batch_deterministic(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            assert run_cli(["bench-batch", "--output", str(p),
                            "--system-len-grid", "256",
                            "--num-requests", "8"]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_bench_serve_deterministic(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            assert run_cli(["bench-serve", "--output", str(p),
                            "--rates", "2000", "--num-requests", "12",
                            "--seed", "5"]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_bench_serve_csv(self, tmp_path):
        path = tmp_path / "bs.csv"
        assert run_cli(["bench-serve", "--output", str(path),
                        "--rates", "1000,4000", "--num-requests", "16"]) == 0
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert {row["rate"] for row in rows} == {"1000.0", "4000.0"}

    def test_bench_batch_workload_preset(self, tmp_path):
        path = tmp_path / "bb.csv"
        assert run_cli(["bench-batch", "--output", str(path),
                        "--system-len-grid", "256", "--num-requests", "8",
                        "--workload", "128x256"]) == 0
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2

    def test_unknown_workload_preset_rejected(self, tmp_path):
        assert run_cli(["bench-batch", "--workload", "9x9",
                        "--output", str(tmp_path / "x.csv")]) == 2

    def test_profile_attn_csv(self, tmp_path):
        path = tmp_path / "pa.csv"
        assert run_cli(["profile-attn", "--output", str(path),
                        "--system-len-grid", "32,64", "--batch-size", "2",
                        "--context-len", "8", "--repeats", "1"]) == 0
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        for row in rows:
            assert float(row["seconds_per_step"]) > 0
            assert int(row["elements_read"]) > 0


class TestGen:
    def test_mode_equivalent_and_deterministic(self, tmp_path, capsys):
        up = tmp_path / "user.txt"
        up.write_text("7 11 42\n")
        outs = {}
        for mode in ("baseline", "relay"):
            assert run_cli(["gen", "--user-prompt", str(up), "--mode", mode,
                            "--system-len", "8", "--max-new-tokens", "5",
                            "--seed", "3"]) == 0
            outs[mode] = capsys.readouterr().out.strip()
        assert outs["baseline"] == outs["relay"]
        assert all(t.isdigit() for t in outs["relay"].split())

    def test_system_prompt_file(self, tmp_path, capsys):
        up = tmp_path / "user.txt"
        up.write_text("7 11\n")
        sp = tmp_path / "system.txt"
        sp.write_text("3 1 4 1 5\n")
        assert run_cli(["gen", "--user-prompt", str(up), "--system-prompt",
                        str(sp), "--max-new-tokens", "3",
                        "--output", str(tmp_path / "out.txt")]) == 0
        emitted = (tmp_path / "out.txt").read_text().split()
        assert capsys.readouterr().out.split() == emitted
        assert 1 <= len(emitted) <= 3

    def test_missing_prompt_file_is_config_error(self):
        assert run_cli(["gen", "--user-prompt", "/nonexistent/x.txt"]) == 2

    def test_relay_without_system_len_is_config_error(self, tmp_path):
        up = tmp_path / "user.txt"
        up.write_text("7\n")
        assert run_cli(["gen", "--user-prompt", str(up), "--mode", "relay",
                        "--system-len", "0"]) == 2

    def test_bad_token_file_is_config_error(self, tmp_path):
        up = tmp_path / "user.txt"
        up.write_text("7 eleven\n")
        assert run_cli(["gen", "--user-prompt", str(up)]) == 2


class TestConfigFile:
    def test_config_sets_defaults_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("system-len-grid = 64\nbatch-sizes = 8\n"
                       "context-lens = 128\n")
        out_a = tmp_path / "a.csv"
        assert run_cli(["speedup-curves", "--config", str(cfg),
                        "--output", str(out_a)]) == 0
        with open(out_a) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1 and rows[0]["b"] == "8" and rows[0]["s"] == "64"
        out_b = tmp_path / "b.csv"
        assert run_cli(["speedup-curves", "--config", str(cfg),
                        "--batch-sizes", "16", "--output", str(out_b)]) == 0
        with open(out_b) as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["b"] == "16"

    def test_unknown_config_key_is_config_error(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("no-such-flag = 1\n")
        assert run_cli(["speedup-curves", "--config", str(cfg)]) == 2


class TestExitCodes:
    def test_bad_flag_exits_two(self):
        proc = subprocess.run(
            [sys.executable, "-m", "relayserve.cli", "verify",
             "--no-such-flag"], capture_output=True)
        assert proc.returncode == 2

    def test_missing_subcommand_exits_two(self):
        proc = subprocess.run([sys.executable, "-m", "relayserve.cli"],
                              capture_output=True)
        assert proc.returncode == 2

    def test_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "relayserve.cli", "verify", "--cases", "2",
             "--model-cases", "1"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "relay-vs-oracle" in proc.stdout
