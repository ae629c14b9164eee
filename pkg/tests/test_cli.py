import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from actlab.cli import _entropy_bits, main
from actlab.config import ConfigError, config_text, parse_config, parse_config_text

from test_tasks import decode_addition_inputs, decode_addition_target


def run_cli(argv, cwd=None):
    """Run the CLI in-process, capturing stdout; returns (code, stdout)."""
    import contextlib
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    return code, buf.getvalue()


class TestConfigParsing:
    def test_empty_file_parity_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        config = parse_config(str(path))
        assert config.task == "parity"
        assert config.batch == 128          # reference minibatch for parity
        assert config.cell == "rnn"
        assert config.hidden == 128
        assert config.epsilon == 0.01
        assert config.max_steps == 100

    def test_task_defaults_mirror_reference_setup(self):
        logic = parse_config_text("task.name = logic")
        assert (logic.batch, logic.cell, logic.hidden) == (16, "lstm", 128)
        addition = parse_config_text("task.name = addition")
        assert (addition.batch, addition.max_steps) == (32, 20)
        sort_cfg = parse_config_text("task.name = sort")
        assert (sort_cfg.batch, sort_cfg.hidden) == (16, 512)

    def test_override_is_echoed(self):
        config = parse_config_text("task.name = parity", ["act.tau=6e-3"])
        assert config.tau == 6e-3
        assert "act.tau = 0.006" in config_text(config)

    def test_unknown_key_suggests_nearest(self):
        with pytest.raises(ConfigError, match=r"act\.taux.*act\.tau"):
            parse_config_text("act.taux = 1e-3")

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config_text("train.iterations = soon")

    def test_out_of_range_epsilon(self):
        with pytest.raises(ConfigError, match="epsilon"):
            parse_config_text("act.epsilon = 0.75")

    def test_comments_and_blanks_ignored(self):
        config = parse_config_text("# a comment\n\ntask.name = sort  # trailing\n")
        assert config.task == "sort"

    def test_config_text_roundtrips(self):
        config = parse_config_text("task.name = logic", ["act.tau=0.003"])
        again = parse_config_text(config_text(config))
        assert again == config


@pytest.fixture(scope="module")
def parity_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "parity.cfg"
    cfg.write_text("task.name = parity\ntask.bits = 8\ntask.batch = 8\n"
                   "cell.hidden = 12\nact.tau = 1e-2\nact.max_steps = 6\n"
                   "train.iterations = 30\ntrain.eval_every = 15\n"
                   "train.eval_batches = 1\ntrain.seed = 3\n")
    out = root / "run"
    code, _ = run_cli(["train", "--config", str(cfg), "--out-dir", str(out)])
    assert code == 0
    return root, cfg, out


class TestTrainEvalCommands:
    def test_train_writes_run_directory(self, parity_run):
        _, _, out = parity_run
        assert (out / "ckpt-final.bin").exists()
        assert (out / "metrics.jsonl").exists()
        assert (out / "config.txt").exists()
        assert (out / "manifest.json").exists()

    def test_stdout_flag_streams_metrics(self, parity_run):
        root, cfg, _ = parity_run
        code, stdout = run_cli(["train", "--config", str(cfg),
                                "--out-dir", str(root / "run2"), "--stdout"])
        assert code == 0
        rows = [json.loads(line) for line in stdout.splitlines()]
        assert [r["iteration"] for r in rows] == [15, 30]

    def test_eval_cross_checks_training_metrics(self, parity_run):
        _, _, out = parity_run
        code, stdout = run_cli(["eval", "--checkpoint",
                                str(out / "ckpt-final.bin"), "--batches", "2",
                                "--stdout"])
        assert code == 0
        row = json.loads(stdout)
        assert 0.0 <= row["sequence_error_rate"] <= 1.0
        assert row["mean_ponder"] >= 1.0

    def test_eval_difficulty_table(self, parity_run, tmp_path):
        _, _, out = parity_run
        table = tmp_path / "diff.csv"
        code, _ = run_cli(["eval", "--checkpoint", str(out / "ckpt-final.bin"),
                           "--batches", "1", "--difficulty-csv", str(table)])
        assert code == 0
        lines = table.read_text().splitlines()
        assert lines[0] == "# schema: difficulty-table-1"
        assert lines[1] == "difficulty,count,mean_ponder,mean_steps,mean_error"
        assert len(lines) > 2


class TestExitCodes:
    def test_config_error_is_two(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("act.taux = 1\n")
        code, _ = run_cli(["train", "--config", str(bad),
                           "--out-dir", str(tmp_path / "x")])
        assert code == 2

    def test_missing_checkpoint_is_io_error(self):
        code, _ = run_cli(["eval", "--checkpoint", "/nonexistent/model.bin"])
        assert code == 4

    def test_corrupt_checkpoint_is_io_error(self, parity_run, tmp_path):
        _, _, out = parity_run
        blob = bytearray((out / "ckpt-final.bin").read_bytes())
        blob[20] ^= 0xFF
        bad = tmp_path / "corrupt.bin"
        bad.write_bytes(bytes(blob))
        code, _ = run_cli(["eval", "--checkpoint", str(bad)])
        assert code == 4

    def test_gradcheck_failure_is_numeric(self, parity_run):
        root, cfg, _ = parity_run
        # An impossible tolerance forces the failure path.
        code, _ = run_cli(["gradcheck", "--config", str(cfg),
                           "--set", "cell.hidden=6", "--tolerance", "0"])
        assert code == 3


class TestGenCommand:
    def test_gen_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run_cli(["gen", "--task", "parity", "--seed", "7",
                        "--count", "4", "--out", str(a)])[0] == 0
        assert run_cli(["gen", "--task", "parity", "--seed", "7",
                        "--count", "4", "--out", str(b)])[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_logic_fixture_gate_ids_in_range(self, tmp_path):
        out = tmp_path / "logic.csv"
        run_cli(["gen", "--task", "logic", "--seed", "1", "--count", "8",
                 "--out", str(out)])
        with open(out) as fh:
            fh.readline()                      # schema comment
            for row in csv.DictReader(fh):
                vec = np.array([float(row[f"in_{i}"]) for i in range(102)])
                for c in range(10):
                    chunk = vec[2 + 10 * c: 12 + 10 * c]
                    assert chunk.sum() in (0.0, 1.0)
                    if chunk.sum() == 1.0:
                        assert 1 <= int(np.argmax(chunk)) + 1 <= 10

    def test_addition_fixture_rows_decode_to_running_sums(self, tmp_path):
        out = tmp_path / "addition.csv"
        run_cli(["gen", "--task", "addition", "--seed", "2", "--count", "8",
                 "--out", str(out)])
        sums: dict[int, int] = {}
        with open(out) as fh:
            fh.readline()
            for row in csv.DictReader(fh):
                e, t = int(row["example"]), int(row["t"])
                if t >= int(row["length"]):
                    continue
                vec = np.array([float(row[f"in_{i}"]) for i in range(50)])
                sums[e] = sums.get(e, 0) + decode_addition_inputs(vec)
                if int(row["mask"]):
                    target = [int(row[f"target_g{g}"]) for g in range(6)]
                    assert decode_addition_target(np.array(target)) == sums[e]

    def test_corpus_generation(self, tmp_path):
        out = tmp_path / "corpus.bin"
        code, _ = run_cli(["gen", "--task", "corpus", "--seed", "3",
                           "--size", "5000", "--out", str(out)])
        assert code == 0
        assert out.stat().st_size == 5000


class TestTraceCommand:
    def test_cap_one_trace_has_constant_ponder(self, tmp_path):
        cfg = tmp_path / "m1.cfg"
        cfg.write_text("task.name = parity\ntask.bits = 6\ntask.batch = 4\n"
                       "cell.hidden = 8\nact.max_steps = 1\n"
                       "train.iterations = 5\ntrain.eval_every = 5\n"
                       "train.eval_batches = 1\n")
        out = tmp_path / "run"
        assert run_cli(["train", "--config", str(cfg),
                        "--out-dir", str(out)])[0] == 0
        code, stdout = run_cli(["trace", "--checkpoint",
                                str(out / "ckpt-final.bin"), "--count", "3",
                                "--stdout"])
        assert code == 0
        lines = stdout.splitlines()
        assert lines[0] == "# schema: model-trace-1"
        for row in csv.DictReader(lines[1:]):
            assert row["steps"] == "1"
            assert float(row["ponder"]) == 2.0

    def test_trace_rejects_corpus_for_synthetic_checkpoint(self, parity_run,
                                                           tmp_path):
        _, _, out = parity_run
        corpus = tmp_path / "c.bin"
        corpus.write_bytes(b"x" * 100)
        code, _ = run_cli(["trace", "--checkpoint", str(out / "ckpt-final.bin"),
                           "--corpus", str(corpus), "--stdout"])
        assert code == 2

    def test_uniform_distribution_entropy_is_eight_bits(self):
        assert abs(_entropy_bits(np.full(256, 1 / 256)) - 8.0) < 1e-12

    def test_trace_loss_column_matches_eval_bpc(self, tmp_path):
        # Cross-check between two code paths on identical bytes.
        corpus = tmp_path / "corpus.bin"
        run_cli(["gen", "--task", "corpus", "--seed", "5", "--size", "20000",
                 "--out", str(corpus)])
        cfg = tmp_path / "text.cfg"
        cfg.write_text(f"task.name = text\ntask.corpus = {corpus}\n"
                       "task.seq_len = 30\ntask.batch = 3\ncell.hidden = 12\n"
                       "act.max_steps = 4\nact.tau = 1e-2\n"
                       "train.iterations = 4\ntrain.eval_every = 4\n"
                       "train.eval_batches = 1\n")
        out = tmp_path / "run"
        assert run_cli(["train", "--config", str(cfg),
                        "--out-dir", str(out)])[0] == 0
        ckpt = str(out / "ckpt-final.bin")

        code, eval_out = run_cli(["eval", "--checkpoint", ckpt, "--batches", "1",
                                  "--seed", "9", "--stdout"])
        assert code == 0
        bpc = json.loads(eval_out)["bits_per_character"]

        code, trace_out = run_cli(["trace", "--checkpoint", ckpt, "--count", "3",
                                   "--seed", "9", "--stdout"])
        assert code == 0
        losses = [float(row["loss_nats"])
                  for row in csv.DictReader(trace_out.splitlines()[1:])
                  if row["loss_nats"]]
        assert abs(np.mean(losses) - bpc * math.log(2.0)) < 1e-9


class TestCliProcess:
    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "actlab.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0

    def test_logs_go_to_stderr_not_stdout(self, tmp_path):
        cfg = tmp_path / "p.cfg"
        cfg.write_text("task.name = parity\ntask.bits = 6\ntask.batch = 4\n"
                       "cell.hidden = 8\ntrain.iterations = 2\n"
                       "train.eval_every = 2\ntrain.eval_batches = 1\n")
        proc = subprocess.run(
            [sys.executable, "-m", "actlab.cli", "train", "--config", str(cfg),
             "--out-dir", str(tmp_path / "r")],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout == ""          # data only with --stdout
        assert "training" in proc.stderr
