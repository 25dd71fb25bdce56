"""コマンドライン（サブコマンドと終了コード）のテスト"""
import json
from pathlib import Path

import pytest

from core.machine import load_machine
from core.trace import save_trace
from main import EXIT_CONFIG, EXIT_OK, EXIT_OOM, EXIT_TRACE, MACHINE_ENV, main

SYNTH = ["--synth", "layers=2", "k=1", "sizes=512", "cpb=1"]


@pytest.fixture
def cli(tmp_path, monkeypatch):
    """設定フォルダを一時ディレクトリにして main を呼ぶ"""
    monkeypatch.delenv(MACHINE_ENV, raising=False)
    monkeypatch.chdir(tmp_path)

    def _main(*argv: str) -> int:
        command, rest = argv[0], list(argv[1:])
        return main([command, "--config-dir", str(tmp_path / "config"), "--quiet", *rest])

    return _main


class TestRun:
    def test_synthetic_run(self, cli, tmp_path):
        assert cli("run", *SYNTH) == EXIT_OK
        report_path = tmp_path / "tencache_output" / "report_tencache.json"
        report = json.loads(report_path.read_text(encoding="utf-8"))
        assert report["policy"] == "tencache"
        assert report["hit_rate"] == 1.0
        assert report["param_accesses"] == 8  # 2イテレーション

    def test_prints_one_summary_line(self, cli, capsys):
        assert cli("run", "--synth", "layers=4", "--policy", "tencache") == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("tencache: total_time_us=")
        assert "report_tencache.json" in lines[0]

    def test_same_seed_same_report_bytes(self, cli, tmp_path):
        cli("run", *SYNTH, "--policy", "zero-infinity", "--seed", "7", "--out", str(tmp_path / "a"))
        cli("run", *SYNTH, "--policy", "zero-infinity", "--seed", "7", "--out", str(tmp_path / "b"))
        first = (tmp_path / "a" / "report_zero-infinity.json").read_bytes()
        assert first == (tmp_path / "b" / "report_zero-infinity.json").read_bytes()

    def test_out_of_memory(self, cli):
        assert cli("run", *SYNTH, "--policy", "no-offload", "--gpu-fraction", "1/2") == EXIT_OOM

    def test_unknown_policy(self, cli):
        assert cli("run", *SYNTH, "--policy", "lru") == EXIT_CONFIG

    def test_bad_thresholds(self, cli):
        assert cli("run", *SYNTH, "--thresholds", "30,10") == EXIT_CONFIG
        assert cli("run", *SYNTH, "--thresholds", "a,b") == EXIT_CONFIG

    def test_bad_synth_key(self, cli):
        assert cli("run", "--synth", "depth=3") == EXIT_CONFIG

    def test_outputs(self, cli, tmp_path):
        out, dump = tmp_path / "out", tmp_path / "dump"
        events = tmp_path / "events.jsonl"
        code = cli("run", *SYNTH, "--gpu-fraction", "1/2", "--out", str(out),
                   "--event-log", str(events), "--dump-dir", str(dump))
        assert code == EXIT_OK
        assert json.loads((out / "report_tencache.json").read_text(encoding="utf-8"))["policy"] == "tencache"
        assert json.loads((out / "config_used.json").read_text(encoding="utf-8"))["seed"] == 0
        assert load_machine(out / "machine_used.json").gpu_capacity_bytes == 512
        assert events.exists()
        assert {p.name for p in dump.iterdir()} == {"prefetch_table.csv", "chunks.csv", "placement.csv"}

    def test_broken_config_file(self, cli, tmp_path):
        (tmp_path / "config").mkdir()
        (tmp_path / "config" / "config.json").write_text("{", encoding="utf-8")
        assert cli("run", *SYNTH) == EXIT_CONFIG

    def test_machine_file(self, cli, tmp_path):
        machine = tmp_path / "machine.json"
        machine.write_text(json.dumps({"gpu_capacity_bytes": 100}), encoding="utf-8")
        assert cli("run", *SYNTH, "--policy", "no-offload", "--machine", str(machine)) == EXIT_OOM


class TestCompare:
    def test_two_policies(self, cli, tmp_path, capsys):
        code = cli("compare", *SYNTH, "--policy", "tencache", "--policy", "l2l", "--out", str(tmp_path))
        assert code == EXIT_OK
        assert "speedup" in capsys.readouterr().out
        assert (tmp_path / "compare.csv").exists()

    def test_single_policy_is_rejected(self, cli):
        assert cli("compare", *SYNTH, "--policy", "tencache") == EXIT_CONFIG


class TestSweep:
    def test_batch_scale(self, cli, tmp_path):
        code = cli("sweep", *SYNTH, "--axis", "batch_scale", "--values", "1,2", "--out", str(tmp_path),
                   "--workers", "1")
        assert code == EXIT_OK
        assert (tmp_path / "sweep_batch_scale.csv").exists()

    def test_unknown_axis(self, cli):
        assert cli("sweep", *SYNTH, "--axis", "depth", "--values", "1") == EXIT_CONFIG


class TestValidate:
    def test_valid_trace(self, cli, tmp_path, capsys, make_fixed_trace):
        trace = make_fixed_trace(2, 2)
        path = save_trace(trace, tmp_path / "trace.jsonl")
        assert cli("validate", "--trace", str(path)) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["valid"] is True
        assert summary["param_bytes"] == 2048
        assert summary["param_size_classes"] == {"512": 4}

    def test_invalid_trace(self, cli, tmp_path):
        path = Path(tmp_path / "broken.jsonl")
        path.write_text('{"v": 1}\n{not json\n', encoding="utf-8")
        assert cli("validate", "--trace", str(path)) == EXIT_TRACE

    @staticmethod
    def _write(path: Path, records: list) -> Path:
        path.write_text("\n".join(json.dumps(r) for r in [{"v": 1}, *records]) + "\n", encoding="utf-8")
        return path

    def test_phase_order_violation_names_step(self, cli, tmp_path, capsys):
        path = self._write(tmp_path / "order.jsonl", [
            {"t": {"id": 1, "size": 512, "kind": "p16", "layer": 0}},
            {"s": {"i": 0, "phase": "f", "ids": [1], "us": "1"}},
            {"s": {"i": 1, "phase": "b", "ids": [1], "us": "1"}},
            {"s": {"i": 2, "phase": "f", "ids": [1], "us": "1"}},
        ])
        assert cli("validate", "--trace", str(path)) == EXIT_TRACE
        summary = json.loads(capsys.readouterr().out)
        assert summary["valid"] is False
        assert len(summary["violations"]) == 1
        assert "ステップ 2" in summary["violations"][0]
        assert "フェーズ順序違反" in summary["violations"][0]

    def test_dangling_tensor_id_is_named(self, cli, tmp_path, capsys):
        path = self._write(tmp_path / "dangling.jsonl", [
            {"t": {"id": 1, "size": 512, "kind": "p16", "layer": 0}},
            {"s": {"i": 0, "phase": "f", "ids": [1], "us": "1"}},
            {"s": {"i": 1, "phase": "b", "ids": [99], "us": "1"}},
        ])
        assert cli("validate", "--trace", str(path)) == EXIT_TRACE
        violations = json.loads(capsys.readouterr().out)["violations"]
        assert violations == ["ステップ 1: 未定義のテンソルID 99"]
