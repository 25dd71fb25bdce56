"""
tencache-sim - メインエントリーポイント
GPU/CPU/NVMe テンソルキャッシュの離散イベントシミュレータ

サブコマンド:
    run       1方針の実行とレポート出力
    compare   複数方針の比較表
    sweep     バッチ倍率・容量・メモリ種別のスイープ
    validate  トレースファイルの検証

終了コード: 0 成功 / 1 トレース不正 / 2 設定不正 / 3 メモリ不足
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from tqdm import tqdm

# アプリケーションのルートディレクトリをパスに追加
app_root = Path(__file__).parent
sys.path.insert(0, str(app_root))

from core.baselines import make_policy
from core.config import ConfigManager, SimConfig
from core.engine import Scenario, run, run_many, sized_machine, sweep
from core.errors import ConfigError, OutOfMemory, SimulationError, TraceError, TraceValidationError
from core.machine import MachineConfig, default_machine, load_machine, save_machine
from core.policy import PolicyKind
from core.trace import (
    ExecutionTrace,
    SizeProfile,
    TensorKind,
    load_trace,
    scale_trace,
    synthesize_transformer_trace,
    tensor_census,
    with_optimizer_rate,
)
from utils.csv_exporter import ReportExporter, summary_frame
from utils.event_log import EventLog

MACHINE_ENV = "TENCACHE_SIM_DEFAULT_MACHINE"

EXIT_OK = 0
EXIT_TRACE = 1
EXIT_CONFIG = 2
EXIT_OOM = 3

DEFAULT_COMPARE = [PolicyKind.TEN_CACHE, PolicyKind.TEN_CACHE_PLUS_OPT,
                   PolicyKind.ZERO_INFINITY_LIKE, PolicyKind.L2L_LIKE]

SYNTH_KEYS = ("layers", "k", "sizes", "mode", "cpb", "iterations", "backward_factor", "optimizer")


def parse_synth(pairs: Sequence[str], config: SimConfig) -> Dict[str, Any]:
    """--synth key=val ... を合成パラメータに変換（未指定は設定の既定値）"""
    params: Dict[str, Any] = {
        "layers": config.synth_layers,
        "k": config.synth_tensors_per_layer,
        "sizes": list(config.synth_sizes),
        "mode": "cycle",
        "cpb": config.synth_compute_us_per_byte,
        "iterations": config.synth_iterations,
        "backward_factor": "1",
        "optimizer": True,
    }
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"synth: key=val 形式ではありません: {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in SYNTH_KEYS:
            raise ConfigError(f"synth: 不明なキー {key!r}（{', '.join(SYNTH_KEYS)}）")
        try:
            if key in ("layers", "k", "iterations"):
                params[key] = int(value)
            elif key == "sizes":
                params[key] = [int(v) for v in value.split(",") if v]
            elif key == "optimizer":
                params[key] = value.strip().lower() in ("1", "true", "yes")
            else:
                params[key] = value.strip()
        except ValueError as e:
            raise ConfigError(f"synth.{key}: 値を解釈できません: {value!r}") from e
    return params


def build_trace(args: argparse.Namespace, config: SimConfig) -> ExecutionTrace:
    if args.trace:
        return load_trace(args.trace)
    params = parse_synth(args.synth or [], config)
    try:
        profile = SizeProfile(params["mode"], tuple(params["sizes"]))
        return synthesize_transformer_trace(
            params["layers"], params["k"], profile, params["cpb"], config.seed,
            iterations=params["iterations"], backward_factor=params["backward_factor"],
            include_optimizer=params["optimizer"],
        )
    except ValueError as e:
        raise ConfigError(f"synth: {e}") from e


def build_machine(args: argparse.Namespace, trace: ExecutionTrace) -> MachineConfig:
    path = args.machine or os.environ.get(MACHINE_ENV)
    machine = load_machine(path) if path else default_machine()
    if args.gpu_fraction is not None:
        machine = sized_machine(trace, machine, args.gpu_fraction)
    return machine


class TencacheSimApp:
    """tencache-sim アプリケーションクラス"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.setup_logging()

    def setup_logging(self):
        """ログ設定"""
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if self.args.log_file:
            log_file = Path(self.args.log_file)
            log_file.parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

        level = logging.INFO
        if self.args.verbose:
            level = logging.DEBUG
        elif self.args.quiet:
            level = logging.WARNING

        logging.basicConfig(
            level=level,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=handlers,
            force=True,
        )

        self.logger = logging.getLogger(__name__)

    def load_config(self) -> SimConfig:
        self.config_manager = ConfigManager(Path(self.args.config_dir) if self.args.config_dir else None)
        config = self.config_manager.load_config()
        if self.args.seed is not None:
            config.seed = self.args.seed
        if self.args.thresholds:
            try:
                config.thresholds_us = [int(v) for v in self.args.thresholds.split(",") if v]
            except ValueError as e:
                raise ConfigError(f"thresholds: 整数のリストが必要です: {self.args.thresholds!r}") from e
        if self.args.workers is not None:
            config.sweep_workers = self.args.workers
        config.validate()
        return config

    def _progress(self, total: int, desc: str):
        bar = tqdm(total=total, desc=desc, disable=self.args.quiet, file=sys.stderr)

        def on_progress(done: int, _total: int) -> None:
            bar.update(done - bar.n)
            if done == _total:
                bar.close()

        return on_progress

    def _exporter(self, config: SimConfig, machine: MachineConfig) -> ReportExporter:
        """出力先（--out、無ければ設定の output_dir）に実行時の設定とマシン構成も保存する"""
        out = Path(self.args.out) if self.args.out else Path(config.output_dir)
        exporter = ReportExporter(str(out))
        self.config_manager.save_config(config, out / "config_used.json")
        save_machine(machine, out / "machine_used.json")
        return exporter

    def dump_setup(self, trace: ExecutionTrace, machine: MachineConfig, kind: PolicyKind,
                   config: SimConfig) -> None:
        """初期配置時点のプリフェッチテーブル・チャンク・配置をCSVに出力"""
        exporter = ReportExporter(self.args.dump_dir)
        policy = make_policy(kind, config)
        policy.setup(scale_trace(with_optimizer_rate(trace, config.optimizer_us_per_byte),
                                 config.batch_factor()), machine)
        state = getattr(policy, "state", None)
        if state is not None and getattr(state, "table", None) is not None:
            exporter.export_prefetch_table(state.table)
        if state is not None and getattr(state, "pools", None):
            exporter.export_chunks(state.pools)
        finals = dict(state.placement.final_of) if state is not None else {}
        state_placement = getattr(policy, "state_placement", None)
        if state_placement is not None:
            finals.update(state_placement.final_of)
        exporter.export_placement(policy.locations(), finals)

    # サブコマンド

    def cmd_run(self, config: SimConfig) -> int:
        trace = build_trace(self.args, config)
        machine = build_machine(self.args, trace)
        kind = PolicyKind.parse(self.args.policy[0] if self.args.policy else PolicyKind.TEN_CACHE)
        if self.args.dump_dir:
            self.dump_setup(trace, machine, kind, config)
        event_log = EventLog(self.args.event_log) if self.args.event_log else None
        report = run(trace, machine, kind, config, event_log)
        if event_log is not None:
            event_log.save()
        report_path = self._exporter(config, machine).export_report(report)
        stall = report.stall_us / report.total_time_us if report.total_time_us else 0
        print(f"{report.policy}: total_time_us={float(report.total_time_us):.1f} stall={float(stall):.4f} "
              f"hit_rate={float(report.hit_rate):.4f} report={report_path}")
        return EXIT_OK

    def cmd_compare(self, config: SimConfig) -> int:
        trace = build_trace(self.args, config)
        machine = build_machine(self.args, trace)
        kinds = [PolicyKind.parse(p) for p in self.args.policy] if self.args.policy else DEFAULT_COMPARE
        if len(kinds) < 2:
            raise ConfigError("policy: compare には2つ以上の方針が必要です")
        scenarios = [Scenario(trace, machine, k, config) for k in kinds]
        reports = run_many(scenarios, config.sweep_workers, self._progress(len(scenarios), "compare"))
        self._exporter(config, machine).export_compare(reports)
        print(summary_frame(reports).to_string(index=False))
        return EXIT_OK

    def cmd_sweep(self, config: SimConfig) -> int:
        trace = build_trace(self.args, config)
        machine = build_machine(self.args, trace)
        kind = PolicyKind.parse(self.args.policy[0] if self.args.policy else PolicyKind.TEN_CACHE)
        values = [v.strip() for v in self.args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("values: 1つ以上の値が必要です")
        base = Scenario(trace, machine, kind, config)
        reports = sweep(base, self.args.axis, values, config.sweep_workers,
                        self._progress(len(values), f"sweep {self.args.axis}"))
        self._exporter(config, machine).export_sweep(self.args.axis, values, reports)
        frame = summary_frame(reports)
        frame.insert(0, self.args.axis, values)
        print(frame.to_string(index=False))
        return EXIT_OK

    def cmd_validate(self, config: SimConfig) -> int:
        try:
            trace = build_trace(self.args, config)
        except TraceValidationError as e:
            print(json.dumps({"valid": False, "violations": e.violations}, indent=2, ensure_ascii=False))
            raise
        except TraceError as e:
            print(json.dumps({"valid": False, "violations": [str(e)]}, indent=2, ensure_ascii=False))
            raise
        params = tensor_census(trace, TensorKind.PARAM_FP16)
        states = tensor_census(trace, TensorKind.OPT_STATE_FP32)
        print(json.dumps({
            "valid": True,
            "tensors": len(trace.tensors),
            "steps": len(trace.steps),
            "iterations": trace.iterations,
            "param_bytes": params.total_bytes,
            "state_bytes": states.total_bytes,
            "param_size_classes": {str(k): v for k, v in params.entries.items()},
        }, indent=2))
        return EXIT_OK

    def run(self) -> int:
        """アプリケーション実行"""
        commands = {
            "run": self.cmd_run,
            "compare": self.cmd_compare,
            "sweep": self.cmd_sweep,
            "validate": self.cmd_validate,
        }
        try:
            config = self.load_config()
            return commands[self.args.command](config)
        except TraceError as e:
            self.logger.error(f"トレースエラー: {str(e)}")
            return EXIT_TRACE
        except OutOfMemory as e:
            self.logger.error(f"メモリ不足: {str(e)}")
            return EXIT_OOM
        except ConfigError as e:
            self.logger.error(f"設定エラー: {str(e)}")
            return EXIT_CONFIG
        except SimulationError as e:
            self.logger.error(f"シミュレーションエラー: {str(e)}")
            return EXIT_CONFIG
        except KeyboardInterrupt:
            self.logger.info("ユーザーによる中断")
            return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--trace", type=Path, help="トレースファイル（JSONL）")
    source.add_argument("--synth", nargs="+", metavar="KEY=VAL",
                        help=f"合成トレースのパラメータ（{', '.join(SYNTH_KEYS)}）")
    common.add_argument("--machine", type=Path, help=f"マシン構成JSON（既定: 環境変数 {MACHINE_ENV}）")
    common.add_argument("--gpu-fraction", help="GPU 容量を FP16 パラメータ総量のこの割合にする")
    common.add_argument("--policy", action="append", help="方針（compare では複数指定可）")
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--thresholds", help="待ち時間しきい値(µs)のカンマ区切り")
    common.add_argument("--out", type=Path, help="レポート出力フォルダ（既定: 設定の output_dir）")
    common.add_argument("--event-log", type=Path, help="イベントログ(JSONL)の出力先")
    common.add_argument("--dump-dir", type=Path, help="初期配置ダンプの出力フォルダ")
    common.add_argument("--config-dir", type=Path, help="設定フォルダ（既定: ~/.tencache-sim）")
    common.add_argument("--workers", type=int, help="並列実行数")
    common.add_argument("--quiet", action="store_true", help="進捗表示と INFO ログを抑制")
    common.add_argument("--verbose", action="store_true", help="DEBUG ログを出力")
    common.add_argument("--log-file", type=Path, help="ログファイル")

    parser = argparse.ArgumentParser(prog="tencache-sim",
                                     description="GPU/CPU/NVMe テンソルキャッシュのシミュレータ")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="1方針を実行")
    sub.add_parser("compare", parents=[common], help="複数方針を比較")
    sweep_parser = sub.add_parser("sweep", parents=[common], help="パラメータをスイープ")
    sweep_parser.add_argument("--axis", required=True,
                              help="batch_scale / gpu_capacity / cpu_capacity / pinned")
    sweep_parser.add_argument("--values", required=True, help="カンマ区切りの値")
    sub.add_parser("validate", parents=[common], help="トレースを検証")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    app = TencacheSimApp(args)
    return app.run()


if __name__ == "__main__":
    sys.exit(main())
