"""
tencache-sim 設定管理モジュール

シミュレーション設定を管理します。
設定はJSONファイルとして保存され、CLI 起動時にロードされます。

主要クラス:
    - SimConfig: シミュレーション設定のデータクラス
    - ConfigManager: config.json の読み込みと実行設定のスナップショット保存

設定項目:
    - 実行設定（最終配置への復元の重ね合わせ、停止規則、バッチ倍率）
    - ベースライン設定（先行取得数、常駐しきい値、オプティマイザ状態の置き場所）
    - 集計設定（待ち時間しきい値）、並列実行数、乱数シード
    - トレース合成の既定値
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.errors import ConfigError
from core.machine import to_fraction


@dataclass
class SimConfig:
    """シミュレーション設定クラス（有理数は "p/q" または10進の文字列で保持）"""

    # 実行設定
    restore_overlap: bool = True  # False なら復元をイテレーション末尾で同期実行
    halt_rule: bool = True
    batch_scale: str = "1"
    optimizer_us_per_byte: Optional[str] = None  # 指定時はトレースの最適化ステップ時間を上書き

    # ベースライン設定
    zero_lookahead: int = 1
    zero_persistence_bytes: int = 200_000
    zero_optimizer_tier: str = "nvme"  # "nvme" or "cpu"

    # 集計・実行
    thresholds_us: List[int] = field(default_factory=lambda: [10, 30, 100])
    output_dir: str = "tencache_output"  # --out 未指定時のレポート出力先
    sweep_workers: int = 4
    seed: int = 0

    # トレース合成の既定値
    synth_layers: int = 8
    synth_tensors_per_layer: int = 2
    synth_sizes: List[int] = field(default_factory=lambda: [16_000_000, 32_000_000])
    synth_compute_us_per_byte: str = "1/20000"
    synth_iterations: int = 2

    @classmethod
    def get_default(cls) -> 'SimConfig':
        """デフォルト設定を取得"""
        return cls()

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式に変換"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SimConfig':
        """辞書から設定を作成（未知のキーは無視）"""
        valid_fields = {f.name for f in fields(cls)}
        filtered = {k: v for k, v in data.items() if k in valid_fields}
        return cls(**filtered)

    def batch_factor(self) -> Fraction:
        return to_fraction(self.batch_scale)

    def thresholds(self) -> List[Fraction]:
        return [to_fraction(t) for t in self.thresholds_us]

    def validate(self) -> None:
        """値の範囲を検査する（不正なフィールド名を含む ConfigError）"""
        thresholds = self.thresholds()
        if any(t <= 0 for t in thresholds):
            raise ConfigError("thresholds_us: しきい値は正である必要があります")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("thresholds_us: しきい値は狭義単調増加である必要があります")
        if self.batch_factor() <= 0:
            raise ConfigError("batch_scale: 正の値が必要です")
        if self.optimizer_us_per_byte is not None and to_fraction(self.optimizer_us_per_byte) < 0:
            raise ConfigError("optimizer_us_per_byte: 非負の値が必要です")
        if self.zero_lookahead < 0:
            raise ConfigError("zero_lookahead: 0以上である必要があります")
        if self.zero_persistence_bytes < 0:
            raise ConfigError("zero_persistence_bytes: 0以上である必要があります")
        if self.zero_optimizer_tier not in ("nvme", "cpu"):
            raise ConfigError(f"zero_optimizer_tier: 不明な値 {self.zero_optimizer_tier!r}")
        if not self.output_dir:
            raise ConfigError("output_dir: 出力フォルダが空です")
        if self.sweep_workers < 1:
            raise ConfigError("sweep_workers: 1以上である必要があります")
        if self.synth_layers < 1 or self.synth_tensors_per_layer < 1:
            raise ConfigError("synth_layers / synth_tensors_per_layer: 1以上である必要があります")
        if not self.synth_sizes or any(s <= 0 for s in self.synth_sizes):
            raise ConfigError("synth_sizes: 正のサイズが1つ以上必要です")
        if self.synth_iterations < 1:
            raise ConfigError("synth_iterations: 1以上である必要があります")


class ConfigManager:
    """設定フォルダ上の config.json を読み書きする

    読み込みは寛容ではない: 壊れたファイルは既定値で黙って置き換えず ConfigError にする。
    同じ設定で再実行すれば同じレポートになるため、実行に使った設定は
    レポートと並べて保存できる（``save_config(config, path)``）。
    """

    FILE_NAME = "config.json"

    def __init__(self, config_dir: Optional[Path] = None):
        self.config_dir = Path(config_dir) if config_dir is not None else Path.home() / ".tencache-sim"
        self.config_file = self.config_dir / self.FILE_NAME
        self.logger = logging.getLogger(__name__)

    def load_config(self) -> SimConfig:
        """config.json を読み込む（無ければ既定値）"""
        if not self.config_file.exists():
            self.logger.debug(f"{self.config_file} が無いため既定の設定を使用します")
            return SimConfig.get_default()

        try:
            data = json.loads(self.config_file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{self.config_file}: 読み込めません: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_file}: JSON オブジェクトが必要です")

        unknown = sorted(set(data) - {f.name for f in fields(SimConfig)})
        if unknown:
            self.logger.warning(f"{self.config_file}: 未知のキーを無視します: {', '.join(unknown)}")
        try:
            config = SimConfig.from_dict(data)
        except TypeError as e:
            raise ConfigError(f"{self.config_file}: {e}") from e
        config.validate()
        self.logger.info(f"設定をロードしました: {self.config_file}")
        return config

    def save_config(self, config: SimConfig, path: Optional[Path] = None) -> Path:
        """検証済みの設定をキー順で書き出し、書いたパスを返す"""
        config.validate()
        target = Path(path) if path is not None else self.config_file
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                          encoding="utf-8")
        self.logger.info(f"設定を保存しました: {target}")
        return target
