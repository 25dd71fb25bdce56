"""
tencache-sim 例外定義モジュール

シミュレータ全体で使う例外階層を定義します。
ライブラリ側は例外を送出するだけで、終了コードへの変換は main.py が行います。

主要クラス:
    - SimulationError: すべての例外の基底
    - TraceError / TraceParseError / TraceValidationError: トレース読込・検証
    - ConfigError / UnknownLink: 設定・マシン構成の誤り（終了コード2）
    - OutOfMemory: NoOffload 方針でモデルがGPUに収まらない（終了コード3）
    - NoFreeBuffer / UnknownSizeClass / DoubleRelease: バッファプール
"""
from typing import List, Optional


class SimulationError(Exception):
    """シミュレータ例外の基底クラス"""


class TraceError(SimulationError):
    """トレース関連エラーの基底"""


class TraceParseError(TraceError):
    """トレースファイルの構文エラー（行番号付き）"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"{line}行目: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class TraceValidationError(TraceError):
    """トレース不変条件違反（違反内容のリストを保持）"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ConfigError(SimulationError):
    """設定エラー（不正なフィールド名をメッセージに含める）"""


class UnknownLink(ConfigError):
    """未定義の転送リンク"""


class OutOfMemory(SimulationError):
    """モデルがGPU容量に収まらない"""


class SizeGuardExceeded(SimulationError):
    """参照シミュレータのサイズ上限超過"""


class NoFreeBuffer(SimulationError):
    """指定サイズクラスの空きバッファがない（スケジューラ内部で処理）"""


class UnknownSizeClass(SimulationError):
    """プールに存在しないサイズクラス"""


class DoubleRelease(SimulationError):
    """空きバッファの二重解放"""


class AccessToUnplacedTensor(SimulationError):
    """ステップ開始時にGPU上にないテンソルへのアクセス"""


class EmptyCensus(SimulationError):
    """空のテンソル集計に対するサイズ分布計算"""
