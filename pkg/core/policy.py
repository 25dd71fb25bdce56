"""
tencache-sim オフロード方針インターフェース

すべての方針（TenCache 系とベースライン）が実装する共通インターフェースと、
方針がエンジンに渡す転送要求の型を定義します。

主要クラス:
    - PolicyKind: 方針の種類（CLI 名と対応）
    - TransferKind / TransferRequest: 転送要求（配置の移動を1件表す）
    - TransferSink: 転送要求の受け口（エンジン側のタイムライン）
    - OffloadPolicy: 方針の基底クラス

方針は時刻に依存しない順序ベースの判断だけを行い、転送の時刻計算はエンジンに任せます。
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Protocol

from core.errors import ConfigError
from core.machine import Location, MachineConfig
from core.trace import ExecutionTrace, Phase, TraceStep

if TYPE_CHECKING:
    from core.scheduler import OptimizerStateScheduler


class PolicyKind(str, Enum):
    TEN_CACHE = "tencache"
    TEN_CACHE_PLUS_OPT = "tencache+opt"
    ZERO_INFINITY_LIKE = "zero-infinity"
    L2L_LIKE = "l2l"
    NO_OFFLOAD = "no-offload"
    TEN_CACHE_NO_PREFETCH = "tencache-noprefetch"

    @classmethod
    def parse(cls, name: "str | PolicyKind") -> "PolicyKind":
        if isinstance(name, PolicyKind):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError as e:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"policy: 不明な方針 {name!r}（{choices}）") from e


class TransferKind(str, Enum):
    PREFETCH = "prefetch"
    EVICT = "evict"
    FETCH = "fetch"
    RESTORE = "restore"
    WRITEBACK = "writeback"


@dataclass
class TransferRequest:
    """src → dst への配置移動

    release_only はバッファ解放のみ（NVMe に有効なコピーがある場合）でリンクを使わない。
    blocking は完了まで次のイベントを遅らせる。issue_us / done_us はエンジンが埋める。
    """

    tensor_id: int
    src: Location
    dst: Location
    size_bytes: int
    kind: TransferKind = TransferKind.PREFETCH
    release_only: bool = False
    blocking: bool = False
    issue_us: Optional[Fraction] = None
    done_us: Optional[Fraction] = None

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"転送の始点と終点が同じです (tensor {self.tensor_id})")

    @property
    def via_cpu_staging(self) -> bool:
        return not self.release_only and Location.CPU not in (self.src, self.dst)


class TransferSink(Protocol):
    def submit(self, request: TransferRequest, now_us: Fraction) -> Fraction:
        ...

    def ready_at(self, tensor_id: int) -> Fraction:
        ...


def accessed_ids(trace: ExecutionTrace, step: TraceStep) -> List[int]:
    """待ち時間を計測する対象（順伝播/逆伝播はパラメータ、最適化ステップは状態）"""
    if step.phase is Phase.OPTIMIZER:
        return list(dict.fromkeys(trace.state_ids(step)))
    return list(dict.fromkeys(trace.param_ids(step)))


class OffloadPolicy(ABC):
    """オフロード方針の基底クラス

    サブクラスは setup でテンソルを配置し、各フックで転送要求のリストを返す。
    転送要求は判断時点で配置に反映済みであること（バッファの受け渡しも判断時点）。
    """

    kind: PolicyKind

    def __init__(self, config: Any):
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.trace: Optional[ExecutionTrace] = None
        self.machine: Optional[MachineConfig] = None
        self.optimizer: Optional["OptimizerStateScheduler"] = None

    @abstractmethod
    def setup(self, trace: ExecutionTrace, machine: MachineConfig) -> None:
        """初期配置（容量不足は ConfigError / OutOfMemory）"""

    @abstractmethod
    def locations(self) -> Dict[int, Location]:
        """全テンソルの現在位置"""

    def location_of(self, tensor_id: int) -> Location:
        return self.locations()[tensor_id]

    @property
    def mode(self) -> str:
        return ""

    @property
    def fp16_in_nvme_count(self) -> int:
        return 0

    def before_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER and self.optimizer is not None:
            return self.optimizer.before_update(self.trace.state_ids(step))  # type: ignore[union-attr]
        return []

    def after_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER and self.optimizer is not None:
            return self.optimizer.after_update(self.trace.state_ids(step))  # type: ignore[union-attr]
        return []

    def on_backward_end(self) -> List[TransferRequest]:
        return []

    def on_iteration_end(self) -> List[TransferRequest]:
        if self.optimizer is not None:
            return self.optimizer.restore()
        return []

    # エンジンから呼ばれる入口

    def on_step_start(self, step: TraceStep, now_us: Fraction, sink: TransferSink) -> Dict[int, Fraction]:
        """ステップ開始時の要求を発行し、アクセス対象ごとの待ち時間を返す"""
        for request in self.before_step(step):
            sink.submit(request, now_us)
        return {tid: max(Fraction(0), sink.ready_at(tid) - now_us)
                for tid in accessed_ids(self.trace, step)}  # type: ignore[arg-type]

    def on_step_end(self, step: TraceStep, now_us: Fraction, sink: TransferSink) -> None:
        for request in self.after_step(step):
            sink.submit(request, now_us)

    def submit_backward_end(self, now_us: Fraction, sink: TransferSink) -> None:
        for request in self.on_backward_end():
            sink.submit(request, now_us)

    def submit_iteration_end(self, now_us: Fraction, sink: TransferSink) -> None:
        for request in self.on_iteration_end():
            sink.submit(request, now_us)
