"""
tencache-sim 比較用ベースライン方針

競合手法を理想化したモデルです。内部実装の再現ではなく、相対的な順位を比べるためのものです。

主要クラス:
    - BaselineState: ベースライン共通の状態（配置・テーブル・常駐集合）
    - ZeroInfinityLikePolicy: 大きいテンソルを CPU/NVMe へ置き、アクセス時に取得・使用後に解放
    - L2LLikePolicy: 実行中のレイヤだけを GPU に置く
    - NoOffloadPolicy: オフロードなし（収まらなければ OutOfMemory）

機能:
    - zero_infinity_like_step / l2l_like_step / no_offload_step: 1ステップ分の転送
    - make_policy: PolicyKind から方針オブジェクトを作成
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from core.analyzer import PrefetchTable, build_prefetch_table
from core.errors import ConfigError, OutOfMemory
from core.machine import Location, MachineConfig
from core.placement import PlacementState, place_optimizer_states, uniform_placement
from core.policy import OffloadPolicy, PolicyKind, TransferKind, TransferRequest
from core.scheduler import (
    OptimizerPosture,
    OptimizerStateScheduler,
    TenCacheNoPrefetchPolicy,
    TenCachePlusOptPolicy,
    TenCachePolicy,
    update_order,
)
from core.trace import ExecutionTrace, Phase, TensorDescriptor, TensorKind, TraceStep

logger = logging.getLogger(__name__)


@dataclass
class BaselineState:
    placement: PlacementState
    sizes: Dict[int, int]
    table: PrefetchTable
    layers: Dict[int, int] = field(default_factory=dict)
    persistent: Set[int] = field(default_factory=set)
    lookahead: int = 1

    def home(self, tensor_id: int) -> Location:
        return self.placement.final_of[tensor_id]


def _step_params(trace: ExecutionTrace, step: TraceStep) -> List[int]:
    return list(dict.fromkeys(trace.param_ids(step)))


def _fetch(state: BaselineState, tensor_id: int) -> TransferRequest:
    src = state.placement.location_of[tensor_id]
    state.placement.move(tensor_id, Location.GPU)
    return TransferRequest(tensor_id, src, Location.GPU, state.sizes[tensor_id], TransferKind.FETCH)


def _send_home(state: BaselineState, tensor_id: int, release_only: bool) -> TransferRequest:
    home = state.home(tensor_id)
    state.placement.move(tensor_id, home)
    return TransferRequest(tensor_id, Location.GPU, home, state.sizes[tensor_id], TransferKind.EVICT,
                           release_only=release_only)


def _state_placement(states: List[TensorDescriptor], cpu_bytes: int) -> Tuple[PlacementState, int]:
    """CPU に収まらない場合は NVMe から読み込む1状態分を空けて予算を決める"""
    total = sum(s.size_bytes for s in states)
    budget = max(0, cpu_bytes)
    if states and total > budget:
        budget = max(0, budget - max(s.size_bytes for s in states))
    return place_optimizer_states(states, budget), budget


# ---------------------------------------------------------------- ZeRO-Infinity 風

def zero_fetch_for_step(state: BaselineState, param_ids: List[int]) -> List[TransferRequest]:
    return [_fetch(state, t) for t in param_ids if state.placement.location_of[t] is not Location.GPU]


def zero_release_after_step(state: BaselineState, step: TraceStep, param_ids: List[int]) -> List[TransferRequest]:
    """使用済みパラメータを解放（書き戻しなし）し、後続 k 個を先行取得する"""
    rows = state.table.rows_of_step(step.step_index)
    if rows:
        state.table.cursor = max(state.table.cursor, rows[-1] + 1)
    upcoming: List[int] = []
    for row in range(state.table.cursor, len(state.table)):
        if len(upcoming) >= state.lookahead:
            break
        tid = state.table.tensor_at(row)
        if tid not in state.persistent and tid not in upcoming:
            upcoming.append(tid)
    requests = [
        _send_home(state, t, release_only=True) for t in param_ids
        if t not in state.persistent and t not in upcoming
        and state.placement.location_of[t] is Location.GPU
    ]
    requests += zero_fetch_for_step(state, upcoming)
    return requests


def zero_infinity_like_step(state: BaselineState, trace: ExecutionTrace, step: TraceStep) -> List[TransferRequest]:
    """1ステップ分（開始時の取得 + 終了時の解放・先行取得）"""
    params = _step_params(trace, step)
    return zero_fetch_for_step(state, params) + zero_release_after_step(state, step, params)


# ---------------------------------------------------------------- L2L 風

def _layer_group(state: BaselineState, trace: ExecutionTrace, step: TraceStep) -> List[int]:
    layers = {state.layers[t] for t in _step_params(trace, step)}
    return sorted(t for t, layer in state.layers.items() if layer in layers)


def l2l_load(state: BaselineState, trace: ExecutionTrace, step: TraceStep) -> List[TransferRequest]:
    return [_fetch(state, t) for t in _layer_group(state, trace, step)
            if state.placement.location_of[t] is not Location.GPU]


def l2l_offload(state: BaselineState, trace: ExecutionTrace, step: TraceStep) -> List[TransferRequest]:
    return [_send_home(state, t, release_only=state.home(t) is Location.NVME)
            for t in _layer_group(state, trace, step)
            if state.placement.location_of[t] is Location.GPU]


def l2l_like_step(state: BaselineState, trace: ExecutionTrace, step: TraceStep) -> List[TransferRequest]:
    return l2l_load(state, trace, step) + l2l_offload(state, trace, step)


def no_offload_step(state: Optional[BaselineState], step: TraceStep) -> List[TransferRequest]:
    return []


# ---------------------------------------------------------------- 方針クラス

class BaselinePolicy(OffloadPolicy):
    def _init_state(self, trace: ExecutionTrace, placement: PlacementState) -> None:
        params = trace.tensors_of(TensorKind.PARAM_FP16)
        self.state = BaselineState(
            placement=placement,
            sizes={t.id: t.size_bytes for t in params},
            table=build_prefetch_table(trace),
            layers={t.id: t.layer for t in params},
            lookahead=int(self.config.zero_lookahead),
        )
        self.state_placement = PlacementState()

    def locations(self) -> Dict[int, Location]:
        merged = dict(self.state.placement.location_of)
        merged.update(self.state_placement.location_of)
        return merged

    def location_of(self, tensor_id: int) -> Location:
        loc = self.state.placement.location_of.get(tensor_id)
        return loc if loc is not None else self.state_placement.location_of[tensor_id]

    @property
    def fp16_in_nvme_count(self) -> int:
        return sum(1 for loc in self.state.placement.final_of.values() if loc is Location.NVME)

    @property
    def mode(self) -> str:
        if self.fp16_in_nvme_count or self.state_placement.nvme_copy:
            return "cpu-gpu-nvme"
        return "cpu-gpu"

    def _attach_optimizer(self, states: List[TensorDescriptor], placement: PlacementState, budget: int,
                          posture: OptimizerPosture) -> None:
        self.state_placement = placement
        self.optimizer = None
        if states:
            self.optimizer = OptimizerStateScheduler(
                placement, [s.id for s in states], {s.id: s.size_bytes for s in states}, budget, posture)


class ZeroInfinityLikePolicy(BaselinePolicy):
    kind = PolicyKind.ZERO_INFINITY_LIKE

    def setup(self, trace: ExecutionTrace, machine: MachineConfig) -> None:
        self.trace = trace
        self.machine = machine
        k = int(self.config.zero_lookahead)
        if k < 0:
            raise ConfigError("zero_lookahead: 0以上である必要があります")

        states = update_order(trace)
        if self.config.zero_optimizer_tier == "cpu":
            state_placement, state_budget = _state_placement(states, machine.cpu_capacity_bytes)
        else:
            state_placement, state_budget = place_optimizer_states(states, 0), 0
        state_cpu = sum(s.size_bytes for s in states if state_placement.location_of[s.id] is Location.CPU)
        staging = max((s.size_bytes for s in states), default=0) if state_placement.nvme_copy else 0
        cpu_left = machine.cpu_capacity_bytes - state_cpu - staging

        params = trace.tensors_of(TensorKind.PARAM_FP16)
        max_step = max((sum(trace.size_of(t) for t in _step_params(trace, s))
                        for s in trace.steps_of(Phase.FORWARD, Phase.BACKWARD)), default=0)
        ws = (k + 1) * max_step
        gpu = machine.gpu_capacity_bytes
        resident = sum(t.size_bytes for t in params)
        offloaded: List[TensorDescriptor] = []
        if resident + ws > gpu:
            for desc in sorted(params, key=lambda d: (-d.size_bytes, d.id)):
                if desc.size_bytes > self.config.zero_persistence_bytes or resident + ws > gpu:
                    offloaded.append(desc)
                    resident -= desc.size_bytes
                else:
                    break
        if resident + ws > gpu:
            raise ConfigError(f"gpu_capacity_bytes: 取得用の作業領域 {ws} バイトを確保できません")

        placement = PlacementState()
        for desc in params:
            placement.location_of[desc.id] = Location.GPU
            placement.final_of[desc.id] = Location.GPU
            placement.window_add(desc.id)
        for desc in offloaded:
            if desc.size_bytes <= cpu_left:
                cpu_left -= desc.size_bytes
                home = Location.CPU
            else:
                home = Location.NVME
                placement.nvme_copy.add(desc.id)
            placement.final_of[desc.id] = home
            placement.move(desc.id, home)
        self._init_state(trace, placement)
        self.state.persistent = {d.id for d in params} - {d.id for d in offloaded}
        self._attach_optimizer(states, state_placement, state_budget, OptimizerPosture.SYNC)
        logger.info(f"ZeRO-Infinity 風: 常駐 {len(self.state.persistent)} / オフロード {len(offloaded)}")

    def before_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER:
            return super().before_step(step)
        return zero_fetch_for_step(self.state, _step_params(self.trace, step))  # type: ignore[arg-type]

    def after_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER:
            return super().after_step(step)
        return zero_release_after_step(self.state, step, _step_params(self.trace, step))  # type: ignore[arg-type]

    def on_iteration_end(self) -> List[TransferRequest]:
        self.state.table.cursor = 0
        return super().on_iteration_end()


class L2LLikePolicy(BaselinePolicy):
    kind = PolicyKind.L2L_LIKE

    def setup(self, trace: ExecutionTrace, machine: MachineConfig) -> None:
        self.trace = trace
        self.machine = machine
        states = update_order(trace)
        reserve = max((s.size_bytes for s in states), default=0)
        params = trace.tensors_of(TensorKind.PARAM_FP16)
        table = build_prefetch_table(trace)
        order = table.first_access_order()
        accessed = set(order)
        order += [d.id for d in sorted(params, key=lambda d: d.id) if d.id not in accessed]

        cpu_left = machine.cpu_capacity_bytes - reserve
        placement = PlacementState()
        for tid in order:
            size = trace.size_of(tid)
            if size <= cpu_left:
                cpu_left -= size
                home = Location.CPU
            else:
                home = Location.NVME
                placement.nvme_copy.add(tid)
            placement.location_of[tid] = home
            placement.final_of[tid] = home
        self._init_state(trace, placement)

        max_group = max((sum(self.state.sizes[t] for t in _layer_group(self.state, trace, s))
                         for s in trace.steps_of(Phase.FORWARD, Phase.BACKWARD)), default=0)
        if max_group > machine.gpu_capacity_bytes:
            raise ConfigError(f"gpu_capacity_bytes: 1レイヤ {max_group} バイトを保持できません")
        param_cpu = machine.cpu_capacity_bytes - reserve - cpu_left
        state_placement, budget = _state_placement(states, machine.cpu_capacity_bytes - param_cpu)
        self._attach_optimizer(states, state_placement, budget, OptimizerPosture.SYNC)

    def before_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER:
            return super().before_step(step)
        return l2l_load(self.state, self.trace, step)  # type: ignore[arg-type]

    def after_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER:
            return super().after_step(step)
        return l2l_offload(self.state, self.trace, step)  # type: ignore[arg-type]


class NoOffloadPolicy(BaselinePolicy):
    kind = PolicyKind.NO_OFFLOAD

    def setup(self, trace: ExecutionTrace, machine: MachineConfig) -> None:
        self.trace = trace
        self.machine = machine
        model_bytes = trace.param_bytes() + trace.state_bytes()
        if model_bytes > machine.gpu_capacity_bytes:
            raise OutOfMemory(
                f"モデル {model_bytes} バイトが GPU 容量 {machine.gpu_capacity_bytes} バイトを超えています"
            )
        params = [t.id for t in trace.tensors_of(TensorKind.PARAM_FP16)]
        self._init_state(trace, uniform_placement(params, Location.GPU))
        states = [t.id for t in trace.tensors_of(TensorKind.OPT_STATE_FP32)]
        self.state_placement = uniform_placement(states, Location.GPU)
        self.optimizer = None

    @property
    def mode(self) -> str:
        return "gpu"

    def before_step(self, step: TraceStep) -> List[TransferRequest]:
        return no_offload_step(self.state, step)

    def after_step(self, step: TraceStep) -> List[TransferRequest]:
        return no_offload_step(self.state, step)


POLICY_CLASSES = {
    PolicyKind.TEN_CACHE: TenCachePolicy,
    PolicyKind.TEN_CACHE_PLUS_OPT: TenCachePlusOptPolicy,
    PolicyKind.TEN_CACHE_NO_PREFETCH: TenCacheNoPrefetchPolicy,
    PolicyKind.ZERO_INFINITY_LIKE: ZeroInfinityLikePolicy,
    PolicyKind.L2L_LIKE: L2LLikePolicy,
    PolicyKind.NO_OFFLOAD: NoOffloadPolicy,
}


def make_policy(kind: "PolicyKind | str", config) -> OffloadPolicy:
    return POLICY_CLASSES[PolicyKind.parse(kind)](config)
