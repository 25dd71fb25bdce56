"""
tencache-sim 実行時スケジューラ（TenCache）

プリフェッチテーブルに従ってFP16パラメータのプリフェッチと退避を行い、
最適化ステップではオプティマイザ状態の CPU/NVMe 間の入れ替えを行います。

主要クラス:
    - SchedulerState: スケジューラ状態（モード・テーブル・配置・プール）
    - OptimizerStateScheduler: オプティマイザ状態の常駐/同期/非同期スケジュール
    - TenCachePolicy / TenCachePlusOptPolicy / TenCacheNoPrefetchPolicy

機能:
    - prefetch_tensor: 完了したテンソルを退避し、テーブル上の次のテンソルを GPU へ
    - evict_tensor: GPU から CPU（満杯なら CPU 上の犠牲テンソルを NVMe へ）
    - halt_check: 逆伝播の直前に必要なテンソルがすべて GPU にあるときの停止判定
    - on_step_start: 非常駐テンソルのデマンドフェッチと待ち時間
    - restore_final_locations: イテレーション境界で最終配置へ戻す
"""
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Deque, Dict, FrozenSet, List, Mapping, Optional, Sequence, Set, Tuple

from core.analyzer import PrefetchTable, build_prefetch_table, size_distribution
from core.bufpool import (
    BufferPlan,
    BufferPool,
    build_pool,
    check_pool,
    find_victim,
    mark_designated,
    plan_buffers,
    plan_with_reserve,
    release,
    try_acquire,
)
from core.errors import AccessToUnplacedTensor, SimulationError
from core.machine import Location, MachineConfig
from core.placement import PlacementState, place_optimizer_states, place_parameters
from core.policy import OffloadPolicy, PolicyKind, TransferKind, TransferRequest, TransferSink
from core.trace import ExecutionTrace, Phase, TensorDescriptor, TensorKind, TraceStep, tensor_census

logger = logging.getLogger(__name__)


class SchedulerMode(str, Enum):
    CPU_GPU = "cpu-gpu"
    CPU_GPU_NVME = "cpu-gpu-nvme"


@dataclass
class SchedulerState:
    mode: SchedulerMode
    table: PrefetchTable
    placement: PlacementState
    pools: Dict[Location, BufferPool]
    sizes: Dict[int, int]
    halt_rule: bool = True
    halted: bool = False
    current_step: FrozenSet[int] = frozenset()
    held: Dict[Location, Dict[int, int]] = field(
        default_factory=lambda: {Location.GPU: {}, Location.CPU: {}})

    def check(self) -> List[str]:
        problems = self.placement.check()
        for tier, pool in self.pools.items():
            problems.extend(f"{tier.value}: {p}" for p in check_pool(pool))
        for occupant in self.pools[Location.GPU].occupants():
            if not self.placement.in_window(occupant):
                problems.append(f"GPU バッファの占有テンソル {occupant} がアクティブウィンドウにありません")
        return problems


# ---------------------------------------------------------------- バッファ操作

def _take(state: SchedulerState, tier: Location, tensor_id: int) -> bool:
    bid = try_acquire(state.pools[tier], state.sizes[tensor_id], tensor_id)
    if bid is None:
        return False
    state.held[tier][tensor_id] = bid
    return True


def _drop(state: SchedulerState, tier: Location, tensor_id: int) -> None:
    release(state.pools[tier], state.held[tier].pop(tensor_id))


def _move(state: SchedulerState, tensor_id: int, dst: Location, kind: TransferKind,
          release_only: bool = False, blocking: bool = False) -> TransferRequest:
    src = state.placement.location_of[tensor_id]
    state.placement.move(tensor_id, dst)
    return TransferRequest(tensor_id, src, dst, state.sizes[tensor_id], kind, release_only, blocking)


def _to_nvme(state: SchedulerState, tensor_id: int, kind: TransferKind) -> TransferRequest:
    """NVMe へ移す（有効なコピーがあれば解放のみ、なければ書き込んでコピーを作る）"""
    if tensor_id in state.placement.nvme_copy:
        return _move(state, tensor_id, Location.NVME, kind, release_only=True)
    state.placement.nvme_copy.add(tensor_id)
    return _move(state, tensor_id, Location.NVME, kind)


def _cpu_victim(state: SchedulerState, size: int) -> Optional[Tuple[int, int]]:
    pool = state.pools[Location.CPU]
    rank = state.table.distance
    return find_victim(pool, size, True, rank) or find_victim(pool, size, False, rank)


# ---------------------------------------------------------------- 退避・プリフェッチ

def evict_tensor(state: SchedulerState, evict_tensor_id: int,
                 kind: TransferKind = TransferKind.EVICT) -> List[TransferRequest]:
    """GPU 上のテンソルを退避する

    最終配置が NVMe なら GPU バッファを解放するだけ。それ以外は CPU バッファを
    (a) 空き (b) GPU指定の占有 (c) 任意の占有 の順で確保し、(b)(c) の占有テンソルは NVMe へ。
    CPU-GPU モードで CPU に空きがなければ退避を見送り、テンソルはウィンドウに残る。
    """
    x = evict_tensor_id
    pl = state.placement
    if pl.location_of.get(x) is not Location.GPU:
        raise SimulationError(f"テンソル {x} は GPU 上にないため退避できません")
    requests: List[TransferRequest] = []

    if pl.final_of[x] is Location.NVME:
        _drop(state, Location.GPU, x)
        requests.append(_to_nvme(state, x, kind))
        return requests

    size = state.sizes[x]
    cpu_pool = state.pools[Location.CPU]
    if not _take(state, Location.CPU, x):
        if state.mode is not SchedulerMode.CPU_GPU_NVME:
            pl.window_add(x)
            logger.debug(f"CPU に空きがないためテンソル {x} の退避を見送りました")
            return requests
        if cpu_pool.count(size) == 0:
            # CPU にこのサイズクラスがない: ステージング経由で直接 NVMe へ
            _drop(state, Location.GPU, x)
            requests.append(_to_nvme(state, x, kind))
            return requests
        victim = _cpu_victim(state, size)
        if victim is None:
            raise SimulationError(f"サイズ {size} の CPU 犠牲テンソルが見つかりません")
        _, v = victim
        _drop(state, Location.CPU, v)
        requests.append(_to_nvme(state, v, TransferKind.EVICT))
        logger.debug(f"CPU 満杯: テンソル {v} を NVMe へ退避してテンソル {x} の領域を確保")
        _take(state, Location.CPU, x)

    if pl.final_of[x] is Location.GPU:
        mark_designated(cpu_pool, state.held[Location.CPU][x], True)
    requests.append(_move(state, x, Location.CPU, kind))
    _drop(state, Location.GPU, x)
    return requests


def _peek(state: SchedulerState) -> Optional[int]:
    """ウィンドウ内のテンソルの行を読み飛ばし、次の候補行を返す（カーソルを進める）"""
    table = state.table
    while not table.exhausted and state.placement.in_window(table.tensor_at(table.cursor)):
        table.cursor += 1
    return None if table.exhausted else table.cursor


def _internal_victim(state: SchedulerState, y: int, row: int) -> Optional[int]:
    """y と同じサイズクラスで、y より後に使われるウィンドウ内テンソル（最遠、同値は小さいID）"""
    size = state.sizes[y]
    dy = state.table.distance(y, row)
    candidates = [
        z for z in state.placement.window()
        if z != y and state.sizes[z] == size and z not in state.current_step
        and state.table.distance(z, row) > dy
    ]
    if not candidates:
        return None
    return min(candidates, key=lambda z: (-state.table.distance(z, row), z))


def prefetch_tensor(state: SchedulerState, evicted_tensor_list: Sequence[int]) -> List[TransferRequest]:
    """完了したテンソルを退避し、テーブル上で次に必要なテンソルを GPU へ送る"""
    requests: List[TransferRequest] = []
    pl = state.placement
    for x in evicted_tensor_list:
        if state.table.exhausted:
            break
        pl.window_remove(x)
        row = _peek(state)
        if row is None:
            requests.extend(evict_tensor(state, x))
            continue
        y = state.table.tensor_at(row)
        if y == x:
            pl.window_add(x)
            state.table.cursor = row + 1
            continue

        y_loc = pl.location_of[y]
        if y_loc is Location.CPU:
            # y の CPU バッファを x に受け渡す
            _drop(state, Location.CPU, y)
        requests.extend(evict_tensor(state, x))

        got = _take(state, Location.GPU, y)
        if not got:
            z = _internal_victim(state, y, row)
            if z is not None:
                pl.window_remove(z)
                requests.extend(evict_tensor(state, z))
                got = _take(state, Location.GPU, y)
        if got:
            requests.append(_move(state, y, Location.GPU, TransferKind.PREFETCH))
        else:
            logger.debug(f"GPU に空きがないためテンソル {y} のプリフェッチを見送りました")
            if y_loc is Location.CPU:
                _take(state, Location.CPU, y)
                if pl.final_of[y] is Location.GPU:
                    mark_designated(state.pools[Location.CPU], state.held[Location.CPU][y], True)
        state.table.cursor = row + 1
    return requests


def halt_check(state: SchedulerState) -> bool:
    """カーソル以降の先頭 max(1, |W|) 個の相異なるテンソルがすべてウィンドウ内なら停止"""
    if not state.halt_rule:
        return False
    needed = max(1, len(state.placement.active_window))
    seen: Set[int] = set()
    table = state.table
    for row in range(table.cursor, len(table)):
        tid = table.tensor_at(row)
        if not state.placement.in_window(tid):
            return False
        seen.add(tid)
        if len(seen) >= needed:
            return True
    return True


def advance_cursor(state: SchedulerState, step: TraceStep) -> None:
    rows = state.table.rows_of_step(step.step_index)
    if rows:
        state.table.cursor = max(state.table.cursor, rows[-1] + 1)


def schedule_after_step(state: SchedulerState, step: TraceStep) -> List[TransferRequest]:
    """ステップ完了時のフック: テンソルごとに停止判定してからプリフェッチ"""
    ids = [t for t in dict.fromkeys(step.tensor_ids) if t in state.sizes]
    state.current_step = frozenset(ids)
    advance_cursor(state, step)
    requests: List[TransferRequest] = []
    for tid in ids:
        state.halted = halt_check(state)
        if state.halted or not state.placement.in_window(tid):
            continue
        requests.extend(prefetch_tensor(state, [tid]))
    return requests


def _demand_victim(state: SchedulerState, y: int, tried: Set[int]) -> Optional[int]:
    size = state.sizes[y]
    candidates = [
        z for z in state.placement.window()
        if state.sizes[z] == size and z not in state.current_step and z not in tried
    ]
    if not candidates:
        return None
    return min(candidates, key=lambda z: (-state.table.distance(z), z))


def demand_fetch(state: SchedulerState, tensor_ids: Sequence[int]) -> List[TransferRequest]:
    """GPU にないテンソルをアクセス時に取得する（空きがなければ最遠使用のテンソルを退避）"""
    requests: List[TransferRequest] = []
    pl = state.placement
    for y in tensor_ids:
        y_loc = pl.location_of.get(y)
        if y_loc is None:
            raise AccessToUnplacedTensor(f"テンソル {y} は配置されていません")
        if y_loc is Location.GPU:
            continue
        if y_loc is Location.CPU:
            _drop(state, Location.CPU, y)
        tried: Set[int] = set()
        while not _take(state, Location.GPU, y):
            z = _demand_victim(state, y, tried)
            if z is None:
                raise AccessToUnplacedTensor(f"テンソル {y} を GPU に置くバッファを確保できません")
            tried.add(z)
            pl.window_remove(z)
            requests.extend(evict_tensor(state, z))
        requests.append(_move(state, y, Location.GPU, TransferKind.FETCH))
        logger.debug(f"デマンドフェッチ: テンソル {y} ({y_loc.value} -> gpu)")
    return requests


def on_step_start(state: SchedulerState, step: TraceStep, now_us: Fraction,
                  sink: TransferSink) -> Dict[int, Fraction]:
    """アクセスするパラメータの待ち時間（転送完了までの残り時間）を返す"""
    ids = [t for t in dict.fromkeys(step.tensor_ids) if t in state.sizes]
    state.current_step = frozenset(ids)
    for request in demand_fetch(state, ids):
        sink.submit(request, now_us)
    return {t: max(Fraction(0), sink.ready_at(t) - now_us) for t in ids}


def restore_final_locations(state: SchedulerState, blocking: bool = False) -> List[TransferRequest]:
    """全パラメータを最終配置へ戻し、NVMe コピー集合とカーソルを初期化する"""
    pl = state.placement
    movers = pl.out_of_place()
    for tid in movers:
        for tier in (Location.GPU, Location.CPU):
            if tid in state.held[tier]:
                _drop(state, tier, tid)
    requests: List[TransferRequest] = []
    for tid in movers:
        dst = pl.final_of[tid]
        if dst is Location.NVME:
            requests.append(_to_nvme(state, tid, TransferKind.RESTORE))
            requests[-1].blocking = blocking
            continue
        if not _take(state, dst, tid):
            raise SimulationError(f"テンソル {tid} を最終配置 {dst.value} に戻せません")
        requests.append(_move(state, tid, dst, TransferKind.RESTORE, blocking=blocking))
    for chunk in state.pools[Location.CPU].chunks:
        chunk.gpu_designated = False
    pl.reset_nvme_copy()
    state.table.cursor = 0
    state.halted = False
    if requests:
        logger.debug(f"最終配置への復元: {len(requests)} 件")
    return requests


# ---------------------------------------------------------------- 構築

def working_set(trace: ExecutionTrace) -> Dict[int, int]:
    """サイズクラスごとの1ステップ内の最大同時使用数"""
    need: Dict[int, int] = {}
    for step in trace.steps_of(Phase.FORWARD, Phase.BACKWARD):
        counts = Counter(trace.size_of(t) for t in dict.fromkeys(trace.param_ids(step)))
        for size, n in counts.items():
            need[size] = max(need.get(size, 0), n)
    return need


def update_order(trace: ExecutionTrace) -> List[TensorDescriptor]:
    """オプティマイザ状態を更新順に並べる（更新されない状態はID順で末尾）"""
    ordered: Dict[int, None] = {}
    for step in trace.steps_of(Phase.OPTIMIZER):
        for sid in trace.state_ids(step):
            ordered.setdefault(sid, None)
    for desc in sorted(trace.tensors_of(TensorKind.OPT_STATE_FP32), key=lambda d: d.id):
        ordered.setdefault(desc.id, None)
    return [trace.tensor(sid) for sid in ordered]


def build_scheduler_state(trace: ExecutionTrace, machine: MachineConfig,
                          halt_rule: bool = True) -> Tuple[SchedulerState, BufferPlan]:
    """FP16 パラメータのバッファ計画・配置・プール初期化"""
    params = trace.tensors_of(TensorKind.PARAM_FP16)
    sizes = {t.id: t.size_bytes for t in params}
    table = build_prefetch_table(trace)
    tc = tensor_census(trace, TensorKind.PARAM_FP16)
    staging = sum(tc.sizes())
    cpu_avail = machine.cpu_capacity_bytes - staging
    if tc.entries:
        plan = plan_with_reserve(tc, size_distribution(tc), working_set(trace),
                                 machine.gpu_capacity_bytes, cpu_avail)
    else:
        plan = BufferPlan({}, {}, machine.gpu_capacity_bytes, max(0, cpu_avail))

    order = table.first_access_order()
    accessed = set(order)
    order += [t.id for t in sorted(params, key=lambda d: d.id) if t.id not in accessed]
    placement = place_parameters(table, plan, sizes, order=order)
    mode = SchedulerMode.CPU_GPU_NVME if placement.nvme_copy else SchedulerMode.CPU_GPU
    pools = {
        Location.GPU: build_pool(Location.GPU, plan.gpu_counts),
        Location.CPU: build_pool(Location.CPU, plan.cpu_counts),
    }
    state = SchedulerState(mode, table, placement, pools, sizes, halt_rule=halt_rule)
    for tid in order:
        loc = placement.location_of[tid]
        if loc is not Location.NVME:
            _take(state, loc, tid)
    logger.info(f"スケジューラ初期化: モード {mode.value} / テーブル {len(table)} 行")
    return state, plan


def optimizer_budget(trace: ExecutionTrace, cpu_avail: int) -> int:
    """FP32 状態に使える CPU バイト数（FP16 と同じ計算で求めた計画の合計）"""
    tc = tensor_census(trace, TensorKind.OPT_STATE_FP32)
    if not tc.entries:
        return 0
    if tc.total_bytes > cpu_avail:
        # NVMe から読み込む状態1つ分を空けておく
        cpu_avail -= max(tc.sizes())
    plan = plan_buffers(tc, size_distribution(tc), 0, max(0, cpu_avail))
    return plan.cpu_bytes


# ---------------------------------------------------------------- オプティマイザ状態

class OptimizerPosture(str, Enum):
    RESIDENT = "resident"
    SYNC = "sync"
    ASYNC = "async"


class OptimizerStateScheduler:
    """オプティマイザ状態の CPU/NVMe スケジュール

    RESIDENT: すべて CPU 常駐
    SYNC: NVMe 上の状態はアクセス時に読み込み、更新後に同期書き戻し
    ASYNC: 更新を終えた CPU 上の状態を書き戻して空きを作り、未取得の NVMe 状態を先読みする
    """

    def __init__(self, placement: PlacementState, order: Sequence[int], sizes: Mapping[int, int],
                 budget_bytes: int, posture: OptimizerPosture):
        self.placement = placement
        self.order = list(order)
        self.sizes = dict(sizes)
        self.budget_bytes = budget_bytes
        self.posture = posture if placement.nvme_copy else OptimizerPosture.RESIDENT
        self._pending: Deque[int] = deque()
        self._demand: Set[int] = set()
        self._reset_pending()
        self.logger = logging.getLogger(__name__)

    def _reset_pending(self) -> None:
        self._pending = deque(s for s in self.order if self.placement.final_of[s] is Location.NVME)
        self._demand = set()

    def _move(self, sid: int, dst: Location, kind: TransferKind, blocking: bool = False) -> TransferRequest:
        src = self.placement.location_of[sid]
        self.placement.location_of[sid] = dst
        return TransferRequest(sid, src, dst, self.sizes[sid], kind, blocking=blocking)

    def cpu_bytes(self) -> int:
        return sum(self.sizes[s] for s, loc in self.placement.location_of.items() if loc is Location.CPU)

    def free_bytes(self) -> int:
        return self.budget_bytes - self.cpu_bytes()

    def is_resident(self, sid: int) -> bool:
        return self.placement.location_of[sid] is not Location.NVME

    def before_update(self, state_ids: Sequence[int]) -> List[TransferRequest]:
        requests: List[TransferRequest] = []
        for sid in state_ids:
            if self.placement.location_of[sid] is Location.NVME:
                if sid in self._pending:
                    self._pending.remove(sid)
                self._demand.add(sid)
                requests.append(self._move(sid, Location.CPU, TransferKind.FETCH))
        return requests

    def after_update(self, state_ids: Sequence[int]) -> List[TransferRequest]:
        requests: List[TransferRequest] = []
        for sid in state_ids:
            if sid in self._demand:
                self._demand.discard(sid)
                requests.append(self._move(sid, Location.NVME, TransferKind.WRITEBACK,
                                           blocking=self.posture is OptimizerPosture.SYNC))
            elif (self.posture is OptimizerPosture.ASYNC and self._pending
                  and self.placement.location_of[sid] is Location.CPU):
                requests.append(self._move(sid, Location.NVME, TransferKind.WRITEBACK))
            if self.posture is OptimizerPosture.ASYNC:
                requests.extend(self._prefetch_pending())
        return requests

    def _prefetch_pending(self) -> List[TransferRequest]:
        requests: List[TransferRequest] = []
        while self._pending and self.sizes[self._pending[0]] <= self.free_bytes():
            sid = self._pending.popleft()
            requests.append(self._move(sid, Location.CPU, TransferKind.PREFETCH))
        return requests

    def restore(self) -> List[TransferRequest]:
        """書き戻しを先に、読み込みを後に発行して最終配置へ戻す"""
        movers = self.placement.out_of_place()
        requests = [self._move(s, Location.NVME, TransferKind.RESTORE)
                    for s in movers if self.placement.final_of[s] is Location.NVME]
        requests += [self._move(s, Location.CPU, TransferKind.RESTORE)
                     for s in movers if self.placement.final_of[s] is Location.CPU]
        self._reset_pending()
        return requests


def optimizer_step_schedule(scheduler: OptimizerStateScheduler,
                            states_in_update_order: Sequence[int]) -> List[TransferRequest]:
    """最適化フェーズ全体の転送列（状態ごとに アクセス → 更新後処理）"""
    requests: List[TransferRequest] = []
    for sid in states_in_update_order:
        requests.extend(scheduler.before_update([sid]))
        requests.extend(scheduler.after_update([sid]))
    return requests


# ---------------------------------------------------------------- 方針

class TenCachePolicy(OffloadPolicy):
    """TenCache: プリフェッチテーブル駆動のパラメータキャッシュ"""

    kind = PolicyKind.TEN_CACHE
    prefetch = True
    optimizer_posture = OptimizerPosture.SYNC

    def setup(self, trace: ExecutionTrace, machine: MachineConfig) -> None:
        self.trace = trace
        self.machine = machine
        self.state, plan = build_scheduler_state(trace, machine, halt_rule=self.config.halt_rule)
        staging = sum(tensor_census(trace, TensorKind.PARAM_FP16).sizes())
        cpu_left = machine.cpu_capacity_bytes - staging - plan.cpu_bytes
        states = update_order(trace)
        budget = optimizer_budget(trace, cpu_left)
        self.state_placement = place_optimizer_states(states, budget)
        self.optimizer = None
        if states:
            self.optimizer = OptimizerStateScheduler(
                self.state_placement, [s.id for s in states],
                {s.id: s.size_bytes for s in states}, budget, self.optimizer_posture)

    def locations(self) -> Dict[int, Location]:
        merged = dict(self.state.placement.location_of)
        merged.update(self.state_placement.location_of)
        return merged

    def location_of(self, tensor_id: int) -> Location:
        loc = self.state.placement.location_of.get(tensor_id)
        return loc if loc is not None else self.state_placement.location_of[tensor_id]

    @property
    def mode(self) -> str:
        return self.state.mode.value

    @property
    def fp16_in_nvme_count(self) -> int:
        return self.state.placement.gpu_param_count_nvme

    def on_step_start(self, step: TraceStep, now_us: Fraction, sink: TransferSink) -> Dict[int, Fraction]:
        if step.phase is Phase.OPTIMIZER:
            return super().on_step_start(step, now_us, sink)
        return on_step_start(self.state, step, now_us, sink)

    def after_step(self, step: TraceStep) -> List[TransferRequest]:
        if step.phase is Phase.OPTIMIZER:
            return super().after_step(step)
        if not self.prefetch:
            advance_cursor(self.state, step)
            return []
        return schedule_after_step(self.state, step)

    def on_backward_end(self) -> List[TransferRequest]:
        if self.config.restore_overlap:
            return restore_final_locations(self.state)
        return []

    def on_iteration_end(self) -> List[TransferRequest]:
        requests: List[TransferRequest] = []
        if not self.config.restore_overlap:
            requests += restore_final_locations(self.state, blocking=True)
        return requests + super().on_iteration_end()


class TenCachePlusOptPolicy(TenCachePolicy):
    """TenCache + オプティマイザ状態の非同期先読み"""

    kind = PolicyKind.TEN_CACHE_PLUS_OPT
    optimizer_posture = OptimizerPosture.ASYNC


class TenCacheNoPrefetchPolicy(TenCachePolicy):
    """プリフェッチなし（デマンドフェッチのみ）の基本キャッシュ"""

    kind = PolicyKind.TEN_CACHE_NO_PREFETCH
    prefetch = False
