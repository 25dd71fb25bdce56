"""
tencache-sim 離散イベントシミュレーションエンジン

トレース・方針・マシンモデルを結び、学習イテレーションを決定的に再生して
ヒット率・待ち時間分布・利用率・模擬学習時間を集計します。

主要クラス:
    - SimEvent / EventKind: イベント（(time_us, seq) 順に処理）
    - TransferLedger: 転送の受け口（位置・占有量・リンク使用量の台帳）
    - LinkTimeline: リンクの空き時刻を逐次更新するタイムライン
    - HistoryTimeline: 全転送履歴から空き時刻を再計算するタイムライン（参照実装用）
    - SimReport: 集計結果
    - Scenario: 1回の実行条件

機能:
    - run: イベントループによるシミュレーション
    - run_reference: ステップごとに状態を複製して進める参照インタプリタ
    - sweep: パラメータ軸に沿った複数実行（スレッド並列、結果は値の順）
    - sized_machine: FP16 パラメータの一定割合を GPU に収めるマシン構成
"""
import copy
import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from math import floor
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Set, Tuple, Union

from core.analyzer import profile_overhead_fraction
from core.baselines import make_policy
from core.config import SimConfig
from core.errors import ConfigError, SimulationError, SizeGuardExceeded
from core.machine import (
    Link,
    Location,
    MachineConfig,
    MemoryClass,
    link_name,
    to_fraction,
    transfer_legs,
    transfer_time,
)
from core.policy import OffloadPolicy, PolicyKind, TransferKind, TransferRequest
from core.trace import ExecutionTrace, Phase, TraceStep, scale_trace, with_optimizer_rate

logger = logging.getLogger(__name__)

REFERENCE_TENSOR_LIMIT = 64
SWEEP_AXES = ("batch_scale", "gpu_capacity", "cpu_capacity", "pinned")
TIME_LABEL = "simulated compute+stall time"

TENCACHE_KINDS = (PolicyKind.TEN_CACHE, PolicyKind.TEN_CACHE_PLUS_OPT, PolicyKind.TEN_CACHE_NO_PREFETCH)


class EventKind(str, Enum):
    STEP_START = "step_start"
    STEP_END = "step_end"
    ITERATION_END = "iteration_end"


@dataclass(order=True)
class SimEvent:
    time_us: Fraction
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventSink(Protocol):
    def write(self, record: Dict[str, Any]) -> None:
        ...


def rational_out(value: Fraction) -> Union[int, str]:
    """整数ならそのまま、そうでなければ "p/q" 文字列"""
    value = Fraction(value)
    return value.numerator if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


# ---------------------------------------------------------------- 転送台帳

class TransferLedger:
    """転送要求の受け口

    テンソルの位置・ティア占有量（時間積分付き）・リンク別転送量を保持し、
    方針の判断と矛盾する転送（始点が現在位置と異なる）を SimulationError として検出する。
    """

    def __init__(self, machine: MachineConfig, locations: Dict[int, Location], sizes: Dict[int, int],
                 event_log: Optional[EventSink] = None):
        self.machine = machine
        self.location: Dict[int, Location] = dict(locations)
        self.sizes = sizes
        self.event_log = event_log
        self.occupancy: Dict[Location, int] = {loc: 0 for loc in Location}
        for tid, loc in self.location.items():
            self.occupancy[loc] += sizes[tid]
        self.area: Dict[Location, Fraction] = {loc: Fraction(0) for loc in Location}
        self.last_us = Fraction(0)
        self.transfer_bytes: Dict[str, int] = {}
        self.transfer_count = 0
        self.fetched: Set[int] = set()
        self._blocking_until: Optional[Fraction] = None

    # タイムライン（サブクラスで実装）

    def ready_at(self, tensor_id: int) -> Fraction:
        raise NotImplementedError

    def _schedule(self, request: TransferRequest, now_us: Fraction) -> Fraction:
        raise NotImplementedError

    # 台帳

    def integrate_to(self, t_us: Fraction) -> None:
        if t_us <= self.last_us:
            return
        span = t_us - self.last_us
        for loc, used in self.occupancy.items():
            self.area[loc] += used * span
        self.last_us = t_us

    def submit(self, request: TransferRequest, now_us: Fraction) -> Fraction:
        self.integrate_to(now_us)
        tid = request.tensor_id
        current = self.location.get(tid)
        if current is not request.src:
            raise SimulationError(
                f"転送の始点が現在位置と一致しません: テンソル {tid} は {current} にありますが "
                f"{request.src.value} -> {request.dst.value} が要求されました"
            )
        done = self._schedule(request, now_us)
        request.issue_us = now_us
        request.done_us = done
        if not request.release_only:
            for leg in transfer_legs(request.src, request.dst):
                name = link_name(leg)
                self.transfer_bytes[name] = self.transfer_bytes.get(name, 0) + request.size_bytes
            self.transfer_count += 1
        self.occupancy[request.src] -= request.size_bytes
        self.occupancy[request.dst] += request.size_bytes
        self.location[tid] = request.dst
        if request.kind is TransferKind.FETCH:
            self.fetched.add(tid)
        else:
            self.fetched.discard(tid)
        if request.blocking:
            self._blocking_until = done if self._blocking_until is None else max(self._blocking_until, done)
        if self.event_log is not None:
            self.event_log.write({
                "us": rational_out(now_us),
                "kind": "release" if request.release_only else request.kind.value,
                "tensor": tid,
                "src": request.src.value,
                "dst": request.dst.value,
                "size": request.size_bytes,
                "done_us": rational_out(done),
            })
        return done

    def record_stall(self, now_us: Fraction, tensor_id: int, wait_us: Fraction) -> None:
        if self.event_log is not None:
            self.event_log.write({
                "us": rational_out(now_us),
                "kind": "stall",
                "tensor": tensor_id,
                "src": self.location[tensor_id].value,
                "dst": self.location[tensor_id].value,
                "wait_us": rational_out(wait_us),
            })

    def take_blocking(self) -> Optional[Fraction]:
        """前回以降に発行されたブロッキング転送の最遅完了時刻"""
        until, self._blocking_until = self._blocking_until, None
        return until

    def utilization(self, tier: Location, capacity: int, total_us: Fraction) -> Fraction:
        if total_us <= 0 or capacity <= 0:
            return Fraction(0)
        return self.area[tier] / (capacity * total_us)


class LinkTimeline(TransferLedger):
    """リンクごとの空き時刻とテンソルごとの準備完了時刻を逐次更新する"""

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.link_free: Dict[Link, Fraction] = {}
        self.tensor_ready: Dict[int, Fraction] = {}

    def ready_at(self, tensor_id: int) -> Fraction:
        return self.tensor_ready.get(tensor_id, Fraction(0))

    def _schedule(self, request: TransferRequest, now_us: Fraction) -> Fraction:
        cursor = max(now_us, self.ready_at(request.tensor_id))
        if not request.release_only:
            for leg in transfer_legs(request.src, request.dst):
                start = max(cursor, self.link_free.get(leg, Fraction(0)))
                cursor = start + transfer_time(self.machine, leg[0], leg[1], request.size_bytes)
                self.link_free[leg] = cursor
        self.tensor_ready[request.tensor_id] = cursor
        return cursor


class HistoryTimeline(TransferLedger):
    """空き時刻を毎回全履歴の最大値として求め直す"""

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(*args, **kwargs)
        # (tensor_id, [(leg, end_us)], done_us)
        self.history: List[Tuple[int, List[Tuple[Link, Fraction]], Fraction]] = []

    def ready_at(self, tensor_id: int) -> Fraction:
        return max((done for tid, _, done in self.history if tid == tensor_id), default=Fraction(0))

    def _link_free(self, leg: Link) -> Fraction:
        return max((end for _, legs, _ in self.history for used, end in legs if used == leg),
                   default=Fraction(0))

    def _schedule(self, request: TransferRequest, now_us: Fraction) -> Fraction:
        cursor = max(now_us, self.ready_at(request.tensor_id))
        legs: List[Tuple[Link, Fraction]] = []
        if not request.release_only:
            for leg in transfer_legs(request.src, request.dst):
                start = max(cursor, self._link_free(leg))
                cursor = start + transfer_time(self.machine, leg[0], leg[1], request.size_bytes)
                legs.append((leg, cursor))
        self.history.append((request.tensor_id, legs, cursor))
        return cursor


# ---------------------------------------------------------------- 集計

@dataclass
class SimReport:
    policy: str
    mode: str
    total_time_us: Fraction
    iteration_times_us: List[Fraction]
    compute_us: Fraction
    stall_us: Fraction
    hit_rate: Fraction
    param_accesses: int
    param_wait_us: List[Fraction]
    pct_wait_below: Dict[int, Fraction]
    optimizer_accesses: int
    optimizer_misses: int
    optimizer_miss_rate: Fraction
    optimizer_wait_us: Fraction
    gpu_utilization_timeavg: Fraction
    cpu_utilization_timeavg: Fraction
    fp16_in_nvme_count: int
    transfer_bytes: Dict[str, int]
    transfer_count: int
    profile_overhead_fraction: Optional[Fraction] = None

    def to_dict(self) -> Dict[str, Any]:
        """JSON 出力用（時間と率は float）"""
        return {
            "policy": self.policy,
            "mode": self.mode,
            "time_label": TIME_LABEL,
            "total_time_us": float(self.total_time_us),
            "iteration_times_us": [float(t) for t in self.iteration_times_us],
            "compute_us": float(self.compute_us),
            "stall_us": float(self.stall_us),
            "hit_rate": float(self.hit_rate),
            "param_accesses": self.param_accesses,
            "param_wait_us": [float(w) for w in self.param_wait_us],
            "pct_wait_below": {str(k): float(v) for k, v in self.pct_wait_below.items()},
            "optimizer_accesses": self.optimizer_accesses,
            "optimizer_misses": self.optimizer_misses,
            "optimizer_miss_rate": float(self.optimizer_miss_rate),
            "optimizer_wait_us": float(self.optimizer_wait_us),
            "gpu_utilization_timeavg": float(self.gpu_utilization_timeavg),
            "cpu_utilization_timeavg": float(self.cpu_utilization_timeavg),
            "fp16_in_nvme_count": self.fp16_in_nvme_count,
            "transfer_bytes": dict(sorted(self.transfer_bytes.items())),
            "transfer_count": self.transfer_count,
            "profile_overhead_fraction": (None if self.profile_overhead_fraction is None
                                          else float(self.profile_overhead_fraction)),
        }


def _rate(numerator: int, denominator: int) -> Fraction:
    return Fraction(numerator, denominator) if denominator else Fraction(0)


class _Accounting:
    """アクセスごとのヒット/ミスと待ち時間の集計（両ループで共有）"""

    def __init__(self, trace: ExecutionTrace, thresholds: Sequence[Fraction]):
        self.trace = trace
        self.thresholds = list(thresholds)
        self.param_waits: List[Fraction] = []
        self.hits = 0
        self.opt_accesses = 0
        self.opt_misses = 0
        self.opt_wait = Fraction(0)
        self.compute = Fraction(0)
        self.stall = Fraction(0)

    def snapshot(self, step: TraceStep, ledger: TransferLedger) -> Dict[int, Tuple[bool, bool]]:
        """ステップ開始前の (GPU 常駐, 取得フラグ) / 最適化ステップでは (NVMe 上, False)"""
        if step.phase is Phase.OPTIMIZER:
            ids = dict.fromkeys(self.trace.state_ids(step))
            return {t: (ledger.location[t] is Location.NVME, False) for t in ids}
        ids = dict.fromkeys(self.trace.param_ids(step))
        return {t: (ledger.location[t] is Location.GPU, t in ledger.fetched) for t in ids}

    def record(self, step: TraceStep, before: Dict[int, Tuple[bool, bool]], waits: Dict[int, Fraction],
               ledger: TransferLedger, now_us: Fraction) -> Fraction:
        """アクセスを集計し、ストール時間を返す"""
        for tid, wait in waits.items():
            if wait > 0:
                ledger.record_stall(now_us, tid, wait)
        if step.phase is Phase.OPTIMIZER:
            for tid, (in_nvme, _) in before.items():
                self.opt_accesses += 1
                self.opt_misses += int(in_nvme)
                self.opt_wait += waits.get(tid, Fraction(0))
        else:
            for tid, (resident, flagged) in before.items():
                wait = waits.get(tid, Fraction(0))
                self.param_waits.append(wait)
                if wait == 0 and resident and not flagged:
                    self.hits += 1
                ledger.fetched.discard(tid)
        stall = max(waits.values(), default=Fraction(0))
        self.stall += stall
        self.compute += step.compute_us
        return stall

    def report(self, kind: PolicyKind, policy: OffloadPolicy, machine: MachineConfig, ledger: TransferLedger,
               total: Fraction, iteration_times: List[Fraction], trace: ExecutionTrace) -> SimReport:
        ledger.integrate_to(total)
        n = len(self.param_waits)
        pct = {
            rational_out(t): (Fraction(100 * sum(1 for w in self.param_waits if w < t), n) if n else Fraction(0))
            for t in self.thresholds
        }
        return SimReport(
            policy=kind.value,
            mode=policy.mode,
            total_time_us=total,
            iteration_times_us=iteration_times,
            compute_us=self.compute,
            stall_us=self.stall,
            hit_rate=_rate(self.hits, n),
            param_accesses=n,
            param_wait_us=list(self.param_waits),
            pct_wait_below=pct,  # type: ignore[arg-type]
            optimizer_accesses=self.opt_accesses,
            optimizer_misses=self.opt_misses,
            optimizer_miss_rate=_rate(self.opt_misses, self.opt_accesses),
            optimizer_wait_us=self.opt_wait,
            gpu_utilization_timeavg=ledger.utilization(Location.GPU, machine.gpu_capacity_bytes, total),
            cpu_utilization_timeavg=ledger.utilization(Location.CPU, machine.cpu_capacity_bytes, total),
            fp16_in_nvme_count=policy.fp16_in_nvme_count,
            transfer_bytes=dict(sorted(ledger.transfer_bytes.items())),
            transfer_count=ledger.transfer_count,
            profile_overhead_fraction=profile_overhead_fraction(trace) if kind in TENCACHE_KINDS else None,
        )


# ---------------------------------------------------------------- 実行

def _prepare(trace: ExecutionTrace, machine: MachineConfig, policy: Union[PolicyKind, str],
             config: Optional[SimConfig]) -> Tuple[ExecutionTrace, PolicyKind, OffloadPolicy, SimConfig]:
    """設定検証・トレース変換・初期配置（エラーはイベント0の前に送出）"""
    config = config or SimConfig.get_default()
    config.validate()
    kind = PolicyKind.parse(policy)
    trace = with_optimizer_rate(trace, config.optimizer_us_per_byte)
    trace = scale_trace(trace, config.batch_factor())
    instance = make_policy(kind, config)
    try:
        instance.setup(trace, machine)
    except SimulationError as e:
        logger.error(f"方針 {kind.value} の初期化に失敗しました: {e}")
        raise
    return trace, kind, instance, config


def _fb_last_index(trace: ExecutionTrace) -> Optional[int]:
    last = None
    for pos, step in enumerate(trace.steps):
        if step.phase is not Phase.OPTIMIZER:
            last = pos
    return last


def _after_blocking(ledger: TransferLedger, now_us: Fraction) -> Fraction:
    until = ledger.take_blocking()
    return now_us if until is None else max(now_us, until)


def run(trace: ExecutionTrace, machine: MachineConfig, policy: Union[PolicyKind, str],
        config: Optional[SimConfig] = None, event_log: Optional[EventSink] = None) -> SimReport:
    """イベントループでトレースを iterations 回再生する"""
    trace, kind, instance, config = _prepare(trace, machine, policy, config)
    logger.info(f"シミュレーション開始: policy={kind.value} mode={instance.mode} "
                f"tensors={len(trace.tensors)} steps={len(trace.steps)} iterations={trace.iterations}")
    sizes = {t.id: t.size_bytes for t in trace.tensors}
    ledger = LinkTimeline(machine, instance.locations(), sizes, event_log)
    acct = _Accounting(trace, config.thresholds())
    fb_last = _fb_last_index(trace)

    heap: List[SimEvent] = []
    seq = 0

    def push(time_us: Fraction, event_kind: EventKind, payload: Any = None) -> None:
        nonlocal seq
        heapq.heappush(heap, SimEvent(time_us, seq, event_kind, payload))
        seq += 1

    def begin_iteration(iteration: int, t_us: Fraction) -> None:
        if trace.steps:
            push(t_us, EventKind.STEP_START, (iteration, 0))
        else:
            push(t_us, EventKind.ITERATION_END, iteration)

    iteration_times: List[Fraction] = []
    iteration_start = Fraction(0)
    total = Fraction(0)
    if trace.iterations > 0:
        begin_iteration(0, Fraction(0))

    while heap:
        event = heapq.heappop(heap)
        now = event.time_us
        if event.kind is EventKind.STEP_START:
            iteration, pos = event.payload
            step = trace.steps[pos]
            before = acct.snapshot(step, ledger)
            waits = instance.on_step_start(step, now, ledger)
            stall = acct.record(step, before, waits, ledger, now)
            push(now + stall + step.compute_us, EventKind.STEP_END, (iteration, pos))
        elif event.kind is EventKind.STEP_END:
            iteration, pos = event.payload
            step = trace.steps[pos]
            instance.on_step_end(step, now, ledger)
            nxt = _after_blocking(ledger, now)
            if pos == fb_last:
                instance.submit_backward_end(nxt, ledger)
                nxt = _after_blocking(ledger, nxt)
            if pos + 1 < len(trace.steps):
                push(nxt, EventKind.STEP_START, (iteration, pos + 1))
            else:
                push(nxt, EventKind.ITERATION_END, iteration)
        elif event.kind is EventKind.ITERATION_END:
            iteration = event.payload
            instance.submit_iteration_end(now, ledger)
            end = _after_blocking(ledger, now)
            iteration_times.append(end - iteration_start)
            iteration_start = end
            total = end
            logger.debug(f"イテレーション {iteration} 終了: {float(end):.3f} µs")
            if iteration + 1 < trace.iterations:
                begin_iteration(iteration + 1, end)
            else:
                break

    report = acct.report(kind, instance, machine, ledger, total, iteration_times, trace)
    logger.info(f"シミュレーション終了: policy={kind.value} total={float(total):.3f} µs "
                f"hit_rate={float(report.hit_rate):.4f}")
    return report


def _check_conservation(policy: OffloadPolicy, ledger: TransferLedger) -> None:
    locations = policy.locations()
    if locations != ledger.location:
        diff = sorted(t for t in set(locations) | set(ledger.location)
                      if locations.get(t) is not ledger.location.get(t))
        raise SimulationError(f"方針と台帳の位置が一致しません: テンソル {diff}")


def run_reference(trace: ExecutionTrace, machine: MachineConfig, policy: Union[PolicyKind, str],
                  config: Optional[SimConfig] = None) -> SimReport:
    """参照インタプリタ（テスト用の正しさの基準）

    判断のたびに方針の状態を複製してから進め、リンクの空き時刻は全履歴から求め直す。
    方針の判断（先読みと退避の選択）は run と同じコードを通るので、
    突き合わせの対象はイベントループと時刻計算・集計で、判断そのものはゴールデンのイベントログで検査する。
    """
    if len(trace.tensors) > REFERENCE_TENSOR_LIMIT:
        raise SizeGuardExceeded(
            f"参照シミュレータはテンソル {REFERENCE_TENSOR_LIMIT} 個までです ({len(trace.tensors)} 個)"
        )
    trace, kind, instance, config = _prepare(trace, machine, policy, config)
    sizes = {t.id: t.size_bytes for t in trace.tensors}
    ledger = HistoryTimeline(machine, instance.locations(), sizes)
    acct = _Accounting(trace, config.thresholds())
    fb_last = _fb_last_index(trace)

    def snapshot(p: OffloadPolicy) -> OffloadPolicy:
        return copy.deepcopy(p, {id(p.trace): p.trace, id(p.machine): p.machine, id(p.config): p.config})

    now = Fraction(0)
    iteration_times: List[Fraction] = []
    for _ in range(trace.iterations):
        start = now
        for pos, step in enumerate(trace.steps):
            before = acct.snapshot(step, ledger)
            instance = snapshot(instance)
            waits = instance.on_step_start(step, now, ledger)
            _check_conservation(instance, ledger)
            now = now + acct.record(step, before, waits, ledger, now) + step.compute_us

            instance = snapshot(instance)
            instance.on_step_end(step, now, ledger)
            now = _after_blocking(ledger, now)
            if pos == fb_last:
                instance.submit_backward_end(now, ledger)
                now = _after_blocking(ledger, now)
            _check_conservation(instance, ledger)
        instance = snapshot(instance)
        instance.submit_iteration_end(now, ledger)
        now = _after_blocking(ledger, now)
        _check_conservation(instance, ledger)
        iteration_times.append(now - start)
    return acct.report(kind, instance, machine, ledger, now, iteration_times, trace)


# ---------------------------------------------------------------- スイープ

@dataclass(frozen=True)
class Scenario:
    trace: ExecutionTrace
    machine: MachineConfig
    policy: PolicyKind
    config: SimConfig = field(default_factory=SimConfig.get_default)


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "pinned"):
        return True
    if text in ("false", "0", "no", "pageable"):
        return False
    raise ConfigError(f"pinned: 真偽値として解釈できません: {value!r}")


def apply_axis(base: Scenario, axis: str, value: Any) -> Scenario:
    """軸の値を1つ適用した実行条件"""
    if axis == "batch_scale":
        scale = to_fraction(value)
        if scale <= 0:
            raise ConfigError("batch_scale: 正の値が必要です")
        return replace(base, config=replace(base.config, batch_scale=str(scale)))
    if axis == "gpu_capacity":
        return replace(base, machine=base.machine.with_overrides(gpu_capacity_bytes=int(to_fraction(value))))
    if axis == "cpu_capacity":
        return replace(base, machine=base.machine.with_overrides(cpu_capacity_bytes=int(to_fraction(value))))
    if axis == "pinned":
        memory_class = MemoryClass.PINNED if _parse_bool(value) else MemoryClass.PAGEABLE
        return replace(base, machine=base.machine.with_overrides(cpu_memory_class=memory_class))
    raise ConfigError(f"axis: 不明なスイープ軸 {axis!r}（{', '.join(SWEEP_AXES)}）")


def run_scenario(scenario: Scenario, event_log: Optional[EventSink] = None) -> SimReport:
    return run(scenario.trace, scenario.machine, scenario.policy, scenario.config, event_log)


def run_many(scenarios: Sequence[Scenario], workers: Optional[int] = None,
             progress_callback: Optional[Callable[[int, int], None]] = None) -> List[SimReport]:
    """独立した実行を並列に行い、入力順に結果を返す"""
    if not scenarios:
        return []
    workers = workers or scenarios[0].config.sweep_workers
    results: List[Optional[SimReport]] = [None] * len(scenarios)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(run_scenario, s) for s in scenarios]
        for index, future in enumerate(futures):
            try:
                results[index] = future.result()
            except SimulationError as e:
                logger.error(f"実行 {index} ({scenarios[index].policy.value}) が失敗しました: {e}")
                raise
            if progress_callback:
                progress_callback(index + 1, len(scenarios))
    return results  # type: ignore[return-value]


def sweep(base: Scenario, axis: str, values: Sequence[Any], workers: Optional[int] = None,
          progress_callback: Optional[Callable[[int, int], None]] = None) -> List[SimReport]:
    """axis の各値で1回ずつ実行する（結果は values の順）"""
    scenarios = [apply_axis(base, axis, v) for v in values]
    logger.info(f"スイープ開始: axis={axis} values={list(values)} policy={base.policy.value}")
    return run_many(scenarios, workers, progress_callback)


def sized_machine(trace: ExecutionTrace, base: MachineConfig, gpu_param_fraction: Union[Fraction, str, float],
                  cpu_bytes: Optional[int] = None) -> MachineConfig:
    """GPU 容量を FP16 パラメータ総量の gpu_param_fraction 倍（切り捨て）にする"""
    fraction = to_fraction(gpu_param_fraction)
    if fraction <= 0:
        raise ConfigError("gpu_param_fraction: 正の値が必要です")
    changes: Dict[str, Any] = {"gpu_capacity_bytes": floor(fraction * trace.param_bytes())}
    if cpu_bytes is not None:
        changes["cpu_capacity_bytes"] = int(cpu_bytes)
    return base.with_overrides(**changes)
