"""
tencache-sim テンソル特性アナライザ

トレースのドライランからプリフェッチテーブルとテンソルサイズ分布を作成します。

主要クラス:
    - PrefetchRow: アクセス1回分の行（順序・テンソル・活性化時刻・現在/最終配置）
    - PrefetchTable: 行リストとカーソル
    - SizeDistribution: サイズ別のバイト比率（有理数で厳密計算）

機能:
    - build_prefetch_table: 順伝播・逆伝播のFP16パラメータアクセス列
    - size_distribution: サイズ分布計算（s·c / Σ s_i·c_i）
    - profile_overhead: ドライラン1回分の模擬コスト
"""
import bisect
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

from core.errors import EmptyCensus
from core.machine import Location
from core.trace import ExecutionTrace, Phase, TensorCensus, TensorKind

logger = logging.getLogger(__name__)


@dataclass
class PrefetchRow:
    order: int
    tensor_id: int
    activation_us: Fraction
    step_index: int
    current_loc: Location = Location.CPU
    final_loc: Location = Location.CPU


@dataclass
class PrefetchTable:
    rows: List[PrefetchRow] = field(default_factory=list)
    cursor: int = 0

    def __post_init__(self):
        self._positions: Dict[int, List[int]] = {}
        self._rows_by_step: Dict[int, List[int]] = {}
        for row in self.rows:
            self._positions.setdefault(row.tensor_id, []).append(row.order)
            self._rows_by_step.setdefault(row.step_index, []).append(row.order)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.rows)

    def tensor_at(self, row: int) -> int:
        return self.rows[row].tensor_id

    def rows_of_step(self, step_index: int) -> List[int]:
        return self._rows_by_step.get(step_index, [])

    def next_use(self, tensor_id: int, start: Optional[int] = None) -> Optional[int]:
        """start 以降で tensor_id が最初に現れる行（なければ None）"""
        start = self.cursor if start is None else start
        positions = self._positions.get(tensor_id, [])
        i = bisect.bisect_left(positions, start)
        return positions[i] if i < len(positions) else None

    def distance(self, tensor_id: int, start: Optional[int] = None) -> int:
        """次回使用までの行数（残りに出現しなければ len+1）"""
        start = self.cursor if start is None else start
        nxt = self.next_use(tensor_id, start)
        return len(self.rows) + 1 if nxt is None else nxt - start

    def first_access_order(self) -> List[int]:
        seen: Dict[int, None] = {}
        for row in self.rows:
            seen.setdefault(row.tensor_id, None)
        return list(seen)

    def set_locations(self, tensor_id: int, current: Location, final: Location) -> None:
        for order in self._positions.get(tensor_id, []):
            self.rows[order].current_loc = current
            self.rows[order].final_loc = final


@dataclass(frozen=True)
class SizeDistribution:
    ratios: Dict[int, Fraction]
    total_size: int

    def as_floats(self) -> Dict[int, float]:
        return {size: float(r) for size, r in self.ratios.items()}


def build_prefetch_table(trace: ExecutionTrace) -> PrefetchTable:
    """1イテレーション分のFP16パラメータアクセスを実行順に並べる

    activation_us はそのステップ開始時点までの累積計算時間（転送待ちは含めない）。
    """
    rows: List[PrefetchRow] = []
    clock = Fraction(0)
    for step in trace.steps:
        if step.phase is Phase.OPTIMIZER:
            continue
        for tid in step.tensor_ids:
            if trace.tensor(tid).kind is TensorKind.PARAM_FP16:
                rows.append(PrefetchRow(len(rows), tid, clock, step.step_index))
        clock += step.compute_us
    logger.debug(f"プリフェッチテーブル作成: {len(rows)} 行")
    return PrefetchTable(rows)


def size_distribution(tc: TensorCensus) -> SizeDistribution:
    """サイズごとの比率 s·c / Σ(s_i·c_i)"""
    if not tc.entries:
        raise EmptyCensus("空のテンソル集計からサイズ分布は計算できません")
    total = sum(size * count for size, count in tc.entries.items())
    ratios = {size: Fraction(size * count, total) for size, count in sorted(tc.entries.items())}
    return SizeDistribution(ratios, total)


def profile_overhead(trace: ExecutionTrace) -> Fraction:
    """ドライラン（オフロードなしの順伝播+逆伝播1回）の模擬コスト(µs)"""
    return sum((s.compute_us for s in trace.steps_of(Phase.FORWARD, Phase.BACKWARD)), Fraction(0))


def profile_overhead_fraction(trace: ExecutionTrace) -> Fraction:
    """ドライランのコストを全イテレーションの計算時間に対する比で返す"""
    denom = trace.iteration_compute_us() * trace.iterations
    if denom == 0:
        return Fraction(0)
    return profile_overhead(trace) / denom
