"""
tencache-sim キャッシュアロケータ（バッファプール）

ティアごとのバッファ数を計画し、連続領域を固定サイズのチャンクに分割して
サイズ別フリーリストで管理します。

主要クラス:
    - BufferPlan: GPU/CPU のサイズ別バッファ数
    - Chunk: 1バッファ（オフセット・サイズ・状態・占有テンソル・GPU指定フラグ）
    - BufferPool: ティア1つ分のプール

機能:
    - plan_buffers: バッファ数の計算（床関数で容量超過を防ぐ）
    - build_pool: サイズクラス昇順に連続配置、フリーリストはオフセット順
    - acquire / release / find_victim
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from math import floor
from typing import Callable, Deque, Dict, List, Mapping, Optional, Tuple

from core.analyzer import SizeDistribution
from core.errors import ConfigError, DoubleRelease, NoFreeBuffer, UnknownSizeClass
from core.machine import Location
from core.trace import TensorCensus

logger = logging.getLogger(__name__)


class ChunkState(str, Enum):
    FREE = "free"
    OCCUPIED = "occupied"


@dataclass
class BufferPlan:
    gpu_counts: Dict[int, int]
    cpu_counts: Dict[int, int]
    gpu_avail_bytes: int
    cpu_avail_bytes: int

    @property
    def gpu_bytes(self) -> int:
        return sum(size * n for size, n in self.gpu_counts.items())

    @property
    def cpu_bytes(self) -> int:
        return sum(size * n for size, n in self.cpu_counts.items())


@dataclass
class Chunk:
    buffer_id: int
    offset: int
    size: int
    state: ChunkState = ChunkState.FREE
    occupant: Optional[int] = None
    gpu_designated: bool = False


@dataclass
class BufferPool:
    tier: Location
    region_bytes: int
    chunks: List[Chunk] = field(default_factory=list)
    free_lists: Dict[int, Deque[int]] = field(default_factory=dict)

    def free_count(self, size: int) -> int:
        return len(self.free_lists.get(size, ()))

    def count(self, size: int) -> int:
        return sum(1 for c in self.chunks if c.size == size)

    def occupied_bytes(self) -> int:
        return sum(c.size for c in self.chunks if c.state is ChunkState.OCCUPIED)

    def occupants(self) -> List[int]:
        return [c.occupant for c in self.chunks if c.state is ChunkState.OCCUPIED and c.occupant is not None]


def plan_buffers(tc: TensorCensus, tsd: SizeDistribution, gpu_avail: int, cpu_avail: int) -> BufferPlan:
    """サイズ別のGPU/CPUバッファ数を計算する

    gpu[s] = min(⌊tsd[s]·gpu_avail / s⌋, c_s)
    cpu[s] = min(⌊tsd[s]·cpu_avail / s⌋, c_s − gpu[s])
    """
    gpu_avail = max(0, gpu_avail)
    cpu_avail = max(0, cpu_avail)
    gpu_counts: Dict[int, int] = {}
    cpu_counts: Dict[int, int] = {}
    for size, count in sorted(tc.entries.items()):
        ratio = tsd.ratios.get(size, 0)
        gpu_counts[size] = min(floor(ratio * gpu_avail / size), count)
        cpu_counts[size] = min(floor(ratio * cpu_avail / size), count - gpu_counts[size])
    return BufferPlan(gpu_counts, cpu_counts, gpu_avail, cpu_avail)


def plan_with_reserve(tc: TensorCensus, tsd: SizeDistribution, reserve: Mapping[int, int],
                      gpu_avail: int, cpu_avail: int) -> BufferPlan:
    """1ステップの作業集合（サイズ別の最大同時使用数）をGPUに確保したうえで plan_buffers を適用する"""
    reserve_bytes = sum(size * n for size, n in reserve.items())
    if reserve_bytes > gpu_avail:
        raise ConfigError(
            f"gpu_capacity_bytes: 1ステップの作業集合 {reserve_bytes} バイトを保持できません (利用可能 {gpu_avail})"
        )
    base = plan_buffers(tc, tsd, gpu_avail - reserve_bytes, cpu_avail)
    gpu_counts: Dict[int, int] = {}
    cpu_counts: Dict[int, int] = {}
    for size, count in sorted(tc.entries.items()):
        gpu_counts[size] = min(base.gpu_counts[size] + reserve.get(size, 0), count)
        cpu_counts[size] = min(base.cpu_counts[size], count - gpu_counts[size])
    return BufferPlan(gpu_counts, cpu_counts, gpu_avail, max(0, cpu_avail))


def build_pool(tier: Location, counts: Mapping[int, int]) -> BufferPool:
    """サイズクラス昇順・インデックス順に連続領域を分割する（最初のチャンクが buffer0）"""
    chunks: List[Chunk] = []
    free_lists: Dict[int, Deque[int]] = {}
    offset = 0
    for size in sorted(counts):
        free_lists[size] = deque()
        for _ in range(counts[size]):
            chunk = Chunk(buffer_id=len(chunks), offset=offset, size=size)
            chunks.append(chunk)
            free_lists[size].append(chunk.buffer_id)
            offset += size
    logger.debug(f"{tier.value} プール構築: {len(chunks)} チャンク / {offset} バイト")
    return BufferPool(tier=tier, region_bytes=offset, chunks=chunks, free_lists=free_lists)


def acquire(pool: BufferPool, size: int, tensor_id: int) -> int:
    """フリーリスト先頭のバッファを tensor_id に割り当てる"""
    if size not in pool.free_lists:
        raise UnknownSizeClass(f"{pool.tier.value} プールにサイズ {size} のクラスがありません")
    queue = pool.free_lists[size]
    if not queue:
        raise NoFreeBuffer(f"{pool.tier.value} プールにサイズ {size} の空きがありません")
    buffer_id = queue.popleft()
    chunk = pool.chunks[buffer_id]
    chunk.state = ChunkState.OCCUPIED
    chunk.occupant = tensor_id
    chunk.gpu_designated = False
    return buffer_id


def try_acquire(pool: BufferPool, size: int, tensor_id: int) -> Optional[int]:
    """空きがなければ None（サイズクラスがなくても None）"""
    if pool.free_count(size) == 0:
        return None
    return acquire(pool, size, tensor_id)


def release(pool: BufferPool, buffer_id: int) -> None:
    """バッファを解放してフリーリスト末尾に戻す"""
    chunk = pool.chunks[buffer_id]
    if chunk.state is ChunkState.FREE:
        raise DoubleRelease(f"{pool.tier.value} バッファ {buffer_id} は既に解放されています")
    chunk.state = ChunkState.FREE
    chunk.occupant = None
    chunk.gpu_designated = False
    pool.free_lists[chunk.size].append(buffer_id)


def mark_designated(pool: BufferPool, buffer_id: int, designated: bool) -> None:
    chunk = pool.chunks[buffer_id]
    if designated and (pool.tier is not Location.CPU or chunk.state is not ChunkState.OCCUPIED):
        raise ValueError("gpu_designated はCPUプールの占有チャンクにのみ設定できます")
    chunk.gpu_designated = designated


def find_victim(pool: BufferPool, size: int, prefer_gpu_designated: bool,
                rank: Optional[Callable[[int], int]] = None) -> Optional[Tuple[int, int]]:
    """退避候補 (buffer_id, tensor_id) を返す

    prefer_gpu_designated=True ならGPU指定の占有チャンクのみを候補にする。
    rank（テンソルID→次回使用までの距離）が大きいものを優先し、同値は低オフセット。
    """
    candidates = [
        c for c in pool.chunks
        if c.size == size and c.state is ChunkState.OCCUPIED and c.occupant is not None
        and (c.gpu_designated or not prefer_gpu_designated)
    ]
    if not candidates:
        return None
    best = min(candidates, key=lambda c: (-(rank(c.occupant) if rank else 0), c.offset))
    return best.buffer_id, best.occupant  # type: ignore[return-value]


def check_pool(pool: BufferPool) -> List[str]:
    """プール不変条件（範囲の互いに素・フリーリスト整合・GPU指定）を検査する"""
    problems: List[str] = []
    extents = sorted((c.offset, c.offset + c.size, c.buffer_id) for c in pool.chunks)
    for (s1, e1, b1), (s2, _, b2) in zip(extents, extents[1:]):
        if s2 < e1:
            problems.append(f"チャンク {b1} と {b2} が重なっています")
    for c in pool.chunks:
        if c.offset < 0 or c.offset + c.size > pool.region_bytes:
            problems.append(f"チャンク {c.buffer_id} が領域外です")
        listed = c.buffer_id in pool.free_lists.get(c.size, ())
        if listed != (c.state is ChunkState.FREE):
            problems.append(f"チャンク {c.buffer_id} のフリーリスト登録と状態が不一致です")
        if c.gpu_designated and (pool.tier is not Location.CPU or c.state is not ChunkState.OCCUPIED):
            problems.append(f"チャンク {c.buffer_id} の gpu_designated が不正です")
    for size, queue in pool.free_lists.items():
        if len(queue) != len(set(queue)):
            problems.append(f"サイズ {size} のフリーリストに重複があります")
    return problems
