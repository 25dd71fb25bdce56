"""
tencache-sim テンソルアロケータ（初期配置）

学習開始前に各テンソルの最終配置（GPU/CPU/NVMe）を決め、
アクティブテンソルウィンドウと NVMe コピー集合を初期化します。

主要クラス:
    - PlacementState: 配置状態（現在位置・最終位置・NVMeコピー・ウィンドウ）

機能:
    - place_parameters: 初回アクセス順に GPU → CPU → NVMe の優先度で配置
    - place_optimizer_states: 更新順に CPU 予算まで CPU、残りを NVMe
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set

from core.analyzer import PrefetchTable
from core.bufpool import BufferPlan
from core.machine import Location
from core.trace import TensorDescriptor

logger = logging.getLogger(__name__)


@dataclass
class PlacementState:
    location_of: Dict[int, Location] = field(default_factory=dict)
    final_of: Dict[int, Location] = field(default_factory=dict)
    nvme_copy: Set[int] = field(default_factory=set)
    # 挿入順を保つ集合として dict を使う
    active_window: Dict[int, None] = field(default_factory=dict)
    gpu_param_count_nvme: int = 0

    @property
    def fp16_in_nvme_count(self) -> int:
        return self.gpu_param_count_nvme

    def window(self) -> List[int]:
        return list(self.active_window)

    def in_window(self, tensor_id: int) -> bool:
        return tensor_id in self.active_window

    def window_add(self, tensor_id: int) -> None:
        self.active_window[tensor_id] = None

    def window_remove(self, tensor_id: int) -> None:
        self.active_window.pop(tensor_id, None)

    def move(self, tensor_id: int, dst: Location) -> None:
        self.location_of[tensor_id] = dst
        if dst is Location.GPU:
            self.window_add(tensor_id)
        else:
            self.window_remove(tensor_id)

    def tensors_at(self, location: Location) -> List[int]:
        return [t for t, loc in self.location_of.items() if loc is location]

    def out_of_place(self) -> List[int]:
        return sorted(t for t, loc in self.location_of.items() if self.final_of[t] is not loc)

    def reset_nvme_copy(self) -> None:
        self.nvme_copy = {t for t, loc in self.final_of.items() if loc is Location.NVME}

    def check(self) -> List[str]:
        """ウィンドウ = GPU上のテンソル、NVMeコピー ⊇ NVMe上のテンソル"""
        problems: List[str] = []
        on_gpu = set(self.tensors_at(Location.GPU))
        if on_gpu != set(self.active_window):
            problems.append(f"アクティブウィンドウ {sorted(self.active_window)} と GPU 上のテンソル {sorted(on_gpu)} が不一致です")
        missing = set(self.tensors_at(Location.NVME)) - self.nvme_copy
        if missing:
            problems.append(f"NVMe 上のテンソル {sorted(missing)} が nvme_copy にありません")
        return problems


def place_parameters(table: PrefetchTable, plan: BufferPlan, sizes: Mapping[int, int],
                     order: Optional[Sequence[int]] = None) -> PlacementState:
    """初回アクセス順に、自身のサイズクラスの空きがある最良ティアへ配置する

    order を渡すとその順で配置する（アクセスされないテンソルを末尾に含める場合）。
    """
    gpu_left = dict(plan.gpu_counts)
    cpu_left = dict(plan.cpu_counts)
    state = PlacementState()
    for tid in (table.first_access_order() if order is None else order):
        size = sizes[tid]
        if gpu_left.get(size, 0) > 0:
            gpu_left[size] -= 1
            loc = Location.GPU
        elif cpu_left.get(size, 0) > 0:
            cpu_left[size] -= 1
            loc = Location.CPU
        else:
            loc = Location.NVME
            state.nvme_copy.add(tid)
        state.location_of[tid] = loc
        state.final_of[tid] = loc
        if loc is Location.GPU:
            state.window_add(tid)
        table.set_locations(tid, loc, loc)
    state.gpu_param_count_nvme = len(state.nvme_copy)
    logger.info(
        f"パラメータ配置: GPU {len(state.active_window)} / CPU {len(state.tensors_at(Location.CPU))}"
        f" / NVMe {state.gpu_param_count_nvme}"
    )
    return state


def place_optimizer_states(states: Sequence[TensorDescriptor], cpu_budget_bytes: int) -> PlacementState:
    """更新順の先頭から CPU 予算に収まる分を CPU、以降はすべて NVMe"""
    state = PlacementState()
    remaining = max(0, cpu_budget_bytes)
    spilled = False
    for desc in states:
        if not spilled and desc.size_bytes <= remaining:
            remaining -= desc.size_bytes
            loc = Location.CPU
        else:
            spilled = True
            loc = Location.NVME
            state.nvme_copy.add(desc.id)
        state.location_of[desc.id] = loc
        state.final_of[desc.id] = loc
    logger.info(f"オプティマイザ状態配置: CPU {len(states) - len(state.nvme_copy)} / NVMe {len(state.nvme_copy)}")
    return state


def uniform_placement(tensor_ids: Iterable[int], location: Location) -> PlacementState:
    """全テンソルを同じティアに置いた配置（ベースライン用）"""
    state = PlacementState()
    for tid in tensor_ids:
        state.location_of[tid] = location
        state.final_of[tid] = location
        if location is Location.GPU:
            state.window_add(tid)
        elif location is Location.NVME:
            state.nvme_copy.add(tid)
    return state
