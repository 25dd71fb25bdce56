"""実行時スケジューラ（プリフェッチ・退避・停止判定・オプティマイザ状態）のテスト"""
from fractions import Fraction

import pytest

from core.analyzer import PrefetchRow, PrefetchTable
from core.bufpool import acquire, build_pool, mark_designated
from core.engine import LinkTimeline
from core.machine import Location, default_machine, transfer_time
from core.placement import PlacementState, place_optimizer_states
from core.policy import TransferKind
from core.scheduler import (
    OptimizerPosture,
    OptimizerStateScheduler,
    SchedulerMode,
    SchedulerState,
    build_scheduler_state,
    demand_fetch,
    on_step_start,
    optimizer_budget,
    optimizer_step_schedule,
    prefetch_tensor,
    restore_final_locations,
    schedule_after_step,
    working_set,
)
from core.trace import Phase, SizeProfile, TensorDescriptor, TensorKind, synthesize_transformer_trace

GPU, CPU, NVME = Location.GPU, Location.CPU, Location.NVME
EVICT, PREFETCH, FETCH = TransferKind.EVICT, TransferKind.PREFETCH, TransferKind.FETCH


def moves(requests):
    return [(r.kind, r.tensor_id, r.src, r.dst) for r in requests]


def six_tensor_setup(halt_rule=True):
    """1レイヤ1テンソル×6、GPU 3個・CPU 3個分（CPU はステージング1個分を加える）"""
    trace = synthesize_transformer_trace(6, 1, SizeProfile.fixed(512), 1, 0, include_optimizer=False)
    machine = default_machine().with_overrides(gpu_capacity_bytes=3 * 512, cpu_capacity_bytes=4 * 512)
    state, plan = build_scheduler_state(trace, machine, halt_rule=halt_rule)
    return trace, state, plan


class TestBuild:
    def test_plan_and_placement(self):
        _, state, plan = six_tensor_setup()
        assert plan.gpu_counts == {512: 3}
        assert plan.cpu_counts == {512: 3}
        assert state.mode is SchedulerMode.CPU_GPU
        assert [state.placement.location_of[i] for i in range(1, 7)] == [GPU] * 3 + [CPU] * 3
        assert state.check() == []

    def test_working_set(self):
        trace = synthesize_transformer_trace(2, 3, SizeProfile.cycle([512, 1024]), 1, 0)
        assert working_set(trace) == {512: 2, 1024: 2}

    def test_nvme_mode_when_params_overflow(self):
        trace = synthesize_transformer_trace(6, 1, SizeProfile.fixed(512), 1, 0, include_optimizer=False)
        machine = default_machine().with_overrides(gpu_capacity_bytes=2 * 512, cpu_capacity_bytes=3 * 512)
        state, _ = build_scheduler_state(trace, machine)
        assert state.mode is SchedulerMode.CPU_GPU_NVME
        assert state.placement.fp16_in_nvme_count == 2

    def test_optimizer_budget_reserves_one_state(self):
        trace = synthesize_transformer_trace(2, 1, SizeProfile.fixed(100), 1, 0)
        # 状態 600B ×2: 全部は入らないので最大状態1つ分を空ける
        assert optimizer_budget(trace, 1000) == 0
        assert optimizer_budget(trace, 1200) == 1200
        assert optimizer_budget(trace, 1500) == 1200


class TestPrefetchGolden:
    def test_forward_and_backward_schedule(self):
        trace, state, _ = six_tensor_setup()
        expected = [
            [(EVICT, 1, GPU, CPU), (PREFETCH, 4, CPU, GPU)],
            [(EVICT, 2, GPU, CPU), (PREFETCH, 5, CPU, GPU)],
            [(EVICT, 3, GPU, CPU), (PREFETCH, 6, CPU, GPU)],
            [], [], [],
            [(EVICT, 6, GPU, CPU), (PREFETCH, 3, CPU, GPU)],
            [(EVICT, 5, GPU, CPU), (PREFETCH, 2, CPU, GPU)],
            [(EVICT, 4, GPU, CPU), (PREFETCH, 1, CPU, GPU)],
            [], [], [],
        ]
        for step, want in zip(trace.steps_of(Phase.FORWARD, Phase.BACKWARD), expected):
            assert moves(schedule_after_step(state, step)) == want, f"step {step.step_index}"
            assert state.check() == []
        assert set(state.placement.window()) == {1, 2, 3}
        assert state.placement.out_of_place() == []

    def test_halt_at_end_of_forward(self):
        trace, state, _ = six_tensor_setup()
        for step in trace.steps[:4]:
            schedule_after_step(state, step)
        assert state.halted
        assert set(state.placement.window()) == {4, 5, 6}

    def test_evicted_forward_tensors_are_designated(self):
        trace, state, _ = six_tensor_setup()
        for step in trace.steps[:3]:
            schedule_after_step(state, step)
        cpu = state.pools[CPU]
        designated = {c.occupant for c in cpu.chunks if c.gpu_designated}
        assert designated == {1, 2, 3}

    def test_without_halt_rule_backward_tensors_are_evicted(self):
        trace, state, _ = six_tensor_setup(halt_rule=False)
        for step in trace.steps[:4]:
            schedule_after_step(state, step)
        assert moves(schedule_after_step(state, trace.steps[4])) == [
            (EVICT, 5, GPU, CPU), (PREFETCH, 3, CPU, GPU)]


def nvme_state():
    """A=512 (1,3,5,6) / B=1024 (2,4,7)。GPU {4,5,6}、CPU {1,2,3}（GPU指定）、NVMe {7}"""
    sizes = {1: 512, 2: 1024, 3: 512, 4: 1024, 5: 512, 6: 512, 7: 1024}
    order = [1, 2, 3, 4, 7, 4, 5, 6, 3, 2, 1]
    table = PrefetchTable([PrefetchRow(i, t, Fraction(i), i) for i, t in enumerate(order)])
    table.cursor = 4
    final = {1: GPU, 2: GPU, 3: GPU, 4: CPU, 5: CPU, 6: CPU, 7: NVME}
    current = {1: CPU, 2: CPU, 3: CPU, 4: GPU, 5: GPU, 6: GPU, 7: NVME}
    placement = PlacementState(location_of=dict(current), final_of=final, nvme_copy={7})
    pools = {GPU: build_pool(GPU, {512: 2, 1024: 1}), CPU: build_pool(CPU, {512: 2, 1024: 1})}
    state = SchedulerState(SchedulerMode.CPU_GPU_NVME, table, placement, pools, sizes)
    for tid in (4, 5, 6):
        state.held[GPU][tid] = acquire(pools[GPU], sizes[tid], tid)
        placement.window_add(tid)
    for tid in (1, 2, 3):
        state.held[CPU][tid] = acquire(pools[CPU], sizes[tid], tid)
        mark_designated(pools[CPU], state.held[CPU][tid], True)
    assert state.check() == []
    return state


class TestNvmeGolden:
    def test_cpu_full_evicts_designated_victim_to_nvme(self):
        state = nvme_state()
        requests = prefetch_tensor(state, [4])
        assert moves(requests) == [(EVICT, 2, CPU, NVME), (EVICT, 4, GPU, CPU), (PREFETCH, 7, NVME, GPU)]
        assert not requests[0].release_only
        assert requests[2].via_cpu_staging
        assert 2 in state.placement.nvme_copy
        assert state.table.cursor == 5
        assert state.check() == []

    def test_nvme_final_tensor_is_released(self):
        state = nvme_state()
        prefetch_tensor(state, [4])
        requests = prefetch_tensor(state, [7])
        assert moves(requests) == [(EVICT, 7, GPU, NVME), (PREFETCH, 4, CPU, GPU)]
        assert requests[0].release_only
        assert state.check() == []

    def test_restore_returns_everything_home(self):
        state = nvme_state()
        prefetch_tensor(state, [4])
        prefetch_tensor(state, [7])
        requests = restore_final_locations(state)
        assert state.placement.out_of_place() == []
        assert state.placement.nvme_copy == {7}
        assert state.table.cursor == 0
        assert all(r.kind is TransferKind.RESTORE for r in requests)
        assert not any(c.gpu_designated for c in state.pools[CPU].chunks)
        assert state.check() == []

    def test_blocking_restore(self):
        state = nvme_state()
        requests = restore_final_locations(state, blocking=True)
        assert requests and all(r.blocking for r in requests)


class TestDemandFetch:
    def test_fetch_evicts_farthest_same_class(self):
        _, state, _ = six_tensor_setup()
        assert moves(demand_fetch(state, [4])) == [(EVICT, 3, GPU, CPU), (FETCH, 4, CPU, GPU)]
        assert state.check() == []

    def test_resident_tensor_needs_nothing(self):
        _, state, _ = six_tensor_setup()
        assert demand_fetch(state, [1]) == []

    def test_wait_is_residual_transfer_time(self):
        trace, state, _ = six_tensor_setup()
        machine = default_machine()
        sink = LinkTimeline(machine, dict(state.placement.location_of), dict(state.sizes))
        waits = on_step_start(state, trace.steps[3], Fraction(0), sink)
        assert waits == {4: transfer_time(machine, CPU, GPU, 512)}


def eight_states(posture, budget=5):
    descs = [TensorDescriptor(i, 1, TensorKind.OPT_STATE_FP32, 0) for i in range(1, 9)]
    placement = place_optimizer_states(descs, budget)
    return OptimizerStateScheduler(placement, list(range(1, 9)), {i: 1 for i in range(1, 9)}, budget, posture)


class TestOptimizerStates:
    def test_async_swaps_updated_states_for_pending(self):
        scheduler = eight_states(OptimizerPosture.ASYNC)
        requests = optimizer_step_schedule(scheduler, list(range(1, 9)))
        assert moves(requests) == [
            (TransferKind.WRITEBACK, 1, CPU, NVME), (PREFETCH, 6, NVME, CPU),
            (TransferKind.WRITEBACK, 2, CPU, NVME), (PREFETCH, 7, NVME, CPU),
            (TransferKind.WRITEBACK, 3, CPU, NVME), (PREFETCH, 8, NVME, CPU),
        ]
        assert scheduler.cpu_bytes() <= scheduler.budget_bytes

    def test_restore_writes_before_reads(self):
        scheduler = eight_states(OptimizerPosture.ASYNC)
        optimizer_step_schedule(scheduler, list(range(1, 9)))
        requests = scheduler.restore()
        assert [(r.tensor_id, r.dst) for r in requests] == [
            (6, NVME), (7, NVME), (8, NVME), (1, CPU), (2, CPU), (3, CPU)]
        assert scheduler.placement.out_of_place() == []

    def test_sync_fetches_and_writes_back_blocking(self):
        scheduler = eight_states(OptimizerPosture.SYNC)
        assert scheduler.before_update([1]) == []
        fetch = scheduler.before_update([6])
        assert moves(fetch) == [(FETCH, 6, NVME, CPU)]
        back = scheduler.after_update([6])
        assert moves(back) == [(TransferKind.WRITEBACK, 6, CPU, NVME)]
        assert back[0].blocking

    def test_everything_fits_is_resident(self):
        scheduler = eight_states(OptimizerPosture.ASYNC, budget=8)
        assert scheduler.posture is OptimizerPosture.RESIDENT
        assert optimizer_step_schedule(scheduler, list(range(1, 9))) == []


@pytest.mark.parametrize("halt_rule", [True, False])
def test_pool_invariants_hold_over_two_iterations(halt_rule):
    trace = synthesize_transformer_trace(5, 2, SizeProfile.cycle([512, 1024, 512]), 1, 3,
                                         include_optimizer=False)
    machine = default_machine().with_overrides(gpu_capacity_bytes=4096, cpu_capacity_bytes=4096)
    state, _ = build_scheduler_state(trace, machine, halt_rule=halt_rule)
    for _ in range(2):
        for step in trace.steps:
            state.current_step = frozenset(step.tensor_ids)
            demand_fetch(state, list(step.tensor_ids))
            schedule_after_step(state, step)
            assert state.check() == []
        restore_final_locations(state)
        assert state.check() == []
        assert state.placement.out_of_place() == []
