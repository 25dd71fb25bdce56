"""シミュレーションエンジン・参照インタプリタ・スイープのテスト"""
from fractions import Fraction
from unittest.mock import Mock, patch

import numpy as np
import pytest

from core.baselines import make_policy
from core.config import SimConfig
from core.engine import (
    REFERENCE_TENSOR_LIMIT,
    EventKind,
    LinkTimeline,
    Scenario,
    apply_axis,
    rational_out,
    run,
    run_many,
    run_reference,
    sized_machine,
    sweep,
)
from core.errors import ConfigError, OutOfMemory, SimulationError, SizeGuardExceeded
from core.machine import Location, MemoryClass, default_machine, transfer_time
from core.policy import PolicyKind, TransferKind, TransferRequest
from core.trace import ExecutionTrace, SizeProfile, TensorKind, synthesize_transformer_trace
from utils.event_log import TRANSFER_KINDS, EventLog, utilization_from_log

ALL_POLICIES = list(PolicyKind)


def random_case(seed):
    """テンソル10個以下・3レイヤ以下のトレースと、容量を乱択したマシン"""
    rng = np.random.default_rng(seed)
    layers = int(rng.integers(1, 4))
    k = int(rng.integers(1, 5 // layers + 1))
    trace = synthesize_transformer_trace(
        layers, k, SizeProfile.random([512, 1024, 2048]), "1/1000", seed,
        iterations=int(rng.integers(1, 3)),
    )
    params = trace.param_bytes()
    machine = default_machine().with_overrides(
        gpu_capacity_bytes=int(rng.integers(2048, 2 * params + 4096)),
        cpu_capacity_bytes=int(rng.integers(params // 2 + 1, trace.state_bytes() + 2 * params + 4096)),
        cpu_memory_class=MemoryClass.PINNED if seed % 2 else MemoryClass.PAGEABLE,
    )
    return trace, machine


@pytest.fixture
def small_trace():
    return synthesize_transformer_trace(4, 2, SizeProfile.cycle([512, 1024]), "1/1000", 0, iterations=2)


class TestOracle:
    @pytest.mark.parametrize("seed", range(100))
    def test_run_matches_reference(self, seed):
        trace, machine = random_case(seed)
        assert len(trace.tensors) <= 10
        for policy in ALL_POLICIES:
            try:
                fast = run(trace, machine, policy)
            except (ConfigError, OutOfMemory):
                with pytest.raises((ConfigError, OutOfMemory)):
                    run_reference(trace, machine, policy)
                continue
            assert fast == run_reference(trace, machine, policy), policy.value

    def test_empty_trace_gives_zeroed_report(self):
        trace = ExecutionTrace((), ())
        for policy in (PolicyKind.TEN_CACHE, PolicyKind.ZERO_INFINITY_LIKE):
            report = run(trace, default_machine(), policy)
            assert report == run_reference(trace, default_machine(), policy)
            assert report.total_time_us == 0
            assert report.param_accesses == 0
            assert report.hit_rate == 0
            assert report.transfer_count == 0

    def test_size_guard(self):
        trace = synthesize_transformer_trace(REFERENCE_TENSOR_LIMIT // 2 + 1, 1, SizeProfile.fixed(512), 1, 0)
        with pytest.raises(SizeGuardExceeded):
            run_reference(trace, default_machine(), PolicyKind.TEN_CACHE)


class TestRun:
    def test_loop_schedules_only_step_and_iteration_events(self):
        # 転送の完了はタイムラインが時刻で持つのでイベントにしない
        assert set(EventKind) == {EventKind.STEP_START, EventKind.STEP_END, EventKind.ITERATION_END}

    def test_no_offload_is_pure_compute(self, small_trace):
        report = run(small_trace, default_machine(), PolicyKind.NO_OFFLOAD)
        assert report.total_time_us == 2 * small_trace.iteration_compute_us()
        assert report.iteration_times_us == [small_trace.iteration_compute_us()] * 2
        assert report.hit_rate == 1
        assert report.stall_us == 0
        assert report.transfer_count == 0
        assert report.optimizer_miss_rate == 0
        assert report.mode == "gpu"
        assert report.profile_overhead_fraction is None

    def test_no_offload_out_of_memory(self, small_trace):
        machine = default_machine().with_overrides(gpu_capacity_bytes=1024)
        with pytest.raises(OutOfMemory):
            run(small_trace, machine, PolicyKind.NO_OFFLOAD)

    def test_unknown_policy_fails_before_running(self, small_trace):
        with pytest.raises(ConfigError, match="policy"):
            run(small_trace, default_machine(), "lru")

    def test_invalid_config_fails_before_running(self, small_trace):
        with pytest.raises(ConfigError, match="thresholds_us"):
            run(small_trace, default_machine(), PolicyKind.TEN_CACHE, SimConfig(thresholds_us=[30, 10]))

    def test_gpu_smaller_than_working_set(self, small_trace):
        machine = default_machine().with_overrides(gpu_capacity_bytes=1024)
        with pytest.raises(ConfigError, match="gpu_capacity_bytes"):
            run(small_trace, machine, PolicyKind.TEN_CACHE)

    def test_deterministic(self, small_trace):
        machine = sized_machine(small_trace, default_machine(), "1/2")
        logs = [EventLog(), EventLog()]
        reports = [run(small_trace, machine, PolicyKind.TEN_CACHE_PLUS_OPT, event_log=log) for log in logs]
        assert reports[0] == reports[1]
        assert reports[0].to_dict() == reports[1].to_dict()
        assert logs[0].records == logs[1].records

    @pytest.mark.parametrize("policy", ALL_POLICIES)
    def test_report_bounds(self, small_trace, policy):
        machine = sized_machine(small_trace, default_machine(), "1/2", cpu_bytes=40_000)
        if policy is PolicyKind.NO_OFFLOAD:
            machine = default_machine()
        log = EventLog()
        report = run(small_trace, machine, policy, event_log=log)
        assert 0 <= report.hit_rate <= 1
        assert 0 <= report.optimizer_miss_rate <= 1
        assert all(0 <= pct <= 100 for pct in report.pct_wait_below.values())
        assert 0 <= report.gpu_utilization_timeavg <= 1
        assert 0 <= report.cpu_utilization_timeavg <= 1
        # 重なりの上下限
        busy = sum((transfer_time(machine, Location(r["src"]), Location(r["dst"]), r["size"])
                    for r in log.of_kind(*TRANSFER_KINDS) if r["kind"] != "release"), Fraction(0))
        assert report.compute_us <= report.total_time_us <= report.compute_us + busy
        assert sum(report.iteration_times_us) == report.total_time_us

    @pytest.mark.parametrize("policy", [PolicyKind.TEN_CACHE, PolicyKind.ZERO_INFINITY_LIKE, PolicyKind.L2L_LIKE])
    def test_utilization_reproducible_from_event_log(self, small_trace, policy):
        machine = sized_machine(small_trace, default_machine(), "1/2", cpu_bytes=40_000)
        log = EventLog()
        report = run(small_trace, machine, policy, event_log=log)
        instance = make_policy(policy, SimConfig())
        instance.setup(small_trace, machine)
        initial = instance.locations()
        for tier, capacity, expected in (
            (Location.GPU, machine.gpu_capacity_bytes, report.gpu_utilization_timeavg),
            (Location.CPU, machine.cpu_capacity_bytes, report.cpu_utilization_timeavg),
        ):
            start = sum(small_trace.size_of(t) for t, loc in initial.items() if loc is tier)
            got = utilization_from_log(log.records, start, tier.value, capacity, report.total_time_us)
            assert got == expected

    def test_transfer_bytes_match_event_log(self, small_trace):
        machine = sized_machine(small_trace, default_machine(), "1/2", cpu_bytes=40_000)
        log = EventLog()
        report = run(small_trace, machine, PolicyKind.TEN_CACHE, event_log=log)
        moved = [r for r in log.of_kind(*TRANSFER_KINDS) if r["kind"] != "release"]
        assert report.transfer_count == len(moved)
        legs = sum(r["size"] * (1 if "cpu" in (r["src"], r["dst"]) else 2) for r in moved)
        assert sum(report.transfer_bytes.values()) == legs
        param_stalls = [r for r in log.of_kind("stall")
                        if small_trace.tensor(r["tensor"]).kind is TensorKind.PARAM_FP16]
        assert len(param_stalls) == sum(1 for w in report.param_wait_us if w > 0)

    def test_tencache_beats_zero_on_nine_tensor_trace(self):
        trace = synthesize_transformer_trace(9, 1, SizeProfile.fixed(512), "1/1000", 0, include_optimizer=False)
        machine = default_machine().with_overrides(gpu_capacity_bytes=4 * 512)
        ours = run(trace, machine, PolicyKind.TEN_CACHE)
        zero = run(trace, machine, PolicyKind.ZERO_INFINITY_LIKE)
        assert ours.total_time_us < zero.total_time_us
        assert ours.hit_rate > zero.hit_rate

    def test_prefetch_improves_hit_rate(self):
        trace = synthesize_transformer_trace(9, 1, SizeProfile.fixed(512), "1/1000", 0, include_optimizer=False)
        machine = default_machine().with_overrides(gpu_capacity_bytes=4 * 512)
        ours = run(trace, machine, PolicyKind.TEN_CACHE)
        demand = run(trace, machine, PolicyKind.TEN_CACHE_NO_PREFETCH)
        assert ours.hit_rate > demand.hit_rate
        assert ours.profile_overhead_fraction == Fraction(1)

    def test_blocking_restore_is_never_faster(self, small_trace):
        machine = sized_machine(small_trace, default_machine(), "1/2")
        overlap = run(small_trace, machine, PolicyKind.TEN_CACHE)
        blocking = run(small_trace, machine, PolicyKind.TEN_CACHE, SimConfig(restore_overlap=False))
        assert blocking.total_time_us >= overlap.total_time_us

    def test_wait_thresholds_are_report_keys(self, small_trace):
        report = run(small_trace, default_machine(), PolicyKind.L2L_LIKE, SimConfig(thresholds_us=["1/2", 30]))
        assert list(report.pct_wait_below) == ["1/2", 30]
        assert list(report.to_dict()["pct_wait_below"]) == ["1/2", "30"]


class TestLedger:
    def test_source_must_match_location(self):
        ledger = LinkTimeline(default_machine(), {1: Location.CPU}, {1: 512})
        with pytest.raises(SimulationError):
            ledger.submit(TransferRequest(1, Location.GPU, Location.CPU, 512), Fraction(0))

    def test_links_serialize(self):
        machine = default_machine()
        ledger = LinkTimeline(machine, {1: Location.CPU, 2: Location.CPU}, {1: 512, 2: 512})
        one = transfer_time(machine, Location.CPU, Location.GPU, 512)
        assert ledger.submit(TransferRequest(1, Location.CPU, Location.GPU, 512), Fraction(0)) == one
        assert ledger.submit(TransferRequest(2, Location.CPU, Location.GPU, 512), Fraction(0)) == 2 * one
        assert ledger.transfer_bytes == {"cpu->gpu": 1024}

    def test_release_uses_no_link(self):
        ledger = LinkTimeline(default_machine(), {1: Location.GPU}, {1: 512})
        done = ledger.submit(TransferRequest(1, Location.GPU, Location.NVME, 512, TransferKind.EVICT,
                                             release_only=True), Fraction(5))
        assert done == 5
        assert ledger.transfer_count == 0
        assert ledger.location[1] is Location.NVME
        assert ledger.occupancy[Location.NVME] == 512

    def test_staged_transfer_uses_both_legs(self):
        machine = default_machine()
        ledger = LinkTimeline(machine, {1: Location.NVME}, {1: 512})
        done = ledger.submit(TransferRequest(1, Location.NVME, Location.GPU, 512), Fraction(0))
        assert done == transfer_time(machine, Location.NVME, Location.GPU, 512)
        assert set(ledger.transfer_bytes) == {"nvme->cpu", "cpu->gpu"}

    def test_blocking_until(self):
        ledger = LinkTimeline(default_machine(), {1: Location.CPU}, {1: 512})
        assert ledger.take_blocking() is None
        done = ledger.submit(TransferRequest(1, Location.CPU, Location.NVME, 512, blocking=True), Fraction(0))
        assert ledger.take_blocking() == done
        assert ledger.take_blocking() is None

    def test_rational_out(self):
        assert rational_out(Fraction(6, 3)) == 2
        assert rational_out(Fraction(1, 3)) == "1/3"


class TestSweep:
    def base(self, trace, policy=PolicyKind.TEN_CACHE, **machine):
        return Scenario(trace, sized_machine(trace, default_machine(), "1/2").with_overrides(**machine), policy)

    def test_batch_scale_is_monotone(self):
        trace = synthesize_transformer_trace(4, 2, SizeProfile.cycle([512, 1024]), 1, 0)
        reports = sweep(self.base(trace), "batch_scale", [1, 2, 4])
        times = [r.total_time_us for r in reports]
        assert times == sorted(times)
        assert reports[1].compute_us == 2 * reports[0].compute_us

    def test_gpu_capacity_in_value_order(self, small_trace):
        values = [3072, 4096, 10**9]
        base = self.base(small_trace)
        reports = sweep(base, "gpu_capacity", values, workers=3)
        expected = [run(small_trace, base.machine.with_overrides(gpu_capacity_bytes=v), base.policy)
                    for v in values]
        assert reports == expected
        assert reports[-1].hit_rate == 1

    @pytest.mark.parametrize("policy", [PolicyKind.TEN_CACHE, PolicyKind.ZERO_INFINITY_LIKE, PolicyKind.L2L_LIKE])
    def test_pinned_is_never_slower(self, small_trace, policy):
        pageable, pinned = sweep(self.base(small_trace, policy), "pinned", ["false", "true"])
        assert pinned.total_time_us <= pageable.total_time_us

    def test_unknown_axis(self, small_trace):
        with pytest.raises(ConfigError, match="axis"):
            sweep(self.base(small_trace), "seq_len", [1])

    def test_axis_values_are_checked(self, small_trace):
        with pytest.raises(ConfigError, match="pinned"):
            apply_axis(self.base(small_trace), "pinned", "maybe")
        with pytest.raises(ConfigError, match="batch_scale"):
            apply_axis(self.base(small_trace), "batch_scale", "0")
        assert apply_axis(self.base(small_trace), "cpu_capacity", "1e6").machine.cpu_capacity_bytes == 10**6

    def test_thread_count_does_not_change_results(self, small_trace):
        scenarios = [self.base(small_trace, policy) for policy in
                     (PolicyKind.TEN_CACHE, PolicyKind.TEN_CACHE_PLUS_OPT, PolicyKind.ZERO_INFINITY_LIKE,
                      PolicyKind.L2L_LIKE, PolicyKind.TEN_CACHE_NO_PREFETCH)]
        assert run_many(scenarios, workers=1) == run_many(scenarios, workers=4)

    def test_progress_callback(self, small_trace):
        calls = []
        sweep(self.base(small_trace), "batch_scale", [1, 2], progress_callback=lambda d, t: calls.append((d, t)))
        assert calls == [(1, 2), (2, 2)]

    def test_failed_run_is_reraised(self, small_trace):
        def fail_for_l2l(scenario, event_log=None):
            if scenario.policy is PolicyKind.L2L_LIKE:
                raise OutOfMemory("l2l")
            return run(scenario.trace, scenario.machine, scenario.policy, scenario.config)

        callback = Mock()
        scenarios = [self.base(small_trace), self.base(small_trace, PolicyKind.L2L_LIKE)]
        with patch("core.engine.run_scenario", side_effect=fail_for_l2l), pytest.raises(OutOfMemory):
            run_many(scenarios, workers=2, progress_callback=callback)
        callback.assert_called_once_with(1, 2)

    def test_sized_machine(self, small_trace):
        machine = sized_machine(small_trace, default_machine(), "2/5", cpu_bytes=1000)
        assert machine.gpu_capacity_bytes == (2 * small_trace.param_bytes()) // 5
        assert machine.cpu_capacity_bytes == 1000
        with pytest.raises(ConfigError):
            sized_machine(small_trace, default_machine(), 0)
