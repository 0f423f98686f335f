import numpy as np
import pytest

from lossytp.model import BlockKind, ModelSpec
from lossytp.scheduler import (CostModel, DeviceProfile, InfeasibleAssignmentError,
                               InstanceTooLargeError, InsufficientMemoryError,
                               REFERENCE_SYNC_SECONDS, Schedule,
                               brute_force_ilp, comp_greedy, estimate_latency,
                               min_max, plr_map, ratios_to_counts, sync_time)

ILP_SPEC = ModelSpec(2, 32, 8, 4, 8, 8, 8, seed=0)


def profs(mem, comp, plr=None):
    plr = plr or [0.0] * len(mem)
    return [DeviceProfile(i, m, c, p) for i, (m, c, p) in
            enumerate(zip(mem, comp, plr))]


def reference_instances(count, seed, spec=ILP_SPEC, n=4):
    """Random instances on the reference hardware grids (n=4 clusters)."""
    rng = np.random.default_rng(seed)
    cost = CostModel.from_model_spec(spec, t_c=1e-5)
    frac_grid = np.arange(300, 6301, 200) / 4500.0
    out = []
    while len(out) < count:
        c = rng.choice(np.arange(0.6, 1.9, 0.1), size=n)
        m = rng.choice(frac_grid, size=n) * cost.total_memory
        if m.sum() < cost.total_memory or abs(c.mean() - 1.2) > 0.15:
            continue
        plr = rng.choice([0.0, 0.01, 0.02, 0.05], size=n)
        out.append(profs(m.tolist(), c.tolist(), plr.tolist()))
    return cost, out


class TestCostModel:
    def test_reference_sync_time(self):
        # D=4096 activations over a 1 Gbps link: 0.262 ms per synchronization.
        assert abs(sync_time(4096, 1e9) - REFERENCE_SYNC_SECONDS) < 1e-6

    def test_total_memory_formula(self):
        spec = ModelSpec(3, 64, 8, 4, 16, 16, 8, seed=0)
        cost = CostModel.from_model_spec(spec)
        expected = (3 * (8 * cost.mem_h + 16 * cost.mem_g) + 16 * cost.mem_v)
        assert abs(cost.total_memory - expected) < 1e-12


class TestEstimateLatency:
    def test_single_device_no_communication(self):
        cost = CostModel.from_model_spec(ILP_SPEC, t_c=1.0)
        w = np.zeros((2, 1, 2), dtype=int)
        w[:, 0, 0] = 8
        w[:, 0, 1] = 8
        p = profs([1e6], [2.0])
        expected = 2 * (cost.tau_h * 8 / 2.0 + cost.tau_g * 8 / 2.0)
        assert estimate_latency(w, p, cost) == pytest.approx(expected)

    def test_homogeneous_even_split(self):
        cost = CostModel.from_model_spec(ILP_SPEC, t_c=0.0)
        n, c = 4, 1.5
        w = np.full((2, n, 2), 2, dtype=int)
        p = profs([1e6] * n, [c] * n)
        per_layer = cost.tau_h * 8 / (n * c) + cost.tau_g * 8 / (n * c)
        assert estimate_latency(w, p, cost) == pytest.approx(2 * per_layer)

    def test_idle_devices_excluded_from_comm(self):
        cost = CostModel.from_model_spec(ILP_SPEC, t_c=1.0)
        w = np.zeros((2, 3, 2), dtype=int)
        w[:, 0, :] = 8
        p = profs([1e6] * 3, [1.0] * 3)
        latency = estimate_latency(w, p, cost)
        assert latency == pytest.approx(2 * (cost.tau_h + cost.tau_g) * 8)

    def test_partition_violation_rejected(self):
        cost = CostModel.from_model_spec(ILP_SPEC)
        w = np.zeros((2, 2, 2), dtype=int)
        with pytest.raises(InfeasibleAssignmentError):
            estimate_latency(w, profs([1e6] * 2, [1.0] * 2), cost)

    def test_memory_violation_rejected(self):
        cost = CostModel.from_model_spec(ILP_SPEC)
        w = np.zeros((2, 2, 2), dtype=int)
        w[:, 0, :] = 8
        with pytest.raises(InfeasibleAssignmentError):
            estimate_latency(w, profs([1e-9, 1e6], [1.0, 1.0]), cost)


class TestCompGreedy:
    def test_hand_trace_two_devices(self):
        r = comp_greedy(profs([4, 4], [2, 1]), 6)
        assert np.allclose(r, [2 / 3, 1 / 3])

    def test_single_device(self):
        assert np.allclose(comp_greedy(profs([8], [1]), 8), [1.0])

    def test_participant_reduction(self):
        r = comp_greedy(profs([4, 4, 4], [3, 2, 1]), 4)
        assert np.allclose(r, [1.0, 0.0, 0.0])

    def test_insufficient_memory(self):
        with pytest.raises(InsufficientMemoryError):
            comp_greedy(profs([1, 1], [1, 1]), 3)


class TestMinMax:
    def test_symmetric_equal_split(self):
        r = min_max(profs([4, 4, 4], [1, 1, 1]), 6)
        assert np.allclose(r, [1 / 3, 1 / 3, 1 / 3])

    def test_closed_form_clamped(self):
        r = min_max(profs([2, 8], [1, 1]), 6, epsilon=1e-3)
        assert np.allclose(r, [1 / 3, 2 / 3], atol=1e-3)

    def test_allocation_within_budgets_and_covers(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(2, 6))
            m = rng.uniform(1, 10, size=n)
            c = rng.uniform(0.5, 3, size=n)
            mt = float(m.sum() * rng.uniform(0.4, 0.95))
            p = profs(m.tolist(), c.tolist())
            r = min_max(p, mt, epsilon=1e-4)
            u = r * mt
            assert np.all(u <= m + 1e-3 * c.sum() + 1e-9)

    def test_dominates_comp_greedy_straggler(self):
        """Straggler time under min-max never exceeds computation-greedy's."""
        rng = np.random.default_rng(2)
        for _ in range(40):
            n = int(rng.integers(2, 6))
            m = rng.uniform(1, 10, size=n)
            c = rng.uniform(0.5, 3, size=n)
            mt = float(m.sum() * rng.uniform(0.4, 0.95))
            p = profs(m.tolist(), c.tolist())
            r_mm, r_cg = min_max(p, mt, epsilon=1e-5), comp_greedy(p, mt)
            mm = np.max(r_mm * mt / c)
            cg = np.max(r_cg * mt / c)
            assert mm <= cg + 1e-4 * mt / c.min()

    def test_scale_invariance(self):
        p = profs([3, 5, 9], [0.7, 1.1, 2.0])
        base = min_max(p, 10, epsilon=1e-6)
        p_scaled_c = profs([3, 5, 9], [2.1, 3.3, 6.0])
        assert np.allclose(min_max(p_scaled_c, 10, epsilon=1e-6), base, atol=1e-4)
        p_scaled_m = profs([6, 10, 18], [0.7, 1.1, 2.0])
        assert np.allclose(min_max(p_scaled_m, 20, epsilon=1e-6), base, atol=1e-4)

    def test_insufficient_memory(self):
        with pytest.raises(InsufficientMemoryError):
            min_max(profs([1, 1], [1, 1]), 3)


class TestRatiosToCounts:
    def test_hand_computed_remainders(self):
        assert ratios_to_counts(np.array([0.5, 0.5]), 7).tolist() == [4, 3]

    def test_single_device(self):
        assert ratios_to_counts(np.array([1.0]), 13).tolist() == [13]

    def test_counts_always_sum(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 7))
            raw = rng.random(n) + 1e-9
            r = raw / raw.sum()
            n_k = int(rng.integers(1, 33))
            assert ratios_to_counts(r, n_k).sum() == n_k


class TestPlrMap:
    def test_worked_example(self):
        """Three devices, eight groups: the least reliable gets [6, 7, 8]."""
        spec = ModelSpec(1, 64, 8, 4, 8, 8, 8, seed=0)
        sched = plr_map(spec, 3, np.array([0.4, 0.4, 0.2]), [0.0, 0.5, 0.1])
        assert sched.indices[BlockKind.MHA] == [[1, 2, 3], [6, 7, 8], [4, 5]]
        assert sched.indices[BlockKind.MLP] == [[1, 2, 3], [6, 7, 8], [4, 5]]

    def test_identity_when_equal(self):
        spec = ModelSpec(1, 64, 8, 4, 8, 8, 8, seed=0)
        sched = plr_map(spec, 2, np.array([0.5, 0.5]), [0.1, 0.1])
        assert sched.indices[BlockKind.MHA] == [[1, 2, 3, 4], [5, 6, 7, 8]]

    def test_counts_match_remainder_oracle(self, rng):
        spec = ModelSpec(1, 64, 8, 4, 8, 8, 8, seed=0)
        for _ in range(30):
            n = int(rng.integers(2, 5))
            raw = rng.random(n) + 1e-6
            r = raw / raw.sum()
            plrs = rng.random(n)
            sched = plr_map(spec, n, r, plrs)
            order = sorted(range(n), key=lambda i: (plrs[i], i))
            expected = ratios_to_counts(r[np.array(order)], 8)
            got = sched.counts(BlockKind.MHA)[np.array(order)]
            assert np.array_equal(got, expected)
            assert got.sum() == 8

    def test_partition_completeness(self, rng):
        spec = ModelSpec(2, 64, 8, 4, 16, 16, 8, seed=0)
        for trial in range(20):
            n = int(rng.integers(2, 6))
            raw = rng.random(n)
            r = raw / raw.sum()
            sched = plr_map(spec, n, r, rng.random(n))
            for kind in (BlockKind.MHA, BlockKind.MLP, BlockKind.LM_HEAD):
                union = sorted(i for lst in sched.indices[kind] for i in lst)
                assert union == list(range(1, spec.group_count(kind) + 1))

    def test_plr_monotonicity(self, rng):
        """More reliable devices always hold strictly smaller indices."""
        spec = ModelSpec(2, 64, 8, 4, 16, 16, 8, seed=0)
        for trial in range(20):
            n = int(rng.integers(2, 6))
            raw = rng.random(n)
            r = raw / raw.sum()
            plrs = rng.random(n)
            sched = plr_map(spec, n, r, plrs)
            for kind in sched.indices:
                for a in range(n):
                    for b in range(n):
                        if plrs[a] < plrs[b] and sched.indices[kind][a] \
                                and sched.indices[kind][b]:
                            assert max(sched.indices[kind][a]) \
                                < min(sched.indices[kind][b])

    def test_zero_ratio_devices_get_nothing(self):
        spec = ModelSpec(1, 64, 8, 4, 8, 8, 8, seed=0)
        sched = plr_map(spec, 3, np.array([0.6, 0.4, 0.0]), [0.0, 0.1, 0.0])
        assert sched.indices[BlockKind.MHA][2] == []

    def test_memory_feasible_with_profiles(self):
        """The budget-aware conversion never exceeds any device's memory."""
        cost, instances = reference_instances(20, seed=5)
        for p in instances:
            r = min_max(p, cost.total_memory)
            sched = plr_map(ILP_SPEC, len(p), r, [d.plr for d in p], p, cost)
            mem = sched.memory_per_device(cost)
            for dev, need in zip(p, mem):
                assert need <= dev.memory_mb + 1e-9


class TestScheduleDocument:
    def test_serialize_parse_roundtrip(self):
        spec = ModelSpec(2, 64, 8, 4, 16, 16, 8, seed=0)
        sched = plr_map(spec, 3, np.array([0.5, 0.3, 0.2]), [0.0, 0.2, 0.1])
        parsed = Schedule.parse(sched.serialize())
        assert np.allclose(parsed.ratios, sched.ratios)
        for kind in sched.indices:
            assert parsed.indices[kind] == sched.indices[kind]

    def test_reject_garbage(self):
        with pytest.raises(ValueError):
            Schedule.parse("not a schedule")


class TestBruteForceIlp:
    def test_symmetric_even_split_is_optimal(self):
        cost = CostModel.from_model_spec(ILP_SPEC, t_c=1e-5)
        p = profs([1e6] * 2, [1.0] * 2)
        w, latency = brute_force_ilp(p, cost)
        even = np.full((2, 2, 2), 4, dtype=int)
        assert latency == pytest.approx(estimate_latency(even, p, cost))

    def test_tight_memory_single_assignment(self):
        spec = ModelSpec(1, 32, 2, 1, 2, 2, 8, seed=0)
        cost = CostModel.from_model_spec(spec, t_c=0.0)
        # Device 0 fits exactly one head and one group; device 1 the rest.
        m0 = cost.mem_h + cost.mem_g
        m1 = cost.total_memory
        p = profs([m0 * 1.001, m1], [1.0, 1.0])
        w, _ = brute_force_ilp(p, cost)
        assert w[0, 0, 0] <= 1 and w[0, 0, 1] <= 1

    def test_guard_rail(self):
        spec = ModelSpec(2, 64, 16, 8, 16, 16, 8, seed=0)
        cost = CostModel.from_model_spec(spec)
        with pytest.raises(InstanceTooLargeError):
            brute_force_ilp(profs([1e6] * 2, [1.0] * 2), cost)

    def test_min_max_within_one_quantum(self):
        """Heuristic counts land within one group-quantum of the exact optimum."""
        cost, instances = reference_instances(25, seed=2024)
        for p in instances:
            w_opt, opt = brute_force_ilp(p, cost)
            r = min_max(p, cost.total_memory)
            sched = plr_map(ILP_SPEC, len(p), r, [d.plr for d in p], p, cost)
            heur = estimate_latency(sched.workload_matrix(cost), p, cost)
            quantum = max(cost.tau_h, cost.tau_g) / min(d.compute for d in p)
            assert heur <= opt + quantum + 1e-9
