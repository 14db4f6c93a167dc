"""Closed-loop simulator tests: integration, traces, outcomes, determinism."""

from __future__ import annotations

import numpy as np
import pytest

from occrisk.metrics import format_summary, summarize
from occrisk.risk import OBSERVED_ONLY, OCCLUSION_AWARE, RiskConfig
from occrisk.scene import (Scenario, VehicleState, generate_scenario,
                           synthetic_fourway)
from occrisk.simulator import (COLLISION, GOAL_REACHED, TIMEOUT, EpisodeConfig,
                               _advance, run_batch, run_episode)


def fast_config(**kw):
    # reduced particle density keeps closed-loop tests quick
    return EpisodeConfig(risk=RiskConfig(particles_per_meter=2 ** 12 / 100.0),
                         **kw)


@pytest.fixture(scope="module")
def fourway():
    return synthetic_fourway()


class TestAdvance:
    def test_plain_step(self):
        s, v = _advance(0.0, 5.0, 1.0, 0.1, 0.0, 12.0)
        assert s == pytest.approx(0.505) and v == pytest.approx(5.1)

    def test_exact_stop_at_standstill(self):
        s, v = _advance(10.0, 6.0, -8.0, 1.5, 0.0, 12.0)
        assert v == 0.0 and s == pytest.approx(12.25)

    def test_exact_hit_of_top_speed(self):
        s, v = _advance(0.0, 11.0, 2.5, 1.0, 0.0, 12.0)
        assert v == 12.0 and s == pytest.approx(11.8)

    def test_braking_at_rest_holds(self):
        s, v = _advance(3.0, 0.0, -5.0, 0.02, 0.0, 12.0)
        assert s == 3.0 and v == 0.0


class TestVirtualStop:
    def test_empty_map_modes_differ(self, fourway):
        sc = generate_scenario(fourway, "n_straight", 0, seed=11)
        cfg = fast_config()
        aware = run_episode(sc, OCCLUSION_AWARE, cfg)
        naive = run_episode(sc, OBSERVED_ONLY, cfg)
        stop_s = fourway.route("n_straight").stopline_s
        before = aware.s < stop_s
        # blind corners alone force real braking on the approach
        assert aware.a[before].min() <= -1.0
        assert aware.outcome in (GOAL_REACHED, TIMEOUT)
        # the baseline sees nothing and never reacts
        assert np.all(naive.a == 0.0)
        assert naive.outcome == GOAL_REACHED
        assert naive.duration == pytest.approx((sc.goal_s - sc.ego.s) / 10.0,
                                               abs=0.1)

    def test_deterministic_replay(self, fourway):
        sc = generate_scenario(fourway, "n_straight", 0, seed=11)
        a1 = run_episode(sc, OCCLUSION_AWARE, fast_config())
        a2 = run_episode(sc, OCCLUSION_AWARE, fast_config())
        assert a1.outcome == a2.outcome and a1.duration == a2.duration
        assert np.array_equal(a1.s, a2.s) and np.array_equal(a1.a, a2.a)


class TestTrace:
    def test_substep_rows_consistent(self, fourway):
        sc = generate_scenario(fourway, "n_straight", 3, seed=5)
        cfg = fast_config()
        res = run_episode(sc, OCCLUSION_AWARE, cfg)
        t, s, v, a = res.t, res.s, res.v, res.a
        assert np.all(np.diff(t) > 0.0)
        assert np.allclose(np.diff(t), 0.02, atol=1e-9)
        assert np.all((v >= 0.0) & (v <= 12.0))
        assert np.all((a >= -8.0) & (a <= 2.5))
        assert np.all(res.plan_wall >= 0.0)
        # each step follows the recorded command of the block it started in
        L = fourway.route("n_straight").length
        for i in range(len(t) - 1):
            s2, v2 = _advance(s[i], v[i], a[i], 0.02, 0.0, 12.0)
            assert min(s2, L) == pytest.approx(s[i + 1], abs=1e-9)
            assert v2 == pytest.approx(v[i + 1], abs=1e-9)

    def test_command_constant_within_block(self, fourway):
        sc = generate_scenario(fourway, "n_straight", 3, seed=5)
        res = run_episode(sc, OCCLUSION_AWARE, fast_config())
        # rows strictly inside a block carry that block's command
        block = np.floor(res.t / 0.1 + 1e-6).astype(int)
        for k in np.unique(block)[:-1]:
            inside = res.a[(block == k) & ~np.isclose(res.t % 0.1, 0.0,
                                                      atol=1e-6)]
            first = res.a[block == k][0]
            assert np.all(inside == first)

    def test_immediate_goal_yields_empty_trace(self, fourway):
        ego = VehicleState("n_straight", 100.0, 10.0)
        sc = Scenario(fourway, ego, [], 0, goal_s=80.25)
        res = run_episode(sc, OBSERVED_ONLY, fast_config())
        assert res.outcome == GOAL_REACHED and res.duration == 0.0
        assert len(res.t) == 0


@pytest.fixture(scope="module")
def tbone(fourway):
    # a fast crosser from the east timed to pass the shared conflict point
    # exactly when a non-braking ego would; it stays behind the corner
    # building until there is no longer room to stop short of the crossing
    base = generate_scenario(fourway, "n_straight", 0, seed=1)
    other = VehicleState("e_straight", 45.35, 12.0)
    return Scenario(fourway, base.ego, [other], 1, base.goal_s, 0)


class TestOutcomes:

    def test_observed_only_gets_hit(self, tbone):
        res = run_episode(tbone, OBSERVED_ONLY, fast_config())
        assert res.outcome == COLLISION
        assert res.duration < 3.0
        assert res.t[-1] == pytest.approx(res.duration)

    def test_occlusion_aware_survives_same_scenario(self, tbone):
        res = run_episode(tbone, OCCLUSION_AWARE, fast_config())
        assert res.outcome != COLLISION

    def test_unknown_mode_rejected(self, tbone):
        with pytest.raises(ValueError, match="unknown risk mode"):
            run_episode(tbone, "clairvoyant")


class TestParticleSink:
    def test_called_once_per_replan(self, fourway):
        sc = generate_scenario(fourway, "n_straight", 2, seed=4)
        seen = []
        res = run_episode(sc, OCCLUSION_AWARE, fast_config(),
                          particle_sink=lambda t, d: seen.append((t, d.total)))
        n_blocks = int(np.floor((res.duration - 1e-9) / 0.1)) + 1
        assert len(seen) == n_blocks
        for k, (t_block, total) in enumerate(seen):
            assert t_block == pytest.approx(0.1 * k, abs=1e-9)
            assert total >= 0
        assert res.n_particles[0] == seen[0][1]
        assert res.n_particles[5] == seen[1][1]


class TestBatch:
    def test_parallel_matches_serial(self, fourway):
        cfg = fast_config(horizon=12.0)
        kw = dict(n_scenarios=3, n_others=2, base_seed=7, config=cfg)
        ser = run_batch(fourway, "n_straight", parallelism=1, **kw)
        par = run_batch(fourway, "n_straight", parallelism=2, **kw)
        assert len(ser) == len(par) == 6
        for r1, r2 in zip(ser, par):
            assert (r1.scenario_id, r1.mode, r1.error) == \
                   (r2.scenario_id, r2.mode, r2.error)
            if r1.result is not None:
                assert r1.result.outcome == r2.result.outcome
                assert r1.result.duration == r2.result.duration
                for name in ("t", "s", "v", "a", "x", "y", "n_particles"):
                    assert np.array_equal(getattr(r1.result, name),
                                          getattr(r2.result, name))
        assert format_summary(summarize(ser)) == format_summary(summarize(par))

    def test_record_order_and_modes(self, fourway):
        cfg = fast_config(horizon=6.0)
        recs = run_batch(fourway, "n_straight", 2, 1, base_seed=9,
                         parallelism=1, config=cfg)
        assert [(r.scenario_id, r.mode) for r in recs] == [
            (0, OCCLUSION_AWARE), (0, OBSERVED_ONLY),
            (1, OCCLUSION_AWARE), (1, OBSERVED_ONLY)]

    def test_saturation_becomes_error_record(self):
        small = synthetic_fourway(arm_length=25.0)
        recs = run_batch(small, "n_straight", 1, 150, base_seed=3,
                         parallelism=1, config=fast_config())
        assert len(recs) == 2
        assert all(r.result is None and "saturated" in r.error for r in recs)

    def test_unknown_mode_rejected(self, fourway):
        with pytest.raises(ValueError, match="unknown risk mode"):
            run_batch(fourway, "n_straight", 1, 0, modes=("psychic",))
