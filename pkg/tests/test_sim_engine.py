import math

import numpy as np
import pytest
from scipy import stats

from wilfq_sim import env_model as env
from wilfq_sim import sim_engine as se
from wilfq_sim.env_model import ClientState
from wilfq_sim.policies import POLICY_NAMES
from wilfq_sim.sim_engine import SimConfig, Simulation


def small(seed=0, **kw):
    return SimConfig(seed=seed, **kw).replace(task_n=400)


class TestReward:
    def test_substitution(self):
        assert se.reward(3.0, 0.5, 0.5, 1.0, 1) == pytest.approx(-4.0)

    def test_zero_gap_passive(self):
        assert se.reward(3.0, 0.5, 0.0, 1.0, 0) == 0.0

    def test_lambda_off(self):
        assert se.reward(1.5, 0.25, 9.0, 0.0, 1) == pytest.approx(-1.75)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            se.reward(-1.0, 0.0, 0.0, 1.0, 1)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(alpha=0.0), dict(discount=1.0), dict(budget=0),
                                    dict(budget=101), dict(max_rounds=0), dict(observability="x"),
                                    dict(sharing="x"), dict(lam=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_defaults(self):
        cfg = SimConfig()
        assert cfg.n_clients == 100 and cfg.budget == 10
        assert [c.population for c in cfg.classes] == [30, 40, 30]
        assert [c.capacity_range for c in cfg.classes] == [(0.7, 1.0), (0.4, 0.7), (0.2, 0.4)]
        assert tuple(cfg.subsidies) == (0.1, 0.2, 0.3, 0.4, 0.5)
        assert (cfg.discount, cfg.alpha, cfg.task.batch, cfg.task.lr) == (0.9, 0.15, 32, 1e-3)

    def test_replace_routes_task_fields(self):
        cfg = SimConfig().replace(task_tau=10.0, seed=3)
        assert cfg.task.tau == 10.0 and cfg.seed == 3


class TestEstimateState:
    def client(self):
        return env.Client(0, 1, 1e-3, 100, env.DBM_23_WATTS, ClientState.LIMITED, 1e6)

    def test_oracle(self):
        cls = SimConfig().classes[0]
        assert se.estimate_state(self.client(), "oracle", 123.0, cls) == ClientState.LIMITED

    def test_nearest_mean(self):
        c, cls = self.client(), SimConfig().classes[0]
        mean_normal = c.shift + env.training_time_mean_extra(c, ClientState.NORMAL, cls)
        assert se.estimate_state(c, "inferred", mean_normal, cls) == ClientState.NORMAL

    def test_carry_forward(self):
        c, cls = self.client(), SimConfig().classes[0]
        assert se.estimate_state(c, "inferred", None, cls, ClientState.BUSY) == ClientState.BUSY

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            se.estimate_state(self.client(), "psychic", None, SimConfig().classes[0])

    def test_accuracy_on_index_selected_clients(self):
        # the index policy mostly serves normal-state clients; classify what it selects
        ok = n = 0
        for seed in range(3):
            sim = Simulation(small(seed, max_rounds=400, stop_at_threshold=False), "fi")
            while n < 10_000:
                true = sim.true_states.copy()
                rec = sim.run_round()
                for j, t in zip(rec.selected, rec.train_times):
                    c = sim.clients[j]
                    ok += se.estimate_state(c, "inferred", t, sim.classes[c.class_id]) == true[j]
                    n += 1
                if sim.round >= 400:
                    break
        assert n >= 10_000
        assert ok / n > 0.6


@pytest.fixture(scope="module")
def run():
    return Simulation(small(1, max_rounds=40, stop_at_threshold=False), "wilfq").run()


class TestRoundLoop:
    def test_latency_and_delay_bookkeeping(self, run):
        cap = run.extras["latency_cap"]
        delays = [r.cum_delay for r in run.records]
        assert all(0 < r.round_latency <= cap for r in run.records)
        assert all(b >= a for a, b in zip(delays, delays[1:]))
        assert run.records[-1].cum_delay == pytest.approx(sum(r.round_latency for r in run.records), abs=1e-12)

    def test_total_delay_is_sum_to_threshold(self):
        res = Simulation(SimConfig(seed=0, max_rounds=300), "fi").run()
        assert res.converged
        assert res.records[-1].loss_gap <= 0.15
        assert res.total_delay == pytest.approx(sum(r.round_latency for r in res.records), abs=1e-12)

    def test_histogram_normalized(self, run):
        assert all(abs(sum(r.state_hist) - 1) < 1e-12 for r in run.records)

    def test_all_excluded_round(self):
        sim = Simulation(small(3, latency_cap=1e-9, max_rounds=2), "ran")
        before = sim.model.copy()
        rec = sim.run_round()
        assert rec.included == () and rec.round_latency == pytest.approx(1e-9)
        np.testing.assert_array_equal(sim.model, before)

    def test_full_participation(self):
        cfg = SimConfig(seed=4, budget=100, latency_cap=1e6, max_rounds=1).replace(task_n=400)
        rec = Simulation(cfg, "ran").run_round()
        assert len(rec.included) == 100

    @pytest.mark.parametrize("policy", POLICY_NAMES)
    def test_determinism(self, policy):
        a = Simulation(small(5, max_rounds=15, stop_at_threshold=False), policy).run()
        b = Simulation(small(5, max_rounds=15, stop_at_threshold=False), policy).run()
        assert a.records == b.records

    def test_inferred_mode_runs(self):
        res = Simulation(small(6, observability="inferred", max_rounds=20, stop_at_threshold=False), "wilfq").run()
        assert len(res.records) == 20

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            Simulation(small(0), "foo")


class TestStopping:
    def test_threshold_at_zero_model_loss(self):
        cfg = SimConfig(seed=0, alpha=math.log(2)).replace(task_n=400, task_classes=2)
        res = se.run_simulation(cfg, "ran")
        assert res.converged and res.rounds_to_threshold == 1

    def test_unreachable(self):
        res = se.run_simulation(small(0, alpha=1e-9, max_rounds=3), "ran")
        assert not res.converged and res.rounds_to_threshold is None and len(res.records) == 3


class TestIndexPolicies:
    def test_wilfq_with_exact_indices_replays_fi(self):
        cfg = small(7, max_rounds=30, stop_at_threshold=False)
        fi = Simulation(cfg, "fi").run()
        sim = Simulation(cfg, "wilfq")
        sim.policy.pin_indices(sim.compute_exact_indices())
        sim.policy.settings.explore = False
        wq = sim.run()
        assert [r.selected for r in wq.records] == [r.selected for r in fi.records]

    def test_exact_indices_fill_grid(self):
        sim = Simulation(small(0), "ran")
        idx = sim.compute_exact_indices()
        assert max(idx.values()) == pytest.approx(0.4, abs=1e-5)
        for cid in sim.classes:
            w = [idx[(cid, s)] for s in ClientState]
            assert w[0] > w[1] > w[2]

    def test_calibration_uses_no_transitions(self):
        a = Simulation(small(0), "ran")
        classes = list(SimConfig().classes)
        classes[0] = se.dataclasses.replace(classes[0], transitions=env.sample_transitions())
        b = Simulation(small(0, classes=tuple(classes)), "ran")
        assert (a.reward_scale, a.idle_cost) == (b.reward_scale, b.idle_cost)


class TestStateDynamics:
    def test_random_policy_matches_mixture_chain(self):
        cfg = small(8, max_rounds=3000, stop_at_threshold=False).replace(task_epochs=0)
        sim = Simulation(cfg, "ran")
        counts = {cid: np.zeros(3) for cid in sim.classes}
        for r in range(3000):
            sim.run_round()
            if r >= 100:
                for cid in sim.classes:
                    counts[cid] += np.bincount(sim.true_states[sim.class_ids == cid], minlength=3)
        q = cfg.budget / cfg.n_clients
        for cid, cls in sim.classes.items():
            mix = q * cls.transitions.p_selected + (1 - q) * cls.transitions.p_unselected
            pi = env.stationary_distribution(mix)
            np.testing.assert_allclose(counts[cid] / counts[cid].sum(), pi, atol=0.03)


class TestStatistics:
    def test_t_interval_two_values(self):
        mean, sd, half = se.t_interval([10.0, 14.0])
        assert mean == 12.0
        assert half == pytest.approx(stats.t.ppf(0.975, 1) * sd / math.sqrt(2))
        assert half == pytest.approx(12.706204736 * 2.0, rel=1e-9)

    def test_half_width_scaling(self):
        # fixed-variance synthetic data: half-width times sqrt(n) over the t quantile stays put
        base = np.array([-1.0, 1.0])
        for n in (4, 16, 64):
            x = np.tile(base, n // 2)
            _, sd, half = se.t_interval(x)
            assert half * math.sqrt(n) / stats.t.ppf(0.975, n - 1) == pytest.approx(sd)
        h4, h64 = se.t_interval(np.tile(base, 2))[2], se.t_interval(np.tile(base, 32))[2]
        assert h64 < h4 / 3

    def test_needs_two(self):
        with pytest.raises(ValueError):
            se.t_interval([1.0])

    def test_summarize_metric_small(self):
        assert se.summarize_metric([]).n == 0
        one = se.summarize_metric([3.0])
        assert one.mean == 3.0 and math.isnan(one.half_width)
        assert se.summarize_metric([1.0, float("nan"), 3.0]).n == 2

    def test_identical_seeds_zero_variance(self):
        rep = se.replicate(small(0, max_rounds=5), "ran", [3, 3])
        assert rep.final_accuracy.half_width == 0.0

    def test_replicate_needs_two_seeds(self):
        with pytest.raises(ValueError):
            se.replicate(small(0), "ran", [1])

    def test_resample_curve_step(self):
        recs = [se.RoundRecord(i + 1, (), (), (), (), 1.0, float(i + 1), 0, 0, a, 0, (1, 0, 0), False)
                for i, a in enumerate([0.2, 0.5, 0.9])]
        res = se.RunResult(recs, False, None, 3.0)
        np.testing.assert_allclose(se.resample_curve(res, np.array([0.5, 1.0, 2.5, 3.0, 9.0])),
                                   [0.0, 0.2, 0.5, 0.9, 0.9])
