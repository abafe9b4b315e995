"""Round loop: state estimation, selection, local training, latency, rewards,
learning updates and aggregation, plus seed replication."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import env_model as env
from . import fl_task as fl
from .env_model import ClientClass, ClientState, TransitionPair
from .policies import (
    POLICY_NAMES, ClientSnapshot, CqlPolicy, EfficiencyFirstPolicy, Feedback, FullInformationPolicy,
    LearnerSettings, Policy, RandomPolicy, SelectionContext, UcbPolicy, WilfqPolicy,
)
from .whittle_core import DEFAULT_SUBSIDIES, ArmMDP, SubsidySet, whittle_indices

logger = logging.getLogger(__name__)


def _pair(ps, pn) -> TransitionPair:
    return TransitionPair(np.array(ps, dtype=float), np.array(pn, dtype=float))


def default_classes() -> tuple[ClientClass, ...]:
    """Three capacity classes; class 2 uses the sample matrices, class 1
    recovers faster and class 3 lingers in the degraded states."""
    c1 = _pair([[0.60, 0.30, 0.10], [0.40, 0.45, 0.15], [0.30, 0.40, 0.30]],
               [[0.85, 0.10, 0.05], [0.60, 0.30, 0.10], [0.45, 0.35, 0.20]])
    c3 = _pair([[0.30, 0.40, 0.30], [0.10, 0.40, 0.50], [0.05, 0.20, 0.75]],
               [[0.60, 0.25, 0.15], [0.35, 0.45, 0.20], [0.20, 0.35, 0.45]])
    return (
        ClientClass(1, 30, (0.7, 1.0), 100e6, c1),
        ClientClass(2, 40, (0.4, 0.7), 50e6, env.sample_transitions()),
        ClientClass(3, 30, (0.2, 0.4), 20e6, c3),
    )


@dataclass
class TaskConfig:
    n: int = 2000
    dim: int = 20
    classes: int = 10
    tau: float = 0.1
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 1
    cluster_spread: float = 8.0
    center_scale: float = 10.0
    n_test: int = 500
    oracle_tol: float = 1e-6


@dataclass
class SimConfig:
    classes: tuple = field(default_factory=default_classes)
    budget: int = 10
    subsidies: SubsidySet = DEFAULT_SUBSIDIES
    discount: float = 0.9
    lam: float = 1.0  # seconds per unit loss gap
    alpha: float = 0.15
    eta_exponent: float = 0.5
    gamma_exponent: float = 1.0
    latency_cap: float | None = None  # None: derived from the population
    cap_factor: float = 3.0
    task: TaskConfig = field(default_factory=TaskConfig)
    max_rounds: int = 1000
    stop_at_threshold: bool = True
    observability: str = "oracle"
    sharing: str = "class"
    subsidy_update: str = "all"
    eta_mode: str = "visit"
    shared_penalty: bool = True
    carry_passive: bool = True
    noise_power: float = env.DEFAULT_NOISE_W
    transmit_power: float = env.DBM_23_WATTS
    base_seconds_per_sample: float = env.DEFAULT_BASE_SECONDS_PER_SAMPLE
    seed: int = 0

    def __post_init__(self):
        self.subsidies = SubsidySet(self.subsidies)
        self.validate()

    @property
    def n_clients(self) -> int:
        return sum(c.population for c in self.classes)

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.budget > self.n_clients:
            raise ValueError(f"budget {self.budget} exceeds the {self.n_clients} clients")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.observability not in ("oracle", "inferred"):
            raise ValueError(f"observability must be 'oracle' or 'inferred', got {self.observability!r}")
        if self.sharing not in ("class", "client"):
            raise ValueError(f"sharing must be 'class' or 'client', got {self.sharing!r}")
        if self.subsidy_update not in ("index", "all"):
            raise ValueError(f"subsidy_update must be 'index' or 'all', got {self.subsidy_update!r}")
        if self.eta_mode not in ("round", "visit"):
            raise ValueError(f"eta_mode must be 'round' or 'visit', got {self.eta_mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.latency_cap is not None and self.latency_cap <= 0:
            raise ValueError("latency_cap must be positive")
        if len({c.id for c in self.classes}) != len(self.classes):
            raise ValueError("class ids must be unique")
        t = self.task
        if t.tau <= 0 or t.lr <= 0 or t.batch < 1 or t.epochs < 0 or t.n < t.classes or t.dim < 1:
            raise ValueError("invalid task configuration")
        if self.n_clients > t.n:
            raise ValueError("more clients than training samples")

    def replace(self, **changes) -> "SimConfig":
        task_changes = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("task_")}
        task = dataclasses.replace(self.task, **task_changes) if task_changes else self.task
        return dataclasses.replace(self, task=task, **changes)


def reward(training_time: float, comm_time: float, loss_gap: float, lam: float, action: int) -> float:
    """Negative round cost of one client: latency when selected plus the weighted loss gap."""
    if action:
        if training_time < 0 or comm_time < 0:
            raise ValueError("times must be non-negative")
        return -(training_time + comm_time + lam * loss_gap)
    return -lam * loss_gap


def estimate_state(client: env.Client, mode: str, last_observation: float | None, cls: ClientClass,
                   previous: ClientState = ClientState.NORMAL) -> ClientState:
    """Oracle: the true state.  Inferred: the state whose analytic mean training
    time is nearest the last observed training time, or the previous estimate
    when nothing new was observed."""
    if mode == "oracle":
        return client.true_state
    if mode != "inferred":
        raise ValueError(f"unknown observability mode {mode!r}")
    if last_observation is None:
        return previous
    means = np.array([client.shift + env.training_time_mean_extra(client, s, cls) for s in ClientState])
    return ClientState(int(np.argmin(np.abs(means - last_observation))))


@dataclass
class RoundRecord:
    round: int
    selected: tuple
    included: tuple
    train_times: tuple
    comm_times: tuple
    round_latency: float
    cum_delay: float
    participant_loss: float
    full_loss: float
    test_acc: float
    loss_gap: float
    state_hist: tuple
    explored: bool


@dataclass
class RunResult:
    records: list
    converged: bool
    rounds_to_threshold: int | None
    total_delay: float
    policy: str = ""
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


_ORACLE_CACHE: dict = {}


def _cached_oracle(dataset: fl.Dataset, tol: float) -> float:
    h = hashlib.sha1(dataset.features.tobytes())
    h.update(dataset.labels.tobytes())
    key = (h.hexdigest(), tol)
    if key not in _ORACLE_CACHE:
        _ORACLE_CACHE[key] = fl.optimal_loss_oracle(dataset, tol)
    return _ORACLE_CACHE[key]


class Simulation:
    """All mutable state of one run.

    Independent random streams feed setup, data, the environment dynamics,
    local training and the policy, so the environment realization for a seed
    does not depend on which policy is being evaluated.
    """

    def __init__(self, config: SimConfig, policy: str | Policy):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.rng_setup, self.rng_data, self.rng_env, self.rng_train, self.rng_policy = (
            np.random.default_rng(s) for s in seeds)
        self.classes = {c.id: c for c in config.classes}
        self._build_task()
        self._build_clients()
        self.noise = env.NoiseAndCap(config.noise_power, self._latency_cap())
        self._calibrate_rewards()
        self.exact_indices = None
        self.policy = policy if isinstance(policy, Policy) else self._make_policy(policy)
        self.model = fl.zero_params(self.train)
        self.est_states = self.true_states.copy() if config.observability == "oracle" \
            else np.full(self.n, int(ClientState.NORMAL))
        self.last_obs = np.full(self.n, np.nan)
        self.pending: Feedback | None = None
        self.cum_delay = 0.0
        self.round = 0

    # --- setup ---------------------------------------------------------------------

    def _build_task(self):
        t = self.config.task
        centers = fl.make_cluster_centers(t.classes, t.dim, self.rng_data, t.center_scale)
        self.train = fl.generate_synthetic_dataset(t.n, t.classes, t.dim, t.cluster_spread, self.rng_data, centers)
        self.test = fl.generate_synthetic_dataset(max(t.n_test, t.classes), t.classes, t.dim, t.cluster_spread,
                                                  self.rng_data, centers)
        self.shards = fl.dirichlet_partition(self.train, self.config.n_clients, t.tau, self.rng_data)
        self.oracle_loss = _cached_oracle(self.train, t.oracle_tol)

    def _build_clients(self):
        """Clients get classes in a seeded random id order, so that id-based
        tie-breaking does not systematically favor one class."""
        cfg = self.config
        model_bits = self.train.n_params * 32.0
        class_of = self.rng_setup.permutation(np.repeat([c.id for c in cfg.classes],
                                                        [c.population for c in cfg.classes]))
        pis = {c.id: env.stationary_distribution(c.transitions.p_unselected) for c in cfg.classes}
        clients = []
        for j, cid in enumerate(class_of.tolist()):
            cls = self.classes[cid]
            kappa = self.rng_setup.uniform(*cls.capacity_range)
            state = ClientState(int(self.rng_setup.choice(3, p=pis[cid])))
            clients.append(env.Client(
                j, cid, env.compute_coefficient_from_capacity(kappa, cfg.base_seconds_per_sample),
                len(self.shards[j]), cfg.transmit_power, state, model_bits))
        self.clients = clients
        self.n = len(clients)
        self.class_ids = np.array([c.class_id for c in clients])
        self.true_states = np.array([int(c.true_state) for c in clients])
        self.shift = np.array([c.shift for c in clients])
        self.coef = np.stack([self.classes[c.class_id].coefficient_vector() for c in clients])
        self.bandwidth = np.array([self.classes[c.class_id].bandwidth for c in clients])
        self.gain_mean = np.array([self.classes[c.class_id].channel_gain_mean for c in clients])
        self.p_sel = np.stack([self.classes[c.class_id].transitions.p_selected for c in clients])
        self.p_unsel = np.stack([self.classes[c.class_id].transitions.p_unselected for c in clients])
        self.sizes = np.array([c.dataset_size for c in clients])

    def _latency_cap(self) -> float:
        cfg = self.config
        if cfg.latency_cap is not None:
            return cfg.latency_cap
        return env.default_latency_cap(self.clients, self.classes, cfg.budget, cfg.noise_power, cfg.cap_factor)

    def expected_latency(self, j: int, state) -> float:
        c = self.clients[j]
        return env.expected_latency(c, self.classes[c.class_id], state, self.config.noise_power,
                                    self.noise.latency_cap)

    def class_latency_table(self) -> dict:
        """Mean expected (capped) latency per (class, state) over class members."""
        out = {}
        for cid in self.classes:
            members = np.flatnonzero(self.class_ids == cid)
            for s in ClientState:
                out[(cid, s)] = float(np.mean([self.expected_latency(j, s) for j in members])) if len(members) else 0.0
        return out

    def _calibrate_rewards(self):
        """Affine reward normalization mapping the myopic index range onto the subsidy grid.

        Latency enters rewards in units of ``reward_scale`` seconds and the
        passive action pays ``idle_cost``; the pair is chosen so that
        ``idle_cost - latency / reward_scale`` spans the subsidy set from its
        smallest to its second-largest value across (class, state).  The top
        level stays free so that a learner's untried (optimistic) cells rank
        above every explored one.  Uses only static parameters, never the
        transition matrices.
        """
        lat = self.class_latency_table()
        self.class_latency = lat
        lo, hi = min(lat.values()), max(lat.values())
        m = self.config.subsidies
        top = m[-2] if len(m) > 1 else m[-1]
        span = top - m[0]
        scale = (hi - lo) / span if hi > lo and span > 0 else max(hi, 1e-12)
        self.reward_scale = scale
        self.idle_cost = top + lo / scale

    def arm_mdp(self, class_id: int) -> ArmMDP:
        """Single-arm MDP of a class under the normalized rewards (loss-gap term
        omitted: it is common to both actions and does not move the index)."""
        r = np.zeros((3, 2))
        for s in ClientState:
            r[s, 1] = -self.class_latency[(class_id, s)] / self.reward_scale
            r[s, 0] = -self.idle_cost
        return ArmMDP(r, self.classes[class_id].transitions, self.config.discount)

    def compute_exact_indices(self) -> dict:
        if self.exact_indices is None:
            out = {}
            for cid in self.classes:
                w = whittle_indices(self.arm_mdp(cid), tol=1e-7)
                for s in ClientState:
                    out[(cid, s)] = float(w[s])
            self.exact_indices = out
        return self.exact_indices

    def learner_settings(self) -> LearnerSettings:
        cfg = self.config
        return LearnerSettings(cfg.discount, cfg.eta_exponent, cfg.gamma_exponent, self.reward_scale,
                               self.idle_cost, cfg.sharing, cfg.subsidy_update, cfg.eta_mode,
                               cfg.shared_penalty, cfg.carry_passive)

    def _make_policy(self, name: str) -> Policy:
        if name == "ran":
            return RandomPolicy()
        if name == "ef":
            exp = {}
            for j, c in enumerate(self.clients):
                pi = env.stationary_distribution(self.classes[c.class_id].transitions.p_unselected)
                exp[j] = float(sum(pi[s] * self.expected_latency(j, s) for s in ClientState))
            return EfficiencyFirstPolicy(exp)
        if name == "ucb":
            return UcbPolicy()
        if name == "fi":
            return FullInformationPolicy(self.compute_exact_indices())
        if name == "cql":
            return CqlPolicy(self.class_ids, self.learner_settings())
        if name == "wilfq":
            return WilfqPolicy(self.class_ids, self.config.subsidies, self.learner_settings(), self.rng_policy)
        raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")

    # --- round loop ----------------------------------------------------------------

    def _estimate_states(self):
        if self.config.observability == "oracle":
            self.est_states = self.true_states.copy()
            return
        for j in np.flatnonzero(~np.isnan(self.last_obs)):
            c = self.clients[j]
            self.est_states[j] = int(estimate_state(c, "inferred", float(self.last_obs[j]),
                                                    self.classes[c.class_id], ClientState(int(self.est_states[j]))))
        self.last_obs[:] = np.nan

    def run_round(self) -> RoundRecord:
        cfg = self.config
        self.round += 1
        r = self.round
        self._estimate_states()
        if self.pending is not None:
            self.policy.learn(self.pending, self.est_states.copy())
            self.pending = None

        ctx = SelectionContext(r, [ClientSnapshot(j, int(self.class_ids[j]), None, ClientState(int(self.est_states[j])))
                                   for j in range(self.n)], cfg.budget, self.rng_policy)
        selected, explored = self.policy.select(ctx, self.true_states)
        if len(selected) != cfg.budget or len(set(selected)) != cfg.budget:
            raise RuntimeError(f"policy {self.policy.name} returned an invalid selection")
        actions = np.zeros(self.n, dtype=np.int64)
        actions[selected] = 1

        # environment draws for every client keep streams aligned across policies
        extra = self.rng_env.standard_exponential(self.n)
        gains = self.rng_env.standard_exponential(self.n) * self.gain_mean
        u = self.rng_env.random(self.n)

        states_now = self.true_states
        t_train = self.shift + extra * self.coef[np.arange(self.n), states_now] * self.shift
        snr = cfg.transmit_power * gains / cfg.noise_power
        with np.errstate(divide="ignore"):
            rate = self.bandwidth * np.log2(1.0 + snr)
            t_comm = np.where(rate > 0, self.train.n_params * 32.0 / rate, np.inf)
        cap = self.noise.latency_cap
        total = t_train + t_comm
        sel = np.array(selected)
        included = [j for j in selected if total[j] <= cap]
        t_round = env.round_latency(total[sel].tolist(), cap)

        start = self.model
        local = {}
        for j in included:
            local[j] = fl.local_train(start, self.train, self.shards[j], cfg.task.epochs, cfg.task.lr,
                                      cfg.task.batch, self.rng_train)
        if local:
            k = fl.data_weights({j: int(self.sizes[j]) for j in included})
            self.model = fl.aggregate(local, k)
            part_loss = fl.global_loss(local, self.train, {j: self.shards[j] for j in included}, k)
        else:
            part_loss = fl.full_loss(self.model, self.train)
        full = fl.full_loss(self.model, self.train)
        gap = max(full - self.oracle_loss, 0.0)
        part_gap = max(part_loss - self.oracle_loss, 0.0)
        acc = fl.accuracy(self.model, self.test)

        capped = np.minimum(total, cap)
        rewards = np.full(self.n, -cfg.lam * part_gap)
        rewards[sel] = -(capped[sel] + cfg.lam * part_gap)
        lat_obs = np.full(self.n, np.nan)
        lat_obs[sel] = capped[sel]
        self.last_obs = np.full(self.n, np.nan)
        self.last_obs[sel] = t_train[sel]
        self.pending = Feedback(r, self.est_states.copy(), actions, lat_obs, rewards, part_gap)

        hist = np.bincount(self.true_states, minlength=3) / self.n
        self.true_states = env.step_states(self.true_states, actions.astype(bool), self.p_sel, self.p_unsel, u)
        for j, c in enumerate(self.clients):
            c.true_state = ClientState(int(self.true_states[j]))

        self.cum_delay += t_round
        return RoundRecord(
            round=r, selected=tuple(selected), included=tuple(included),
            train_times=tuple(float(t_train[j]) for j in selected),
            comm_times=tuple(float(t_comm[j]) for j in selected),
            round_latency=float(t_round), cum_delay=self.cum_delay, participant_loss=float(part_loss),
            full_loss=float(full), test_acc=acc, loss_gap=float(gap), state_hist=tuple(float(h) for h in hist),
            explored=bool(explored))

    def run(self) -> RunResult:
        cfg = self.config
        records, hit = [], None
        for _ in range(cfg.max_rounds):
            rec = self.run_round()
            records.append(rec)
            if hit is None and rec.loss_gap <= cfg.alpha:
                hit = rec.round
                if cfg.stop_at_threshold:
                    break
        counted = records[:hit] if hit else records
        total = float(sum(r.round_latency for r in counted))
        extras = {"oracle_loss": self.oracle_loss, "latency_cap": self.noise.latency_cap,
                  "reward_scale": self.reward_scale, "idle_cost": self.idle_cost}
        if isinstance(self.policy, WilfqPolicy):
            extras["learned_indices"] = self.policy.learned_indices()
        return RunResult(records, hit is not None, hit, total, self.policy.name, cfg.seed, extras)


def run_simulation(config: SimConfig, policy: str | Policy) -> RunResult:
    return Simulation(config, policy).run()


def t_interval(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean, sample std and t-distribution CI half-width."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, x.size - 1) * sd / math.sqrt(x.size))
    return mean, sd, half


@dataclass
class MetricSummary:
    mean: float
    std: float
    half_width: float
    n: int


def summarize_metric(values: Sequence[float]) -> MetricSummary:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if len(vals) >= 2:
        return MetricSummary(*t_interval(vals), len(vals))
    if len(vals) == 1:
        return MetricSummary(float(vals[0]), float("nan"), float("nan"), 1)
    return MetricSummary(float("nan"), float("nan"), float("nan"), 0)


def resample_curve(result: RunResult, grid: np.ndarray) -> np.ndarray:
    """Test accuracy as a step function of cumulative delay, sampled on ``grid``."""
    delay = np.array([r.cum_delay for r in result.records])
    acc = np.array([r.test_acc for r in result.records])
    idx = np.searchsorted(delay, grid, side="right") - 1
    out = np.where(idx >= 0, acc[np.clip(idx, 0, None)], 0.0)
    return out


@dataclass
class Replication:
    results: list
    total_delay: MetricSummary
    rounds: MetricSummary
    final_accuracy: MetricSummary
    n_converged: int
    delay_grid: np.ndarray
    mean_curve: np.ndarray


def aggregate_results(results: Sequence[RunResult], grid_step_fraction: float = 0.01) -> Replication:
    conv = [r for r in results if r.converged]
    max_delay = max(r.records[-1].cum_delay for r in results)
    grid = np.arange(0.0, max_delay + 1e-12, max(max_delay * grid_step_fraction, 1e-12))
    curves = np.stack([resample_curve(r, grid) for r in results])
    return Replication(
        list(results),
        summarize_metric([r.total_delay for r in conv]),
        summarize_metric([float(r.rounds_to_threshold) for r in conv]),
        summarize_metric([r.final_accuracy for r in results]),
        len(conv), grid, curves.mean(axis=0))


def replicate(config: SimConfig, policy: str, seeds: Sequence[int], workers: int = 1) -> Replication:
    """Run ``policy`` once per seed and summarize with 95 % t-intervals."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("replicate needs at least two seeds")
    configs = [config.replace(seed=s) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_simulation, configs, [policy] * len(configs)))
    else:
        results = [run_simulation(c, policy) for c in configs]
    return aggregate_results(results)
