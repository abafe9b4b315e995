"""Client-selection policies: random, efficiency-first, UCB, classical Q-learning,
full-information Whittle and learned-Whittle (WILF-Q)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .env_model import ClientState
from .whittle_core import ACTIVE, PASSIVE, SubsidizedQTable, SubsidySet, estimate_whittle_slot

POLICY_NAMES = ("ran", "ef", "cql", "ucb", "fi", "wilfq")


@dataclass(frozen=True)
class ClientSnapshot:
    id: int
    class_id: int
    last_latency: float | None = None
    est_state: ClientState = ClientState.NORMAL


@dataclass
class SelectionContext:
    round: int
    available: Sequence[ClientSnapshot]
    budget: int
    rng: np.random.Generator

    def __post_init__(self):
        if not 1 <= self.budget <= len(self.available):
            raise ValueError(f"budget {self.budget} outside [1, {len(self.available)}]")

    @property
    def ids(self) -> np.ndarray:
        return np.array([c.id for c in self.available], dtype=np.int64)


def top_k(ids: np.ndarray, scores: np.ndarray, k: int, largest: bool = True) -> list[int]:
    """The ``k`` best ids by score; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((ids, -scores if largest else scores))
    return sorted(int(i) for i in ids[order[:k]])


def select_random(ctx: SelectionContext) -> list[int]:
    return sorted(int(i) for i in ctx.rng.choice(ctx.ids, size=ctx.budget, replace=False))


def select_efficiency_first(ctx: SelectionContext, expected_latency: Mapping[int, float]) -> list[int]:
    ids = ctx.ids
    return top_k(ids, np.array([expected_latency[int(i)] for i in ids]), ctx.budget, largest=False)


@dataclass
class UcbStats:
    counts: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)

    def record(self, client: int, latency: float) -> None:
        n = self.counts.get(client, 0) + 1
        m = self.means.get(client, 0.0)
        self.counts[client] = n
        self.means[client] = m + (latency - m) / n

    def index(self, client: int, round_: int) -> float:
        n = self.counts.get(client, 0)
        if n == 0:
            return -math.inf
        return self.means[client] - math.sqrt(2.0 * math.log(max(round_, 1)) / n)


def select_ucb(ctx: SelectionContext, stats: UcbStats) -> list[int]:
    """Lowest optimistic latency ``mean - sqrt(2 ln r / n)``; unseen clients first."""
    ids = ctx.ids
    return top_k(ids, np.array([stats.index(int(i), ctx.round) for i in ids]), ctx.budget, largest=False)


def select_cql(ctx: SelectionContext, qtable: SubsidizedQTable, gamma_r: float,
               rng: np.random.Generator | None = None) -> list[int]:
    """Epsilon-greedy on the advantage Q(s,1) - Q(s,0) from a per-class table."""
    rng = ctx.rng if rng is None else rng
    if rng.random() < gamma_r:
        return select_random(ctx)
    adv = np.array([qtable.gaps(c.class_id)[int(c.est_state), 0] for c in ctx.available])
    return top_k(ctx.ids, adv, ctx.budget)


def select_fi(ctx: SelectionContext, exact_indices: Mapping, true_states: Mapping[int, ClientState]) -> list[int]:
    scores = np.array([exact_indices[(c.class_id, ClientState(true_states[c.id]))] for c in ctx.available])
    return top_k(ctx.ids, scores, ctx.budget)


def select_wilfq(ctx: SelectionContext, index_table: dict, estimated_states: Mapping[int, ClientState],
                 gamma_r: float, subsidies: SubsidySet, rng: np.random.Generator | None = None):
    """Top-``budget`` clients by estimated index at their estimated state.

    With probability ``gamma_r`` the stored index of every available client is
    redrawn uniformly from ``subsidies`` and the action vector is shuffled,
    after the greedy selection has been made.  ``index_table`` is mutated in
    place.  Returns ``(selected_ids, explored)``.
    """
    rng = ctx.rng if rng is None else rng
    ids = ctx.ids
    scores = np.array([index_table[(int(i), ClientState(estimated_states[int(i)]))] for i in ids])
    selected = top_k(ids, scores, ctx.budget)
    explored = bool(rng.random() < gamma_r)
    if explored:
        draws = rng.integers(0, len(subsidies), size=len(ids))
        for i, k in zip(ids, draws):
            index_table[(int(i), ClientState(estimated_states[int(i)]))] = subsidies[int(k)]
        actions = np.isin(ids, selected)
        selected = sorted(int(i) for i in ids[rng.permutation(actions)])
    return selected, explored


# --- stateful policy objects driven by the round loop ---------------------------------


@dataclass
class Feedback:
    """What the server learned in one round, for every client."""

    round: int
    states: np.ndarray  # estimated state per client at selection time
    actions: np.ndarray  # 1 if selected
    latencies: np.ndarray  # capped latency of selected clients, nan otherwise
    rewards: np.ndarray  # raw per-client reward (seconds)
    participant_gap: float


class Policy:
    name = "base"
    uses_true_state = False

    def select(self, ctx: SelectionContext, true_states: np.ndarray) -> tuple[list[int], bool]:
        raise NotImplementedError

    def learn(self, fb: Feedback, next_states: np.ndarray) -> None:
        pass


class RandomPolicy(Policy):
    name = "ran"

    def select(self, ctx, true_states):
        return select_random(ctx), False


class EfficiencyFirstPolicy(Policy):
    name = "ef"

    def __init__(self, expected_latency: Mapping[int, float]):
        self.expected_latency = dict(expected_latency)

    def select(self, ctx, true_states):
        return select_efficiency_first(ctx, self.expected_latency), False


class UcbPolicy(Policy):
    name = "ucb"

    def __init__(self):
        self.stats = UcbStats()

    def select(self, ctx, true_states):
        return select_ucb(ctx, self.stats), False

    def learn(self, fb, next_states):
        for j in np.flatnonzero(fb.actions):
            self.stats.record(int(j), float(fb.latencies[j]))


class FullInformationPolicy(Policy):
    name = "fi"
    uses_true_state = True

    def __init__(self, exact_indices: Mapping):
        self.exact_indices = dict(exact_indices)

    def select(self, ctx, true_states):
        return select_fi(ctx, self.exact_indices, {c.id: true_states[c.id] for c in ctx.available}), False


@dataclass
class LearnerSettings:
    discount: float = 0.9
    eta_exponent: float = 0.5
    gamma_exponent: float = 1.0
    reward_scale: float = 1.0  # seconds per reward unit
    idle_cost: float = 0.0  # reward units charged to the passive action (index offset)
    sharing: str = "class"  # "class" or "client"
    subsidy_update: str = "all"  # "index" (slot of current estimate) or "all"
    eta_mode: str = "visit"  # "round": r^-e shared by all cells; "visit": (1 + visits)^-e per cell
    shared_penalty: bool = True  # learn the action-independent loss-gap term as one value per scope
    carry_passive: bool = True  # passive updates shift both actions; see SubsidizedQTable.update_all
    explore: bool = True  # False pins gamma_r to 0

    def eta(self, r: int) -> float:
        return float(r) ** -self.eta_exponent

    def cell_eta(self, r: int, visits):
        if self.eta_mode == "visit":
            return (1.0 + np.asarray(visits, dtype=float)) ** -self.eta_exponent
        return self.eta(r)

    def gamma(self, r: int) -> float:
        if not self.explore:
            return 0.0
        return float(r) ** -self.gamma_exponent


def _latency_part(fb: Feedback) -> np.ndarray:
    """Per-client latency reward: minus the capped latency if selected, 0 otherwise."""
    return -np.where(fb.actions == ACTIVE, np.nan_to_num(fb.latencies), 0.0)


def _scopes(class_ids: np.ndarray, sharing: str) -> np.ndarray:
    if sharing == "class":
        return class_ids.copy()
    if sharing == "client":
        return np.arange(len(class_ids))
    raise ValueError(f"unknown sharing mode {sharing!r}")


class CqlPolicy(Policy):
    """Per-class (state, action) Q-learning that minimizes latency, no subsidy.

    The passive action earns nothing, so the learned advantage of a state is
    the discounted latency cost of serving it now rather than idling.
    """

    name = "cql"

    def __init__(self, class_ids: np.ndarray, settings: LearnerSettings):
        self.settings = settings
        self.class_ids = np.asarray(class_ids)
        self.scope_of = _scopes(self.class_ids, settings.sharing)
        self.table = SubsidizedQTable(sorted(set(self.scope_of.tolist())), SubsidySet([0.0]))

    def select(self, ctx, true_states):
        gamma = self.settings.gamma(ctx.round)
        if ctx.rng.random() < gamma:
            return select_random(ctx), True
        adv = np.array([self.table.gaps(int(self.scope_of[c.id]))[int(c.est_state), 0] for c in ctx.available])
        return top_k(ctx.ids, adv, ctx.budget), False

    def learn(self, fb, next_states):
        st = self.settings
        r = _latency_part(fb) / st.reward_scale
        table = self.table
        for j in range(len(fb.actions)):
            scope, s, a = int(self.scope_of[j]), int(fb.states[j]), int(fb.actions[j])
            eta = st.cell_eta(fb.round, table.visits[table.row(scope), s, a])
            table.update_all(scope, s, a, float(r[j]), int(next_states[j]), eta, st.discount)


class WilfqPolicy(Policy):
    """Learned Whittle indices from subsidized Q-tables."""

    name = "wilfq"

    def __init__(self, class_ids: np.ndarray, subsidies: SubsidySet, settings: LearnerSettings,
                 rng: np.random.Generator):
        self.settings = settings
        self.subsidies = SubsidySet(subsidies)
        self.class_ids = np.asarray(class_ids)
        self.scope_of = _scopes(self.class_ids, settings.sharing)
        self.table = SubsidizedQTable(sorted(set(self.scope_of.tolist())), self.subsidies)
        n = len(self.class_ids)
        # index table as subsidy slots, randomly initialized
        self.slots = rng.integers(0, len(self.subsidies), size=(n, len(ClientState)))
        self._slot_of = {m: k for k, m in enumerate(self.subsidies)}
        self.used_slots = np.zeros(n, dtype=np.int64)
        # loss-gap contribution shared by every (state, action, subsidy) cell of a scope
        self.penalty = np.zeros(len(self.table.scopes))
        self._perturbed = False
        self.pinned: dict | None = None

    def pin_indices(self, indices: Mapping) -> None:
        """Rank by fixed (class, state) indices instead of the learned ones."""
        self.pinned = dict(indices)

    def q_values(self) -> np.ndarray:
        """Full Q estimates, shape (scope, state, action, subsidy)."""
        return self.table.values + self.penalty[:, None, None, None]

    def index_table(self) -> dict:
        return {(j, ClientState(s)): self.subsidies[int(self.slots[j, s])]
                for j in range(self.slots.shape[0]) for s in range(self.slots.shape[1])}

    def learned_indices(self) -> dict:
        """Current estimate per (scope, state) straight from the Q-table."""
        out = {}
        for scope in self.table.scopes:
            g = self.table.gaps(scope)
            for s in ClientState:
                out[(scope, s)] = self.subsidies[estimate_whittle_slot(g[s])]
        return out

    def select(self, ctx, true_states):
        est = np.array([int(c.est_state) for c in ctx.available])
        ids = ctx.ids
        if self.pinned is not None:
            table = {(int(j), ClientState(s)): self.pinned[(int(self.class_ids[j]), ClientState(s))]
                     for j, s in zip(ids, est)}
            return select_wilfq(ctx, table, dict(zip(ids.tolist(), est.tolist())),
                                self.settings.gamma(ctx.round), self.subsidies)
        if not self._perturbed:
            self.refresh_indices_for(ids, est)
        table = {(int(j), ClientState(s)): self.subsidies[int(self.slots[j, s])] for j, s in zip(ids, est)}
        selected, explored = select_wilfq(ctx, table, dict(zip(ids.tolist(), est.tolist())),
                                          self.settings.gamma(ctx.round), self.subsidies)
        for j, s in zip(ids, est):
            self.slots[j, s] = self._slot_of[table[(int(j), ClientState(s))]]
            self.used_slots[j] = self.slots[j, s]
        # randomized indices rank the next round before the Q-table overwrites them
        self._perturbed = explored
        return selected, explored

    def refresh_indices_for(self, ids: np.ndarray, est: np.ndarray) -> None:
        gaps = {}
        for j, s in zip(ids, est):
            sc = int(self.scope_of[j])
            if sc not in gaps:
                gaps[sc] = self.table.gaps(sc)
            self.slots[j, s] = estimate_whittle_slot(gaps[sc][s])

    def learn(self, fb, next_states):
        st = self.settings
        passive_cost = np.where(fb.actions == ACTIVE, 0.0, st.idle_cost)
        if st.shared_penalty:
            lat = _latency_part(fb)
            common = float(np.mean(fb.rewards - lat)) / st.reward_scale
            eta = st.eta(fb.round)
            self.penalty += eta * (common + st.discount * self.penalty - self.penalty)
            r = lat / st.reward_scale - passive_cost
        else:
            r = fb.rewards / st.reward_scale - passive_cost
        table = self.table
        for j in range(len(fb.actions)):
            scope, s, a = int(self.scope_of[j]), int(fb.states[j]), int(fb.actions[j])
            i = table.row(scope)
            if st.subsidy_update == "all":
                eta = st.cell_eta(fb.round, table.visits[i, s, a])
                table.update_all(scope, s, a, float(r[j]), int(next_states[j]), eta, st.discount,
                                 carry=st.carry_passive)
            else:
                k = int(self.used_slots[j])
                eta = float(st.cell_eta(fb.round, table.visits[i, s, a, k]))
                table.update(scope, s, a, k, float(r[j]), int(next_states[j]), eta, st.discount)


__all__ = [
    "POLICY_NAMES", "ClientSnapshot", "SelectionContext", "UcbStats", "Feedback", "Policy", "LearnerSettings",
    "RandomPolicy", "EfficiencyFirstPolicy", "UcbPolicy", "FullInformationPolicy", "CqlPolicy", "WilfqPolicy",
    "select_random", "select_efficiency_first", "select_ucb", "select_cql", "select_fi", "select_wilfq", "top_k",
    "PASSIVE", "ACTIVE",
]
