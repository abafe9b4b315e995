"""Subsidized Q-learning, value iteration and exact Whittle indices for a 3-state arm."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .env_model import N_STATES, ClientState, TransitionPair

PASSIVE, ACTIVE = 0, 1


class SubsidySet(tuple):
    """Strictly increasing candidate subsidies."""

    def __new__(cls, values: Iterable[float]):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("subsidy set must be non-empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("subsidy set must be strictly increasing")
        return super().__new__(cls, vals)

    def as_array(self) -> np.ndarray:
        return np.asarray(self, dtype=float)


DEFAULT_SUBSIDIES = SubsidySet([0.1, 0.2, 0.3, 0.4, 0.5])


class SubsidizedQTable:
    """Q-values indexed by (scope, state, action, subsidy slot).

    A scope is a client id or a class id depending on how learning is shared.
    """

    def __init__(self, scopes: Sequence[Hashable], subsidies: SubsidySet, init: float = 0.0):
        self.scopes = list(scopes)
        self.subsidies = SubsidySet(subsidies)
        self._row = {s: i for i, s in enumerate(self.scopes)}
        shape = (len(self.scopes), N_STATES, 2, len(self.subsidies))
        self.values = np.full(shape, float(init))
        self.visits = np.zeros(shape, dtype=np.int64)
        self._m = self.subsidies.as_array()

    def row(self, scope: Hashable) -> int:
        return self._row[scope]

    def q(self, scope, state, action, m_idx) -> float:
        return float(self.values[self._row[scope], int(state), int(action), int(m_idx)])

    def update(self, scope, state, action, m_idx, reward: float, next_state, eta: float, beta: float) -> float:
        """One Q-learning step on a single entry; returns the new value.

        The subsidy of slot ``m_idx`` is paid on the passive action.
        """
        i, s, a, k = self._row[scope], int(state), int(action), int(m_idx)
        v = self.values[i]
        target = reward + (self.subsidies[k] if a == PASSIVE else 0.0)
        target += beta * max(v[int(next_state), 0, k], v[int(next_state), 1, k])
        new = (1.0 - eta) * v[s, a, k] + eta * target
        v[s, a, k] = new
        self.visits[i, s, a, k] += 1
        return new

    def update_all(self, scope, state, action, reward: float, next_state, eta, beta: float,
                   carry: bool = False) -> None:
        """The same transition applied to every subsidy slot at once.

        ``eta`` is a scalar or one step size per slot. With ``carry`` a passive
        update shifts the active value by the same amount, so active samples
        alone move the gap Q1 - Q0.
        """
        i, s, a = self._row[scope], int(state), int(action)
        v = self.values[i]
        target = reward + beta * v[int(next_state)].max(axis=0)
        if a == PASSIVE:
            target = target + self._m
        delta = eta * (target - v[s, a])
        v[s, a] += delta
        if carry and a == PASSIVE:
            v[s, ACTIVE] += delta
        self.visits[i, s, a] += 1

    def gaps(self, scope) -> np.ndarray:
        """Active minus passive value, shape (state, subsidy)."""
        v = self.values[self._row[scope]]
        return v[:, ACTIVE, :] - v[:, PASSIVE, :]

    def to_csv(self, path_or_file) -> None:
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scope", "state", "action", "subsidy", "value"])
            for i, scope in enumerate(self.scopes):
                for s in ClientState:
                    for a in (PASSIVE, ACTIVE):
                        for k, m in enumerate(self.subsidies):
                            w.writerow([scope, s.name.lower(), a, f"{m:.9g}", f"{self.values[i, s, a, k]:.9g}"])
        finally:
            if own:
                fh.close()


def q_update(table: SubsidizedQTable, key, reward: float, subsidy: float, next_state, eta: float,
             beta: float) -> SubsidizedQTable:
    """Apply one Q-learning step at ``key = (scope, state, action, subsidy_index)``.

    ``subsidy`` must equal the subsidy stored at that index; it is checked
    rather than trusted so callers cannot silently desynchronize the two.
    """
    scope, state, action, m_idx = key
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if abs(table.subsidies[m_idx] - subsidy) > 1e-12:
        raise ValueError(f"subsidy {subsidy} does not match slot {m_idx} ({table.subsidies[m_idx]})")
    if eta == 0.0:
        table.visits[table.row(scope), int(state), int(action), int(m_idx)] += 1
        return table
    table.update(scope, state, action, m_idx, reward, next_state, eta, beta)
    return table


def estimate_whittle_slot(gaps_for_state: np.ndarray) -> int:
    """Slot minimizing |Q(s,1;m) - Q(s,0;m)|; argmin keeps the first (smallest m) on ties."""
    return int(np.argmin(np.abs(gaps_for_state)))


def estimate_whittle(table: SubsidizedQTable, scope, state, subsidies: SubsidySet | None = None) -> float:
    subsidies = table.subsidies if subsidies is None else subsidies
    return float(subsidies[estimate_whittle_slot(table.gaps(scope)[int(state)])])


def index_table_from_q(table: SubsidizedQTable) -> dict:
    """Estimated index for every (scope, state)."""
    out = {}
    for scope in table.scopes:
        g = table.gaps(scope)
        for s in ClientState:
            out[(scope, s)] = table.subsidies[estimate_whittle_slot(g[s])]
    return out


@dataclass(frozen=True)
class ArmMDP:
    reward: np.ndarray  # (state, action)
    transitions: TransitionPair
    discount: float

    def __post_init__(self):
        r = np.asarray(self.reward, dtype=float)
        if r.shape != (N_STATES, 2):
            raise ValueError("reward must have shape (3, 2)")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        object.__setattr__(self, "reward", r)

    def shifted(self, constant: float) -> "ArmMDP":
        return ArmMDP(self.reward + constant, self.transitions, self.discount)

    def scaled(self, factor: float) -> "ArmMDP":
        return ArmMDP(self.reward * factor, self.transitions, self.discount)


@dataclass
class ValueSolution:
    values: np.ndarray  # (state,)
    q: np.ndarray  # (state, action)
    greedy: np.ndarray  # (state,), passive on exact ties
    iterations: int
    residuals: list


def _q_from_values(mdp: ArmMDP, subsidy: float, v: np.ndarray) -> np.ndarray:
    q = mdp.reward.copy()
    q[:, PASSIVE] += subsidy + mdp.discount * (mdp.transitions.p_unselected @ v)
    q[:, ACTIVE] += mdp.discount * (mdp.transitions.p_selected @ v)
    return q


def value_iteration(mdp: ArmMDP, subsidy: float, tol: float = 1e-10, max_iter: int = 100_000) -> ValueSolution:
    """Solve the subsidized Bellman equation to sup-norm residual below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(N_STATES)
    residuals = []
    for it in range(1, max_iter + 1):
        q = _q_from_values(mdp, subsidy, v)
        nv = q.max(axis=1)
        res = float(np.max(np.abs(nv - v)))
        residuals.append(res)
        v = nv
        if res < tol:
            break
    q = _q_from_values(mdp, subsidy, v)
    greedy = (q[:, ACTIVE] > q[:, PASSIVE]).astype(int)
    return ValueSolution(v, q, greedy, it, residuals)


def policy_evaluation(mdp: ArmMDP, subsidy: float, policy: np.ndarray) -> np.ndarray:
    """Exact value of a fixed deterministic policy by a linear solve."""
    policy = np.asarray(policy, dtype=int)
    p = np.where(policy[:, None] == ACTIVE, mdp.transitions.p_selected, mdp.transitions.p_unselected)
    r = mdp.reward[np.arange(N_STATES), policy] + np.where(policy == PASSIVE, subsidy, 0.0)
    return np.linalg.solve(np.eye(N_STATES) - mdp.discount * p, r)


def policy_iteration(mdp: ArmMDP, subsidy: float, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    policy = np.zeros(N_STATES, dtype=int)
    for _ in range(max_iter):
        v = policy_evaluation(mdp, subsidy, policy)
        q = _q_from_values(mdp, subsidy, v)
        new = np.where(q[:, ACTIVE] > q[:, PASSIVE] + 1e-12, ACTIVE, PASSIVE)
        if np.array_equal(new, policy):
            return v, q
        policy = new
    raise RuntimeError("policy iteration did not converge")


def indifference_gap(mdp: ArmMDP, state, subsidy: float, tol: float = 1e-11) -> float:
    q = value_iteration(mdp, subsidy, tol).q
    return float(q[int(state), ACTIVE] - q[int(state), PASSIVE])


class NotBracketed(ValueError):
    pass


def exact_whittle(mdp: ArmMDP, state, bracket: tuple[float, float] | None = None, tol: float = 1e-9) -> float:
    """Bisection for the subsidy at which both actions are equally good in ``state``."""
    lo, hi = default_bracket(mdp) if bracket is None else bracket
    g_lo = indifference_gap(mdp, state, lo)
    g_hi = indifference_gap(mdp, state, hi)
    if g_lo < 0 or g_hi > 0:
        raise NotBracketed(f"not bracketed: gap({lo})={g_lo:.3g}, gap({hi})={g_hi:.3g}")
    while hi - lo >= tol:
        mid = 0.5 * (lo + hi)
        if indifference_gap(mdp, state, mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def default_bracket(mdp: ArmMDP) -> tuple[float, float]:
    r = max(float(np.max(np.abs(mdp.reward))), 1e-3)
    return -2.0 * r, 2.0 * r


def whittle_index(mdp: ArmMDP, state, tol: float = 1e-9, max_widen: int = 60) -> float:
    """``exact_whittle`` with the bracket widened geometrically until it holds a root."""
    lo, hi = default_bracket(mdp)
    for _ in range(max_widen):
        try:
            return exact_whittle(mdp, state, (lo, hi), tol)
        except NotBracketed:
            lo, hi = 2.0 * lo, 2.0 * hi
    raise NotBracketed("no sign change found after widening")


def whittle_indices(mdp: ArmMDP, tol: float = 1e-9) -> np.ndarray:
    return np.array([whittle_index(mdp, s, tol) for s in ClientState])


def passive_set(mdp: ArmMDP, subsidy: float) -> frozenset:
    sol = value_iteration(mdp, subsidy, 1e-11)
    return frozenset(int(s) for s in np.flatnonzero(sol.greedy == PASSIVE))


def check_indexability(mdp: ArmMDP, m_grid: Sequence[float]) -> bool:
    """True iff the passive set only grows along the increasing subsidy grid."""
    grid = list(m_grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("m_grid must be increasing")
    prev = frozenset()
    for m in grid:
        cur = passive_set(mdp, m)
        if not prev <= cur:
            return False
        prev = cur
    return True


def learn_q_fixed_subsidy(mdp: ArmMDP, subsidy: float, n_updates: int, rng: np.random.Generator,
                          decay: float = 0.6, reward_noise: float = 0.0) -> np.ndarray:
    """Tabular Q-learning on one arm with uniformly random actions.

    Step size at an entry is ``1 / (1 + visits) ** decay``.  Returns the
    learned (state, action) table.
    """
    table = SubsidizedQTable([0], SubsidySet([subsidy]))
    p_cum = np.stack([np.cumsum(mdp.transitions.p_unselected, axis=1),
                      np.cumsum(mdp.transitions.p_selected, axis=1)])
    actions = rng.integers(0, 2, size=n_updates)
    u = rng.random(n_updates)
    noise = rng.standard_normal(n_updates) * reward_noise if reward_noise else np.zeros(n_updates)
    reward = mdp.reward
    s = int(rng.integers(0, N_STATES))
    visits = table.visits[0]
    for t in range(n_updates):
        a = int(actions[t])
        nxt = min(int(np.searchsorted(p_cum[a, s], u[t], side="right")), N_STATES - 1)
        eta = 1.0 / (1.0 + visits[s, a, 0]) ** decay
        table.update(0, s, a, 0, reward[s, a] + noise[t], nxt, eta, mdp.discount)
        s = nxt
    return table.values[0, :, :, 0].copy()
