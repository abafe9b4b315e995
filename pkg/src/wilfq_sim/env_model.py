"""Wireless client environment: hidden Markov states and latency sampling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

N_STATES = 3


class ClientState(enum.IntEnum):
    """Hidden per-round client condition, ordered by severity."""

    NORMAL = 0
    LIMITED = 1
    BUSY = 2


def _check_stochastic(matrix: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (N_STATES, N_STATES):
        raise ValueError(f"{name} must be 3x3, got shape {m.shape}")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ValueError(f"{name} has entries outside [0, 1]")
    if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError(f"{name} rows must sum to 1")
    return m


@dataclass(frozen=True)
class TransitionPair:
    """State dynamics under selection (``p_selected``) and idling (``p_unselected``)."""

    p_selected: np.ndarray
    p_unselected: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_selected", _check_stochastic(self.p_selected, "p_selected"))
        object.__setattr__(self, "p_unselected", _check_stochastic(self.p_unselected, "p_unselected"))

    def for_action(self, action: int) -> np.ndarray:
        return self.p_selected if action else self.p_unselected


# Sample matrices for a mid-capacity class (rows/cols ordered normal, limited, busy).
SAMPLE_P_SELECTED = np.array([
    [1 / 2, 1 / 3, 1 / 6],
    [1 / 6, 1 / 2, 1 / 3],
    [1 / 6, 1 / 6, 2 / 3],
])
SAMPLE_P_UNSELECTED = np.array([
    [2 / 3, 1 / 6, 1 / 6],
    [1 / 3, 1 / 2, 1 / 6],
    [1 / 6, 1 / 3, 1 / 2],
])


def sample_transitions() -> TransitionPair:
    return TransitionPair(SAMPLE_P_SELECTED.copy(), SAMPLE_P_UNSELECTED.copy())


DEFAULT_STATE_COEFFICIENTS = {
    ClientState.NORMAL: 1.0,
    ClientState.LIMITED: 2.0,
    ClientState.BUSY: 4.0,
}

DBM_23_WATTS = 10 ** (23 / 10) / 1000.0  # 0.19953 W
DEFAULT_NOISE_W = 1e-5
DEFAULT_BASE_SECONDS_PER_SAMPLE = 1e-3


@dataclass
class ClientClass:
    """Static parameters shared by every client of one capacity class.

    ``state_coefficients`` scale the mean of the exponential tail of the
    training time, so a busy client is slower on average than a normal one.
    """

    id: int
    population: int
    capacity_range: tuple[float, float]
    bandwidth: float
    transitions: TransitionPair
    state_coefficients: dict = field(default_factory=lambda: dict(DEFAULT_STATE_COEFFICIENTS))
    channel_gain_mean: float = 1.0

    def __post_init__(self):
        lo, hi = self.capacity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"class {self.id}: capacity_range must lie in (0, 1], got {self.capacity_range}")
        if self.bandwidth <= 0:
            raise ValueError(f"class {self.id}: bandwidth must be positive")
        if self.channel_gain_mean <= 0:
            raise ValueError(f"class {self.id}: channel_gain_mean must be positive")
        if self.population < 0:
            raise ValueError(f"class {self.id}: population must be non-negative")
        coeffs = {ClientState(k): float(v) for k, v in self.state_coefficients.items()}
        if set(coeffs) != set(ClientState):
            raise ValueError(f"class {self.id}: state_coefficients must cover all three states")
        seq = [coeffs[s] for s in ClientState]
        if not (0.0 < seq[0] < seq[1] < seq[2] < math.inf):
            raise ValueError(f"class {self.id}: state coefficients must satisfy 0 < normal < limited < busy")
        self.state_coefficients = coeffs

    def coefficient_vector(self) -> np.ndarray:
        return np.array([self.state_coefficients[s] for s in ClientState])


@dataclass
class Client:
    id: int
    class_id: int
    compute_coefficient: float  # seconds per sample
    dataset_size: int
    transmit_power: float  # watts
    true_state: ClientState
    model_size: float  # bits

    def __post_init__(self):
        if self.compute_coefficient <= 0:
            raise ValueError("compute_coefficient must be positive")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be at least 1")
        if self.transmit_power <= 0:
            raise ValueError("transmit_power must be positive")

    @property
    def shift(self) -> float:
        """Deterministic minimum training time."""
        return self.compute_coefficient * self.dataset_size


@dataclass(frozen=True)
class NoiseAndCap:
    noise_power: float
    latency_cap: float

    def __post_init__(self):
        if self.noise_power <= 0 or self.latency_cap <= 0:
            raise ValueError("noise_power and latency_cap must be positive")


def compute_coefficient_from_capacity(capacity: float, base_seconds_per_sample: float = DEFAULT_BASE_SECONDS_PER_SAMPLE) -> float:
    """Map normalized capacity in (0, 1] to seconds per sample (higher capacity is faster)."""
    if not 0.0 < capacity <= 1.0:
        raise ValueError(f"capacity must lie in (0, 1], got {capacity}")
    return base_seconds_per_sample / capacity


def training_time_mean_extra(client: Client, state: ClientState, cls: ClientClass) -> float:
    return cls.state_coefficients[ClientState(state)] * client.shift


def sample_training_time(client: Client, state: ClientState, cls: ClientClass, rng: np.random.Generator) -> float:
    """Shifted-exponential local training time in seconds."""
    return client.shift + rng.exponential(training_time_mean_extra(client, state, cls))


def training_time_cdf(t, shift: float, mean_extra: float):
    t = np.asarray(t, dtype=float)
    return np.where(t >= shift, 1.0 - np.exp(-(t - shift) / mean_extra), 0.0)


def sample_channel_gain_sq(cls: ClientClass, rng: np.random.Generator) -> float:
    return rng.exponential(cls.channel_gain_mean)


def communication_time(client: Client, cls: ClientClass, gain_sq: float, noise: NoiseAndCap) -> float:
    """Uplink time ``U / (B log2(1 + p g^2 / sigma))``; ``inf`` when the rate vanishes."""
    if gain_sq < 0:
        raise ValueError("gain_sq must be non-negative")
    rate = cls.bandwidth * math.log2(1.0 + client.transmit_power * gain_sq / noise.noise_power)
    if rate <= 0.0 or not math.isfinite(client.model_size / rate):
        return math.inf
    return client.model_size / rate


def step_state(state: ClientState, selected: bool, transitions: TransitionPair, rng: np.random.Generator) -> ClientState:
    row = transitions.for_action(int(bool(selected)))[int(state)]
    return ClientState(int(np.searchsorted(np.cumsum(row), rng.random(), side="right").clip(0, N_STATES - 1)))


def step_states(states: np.ndarray, selected: np.ndarray, p_sel: np.ndarray, p_unsel: np.ndarray,
                u: np.ndarray) -> np.ndarray:
    """Vectorized transition of many clients given pre-drawn uniforms ``u``.

    ``p_sel``/``p_unsel`` are per-client stacks of shape (n, 3, 3).
    """
    idx = np.arange(len(states))
    rows = np.where(selected[:, None], p_sel[idx, states], p_unsel[idx, states])
    nxt = (u[:, None] >= np.cumsum(rows, axis=1)).sum(axis=1)
    return np.minimum(nxt, N_STATES - 1)


def round_latency(selected_latencies, cap: float) -> float:
    """Round latency: the slowest selected client, truncated at ``cap``."""
    lat = list(selected_latencies)
    if not lat:
        raise ValueError("round_latency needs at least one selected client")
    if cap <= 0:
        raise ValueError("cap must be positive")
    return min(cap, max(lat))


def _is_irreducible(p: np.ndarray) -> bool:
    reach = (p > 0).astype(int) + np.eye(len(p), dtype=int)
    reach = np.linalg.matrix_power(reach, len(p) - 1)
    return bool(np.all(reach > 0))


def stationary_distribution(matrix, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Stationary vector of an irreducible row-stochastic matrix by power iteration.

    Iterates on the lazy chain (P + I)/2, which has the same fixed point but
    cannot oscillate on periodic chains.
    """
    p = _check_stochastic(matrix, "matrix")
    if not _is_irreducible(p):
        raise ValueError("chain is reducible; stationary distribution is not unique")
    lazy = 0.5 * (p + np.eye(len(p)))
    pi = np.full(len(p), 1.0 / len(p))
    for _ in range(max_iter):
        if np.max(np.abs(pi @ p - pi)) < tol:
            return pi / pi.sum()
        pi = pi @ lazy
    raise ValueError(f"power iteration did not converge within {max_iter} iterations")


def expected_capped_training_time(shift: float, mean_extra: float, cap: float = math.inf) -> float:
    """E[min(shift + X, cap)] with X exponential of the given mean."""
    if shift >= cap:
        return cap
    if math.isinf(cap):
        return shift + mean_extra
    return shift + mean_extra * (1.0 - math.exp(-(cap - shift) / mean_extra))


def nominal_comm_time(client: Client, cls: ClientClass, noise_power: float) -> float:
    """Uplink time at the mean channel gain.

    The exact expectation over an exponential gain diverges near zero gain,
    so the mean-gain value is the deterministic surrogate used for planning.
    """
    return communication_time(client, cls, cls.channel_gain_mean, NoiseAndCap(noise_power, 1.0))


def expected_latency(client: Client, cls: ClientClass, state: ClientState, noise_power: float,
                     cap: float = math.inf) -> float:
    mean_extra = training_time_mean_extra(client, state, cls)
    train = expected_capped_training_time(client.shift, mean_extra, cap)
    return min(cap, train + nominal_comm_time(client, cls, noise_power))


def default_latency_cap(clients, classes: dict, budget: int, noise_power: float, factor: float = 3.0) -> float:
    """``factor`` times the median round latency of a uniformly random
    ``budget``-sized selection with every client in the normal state.

    The round latency of a selection is the largest expected latency in it, so
    the distribution of that maximum follows from order statistics of the
    sorted per-client expectations.
    """
    lat = np.sort([expected_latency(c, classes[c.class_id], ClientState.NORMAL, noise_power) for c in clients])
    n = len(lat)
    if not 1 <= budget <= n:
        raise ValueError("budget must be between 1 and the number of clients")
    # P(max is the i-th smallest) = C(i-1, k-1) / C(n, k), i = k..n
    logp = np.full(n, -np.inf)
    denom = math.lgamma(n + 1) - math.lgamma(budget + 1) - math.lgamma(n - budget + 1)
    for i in range(budget, n + 1):
        logp[i - 1] = (math.lgamma(i) - math.lgamma(budget) - math.lgamma(i - budget + 1)) - denom
    cdf = np.cumsum(np.exp(logp))
    median = lat[int(np.searchsorted(cdf, 0.5))]
    return factor * float(median)
