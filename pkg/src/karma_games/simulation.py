"""Finite-population agent-based simulator for karma mechanisms.

Executes the mechanism literally on integer karma counters: synchronous
rounds of uniform random perfect matching, sealed bids sampled from a fixed
policy, highest-bid allocation with fair coin ties, integer payments,
immediate surplus redistribution, and the optional karma tax.  Total karma
plus surplus is conserved exactly (as integers) across every event.

The benchmark allocation schemes COIN (fair coin), DICT (highest urgency
wins) and TURN (lowest past access fraction wins) run on the same matching
machinery with karma untouched.

Randomness comes from counter-based Philox streams: one independent
substream per repeat, so repeats are reproducible independently of each
other.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .game_model import (
    AgentType,
    MechanismConfig,
    PaymentRule,
    SocialState,
    validate_type_shares,
)

logger = logging.getLogger(__name__)

BENCHMARK_SCHEMES = ("COIN", "DICT", "TURN")
SCHEMES = ("KARMA",) + BENCHMARK_SCHEMES


@dataclass
class Population:
    """Mutable state of a finite agent population.

    ``karma.sum() + surplus`` is invariant under every mechanism event and
    is asserted after each round.  ``wins`` counts past selections (the
    TURN scheme's history).
    """

    types: tuple[AgentType, ...]
    type_index: np.ndarray
    urgency_state: np.ndarray
    karma: np.ndarray
    surplus: int
    rng: np.random.Generator
    wins: np.ndarray = field(default=None)
    rounds: int = 0

    def __post_init__(self):
        if self.wins is None:
            self.wins = np.zeros(self.n_agents, dtype=np.int64)

    @property
    def n_agents(self) -> int:
        return self.type_index.size

    @property
    def total_karma(self) -> int:
        return int(self.karma.sum()) + int(self.surplus)

    def urgency_values(self) -> np.ndarray:
        """Current urgency value of every agent."""
        out = np.empty(self.n_agents)
        for tau, typ in enumerate(self.types):
            mask = self.type_index == tau
            out[mask] = typ.urgency.urgency_values[self.urgency_state[mask]]
        return out


class AgentView(NamedTuple):
    """What a benchmark allocation rule may observe about one agent."""

    urgency_value: float
    access_fraction: float


def _rng_from_seed(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _largest_remainder_counts(shares: np.ndarray, n: int) -> np.ndarray:
    exact = shares * n
    counts = np.floor(exact).astype(int)
    remainder = n - counts.sum()
    if remainder:
        fractional = exact - counts
        # Deterministic: ties broken by lower type index.
        order = np.lexsort((np.arange(shares.size), -fractional))
        counts[order[:remainder]] += 1
    if np.any(np.abs(exact - counts) > 1e-9):
        logger.warning("type shares not exactly representable with %d agents; rounded", n)
    return counts


def _sample_rows(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a row-stochastic matrix."""
    cdf = np.cumsum(rows, axis=1)
    u = rng.random((rows.shape[0], 1))
    draw = (cdf < u).sum(axis=1)
    return np.minimum(draw, rows.shape[1] - 1)


def init_population(
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    n_agents: int,
    seed,
    init_karma: str = "point_mass_kbar",
    social_state: SocialState | None = None,
) -> Population:
    """Create a population with exact total karma ``n_agents * k_bar``.

    Type counts follow largest-remainder rounding of the shares; urgency
    states are drawn from each chain's stationary distribution.  Karma is
    either a point mass at ``k_bar`` or sampled from a social state's
    distribution (``init_karma="sample_from_d"``), with the sampled total
    corrected to the exact target by unit adjustments of uniformly random
    agents.
    """
    types = tuple(types)
    validate_type_shares(types)
    if n_agents % 2:
        raise ValueError("n_agents must be even for pairwise matching")
    if init_karma not in ("point_mass_kbar", "sample_from_d"):
        raise ValueError(f"unknown init_karma mode {init_karma!r}")
    if init_karma == "sample_from_d" and social_state is None:
        raise ValueError("sample_from_d requires a social_state")
    rng = seed if isinstance(seed, np.random.Generator) else _rng_from_seed(seed)

    counts = _largest_remainder_counts(np.array([t.share for t in types]), n_agents)
    type_index = np.repeat(np.arange(len(types)), counts)
    urgency_state = np.zeros(n_agents, dtype=np.int16)
    karma = np.full(n_agents, mechanism.k_bar, dtype=np.int64)

    for tau, typ in enumerate(types):
        mask = type_index == tau
        n_tau = int(mask.sum())
        stationary = typ.urgency.stationary()
        states = _sample_rows(np.tile(stationary, (n_tau, 1)), rng)
        urgency_state[mask] = states
        if init_karma == "sample_from_d":
            d_tau = social_state.d[tau]
            conditional = d_tau[states]
            conditional = conditional / conditional.sum(axis=1, keepdims=True)
            karma[mask] = _sample_rows(conditional, rng)

    target = n_agents * mechanism.k_bar
    diff = target - int(karma.sum())
    while diff != 0:
        step = 1 if diff > 0 else -1
        eligible = np.arange(n_agents) if step > 0 else np.flatnonzero(karma > 0)
        chosen = rng.choice(eligible, size=min(abs(diff), eligible.size), replace=False)
        karma[chosen] += step
        diff = target - int(karma.sum())

    return Population(
        types=types,
        type_index=type_index,
        urgency_state=urgency_state,
        karma=karma,
        surplus=0,
        rng=rng,
    )


def integer_redistribute(surplus: int, n_agents: int, rng: np.random.Generator) -> np.ndarray:
    """Split an integer surplus across agents, exactly.

    Everyone receives ``surplus // n_agents``; the remainder goes as one
    extra unit to uniformly random distinct agents.
    """
    if surplus < 0:
        raise ValueError("surplus must be non-negative")
    out = np.full(n_agents, surplus // n_agents, dtype=np.int64)
    remainder = surplus % n_agents
    if remainder:
        out[rng.choice(n_agents, size=remainder, replace=False)] += 1
    return out


def benchmark_allocate(
    scheme: str, agent_a: AgentView, agent_b: AgentView, rng: np.random.Generator
) -> int:
    """Winner (0 or 1) under a benchmark allocation scheme.

    COIN flips a fair coin; DICT selects the higher urgency value; TURN
    selects the lower past access fraction.  Exact ties fall back to the
    coin in every scheme.
    """
    if scheme == "COIN":
        a_stat = b_stat = 0.0
    elif scheme == "DICT":
        a_stat, b_stat = -agent_a.urgency_value, -agent_b.urgency_value
    elif scheme == "TURN":
        a_stat, b_stat = agent_a.access_fraction, agent_b.access_fraction
    else:
        raise ValueError(f"unknown benchmark scheme {scheme!r}")
    if a_stat < b_stat:
        return 0
    if b_stat < a_stat:
        return 1
    return 0 if rng.random() < 0.5 else 1


@dataclass(frozen=True)
class RoundEvents:
    """Everything that happened to each agent in one synchronous round."""

    first: np.ndarray  # agent ids of the first side of each match
    second: np.ndarray
    bids: np.ndarray  # per agent
    outcome: np.ndarray  # per agent: 0 selected, 1 yield
    reward: np.ndarray  # per agent: 0 or -urgency
    urgency_state: np.ndarray  # per agent, at bid time


def _winner_stat(scheme: str, population: Population, bids: np.ndarray) -> np.ndarray:
    """Per-agent statistic maximized by the winner of a match."""
    if scheme == "KARMA":
        return bids.astype(float)
    if scheme == "COIN":
        return np.zeros(population.n_agents)
    if scheme == "DICT":
        return population.urgency_values()
    if scheme == "TURN":
        if population.rounds == 0:
            return np.zeros(population.n_agents)
        return -population.wins / population.rounds
    raise ValueError(f"unknown scheme {scheme!r}")


def sim_step(
    population: Population,
    policy,
    mechanism: MechanismConfig,
    carry_remainder: bool = False,
) -> RoundEvents:
    """One synchronous round: match, bid, allocate, pay, redistribute, tax.

    ``policy`` is either a :class:`SocialState` (karma bidding) or one of
    the benchmark scheme names.  Mutates the population in place and
    returns the per-agent event batch.  Total karma plus surplus is
    asserted unchanged.
    """
    rng = population.rng
    n = population.n_agents
    scheme = policy if isinstance(policy, str) else "KARMA"
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    total_before = population.total_karma
    urgency_at_bid = population.urgency_state.copy()

    bids = np.zeros(n, dtype=np.int64)
    if scheme == "KARMA":
        state: SocialState = policy
        k_row = np.minimum(population.karma, mechanism.k_max).astype(int)
        for tau in range(len(population.types)):
            mask = population.type_index == tau
            rows = state.pi[tau][population.urgency_state[mask], k_row[mask]]
            bids[mask] = _sample_rows(rows, rng)
        assert np.all(bids <= population.karma), "sampled bid exceeds karma budget"

    perm = rng.permutation(n)
    first, second = perm[0::2], perm[1::2]
    stat = _winner_stat(scheme, population, bids)
    coin = rng.random(first.size) < 0.5
    first_wins = np.where(
        stat[first] == stat[second], coin, stat[first] > stat[second]
    )
    winners = np.where(first_wins, first, second)
    losers = np.where(first_wins, second, first)

    outcome = np.ones(n, dtype=np.uint8)
    outcome[winners] = 0
    reward = np.where(outcome == 1, -population.urgency_values(), 0.0)

    if scheme == "KARMA":
        if mechanism.payment_rule is PaymentRule.PBP:
            np.subtract.at(population.karma, winners, bids[winners])
            np.add.at(population.karma, losers, bids[winners])
        else:
            np.subtract.at(population.karma, winners, bids[winners])
            population.surplus += int(bids[winners].sum())
            population.karma += _redistribute_pool(population, carry_remainder)
        if mechanism.tax is not None:
            h = mechanism.tax.amount(population.karma)
            h_floor = np.floor(h).astype(np.int64)
            deduction = h_floor + (rng.random(n) < (h - h_floor))
            population.karma -= deduction
            population.surplus += int(deduction.sum())
            population.karma += _redistribute_pool(population, carry_remainder)
        assert np.all(population.karma >= 0), "negative karma after payments"

    for tau, typ in enumerate(population.types):
        mask = population.type_index == tau
        rows = typ.urgency.transition[population.urgency_state[mask]]
        population.urgency_state[mask] = _sample_rows(rows, rng)

    population.wins[winners] += 1
    population.rounds += 1
    assert population.total_karma == total_before, "karma conservation violated"

    return RoundEvents(
        first=first,
        second=second,
        bids=bids,
        outcome=outcome,
        reward=reward,
        urgency_state=urgency_at_bid,
    )


def _redistribute_pool(population: Population, carry_remainder: bool) -> np.ndarray:
    n = population.n_agents
    if carry_remainder:
        base = population.surplus // n
        population.surplus -= base * n
        return np.full(n, base, dtype=np.int64)
    out = integer_redistribute(population.surplus, n, population.rng)
    population.surplus = 0
    return out


@dataclass
class SimTrace:
    """Columnar log of one simulation repeat.

    Arrays are indexed ``[round, agent]``; ``urgency_state`` holds the state
    at bid time and ``karma_after`` the balance after all of the round's
    payments.  Rewards and urgency values are derived from the stored state
    indices, so they are exactly ``0`` or ``-u``.
    """

    scheme: str
    seed: int
    repeat_index: int
    config: dict
    type_index: np.ndarray
    karma_initial: np.ndarray
    urgency_state: np.ndarray
    bids: np.ndarray
    outcome: np.ndarray
    karma_after: np.ndarray
    urgency_values_by_type: tuple[np.ndarray, ...]

    @property
    def n_rounds(self) -> int:
        return self.urgency_state.shape[0]

    @property
    def n_agents(self) -> int:
        return self.urgency_state.shape[1]

    def urgency_value(self) -> np.ndarray:
        table = np.zeros((len(self.urgency_values_by_type),
                          max(v.size for v in self.urgency_values_by_type)))
        for tau, vals in enumerate(self.urgency_values_by_type):
            table[tau, : vals.size] = vals
        return table[self.type_index[None, :], self.urgency_state]

    def reward(self) -> np.ndarray:
        return np.where(self.outcome == 1, -self.urgency_value(), 0.0)

    def access_fractions(self) -> np.ndarray:
        """Fraction of rounds each agent was selected."""
        return (self.outcome == 0).sum(axis=0) / self.n_rounds

    def summary(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "repeat_index": self.repeat_index,
            "n_agents": int(self.n_agents),
            "n_rounds": int(self.n_rounds),
            "mean_reward": float(self.reward().mean()),
            "total_karma_initial": int(self.karma_initial.sum()),
            "total_karma_final": int(self.karma_after[-1].sum()),
            "config": self.config,
        }

    def write_csv(self, path) -> None:
        """One row per agent-interaction, columns per the documented contract."""
        urgency = self.urgency_value()
        reward = self.reward()
        with open(path, "w") as handle:
            handle.write("repeat,round,agent,type,urgency,bid,outcome,reward,karma\n")
            for t in range(self.n_rounds):
                for i in range(self.n_agents):
                    handle.write(
                        f"{self.repeat_index},{t},{i},{self.type_index[i]},"
                        f"{urgency[t, i]!r},{self.bids[t, i]},{self.outcome[t, i]},"
                        f"{reward[t, i]!r},{self.karma_after[t, i]}\n"
                    )

    def write_summary_json(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.summary(), handle, sort_keys=True, indent=2)
            handle.write("\n")


def run_simulation(
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    policy,
    n_agents: int,
    interactions_per_agent: int,
    n_repeats: int,
    seed: int,
    init_karma: str = "point_mass_kbar",
    init_social_state: SocialState | None = None,
    carry_remainder: bool = False,
) -> list[SimTrace]:
    """Run independent repeats of the synchronous-round simulation.

    Each repeat draws its own counter-based random substream from the root
    seed, so results are deterministic per seed and independent across
    repeats.  ``policy`` is a :class:`SocialState` for karma bidding or a
    benchmark scheme name.
    """
    types = tuple(types)
    scheme = policy if isinstance(policy, str) else "KARMA"
    if scheme == "KARMA" and not isinstance(policy, SocialState):
        raise ValueError("KARMA runs need a SocialState policy")
    if init_karma == "sample_from_d" and init_social_state is None and isinstance(policy, SocialState):
        init_social_state = policy
    config = {
        "payment_rule": mechanism.payment_rule.value,
        "k_bar": mechanism.k_bar,
        "k_max": mechanism.k_max,
        "tax": None if mechanism.tax is None else
            {"coefficient": mechanism.tax.coefficient, "exponent": mechanism.tax.exponent},
        "scheme": scheme,
        "n_agents": n_agents,
        "interactions_per_agent": interactions_per_agent,
        "init_karma": init_karma,
        "carry_remainder": carry_remainder,
    }
    traces = []
    children = np.random.SeedSequence(seed).spawn(n_repeats)
    for repeat, child in enumerate(children):
        rng = np.random.Generator(np.random.Philox(child))
        population = init_population(
            types, mechanism, n_agents, rng,
            init_karma=init_karma, social_state=init_social_state,
        )
        t_rounds = interactions_per_agent
        urgency_state = np.zeros((t_rounds, n_agents), dtype=np.int16)
        bids = np.zeros((t_rounds, n_agents), dtype=np.int32)
        outcome = np.zeros((t_rounds, n_agents), dtype=np.uint8)
        karma_after = np.zeros((t_rounds, n_agents), dtype=np.int64)
        karma_initial = population.karma.copy()
        for t in range(t_rounds):
            events = sim_step(population, policy, mechanism, carry_remainder)
            urgency_state[t] = events.urgency_state
            bids[t] = events.bids
            outcome[t] = events.outcome
            karma_after[t] = population.karma
        traces.append(SimTrace(
            scheme=scheme,
            seed=seed,
            repeat_index=repeat,
            config=config,
            type_index=population.type_index.copy(),
            karma_initial=karma_initial,
            urgency_state=urgency_state,
            bids=bids,
            outcome=outcome,
            karma_after=karma_after,
            urgency_values_by_type=tuple(t_.urgency.urgency_values for t_ in types),
        ))
    return traces


def state_histogram(
    trace: SimTrace,
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    burn_in: int,
) -> list[np.ndarray]:
    """Empirical type-state distribution over the post-burn-in rounds.

    Pairs each round's karma with the urgency of the following round (the
    state an agent carries into its next interaction) and clips karma onto
    the truncated grid, so the result is comparable to a solver ``d``.
    Normalized over everything, i.e. per-type blocks sum to the type shares.
    """
    if not 0 <= burn_in < trace.n_rounds - 1:
        raise ValueError("burn_in must leave at least one transition")
    n_k = mechanism.n_karma
    karma = np.minimum(trace.karma_after[burn_in:-1], mechanism.k_max)
    urgency = trace.urgency_state[burn_in + 1:]
    out = []
    samples = karma.shape[0] * trace.n_agents
    for tau, typ in enumerate(types):
        mask = trace.type_index == tau
        hist = np.zeros((typ.urgency.n_states, n_k))
        flat = urgency[:, mask].ravel() * n_k + karma[:, mask].ravel()
        counts = np.bincount(flat, minlength=typ.urgency.n_states * n_k)
        hist += counts.reshape(typ.urgency.n_states, n_k)
        out.append(hist / samples)
    return out
