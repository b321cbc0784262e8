"""Social-welfare measures over equilibria and simulation traces.

Efficiency is the expected average reward of the two agents in an
interaction; ex-post fairness measures are negated standard deviations of
realized per-agent access fractions and mean rewards; ex-ante fairness
compares the long-run access probability and mean reward across agent
types, computed analytically from an equilibrium.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats

from . import game_model as gm
from .game_model import AgentType, SocialState
from .simulation import SimTrace
from .solver import EquilibriumResult


@dataclass(frozen=True)
class WelfareReport:
    """Aggregated welfare measures of one allocation scheme.

    Fairness fields are negated standard deviations, hence non-positive.
    Confidence halfwidths are Student-t at 95% across repeats; absent with
    fewer than two repeats.  Ex-ante fields are filled when an equilibrium
    is available (karma runs only).
    """

    scheme: str
    n_repeats: int
    efficiency: float
    access_fairness: float
    reward_fairness: float
    efficiency_ci: float | None = None
    access_fairness_ci: float | None = None
    reward_fairness_ci: float | None = None
    per_type_access: tuple[float, ...] | None = None  # empirical, from traces
    ex_ante_access: tuple[float, ...] | None = None  # analytic, from equilibrium
    ex_ante_reward: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.access_fairness > 1e-12 or self.reward_fairness > 1e-12:
            raise ValueError("fairness measures are negated deviations and must be <= 0")

    def to_dict(self) -> dict:
        out = {
            "scheme": self.scheme,
            "n_repeats": self.n_repeats,
            "efficiency": self.efficiency,
            "access_fairness": self.access_fairness,
            "reward_fairness": self.reward_fairness,
        }
        for name in ("efficiency_ci", "access_fairness_ci", "reward_fairness_ci"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        for name in ("per_type_access", "ex_ante_access", "ex_ante_reward"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value)
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, sort_keys=True, indent=2)
            handle.write("\n")

    CSV_HEADER = (
        "scheme,n_repeats,efficiency,efficiency_ci,"
        "access_fairness,access_fairness_ci,reward_fairness,reward_fairness_ci"
    )

    def csv_row(self) -> str:
        def fmt(x):
            return "" if x is None else repr(x)

        return ",".join([
            self.scheme, str(self.n_repeats),
            repr(self.efficiency), fmt(self.efficiency_ci),
            repr(self.access_fairness), fmt(self.access_fairness_ci),
            repr(self.reward_fairness), fmt(self.reward_fairness_ci),
        ])


def _type_rewards(social_state: SocialState) -> list[np.ndarray]:
    gamma_sel = gm.selection_probabilities(gm.bid_distribution(social_state))
    out = []
    for typ, pi_tau in zip(social_state.types, social_state.pi):
        zeta = -typ.urgency.urgency_values[:, None] * (1.0 - gamma_sel)[None, :]
        out.append(np.einsum("ukb,ub->uk", pi_tau, zeta))
    return out


def efficiency_at_equilibrium(equilibrium: EquilibriumResult) -> float:
    """Expected per-interaction reward at a stationary social state."""
    state = equilibrium.social_state
    rewards = _type_rewards(state)
    return float(sum(np.sum(d_tau * r_tau) for d_tau, r_tau in zip(state.d, rewards)))


def stationary_urgency_values(types: Sequence[AgentType]) -> tuple[np.ndarray, np.ndarray]:
    """Population distribution over urgency values (not state indices).

    Aggregates each type's stationary chain distribution, weighted by the
    type shares, and merges duplicate values.
    """
    weights: dict[float, float] = {}
    for typ in types:
        stationary = typ.urgency.stationary()
        for value, prob in zip(typ.urgency.urgency_values, stationary):
            weights[float(value)] = weights.get(float(value), 0.0) + typ.share * float(prob)
    values = np.array(sorted(weights))
    probs = np.array([weights[v] for v in values])
    return values, probs / probs.sum()


def coin_efficiency(types: Sequence[AgentType]) -> float:
    """Efficiency of the fair-coin baseline: ``-E[u] / 2``."""
    values, probs = stationary_urgency_values(types)
    return -0.5 * float(values @ probs)


def dict_efficiency(types: Sequence[AgentType]) -> float:
    """Efficiency of the highest-urgency dictator: ``-E[min(u_i, u_j)] / 2``.

    The yielding agent is the lower-urgency one of two independent draws
    from the population's stationary urgency mixture.
    """
    values, probs = stationary_urgency_values(types)
    joint_min = np.minimum.outer(values, values)
    return -0.5 * float(probs @ joint_min @ probs)


def empirical_efficiency(trace: SimTrace) -> float:
    """Mean over interactions of the matched pair's average reward.

    Under synchronous matching this equals the mean per-agent-round reward.
    """
    if trace.n_rounds == 0:
        raise ValueError("empty trace")
    return float(trace.reward().mean())


def access_fairness(trace: SimTrace) -> float:
    """Negated standard deviation across agents of access fractions."""
    if trace.n_rounds == 0:
        raise ValueError("empty trace")
    return -float(np.std(trace.access_fractions()))


def reward_fairness(trace: SimTrace) -> float:
    """Negated standard deviation across agents of mean per-round rewards."""
    if trace.n_rounds == 0:
        raise ValueError("empty trace")
    return -float(np.std(trace.reward().mean(axis=0)))


def ex_ante_metrics(equilibrium) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-type long-run access probability and mean reward, analytically.

    Access of type ``tau`` is the probability a random interaction of one of
    its agents ends selected, under the stationary distribution conditioned
    on the type.  Share-weighted access probabilities average to one half.
    Accepts an equilibrium result or a bare social state.
    """
    state = equilibrium.social_state if hasattr(equilibrium, "social_state") else equilibrium
    gamma_sel = gm.selection_probabilities(gm.bid_distribution(state))
    rewards = _type_rewards(state)
    access = []
    mean_reward = []
    for typ, d_tau, pi_tau, r_tau in zip(state.types, state.d, state.pi, rewards):
        weight = d_tau / typ.share
        access.append(float(np.einsum("uk,ukb,b->", weight, pi_tau, gamma_sel)))
        mean_reward.append(float(np.sum(weight * r_tau)))
    return tuple(access), tuple(mean_reward)


def per_type_access(trace: SimTrace, n_types: int) -> tuple[float, ...]:
    """Empirical mean access fraction of each type's agents."""
    fractions = trace.access_fractions()
    return tuple(
        float(fractions[trace.type_index == tau].mean()) for tau in range(n_types)
    )


def _t_halfwidth(samples: np.ndarray) -> float:
    n = samples.size
    return float(stats.t.ppf(0.975, n - 1) * samples.std(ddof=1) / np.sqrt(n))


def aggregate_runs(
    traces: Sequence[SimTrace], equilibrium: EquilibriumResult | None = None
) -> WelfareReport:
    """Mean welfare measures with 95% Student-t intervals across repeats."""
    if not traces:
        raise ValueError("aggregate_runs needs at least one trace")
    schemes = {t.scheme for t in traces}
    if len(schemes) != 1:
        raise ValueError(f"traces mix schemes: {sorted(schemes)}")
    eff = np.array([empirical_efficiency(t) for t in traces])
    af = np.array([access_fairness(t) for t in traces])
    rf = np.array([reward_fairness(t) for t in traces])
    n_types = int(traces[0].type_index.max()) + 1
    per_type = np.array([per_type_access(t, n_types) for t in traces]).mean(axis=0)
    report = WelfareReport(
        scheme=traces[0].scheme,
        n_repeats=len(traces),
        efficiency=float(eff.mean()),
        access_fairness=float(af.mean()),
        reward_fairness=float(rf.mean()),
        efficiency_ci=_t_halfwidth(eff) if eff.size > 1 else None,
        access_fairness_ci=_t_halfwidth(af) if af.size > 1 else None,
        reward_fairness_ci=_t_halfwidth(rf) if rf.size > 1 else None,
        per_type_access=tuple(float(x) for x in per_type),
    )
    if equilibrium is not None:
        ex_access, ex_reward = ex_ante_metrics(equilibrium)
        report = replace(report, ex_ante_access=ex_access, ex_ante_reward=ex_reward)
    return report
