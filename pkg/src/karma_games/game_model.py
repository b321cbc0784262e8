"""Domain types and single-interaction mathematics of karma auction games.

A large population of agents repeatedly competes pairwise for an indivisible
resource by submitting sealed karma bids.  The highest bid wins (fair coin on
ties), the loser incurs a cost equal to its private urgency, and karma moves
according to a payment rule: pay-bid-to-peer (``PBP``, winner pays the loser)
or pay-bid-to-society (``PBS``, winner pays into a pool that is immediately
redistributed), optionally composed with a progressive karma tax.

This module holds the macroscopic state of the game (type-state distribution
``d`` plus bidding policy ``pi``) and the probabilistic building blocks of a
single interaction: the population bid distribution, allocation
probabilities, immediate rewards, karma transitions under each payment rule,
and the composite state transition kernel.

Everything here is a pure function of its inputs.  Arrays are validated and
frozen at construction, so values can be shared freely across threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import InitVar, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Tolerance hierarchy: construction invariants are exact to 1e-12, derived
# distributions to 1e-9.  Fixed-point tolerances live in solver params.
CONSTRUCTION_TOL = 1e-12
DISTRIBUTION_TOL = 1e-9


class PaymentRule(Enum):
    """How the winning bid is paid."""

    PBP = "PBP"  # winner pays its bid directly to the yielding agent
    PBS = "PBS"  # winner pays into a pool, redistributed uniformly


class Outcome(Enum):
    """Resource-competition outcome from the ego agent's perspective."""

    SELECTED = 0
    YIELD = 1


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class UrgencyChain:
    """Exogenous irreducible Markov chain over urgency states.

    ``urgency_values[i]`` is the cost incurred when yielding while in state
    ``i``.  Duplicate values are allowed; states are identified by index,
    never by value.
    """

    urgency_values: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.urgency_values, dtype=float)
        trans = np.asarray(self.transition, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("urgency_values must be a non-empty vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("urgency_values must be finite and non-negative")
        n = values.size
        if trans.shape != (n, n):
            raise ValueError(f"transition must be {n}x{n}, got {trans.shape}")
        if np.any(trans < -CONSTRUCTION_TOL) or np.any(trans > 1 + CONSTRUCTION_TOL):
            raise ValueError("transition entries must lie in [0, 1]")
        row_err = np.abs(trans.sum(axis=1) - 1.0).max()
        if row_err > CONSTRUCTION_TOL:
            raise ValueError(f"transition rows must sum to 1 (error {row_err:.3e})")
        if not _strongly_connected(trans > 0):
            raise ValueError("urgency chain must be irreducible")
        object.__setattr__(self, "urgency_values", _frozen_array(values))
        object.__setattr__(self, "transition", _frozen_array(trans))

    @property
    def n_states(self) -> int:
        return self.urgency_values.size

    def stationary(self) -> np.ndarray:
        """Unique stationary distribution of the chain."""
        n = self.n_states
        a = self.transition.T - np.eye(n)
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        pi = np.linalg.solve(a, b)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def _strongly_connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    reach = adjacency.copy()
    for _ in range(n):
        reach = reach | (reach.astype(int) @ adjacency.astype(int) > 0)
    return bool(reach.all())


@dataclass(frozen=True)
class AgentType:
    """A private static agent type: urgency process, patience, and share."""

    urgency: UrgencyChain
    discount: float  # in [0, 1]; exactly 1 selects average-reward mode
    share: float  # population fraction, in (0, 1]

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must be in [0, 1], got {self.discount}")
        if not 0.0 < self.share <= 1.0:
            raise ValueError(f"share must be in (0, 1], got {self.share}")


def validate_type_shares(types: Sequence[AgentType]) -> None:
    """Reject type collections whose shares do not sum to one."""
    total = math.fsum(t.share for t in types)
    if abs(total - 1.0) > CONSTRUCTION_TOL:
        raise ValueError(f"type shares must sum to 1, got {total!r}")


@dataclass(frozen=True)
class TaxRule:
    """Progressive karma tax ``h[k] = coefficient * k**exponent``."""

    coefficient: float
    exponent: float

    def __post_init__(self):
        if self.coefficient < 0:
            raise ValueError("tax coefficient must be >= 0")
        if self.exponent < 1:
            raise ValueError("tax exponent must be >= 1")

    def amount(self, karma) -> np.ndarray:
        return self.coefficient * np.asarray(karma, dtype=float) ** self.exponent


@dataclass(frozen=True)
class MechanismConfig:
    """Mechanism parameters: payment rule, tax, truncation, average karma.

    ``k_max`` truncates the countable karma space for computation; overflow
    probability mass is clamped onto ``k_max`` and surfaces through
    :func:`karma_preservation_residual`.  Defaults to ``15 * k_bar``, which
    keeps the clamped mass negligible for stationary states.
    """

    payment_rule: PaymentRule
    k_bar: int
    k_max: int | None = None
    tax: TaxRule | None = None

    def __post_init__(self):
        if not isinstance(self.payment_rule, PaymentRule):
            object.__setattr__(self, "payment_rule", PaymentRule(self.payment_rule))
        if self.k_bar < 1:
            raise ValueError("k_bar must be a positive integer")
        if self.k_max is None:
            object.__setattr__(self, "k_max", 15 * self.k_bar)
        if self.k_max < self.k_bar:
            raise ValueError("k_bar must not exceed k_max")
        if self.tax is not None:
            karr = np.arange(self.k_max + 1)
            h = self.tax.amount(karr)
            if np.any(h > karr + CONSTRUCTION_TOL):
                raise ValueError("tax must satisfy h[k] <= k for all k <= k_max")

    @property
    def n_karma(self) -> int:
        return self.k_max + 1

    @property
    def num_bids(self) -> int:
        # Bids live in {0, ..., k}; the global bid grid has k_max + 1 slots.
        return self.k_max + 1


@dataclass(frozen=True)
class SocialState:
    """Macroscopic game state: type-state distribution and bidding policy.

    ``d[tau]`` has shape ``(n_u, k_max + 1)`` and sums to the type share.
    ``pi[tau]`` has shape ``(n_u, k_max + 1, k_max + 1)`` where
    ``pi[tau][u, k, b]`` is the probability of bidding ``b`` in state
    ``(u, k)``; rows are simplex vectors with no mass on bids above ``k``.

    ``mean_karma_tol`` bounds the allowed drift of the population mean karma
    away from ``k_bar`` (truncation slowly leaks mean karma, so the check is
    a tolerance rather than an equality).  ``validate=False`` skips all
    checks; it exists for the solver's hot loop only.
    """

    types: tuple[AgentType, ...]
    mechanism: MechanismConfig
    d: tuple[np.ndarray, ...]
    pi: tuple[np.ndarray, ...]
    mean_karma_tol: float | None = None
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "d", tuple(np.asarray(a, dtype=float) for a in self.d))
        object.__setattr__(self, "pi", tuple(np.asarray(a, dtype=float) for a in self.pi))
        if self.mean_karma_tol is None:
            object.__setattr__(self, "mean_karma_tol", 0.05 * self.mechanism.k_bar)
        if validate:
            self._check()
        for arr in (*self.d, *self.pi):
            arr.setflags(write=False)

    def _check(self):
        validate_type_shares(self.types)
        n_k = self.mechanism.n_karma
        if len(self.d) != len(self.types) or len(self.pi) != len(self.types):
            raise ValueError("d and pi must have one entry per type")
        for tau, (typ, d_tau, pi_tau) in enumerate(zip(self.types, self.d, self.pi)):
            n_u = typ.urgency.n_states
            if d_tau.shape != (n_u, n_k):
                raise ValueError(f"d[{tau}] must have shape {(n_u, n_k)}")
            if pi_tau.shape != (n_u, n_k, n_k):
                raise ValueError(f"pi[{tau}] must have shape {(n_u, n_k, n_k)}")
            if np.any(d_tau < -CONSTRUCTION_TOL) or np.any(pi_tau < -CONSTRUCTION_TOL):
                raise ValueError(f"type {tau}: distributions must be non-negative")
            mass_err = abs(d_tau.sum() - typ.share)
            if mass_err > DISTRIBUTION_TOL:
                raise ValueError(
                    f"d[{tau}] must sum to the type share {typ.share} "
                    f"(error {mass_err:.3e})"
                )
            row_err = np.abs(pi_tau.sum(axis=2) - 1.0).max()
            if row_err > DISTRIBUTION_TOL:
                raise ValueError(f"pi[{tau}] rows must sum to 1 (error {row_err:.3e})")
            infeasible = np.triu(np.ones((n_k, n_k), dtype=bool), k=1)
            if np.any(pi_tau[:, infeasible] != 0.0):
                raise ValueError(f"pi[{tau}] places mass on bids above the karma budget")
        drift = abs(self.mean_karma() - self.mechanism.k_bar)
        if drift > self.mean_karma_tol:
            raise ValueError(
                f"mean karma drifted {drift:.3e} from k_bar={self.mechanism.k_bar} "
                f"(tolerance {self.mean_karma_tol:.3e})"
            )

    @property
    def n_types(self) -> int:
        return len(self.types)

    def mean_karma(self) -> float:
        karr = np.arange(self.mechanism.n_karma)
        return float(sum(d_tau.sum(axis=0) @ karr for d_tau in self.d))

    def type_mean_karma(self, tau: int) -> float:
        """Mean karma of agents of one type, conditioned on the type."""
        karr = np.arange(self.mechanism.n_karma)
        return float(self.d[tau].sum(axis=0) @ karr) / self.types[tau].share

    def replace_arrays(self, d, pi, validate: bool = True) -> "SocialState":
        return SocialState(
            self.types, self.mechanism, d, pi,
            mean_karma_tol=self.mean_karma_tol, validate=validate,
        )


@dataclass(frozen=True)
class BidDistribution:
    """Distribution of a random opponent's bid on the global bid grid."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(p < -CONSTRUCTION_TOL):
            raise ValueError("bid probabilities must be non-negative")
        if abs(p.sum() - 1.0) > DISTRIBUTION_TOL:
            raise ValueError(f"bid probabilities must sum to 1, got {p.sum()!r}")
        object.__setattr__(self, "probabilities", _frozen_array(np.clip(p, 0.0, None)))

    @property
    def n_bids(self) -> int:
        return self.probabilities.size


@dataclass(frozen=True)
class OutcomeKernel:
    """Probabilities of the two competition outcomes for a fixed own bid."""

    p_selected: float
    p_yield: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.p_selected <= 1.0:
            raise ValueError("p_selected must lie in [0, 1]")
        object.__setattr__(self, "p_yield", 1.0 - self.p_selected)


# ---------------------------------------------------------------------------
# Single-interaction operations


def bid_distribution(social_state: SocialState) -> BidDistribution:
    """Population bid distribution seen by a random ego agent.

    Aggregates ``d * pi`` over all types and states and renormalizes the
    accumulated float error away.
    """
    nu = np.zeros(social_state.mechanism.n_karma)
    for d_tau, pi_tau in zip(social_state.d, social_state.pi):
        nu += np.einsum("uk,ukb->b", d_tau, pi_tau)
    nu = np.clip(nu, 0.0, None)
    return BidDistribution(nu / nu.sum())


def selection_probabilities(opponents: BidDistribution) -> np.ndarray:
    """Probability of being selected for every own bid, as a vector.

    Strictly higher bids win; equal bids win a fair coin toss.
    """
    p = opponents.probabilities
    csum = np.cumsum(p)
    return csum - 0.5 * p


def win_probability(bid: int, opponents: BidDistribution) -> OutcomeKernel:
    """Outcome probabilities of bidding ``bid`` against ``opponents``."""
    if not 0 <= bid < opponents.n_bids:
        raise ValueError(f"bid {bid} outside the bid grid [0, {opponents.n_bids - 1}]")
    return OutcomeKernel(p_selected=float(selection_probabilities(opponents)[bid]))


def immediate_reward(urgency_value: float, bid: int, opponents: BidDistribution) -> float:
    """Expected immediate reward of one interaction: ``-u * P[yield]``.

    Independent of the agent's type and karma.
    """
    return -float(urgency_value) * win_probability(bid, opponents).p_yield


def mean_surplus_pbs(social_state: SocialState) -> float:
    """Mean per-agent surplus generated by pay-bid-to-society payments."""
    if social_state.mechanism.payment_rule is not PaymentRule.PBS:
        raise ValueError("mean surplus is defined for the PBS payment rule")
    gamma_sel = selection_probabilities(bid_distribution(social_state))
    bids = np.arange(social_state.mechanism.n_karma)
    total = 0.0
    for d_tau, pi_tau in zip(social_state.d, social_state.pi):
        total += float(np.einsum("uk,ukb,b->", d_tau, pi_tau, gamma_sel * bids))
    return total


def fractional_split(value: float) -> tuple[int, int, float, float]:
    """Two-point integer distribution with mean exactly ``value``.

    Returns ``(lo, hi, f_lo, f_hi)`` with ``f_lo * lo + f_hi * hi == value``;
    for integral ``value`` all mass sits on ``hi``.
    """
    if value < 0:
        raise ValueError("fractional_split expects a non-negative value")
    lo = math.floor(value)
    hi = math.ceil(value)
    f_lo = hi - value
    return lo, hi, f_lo, 1.0 - f_lo


def mean_tax_revenue(config: MechanismConfig, social_state: SocialState) -> float:
    """Mean per-agent tax collected on post-payment karma (0 without tax)."""
    if config.tax is None:
        return 0.0
    kernels = interaction_kernels(config, social_state)
    return kernels.tax_revenue_mean


def tax_kernel(config: MechanismConfig, rebate_mean: float) -> np.ndarray:
    """Karma transition of the tax step, applied after payments.

    Each agent loses ``h[k]`` rounded stochastically (preserving its
    expectation) and receives the population-mean revenue back through the
    same floor/ceil fractional split used for surplus redistribution.
    """
    n_k = config.n_karma
    karr = np.arange(n_k)
    h = config.tax.amount(karr)
    d_lo = np.floor(h).astype(int)
    frac = h - d_lo
    r_lo, r_hi, fr_lo, fr_hi = fractional_split(rebate_mean)
    kernel = np.zeros((n_k, n_k))
    rows = karr
    for deduct, w_d in ((d_lo, 1.0 - frac), (d_lo + 1, frac)):
        for rebate, w_r in ((r_lo, fr_lo), (r_hi, fr_hi)):
            target = np.clip(karr - deduct + rebate, 0, config.k_max)
            np.add.at(kernel, (rows, target), w_d * w_r)
    return kernel


@dataclass(frozen=True)
class InteractionKernels:
    """Population-level quantities of one interaction, fixed by the state.

    Shared by every per-(type, state, bid) computation: the opponents' bid
    distribution, selection probabilities per bid, the PBS mean surplus, and
    the tax step (mean revenue and its karma kernel).
    """

    nu: np.ndarray
    gamma_selected: np.ndarray
    surplus_mean: float
    tax_revenue_mean: float
    tax_transition: np.ndarray | None


def interaction_kernels(config: MechanismConfig, social_state: SocialState) -> InteractionKernels:
    """Precompute the shared pieces of the interaction kernel."""
    nu = bid_distribution(social_state).probabilities
    gamma_sel = selection_probabilities(BidDistribution(nu))
    pbar = mean_surplus_pbs(social_state) if config.payment_rule is PaymentRule.PBS else 0.0
    tbar = 0.0
    tax_trans = None
    if config.tax is not None:
        pre = InteractionKernels(nu, gamma_sel, pbar, 0.0, None)
        post_payment = np.zeros(config.n_karma)
        for typ, d_tau, pi_tau in zip(social_state.types, social_state.d, social_state.pi):
            km = _pretax_karma_marginals(pre, config, pi_tau)
            post_payment += np.einsum("uk,ukj->j", d_tau, km)
        tbar = float(post_payment @ config.tax.amount(np.arange(config.n_karma)))
        tax_trans = tax_kernel(config, tbar)
    return InteractionKernels(nu, gamma_sel, pbar, tbar, tax_trans)


def _yield_weights(nu: np.ndarray) -> np.ndarray:
    """``w[b, b'] = nu[b'] * P[yield | b, b']`` for PBP receipts."""
    n = nu.size
    w = np.where(
        np.arange(n)[None, :] > np.arange(n)[:, None],
        nu[None, :],
        0.0,
    )
    w[np.arange(n), np.arange(n)] = 0.5 * nu
    return w


def _pretax_karma_marginals(
    kernels: InteractionKernels, config: MechanismConfig, type_policy: np.ndarray
) -> np.ndarray:
    """Policy-mixed karma kernel before the tax step.

    Returns ``km[u, k, k+] = sum_b pi[u,k,b] sum_o gamma[o|b] kappa[k+|k,b,o]``
    with overflow clamped onto ``k_max``.
    """
    n_u, n_k, n_b = type_policy.shape
    k_max = config.k_max
    karr = np.arange(n_k)
    barr = np.arange(n_b)
    km = np.zeros((n_u, n_k, n_k))
    uu = np.arange(n_u)[:, None, None]
    kk = karr[None, :, None]
    bb = barr[None, None, :]
    gamma_sel = kernels.gamma_selected

    if config.payment_rule is PaymentRule.PBP:
        win_weight = type_policy * gamma_sel[None, None, :]
        win_target = np.clip(kk - bb, 0, k_max)  # only b <= k carries weight
        np.add.at(km, (np.broadcast_to(uu, win_weight.shape),
                       np.broadcast_to(kk, win_weight.shape),
                       np.broadcast_to(win_target, win_weight.shape)), win_weight)
        receive = type_policy.reshape(-1, n_b) @ _yield_weights(kernels.nu)
        receive_weight = receive.reshape(n_u, n_k, n_b)  # weight on receiving b'
        receive_target = np.clip(kk + bb, 0, k_max)
        np.add.at(km, (np.broadcast_to(uu, receive_weight.shape),
                       np.broadcast_to(kk, receive_weight.shape),
                       np.broadcast_to(receive_target, receive_weight.shape)),
                  receive_weight)
    else:
        p_lo, p_hi, f_lo, f_hi = fractional_split(kernels.surplus_mean)
        win_weight = type_policy * gamma_sel[None, None, :]
        yield_weight = (type_policy * (1.0 - gamma_sel)[None, None, :]).sum(axis=2)
        for shift, f in ((p_lo, f_lo), (p_hi, f_hi)):
            win_target = np.clip(kk - bb + shift, 0, k_max)
            np.add.at(km, (np.broadcast_to(uu, win_weight.shape),
                           np.broadcast_to(kk, win_weight.shape),
                           np.broadcast_to(win_target, win_weight.shape)),
                      f * win_weight)
            yield_target = np.clip(karr + shift, 0, k_max)
            np.add.at(km, (np.broadcast_to(np.arange(n_u)[:, None], yield_weight.shape),
                           np.broadcast_to(karr[None, :], yield_weight.shape),
                           np.broadcast_to(yield_target[None, :], yield_weight.shape)),
                      f * yield_weight)
    return km


def karma_marginals(
    kernels: InteractionKernels, config: MechanismConfig, type_policy: np.ndarray
) -> np.ndarray:
    """Policy-mixed karma kernel of one type, tax step included."""
    km = _pretax_karma_marginals(kernels, config, type_policy)
    if kernels.tax_transition is not None:
        n_u, n_k, _ = km.shape
        km = (km.reshape(-1, n_k) @ kernels.tax_transition).reshape(n_u, n_k, n_k)
    return km


def bid_lookahead(
    kernels: InteractionKernels, config: MechanismConfig, ev: np.ndarray
) -> np.ndarray:
    """Expected continuation value per (urgency, karma, bid) triple.

    ``ev[u, k+]`` must already average the continuation value over the next
    urgency (``ev = phi @ V``); the return adds the karma transition,
    ``look[u, k, b] = sum_{k+} (sum_o gamma[o|b] kappa[k+|k,b,o]) ev[u, k+]``.
    Entries with ``b > k`` are filled but meaningless; callers mask them.
    """
    n_u, n_k = ev.shape
    k_max = config.k_max
    karr = np.arange(n_k)
    if kernels.tax_transition is not None:
        ev = ev @ kernels.tax_transition.T
    kk = karr[:, None]
    bb = karr[None, :]
    gamma_sel = kernels.gamma_selected
    if config.payment_rule is PaymentRule.PBP:
        win_idx = np.clip(kk - bb, 0, k_max)
        look = gamma_sel[None, None, :] * ev[:, win_idx]
        receive_idx = np.clip(kk + bb, 0, k_max)  # second axis indexes b'
        gathered = ev[:, receive_idx].reshape(n_u * n_k, n_k)
        look += (gathered @ _yield_weights(kernels.nu).T).reshape(n_u, n_k, n_k)
    else:
        p_lo, p_hi, f_lo, f_hi = fractional_split(kernels.surplus_mean)
        look = np.zeros((n_u, n_k, n_k))
        for shift, f in ((p_lo, f_lo), (p_hi, f_hi)):
            win_idx = np.clip(kk - bb + shift, 0, k_max)
            look += f * gamma_sel[None, None, :] * ev[:, win_idx]
            yield_idx = np.clip(karr + shift, 0, k_max)
            look += f * ((1.0 - gamma_sel)[None, None, :] * ev[:, yield_idx][:, :, None])
    return look


def karma_transition(
    config: MechanismConfig,
    k: int,
    bid: int,
    outcome: Outcome,
    social_state: SocialState,
) -> np.ndarray:
    """Distribution of the next karma given bid and outcome.

    Under PBP a selected agent pays its bid; a yielding agent receives the
    opposing bid, whose distribution is the population bid distribution
    conditioned on the ego yielding (Bayes weights).  Under PBS a selected
    agent pays its bid and everyone receives the redistributed mean surplus
    through a floor/ceil split.  A configured tax composes on top.  Overflow
    above ``k_max`` is clamped.

    When the conditioning outcome has probability zero (e.g. yielding is
    impossible against the current bid distribution) the conditional is
    defined as a point mass at ``k``; every use multiplies it by the zero
    outcome probability, so the convention never affects composite kernels.
    """
    outcome = Outcome(outcome)
    if not 0 <= k <= config.k_max:
        raise ValueError(f"karma {k} outside [0, {config.k_max}]")
    if not 0 <= bid <= k:
        raise ValueError(f"bid {bid} exceeds karma budget {k}")
    n_k = config.n_karma
    dist = np.zeros(n_k)
    if config.payment_rule is PaymentRule.PBP:
        if outcome is Outcome.SELECTED:
            dist[k - bid] = 1.0
        else:
            nu = bid_distribution(social_state).probabilities
            weights = _yield_weights(nu)[bid]
            total = weights.sum()
            if total <= 0.0:
                logger.debug(
                    "degenerate conditioning: P[yield | bid=%d] = 0; returning identity", bid
                )
                dist[k] = 1.0
            else:
                targets = np.clip(k + np.arange(n_k), 0, config.k_max)
                np.add.at(dist, targets, weights / total)
    else:
        pbar = mean_surplus_pbs(social_state)
        p_lo, p_hi, f_lo, f_hi = fractional_split(pbar)
        base = k - bid if outcome is Outcome.SELECTED else k
        dist[min(base + p_lo, config.k_max)] += f_lo
        dist[min(base + p_hi, config.k_max)] += f_hi
    if config.tax is not None:
        dist = dist @ tax_kernel(config, mean_tax_revenue(config, social_state))
    return dist


def state_transition(
    type_index: int, u: int, k: int, bid: int, social_state: SocialState
) -> np.ndarray:
    """One-step distribution over next (urgency, karma) for a fixed bid.

    The urgency advances by the type's exogenous chain, independently of the
    interaction; the karma advances by the outcome-mixed karma transition.
    """
    config = social_state.mechanism
    typ = social_state.types[type_index]
    kernel = win_probability(bid, bid_distribution(social_state))
    karma_mix = kernel.p_selected * karma_transition(
        config, k, bid, Outcome.SELECTED, social_state
    )
    if kernel.p_yield > 0.0:
        karma_mix = karma_mix + kernel.p_yield * karma_transition(
            config, k, bid, Outcome.YIELD, social_state
        )
    return np.outer(typ.urgency.transition[u], karma_mix)


def policy_reward(type_index: int, u: int, k: int, social_state: SocialState) -> float:
    """Expected immediate reward in state (u, k) under the type's policy."""
    typ = social_state.types[type_index]
    opponents = bid_distribution(social_state)
    gamma_sel = selection_probabilities(opponents)
    pi_row = social_state.pi[type_index][u, k]
    u_val = typ.urgency.urgency_values[u]
    return float(-u_val * (pi_row @ (1.0 - gamma_sel)))


def policy_transition(type_index: int, social_state: SocialState) -> np.ndarray:
    """Row-stochastic transition matrix over (urgency, karma) for one type.

    States are flattened in C order (urgency-major): index ``u * n_karma + k``.
    """
    config = social_state.mechanism
    typ = social_state.types[type_index]
    kernels = interaction_kernels(config, social_state)
    km = karma_marginals(kernels, config, social_state.pi[type_index])
    phi = typ.urgency.transition
    n_u, n_k, _ = km.shape
    full = np.einsum("uv,ukj->ukvj", phi, km)
    return full.reshape(n_u * n_k, n_u * n_k)


def karma_preservation_residual(config: MechanismConfig, social_state: SocialState) -> float:
    """Drift of the expected population karma over one interaction.

    Analytically zero for untruncated PBP/PBS (and for the tax step), so the
    residual isolates the probability mass clamped at ``k_max``.
    """
    kernels = interaction_kernels(config, social_state)
    karr = np.arange(config.n_karma)
    before = 0.0
    after = 0.0
    for d_tau, pi_tau in zip(social_state.d, social_state.pi):
        km = karma_marginals(kernels, config, pi_tau)
        before += float(d_tau.sum(axis=0) @ karr)
        after += float(np.einsum("uk,ukj,j->", d_tau, km, karr))
    return abs(after - before)
