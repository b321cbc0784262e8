"""Stationary-equilibrium computation for karma auction games.

The equilibrium seeker follows discretized evolutionary dynamics: the
type-state distribution flows toward stationarity under the policy-induced
transition kernel while the policy relaxes toward a perturbed (softmax) best
response to the current values.  A rest point of both flows is a stationary
Nash equilibrium up to the softmax smoothing.

Discounted values solve the usual Bellman recursion; the undiscounted case
is handled as an average-reward problem through relative value iteration
with an anchored relative-value vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import game_model as gm
from .game_model import (
    AgentType,
    InteractionKernels,
    MechanismConfig,
    SocialState,
    validate_type_shares,
)

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """An inner value computation exhausted its sweep budget."""


@dataclass(frozen=True)
class SolverParams:
    """Hyperparameters of the equilibrium-seeking dynamics.

    ``dt`` is the Euler step of the distribution flow, ``eta`` the policy
    update rate relative to it, and ``rationality`` the softmax sharpness of
    the perturbed best response (0 gives uniform bids, large values approach
    the exact best response).
    """

    dt: float = 0.2
    eta: float = 0.5
    rationality: float = 1000.0
    v_tol: float = 1e-10
    fp_tol: float = 1e-6
    max_iters: int = 100_000
    q_tie_tol: float = 1e-10
    value_max_sweeps: int = 500_000
    rvi_damping: float = 0.5
    # Stall-triggered annealing of the policy rate.  Sharp softmax responses
    # orbit mixed rest points at an amplitude proportional to the policy
    # step; shrinking the step once progress stalls turns the orbit into a
    # spiral.  The convergence metric stays scaled by the nominal ``eta``, so
    # annealing cannot manufacture convergence.
    anneal_factor: float = 0.5
    anneal_patience: int = 150
    eta_min: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.dt <= 1.0:
            raise ValueError("dt must lie in (0, 1]")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.dt * self.eta > 1.0 + 1e-12:
            raise ValueError("dt * eta must not exceed 1 (policy update is a convex combination)")
        if self.rationality < 0.0:
            raise ValueError("rationality must be non-negative")
        if self.v_tol <= 0.0 or self.fp_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.rvi_damping < 1.0:
            raise ValueError("rvi_damping must lie in (0, 1)")
        if not 0.0 < self.anneal_factor < 1.0:
            raise ValueError("anneal_factor must lie in (0, 1)")
        if self.anneal_patience < 1:
            raise ValueError("anneal_patience must be at least 1")


@dataclass(frozen=True)
class ValueTable:
    """Value data of one agent type at a fixed social state.

    Discounted mode fills ``values``; average-reward mode fills ``sigma``
    (the gain) and ``relative`` (anchored so the first urgency state at zero
    karma has relative value exactly 0).  ``residuals`` logs the fixed-point
    residual sequence when the table came from an iterative scheme.
    """

    values: np.ndarray | None = None
    sigma: float | None = None
    relative: np.ndarray | None = None
    residuals: np.ndarray | None = None

    def __post_init__(self):
        discounted = self.values is not None
        average = self.sigma is not None and self.relative is not None
        if discounted == average:
            raise ValueError("exactly one of values or (sigma, relative) must be set")
        if average and self.relative[0, 0] != 0.0:
            raise ValueError("relative values must be anchored at the (u_1, k=0) state")

    @property
    def mode(self) -> str:
        return "discounted" if self.values is not None else "average"

    def continuation(self) -> np.ndarray:
        """The table that enters single-stage deviation rewards."""
        return self.values if self.values is not None else self.relative


@dataclass(frozen=True)
class BestResponse:
    """Argmax bid set and a representative mixed strategy over it."""

    bids: tuple[int, ...]
    mixed: np.ndarray


@dataclass(frozen=True)
class IterationRecord:
    """One line of the solver's diagnostic stream."""

    iteration: int
    stationarity_residual: float
    br_gap: float
    kp_residual: float
    mean_karma: float


@dataclass(frozen=True)
class SolverDiagnostics:
    stationarity_residual: float
    br_gap: float
    kp_residual: float
    iterations: int
    converged: bool
    mean_karma: float
    truncation_mass: float
    truncation_warning: bool


@dataclass(frozen=True)
class EquilibriumResult:
    social_state: SocialState
    values: tuple[ValueTable, ...]
    diagnostics: SolverDiagnostics

    @property
    def converged(self) -> bool:
        return self.diagnostics.converged


# ---------------------------------------------------------------------------
# Core fixed-point schemes


def policy_evaluation(
    transition: np.ndarray,
    rewards: np.ndarray,
    discount: float,
    tol: float = 1e-10,
    v0: np.ndarray | None = None,
    max_sweeps: int = 500_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point iteration for the value of a Markov reward process.

    Iterates ``v <- r + discount * P v`` until the sweep-to-sweep change
    drops below ``tol``; the contraction guarantees the returned vector has
    Bellman residual at most ``discount * tol``.  Returns the value vector
    and the residual sequence.
    """
    if not 0.0 <= discount < 1.0:
        raise ValueError("policy_evaluation requires a discount factor in [0, 1)")
    v = np.zeros(rewards.size) if v0 is None else np.array(v0, dtype=float)
    residuals = []
    for _ in range(max_sweeps):
        v_next = rewards + discount * (transition @ v)
        res = float(np.abs(v_next - v).max())
        residuals.append(res)
        v = v_next
        if res <= tol:
            return v, np.array(residuals)
    raise ConvergenceError(f"policy evaluation did not reach {tol} in {max_sweeps} sweeps")


def relative_value_iteration(
    transition: np.ndarray,
    rewards: np.ndarray,
    anchor: int = 0,
    tol: float = 1e-10,
    damping: float = 0.5,
    y0: np.ndarray | None = None,
    max_sweeps: int = 500_000,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Relative value iteration for the average-reward problem.

    Runs the iteration on the damped chain ``(1 - w) I + w P`` (which removes
    periodicity without changing the gain) and rescales the relative values
    back, so the returned pair ``(sigma, y)`` satisfies
    ``sigma + y = r + P y`` within ``tol`` with ``y[anchor] = 0``.
    """
    n = rewards.size
    if y0 is None:
        z = np.zeros(n)
    else:
        z = np.asarray(y0, dtype=float) / damping
        z = z - z[anchor]
    residuals = []
    for _ in range(max_sweeps):
        pz = transition @ z
        # Candidate solution of the undamped equation implied by z.
        g = rewards + damping * pz - damping * z
        sigma = float(g[anchor])
        res = float(np.abs(g - sigma).max())
        residuals.append(res)
        if res <= tol:
            y = damping * z
            y[anchor] = 0.0
            return sigma, y, np.array(residuals)
        w = rewards + (1.0 - damping) * z + damping * pz
        z = w - w[anchor]
    raise ConvergenceError(f"relative value iteration did not reach {tol} in {max_sweeps} sweeps")


def _average_reward_direct(transition: np.ndarray, rewards: np.ndarray, anchor: int = 0):
    """Exact gain/bias solve used inside the equilibrium loop.

    Solves ``y + sigma 1 - P y = r`` with ``y[anchor] = 0`` as one linear
    system (the anchor column carries the gain variable).
    """
    n = rewards.size
    m = np.eye(n) - transition
    m[:, anchor] = 1.0
    w = np.linalg.solve(m, rewards)
    sigma = float(w[anchor])
    y = w.copy()
    y[anchor] = 0.0
    return sigma, y


# ---------------------------------------------------------------------------
# Per-state operations


def initial_social_state(types: Sequence[AgentType], mechanism: MechanismConfig) -> SocialState:
    """Default solver start: stationary urgency, all karma at ``k_bar``, uniform bids."""
    types = tuple(types)
    validate_type_shares(types)
    n_k = mechanism.n_karma
    d = []
    pi = []
    feasible = np.tril(np.ones((n_k, n_k)))
    uniform = feasible / feasible.sum(axis=1, keepdims=True)
    for typ in types:
        n_u = typ.urgency.n_states
        d_tau = np.zeros((n_u, n_k))
        d_tau[:, mechanism.k_bar] = typ.share * typ.urgency.stationary()
        d.append(d_tau)
        pi.append(np.broadcast_to(uniform, (n_u, n_k, n_k)).copy())
    return SocialState(types, mechanism, tuple(d), tuple(pi))


def _reward_matrix(typ: AgentType, pi_tau: np.ndarray, gamma_sel: np.ndarray) -> np.ndarray:
    zeta = -typ.urgency.urgency_values[:, None] * (1.0 - gamma_sel)[None, :]
    return np.einsum("ukb,ub->uk", pi_tau, zeta), zeta


def evaluate_value(
    type_index: int, social_state: SocialState, params: SolverParams | None = None
) -> ValueTable:
    """Policy value of one type by fixed-point iteration (discounted mode)."""
    params = params or SolverParams()
    typ = social_state.types[type_index]
    if typ.discount >= 1.0:
        raise ValueError(
            "discount factor is 1: the infinite-horizon value is undefined, "
            "use relative_value for the average-reward problem"
        )
    kernels = gm.interaction_kernels(social_state.mechanism, social_state)
    rewards, _ = _reward_matrix(typ, social_state.pi[type_index], kernels.gamma_selected)
    transition = gm.policy_transition(type_index, social_state)
    v, residuals = policy_evaluation(
        transition, rewards.ravel(), typ.discount,
        tol=params.v_tol, max_sweeps=params.value_max_sweeps,
    )
    return ValueTable(values=v.reshape(rewards.shape), residuals=residuals)


def relative_value(
    type_index: int, social_state: SocialState, params: SolverParams | None = None
) -> ValueTable:
    """Gain and anchored relative values of one type (average-reward mode)."""
    params = params or SolverParams()
    typ = social_state.types[type_index]
    if typ.discount != 1.0:
        raise ValueError("relative_value requires a discount factor of exactly 1")
    kernels = gm.interaction_kernels(social_state.mechanism, social_state)
    rewards, _ = _reward_matrix(typ, social_state.pi[type_index], kernels.gamma_selected)
    transition = gm.policy_transition(type_index, social_state)
    sigma, y, residuals = relative_value_iteration(
        transition, rewards.ravel(),
        tol=params.v_tol, damping=params.rvi_damping, max_sweeps=params.value_max_sweeps,
    )
    return ValueTable(sigma=sigma, relative=y.reshape(rewards.shape), residuals=residuals)


def q_values(
    type_index: int, u: int, k: int, social_state: SocialState, value: ValueTable
) -> np.ndarray:
    """Single-stage deviation rewards over the feasible bids ``{0..k}``."""
    typ = social_state.types[type_index]
    alpha = typ.discount if value.mode == "discounted" else 1.0
    cont = value.continuation()
    gamma_sel = gm.selection_probabilities(gm.bid_distribution(social_state))
    u_val = typ.urgency.urgency_values[u]
    q = np.empty(k + 1)
    for b in range(k + 1):
        rho = gm.state_transition(type_index, u, k, b, social_state)
        q[b] = -u_val * (1.0 - gamma_sel[b]) + alpha * float((rho * cont).sum())
    return q


def best_response(
    type_index: int,
    u: int,
    k: int,
    social_state: SocialState,
    value: ValueTable,
    q_tie_tol: float = 1e-10,
) -> BestResponse:
    """Maximizing bid set, with ties within ``q_tie_tol`` (relative) included."""
    q = q_values(type_index, u, k, social_state, value)
    q_max = q.max()
    threshold = q_tie_tol * max(1.0, abs(q_max))
    support = np.flatnonzero(q >= q_max - threshold)
    mixed = np.zeros(k + 1)
    mixed[support] = 1.0 / support.size
    return BestResponse(bids=tuple(int(b) for b in support), mixed=mixed)


def perturbed_best_response(q: np.ndarray, rationality: float) -> np.ndarray:
    """Softmax over single-stage deviation rewards, conditioned for large inputs.

    Subtracting the maximum before exponentiation keeps the computation
    stable at high rationality and makes the result invariant under adding a
    constant to ``q``.  Rationality 0 returns the uniform distribution.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("q must be a non-empty vector")
    if not np.all(np.isfinite(q)):
        raise ValueError("q must be finite")
    if rationality < 0.0:
        raise ValueError("rationality must be non-negative")
    z = rationality * q
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def q_tables(
    social_state: SocialState, values: Sequence[ValueTable]
) -> tuple[np.ndarray, ...]:
    """Vectorized single-stage deviation rewards for every type.

    Returns one ``(n_u, n_k, n_b)`` array per type with infeasible bids
    (``b > k``) set to ``-inf``.
    """
    mech = social_state.mechanism
    kernels = gm.interaction_kernels(mech, social_state)
    out = []
    n_k = mech.n_karma
    infeasible = np.arange(n_k)[None, :] > np.arange(n_k)[:, None]
    for typ, pi_tau, table in zip(social_state.types, social_state.pi, values):
        _, zeta = _reward_matrix(typ, pi_tau, kernels.gamma_selected)
        alpha = typ.discount if table.mode == "discounted" else 1.0
        ev = typ.urgency.transition @ table.continuation()
        look = gm.bid_lookahead(kernels, mech, ev)
        q = zeta[:, None, :] + alpha * look
        q[:, infeasible] = -np.inf
        out.append(q)
    return tuple(out)


# ---------------------------------------------------------------------------
# Evolutionary dynamics


@dataclass
class _StepQuantities:
    kernels: InteractionKernels
    values: list[ValueTable]
    pi_tilde: list[np.ndarray]
    d_propagated: list[np.ndarray]
    stationarity_residual: float
    br_gap: float
    kp_residual: float
    mean_karma: float


def _masked_softmax(q: np.ndarray, rationality: float, feasible: np.ndarray) -> np.ndarray:
    z = np.where(feasible[None, :, :], rationality * q, -np.inf)
    z_max = z.max(axis=2, keepdims=True)
    w = np.exp(z - z_max)
    return w / w.sum(axis=2, keepdims=True)


def _step_quantities(
    types: tuple[AgentType, ...],
    mechanism: MechanismConfig,
    state: SocialState,
    params: SolverParams,
    average_reward: bool,
) -> _StepQuantities:
    kernels = gm.interaction_kernels(mechanism, state)
    karr = np.arange(mechanism.n_karma)
    n_k = mechanism.n_karma
    feasible = np.arange(n_k)[None, :] <= np.arange(n_k)[:, None]

    values: list[ValueTable] = []
    pi_tilde: list[np.ndarray] = []
    d_propagated: list[np.ndarray] = []
    stationarity = 0.0
    br_gap = 0.0
    karma_before = 0.0
    karma_after = 0.0

    for typ, d_tau, pi_tau in zip(types, state.d, state.pi):
        n_u = typ.urgency.n_states
        phi = typ.urgency.transition
        km = gm.karma_marginals(kernels, mechanism, pi_tau)
        rewards, zeta = _reward_matrix(typ, pi_tau, kernels.gamma_selected)
        transition = np.einsum("uv,ukj->ukvj", phi, km).reshape(n_u * n_k, n_u * n_k)

        if average_reward:
            sigma, y = _average_reward_direct(transition, rewards.ravel())
            table = ValueTable(sigma=sigma, relative=y.reshape(n_u, n_k))
            alpha = 1.0
        else:
            v = np.linalg.solve(
                np.eye(n_u * n_k) - typ.discount * transition, rewards.ravel()
            )
            table = ValueTable(values=v.reshape(n_u, n_k))
            alpha = typ.discount
        values.append(table)

        ev = phi @ table.continuation()
        q = zeta[:, None, :] + alpha * gm.bid_lookahead(kernels, mechanism, ev)
        tilde = _masked_softmax(q, params.rationality, feasible)
        pi_tilde.append(tilde)

        propagated = (d_tau.ravel() @ transition).reshape(n_u, n_k)
        d_propagated.append(propagated)
        stationarity = max(stationarity, float(np.abs(propagated - d_tau).sum()))
        br_gap = max(br_gap, params.eta * float(np.abs(tilde - pi_tau).max()))
        karma_before += float(d_tau.sum(axis=0) @ karr)
        karma_after += float(np.einsum("uk,ukj,j->", d_tau, km, karr))

    return _StepQuantities(
        kernels=kernels,
        values=values,
        pi_tilde=pi_tilde,
        d_propagated=d_propagated,
        stationarity_residual=stationarity,
        br_gap=br_gap,
        kp_residual=abs(karma_after - karma_before),
        mean_karma=karma_before,
    )


def _euler_update(
    state: SocialState, quant: _StepQuantities, dt: float, eta: float
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    d_new = []
    pi_new = []
    for typ, d_tau, pi_tau, propagated, tilde in zip(
        state.types, state.d, state.pi, quant.d_propagated, quant.pi_tilde
    ):
        d_next = (1.0 - dt) * d_tau + dt * propagated
        # Rescale away accumulated float dust; the correction is O(eps).
        d_next *= typ.share / d_next.sum()
        pi_next = (1.0 - eta * dt) * pi_tau + eta * dt * tilde
        pi_next /= pi_next.sum(axis=2, keepdims=True)
        d_new.append(d_next)
        pi_new.append(pi_next)
    return d_new, pi_new


def evolution_step(social_state: SocialState, params: SolverParams | None = None) -> SocialState:
    """One Euler step of the coupled distribution/policy dynamics."""
    params = params or SolverParams()
    average = all(t.discount == 1.0 for t in social_state.types)
    quant = _step_quantities(
        social_state.types, social_state.mechanism, social_state, params, average
    )
    d_new, pi_new = _euler_update(social_state, quant, params.dt, params.eta)
    return social_state.replace_arrays(tuple(d_new), tuple(pi_new))


def _solve(
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    params: SolverParams,
    init: SocialState | None,
    average_reward: bool,
    on_iteration: Callable[[IterationRecord], None] | None,
) -> EquilibriumResult:
    types = tuple(types)
    validate_type_shares(types)
    state = init if init is not None else initial_social_state(types, mechanism)
    if init is not None and len(init.types) != len(types):
        raise ValueError("init social state does not match the requested types")

    quant = None
    converged = False
    iterations = 0
    eta_eff = params.eta
    best_residual = math.inf
    last_improvement = 0
    for it in range(params.max_iters):
        quant = _step_quantities(types, mechanism, state, params, average_reward)
        iterations = it + 1
        if on_iteration is not None:
            on_iteration(IterationRecord(
                iteration=it,
                stationarity_residual=quant.stationarity_residual,
                br_gap=quant.br_gap,
                kp_residual=quant.kp_residual,
                mean_karma=quant.mean_karma,
            ))
        if quant.stationarity_residual <= params.fp_tol and quant.br_gap <= params.fp_tol:
            converged = True
            break
        combined = max(quant.stationarity_residual, quant.br_gap)
        if combined < 0.9 * best_residual:
            best_residual = combined
            last_improvement = it
        elif it - last_improvement >= params.anneal_patience and eta_eff > params.eta_min:
            eta_eff = max(eta_eff * params.anneal_factor, params.eta_min)
            last_improvement = it
            logger.debug("iteration %d: policy rate annealed to %.3e", it, eta_eff)
        d_new, pi_new = _euler_update(state, quant, params.dt, eta_eff)
        state = SocialState(
            types, mechanism, tuple(d_new), tuple(pi_new),
            mean_karma_tol=math.inf, validate=False,
        )

    final = SocialState(
        types, mechanism, state.d, state.pi, mean_karma_tol=math.inf
    )
    top_decile = math.ceil(0.9 * mechanism.k_max)
    truncation_mass = float(sum(d_tau[:, top_decile:].sum() for d_tau in final.d))
    truncation_warning = truncation_mass > 1e-4
    if truncation_warning:
        logger.warning(
            "stationary mass %.3e in the top 10%% of karma states; "
            "k_max=%d is likely too small", truncation_mass, mechanism.k_max,
        )
    if not converged:
        logger.warning(
            "equilibrium seeker stopped after %d iterations "
            "(stationarity %.3e, br gap %.3e, target %.1e)",
            iterations, quant.stationarity_residual, quant.br_gap, params.fp_tol,
        )
    diagnostics = SolverDiagnostics(
        stationarity_residual=quant.stationarity_residual,
        br_gap=quant.br_gap,
        kp_residual=quant.kp_residual,
        iterations=iterations,
        converged=converged,
        mean_karma=quant.mean_karma,
        truncation_mass=truncation_mass,
        truncation_warning=truncation_warning,
    )
    return EquilibriumResult(final, tuple(quant.values), diagnostics)


def solve_equilibrium(
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    params: SolverParams | None = None,
    init: SocialState | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> EquilibriumResult:
    """Seek a stationary Nash equilibrium of the discounted game.

    Iterates the evolutionary dynamics until both the stationarity residual
    and the policy best-response gap fall below ``fp_tol``.  Non-convergence
    is reported through the diagnostics, not raised.
    """
    params = params or SolverParams()
    for typ in types:
        if typ.discount >= 1.0:
            raise ValueError(
                "all discount factors must be below 1; "
                "use solve_equilibrium_average_reward for the undiscounted game"
            )
    return _solve(types, mechanism, params, init, False, on_iteration)


def solve_equilibrium_average_reward(
    types: Sequence[AgentType],
    mechanism: MechanismConfig,
    params: SolverParams | None = None,
    init: SocialState | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> EquilibriumResult:
    """Seek a stationary Nash equilibrium of the undiscounted game.

    Identical dynamics to :func:`solve_equilibrium`, with single-stage
    deviation rewards built from the anchored relative values instead of the
    discounted ones.
    """
    params = params or SolverParams()
    for typ in types:
        if typ.discount != 1.0:
            raise ValueError("average-reward mode requires every discount factor to equal 1")
    return _solve(types, mechanism, params, init, True, on_iteration)
