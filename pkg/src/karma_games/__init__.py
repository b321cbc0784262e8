"""Karma resource-allocation games: equilibria, simulation, and welfare metrics."""

from .game_model import (
    AgentType,
    BidDistribution,
    MechanismConfig,
    Outcome,
    OutcomeKernel,
    PaymentRule,
    SocialState,
    TaxRule,
    UrgencyChain,
    bid_distribution,
    immediate_reward,
    karma_preservation_residual,
    karma_transition,
    mean_surplus_pbs,
    policy_reward,
    policy_transition,
    state_transition,
    win_probability,
)
from .solver import (
    BestResponse,
    ConvergenceError,
    EquilibriumResult,
    SolverParams,
    ValueTable,
    best_response,
    evaluate_value,
    evolution_step,
    initial_social_state,
    perturbed_best_response,
    q_values,
    relative_value,
    solve_equilibrium,
    solve_equilibrium_average_reward,
)

__version__ = "0.1.0"
