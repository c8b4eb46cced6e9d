"""p-Laplacian mean value operator laboratory.

Averaging operator ``A_eps`` for ``(d_t u)^(p-1) = Delta_p u``, its explicit
Euler iteration (the DPP), and the tug-of-war game whose value the DPP
computes.
"""

__version__ = "0.1.0"

from .amvf import CGrid, LatticeOperator, a_eps, expansion_error, expansion_report, m_rho, order_fit
from .core import CriticalPointError, Params, analytic_p_laplacian, geometric_mean_inf, p_laplacian_radial, signed_pow
from .dpp import (
    DirichletProblem,
    NumericalAbort,
    SpaceTimeSolution,
    build_barrier,
    check_barrier_ordering,
    comparison_report,
    dpp_step,
    regularity_report,
    solve_bounded,
    solve_whole_space,
)
from .field import (
    AnalyticField,
    Ball,
    BallStats,
    Box,
    LatticeField,
    OutsideDefinitionRegion,
    RadiusBelowResolution,
    SamplingSpec,
    ScalarField,
    ball_stats,
)
from .game import (
    GameSetup,
    GameState,
    Strategy,
    ValueEstimate,
    dpp_greedy_strategy,
    estimate_value,
    martingale_diagnostic,
    play_round,
    run_episode,
    simulate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
