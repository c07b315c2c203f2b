"""Learning the parameters of potential games from observed Nash equilibria."""

from potlearn.diffgrad import SingularSystem, build_S, grad_theta, loss, solve_given_Z
from potlearn.games import (
    CongestionSpec,
    CournotSpec,
    Dataset,
    congestion_form,
    cournot_form,
    erdos_renyi,
    generate_dataset,
)
from potlearn.learner import RunLog, TrainConfig, evaluate_test_error, step_size, train
from potlearn.model import (
    AffineGameForm,
    AffineMap,
    Box,
    Datapoint,
    DimensionError,
    QuadraticPotentialProblem,
    assemble,
    check_assumptions,
    project_theta,
)
from potlearn.qp import (
    EquilibriumSolution,
    IllConditioned,
    Infeasible,
    best_response_gap,
    extract_active_sets,
    solve_potential,
)
from potlearn.rules import rule1_partition, rule2_perturb
from potlearn.verify import enumerate_active_sets_qp, finite_diff_grad, grid_search_theta

__version__ = "0.1.0"
