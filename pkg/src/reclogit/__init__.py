"""Link-based route choice models.

Recursive logit and its link-size and nested variants, plus two hybrid
extensions whose residual utilities are learned by masked softplus
layers, optionally propagated over link-proximity matrices. Estimation
maximizes a log-likelihood penalized for reliance on the residual
component; counterfactual link removals rebuild adjacency and
proximities in a dimension-stable way.
"""

from .context import ModelContext
from .estimation import (
    EstimationConfig,
    Evaluator,
    FitResult,
    GradientVector,
    LossReport,
    ParameterSpace,
    Scenario,
    analytic_gradient,
    ei_penalty,
    finite_difference_gradient,
    fit,
    log_likelihood,
    loss_report,
    standard_errors,
)
from .estimator import RouteChoiceEstimator
from .exceptions import (
    DimensionError,
    DivergenceError,
    IncompleteRouteError,
    InputError,
    LayerOverflowError,
    NonConvergenceError,
    NumericError,
    ParseError,
    RecLogitError,
    SingularInformationError,
    StructuralError,
    ValueSolveError,
)
from .io import (
    TrajectorySet,
    ToyFixture,
    load_params,
    load_trajectories,
    save_params,
    save_trajectories,
    toy_fixture,
)
from .metrics import MetricsReport, acp, bleu4, evaluate_model, jsd, sentence_bleu
from .model import (
    FeatureTensor,
    ModelKind,
    ModelParams,
    UtilityField,
    build_features,
    cross_effect_derivative,
    nrl_scale,
    resdgcn_residual,
    resrl_residual,
    systematic_utility,
    utility_field,
)
from .network import (
    Link,
    LinkGraph,
    ProximitySet,
    build_proximities,
    load_network,
    make_graph,
    reachable_links,
    remove_link,
    save_network,
)
from .simulate import sample_trajectories
from .solver import (
    ChoiceMatrix,
    FlowVector,
    ValueField,
    choice_probabilities,
    expected_link_flow,
    link_size_attribute,
    most_probable_route,
    path_log_probability,
    solve_value,
    solve_value_nrl,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
