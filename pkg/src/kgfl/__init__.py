"""Data-driven feedback linearization via Koopman-generator least squares."""

from .control import (
    ClosedLoopResult,
    DerivativeWindow,
    FeedbackGain,
    ModelTransform,
    closed_loop_simulate,
    control_from_v,
    loss_QT,
    model_oracle_for,
    pole_place,
    sixdim_model_oracle,
    state_transform,
    vdp_model_oracle,
)
from .dictionary import (
    Dictionary,
    StackedDictionaryData,
    build_stacked_data,
    build_tensor_dictionary,
    eval_dictionary,
    eval_dictionary_gradient,
    eval_dictionary_matrix,
    finite_difference,
    hermite,
    input_matching_weights,
    output_derivative_stack,
)
from .errors import (
    DivergenceError,
    DomainError,
    FitDivergenceError,
    KgflError,
    NoiseAmplificationWarning,
    RankDeficiencyWarning,
    SingularControlError,
    TrajectoryParseError,
)
from .geomverify import (
    GeometryReport,
    adjoint_chain,
    check_nilpotency,
    distribution_rank,
    flow_scalar_derivatives,
    involutivity_check,
    lie_bracket,
    lie_derivative,
    numeric_jacobian,
    relative_degree,
)
from .solvers import (
    BrunovskyPair,
    FitDataset,
    TransformParams,
    als_fit,
    brunovsky,
    fullstate_dataset,
    io_dataset_from_series,
    io_dataset_from_stacks,
    kgfl_cost,
    kgfl_fit,
    kgfl_gradients,
    khatri_rao_row,
    linear_predictor_baseline,
    pseudoinverse,
    single_step_fullstate,
    single_step_io,
    unit_norm_lstsq,
)
from .systems import (
    ControlAffineSystem,
    Trajectory,
    collect_excitation,
    eval_dynamics,
    example_io_system,
    load_trajectory,
    rk4_step,
    save_trajectory,
    simulate,
    sixdim,
    vanderpol,
)

__version__ = "0.1.0"
