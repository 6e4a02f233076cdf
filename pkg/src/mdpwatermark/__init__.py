"""Dynamic watermarking for finite Markov decision processes.

Watermarked stochastic policies, feedback-channel attack strategies, a
CUSUM-type change detector over reported observation/action streams,
closed-form detection-performance bounds, control-loss perturbation
analysis, and a seeded Monte Carlo harness with a power-managed
sensor-network case study.
"""

from .attack import (
    AttackMatrix,
    ExtendedChain,
    MatrixAttack,
    NullAttack,
    PredictiveResamplingAttack,
    VirtualSystemAttack,
    extended_chain,
    joint_chain_postattack,
    matrix_attack,
    null_attack,
    null_attack_matrix,
    predictive_resampling_attack,
    virtual_system_attack,
)
from .bounds import (
    BoundsReport,
    compute_report,
    hoeffding_tail,
    kl_rate,
    lambda1,
    limiting_Q,
    md_upper_bound,
    min_nonzero,
    mtbfa_lower_bound,
    stealthiness_check,
    u_series,
)
from .detector import (
    DetectionOutcome,
    DetectorConfig,
    DetectorState,
    TransitionCounts,
    qhat,
    run_detector,
    segment_score,
)
from .mdp import (
    AlphaPotential,
    CostFunction,
    DoeblinCertificate,
    InducedChain,
    JointChain,
    Policy,
    StationaryDist,
    Trajectory,
    TransitionKernel,
    alpha_potential,
    constant_action_cost,
    deterministic_policy,
    discounted_cost,
    doeblin_certificate,
    induced_state_chain,
    joint_chain_preattack,
    simulate,
    stationary_distribution,
    uniform_policy,
    validate_kernel,
)
from .sensornet import (
    CompositeState,
    PowerModelParams,
    build_model,
    find_optimal_threshold,
    node_projection,
    projected_kernel,
    threshold_policy,
)
from .watermark import (
    ControlLossGap,
    LossReport,
    WatermarkSpec,
    control_loss_derivative,
    control_loss_exact,
    loss_report,
    mix_policy,
)

__version__ = "0.1.0"
