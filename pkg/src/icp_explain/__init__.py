"""Registration uncertainty, quantified and attributed.

The pipeline: point-to-point ICP registers a cloud pair; repeated runs under
randomized initial poses yield a distribution over pose estimates; the KL
divergence between that distribution under perturbed inputs and under clean
inputs is a scalar uncertainty; kernel SHAP splits the scalar across the
three perturbation sources (sensor noise, initial-pose spread, overlap
reduction).
"""

from .cloud import (
    OverlapReport,
    PointCloud,
    SpatialIndex,
    add_sensor_noise,
    load_cloud,
    overlap_ratio,
    reduce_overlap,
    save_cloud,
    transform_cloud,
)
from .errors import (
    AngleNearPi,
    ArityMismatch,
    DegenerateConfiguration,
    EmptyGroup,
    IcpExplainError,
    InsufficientOverlap,
    NoCorrespondences,
    ParseError,
    SingularCovariance,
    SingularDesign,
)
from .experiments import (
    CloudPair,
    ExplanationRecord,
    PairSession,
    PerturbationGrid,
    SequenceManifest,
    emit_plot_data,
    load_manifest,
    load_pose_file,
    median_table,
    remove_outliers_iqr,
    run_fixed_setting_sweep,
    run_grid_experiment,
    save_pose_file,
)
from .icp import Correspondences, IcpConfig, IcpResult, estimate_rigid_transform, find_correspondences, run_icp
from .kernel_shap import (
    PerturbationSetting,
    REFERENCE_SETTING,
    SettingBounds,
    ShapExplanation,
    brute_force_shapley,
    enumerate_coalitions,
    explain,
    map_coalition,
    shapley_kernel_weight,
    weighted_linear_regression,
)
from .se3 import (
    PoseCovariance,
    RigidTransform,
    TangentVector,
    default_pose_covariance,
    exp_se3,
    hat3,
    hat6,
    log_se3,
    pose_error,
    sample_pose_perturbation,
)
from .uncertainty import (
    EstimatorConfig,
    GaussianPoseDistribution,
    InitSampler,
    PoseSampleSet,
    Scenario,
    StageSeeds,
    apply_perturbations,
    estimate_uncertainty,
    fit_gaussian,
    fit_pose_distribution,
    kl_divergence,
    sample_pose_estimates,
)

__version__ = "0.1.0"
