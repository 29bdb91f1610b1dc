"""graspfusion: pixel-wise grasp synthesis from RGB-D observations.

Mask-based grasp labeling, a desk-scale hierarchical RGB-D fusion network
with its own verified autodiff engine, two-stage training, an open-loop
grasp planner with a geometric execution oracle, and the SR/RGR/RGG/PT
metric suite.
"""

from .geometry import (
    CameraModel,
    DegenerateNormalError,
    GraspPose,
    HandEyeTransform,
    ImageGrasp,
    camera_to_robot,
    decode_angle,
    deproject,
    encode_angle,
    estimate_surface_normal,
    load_camera_config,
    project,
    shortest_arc_quaternion,
    width_m_to_px,
    width_px_to_m,
)
from .labeling import (
    ChordResult,
    GraspMaps,
    label_ground_truth,
    largest_component,
    min_area_rect,
    rasterize_ellipse,
    shortest_chord,
)
from .data import (
    NetInput,
    NoiseModel,
    Observation,
    Sample,
    SceneConfig,
    inpaint_depth,
    normalize_minmax,
    prepare_input,
    read_grasp_maps,
    read_manifest,
    resize_observation,
    split,
    synth_scene,
    write_grasp_maps,
    write_manifest,
)
from .network import (
    CheckpointError,
    GraspNetwork,
    NetConfig,
    NetOutputs,
    build_network,
    fuse,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from .training import (
    Adam,
    LossWeights,
    gradient_check,
    loss_depth,
    loss_grasp,
    loss_mask,
    loss_total,
    train_stage1,
    train_stage2,
)
from .policy import GraspPlanner, PlannedGrasp, extract_grasp, plan, simulate_execution
from .metrics import (
    TrialRecord,
    metric_pt,
    metric_rgg,
    metric_rgr,
    metric_sr,
    pitch_sweep,
    render_heatmap,
    run_trials,
)

__version__ = "0.1.0"
