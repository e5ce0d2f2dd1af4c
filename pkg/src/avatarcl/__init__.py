"""Continual learning for articulated neural avatars.

A deformable radiance field over a skeleton rig, a global-local
appearance store generating tri-planes per appearance, replay-based
sequential task training with pose distillation, and a synthetic
capsule-figure benchmark for measuring forgetting.
"""

from .appearance import (
    AppearanceStore,
    ConditionEmbedding,
    DuplicateAppearanceError,
    TriPlaneGenerator,
    TriPlaneGrid,
    UnknownAppearanceError,
    generate_triplane,
    query_triplane,
    register_appearance,
)
from .checkpoint import CheckpointError, TaskCheckpoint, load_checkpoint, save_checkpoint
from .field import (
    AvatarModel,
    FieldMLP,
    FieldSample,
    build_model,
    field_eval,
    observed_field,
    positional_encode,
)
from .losses import TrainSchedule, lambda_p, loss_current, loss_pose, loss_replay
from .metrics import MetricReport, MetricRow, forgetting_report, hue_error, psnr, ssim
from .perceptual import GradientSSIMDistance, get_perceptual
from .render import (
    CameraParams,
    PatchBatch,
    PatchSpec,
    Rays,
    composite,
    generate_rays,
    look_at_camera,
    render_image,
    render_patch_batch,
    render_ray,
    render_rays,
    sample_along_rays,
)
from .skeleton import (
    BodyPose,
    BoneTransformSet,
    OutsideBodyError,
    PoseCorrectionNet,
    SkeletonRig,
    WeightField,
    bone_transforms,
    bounding_sphere,
    load_rig,
    observed_weight,
    pose_correct,
    save_rig,
    skeletal_transform,
)
from .synth import (
    SynthAvatarSpec,
    SynthTaskData,
    build_default_rig,
    make_task_sequence,
    oracle_render,
    orbit_camera,
    sample_pose,
)
from .trainer import (
    ReplayRecord,
    ReplayStore,
    TaskSpec,
    TrainImage,
    TrainOptions,
    TrainerState,
    UnknownTaskError,
    init_state,
    render_from_task,
    restore_model,
    resume_state,
    train_joint,
    train_task,
)

__version__ = "0.1.0"
