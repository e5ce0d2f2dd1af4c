"""Run configuration: presets plus JSON overrides.

A run config names either a synthetic generation block or an existing
dataset directory (exactly one), picks a preset, and may override any
schedule, option, or architecture field.  The "desk" preset is sized
for a single CPU core; "studio" is the full-scale variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .losses import TrainSchedule
from .render import PatchSpec
from .trainer import TrainOptions

PRESETS = {
    "desk": {
        "image_size": 64,
        "arch": {"width": 32, "triplane_res": 64, "triplane_feat": 8,
                 "generator_channels": 8, "l_freq": 10, "max_frames": 256},
        "schedule": {"t_max": 4000, "t_0": 600, "t_init": 0},
        "options": {"n_samples_train": 10, "n_samples_eval": 32,
                    "patch_current": [2, 8], "patch_past": [1, 10]},
    },
    "studio": {
        "image_size": 512,
        "arch": {"width": 256, "triplane_res": 512, "triplane_feat": 16,
                 "generator_channels": 64, "l_freq": 10, "max_frames": 4096},
        "schedule": {"t_max": 12000, "t_0": 2000, "t_init": 0},
        "options": {"n_samples_train": 128, "n_samples_eval": 128,
                    "patch_current": [6, 32], "patch_past": [1, 64]},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class SynthBlock:
    palettes: list
    views_per_task: int = 5
    eval_views: int = 2
    eval_poses: int = 2
    pose_noise: float = 0.05
    image_size: Optional[int] = None    # None = preset default
    radius_scales: object = "auto"      # "auto" | null | per-task list

    def __post_init__(self):
        rs = self.radius_scales
        if isinstance(rs, str) and rs != "auto":
            raise ConfigError("radius_scales must be 'auto', null, or a per-task list")
        if isinstance(rs, (list, tuple)):
            if len(rs) != len(self.palettes):
                raise ConfigError("radius_scales list must match palette count")


@dataclass
class RunConfig:
    out_dir: str
    seed: int = 42
    preset: str = "desk"
    mode: str = "sequential"            # sequential | joint
    rig: Optional[str] = None           # rig JSON path; None = built-in figure
    synth: Optional[SynthBlock] = None
    dataset: Optional[str] = None
    schedule: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)   # min_past_psnr / margin_over / margin_db

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.mode not in ("sequential", "joint"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if (self.synth is None) == (self.dataset is None):
            raise ConfigError("exactly one of 'synth' or 'dataset' is required")
        if self.mode == "joint":
            for key in ("naive_finetune", "disable_pose_distill"):
                if self.options.get(key):
                    raise ConfigError(f"{key} has no effect in joint mode")
        bad_eval = set(self.eval) - {"min_past_psnr", "margin_over", "margin_db"}
        if bad_eval:
            raise ConfigError(f"unknown eval keys: {sorted(bad_eval)}")

    @property
    def image_size(self) -> int:
        if self.synth is not None and self.synth.image_size is not None:
            return self.synth.image_size
        return PRESETS[self.preset]["image_size"]


def load_config(path) -> RunConfig:
    with open(path) as f:
        raw = json.load(f)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    synth = raw.pop("synth", None)
    if synth is not None:
        synth = SynthBlock(**synth)
    known = {"out_dir", "seed", "preset", "mode", "rig", "dataset",
             "schedule", "options", "arch", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(synth=synth, **raw)


def build_schedule(cfg: RunConfig) -> TrainSchedule:
    d = dict(PRESETS[cfg.preset]["schedule"])
    d.update(cfg.schedule)
    return TrainSchedule(seed=cfg.seed, **d)


def build_options(cfg: RunConfig) -> TrainOptions:
    d = dict(PRESETS[cfg.preset]["options"])
    d.update(cfg.options)
    d.pop("disable_gl_store", None)   # architecture flag, see build_arch
    pc = d.pop("patch_current")
    pp = d.pop("patch_past")
    return TrainOptions(patch_current=PatchSpec(pc[0], pc[1], "current"),
                        patch_past=PatchSpec(pp[0], pp[1], "past"), **d)


def build_arch(cfg: RunConfig) -> dict:
    d = dict(PRESETS[cfg.preset]["arch"])
    d.update(cfg.arch)
    d["use_local_embeddings"] = not cfg.options.get("disable_gl_store", False)
    d.setdefault("use_pose_correction", True)
    return d
