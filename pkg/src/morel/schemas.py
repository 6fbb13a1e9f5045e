from __future__ import annotations

import math
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SpriteShape = Literal["square", "circle"]
VariantName = Literal[
    "morel_joint",
    "morel_transfer_only",
    "baseline_standard",
    "baseline_double",
    "baseline_autoencoder",
]
Algo = Literal["a2c", "ppo"]

FULL_SCALE_DATASET_FRAMES = 100_000
FULL_SCALE_PRETRAIN_STEPS = 250_000
FULL_SCALE_WARMUP_STEPS = 100_000


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvConfig(_Config):
    seed: int = Field(0, description="Default episode seed for reset()")
    frame_size: int = Field(84, ge=24, multiple_of=4, description="Square frame side")
    num_sprites: int = Field(3, ge=0, le=8)
    sprite_shapes: Optional[Tuple[SpriteShape, ...]] = Field(
        None, description="One shape per sprite; alternates square/circle when unset"
    )
    sprite_size_px: int = Field(8, ge=4, le=16)
    sprite_speed_px: float = Field(
        2.0, ge=0.0, le=3.0, description="Bound of the per-axis velocity draw"
    )
    sprite_velocities: Optional[Tuple[Tuple[float, float], ...]] = Field(
        None, description="Explicit (dx, dy) per sprite, overrides the random draw"
    )
    camera_scroll_px: Tuple[float, float] = (0.0, 0.0)
    avatar_speed_px: int = Field(2, ge=0, le=8)
    avatar_size_px: int = Field(8, ge=3, le=16)
    episode_len: int = Field(1000, ge=1)
    reward_mode: Literal["catch", "avoid"] = "catch"

    @field_validator("sprite_velocities")
    @classmethod
    def _velocities_in_range(cls, v):
        if v is not None:
            for vx, vy in v:
                if not (-3.0 <= vx <= 3.0 and -3.0 <= vy <= 3.0):
                    raise ValueError("sprite velocity components must lie in [-3, 3]")
        return v

    @field_validator("camera_scroll_px")
    @classmethod
    def _scroll_finite(cls, v):
        if not all(math.isfinite(c) and abs(c) <= 3.0 for c in v):
            raise ValueError("camera scroll components must be finite and within [-3, 3]")
        return v

    @model_validator(mode="after")
    def _per_sprite_lengths(self):
        if self.sprite_shapes is not None and len(self.sprite_shapes) != self.num_sprites:
            raise ValueError("sprite_shapes needs exactly num_sprites entries")
        if (
            self.sprite_velocities is not None
            and len(self.sprite_velocities) != self.num_sprites
        ):
            raise ValueError("sprite_velocities needs exactly num_sprites entries")
        if max(self.sprite_size_px, self.avatar_size_px) > self.frame_size:
            raise ValueError("sprites and avatar must fit inside the frame")
        return self


class CollectConfig(_Config):
    n_frames: int = Field(10_000, ge=2)
    seed: int = 0


class CurriculumSchedule(_Config):
    warmup_steps: int = Field(..., ge=1)


class PretrainConfig(_Config):
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(16, ge=1)
    total_steps: int = Field(5_000, ge=0)
    warmup_steps: int = Field(2_000, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(1_000, ge=0, description="0 disables periodic checkpoints")
    num_masks: int = Field(20, ge=1)
    window_size: int = Field(11, ge=3)
    reg_reduction: Literal["sum", "mean"] = "mean"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    num_workers: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)

    @field_validator("window_size")
    @classmethod
    def _odd_window(cls, v):
        if v % 2 == 0:
            raise ValueError("window_size must be odd")
        return v

    @model_validator(mode="after")
    def _warmup_within_budget(self):
        if self.total_steps > 0 and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        return self

    @property
    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(warmup_steps=self.warmup_steps)

    @classmethod
    def full_scale(cls, **overrides) -> "PretrainConfig":
        values = dict(
            learning_rate=1e-4,
            batch_size=16,
            total_steps=FULL_SCALE_PRETRAIN_STEPS,
            warmup_steps=FULL_SCALE_WARMUP_STEPS,
        )
        values.update(overrides)
        return cls(**values)


class UpdateConfig(_Config):
    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    n_steps: int = Field(5, ge=1)
    num_envs: int = Field(16, ge=1)
    entropy_coef: float = Field(0.01, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    seg_coef: float = Field(1.0, ge=0.0)
    grad_clip_norm: float = Field(0.5, gt=0.0)
    learning_rate: Optional[float] = Field(None, gt=0.0, description="Defaults per algorithm")
    optimizer: Optional[Literal["rmsprop", "adam"]] = None
    rmsprop_alpha: float = Field(0.99, gt=0.0, lt=1.0)
    optim_eps: float = Field(1e-5, gt=0.0)
    clip_epsilon: float = Field(0.2, gt=0.0)
    epochs: int = Field(4, ge=1)
    minibatches: int = Field(4, ge=1)
    window_size: int = Field(11, ge=3)
    reg_reduction: Literal["sum", "mean"] = "mean"

    def resolved_optimizer(self, algo: Algo) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "rmsprop" if algo == "a2c" else "adam"

    def resolved_learning_rate(self, algo: Algo) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 7e-4 if algo == "a2c" else 2.5e-4


class TrainConfig(_Config):
    algo: Algo = "a2c"
    total_env_steps: int = Field(200_000, ge=1)
    eval_every: int = Field(250, ge=0, description="Updates between evaluations, 0 disables")
    eval_episodes: int = Field(5, ge=1)
    checkpoint_every: int = Field(1_000, ge=0)
    return_window: int = Field(10, ge=1, description="Completed episodes averaged for mean_return")
    log_every: int = Field(100, ge=1)
    pretrain_frames: int = Field(
        0, ge=0, description="Frames consumed by pretraining, added to plotted env steps"
    )


class VariantSpec(_Config):
    name: VariantName = "morel_joint"

    @property
    def joint_seg(self) -> bool:
        return self.name == "morel_joint"

    @property
    def init_source(self) -> Literal["segnet", "autoencoder", "random"]:
        if self.name.startswith("morel"):
            return "segnet"
        if self.name == "baseline_autoencoder":
            return "autoencoder"
        return "random"

    @property
    def dual_path(self) -> bool:
        return self.name != "baseline_standard"

    @property
    def pretrained(self) -> bool:
        return self.init_source != "random"


class RunConfig(_Config):
    seed: int = 0
    out_dir: str = "runs"
    env: EnvConfig = EnvConfig()
    collect: CollectConfig = CollectConfig()
    pretrain: PretrainConfig = PretrainConfig()
    update: UpdateConfig = UpdateConfig()
    train: TrainConfig = TrainConfig()
    variant: VariantSpec = VariantSpec()
