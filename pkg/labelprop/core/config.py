import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from labelprop.core.exceptions import ConfigError


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -----------------------------
# CUES (patch histograms, GMM)
# -----------------------------
class CueConfig(Section):
    patch_radius: int = Field(3, ge=0)
    bins: int = Field(8, ge=2, le=256)
    gmm_components: int = Field(5, ge=1)
    variance_floor: float = Field(1e-4, gt=0)
    min_class_pixels: int = Field(10, ge=1)
    em_max_iter: int = Field(100, ge=1)
    em_tol: float = Field(1e-6, ge=0)  # log-likelihood gain per pixel
    u_max: float = Field(50.0, gt=0)


# -----------------------------
# CRF (energy weights, mean field)
# -----------------------------
class CrfConfig(Section):
    lambda1: float = Field(0.5, ge=0)
    lambda2: float = Field(1.0, ge=0)
    beta: Union[Literal["auto"], NonNegativeFloat] = "auto"
    alpha: float = Field(1.0, ge=0)
    neighborhood_radius: int = Field(1, ge=1)
    mf_iterations: int = Field(10, ge=1)
    mf_tolerance: float = Field(1e-3, ge=0)
    damping: float = Field(0.5, ge=0, lt=1)
    # raster: one pixel at a time; checkerboard: vectorized phases of mutually non-adjacent pixels
    update_order: Literal["raster", "checkerboard"] = "raster"
    depth: int = Field(5, ge=1)


class PropagateConfig(Section):
    mode: Literal["crf", "copy"] = "crf"
    estimate_flow: bool = False
    flow_block: int = Field(8, ge=1)
    flow_search: int = Field(7, ge=0)
    dump_marginals: bool = False
    oracle_ratings: bool = True
    parallel: int = Field(1, ge=1)


# -----------------------------
# DATASETS
# -----------------------------
class SynthConfig(Section):
    width: int = Field(48, ge=8)
    height: int = Field(32, ge=8)
    num_objects: int = Field(2, ge=0)
    min_speed: int = Field(1, ge=0)
    max_speed: int = Field(2, ge=0)
    min_object_size: int = Field(6, ge=2)
    max_object_size: int = Field(12, ge=2)
    noise_sigma: float = Field(6.0, ge=0)  # 8-bit units
    num_frames: int = Field(6, ge=2)
    num_sequences: int = Field(12, ge=1)
    num_val_sequences: int = Field(6, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def objects_stay_in_frame(self):
        if self.min_speed > self.max_speed:
            raise ValueError("min_speed must not exceed max_speed")
        if self.min_object_size > self.max_object_size:
            raise ValueError("min_object_size must not exceed max_object_size")
        travel = self.max_speed * (self.num_frames - 1)
        if self.max_object_size + travel > min(self.width, self.height):
            raise ValueError(
                f"objects of size {self.max_object_size} moving {travel} px would leave "
                f"a {self.width}x{self.height} frame"
            )
        return self


class JitterConfig(Section):
    dilation_radius: int = Field(1, ge=0)
    shift_min: int = Field(2, ge=0, le=8)
    shift_max: int = Field(4, ge=0, le=8)
    copies: int = Field(3, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def ordered_range(self):
        if self.shift_min > self.shift_max:
            raise ValueError("shift_min must not exceed shift_max")
        return self


class SetsConfig(Section):
    num_sets: int = Field(5, ge=1)
    seed: int = 0


# -----------------------------
# TRAINING
# -----------------------------
class TrainConfig(Section):
    epochs: int = Field(8, ge=0)
    batch_size: Literal[1] = 1
    learning_rate: float = Field(1e-2, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    trust_factor: float = Field(1.0, ge=0, le=1)
    shuffle_seed: int = 0
    init_seed: int = 0
    snapshot_every: int = Field(0, ge=0)  # epochs; 0 keeps only the final snapshot
    hidden1: int = Field(8, ge=1)
    hidden2: int = Field(8, ge=1)
    kernel: int = Field(3, ge=1)

    @model_validator(mode="after")
    def odd_kernel(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd so padding preserves resolution")
        return self


class SweepConfig(Section):
    sets: List[str] = Field(default_factory=list)
    trust_factors: List[float] = Field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    seeds: List[int] = Field(default_factory=lambda: [0])
    parallel: int = Field(1, ge=1)

    @model_validator(mode="after")
    def trust_in_range(self):
        for tf in self.trust_factors:
            if not 0.0 <= tf <= 1.0:
                raise ValueError(f"trust factor {tf} outside [0, 1]")
        return self


# -----------------------------
# RUN CONFIG (whole document)
# -----------------------------
class RunConfig(BaseSettings):
    palette: Literal["synthetic", "camvid"] = "synthetic"
    log_level: str = "INFO"
    cue: CueConfig = Field(default_factory=CueConfig)
    crf: CrfConfig = Field(default_factory=CrfConfig)
    propagate: PropagateConfig = Field(default_factory=PropagateConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    jitter: JitterConfig = Field(default_factory=JitterConfig)
    sets: SetsConfig = Field(default_factory=SetsConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    model_config = SettingsConfigDict(
        env_prefix="PGT_",
        env_nested_delimiter="__",
        env_file=".env",
        extra="forbid",
    )

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Rebase every seed in the document on ``seed``."""
        if seed is None:
            return self
        return self.model_copy(
            update={
                "synth": self.synth.model_copy(update={"seed": seed}),
                "sets": self.sets.model_copy(update={"seed": seed}),
                "jitter": self.jitter.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"shuffle_seed": seed, "init_seed": seed}),
            }
        )

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _describe(exc: ValidationError) -> str:
    problems = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"])
        if err["type"] == "extra_forbidden":
            problems.append(f"unknown key '{loc}'")
        else:
            problems.append(f"{loc}: {err['msg']}")
    return "; ".join(problems)


def load_config(path: Optional[Path] = None, seed: Optional[int] = None, **overrides) -> RunConfig:
    """Resolve defaults, .env, PGT_* environment, the JSON file and CLI overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    data.update(overrides)
    try:
        config = RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(_describe(e))
    return config.with_seed(seed)
