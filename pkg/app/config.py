"""
Configuration for GSC Desk - defaults, config file loading and logging setup
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError

# ========== CORPUS ==========
CANVAS_SIZE = 32
MAX_SHAPES_PER_KIND = 2  # grammar allows up to four
MIN_SHAPE_SIZE = 3  # radius / half-side in pixels
MAX_SHAPE_SIZE = 4
PLACEMENT_RETRIES = 100
CORPUS_SIZE = 1000
HELDOUT_SIZE = 200

# ========== CODEC ==========
CODEC_CHANNELS = 32
CODEC_PATCH = 4
CODEC_ALPHABET_K = 63  # symbols live in [-K, K]
CODEC_QUANT_STEP = 0.125  # float32-representable
CODEC_LAMBDA_RATE = 0.01
CODEC_STEPS = 1500
CODEC_LR = 5e-3
CODEC_BATCH = 16
ENTROPY_SMOOTHING = 1.0
CDF_PRECISION_BITS = 16

# ========== FLOW ==========
FLOW_D_MODEL = 128
FLOW_D_FF = 256
FLOW_D_TIME = 16
FLOW_D_TXT = 32
FLOW_L_BASE = 6
FLOW_M_CTL = 4  # trunk blocks copied into the control branch
FLOW_ACTIVATION = "silu"
FLOW_LR = 1e-3  # toy nets train from scratch; the optimizer default stays 4e-5
FLOW_WEIGHT_DECAY = 0.01
FLOW_STEPS = 3000
FLOW_ACCUMULATION = 4  # gradients accumulated over 4 micro-batches of size 1

# ========== OPTIMIZER ==========
ADAMW_LR = 4e-5
ADAMW_WEIGHT_DECAY = 0.01
ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8

# ========== SAMPLER / SELECTION / THEORY ==========
SAMPLER_STEPS = 20
CHANNEL_CANDIDATES = [1, 2, 4, 8, 16]
RD_ALPHA = 1.0
RD_BETA = 0.001
THEORY_LAMBDA = 0.1
THEORY_RATE_BUDGET = 10.0  # bits; R in the constrained objective
IMPORTANCE_EPS = 1e-6
VISION_THRESHOLD = 0.5
EVAL_THRESHOLD = 0.25  # below the dimmest shape intensity (0.3)
VISION_MIN_AREA = 4
PSNR_IDENTICAL_DB = 99.0

# Log level names accepted in GSC_LOG
LOG_LEVELS: Dict[str, int] = {
    "quiet": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


@dataclass
class SceneBounds:
    """Placement limits for procedural scenes"""
    width: int = CANVAS_SIZE
    height: int = CANVAS_SIZE
    max_shapes: int = MAX_SHAPES_PER_KIND  # per kind
    min_size: int = MIN_SHAPE_SIZE
    max_size: int = MAX_SHAPE_SIZE
    allow_overlap: bool = True

    def __post_init__(self):
        if not 0 <= self.max_shapes <= 4:
            raise ConfigError(f"max_shapes must be in [0, 4], got {self.max_shapes}")
        if self.min_size < 3 or self.max_size < self.min_size:
            raise ConfigError(f"invalid size bounds [{self.min_size}, {self.max_size}]")
        if 2 * self.max_size > min(self.width, self.height):
            raise ConfigError(f"shapes of size {self.max_size} do not fit a {self.width}x{self.height} canvas")


class GscConfig(BaseModel):
    """Flat key=value configuration; every key has a default"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    corpus_size: int = Field(CORPUS_SIZE, alias="corpus.size", ge=1)
    corpus_heldout: int = Field(HELDOUT_SIZE, alias="corpus.heldout", ge=1)
    corpus_canvas: int = Field(CANVAS_SIZE, alias="corpus.canvas", ge=8)
    corpus_max_shapes: int = Field(MAX_SHAPES_PER_KIND, alias="corpus.max_shapes", ge=0, le=4)
    corpus_min_size: int = Field(MIN_SHAPE_SIZE, alias="corpus.min_size", ge=3)
    corpus_max_size: int = Field(MAX_SHAPE_SIZE, alias="corpus.max_size", ge=3)
    corpus_seed: int = Field(0, alias="corpus.seed", ge=0)

    codec_n: int = Field(CODEC_CHANNELS, alias="codec.n", ge=1)
    codec_patch: int = Field(CODEC_PATCH, alias="codec.patch", ge=1)
    codec_alphabet_k: int = Field(CODEC_ALPHABET_K, alias="codec.K", ge=1, le=2 ** 15)
    codec_quant_step: float = Field(CODEC_QUANT_STEP, alias="codec.q", ge=1e-3, le=10.0)
    codec_lambda_rate: float = Field(CODEC_LAMBDA_RATE, alias="codec.lambda_rate", ge=0.0)
    codec_steps: int = Field(CODEC_STEPS, alias="codec.steps", ge=0)
    codec_lr: float = Field(CODEC_LR, alias="codec.lr", gt=0.0)
    codec_batch: int = Field(CODEC_BATCH, alias="codec.batch", ge=1)
    codec_seed: int = Field(1, alias="codec.seed", ge=0)

    flow_d_model: int = Field(FLOW_D_MODEL, alias="flow.d_model", ge=1)
    flow_d_ff: int = Field(FLOW_D_FF, alias="flow.d_ff", ge=1)
    flow_d_time: int = Field(FLOW_D_TIME, alias="flow.d_time", ge=2)
    flow_d_txt: int = Field(FLOW_D_TXT, alias="flow.d_txt", ge=1)
    flow_l_base: int = Field(FLOW_L_BASE, alias="flow.L_base", ge=1)
    flow_m_ctl: int = Field(FLOW_M_CTL, alias="flow.M_ctl", ge=1)
    flow_activation: str = Field(FLOW_ACTIVATION, alias="flow.activation")
    flow_lr: float = Field(FLOW_LR, alias="flow.lr", gt=0.0)
    flow_weight_decay: float = Field(FLOW_WEIGHT_DECAY, alias="flow.weight_decay", ge=0.0)
    flow_steps: int = Field(FLOW_STEPS, alias="flow.steps", ge=0)
    flow_accumulation: int = Field(FLOW_ACCUMULATION, alias="flow.accumulation", ge=1)
    flow_seed: int = Field(2, alias="flow.seed", ge=0)

    sampler_n: int = Field(SAMPLER_STEPS, alias="sampler.N", ge=1)
    sampler_seed: int = Field(3, alias="sampler.seed", ge=0)

    selection_c_list: List[int] = Field(default_factory=lambda: list(CHANNEL_CANDIDATES), alias="selection.C_list")
    selection_c: int = Field(4, alias="selection.C", ge=0)
    selection_alpha: float = Field(RD_ALPHA, alias="selection.alpha", ge=0.0)
    selection_beta: float = Field(RD_BETA, alias="selection.beta", ge=0.0)

    theory_importance: str = Field("gradient", alias="theory.importance")
    theory_lambda: float = Field(THEORY_LAMBDA, alias="theory.lambda")
    theory_rate_budget: float = Field(THEORY_RATE_BUDGET, alias="theory.R")

    eval_threshold: float = Field(EVAL_THRESHOLD, alias="eval.threshold", ge=0.0, le=1.0)
    eval_limit: int = Field(HELDOUT_SIZE, alias="eval.limit", ge=1)

    paths_out_dir: str = Field("runs", alias="paths.out_dir")
    paths_corpus: str = Field("corpus.gscc", alias="paths.corpus")
    paths_heldout: str = Field("heldout.gscc", alias="paths.heldout")
    paths_codec: str = Field("codec.gscm", alias="paths.codec")
    paths_flow_base: str = Field("flow_base.gscm", alias="paths.flow_base")
    paths_flow_control: str = Field("flow_c{C}.gscm", alias="paths.flow_control")
    paths_registry: str = Field("registry.db", alias="paths.registry")

    @field_validator("selection_c_list", mode="before")
    @classmethod
    def parse_channel_list(cls, v):
        if isinstance(v, str):
            try:
                v = [int(tok) for tok in v.split(",") if tok.strip()]
            except ValueError as exc:
                raise ValueError(f"expected comma-separated integers, got {v!r}") from exc
        if not v:
            raise ValueError("channel list cannot be empty")
        return sorted(set(v))

    @field_validator("flow_activation")
    @classmethod
    def validate_activation(cls, v):
        if v not in ("linear", "gelu", "silu"):
            raise ValueError(f"activation must be linear, gelu or silu, got {v!r}")
        return v

    @field_validator("theory_importance")
    @classmethod
    def validate_importance(cls, v):
        if v not in ("uniform", "gradient"):
            raise ValueError(f"importance mode must be uniform or gradient, got {v!r}")
        return v

    @model_validator(mode="after")
    def check_consistency(self):
        if self.corpus_canvas % self.codec_patch != 0:
            raise ValueError(f"codec.patch={self.codec_patch} must divide corpus.canvas={self.corpus_canvas}")
        if self.flow_m_ctl > self.flow_l_base:
            raise ValueError("flow.M_ctl cannot exceed flow.L_base")
        if self.corpus_max_size < self.corpus_min_size:
            raise ValueError("corpus.max_size must be >= corpus.min_size")
        if any(c < 0 or c > self.codec_n for c in self.selection_c_list):
            raise ValueError(f"selection.C_list entries must be in [0, {self.codec_n}]")
        if self.selection_c > self.codec_n:
            raise ValueError(f"selection.C must be <= codec.n={self.codec_n}")
        return self

    def scene_bounds(self, allow_overlap: bool = True) -> SceneBounds:
        return SceneBounds(
            width=self.corpus_canvas,
            height=self.corpus_canvas,
            max_shapes=self.corpus_max_shapes,
            min_size=self.corpus_min_size,
            max_size=self.corpus_max_size,
            allow_overlap=allow_overlap,
        )

    def with_seed(self, seed: int) -> "GscConfig":
        """Override every seed key (the --seed flag)"""
        return self.model_copy(update={
            "corpus_seed": seed,
            "codec_seed": seed + 1,
            "flow_seed": seed + 2,
            "sampler_seed": seed + 3,
        })

    def out_path(self, name: str, out_dir: Optional[str] = None) -> Path:
        return Path(out_dir or self.paths_out_dir) / name

    def flow_control_name(self, channel_count: int) -> str:
        return self.paths_flow_control.format(C=channel_count)

    @classmethod
    def documented_keys(cls) -> Dict[str, object]:
        """Map of every accepted key to its default value"""
        defaults = cls()
        return {
            info.alias: getattr(defaults, name)
            for name, info in cls.model_fields.items()
        }


def parse_config_text(text: str, source: str = "<config>") -> GscConfig:
    """Parse flat key=value text into a validated config"""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value

    unknown = sorted(set(values) - set(GscConfig.documented_keys()))
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")

    try:
        return GscConfig.model_validate(values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(loc) for loc in first["loc"]) or "<root>"
        raise ConfigError(f"{source}: invalid value for {key}: {first['msg']}") from exc


def load_config(path: Optional[str]) -> GscConfig:
    """Load a config file, or the defaults when no path is given"""
    if path is None:
        return GscConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(p))


def configure_logging(level_name: Optional[str] = None) -> int:
    """Configure root logging from a GSC_LOG level name"""
    name = (level_name or os.getenv("GSC_LOG", "info")).strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"GSC_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    level = LOG_LEVELS[name]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    return level
