import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from hgfx.errors import ConfigError

logger = logging.getLogger(__name__)

AblationPreset = Literal["base", "hg", "hg+scan", "scan+hgl", "full"]

# (hetero_graph, adaptive_scan, hetero_learning)
ABLATION_PRESETS: dict[str, tuple[bool, bool, bool]] = {
    "base": (False, False, False),
    "hg": (True, False, False),
    "hg+scan": (True, True, False),
    "scan+hgl": (False, True, True),
    "full": (True, True, True),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    image_size: int = Field(32, gt=0)
    channels: Literal[1, 3] = 3
    patch_size: int = Field(8, gt=0)
    dim: int = Field(64, gt=0)
    mapped_dim: int = Field(64, gt=0)
    state_dim: int = Field(16, gt=0)
    k: int = Field(9, gt=0)
    dilation: int = Field(4, gt=0)
    blocks: int = Field(16, gt=0)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)
    classes: int = Field(2, gt=0)
    dist_eps: float = Field(1e-8, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"
    hetero_graph: bool = True
    adaptive_scan: bool = True
    hetero_learning: bool = True

    @model_validator(mode="after")
    def _check_grid(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.k > self.n_nodes:
            raise ValueError(f"k={self.k} exceeds the node count {self.n_nodes}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_nodes(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def effective_dilation(self, n_nodes: int | None = None) -> int:
        n = self.n_nodes if n_nodes is None else n_nodes
        return self.dilation if self.k * self.dilation <= n else 1

    def with_ablation(self, preset: str) -> "ModelConfig":
        try:
            hg, scan, hgl = ABLATION_PRESETS[preset]
        except KeyError:
            raise ConfigError(f"unknown ablation preset {preset!r}") from None
        return self.model_copy(update={"hetero_graph": hg, "adaptive_scan": scan, "hetero_learning": hgl})

    @property
    def ablation(self) -> str:
        flags = (self.hetero_graph, self.adaptive_scan, self.hetero_learning)
        for name, preset in ABLATION_PRESETS.items():
            if preset == flags:
                return name
        return "custom"


class OptimConfig(_Strict):
    lr: float = Field(1.25e-4, ge=0.0)
    warmup_ratio: float = Field(1e-4, ge=0.0, le=1.0)
    warmup_fraction: float = Field(0.1, ge=0.0, le=1.0)
    warmup_steps: int | None = Field(None, ge=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    grad_clip: float = Field(5.0, gt=0.0)
    epochs: int = Field(100, gt=0)
    batch_size: int = Field(64, gt=0)
    seed: int = 0


class DataConfig(_Strict):
    root: str | None = None
    val_fraction: float = Field(1.0 / 3.0, ge=0.0, lt=1.0)
    seed: int = 7


class RunConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    output_dir: str = "runs/default"


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def parse_run_config(text: str) -> RunConfig:
    try:
        return RunConfig.model_validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    except ValidationError as exc:
        errors = []
        for error in exc.errors():
            field = ".".join(str(p) for p in error["loc"]) or "config"
            errors.append(f"{field}: {error['msg']}")
        raise ConfigError("; ".join(errors)) from exc


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


def save_run_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(dump_run_config(cfg))


@dataclass(frozen=True)
class Settings:
    threads: int
    checkpoint: str | None
    config: str | None
    log_level: str


_settings: Settings | None = None


def get_settings() -> Settings:
    """Environment settings, read once. ``load_dotenv`` runs at package import."""
    global _settings
    if _settings is None:
        raw_threads = os.environ.get("HGFX_THREADS", "1")
        try:
            threads = int(raw_threads)
        except ValueError:
            raise ConfigError(f"HGFX_THREADS must be an integer, got {raw_threads!r}") from None
        if threads < 1:
            raise ConfigError(f"HGFX_THREADS must be positive, got {threads}")
        _settings = Settings(
            threads=threads,
            checkpoint=os.environ.get("HGFX_CHECKPOINT"),
            config=os.environ.get("HGFX_CONFIG"),
            log_level=os.environ.get("HGFX_LOG_LEVEL", "INFO").upper(),
        )
    return _settings


def reset_settings():
    global _settings
    _settings = None
