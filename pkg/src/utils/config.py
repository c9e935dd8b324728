"""
Run configuration: defaults, config file (TOML or JSON), environment, CLI flags.
"""
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError

# Load environment variables
load_dotenv()

WORKERS_ENV = "GAZETRACE_WORKERS"


class RunConfig(BaseModel):
    scene_path: Path
    gallery_path: Path
    frames_path: Path
    output_dir: Path
    overrides_path: Optional[Path] = None

    # tracking
    max_distance_px: float = Field(default=75.0, gt=0)
    max_gap_frames: int = Field(default=15, ge=0)

    # re-identification; threshold falls back to the gallery file's value
    reid_threshold: Optional[float] = Field(default=None, ge=-1.0, le=1.0)
    reid_window: int = Field(default=10, ge=1)
    reid_strategy: Literal["earliest", "mean"] = "earliest"

    # depth sampling
    min_valid_depth_fraction: float = Field(default=0.1, gt=0, le=1.0)

    # timeline
    interval_s: float = Field(default=5.0, gt=0)
    threshold_s: float = Field(default=2.0, ge=0)
    pooling: Literal["dominant", "median"] = "dominant"

    workers: int = Field(default=1, ge=1)
    fps: float = Field(default=30.0, gt=0)
    seed: Optional[int] = None
    record_timings: bool = True

    @model_validator(mode="after")
    def _threshold_fits_interval(self):
        if self.threshold_s > self.interval_s:
            raise ValueError(
                f"threshold_s ({self.threshold_s}) must not exceed interval_s ({self.interval_s})"
            )
        return self

    def validate_paths(self) -> None:
        required = {
            "scene_path": self.scene_path,
            "gallery_path": self.gallery_path,
            "frames_path": self.frames_path,
        }
        if self.overrides_path is not None:
            required["overrides_path"] = self.overrides_path
        for name, path in required.items():
            if not Path(path).is_file():
                raise ConfigError(f"{name} does not exist: {path}")


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold an object")
    # relative paths in a config file are relative to the file
    for key in ("scene_path", "gallery_path", "frames_path", "output_dir", "overrides_path"):
        if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    return data


def env_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    workers = os.getenv(WORKERS_ENV)
    if workers:
        try:
            overrides["workers"] = int(workers)
        except ValueError as e:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {workers!r}") from e
    return overrides


def load_run_config(config_file: Optional[Path] = None, **flags: Any) -> RunConfig:
    """Merge config sources; later sources win: file, environment, explicit flags."""
    data: Dict[str, Any] = {}
    if config_file is not None:
        data.update(read_config_file(config_file))
    data.update(env_overrides())
    data.update({k: v for k, v in flags.items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e
