"""
Configuration management.
Loads environment settings and validates pipeline configuration files.
"""
import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Settings(BaseModel):
    """Process-level settings taken from the environment."""

    # Parallelism cap for replicate studies and calibration
    THREADS: int = 1

    # Directories
    LOG_DIR: Path = Path("./logs")
    CACHE_DIR: Path = Path("./cache")
    OUTPUT_DIR: Path = Path("./output")

    @field_validator("THREADS")
    @classmethod
    def check_threads(cls, v: int) -> int:
        if v < 1:
            raise ValueError("MOLMAP_THREADS must be at least 1")
        return v


class PsfSettings(BaseModel):
    """Point spread functions of both scan modes, FWHM in pixels."""

    confocal_fwhm: float = 4.0
    sted_fwhm: float = 0.8

    @field_validator("confocal_fwhm", "sted_fwhm")
    @classmethod
    def check_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("FWHM must be positive")
        return v

    @model_validator(mode="after")
    def check_resolution(self) -> "PsfSettings":
        if self.sted_fwhm > self.confocal_fwhm:
            raise ValueError("STED FWHM must not exceed the confocal FWHM")
        return self


class ScanSettings(BaseModel):
    """Multiscale scan test parameters."""

    # Side-length pairs; None means dyadic from the STED FWHM up to n/4
    scales: Optional[List[Tuple[int, int]]] = None
    full_stride: bool = False
    n_sim: int = 1000
    # Seed of the null replicates, independent of the run seed so the cache is shared
    calibration_seed: int = 0
    # Declared STED background per pulse; None means the simulation rate
    background: Optional[float] = None

    @field_validator("n_sim")
    @classmethod
    def check_n_sim(cls, v: int) -> int:
        if v < 1:
            raise ValueError("n_sim must be at least 1")
        return v


class WatershedSettings(BaseModel):
    """Watershed pre-processing; None selects the data-driven default."""

    smooth_fwhm: Optional[float] = None
    hmin: Optional[float] = None
    use_mask: bool = True


class CountingSettings(BaseModel):
    """Counting parameters."""

    # Region enlargement in pixels; None means one confocal FWHM
    eps_px: Optional[float] = None
    estimate_background: bool = True
    background_quantile: float = 0.05
    background_smooth_fwhm: Optional[float] = None

    @field_validator("background_quantile")
    @classmethod
    def check_quantile(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("background_quantile must lie in (0, 1)")
        return v


class ExperimentSettings(BaseModel):
    """Replicate studies."""

    replicates: int = 300
    figure7_counts: List[int] = [10, 20, 40, 60, 100, 150, 200]
    figure7_md: List[int] = [4, 6, 8]
    figure6_distances: List[float] = [0.5, 0.75, 1.0, 1.5, 2.0]
    segmentation_t: List[int] = [250, 1000, 4000]

    @field_validator("replicates")
    @classmethod
    def check_replicates(cls, v: int) -> int:
        if v < 1:
            raise ValueError("replicates must be at least 1")
        return v


class PipelineConfig(BaseModel):
    """Run-level configuration, loaded from the --config JSON file."""

    ground_truth: Optional[Path] = None
    phantom: Literal["clusters", "filaments"] = "clusters"
    n: int = 64
    psf: PsfSettings = Field(default_factory=PsfSettings)
    t_confocal: int = 3000
    t_sted: int = 3000
    md: int = 4
    alpha: float = 0.1
    alpha_seg: Optional[float] = None
    background_rate: float = 0.0
    scan: ScanSettings = Field(default_factory=ScanSettings)
    watershed: WatershedSettings = Field(default_factory=WatershedSettings)
    counting: CountingSettings = Field(default_factory=CountingSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)
    image_format: Literal["json", "csv", "bin"] = "json"
    seed: int = 0
    output_dir: Path = Path("./output")

    @field_validator("alpha")
    @classmethod
    def check_alpha(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("md")
    @classmethod
    def check_md(cls, v: int) -> int:
        if not 2 <= v <= 8:
            raise ValueError("md must lie in [2, 8]")
        return v

    @field_validator("t_confocal", "t_sted")
    @classmethod
    def check_pulses(cls, v: int) -> int:
        if v < 1:
            raise ValueError("pulse counts must be at least 1")
        return v

    @field_validator("n")
    @classmethod
    def check_n(cls, v: int) -> int:
        if v < 8:
            raise ValueError("n must be at least 8")
        return v

    @field_validator("background_rate")
    @classmethod
    def check_background(cls, v: float) -> float:
        if not 0 <= v < 0.5:
            raise ValueError("background_rate must lie in [0, 0.5)")
        return v

    @model_validator(mode="after")
    def check_alpha_split(self) -> "PipelineConfig":
        if self.alpha_seg is not None and not 0 < self.alpha_seg < self.alpha:
            raise ValueError("alpha_seg must lie in (0, alpha)")
        return self

    @property
    def segmentation_alpha(self) -> float:
        """Level spent on the segmentation, alpha/2 unless set."""
        return self.alpha_seg if self.alpha_seg is not None else self.alpha / 2

    @property
    def counting_alpha(self) -> float:
        """Level left for the simultaneous confidence intervals."""
        return self.alpha - self.segmentation_alpha

    @property
    def scan_background(self) -> float:
        return self.scan.background if self.scan.background is not None else self.background_rate

    def config_hash(self) -> str:
        """Short provenance hash; the output directory does not enter it."""
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        return digest[:16]


def load_config(path: Optional[Path] = None, seed: Optional[int] = None,
                out: Optional[Path] = None) -> PipelineConfig:
    """
    Load and validate a pipeline configuration.

    Args:
        path: JSON config file; None uses all defaults
        seed: Optional seed override
        out: Optional output directory override

    Returns:
        Validated PipelineConfig

    Raises:
        ConfigError: if the file is unreadable or a value is out of range
    """
    data = {"output_dir": str(settings.OUTPUT_DIR)}
    if path is not None:
        try:
            data.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = str(out)
    try:
        return PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e}") from e


def _load_settings() -> Settings:
    try:
        return Settings(
            THREADS=int(os.getenv("MOLMAP_THREADS", 1)),
            LOG_DIR=Path(os.getenv("MOLMAP_LOG_DIR", "./logs")),
            CACHE_DIR=Path(os.getenv("MOLMAP_CACHE_DIR", "./cache")),
            OUTPUT_DIR=Path(os.getenv("MOLMAP_OUTPUT_DIR", "./output")),
        )
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"Invalid environment settings: {e}") from e


# Create a global settings instance
settings = _load_settings()
