"""
Run configuration - pydantic model tree loaded from a TOML/JSON file,
`--set section.key=value` flags and the COLREG_OUTPUT_ROOT environment variable.
Precedence: flag > environment > file > default.
"""
from pathlib import Path
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from colreg.errors import ConfigError

OUTPUT_ROOT_ENV = "COLREG_OUTPUT_ROOT"


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(Section):
    name: str = "toy"
    root: str = "data/toy"
    prepared_dir: str | None = None
    rho: float = Field(8.0, ge=0)
    patch: int = Field(64, gt=0)
    oversample: int | None = Field(None, ge=1)
    channels: int = Field(1, ge=1)
    seed: int = 0


class ModelConfig(Section):
    schedule: str = "linear"
    timesteps: int = Field(100, ge=1)
    beta_start: float = Field(1e-4, ge=0, lt=1)
    beta_end: float = Field(2e-2, ge=0, lt=1)
    t2_train_low: float = Field(0.8, gt=0, le=1)
    t2_infer: float = Field(0.9, gt=0, le=1)
    unet_base: int = Field(64, ge=1)
    mim_channels: int = Field(1, ge=1)
    mim_width: int = Field(64, ge=1)
    mim_depth: int = Field(6, ge=2)
    reg_width: int = Field(64, ge=1)
    reg_hidden: int = Field(64, ge=1)
    iterations: list[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    radius: int = Field(4, ge=0)
    n_scales: int = Field(4, ge=1)
    n_orient: int = Field(6, ge=1)

    @field_validator("schedule")
    @classmethod
    def known_schedule(cls, v):
        if v not in ("linear", "quad", "cosine"):
            raise ValueError(f"unknown schedule {v!r}")
        return v

    @field_validator("iterations")
    @classmethod
    def four_scales(cls, v):
        if len(v) != 4 or any(q < 0 for q in v) or sum(v) == 0:
            raise ValueError("iterations needs four non-negative counts with a positive sum")
        return v


class BudgetConfig(Section):
    diff_bootstrap: int = Field(600, ge=1)
    reg_s_bootstrap: int = Field(300, ge=1)
    mim_t: int = Field(30, ge=1)
    mim_s: int = Field(30, ge=1)
    diff: int = Field(60, ge=1)
    reg_s: int = Field(60, ge=1)
    reg_c: int = Field(10, ge=1)

    def set_all(self, steps: int) -> None:
        for name in type(self).model_fields:
            setattr(self, name, steps)


class TrainingConfig(Section):
    alternations: int = Field(2, ge=1)
    budgets: BudgetConfig = Field(default_factory=BudgetConfig)
    lr_diff: float = Field(2.5e-4, gt=0)
    lr_mim: float = Field(2.5e-4, gt=0)
    lr_reg_max: float = Field(4e-4, gt=0)
    batch_size: int = Field(16, ge=1)
    lambda_mds: float = Field(1.0, ge=0)
    seed: int = 0
    device: str = "cpu"


class OutputConfig(Section):
    root: str = "runs"
    run_name: str = "default"

    @property
    def run_dir(self) -> Path:
        return Path(self.root) / self.run_name

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def log_dir(self) -> Path:
        return self.run_dir / "logs"

    @property
    def record_dir(self) -> Path:
        return self.run_dir / "records"

    @property
    def report_dir(self) -> Path:
        return self.run_dir / "reports"


class RunConfig(Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @property
    def prepared_dir(self) -> Path:
        if self.dataset.prepared_dir:
            return Path(self.dataset.prepared_dir)
        return Path(self.output.root) / "prepared" / self.dataset.name


def _read_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(path.read_text())
        return json.loads(path.read_text())
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: dict, override: str) -> dict:
    """Set a dotted key, e.g. "training.budgets.reg_c=5" """
    if "=" not in override:
        raise ConfigError(f"Override must look like section.key=value: {override!r}")
    key, raw = override.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key} does not name a config key")
    node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = (), env: dict | None = None) -> RunConfig:
    load_dotenv()
    env = os.environ if env is None else env
    data = _read_file(path) if path else {}
    if env.get(OUTPUT_ROOT_ENV):
        data.setdefault("output", {})["root"] = env[OUTPUT_ROOT_ENV]
    for override in overrides:
        apply_override(data, override)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_effective_config(config: RunConfig, run_dir: str | Path | None = None) -> Path:
    run_dir = Path(run_dir) if run_dir is not None else config.output.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "effective_config.json"
    path.write_text(config.model_dump_json(indent=2))
    return path
