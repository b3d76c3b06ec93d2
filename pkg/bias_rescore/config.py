# stdlib
import logging
from pathlib import Path

# 3p
import yaml
from pydantic import BaseModel, ConfigDict, field_validator

# project
from bias_rescore.datagen import GenConfig
from bias_rescore.model import ModelConfig
from bias_rescore.rescoring import RescoreMode
from bias_rescore.training import TrainConfig


log = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"


class RescoreConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    modes: list[RescoreMode] = list(RescoreMode)
    # Weight of the first-pass score in the combined score.
    beta: float = 0.0
    few_shot_k: int = 2

    @field_validator("few_shot_k")
    @classmethod
    def _check_k(cls, k: int) -> int:
        if k < 0:
            raise ValueError("few_shot_k must be >= 0")
        return k


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Total entities per biasing list, split evenly across PER/LOC/ORG.
    lengths: list[int] = [3, 9, 18, 36, 60]
    modes: list[RescoreMode] = [RescoreMode.STATIC, RescoreMode.DYNAMIC]

    @field_validator("lengths")
    @classmethod
    def _check_lengths(cls, lengths: list[int]) -> list[int]:
        for length in lengths:
            if length < 1:
                raise ValueError(f"list lengths must be >= 1, got {length}")
        return lengths


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: str = "runs/default"
    gen: GenConfig = GenConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    rescoring: RescoreConfig = RescoreConfig()
    sweep: SweepConfig = SweepConfig()

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seed in the document set to `seed`."""
        return self.model_copy(
            update={
                "seed": seed,
                "gen": self.gen.model_copy(update={"seed": seed}),
                "model": self.model.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a YAML (or JSON) run config; no path gives the defaults."""
    if path is None:
        return RunConfig()
    if not Path(path).exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    config = RunConfig.model_validate(data)
    log.debug(f"Loaded config from {path}")
    return config


def write_resolved_config(config: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return path
