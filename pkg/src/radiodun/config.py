"""Configuration models for datasets, training runs and the classical baseline.

A config file is a YAML (or JSON) tree with optional top-level sections
``dataset``, ``run`` and ``baseline`` whose keys mirror the field names below.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .net.model import ModelConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorConfig(_Strict):
    height: int = Field(64, ge=2)
    width: int = Field(64, ge=2)
    m: int = Field(2, ge=1)
    alpha: float = Field(2.0, ge=0)
    eta: float = 20.0
    sigma_delta: float = Field(0.3, ge=0)
    tx_strength: float = 0.0
    tx_per_scene: int = Field(1, ge=1)
    n_buildings: tuple[int, int] = (4, 9)
    building_size: tuple[int, int] = (3, 12)
    n_cars: tuple[int, int] = (4, 12)


class SyntheticSource(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    count: int = Field(100, ge=1)
    generator: GeneratorConfig = GeneratorConfig()


class RadioMapSeerSource(_Strict):
    kind: Literal["radiomapseer"] = "radiomapseer"
    root: str
    variant: Literal["DPM", "IRT4"] = "DPM"


class SceneDirSource(_Strict):
    """A tree written by the ``synth`` subcommand."""

    kind: Literal["scene_dir"] = "scene_dir"
    path: str


Source = Annotated[Union[SyntheticSource, RadioMapSeerSource, SceneDirSource], Field(discriminator="kind")]


class DatasetSpec(_Strict):
    source: Source = SyntheticSource()
    name: str | None = None
    split_ratios: tuple[float, float, float] = (0.75, 0.05, 0.2)
    seed: int = 0
    samples_per_map: int = Field(9, ge=1)
    sampling_kind: Literal["grid", "uniform_random"] = "grid"
    tx_known: bool = False
    train_subset_size: int | None = Field(None, ge=1)
    noise_sigma: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _ratios(self):
        if any(r < 0 for r in self.split_ratios):
            raise ValueError("split ratios must be non-negative")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.split_ratios)}")
        return self

    @property
    def dataset_id(self) -> str:
        if self.name:
            return self.name
        src = self.source
        if isinstance(src, RadioMapSeerSource):
            return f"radiomapseer-{src.variant}"
        if isinstance(src, SceneDirSource):
            return f"scenes:{Path(src.path).name}"
        return f"synthetic-{src.generator.height}x{src.generator.width}"


class OptimizerConfig(_Strict):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    schedule: Literal["cosine", "constant"] = "cosine"


class TransferConfig(_Strict):
    source_checkpoint: str
    fraction: float = Field(0.3, ge=0, le=1)
    epochs: int = Field(20, ge=1)


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    max_steps: int | None = Field(None, ge=1)
    mu: float = Field(1.0, ge=0)
    use_shadow_loss: bool = True
    seed: int = 0
    eval_train_each_epoch: bool = True
    transfer: TransferConfig | None = None


class BaselineConfig(_Strict):
    beta: list[float] = [0.5]
    epsilon: float = Field(1e-4, ge=0)
    max_iters: int = Field(200, ge=1)
    tol: float = Field(1e-6, ge=0)
    prior: Literal["none", "total_variation"] = "none"
    tv_weight: float = Field(0.05, ge=0)

    @model_validator(mode="after")
    def _positive_beta(self):
        if not self.beta or any(b <= 0 for b in self.beta):
            raise ValueError("beta entries must be > 0")
        return self


class AppConfig(_Strict):
    dataset: DatasetSpec = DatasetSpec()
    run: RunConfig = RunConfig()
    baseline: BaselineConfig = BaselineConfig()


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one human-readable line per problem."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))


def _format(err: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{dotted}: cannot descend into non-mapping {k!r}"])
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError([f"override {item!r} must look like key.path=value"])
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides: dict | None = None) -> AppConfig:
    """Read a config file, apply dotted-path overrides and validate everything at once."""
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {p}"])
        loaded = yaml.safe_load(p.read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(["config root must be a mapping"])
        tree = loaded or {}
    for key, value in (overrides or {}).items():
        _set_path(tree, key, value)
    source = tree.get("dataset", {}).get("source") if isinstance(tree.get("dataset"), dict) else None
    if isinstance(source, dict):
        # the source kind may be omitted; it defaults to synthetic like the field itself
        source.setdefault("kind", "synthetic")
    try:
        return AppConfig.model_validate(tree)
    except ValidationError as err:
        raise ConfigError(_format(err)) from None
