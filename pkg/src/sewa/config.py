"""JSON experiment configuration. Unknown keys are rejected."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .masking import ConstantTemperature, GeometricTemperature, GsConfig
from .nn import MlpSpec
from .trajectory import ConstantLR, CosineLR, SgdConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BlobsData(_Strict):
    kind: Literal["blobs"]
    n: int = Field(gt=1)
    p: int = Field(ge=1)
    classes: int = Field(ge=2)
    noise: float = Field(ge=0)
    seed: int = 0


class SpiralsData(_Strict):
    kind: Literal["spirals"]
    n: int = Field(gt=1)
    noise: float = Field(ge=0)
    seed: int = 0


class CsvData(_Strict):
    kind: Literal["csv"]
    path: str
    label_column: str
    seed: int = 0

    @model_validator(mode="after")
    def _exists(self):
        if not Path(self.path).is_file():
            raise ValueError(f"dataset file {self.path!r} does not exist")
        return self


DatasetConfig = Annotated[Union[BlobsData, SpiralsData, CsvData], Field(discriminator="kind")]


class ModelConfig(_Strict):
    layer_sizes: list[int] = Field(min_length=2)
    activation: Literal["relu", "tanh", "identity"] = "relu"
    loss_kind: Literal["cross_entropy_softmax", "mse", "logistic_binary"] = "cross_entropy_softmax"

    def spec(self) -> MlpSpec:
        return MlpSpec(tuple(self.layer_sizes), self.activation, self.loss_kind)


class LrConfig(_Strict):
    kind: Literal["constant", "cosine"] = "constant"
    alpha: float = Field(ge=0)
    alpha_min: float = 0.0
    start_step: int = 0

    def schedule(self) -> ConstantLR | CosineLR:
        if self.kind == "constant":
            return ConstantLR(self.alpha)
        return CosineLR(self.alpha, self.alpha_min, self.start_step)


class TrainConfig(_Strict):
    steps: int = Field(ge=1)
    lr: LrConfig
    batch_size: int = Field(default=1, ge=1)
    capture_every: int = Field(default=1, ge=1)

    def sgd(self, seed: int) -> SgdConfig:
        return SgdConfig(self.steps, self.lr.schedule(), self.batch_size, seed, self.capture_every)


class GsSettings(_Strict):
    temperature: Literal["geometric", "constant"] = "geometric"
    t0: float = Field(default=1.0, gt=0)
    t_min: float = Field(default=0.1, gt=0)
    factor: float = Field(default=0.95, gt=0, le=1)
    M: int = Field(default=8, ge=1)
    step_size: float = Field(default=0.5, gt=0)
    iterations: int = Field(default=200, ge=1)
    eval_batch: Optional[int] = Field(default=None, ge=1)
    output: Literal["topk", "bernoulli"] = "topk"
    objective: Literal["val", "train"] = "val"

    def gs(self, K: int, seed: int) -> GsConfig:
        if self.temperature == "constant":
            temp = ConstantTemperature(self.t0)
        else:
            temp = GeometricTemperature(self.t0, self.t_min, self.factor)
        return GsConfig(K, temp, self.M, self.step_size, self.iterations, seed, self.eval_batch, output=self.output)


class MethodConfig(_Strict):
    name: Literal["sgd_final", "uniform", "swa", "ema", "lawa", "random", "sewa"]
    K: Optional[int] = Field(default=None, ge=1)
    decay: float = Field(default=0.9, ge=0, lt=1)
    every: int = Field(default=1, ge=1)
    start_fraction: float = Field(default=0.75, ge=0, le=1)
    draws: int = Field(default=1, ge=1)
    gs: GsSettings = GsSettings()

    @model_validator(mode="after")
    def _needs_budget(self):
        if self.name in ("lawa", "random", "sewa") and self.K is None:
            raise ValueError(f"method {self.name!r} needs a budget K")
        return self


class ExperimentConfig(_Strict):
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    window_k: int = Field(ge=1)
    methods: list[MethodConfig] = Field(min_length=1)
    seeds: list[int] = Field(min_length=1)
    output_dir: str = "results"
    val_fraction: float = Field(default=0.2, ge=0, lt=1)
    workers: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        captures = self.train.steps // self.train.capture_every
        if self.train.steps % self.train.capture_every:
            captures += 1
        if self.window_k > captures:
            raise ValueError(f"window_k={self.window_k} exceeds the {captures} captured checkpoints")
        for m in self.methods:
            if m.K is not None and m.K > self.window_k:
                raise ValueError(f"method {m.name!r}: K={m.K} exceeds window_k={self.window_k}")
            if m.name == "sewa" and m.gs.objective == "val" and self.val_fraction == 0:
                raise ValueError("sewa with a validation objective needs val_fraction > 0")
        keys = [(m.name, m.K) for m in self.methods]
        if len(set(keys)) != len(keys):
            raise ValueError("methods must be unique by (name, K)")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        self.model.spec()
        return self


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config; raises :class:`ConfigError`."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, str(path))


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


class ProbeConfig(_Strict):
    """Settings for ``sewa probe``; unused fields are ignored by the other probe kind."""

    problem: Literal["quadratic", "logistic", "mlp"] = "logistic"
    beta: float = Field(default=1.0, gt=0)
    dim: int = Field(default=10, ge=1)
    dataset: Optional[DatasetConfig] = None
    model: Optional[ModelConfig] = None
    alpha: Optional[float] = Field(default=None, gt=0)
    steps: int = Field(default=1000, ge=1)
    k: int = Field(default=50, ge=1)
    perturb_index: int = Field(default=0, ge=0)
    batch_size: int = Field(default=1, ge=1)
    seeds: list[int] = Field(default=[0], min_length=1)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _needs_data(self):
        if self.problem in ("logistic", "mlp") and self.dataset is None:
            raise ValueError(f"problem {self.problem!r} needs a dataset")
        if self.problem == "mlp" and self.model is None:
            raise ValueError("problem 'mlp' needs a model")
        return self


def load_probe_config(path) -> ProbeConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return ProbeConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
