"""Run configuration models shared by the CLI, the runner, and the HTTP service."""

from __future__ import annotations

import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class TrainConfig(BaseModel):
    initial_lr: float = 0.1
    decay_epochs: list[int] = Field(default_factory=list)
    decay_factor: float = 0.1
    total_epochs: int = 100
    weight_decay: float = 0.0
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0
    augment: Literal["none", "crop", "crop+flip"] = "none"

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay_factor must be in (0, 1]")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.decay_epochs and self.decay_epochs[-1] >= self.total_epochs:
            raise ValueError("decay_epochs must be < total_epochs")
        return self


class PolicyConfig(BaseModel):
    objective: Literal[
        "accuracy_guaranteed", "memory_constrained", "flops_constrained", "multi"
    ] = "accuracy_guaranteed"
    acc_loss_target: Optional[float] = None
    param_target: Optional[float] = None
    flops_target: Optional[float] = None
    minimize_metric: Literal["params", "flops"] = "params"
    t0: float = 0.0
    lambda0: float = 0.01
    convergence_window: int = 3
    convergence_epsilon: float = 0.1
    rollback_retry_limit: int = 3
    rewind_epoch: Optional[int] = None  # default ceil(0.8 * total_epochs)
    max_rounds: int = 200

    @model_validator(mode="after")
    def _check(self) -> "PolicyConfig":
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be > 0")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")
        if self.rollback_retry_limit < 1:
            raise ValueError("rollback_retry_limit must be >= 1")
        if self.objective == "accuracy_guaranteed" and self.acc_loss_target is None:
            raise ValueError("acc_loss_target required for accuracy_guaranteed")
        if self.objective == "memory_constrained" and self.param_target is None:
            raise ValueError("param_target required for memory_constrained")
        if self.objective == "flops_constrained" and self.flops_target is None:
            raise ValueError("flops_target required for flops_constrained")
        if self.objective == "multi" and self.param_target is None and self.flops_target is None:
            raise ValueError("multi objective needs at least one reduction target")
        return self

    def effective_rewind_epoch(self, total_epochs: int) -> int:
        k = self.rewind_epoch if self.rewind_epoch is not None else math.ceil(0.8 * total_epochs)
        if not (0 < k < total_epochs):
            raise ValueError(f"rewind_epoch {k} out of range (0, {total_epochs})")
        return k


class AttentionConfig(BaseModel):
    function: Literal["mean", "max", "sum"] = "mean"
    power: float = 1.0
    batch_seed: int = 0
    batch_size: int = 256

    @model_validator(mode="after")
    def _check(self) -> "AttentionConfig":
        if self.power < 1:
            raise ValueError("power must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


class OracleSpec(BaseModel):
    curve: Literal["step", "logistic", "piecewise-linear"] = "step"
    plateau: float = 92.0
    knee: float = 80.0
    drop: float = 5.0
    slope: float = 0.5  # accuracy pct lost per reduction pct past the knee
    width: float = 2.0  # logistic transition width in reduction pct
    noise_std: float = 0.0
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "OracleSpec":
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not (0 <= self.knee <= 100):
            raise ValueError("knee must be in [0, 100]")
        return self


class SyntheticConfig(BaseModel):
    num_classes: int = 10
    n_train: int = 2048
    n_test: int = 512
    image_size: int = 16
    noise: float = 0.15


class RunConfig(BaseModel):
    model: Literal["lenet5", "lenet300", "smallconv"] = "smallconv"
    dataset: Literal["mnist", "synthetic"] = "synthetic"
    trainer: Literal["substrate", "oracle"] = "substrate"
    train: TrainConfig = Field(default_factory=TrainConfig)
    policy: PolicyConfig
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    oracle: Optional[OracleSpec] = None
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    data_dir: Optional[str] = None  # overridden by AAP_DATA_DIR when unset
    output_dir: str = "runs"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.trainer == "oracle" and self.oracle is None:
            raise ValueError("oracle spec required when trainer is 'oracle'")
        if self.model in ("lenet5", "lenet300") and self.dataset == "synthetic":
            # allowed, but synthetic images must match the 28x28 input
            if self.synthetic.image_size != 28:
                raise ValueError("lenet presets need synthetic.image_size == 28")
        return self
