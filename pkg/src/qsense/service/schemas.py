"""Pydantic request/response models for the quantization service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(StrictModel):
    """Descriptor resolved server-side into a concrete dataset."""

    kind: Literal["blobs", "noise", "manifest", "idx"]
    task_seed: Optional[int] = None
    sample_seed: Optional[int] = None
    n_per_class: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = None
    n: Optional[int] = Field(default=None, ge=1)
    num_classes: Optional[int] = Field(default=None, ge=2)
    input_shape: Optional[tuple[int, int, int]] = None
    preprocessing: Optional[dict] = None
    manifest: Optional[str] = None
    images: Optional[str] = None
    labels: Optional[str] = None

    def to_args(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class TrainRequest(StrictModel):
    out: str
    arch: Literal["mlp", "tiny_cnn"] = "tiny_cnn"
    seed: int = 3
    dataset: Optional[DatasetSpec] = None
    eval_dataset: Optional[DatasetSpec] = None
    epochs: Optional[int] = Field(default=None, ge=0)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    batch_size: Optional[int] = Field(default=None, ge=1)
    train_seed: Optional[int] = None


class TrainResponse(StrictModel):
    arch: str
    model: str
    blob: str
    init_seed: int
    train: dict
    eval_top1: float
    eval_top5: Optional[float]
    eval_task_loss: float


class GenerateRequest(StrictModel):
    out: str
    model: str
    seed: Optional[int] = None
    iterations: Optional[int] = Field(default=None, ge=1)
    lam: Optional[float] = Field(default=None, ge=0)
    learning_rate: float = Field(default=0.04, gt=0)
    samples_per_class: int = Field(default=1, ge=1)
    logit_term: Literal["maximize", "paper"] = "maximize"


class GenerateResponse(StrictModel):
    manifest: str
    images: str
    labels: str
    confidence_report: str
    match_rate: float
    ce_start: float
    ce_end: float
    samples: int


class CalibrateRequest(StrictModel):
    out: str
    model: str
    dataset: Optional[DatasetSpec] = None
    tag: Optional[str] = None


class CalibrateResponse(StrictModel):
    profile: str
    provenance: str
    max_abs: dict[str, float]


class QuantizeEvalRequest(StrictModel):
    out: str
    model: str
    profile: Optional[str] = None
    weight_bits: int = 8
    act_bits: int = 8
    eval_dataset: Optional[DatasetSpec] = None


class QuantizeEvalResponse(StrictModel):
    model: str
    calibration: str
    weight_bits: int
    act_bits: int
    top1: float
    top5: Optional[float]
    task_loss: float
    path: str


class SensitivityRequest(StrictModel):
    out: str
    model: str
    profile: str
    dataset: Optional[DatasetSpec] = None
    metrics: Optional[list[Literal["proposed", "l2", "kld", "hessian"]]] = None
    targets: Optional[list[Literal["weight", "activation"]]] = None
    bits: Optional[list[int]] = None
    probes: Optional[int] = Field(default=None, ge=1)
    seed: int = 0
    tag: Optional[str] = None


class SensitivityResponse(StrictModel):
    csv: str
    rows: int
    dataset: str


class SwitchingRequest(StrictModel):
    out: str
    model: str
    profile: str
    sens_dataset: Optional[DatasetSpec] = None
    eval_dataset: Optional[DatasetSpec] = None
    metrics: Optional[list[Literal["proposed", "l2", "kld", "hessian"]]] = None
    protocols: Optional[list[Literal["weights", "activations"]]] = None
    bits: Optional[int] = None
    probes: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


class SwitchingResponse(StrictModel):
    curves: list[str]
    auc_table: str
    relative: dict[str, str]


class ReportRequest(StrictModel):
    out: str


class ExperimentConfig(StrictModel):
    """Schema-versioned config file consumed by the CLI (``--config``)."""

    schema_version: Literal[1] = 1
    out: Optional[str] = None
    train: Optional[TrainRequest] = None
    generate: Optional[GenerateRequest] = None
    calibrate: Optional[CalibrateRequest] = None
    quantize_eval: Optional[QuantizeEvalRequest] = None
    sensitivity: Optional[SensitivityRequest] = None
    switching: Optional[SwitchingRequest] = None
