"""Request/response schemas for the service endpoints.

Requests carry server-local paths (the service is a local-first tool; with the
in-process transport used by the CLI, "server-local" is simply local).
Defaults mirror the package configuration defaults.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    out_dir: str
    sites: int = Field(default=60, ge=1)
    per_site: int = Field(default=4, ge=1)
    spacing: float = Field(default=120.0, gt=0)
    spread: float = Field(default=3.0, ge=0)
    points: int = Field(default=1024, ge=1)
    seed: int = 0


class SynthResponse(BaseModel):
    manifest_path: str
    num_records: int


class EpochStatsModel(BaseModel):
    epoch: int
    mean_loss: float | None
    extra: float | None  # queue size (pretrain) or active fraction (finetune)


class PretrainRequest(BaseModel):
    data_dir: str
    out_ckpt: str
    epochs: int = Field(default=12, ge=0)
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.03, ge=0)
    momentum: float = Field(default=0.999, ge=0, le=1)
    queue_capacity: int = Field(default=2048, ge=1)
    num_negatives: int = Field(default=256, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    include_positive_in_denominator: bool = False
    seed: int = 0
    widths: list[int] = Field(default=[3, 64, 128, 256])
    jitter_sigma: float = Field(default=0.01, ge=0)
    jitter_clip: float = Field(default=0.05, ge=0)
    point_removal_fraction: float = Field(default=0.3, ge=0, lt=1)
    block_extent: float = Field(default=0.4, ge=0)
    shear_max: float = Field(default=0.2, ge=0)
    stats_out: str | None = None


class TrainRequest(BaseModel):
    data_dir: str
    out_ckpt: str
    init: str = "random"  # "random" or a checkpoint path
    epochs: int = Field(default=8, ge=0)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0)
    margin: float = Field(default=0.2, gt=0)
    lr_decay_factor: float = Field(default=10.0, gt=0)
    lr_decay_epoch: int = Field(default=30, ge=1)
    num_pos_candidates: int = Field(default=2, ge=1)
    num_neg_candidates: int = Field(default=8, ge=1)
    pos_threshold: float = Field(default=10.0, gt=0)
    neg_threshold: float = Field(default=50.0, gt=0)
    seed: int = 0
    widths: list[int] = Field(default=[3, 64, 128, 256])
    stats_out: str | None = None


class TrainResponse(BaseModel):
    ckpt_path: str
    stats: list[EpochStatsModel]
    stats_path: str | None = None


class EmbedRequest(BaseModel):
    ckpt: str
    data_dir: str
    out_path: str
    origin: str = "database"


class EmbedResponse(BaseModel):
    out_path: str
    count: int
    dim: int


class EnhanceRequest(BaseModel):
    train_path: str
    database_path: str
    queries_path: str
    out_database: str
    out_queries: str
    lam: float = Field(default=0.2, ge=0, le=1, alias="lambda")
    neighbors: int = Field(default=5, ge=1)
    mode: str = Field(default="inductive", pattern="^(inductive|transductive)$")
    enhance_queries: bool = True
    enhance_database: bool = True

    model_config = {"populate_by_name": True}


class EnhanceResponse(BaseModel):
    out_database: str
    out_queries: str


class EvalRequest(BaseModel):
    database_path: str
    queries_path: str
    match_radius: float = Field(default=25.0, gt=0)
    report_out: str | None = None


class EvalResponse(BaseModel):
    recall_top1: float
    recall_top1pct: float
    num_queries_evaluated: int
    database_size: int
    top1pct_cutoff: int
    report_path: str | None = None


class PipelineRequest(BaseModel):
    out_dir: str
    config_text: str | None = None
    overrides: dict[str, str] = Field(default_factory=dict)
    seed: int | None = None
    skip_pretrain: bool | None = None


class ReportSummary(BaseModel):
    recall_top1: float
    recall_top1pct: float
    num_queries_evaluated: int
    path: str


class PipelineResponse(BaseModel):
    out_dir: str
    reports: dict[str, ReportSummary]


class HealthResponse(BaseModel):
    status: str
    version: str


class DefaultsResponse(BaseModel):
    config: str
