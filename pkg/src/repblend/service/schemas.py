"""Pydantic request / response models for the HTTP service.

The experiment config models mirror the core dataclasses field for field;
``to_config`` converts a request into the dataclass form the harness
consumes.  Paths in requests may be relative, in which case the service
resolves them against the output root (``REPBLEND_OUTPUT_ROOT``).
"""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import ExperimentConfig, config_from_dict


class SceneModel(BaseModel):
    num_categories: int = 12
    image_size: tuple[int, int] = (64, 64)
    objects_per_image: tuple[int, int] = (1, 4)
    clutter: float = 0.3
    seed: int = 0


class DatasetModel(BaseModel):
    kind: str = "synthetic"
    scene: SceneModel = Field(default_factory=SceneModel)
    n_train: int = 2000
    n_test: int = 500
    train_dir: str | None = None
    test_dir: str | None = None
    known_labels_csv: str | None = None


class OptimizerModel(BaseModel):
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 12
    decay_every: int = 0
    decay_factor: float = 0.1


class LossModel(BaseModel):
    contrastive_weight: float = 0.05
    blend_start_epoch: int = 5
    prototype_refresh_period: int = 5


class BackboneModel(BaseModel):
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    stage_kernels: tuple[int, ...] = (3, 3, 3, 2)
    stage_strides: tuple[int, ...] = (2, 2, 2, 1)
    normalization: str = "group"
    activation: str = "relu"
    freeze_stages: int = 0
    weights_path: str | None = None


class TogglesModel(BaseModel):
    instance_blend: bool = True
    prototype_blend: bool = True
    contrastive: bool = True
    vector_blend: bool = False


class ExperimentConfigModel(BaseModel):
    dataset: DatasetModel = Field(default_factory=DatasetModel)
    proportions: tuple[float, ...] = (0.5,)
    optimizer: OptimizerModel = Field(default_factory=OptimizerModel)
    loss: LossModel = Field(default_factory=LossModel)
    backbone: BackboneModel = Field(default_factory=BackboneModel)
    toggles: TogglesModel = Field(default_factory=TogglesModel)
    embedding_dim: int = 64
    joint_dim: int = 64
    pool_mode: str = "sum"
    propagation_steps: int = 3
    adjacency: str = "uniform"
    grid_level: int = 1
    base_seed: int = 0
    checkpoint_every: int = 0
    embeddings_path: str | None = None

    def to_config(self) -> ExperimentConfig:
        return config_from_dict(self.model_dump())


class GenerateRequest(BaseModel):
    output_dir: str
    scene: SceneModel = Field(default_factory=SceneModel)
    n_train: int = 2000
    n_test: int = 500


class SplitInfo(BaseModel):
    directory: str
    labels_csv: str
    n_images: int
    positives_per_category: list[int]


class GenerateResponse(BaseModel):
    train: SplitInfo
    test: SplitInfo


class PrepareRequest(BaseModel):
    labels_csv: str
    proportions: tuple[float, ...]
    seed: int = 0
    rounding: str = "nearest"
    output_dir: str


class PreparedSplit(BaseModel):
    proportion: float
    path: str
    known_per_image: int


class PrepareResponse(BaseModel):
    splits: list[PreparedSplit]


class TrainRequest(BaseModel):
    config: ExperimentConfigModel = Field(default_factory=ExperimentConfigModel)
    output_dir: str
    resume_from: str | None = None


class TrainResponse(BaseModel):
    checkpoint: str
    trace: str
    final_epoch: int
    bank_epochs: list[int]
    duration_seconds: float
    final_cls_loss: float | None = None
    final_contrastive_loss: float | None = None


class EvaluateRequest(BaseModel):
    checkpoint: str
    # optional override of the test source; defaults to the checkpoint's config
    dataset: DatasetModel | None = None
    proportion: float = 1.0
    threshold: float = 0.5


class EvalReportModel(BaseModel):
    proportion: float
    mAP: float
    OF1: float
    CF1: float
    per_category_ap: list[float | None]
    loss_trace: str | None = None


class SweepRequest(BaseModel):
    config: ExperimentConfigModel = Field(default_factory=ExperimentConfigModel)
    output_dir: str
    ablation: bool = False


class SweepResponse(BaseModel):
    reports: list[EvalReportModel]
    average: EvalReportModel | None = None
    report_csv: str | None = None
    report_json: str | None = None
    rows: dict[str, EvalReportModel] | None = None  # ablation variant -> report


class ReportRequest(BaseModel):
    report_json: str
    format: str = "csv"  # "csv" | "table"


class ReportResponse(BaseModel):
    rendered: str
    path: str | None = None


class HealthResponse(BaseModel):
    status: str
    version: str
    output_root: str
