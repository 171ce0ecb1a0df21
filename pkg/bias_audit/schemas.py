"""
This module defines the Pydantic models that configure an audit and hold its results.

Classes:
    MetricToggles: Which metric stages run.
    ProbeSettings: Probe training and randomization test settings.
    MitigationSettings: Parameters of the mitigation techniques.
    DownstreamSettings: Dataset and finetuning settings of the extrinsic stage.
    AuditConfig: A complete audit run (one grid cell or a grid).
    ArtifactRecord: A cached artifact that a run created or reused.
    Provenance: Where the numbers of a report come from.
    StageFailureRecord: A stage that failed and why.
    AuditReport: Everything an audit run produced.
"""

from datetime import datetime
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from corpus import HARVEST_CAP, CoverageReport
from debias import CONTEXT_DEBIAS_ALPHA, CONTEXT_DEBIAS_BETA, SENT_DEBIAS_K, CdaSchedule, TrainingSchedule
from downstream import DatasetSchema, DownstreamConfig, ExtrinsicReport, Intervention
from intrinsic_metrics import DEFAULT_TEMPLATES_PATH, IntrinsicReport
from lexicon import DEFAULT_LEXICON_PATH
from probe import PROBE_TRAIN_FRACTION, RANDOMIZATION_ITERATIONS, ProbeConfig, ProbeReport

Mitigation = Literal["none", "sent_debias", "context_debias", "cda"]
ReportFormat = Literal["structured", "tabular", "plots"]

CORPUS_MITIGATIONS = ("sent_debias", "context_debias", "cda")


def _existing(path: Optional[Path]) -> Optional[Path]:
    if path is not None and not Path(path).exists():
        raise ValueError(f"path does not exist: {path}")
    return path


class MetricToggles(BaseModel):
    seat: bool = True
    attribute_lpbs: bool = True
    target_lpbs: bool = True
    probe: bool = True
    extrinsic: bool = True

    @property
    def needs_corpus(self) -> bool:
        return self.seat or self.probe

    @property
    def any_intrinsic(self) -> bool:
        return self.seat or self.attribute_lpbs or self.target_lpbs


class ProbeSettings(BaseModel):
    """
    Probe settings.

    Attributes:
        train_fraction (float): Share of attribute pairs used for training.
        iterations (int): Random splits of the randomization test.
        method (str): ``one_sample`` or ``prediction`` randomization test.
    """
    train_fraction: float = Field(default=PROBE_TRAIN_FRACTION, gt=0, lt=1)
    iterations: int = Field(default=RANDOMIZATION_ITERATIONS, ge=2)
    method: Literal["one_sample", "prediction"] = "prediction"
    training: ProbeConfig = ProbeConfig()


class MitigationSettings(BaseModel):
    sent_debias_k: int = Field(default=SENT_DEBIAS_K, ge=1)
    equalize: bool = False
    alpha: float = Field(default=CONTEXT_DEBIAS_ALPHA, ge=0)
    beta: float = Field(default=CONTEXT_DEBIAS_BETA, ge=0)
    layers: list[int] = []
    context_debias: TrainingSchedule = TrainingSchedule()
    cda: CdaSchedule = CdaSchedule()


class DownstreamSettings(BaseModel):
    """
    Extrinsic stage settings.

    Attributes:
        dataset_path (Path): Delimiter-separated dataset file.
        dataset_type (str): ``bias_in_bios`` or ``jigsaw``.
        dataset_schema (DatasetSchema): Column mapping; the dataset type's default when omitted.
        intervention: One intervention or, for a grid, a list of them.
    """
    dataset_path: Path
    dataset_type: Literal["bias_in_bios", "jigsaw"]
    dataset_schema: Optional[DatasetSchema] = None
    intervention: Union[Intervention, list[Intervention]] = "default"
    folds: int = DownstreamConfig().folds
    epochs: int = DownstreamConfig().epochs
    learning_rate: float = DownstreamConfig().learning_rate
    max_seq_len: int = DownstreamConfig().max_seq_len
    batch_size: int = DownstreamConfig().batch_size
    use_names: bool = True
    write_predictions: bool = True

    @field_validator("dataset_path")
    @classmethod
    def dataset_exists(cls, value: Path) -> Path:
        return _existing(value)

    @property
    def interventions(self) -> list[str]:
        return list(self.intervention) if isinstance(self.intervention, list) else [self.intervention]


class AuditConfig(BaseModel):
    """
    Configuration of an audit.

    A config whose ``mitigation`` or ``downstream.intervention`` is a list
    describes a grid; ``audit.expand_grid`` turns it into one config per cell.
    """
    model: str = "bert-large-uncased"
    model_options: dict = {}
    lexicon_path: Path = Path(DEFAULT_LEXICON_PATH)
    corpus_path: Optional[Path] = None
    templates_path: Path = Path(DEFAULT_TEMPLATES_PATH)
    mitigation: Union[Mitigation, list[Mitigation]] = "none"
    mitigation_settings: MitigationSettings = MitigationSettings()
    downstream: Optional[DownstreamSettings] = None
    metrics: MetricToggles = MetricToggles()
    probe: ProbeSettings = ProbeSettings()
    seed: int = 0
    harvest_cap: int = Field(default=HARVEST_CAP, ge=1)
    output_dir: Path = Path("audit_output")
    formats: list[ReportFormat] = ["structured", "tabular", "plots"]

    @field_validator("lexicon_path", "corpus_path", "templates_path")
    @classmethod
    def paths_exist(cls, value: Optional[Path]) -> Optional[Path]:
        return _existing(value)

    @field_validator("mitigation")
    @classmethod
    def mitigations_nonempty(cls, value):
        if isinstance(value, list) and not value:
            raise ValueError("at least one mitigation must be listed")
        return value

    @model_validator(mode="after")
    def check_stages(self):
        if self.corpus_path is None:
            if self.metrics.needs_corpus:
                raise ValueError("SEAT and the probe need corpus_path")
            if any(m in CORPUS_MITIGATIONS for m in self.mitigations):
                raise ValueError("sent_debias, context_debias and cda need corpus_path")
        if self.metrics.extrinsic and self.downstream is None:
            raise ValueError("the extrinsic stage needs a downstream section")
        if self.downstream is not None and not self.downstream.interventions:
            raise ValueError("at least one intervention must be listed")
        return self

    @property
    def mitigations(self) -> list[str]:
        return list(self.mitigation) if isinstance(self.mitigation, list) else [self.mitigation]

    @property
    def is_grid(self) -> bool:
        interventions = self.downstream.interventions if self.downstream else ["default"]
        return len(self.mitigations) * len(interventions) > 1

    @property
    def intervention(self) -> str:
        return self.downstream.interventions[0] if self.downstream else "default"


class ArtifactRecord(BaseModel):
    kind: str
    key: str
    path: str
    created_at: datetime
    reused: bool


class Provenance(BaseModel):
    """
    Traceability block of a report.

    Attributes:
        config_hash (str): SHA-256 of the canonical config document.
        cell (dict[str, str]): Mitigation and intervention of this grid cell.
        versions (dict[str, str]): Versions of the numerical packages.
        corpus_hash (str): Hash of the corpus, when one was used.
        artifacts (list[ArtifactRecord]): Cached artifacts created or reused.
        wall_clock_seconds (float): Duration of the run.
    """
    config_hash: str
    cell: dict[str, str]
    model: str
    seed: int
    versions: dict[str, str] = {}
    corpus_hash: Optional[str] = None
    lexicon_hash: Optional[str] = None
    started_at: datetime
    finished_at: Optional[datetime] = None
    wall_clock_seconds: Optional[float] = None
    artifacts: list[ArtifactRecord] = []


class StageFailureRecord(BaseModel):
    stage: str
    error: str
    detail: str
    exit_code: int


class AuditReport(BaseModel):
    """
    Result of one audit grid cell. Sections of stages that did not run are ``None``.
    """
    provenance: Provenance
    coverage: Optional[CoverageReport] = None
    intrinsic: Optional[IntrinsicReport] = None
    probe: Optional[ProbeReport] = None
    extrinsic: Optional[ExtrinsicReport] = None
    failures: list[StageFailureRecord] = []

    @property
    def failed(self) -> bool:
        return bool(self.failures)
