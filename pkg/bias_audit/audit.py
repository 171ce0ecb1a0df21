"""
Module orchestrating complete audits.

A run loads the lexicon and the model, harvests sentences, applies the
configured mitigation, and executes the enabled metric stages. Embedding
banks, bias subspaces and retrained weights are cached on disk and tracked
in the artifact registry, keyed by everything they depend on. A failing
stage ends the run with a partial report that records the failure.
"""

import hashlib
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import ValidationError
from sqlalchemy.exc import IntegrityError

import database
from corpus import (
    BankMetadata,
    build_embedding_bank,
    corpus_hash,
    coverage_report,
    harvest_sentences,
    load_bank,
    save_bank,
)
from debias import (
    BiasSubspace,
    ContextDebiasConfig,
    apply_sent_debias,
    compute_bias_subspace,
    debias_bank,
    definition_pairs,
    equalize_bank,
    load_subspace,
    run_cda_pretraining,
    run_context_debias,
    save_subspace,
)
from downstream import BIOS_SCHEMA, JIGSAW_SCHEMA, DownstreamConfig, ingest_bias_in_bios, ingest_jigsaw, run_downstream_eval
from exceptions import AuditError, ConfigurationError, InsufficientDataError
from intrinsic_metrics import IntrinsicReport, attribute_lpbs, load_templates, seat_test, target_lpbs
from lexicon import Lexicon, load_lexicon, restrict, split_attribute_terms
from model_adapter import ModelHandle, load_model, load_weights, save_weights
from models import AuditRun, Base, CachedArtifact, utcnow
from probe import run_probe
from report import emit_report, ensure_writable
from schemas import ArtifactRecord, AuditConfig, AuditReport, Provenance, StageFailureRecord

logger = logging.getLogger(__name__)

SEED_STREAMS = ("harvest", "split", "probe", "folds", "randomization", "mitigation")
VERSIONED_PACKAGES = ("numpy", "scipy", "scikit-learn", "torch", "transformers", "pandas", "pydantic")


def derive_seed(root: int, stream: str) -> int:
    """Independent 32-bit seed of a named stream under the root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(stream.encode("utf-8"))]).generate_state(1)[0])


def _digest(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def file_hash(path) -> Optional[str]:
    return corpus_hash(path) if path is not None else None


def config_hash(audit_config: AuditConfig) -> str:
    """SHA-256 of the canonical config document, output location excluded."""
    document = audit_config.model_dump(mode="json", exclude={"output_dir", "formats"})
    return _digest(document)


def load_config(path, overrides: dict = None) -> AuditConfig:
    """
    Reads an audit config from a JSON document.

    Relative paths inside the document are resolved against its directory.

    Raises:
        ConfigurationError: If the file cannot be read or parsed.
        ValidationError: If the config is invalid.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")

    def resolve(value):
        return str(path.parent / value) if value is not None and not Path(value).is_absolute() else value

    for key in ("lexicon_path", "corpus_path", "templates_path", "output_dir"):
        if key in data:
            data[key] = resolve(data[key])
    if isinstance(data.get("downstream"), dict) and "dataset_path" in data["downstream"]:
        data["downstream"]["dataset_path"] = resolve(data["downstream"]["dataset_path"])
    data.update(overrides or {})
    return AuditConfig.model_validate(data)


def expand_grid(audit_config: AuditConfig) -> list[AuditConfig]:
    """
    One config per (mitigation, intervention) cell.

    Cells of a grid write into ``<output_dir>/<mitigation>-<intervention>``.
    """
    interventions = audit_config.downstream.interventions if audit_config.downstream else ["default"]
    cells = []
    for mitigation in audit_config.mitigations:
        for intervention in interventions:
            update = {"mitigation": mitigation}
            if audit_config.downstream:
                update["downstream"] = audit_config.downstream.model_copy(update={"intervention": intervention})
            if audit_config.is_grid:
                update["output_dir"] = audit_config.output_dir / f"{mitigation}-{intervention}"
            cells.append(audit_config.model_copy(update=update))
    return cells


def package_versions() -> dict[str, str]:
    versions = {}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            continue
    return versions


class ArtifactCache:
    """
    Disk cache of audit artifacts, indexed in the registry database.

    Attributes:
        directory (Path): Where artifact files are written.
        records (list[ArtifactRecord]): Artifacts created or reused through this cache.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory or database.CACHE_DIR)
        self.records = []
        Base.metadata.create_all(bind=database.engine)

    def path_for(self, kind: str, key: str) -> Path:
        return self.directory / kind / key[:2] / key

    def fetch(self, kind: str, key: str, loader: Callable, builder: Callable, saver: Callable):
        """
        Returns the cached artifact of ``key`` or builds, saves and registers it.

        Args:
            kind (str): Artifact kind.
            key (str): Content key.
            loader (Callable): ``loader(path)`` reads a cached artifact.
            builder (Callable): ``builder()`` creates the artifact.
            saver (Callable): ``saver(artifact, path)`` writes it.
        """
        with database.session_scope() as db:
            entry = db.query(CachedArtifact).filter(CachedArtifact.key == key).first()
            if entry is not None:
                try:
                    artifact = loader(Path(entry.path))
                except (OSError, ValueError, AuditError) as e:
                    logger.warning("Cached %s %s is unreadable (%s); rebuilding", kind, key[:12], e)
                    db.delete(entry)
                    db.commit()
                else:
                    entry.last_used_at = utcnow()
                    db.commit()
                    self.records.append(ArtifactRecord(kind=kind, key=key, path=entry.path,
                                                       created_at=entry.created_at, reused=True))
                    logger.info("Reusing cached %s %s", kind, key[:12])
                    return artifact

        artifact = builder()
        path = self.path_for(kind, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        saver(artifact, path)
        with database.session_scope() as db:
            entry = CachedArtifact(kind=kind, key=key, path=str(path))
            db.add(entry)
            try:
                db.commit()
            except IntegrityError:
                # another grid cell registered the same key first
                db.rollback()
                entry = db.query(CachedArtifact).filter(CachedArtifact.key == key).one()
            else:
                db.refresh(entry)
            self.records.append(ArtifactRecord(kind=kind, key=key, path=str(path),
                                               created_at=entry.created_at, reused=False))
        return artifact


class StageAborted(Exception):
    pass


@contextmanager
def stage(report: AuditReport, name: str):
    """Records an ``AuditError`` raised inside as a failure of stage ``name`` and aborts the run."""
    logger.info("Stage %s started", name)
    try:
        yield
    except AuditError as e:
        logger.error("Stage %s failed: %s", name, e.detail)
        report.failures.append(StageFailureRecord(stage=name, error=type(e).__name__, detail=e.detail,
                                                  exit_code=e.exit_code))
        raise StageAborted(name)


class AuditRunner:
    """
    Executes the stages of one grid cell.

    Args:
        audit_config (AuditConfig): A single-cell config.
        cache (ArtifactCache): Artifact cache shared by the cells of a run.
        progress (bool): Whether to show progress bars.
    """

    def __init__(self, audit_config: AuditConfig, cache: ArtifactCache, progress: bool = False):
        if audit_config.is_grid:
            raise ConfigurationError("run_audit expects a single grid cell; use expand_grid first")
        self.config = audit_config
        self.cache = cache
        self.progress = progress
        self.mitigation = audit_config.mitigations[0]
        self.seeds = {name: derive_seed(audit_config.seed, name) for name in SEED_STREAMS}
        self.corpus_hash = file_hash(audit_config.corpus_path)
        self.lexicon_hash = file_hash(audit_config.lexicon_path)
        self.lexicon: Optional[Lexicon] = None
        self.base_model: Optional[ModelHandle] = None
        self.model: Optional[ModelHandle] = None
        self.model_key = ""
        self.subspace: Optional[BiasSubspace] = None
        self.attribute_sentences = []
        self.stereotype_sentences = []

    def _key(self, kind: str, *parts) -> str:
        return _digest(kind, self.config.model, self.config.model_options, self.lexicon_hash, self.corpus_hash,
                       self.config.harvest_cap, self.seeds["harvest"], *parts)

    def _reloader(self, suffix: str) -> Callable[[Path], ModelHandle]:
        def reload(path: Path) -> ModelHandle:
            model = load_weights(self.base_model, path)
            model.identifier = f"{self.base_model.identifier}+{suffix}"
            return model

        return reload

    def load_inputs(self) -> None:
        self.lexicon = load_lexicon(self.config.lexicon_path)
        self.base_model = load_model(self.config.model, self.config.model_options)
        self.model = self.base_model
        self.model_key = self._key("model")

    def harvest(self, report: AuditReport) -> None:
        lexicon = self.lexicon
        seed = self.seeds["harvest"]
        self.attribute_sentences = harvest_sentences(self.config.corpus_path, lexicon.attribute_terms,
                                                     lexicon.stereotypes, self.config.harvest_cap, seed)
        self.stereotype_sentences = harvest_sentences(self.config.corpus_path, lexicon.stereotypes,
                                                      lexicon.attribute_terms, self.config.harvest_cap, seed)
        report.coverage = coverage_report(self.attribute_sentences + self.stereotype_sentences,
                                          lexicon.attribute_terms | lexicon.stereotypes)

    def mitigate(self) -> None:
        settings = self.config.mitigation_settings
        seed = self.seeds["mitigation"]
        if self.mitigation == "sent_debias":
            key = self._key("subspace", settings.sent_debias_k)
            sentences = sorted({o.sentence for o in self.attribute_sentences})

            def build() -> BiasSubspace:
                pairs = definition_pairs(self.base_model, sentences, self.lexicon)
                subspace = compute_bias_subspace(pairs, settings.sent_debias_k)
                return subspace.model_copy(update={"model_id": self.config.model, "corpus_hash": self.corpus_hash or ""})

            self.subspace = self.cache.fetch("subspace", key, load_subspace, build, save_subspace)
            self.model = apply_sent_debias(self.base_model, self.subspace)
        elif self.mitigation == "context_debias":
            restricted = restrict(self.lexicon, self.base_model.is_single_piece)
            debias_config = ContextDebiasConfig(alpha=settings.alpha, beta=settings.beta, layer_set=settings.layers)
            schedule = settings.context_debias.model_copy(update={"seed": seed, "progress": self.progress})
            self.model_key = self._key("context_debias", debias_config.model_dump(exclude={"attribute_vectors"}),
                                       schedule.model_dump(exclude={"progress"}))
            self.model = self.cache.fetch(
                "weights", self.model_key,
                self._reloader("context-debias"),
                lambda: run_context_debias(self.base_model, restricted, self.attribute_sentences,
                                           self.stereotype_sentences, debias_config, schedule),
                save_weights,
            )
        elif self.mitigation == "cda":
            schedule = settings.cda.model_copy(update={"seed": seed, "progress": self.progress})
            self.model_key = self._key("cda", schedule.model_dump(exclude={"progress"}))
            with open(self.config.corpus_path, encoding="utf-8") as handle:
                lines = handle.read().splitlines()
            self.model = self.cache.fetch(
                "weights", self.model_key,
                self._reloader("cda"),
                lambda: run_cda_pretraining(self.base_model, lines, self.lexicon, schedule),
                save_weights,
            )

    def embedding_bank(self):
        occurrences = self.attribute_sentences + self.stereotype_sentences
        bank_metadata = BankMetadata(corpus_hash=self.corpus_hash or "", cap=self.config.harvest_cap,
                                     seed=self.seeds["harvest"])
        # Sent-debias projects the bank of the unmitigated model
        source = self.base_model if self.mitigation == "sent_debias" else self.model
        source_key = self._key("model") if self.mitigation == "sent_debias" else self.model_key
        bank = self.cache.fetch(
            "bank", _digest("bank", source_key),
            load_bank,
            lambda: build_embedding_bank(source, occurrences, bank_metadata, self.progress),
            save_bank,
        )
        if self.subspace is not None:
            if self.config.mitigation_settings.equalize:
                bank = equalize_bank(bank, self.lexicon, self.subspace)
            bank = debias_bank(bank, self.subspace)
        return bank

    def covered_lexicon(self, bank) -> Lexicon:
        covered = restrict(self.lexicon, lambda word: word in bank)
        if not covered.female_terms or not covered.male_terms or not covered.stereotypes_female \
                or not covered.stereotypes_male:
            raise InsufficientDataError("the embedding bank does not cover every attribute and stereotype set")
        return covered

    def intrinsic(self, report: AuditReport, bank) -> None:
        toggles = self.config.metrics
        report.intrinsic = IntrinsicReport()
        if toggles.seat:
            report.intrinsic.seat = seat_test(bank, self.covered_lexicon(bank))
        if toggles.attribute_lpbs or toggles.target_lpbs:
            templates = load_templates(self.config.templates_path)
            single_piece = restrict(self.lexicon, self.model.is_single_piece)
            if toggles.attribute_lpbs:
                report.intrinsic.attribute_lpbs = attribute_lpbs(self.model, templates, self.lexicon.stereotypes,
                                                                 single_piece.attribute_pairs)
            if toggles.target_lpbs:
                report.intrinsic.target_lpbs = target_lpbs(self.model, templates, self.lexicon.stereotypes,
                                                           single_piece.attribute_pairs)

    def probe(self, report: AuditReport, bank) -> None:
        settings = self.config.probe
        lexicon = self.covered_lexicon(bank)
        split = split_attribute_terms(lexicon, settings.train_fraction, self.seeds["split"])
        probe_config = settings.training.model_copy(update={"seed": self.seeds["probe"], "progress": self.progress})
        _, report.probe = run_probe(bank, lexicon, split, probe_config, settings.iterations,
                                    self.seeds["randomization"], settings.method)

    def extrinsic(self, report: AuditReport) -> None:
        settings = self.config.downstream
        if settings.dataset_type == "bias_in_bios":
            examples = ingest_bias_in_bios(settings.dataset_path, settings.dataset_schema or BIOS_SCHEMA)
        else:
            examples = ingest_jigsaw(settings.dataset_path, settings.dataset_schema or JIGSAW_SCHEMA)
        downstream_config = DownstreamConfig(
            folds=settings.folds, epochs=settings.epochs, learning_rate=settings.learning_rate,
            max_seq_len=settings.max_seq_len, batch_size=settings.batch_size, seed=self.seeds["folds"],
            intervention=self.config.intervention, use_names=settings.use_names, progress=self.progress,
            predictions_dir=self.config.output_dir / "predictions" if settings.write_predictions else None,
        )
        report.extrinsic = run_downstream_eval(self.model, examples, self.lexicon, downstream_config)

    def run(self, report: AuditReport) -> None:
        toggles = self.config.metrics
        needs_corpus = toggles.needs_corpus or self.mitigation != "none"
        if not (toggles.any_intrinsic or toggles.probe or toggles.extrinsic):
            logger.info("Every metric stage is disabled")
            return
        with stage(report, "load"):
            self.load_inputs()
        if needs_corpus:
            with stage(report, "harvest"):
                self.harvest(report)
        with stage(report, "mitigation"):
            self.mitigate()
        bank = None
        if toggles.needs_corpus:
            with stage(report, "embedding"):
                bank = self.embedding_bank()
        if toggles.any_intrinsic:
            with stage(report, "intrinsic"):
                self.intrinsic(report, bank)
        if toggles.probe:
            with stage(report, "probe"):
                self.probe(report, bank)
        if toggles.extrinsic:
            with stage(report, "extrinsic"):
                self.extrinsic(report)


def _record_run(audit_config: AuditConfig, report: AuditReport, report_path: Optional[Path]) -> None:
    with database.session_scope() as db:
        db.add(AuditRun(
            config_hash=report.provenance.config_hash,
            cell=_cell_name(audit_config),
            status="failed" if report.failed else "ok",
            started_at=report.provenance.started_at.replace(tzinfo=None),
            finished_at=report.provenance.finished_at.replace(tzinfo=None),
            report_path=str(report_path) if report_path else None,
            error="; ".join(f"{f.stage}: {f.detail}" for f in report.failures) or None,
        ))
        db.commit()


def _cell_name(audit_config: AuditConfig) -> str:
    return f"{audit_config.mitigations[0]}/{audit_config.intervention}"


def run_audit(audit_config: AuditConfig, cache: ArtifactCache = None, progress: bool = False) -> AuditReport:
    """
    Runs every enabled stage of one grid cell and writes its report.

    Args:
        audit_config (AuditConfig): A single-cell config.
        cache (ArtifactCache): Artifact cache; the default cache directory when omitted.
        progress (bool): Whether to show progress bars.

    Returns:
        AuditReport: The report; ``failures`` lists the stage that stopped the run, if any.

    Raises:
        ReportIOError: If the output directory is not writable (checked first).
    """
    ensure_writable(audit_config.output_dir)
    cache = cache or ArtifactCache()
    started = time.perf_counter()
    runner = AuditRunner(audit_config, cache, progress)
    report = AuditReport(provenance=Provenance(
        config_hash=config_hash(audit_config),
        cell={"mitigation": runner.mitigation, "intervention": audit_config.intervention},
        model=audit_config.model,
        seed=audit_config.seed,
        versions=package_versions(),
        corpus_hash=runner.corpus_hash,
        lexicon_hash=runner.lexicon_hash,
        started_at=datetime.now(timezone.utc),
    ))
    records_before = len(cache.records)
    try:
        runner.run(report)
    except StageAborted as aborted:
        logger.error("Audit cell %s stopped at stage %s", _cell_name(audit_config), aborted)

    report.provenance.artifacts = cache.records[records_before:]
    report.provenance.finished_at = datetime.now(timezone.utc)
    report.provenance.wall_clock_seconds = time.perf_counter() - started
    files = emit_report(report, audit_config.formats, audit_config.output_dir)
    _record_run(audit_config, report, files[0] if "structured" in audit_config.formats else None)
    return report


def run_grid(audit_config: AuditConfig, jobs: int = 1, cache: ArtifactCache = None,
             progress: bool = False) -> list[AuditReport]:
    """
    Runs every cell of a config, up to ``jobs`` cells at a time.

    Returns:
        list[AuditReport]: Reports in grid order.
    """
    cells = expand_grid(audit_config)
    cache = cache or ArtifactCache()
    if jobs <= 1 or len(cells) == 1:
        return [run_audit(cell, cache, progress) for cell in cells]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(lambda cell: run_audit(cell, ArtifactCache(cache.directory), False), cells))


def validate_config(path, overrides: dict = None) -> list[AuditConfig]:
    """
    Loads a config and expands its grid without running anything.

    Raises:
        ConfigurationError: If the document is unreadable or invalid.
    """
    try:
        return expand_grid(load_config(path, overrides))
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}:\n{e}")
