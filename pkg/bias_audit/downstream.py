"""
Module for extrinsic bias evaluation on text classification tasks.

Datasets are read into ``LabeledExample`` records, the training folds can be
scrubbed of gendered words or augmented with gender-swapped copies, and a
fresh copy of the model with a linear head is finetuned per fold. Held-out
predictions are scored with group fairness metrics (TPRD, FPRD, per-group
accuracy) and with counterfactual fairness.
"""

import logging
import math
from pathlib import Path
from typing import Literal, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from decouple import config
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.model_selection import StratifiedKFold
from torch import nn
from tqdm import tqdm

from exceptions import DatasetConfigurationError, InsufficientDataError, StratificationError
from lexicon import FEMALE, MALE, SWAP_PATTERN, Lexicon, swap_text
from model_adapter import ModelHandle, clone_for_training, encode_texts, inference

logger = logging.getLogger(__name__)

DOWNSTREAM_FOLDS = config("DOWNSTREAM_FOLDS", default=10, cast=int)
DOWNSTREAM_EPOCHS = config("DOWNSTREAM_EPOCHS", default=4, cast=int)
DOWNSTREAM_LEARNING_RATE = config("DOWNSTREAM_LEARNING_RATE", default=2e-5, cast=float)
DOWNSTREAM_MAX_SEQ_LEN = config("DOWNSTREAM_MAX_SEQ_LEN", default=100, cast=int)
DOWNSTREAM_BATCH_SIZE = config("DOWNSTREAM_BATCH_SIZE", default=16, cast=int)
BIOS_CLASSES_PER_GROUP = config("BIOS_CLASSES_PER_GROUP", default=7, cast=int)

GENDER_VALUES = {"f": FEMALE, "female": FEMALE, "w": FEMALE, "woman": FEMALE,
                 "m": MALE, "male": MALE, "man": MALE}
METRIC_NAMES = ("tprd", "fprd", "acc_f", "acc_m", "cf", "cf_tprd", "cf_fprd", "cf_acc_f", "cf_acc_m")

Intervention = Literal["default", "scrubbing", "swapping"]


class LabeledExample(BaseModel):
    """
    One text classification example.

    Attributes:
        text (str): The input text.
        label (int): Class id.
        group (str): ``f`` or ``m``.
        example_id: Identifier from the source file.
        label_name (str): Human readable class name, when known.
    """
    model_config = ConfigDict(frozen=True)

    text: str
    label: int = Field(ge=0)
    group: Literal["f", "m"]
    example_id: Union[int, str]
    label_name: str = ""


class DatasetSchema(BaseModel):
    """Column names of a delimiter-separated dataset file."""
    text: str
    label: Optional[str] = None
    gender: Optional[str] = None
    toxicity: Optional[str] = None
    female: Optional[str] = None
    male: Optional[str] = None
    example_id: Optional[str] = None
    delimiter: str = ","


BIOS_SCHEMA = DatasetSchema(text="bio", label="profession", gender="gender")
JIGSAW_SCHEMA = DatasetSchema(text="comment_text", toxicity="target", female="female", male="male", example_id="id")


class GroupMetrics(NamedTuple):
    tprd: float
    fprd: float
    acc_f: float
    acc_m: float
    per_class_gaps: dict = {}
    skipped_classes: tuple = ()


class FoldMetrics(BaseModel):
    fold: int
    num_train: int
    num_test: int
    tprd: Optional[float]
    fprd: Optional[float]
    acc_f: Optional[float]
    acc_m: Optional[float]
    cf: Optional[float]
    cf_tprd: Optional[float]
    cf_fprd: Optional[float]
    cf_acc_f: Optional[float]
    cf_acc_m: Optional[float]
    per_class_gaps: dict[int, float] = {}
    skipped_classes: list[int] = []

    @field_validator(*METRIC_NAMES, mode="before")
    @classmethod
    def undefined_as_none(cls, value):
        if value is not None and math.isnan(value):
            return None
        return value


class ExtrinsicReport(BaseModel):
    """
    Fold-averaged extrinsic metrics.

    Metric fields hold the mean over folds, ``std`` the matching standard
    deviations; a metric that could not be computed in any fold is ``None``.
    """
    tprd: Optional[float] = None
    fprd: Optional[float] = None
    acc_f: Optional[float] = Field(default=None, ge=0, le=1)
    acc_m: Optional[float] = Field(default=None, ge=0, le=1)
    cf: Optional[float] = Field(default=None, ge=0, le=1)
    cf_tprd: Optional[float] = None
    cf_fprd: Optional[float] = None
    cf_acc_f: Optional[float] = Field(default=None, ge=0, le=1)
    cf_acc_m: Optional[float] = Field(default=None, ge=0, le=1)
    std: dict[str, Optional[float]] = {}
    per_class_tprd: dict[int, float] = {}
    folds: list[FoldMetrics] = []
    intervention: str = "default"
    num_examples: int = 0


class DownstreamConfig(BaseModel):
    folds: int = Field(default=DOWNSTREAM_FOLDS, ge=2)
    epochs: int = Field(default=DOWNSTREAM_EPOCHS, ge=1)
    learning_rate: float = Field(default=DOWNSTREAM_LEARNING_RATE, gt=0)
    max_seq_len: int = Field(default=DOWNSTREAM_MAX_SEQ_LEN, ge=2)
    batch_size: int = Field(default=DOWNSTREAM_BATCH_SIZE, ge=1)
    seed: int = 0
    intervention: Intervention = "default"
    use_names: bool = True
    predictions_dir: Optional[Path] = None
    progress: bool = False


def _read_table(path, schema: DatasetSchema, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetConfigurationError(f"cannot read dataset {path}: {e}")
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DatasetConfigurationError(f"{path} lacks column(s): {', '.join(missing)}")
    return frame


def _example_id(schema: DatasetSchema, row, index: int):
    if schema.example_id and schema.example_id in row and row[schema.example_id] != "":
        return row[schema.example_id]
    return index


def ingest_bias_in_bios(path, schema: DatasetSchema = BIOS_SCHEMA,
                        classes_per_group: int = BIOS_CLASSES_PER_GROUP) -> list[LabeledExample]:
    """
    Reads a biography classification file and keeps the most gender-skewed professions.

    Professions are ranked by their share of female biographies; the
    ``classes_per_group`` highest and lowest shares are kept. Rows without
    text, profession or a recognizable gender are skipped and counted.

    Args:
        path: Delimiter-separated UTF-8 file.
        schema (DatasetSchema): Column names (``text``, ``label``, ``gender``).
        classes_per_group (int): Professions kept per gender.

    Returns:
        list[LabeledExample]: Labels number the kept professions in sorted order.

    Raises:
        DatasetConfigurationError: If columns are missing or too few professions remain.
        InsufficientDataError: If no row is usable.
    """
    frame = _read_table(path, schema, [schema.text, schema.label, schema.gender])
    rows, skipped = [], 0
    for index, row in frame.iterrows():
        text, profession = row[schema.text].strip(), row[schema.label].strip()
        group = GENDER_VALUES.get(row[schema.gender].strip().lower())
        if not text or not profession or group is None:
            skipped += 1
            continue
        rows.append((_example_id(schema, row, index), text, profession, group))
    if skipped:
        logger.warning("Skipped %d row(s) of %s with missing fields", skipped, path)
    if not rows:
        raise InsufficientDataError(f"no row of {path} has a text, a profession and a recognizable gender")

    records = pd.DataFrame(rows, columns=["example_id", "text", "profession", "group"])
    shares = (records["group"] == FEMALE).groupby(records["profession"]).mean()
    if len(shares) < 2 * classes_per_group:
        raise DatasetConfigurationError(
            f"{path} has {len(shares)} professions, {2 * classes_per_group} are needed"
        )
    ranked = sorted(shares.items(), key=lambda item: (-item[1], item[0]))
    female_top = [name for name, _ in ranked[:classes_per_group]]
    male_top = [name for name, _ in sorted(shares.items(), key=lambda item: (item[1], item[0]))[:classes_per_group]]
    kept = sorted(set(female_top) | set(male_top))
    labels = {name: label for label, name in enumerate(kept)}
    logger.info("Bias-in-Bios: keeping professions %s", ", ".join(kept))

    return [
        LabeledExample(text=text, label=labels[profession], group=group, example_id=example_id, label_name=profession)
        for example_id, text, profession, group in rows
        if profession in labels
    ]


def ingest_jigsaw(path, schema: DatasetSchema = JIGSAW_SCHEMA) -> list[LabeledExample]:
    """
    Reads a toxicity file into binary examples with a gender group.

    Label 1 when toxicity > 0.5, label 0 when it is exactly 0, other rows are
    dropped. Group ``g`` requires g's score > 0.5 and the other gender's score
    to be exactly 0. Rows with unparsable or out-of-range scores are skipped
    and counted.

    Raises:
        DatasetConfigurationError: If required columns are missing.
        InsufficientDataError: If no row satisfies the label and group rules.
    """
    frame = _read_table(path, schema, [schema.text, schema.toxicity, schema.female, schema.male])
    scores = frame[[schema.toxicity, schema.female, schema.male]].apply(pd.to_numeric, errors="coerce")
    malformed = scores.isna().any(axis=1) | ((scores < 0) | (scores > 1)).any(axis=1)
    if malformed.any():
        logger.warning("Skipped %d row(s) of %s with malformed scores", int(malformed.sum()), path)

    examples = []
    for index, row in frame[~malformed].iterrows():
        toxicity, female, male = scores.loc[index]
        if toxicity > 0.5:
            label = 1
        elif toxicity == 0:
            label = 0
        else:
            continue
        if female > 0.5 and male == 0:
            group = FEMALE
        elif male > 0.5 and female == 0:
            group = MALE
        else:
            continue
        examples.append(LabeledExample(
            text=row[schema.text], label=label, group=group, example_id=_example_id(schema, row, index),
        ))
    if not examples:
        raise InsufficientDataError(f"no example of {path} satisfies the label and group rules")
    return examples


def scrub_text(text: str, lexicon: Lexicon) -> str:
    terms = lexicon.attribute_terms | lexicon.names
    scrubbed = SWAP_PATTERN.sub(lambda match: "" if match.group(0).lower() in terms else match.group(0), text)
    return " ".join(scrubbed.split())


def scrub_attributes(examples: Sequence[LabeledExample], lexicon: Lexicon) -> list[LabeledExample]:
    """
    Deletes every attribute term and name from the texts.

    Matching is case-insensitive on word boundaries; whitespace is normalized
    afterwards. Labels and groups are kept.
    """
    return [example.model_copy(update={"text": scrub_text(example.text, lexicon)}) for example in examples]


def _flipped(group: str) -> str:
    return MALE if group == FEMALE else FEMALE


def swap_attributes(examples: Sequence[LabeledExample], lexicon: Lexicon,
                    use_names: bool = True) -> list[LabeledExample]:
    """
    Adds a gender-swapped copy of every example holding a swappable term.

    Copies keep the label, flip the group and get ``-cf`` appended to their id.

    Returns:
        list[LabeledExample]: Originals first, then the counterfactual copies.
    """
    counterfactuals = []
    for example in examples:
        swapped = swap_text(example.text, lexicon, use_names)
        if swapped != example.text:
            counterfactuals.append(example.model_copy(update={
                "text": swapped, "group": _flipped(example.group), "example_id": f"{example.example_id}-cf",
            }))
    return list(examples) + counterfactuals


def apply_intervention(examples: Sequence[LabeledExample], lexicon: Lexicon, intervention: Intervention,
                       use_names: bool = True) -> list[LabeledExample]:
    if intervention == "scrubbing":
        return scrub_attributes(examples, lexicon)
    if intervention == "swapping":
        return swap_attributes(examples, lexicon, use_names)
    return list(examples)


def _rate(hits: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(hits[mask])) if mask.any() else math.nan


def compute_group_metrics(predictions: Sequence[int], labels: Sequence[int], groups: Sequence[str],
                          num_classes: Optional[int] = None) -> GroupMetrics:
    """
    Group fairness metrics with ``f`` as the reference group.

    Binary tasks: TPRD and FPRD are the f minus m gaps of the positive-class
    rates. Multiclass tasks: the mean absolute one-vs-rest gap over classes;
    signed per-class TPR gaps are returned as well. A class without positives
    in one of the groups is skipped with a warning.

    Args:
        predictions (Sequence[int]): Predicted class ids.
        labels (Sequence[int]): Gold class ids.
        groups (Sequence[str]): ``f`` or ``m`` per example.
        num_classes (int): Number of classes; inferred when omitted.

    Returns:
        GroupMetrics: tprd, fprd, acc_f, acc_m, per-class gaps and skipped classes.
    """
    predictions, labels, groups = np.asarray(predictions), np.asarray(labels), np.asarray(groups)
    if not len(predictions) == len(labels) == len(groups):
        raise ValueError("predictions, labels and groups must have equal lengths")
    num_classes = num_classes or int(max(predictions.max(initial=0), labels.max(initial=0))) + 1
    female, male = groups == FEMALE, groups == MALE
    correct = predictions == labels

    accuracies = {}
    for name, mask in ((FEMALE, female), (MALE, male)):
        accuracies[name] = _rate(correct, mask)
        if not mask.any():
            logger.warning("Group %s has no examples; its accuracy is undefined", name)

    classes = [1] if num_classes <= 2 else list(range(num_classes))
    tpr_gaps, fpr_gaps, skipped = {}, {}, []
    for label in classes:
        positive, predicted = labels == label, predictions == label
        tpr_gap = _rate(predicted, positive & female) - _rate(predicted, positive & male)
        fpr_gap = _rate(predicted, ~positive & female) - _rate(predicted, ~positive & male)
        if math.isnan(tpr_gap):
            skipped.append(label)
            logger.warning("Class %d lacks positives in a group; skipped", label)
            continue
        tpr_gaps[label] = tpr_gap
        if not math.isnan(fpr_gap):
            fpr_gaps[label] = fpr_gap

    if num_classes <= 2:
        tprd = tpr_gaps.get(1, math.nan)
        fprd = fpr_gaps.get(1, math.nan)
    else:
        tprd = float(np.mean(np.abs(list(tpr_gaps.values())))) if tpr_gaps else math.nan
        fprd = float(np.mean(np.abs(list(fpr_gaps.values())))) if fpr_gaps else math.nan
    return GroupMetrics(tprd, fprd, accuracies[FEMALE], accuracies[MALE], tpr_gaps, tuple(skipped))


class SequenceClassifier(nn.Module):
    """
    Encoder of a model handle, mean pooling and one linear layer.

    A bias subspace attached to the handle is projected out of the pooled input.
    """

    def __init__(self, encoder: ModelHandle, num_classes: int, max_length: int = DOWNSTREAM_MAX_SEQ_LEN,
                 seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.encoder_network = encoder.network
        self.max_length = max_length
        self.head = nn.Linear(encoder.hidden_size, num_classes)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=generator) * 0.02)
            self.head.bias.zero_()
        device = next(encoder.network.parameters()).device
        self.head.to(device)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder.pool(input_ids, attention_mask))

    def logits(self, texts: Sequence[str]) -> torch.Tensor:
        return self(*encode_texts(self.encoder, texts, self.max_length))

    def predict_proba(self, texts: Sequence[str], batch_size: int = DOWNSTREAM_BATCH_SIZE) -> np.ndarray:
        """Class probabilities, shape (len(texts), num_classes)."""
        chunks = []
        was_training = self.training
        self.eval()
        with inference(self.encoder):
            for start in range(0, len(texts), batch_size):
                chunks.append(torch.softmax(self.logits(texts[start:start + batch_size]).double(), dim=-1).cpu().numpy())
        self.train(was_training)
        if not chunks:
            return np.zeros((0, self.head.out_features))
        return np.concatenate(chunks)


def finetune(classifier: SequenceClassifier, examples: Sequence[LabeledExample], downstream_config: DownstreamConfig,
             seed: int = 0) -> SequenceClassifier:
    """Trains encoder and head with cross-entropy over seeded shuffled mini-batches."""
    optimizer = torch.optim.AdamW(classifier.parameters(), lr=downstream_config.learning_rate)
    loss_function = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    classifier.train()
    for epoch in range(downstream_config.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), downstream_config.batch_size):
            batch = [examples[i] for i in order[start:start + downstream_config.batch_size]]
            optimizer.zero_grad()
            logits = classifier.logits([example.text for example in batch])
            targets = torch.tensor([example.label for example in batch], device=logits.device)
            loss = loss_function(logits, targets)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        logger.debug("Finetuning epoch %d: mean loss %.4f", epoch + 1, float(np.mean(losses)))
    classifier.eval()
    return classifier


def counterfactual_fairness(classifier, test_examples: Sequence[LabeledExample], lexicon: Lexicon,
                            use_names: bool = True) -> float:
    """
    Mean absolute change of the gold-class probability under attribute swapping.

    Args:
        classifier: Anything with ``predict_proba(texts) -> (n, classes)``.
        test_examples (Sequence[LabeledExample]): Held-out examples.
        lexicon (Lexicon): Attribute (and name) pairs used for swapping.
        use_names (bool): Whether names are swapped too.

    Returns:
        float: CF in [0, 1]; examples without a swappable term contribute 0.
    """
    if not test_examples:
        return 0.0
    texts = [example.text for example in test_examples]
    swapped = [swap_text(text, lexicon, use_names) for text in texts]
    changed = [i for i, (text, other) in enumerate(zip(texts, swapped)) if text != other]
    if not changed:
        return 0.0
    original = classifier.predict_proba([texts[i] for i in changed])
    counterfactual = classifier.predict_proba([swapped[i] for i in changed])
    gold = [test_examples[i].label for i in changed]
    rows = np.arange(len(changed))
    differences = np.abs(original[rows, gold] - counterfactual[rows, gold])
    return float(np.sum(differences) / len(test_examples))


def kfold_partitions(examples: Sequence[LabeledExample], folds: int = DOWNSTREAM_FOLDS,
                     seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Seeded stratified folds over the joint (label, group) key.

    Falls back to label-only stratification when some joint cell is too small.

    Returns:
        list[tuple[np.ndarray, np.ndarray]]: (train indices, test indices) per fold;
        every example is held out exactly once.

    Raises:
        StratificationError: If a class has fewer examples than folds or is absent from a training split.
    """
    labels = np.array([example.label for example in examples])
    counts = pd.Series(labels).value_counts()
    scarce = counts[counts < folds]
    if len(scarce):
        raise StratificationError(f"class(es) {sorted(scarce.index.tolist())} have fewer than {folds} examples")

    joint = np.array([f"{example.label}|{example.group}" for example in examples])
    if pd.Series(joint).value_counts().min() < folds:
        logger.warning("Some (label, group) cells are smaller than %d; stratifying by label only", folds)
        keys = labels
    else:
        keys = joint
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    partitions = list(splitter.split(np.zeros(len(keys)), keys))
    every_label = set(labels.tolist())
    for fold, (train_index, _) in enumerate(partitions):
        if set(labels[train_index].tolist()) != every_label:
            raise StratificationError(f"fold {fold} misses a class in its training split")
    return partitions


def _fold_seeds(seed: int, folds: int) -> list[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(folds)]


def _evaluate_fold(fold: int, classifier: SequenceClassifier, train: list, test: list, lexicon: Lexicon,
                   num_classes: int, downstream_config: DownstreamConfig) -> FoldMetrics:
    texts = [example.text for example in test]
    swapped = [swap_text(text, lexicon, downstream_config.use_names) for text in texts]
    original = classifier.predict_proba(texts, downstream_config.batch_size)
    counterfactual = classifier.predict_proba(swapped, downstream_config.batch_size)
    labels = np.array([example.label for example in test])
    groups = [example.group for example in test]
    predictions = original.argmax(axis=1)
    rows = np.arange(len(test))
    gold_original, gold_counterfactual = original[rows, labels], counterfactual[rows, labels]
    changed = np.array([text != other for text, other in zip(texts, swapped)])
    cf = float(np.sum(np.abs(gold_original - gold_counterfactual)[changed]) / len(test)) if len(test) else 0.0

    metrics = compute_group_metrics(predictions, labels, groups, num_classes)
    augmented = compute_group_metrics(
        np.concatenate([predictions, counterfactual.argmax(axis=1)[changed]]),
        np.concatenate([labels, labels[changed]]),
        groups + [_flipped(group) for group, flag in zip(groups, changed) if flag],
        num_classes,
    )

    if downstream_config.predictions_dir:
        directory = Path(downstream_config.predictions_dir)
        directory.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({
            "example_id": [example.example_id for example in test],
            "label": labels,
            "group": groups,
            "prediction": predictions,
            "counterfactual_prediction": counterfactual.argmax(axis=1),
            "gold_probability": gold_original,
            "counterfactual_gold_probability": gold_counterfactual,
            "swapped": changed,
        }).to_csv(directory / f"fold_{fold}_predictions.csv", index=False)

    return FoldMetrics(
        fold=fold, num_train=len(train), num_test=len(test),
        tprd=metrics.tprd, fprd=metrics.fprd, acc_f=metrics.acc_f, acc_m=metrics.acc_m, cf=cf,
        cf_tprd=augmented.tprd, cf_fprd=augmented.fprd, cf_acc_f=augmented.acc_f, cf_acc_m=augmented.acc_m,
        per_class_gaps=metrics.per_class_gaps, skipped_classes=list(metrics.skipped_classes),
    )


def _mean_and_std(values: list[Optional[float]]) -> tuple[Optional[float], Optional[float]]:
    finite = [value for value in values if value is not None and not math.isnan(value)]
    if not finite:
        return None, None
    spread = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return float(np.mean(finite)), spread


def summarize_folds(folds: list[FoldMetrics], intervention: str = "default", num_examples: int = 0) -> ExtrinsicReport:
    """Averages fold metrics into an ``ExtrinsicReport`` (sample standard deviations)."""
    means, spreads = {}, {}
    for name in METRIC_NAMES:
        means[name], spreads[name] = _mean_and_std([getattr(fold, name) for fold in folds])
    per_class = {}
    for fold in folds:
        for label, gap in fold.per_class_gaps.items():
            per_class.setdefault(label, []).append(gap)
    return ExtrinsicReport(
        **means,
        std=spreads,
        per_class_tprd={label: float(np.mean(gaps)) for label, gaps in sorted(per_class.items())},
        folds=folds,
        intervention=intervention,
        num_examples=num_examples,
    )


def run_downstream_eval(model: ModelHandle, examples: Sequence[LabeledExample], lexicon: Lexicon,
                        downstream_config: DownstreamConfig = None) -> ExtrinsicReport:
    """
    k-fold finetuning and evaluation of a model on a classification dataset.

    For every fold a fresh copy of the model gets a linear head and is
    finetuned on the training split (after the configured intervention); the
    held-out split keeps its original texts.

    Args:
        model (ModelHandle): The model to evaluate; left untouched.
        examples (Sequence[LabeledExample]): The dataset.
        lexicon (Lexicon): Used by the interventions and the counterfactual metrics.
        downstream_config (DownstreamConfig): Folds, epochs, learning rate, sequence length, seed, intervention.

    Returns:
        ExtrinsicReport: Fold means and standard deviations of every metric.

    Raises:
        InsufficientDataError: If there are no examples.
        StratificationError: If folds cannot hold every class in their training split.
    """
    downstream_config = downstream_config or DownstreamConfig()
    examples = list(examples)
    if not examples:
        raise InsufficientDataError("the downstream dataset holds no examples")
    num_classes = max(example.label for example in examples) + 1
    partitions = kfold_partitions(examples, downstream_config.folds, downstream_config.seed)
    seeds = _fold_seeds(downstream_config.seed, downstream_config.folds)

    folds = []
    for fold, ((train_index, test_index), fold_seed) in enumerate(
        tqdm(list(zip(partitions, seeds)), desc="folds", disable=not downstream_config.progress)
    ):
        train = apply_intervention([examples[i] for i in train_index], lexicon,
                                   downstream_config.intervention, downstream_config.use_names)
        test = [examples[i] for i in test_index]
        torch.manual_seed(fold_seed)
        classifier = SequenceClassifier(clone_for_training(model), num_classes, downstream_config.max_seq_len,
                                        fold_seed)
        finetune(classifier, train, downstream_config, fold_seed)
        folds.append(_evaluate_fold(fold, classifier, train, test, lexicon, num_classes, downstream_config))
        logger.info("Fold %d: TPRD %s, CF %s", fold, folds[-1].tprd, folds[-1].cf)

    return summarize_folds(folds, downstream_config.intervention, len(examples))
