"""
Module for probing contextual embeddings for gender information.

A linear classifier is trained on occurrence embeddings of attribute words
(W_f against W_m) and then applied to stereotype words: how often it assigns
a stereotype word to the gender of its stereotype set and how confident it is
measure how much gender information the stereotype embeddings carry.
"""

import json
import logging
from typing import Literal, Optional, Sequence

import numpy as np
import torch
from decouple import config
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from torch import nn
from tqdm import tqdm

from corpus import HASH_HEADER_BYTES, EmbeddingBank, array_paths
from exceptions import CoverageError, EmptyEvaluationError, LabelError
from lexicon import FEMALE, MALE, AttributeSplit, Lexicon

logger = logging.getLogger(__name__)

PROBE_EPOCHS = config("PROBE_EPOCHS", default=200, cast=int)
PROBE_LEARNING_RATE = config("PROBE_LEARNING_RATE", default=0.01, cast=float)
PROBE_TRAIN_FRACTION = config("PROBE_TRAIN_FRACTION", default=0.8, cast=float)
RANDOMIZATION_ITERATIONS = config("RANDOMIZATION_ITERATIONS", default=100, cast=int)

GENDERS = (FEMALE, MALE)


class ProbeConfig(BaseModel):
    epochs: int = Field(default=PROBE_EPOCHS, ge=1)
    learning_rate: float = Field(default=PROBE_LEARNING_RATE, gt=0)
    seed: int = 0
    progress: bool = False


class ProbeModel(BaseModel):
    """
    A trained linear gender probe.

    Attributes:
        weights (np.ndarray): Shape (2, hidden_size + 1); row 0 scores ``f``,
            row 1 scores ``m``, the last column is the bias.
        seed (int): Training seed.
        epochs (int): Training epochs.
        learning_rate (float): Optimizer step size.
        train_words (list[str]): W_T.
        test_words (list[str]): W_I.
        corpus_hash (str): Hash of the corpus behind the training bank.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    seed: int = 0
    epochs: int = 0
    learning_rate: float = 0.0
    train_words: list[str] = []
    test_words: list[str] = []
    corpus_hash: str = ""

    @model_validator(mode="after")
    def check_weights(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != 2 or not np.all(np.isfinite(self.weights)):
            raise ValueError("probe weights must be a finite (2, hidden_size + 1) array")
        return self

    @property
    def hidden_size(self) -> int:
        return self.weights.shape[1] - 1

    def female_scores(self, vectors: np.ndarray) -> np.ndarray:
        """Softmax probability of ``f`` for every row of ``vectors``."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.hidden_size:
            raise ValueError(f"probe expects vectors of width {self.hidden_size}, got {vectors.shape[1]}")
        logits = vectors @ self.weights[:, :-1].T + self.weights[:, -1]
        return 1.0 / (1.0 + np.exp(logits[:, 1] - logits[:, 0]))


class WordScore(BaseModel):
    group: Literal["f", "m"]
    confidence: float


class ProbeReport(BaseModel):
    gender_accuracy: float = Field(ge=0, le=1)
    gender_accuracy_per_occurrence: float = Field(ge=0, le=1)
    stereotype_accuracy: float = Field(ge=0, le=1)
    mean_bias_confidence: float = Field(ge=0, le=0.5)
    randomization_p_value: float = Field(ge=0, le=1)
    randomization_method: str = "prediction"
    iterations: int = RANDOMIZATION_ITERATIONS
    per_word_scores: dict[str, WordScore] = {}


def _require(bank: EmbeddingBank, words: Sequence[str], what: str) -> None:
    missing = bank.missing(words)
    if missing:
        raise CoverageError(missing, what)


def train_probe(bank: EmbeddingBank, split: AttributeSplit, lexicon: Lexicon,
                probe_config: ProbeConfig = None) -> ProbeModel:
    """
    Trains a linear f/m classifier on occurrence embeddings of the training attribute words.

    Args:
        bank (EmbeddingBank): Must cover every word of ``split.train_words``.
        split (AttributeSplit): Train and held-out attribute words.
        lexicon (Lexicon): Gives the gender of every attribute word.
        probe_config (ProbeConfig): Epochs, learning rate and seed.

    Returns:
        ProbeModel: The trained probe; identical for identical seeds.

    Raises:
        CoverageError: If a training word is missing from the bank.
        LabelError: If the training data holds a single gender.
    """
    probe_config = probe_config or ProbeConfig()
    train_words = sorted(split.train_words)
    _require(bank, train_words, "probe training bank")

    vectors, labels = [], []
    for word in train_words:
        gender = lexicon.attribute_gender(word)
        if gender is None:
            logger.warning("Training word '%s' has no attribute gender; skipped", word)
            continue
        block = bank.vectors(word)
        vectors.append(block)
        labels.extend([GENDERS.index(gender)] * len(block))
    if len(set(labels)) < 2:
        raise LabelError("probe training data holds a single gender")

    generator = torch.Generator().manual_seed(probe_config.seed)
    features = torch.tensor(np.concatenate(vectors), dtype=torch.float64)
    targets = torch.tensor(labels, dtype=torch.long)
    classifier = nn.Linear(bank.hidden_size, 2).double()
    with torch.no_grad():
        classifier.weight.copy_(torch.randn(2, bank.hidden_size, generator=generator, dtype=torch.float64) * 0.01)
        classifier.bias.zero_()
    optimizer = torch.optim.Adam(classifier.parameters(), lr=probe_config.learning_rate)
    loss_function = nn.CrossEntropyLoss()

    for _ in tqdm(range(probe_config.epochs), desc="probe", disable=not probe_config.progress):
        optimizer.zero_grad()
        loss = loss_function(classifier(features), targets)
        loss.backward()
        optimizer.step()
    logger.info("Probe trained on %d occurrences of %d words, final loss %.4f",
                len(labels), len(train_words), loss.item())

    weights = torch.cat([classifier.weight, classifier.bias.unsqueeze(1)], dim=1).detach().numpy()
    return ProbeModel(
        weights=weights,
        seed=probe_config.seed,
        epochs=probe_config.epochs,
        learning_rate=probe_config.learning_rate,
        train_words=train_words,
        test_words=sorted(split.test_words),
        corpus_hash=bank.metadata.corpus_hash,
    )


def word_predictions(probe: ProbeModel, bank: EmbeddingBank, words: Sequence[str]) -> dict[str, WordScore]:
    """
    Majority-vote gender of every word over its occurrences.

    An occurrence scoring exactly 0.5 counts as ``f``, and so does a word
    whose votes are tied (logged).
    """
    scores = {}
    for word in sorted(words):
        female = probe.female_scores(bank.vectors(word))
        female_votes = int(np.sum(female >= 0.5))
        male_votes = len(female) - female_votes
        if female_votes == male_votes:
            logger.warning("Tied probe vote for '%s' (%d each); assigned to f", word, female_votes)
        group = FEMALE if female_votes >= male_votes else MALE
        scores[word] = WordScore(group=group, confidence=float(np.mean(np.abs(female - 0.5))))
    return scores


def _accuracy(predictions: dict[str, WordScore], truth: dict[str, str]) -> float:
    return float(np.mean([predictions[word].group == gender for word, gender in truth.items()]))


def gender_accuracy(probe: ProbeModel, bank: EmbeddingBank, words: Sequence[str],
                    lexicon: Lexicon) -> tuple[float, float]:
    """
    Accuracy of the probe on attribute words, per word and per occurrence.

    Words missing from the bank are skipped with a warning.

    Raises:
        CoverageError: If none of the words is in the bank.
    """
    words = sorted(words)
    covered = [word for word in words if word in bank]
    if len(covered) < len(words):
        logger.warning("Held-out words missing from bank: %s", ", ".join(sorted(set(words) - set(covered))))
    if not covered:
        raise CoverageError(words, "held-out bank")

    truth = {word: lexicon.attribute_gender(word) for word in covered}
    per_word = _accuracy(word_predictions(probe, bank, covered), truth)
    hits = total = 0
    for word in covered:
        predicted_female = probe.female_scores(bank.vectors(word)) >= 0.5
        hits += int(np.sum(predicted_female == (truth[word] == FEMALE)))
        total += len(predicted_female)
    return per_word, hits / total


def _stereotype_truth(bank: EmbeddingBank, lexicon: Lexicon) -> dict[str, str]:
    truth = {word: FEMALE for word in lexicon.stereotypes_female}
    truth.update({word: MALE for word in lexicon.stereotypes_male})
    if not truth:
        raise CoverageError([], "lexicon stereotypes (empty)")
    _require(bank, truth, "stereotype bank")
    return dict(sorted(truth.items()))


def bias_accuracy(probe: ProbeModel, bank: EmbeddingBank, lexicon: Lexicon) -> float:
    """
    Fraction of stereotype words whose majority-vote prediction matches their stereotype set.

    Args:
        probe (ProbeModel): The trained probe.
        bank (EmbeddingBank): Must cover X_f and X_m.
        lexicon (Lexicon): Supplies X_f and X_m.

    Returns:
        float: Accuracy in [0, 1].

    Raises:
        CoverageError: If a stereotype word is missing or there are none.
    """
    truth = _stereotype_truth(bank, lexicon)
    return _accuracy(word_predictions(probe, bank, list(truth)), truth)


def mean_bias_confidence(probe: ProbeModel, bank: EmbeddingBank, words: Optional[Sequence[str]] = None) -> float:
    """
    Mean of ``|P(f) - 0.5|`` over every occurrence embedding of the given words (all bank words by default).

    Raises:
        EmptyEvaluationError: If there is no occurrence to score.
    """
    words = bank.words if words is None else sorted(words)
    blocks = [bank.vectors(word) for word in words if word in bank]
    if not blocks or not sum(len(block) for block in blocks):
        raise EmptyEvaluationError("no occurrence embeddings to score")
    return float(np.mean(np.abs(probe.female_scores(np.concatenate(blocks)) - 0.5)))


def randomization_test(probe: ProbeModel, bank: EmbeddingBank, lexicon: Lexicon,
                       iterations: int = RANDOMIZATION_ITERATIONS, seed: int = 0,
                       method: Literal["one_sample", "prediction"] = "prediction") -> float:
    """
    Significance of the stereotype bias accuracy against random splits of the stereotype words.

    Every iteration relabels the stereotype words at random, keeping |X_f| and
    |X_m|, and scores the fixed probe predictions against it. ``prediction``
    (the default) tests the original accuracy as one new observation of the
    random-accuracy distribution. ``one_sample`` runs a two-sided one-sample
    t-test of the random accuracies against the original accuracy; its p-value
    shrinks with the number of iterations even under the null.

    Args:
        probe (ProbeModel): The trained probe.
        bank (EmbeddingBank): Must cover X_f and X_m.
        lexicon (Lexicon): Supplies X_f and X_m.
        iterations (int): Number of random splits, at least 2.
        seed (int): Root seed; each iteration uses its own substream.
        method (str): ``one_sample`` or ``prediction``.

    Returns:
        float: Two-sided p-value in [0, 1].
    """
    if iterations < 2:
        raise ValueError(f"iterations must be at least 2, got {iterations}")
    truth = _stereotype_truth(bank, lexicon)
    words = list(truth)
    predictions = word_predictions(probe, bank, words)
    predicted_female = np.array([predictions[word].group == FEMALE for word in words])
    original = float(np.mean(predicted_female == np.array([truth[word] == FEMALE for word in words])))
    female_count = len(lexicon.stereotypes_female)

    random_accuracies = np.empty(iterations)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(iterations)):
        labels = np.zeros(len(words), dtype=bool)
        labels[np.random.default_rng(child).permutation(len(words))[:female_count]] = True
        random_accuracies[i] = np.mean(predicted_female == labels)

    if np.ptp(random_accuracies) == 0:
        p_value = 1.0 if random_accuracies[0] == original else 0.0
        logger.warning("Random accuracies have zero variance (all %.4f, original %.4f); p-value set to %.0f",
                       random_accuracies[0], original, p_value)
        return p_value
    if method == "one_sample":
        p_value = stats.ttest_1samp(random_accuracies, popmean=original).pvalue
    elif method == "prediction":
        spread = np.std(random_accuracies, ddof=1) * np.sqrt(1 + 1 / iterations)
        statistic = (original - np.mean(random_accuracies)) / spread
        p_value = 2 * stats.t.sf(abs(statistic), df=iterations - 1)
    else:
        raise ValueError(f"unknown randomization method '{method}'")
    return float(np.clip(p_value, 0.0, 1.0))


def run_probe(bank: EmbeddingBank, lexicon: Lexicon, split: AttributeSplit, probe_config: ProbeConfig = None,
              iterations: int = RANDOMIZATION_ITERATIONS, seed: int = 0,
              method: Literal["one_sample", "prediction"] = "prediction",
              probe: ProbeModel = None) -> tuple[ProbeModel, ProbeReport]:
    """
    Trains (unless given) a probe and collects every probe metric into a report.

    Returns:
        tuple[ProbeModel, ProbeReport]: The probe and its report.
    """
    probe = probe or train_probe(bank, split, lexicon, probe_config)
    per_word, per_occurrence = gender_accuracy(probe, bank, sorted(split.test_words), lexicon)
    stereotypes = sorted(lexicon.stereotypes)
    report = ProbeReport(
        gender_accuracy=per_word,
        gender_accuracy_per_occurrence=per_occurrence,
        stereotype_accuracy=bias_accuracy(probe, bank, lexicon),
        mean_bias_confidence=mean_bias_confidence(probe, bank, stereotypes),
        randomization_p_value=randomization_test(probe, bank, lexicon, iterations, seed, method),
        randomization_method=method,
        iterations=iterations,
        per_word_scores=word_predictions(probe, bank, stereotypes),
    )
    logger.info("Probe: gender acc %.3f, stereotype acc %.3f, confidence %.3f, p=%.3g",
                report.gender_accuracy, report.stereotype_accuracy,
                report.mean_bias_confidence, report.randomization_p_value)
    return probe, report


def save_probe(probe: ProbeModel, path) -> list:
    """Writes probe weights as little-endian float32 with a JSON index, like an embedding bank."""
    index_path, array_path = array_paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    header = probe.corpus_hash.encode("ascii").ljust(HASH_HEADER_BYTES, b" ")[:HASH_HEADER_BYTES]
    array_path.write_bytes(header + probe.weights.astype("<f4").tobytes())
    index_path.write_text(json.dumps(probe.model_dump(exclude={"weights"}) | {"shape": list(probe.weights.shape)},
                                     indent=2, sort_keys=True), encoding="utf-8")
    return [index_path, array_path]


def load_probe(path) -> ProbeModel:
    index_path, array_path = array_paths(path)
    index = json.loads(index_path.read_text(encoding="utf-8"))
    shape = index.pop("shape")
    weights = np.frombuffer(array_path.read_bytes()[HASH_HEADER_BYTES:], dtype="<f4").reshape(shape)
    return ProbeModel(weights=weights.astype(np.float64), **index)
