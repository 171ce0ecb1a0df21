"""
Module computing intrinsic bias metrics of a masked language model.

SEAT compares mean cosine similarities of stereotype word representatives to
two attribute sets; LPBS compares prior-normalized log probabilities of paired
attribute terms (or of stereotype terms) in fill-in-the-blank templates.
"""

import logging
import math
import re
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from decouple import config
from pydantic import BaseModel, field_validator

from corpus import EmbeddingBank
from exceptions import (
    CoverageError,
    EmptyEvaluationError,
    MultiPieceError,
    NumericalPriorError,
    TemplateError,
    UndefinedCosineError,
)
from lexicon import AttributePair, Lexicon
from model_adapter import BLANK_SLOT, MASK_SLOT, ModelHandle, masked_distributions

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = config("PROBABILITY_FLOOR", default=1e-12, cast=float)
DEFAULT_TEMPLATES_PATH = config(
    "TEMPLATES_PATH", default=str(Path(__file__).parent / "data" / "templates.txt")
)

SLOT_PATTERN = re.compile(r"\{(\w+)\}")


class SeatResult(BaseModel):
    """
    Word-level SEAT outcome.

    Attributes:
        test_statistic (float): Sum of female-stereotype associations minus sum of male ones.
        effect_size (float): Difference of mean associations over their population standard deviation.
        per_word_associations (dict[str, float]): Association of every stereotype word.
    """
    test_statistic: float
    effect_size: float
    per_word_associations: dict[str, float]

    @field_validator("per_word_associations")
    @classmethod
    def bounded(cls, value: dict) -> dict:
        for word, association in value.items():
            if not -2.0 - 1e-9 <= association <= 2.0 + 1e-9:
                raise ValueError(f"association of '{word}' is outside [-2, 2]: {association}")
        return value


class LpbsTerm(BaseModel):
    template: str
    target: str
    female_term: str
    male_term: str
    female_score: float
    male_score: float
    difference: float


class LpbsResult(BaseModel):
    score: float
    variant: Literal["attribute", "target"]
    per_template_terms: list[LpbsTerm]

    @field_validator("score")
    @classmethod
    def non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("LPBS scores are non-negative")
        return value


class IntrinsicReport(BaseModel):
    seat: Optional[SeatResult] = None
    attribute_lpbs: Optional[LpbsResult] = None
    target_lpbs: Optional[LpbsResult] = None


def load_templates(path=DEFAULT_TEMPLATES_PATH) -> list[str]:
    """
    Reads a template file.

    Blank lines and lines starting with ``#`` are ignored; every other line must
    hold exactly one ``{attribute}`` and one ``{target}`` placeholder.

    Args:
        path: UTF-8 template file.

    Returns:
        list[str]: The templates in file order.

    Raises:
        TemplateError: If a line has the wrong placeholders or the file holds none.
    """
    templates = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        slots = SLOT_PATTERN.findall(line)
        if sorted(slots) != ["attribute", "target"]:
            raise TemplateError(f"{path}:{number}: expected one {{attribute}} and one {{target}}, found {slots}")
        templates.append(line)
    if not templates:
        raise TemplateError(f"{path} holds no templates")
    return templates


def _cosines(x: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return vectors @ x / (np.linalg.norm(vectors, axis=1) * np.linalg.norm(x))


def _check_norms(vectors: np.ndarray, words: Sequence[str]) -> None:
    for vector, word in zip(vectors, words):
        if not np.linalg.norm(vector) > 0:
            raise UndefinedCosineError(f"cosine similarity is undefined for the zero vector of '{word}'")


def seat_association(x_vectors, a_vectors, b_vectors, word: str = "x") -> float:
    """
    Association of a word with attribute set A over attribute set B.

    Args:
        x_vectors: Occurrence vectors of the word, averaged into one representative.
        a_vectors: One representative vector per word of A.
        b_vectors: One representative vector per word of B.
        word (str): Name used in error messages.

    Returns:
        float: mean cosine to A minus mean cosine to B.

    Raises:
        UndefinedCosineError: If a vector has zero norm.
    """
    x = np.mean(np.atleast_2d(np.asarray(x_vectors, dtype=np.float64)), axis=0)
    a = np.atleast_2d(np.asarray(a_vectors, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b_vectors, dtype=np.float64))
    if not len(a) or not len(b):
        raise ValueError("attribute sets must not be empty")
    _check_norms([x], [word])
    _check_norms(a, [f"A[{i}]" for i in range(len(a))])
    _check_norms(b, [f"B[{i}]" for i in range(len(b))])
    return float(np.mean(_cosines(x, a)) - np.mean(_cosines(x, b)))


def seat_effect_size(female_associations: Sequence[float], male_associations: Sequence[float]) -> float:
    """Mean female association minus mean male association over the population std of all associations."""
    everything = np.asarray(list(female_associations) + list(male_associations), dtype=np.float64)
    spread = np.std(everything)
    if spread == 0:
        logger.warning("All stereotype associations are equal; effect size set to 0")
        return 0.0
    return float((np.mean(female_associations) - np.mean(male_associations)) / spread)


def _representatives(bank: EmbeddingBank, words: Sequence[str]) -> np.ndarray:
    matrix = np.stack([bank.vectors(word).astype(np.float64).mean(axis=0) for word in words])
    _check_norms(matrix, words)
    return matrix


def seat_test(bank: EmbeddingBank, lexicon: Lexicon, attributes_a=None, attributes_b=None) -> SeatResult:
    """
    Word-level SEAT over the stereotype sets of a lexicon.

    Args:
        bank (EmbeddingBank): Must cover X_f, X_m, A and B.
        lexicon (Lexicon): Supplies X_f and X_m and, by default, A = W_f and B = W_m.
        attributes_a: Optional replacement for A.
        attributes_b: Optional replacement for B.

    Returns:
        SeatResult: Raw test statistic, effect size and per-word associations.

    Raises:
        CoverageError: If the bank misses any required word.
    """
    a_words = sorted(attributes_a if attributes_a is not None else lexicon.female_terms)
    b_words = sorted(attributes_b if attributes_b is not None else lexicon.male_terms)
    female_words = sorted(lexicon.stereotypes_female)
    male_words = sorted(lexicon.stereotypes_male)
    missing = bank.missing(a_words + b_words + female_words + male_words)
    if missing:
        raise CoverageError(missing, "embedding bank")

    a_vectors = _representatives(bank, a_words)
    b_vectors = _representatives(bank, b_words)
    associations = {
        word: seat_association(bank.vectors(word), a_vectors, b_vectors, word)
        for word in female_words + male_words
    }
    female = [associations[word] for word in female_words]
    male = [associations[word] for word in male_words]
    return SeatResult(
        test_statistic=math.fsum(female) - math.fsum(male),
        effect_size=seat_effect_size(female, male),
        per_word_associations=associations,
    )


def _piece_id(model: ModelHandle, word: str) -> int:
    pieces = model.word_pieces(word)
    if len(pieces) != 1:
        raise MultiPieceError(word, pieces)
    return model.piece_ids(word)[0]


def _log_probability(probability: float, floor: float, what: str) -> float:
    if not math.isfinite(probability):
        raise NumericalPriorError(f"{what} is not a finite probability: {probability}")
    if probability < floor:
        logger.warning("%s = %g floored to %g", what, probability, floor)
        probability = floor
    return math.log(probability)


def _aggregate(terms: list[LpbsTerm], variant: str) -> LpbsResult:
    by_cell = {}
    for term in terms:
        by_cell.setdefault((term.target, term.female_term, term.male_term), []).append(term.difference)
    score = math.fsum(math.fsum(values) / len(values) for _, values in sorted(by_cell.items()))
    return LpbsResult(score=score, variant=variant, per_template_terms=terms)


def attribute_lpbs(model: ModelHandle, templates: Sequence[str], stereotypes, pairs: Sequence[AttributePair],
                   floor: float = PROBABILITY_FLOOR) -> LpbsResult:
    """
    Log probability bias score with the attribute position queried.

    For every template, stereotype x and pair (a, b) the score adds
    ``|ls(a, x) - ls(b, x)|`` with ``ls(w, x) = log P(w | x) / P(w)``; the prior
    masks the stereotype position as well. Per (x, pair) cell the differences
    are averaged over templates, cells are summed.

    Args:
        model (ModelHandle): The model.
        templates (Sequence[str]): Templates with ``{attribute}`` and ``{target}``.
        stereotypes: Stereotype words X.
        pairs (Sequence[AttributePair]): Paired attribute terms, single word pieces.
        floor (float): Lower bound applied to probabilities before the log.

    Returns:
        LpbsResult: Score and per-template breakdown.

    Raises:
        MultiPieceError: If an attribute term is not a single word piece.
        NumericalPriorError: If a prior is not a finite number.
    """
    stereotypes = sorted(stereotypes)
    ids = {term: _piece_id(model, term) for pair in pairs for term in (pair.female_term, pair.male_term)}
    if not templates or not stereotypes or not pairs:
        raise EmptyEvaluationError("attribute LPBS needs templates, stereotypes and pairs")

    queries = []
    for template in templates:
        queries.append(template.format(attribute=MASK_SLOT, target=BLANK_SLOT))
        queries.extend(template.format(attribute=MASK_SLOT, target=target) for target in stereotypes)
    distributions = iter(masked_distributions(model, queries))

    terms = []
    for template in templates:
        prior = next(distributions).probabilities
        for target in stereotypes:
            conditional = next(distributions).probabilities
            for pair in pairs:
                scores = []
                for term in (pair.female_term, pair.male_term):
                    scores.append(
                        _log_probability(conditional[ids[term]], floor, f"P({term}|{target})")
                        - _log_probability(prior[ids[term]], floor, f"P({term}) in '{template}'")
                    )
                terms.append(LpbsTerm(
                    template=template, target=target, female_term=pair.female_term, male_term=pair.male_term,
                    female_score=scores[0], male_score=scores[1], difference=abs(scores[0] - scores[1]),
                ))
    return _aggregate(terms, "attribute")


def target_lpbs(model: ModelHandle, templates: Sequence[str], stereotypes, pairs: Sequence[AttributePair],
                floor: float = PROBABILITY_FLOOR) -> LpbsResult:
    """
    Log probability bias score with the stereotype position queried.

    Adds ``|ls(x, a) - ls(x, b)|`` with the attribute term in context and the
    prior taken with the attribute position masked. Stereotypes that are not
    a single word piece are dropped with a warning.

    Raises:
        EmptyEvaluationError: If no stereotype is a single word piece.
    """
    stereotypes = sorted(stereotypes)
    kept = [word for word in stereotypes if model.is_single_piece(word)]
    dropped = sorted(set(stereotypes) - set(kept))
    if dropped:
        logger.warning("Target LPBS drops %d multi-piece stereotype(s): %s", len(dropped), ", ".join(dropped))
    if not kept:
        raise EmptyEvaluationError("no single-wordpiece stereotype is left for target LPBS")
    if not templates or not pairs:
        raise EmptyEvaluationError("target LPBS needs templates and pairs")
    ids = {word: model.piece_ids(word)[0] for word in kept}

    queries = []
    for template in templates:
        queries.append(template.format(attribute=BLANK_SLOT, target=MASK_SLOT))
        for pair in pairs:
            queries.append(template.format(attribute=pair.female_term, target=MASK_SLOT))
            queries.append(template.format(attribute=pair.male_term, target=MASK_SLOT))
    distributions = iter(masked_distributions(model, queries))

    terms = []
    for template in templates:
        prior = next(distributions).probabilities
        conditionals = [(pair, next(distributions).probabilities, next(distributions).probabilities) for pair in pairs]
        for target in kept:
            prior_log = _log_probability(prior[ids[target]], floor, f"P({target}) in '{template}'")
            for pair, female, male in conditionals:
                female_score = _log_probability(female[ids[target]], floor, f"P({target}|{pair.female_term})") - prior_log
                male_score = _log_probability(male[ids[target]], floor, f"P({target}|{pair.male_term})") - prior_log
                terms.append(LpbsTerm(
                    template=template, target=target, female_term=pair.female_term, male_term=pair.male_term,
                    female_score=female_score, male_score=male_score, difference=abs(female_score - male_score),
                ))
    return _aggregate(terms, "target")
