"""
Module for loading the gender word lists that drive every audit step.

It provides the attribute (identity) pairs, the female/male stereotype sets,
the name pairs used by the name intervention, counterfactual term mapping
and the train/test split of attribute words used by the probe.
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from decouple import config
from pydantic import BaseModel, ConfigDict, PrivateAttr, ValidationError, field_validator, model_validator

from exceptions import InsufficientDataError, LexiconFormatError, LexiconValidationError

logger = logging.getLogger(__name__)

DEFAULT_LEXICON_PATH = config(
    "LEXICON_PATH", default=str(Path(__file__).parent / "data" / "lexicon.json")
)

FEMALE = "f"
MALE = "m"
Gender = Literal["f", "m"]

WORD_PATTERN = re.compile(r"\w+|[^\w\s]")
SWAP_PATTERN = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """
    Splits text into word and punctuation tokens.

    Args:
        text (str): The text to split.

    Returns:
        list[str]: Tokens in order of appearance.
    """
    return WORD_PATTERN.findall(text)


def _normalize_term(value: str) -> str:
    term = value.strip().lower()
    if not term:
        raise LexiconValidationError("lexicon terms must be nonempty", term=value)
    if len(tokenize(term)) != 1:
        raise LexiconValidationError(f"multi-word lexicon entry '{value}' is not allowed", term=value)
    return term


class AttributePair(BaseModel):
    """
    A female term and its male counterpart.

    Attributes:
        female_term (str): The female member, e.g. "she".
        male_term (str): The male member, e.g. "he".
    """
    model_config = ConfigDict(frozen=True)

    female_term: str
    male_term: str

    @field_validator("female_term", "male_term")
    @classmethod
    def normalize(cls, value: str) -> str:
        return _normalize_term(value)


class Lexicon(BaseModel):
    """
    The word lists of an audit.

    Attributes:
        attribute_pairs (tuple[AttributePair]): Swappable identity terms.
        stereotypes_female (frozenset[str]): Female stereotype terms (X_f).
        stereotypes_male (frozenset[str]): Male stereotype terms (X_m).
        name_pairs (tuple[AttributePair]): Paired first names for the name intervention.
        extra_attributes_female (frozenset[str]): Unpaired female identity terms.
        extra_attributes_male (frozenset[str]): Unpaired male identity terms.
    """
    model_config = ConfigDict(frozen=True)

    attribute_pairs: tuple[AttributePair, ...]
    stereotypes_female: frozenset[str]
    stereotypes_male: frozenset[str]
    name_pairs: tuple[AttributePair, ...] = ()
    extra_attributes_female: frozenset[str] = frozenset()
    extra_attributes_male: frozenset[str] = frozenset()

    _attribute_swaps: dict = PrivateAttr(default_factory=dict)
    _name_swaps: dict = PrivateAttr(default_factory=dict)

    @field_validator(
        "stereotypes_female", "stereotypes_male", "extra_attributes_female", "extra_attributes_male",
        mode="before",
    )
    @classmethod
    def normalize_terms(cls, value):
        return frozenset(_normalize_term(term) for term in value)

    def model_post_init(self, __context) -> None:
        self._attribute_swaps = _swap_map(self.attribute_pairs)
        self._name_swaps = _swap_map(self.name_pairs)

    @model_validator(mode="after")
    def check_invariants(self):
        _bijection(self.attribute_pairs, "attribute")
        _bijection(self.name_pairs, "name")

        overlap = self.female_terms & self.male_terms
        if overlap:
            term = min(overlap)
            raise LexiconValidationError(f"'{term}' is both a female and a male attribute term", term=term)
        overlap = self.stereotypes_female & self.stereotypes_male
        if overlap:
            term = min(overlap)
            raise LexiconValidationError(f"'{term}' is in both stereotype sets", term=term)
        overlap = self.attribute_terms & self.stereotypes
        if overlap:
            term = min(overlap)
            raise LexiconValidationError(f"'{term}' is both an attribute and a stereotype term", term=term)
        overlap = self.names & (self.attribute_terms | self.stereotypes)
        if overlap:
            term = min(overlap)
            raise LexiconValidationError(f"name '{term}' collides with an attribute or stereotype term", term=term)
        return self

    @property
    def female_terms(self) -> frozenset[str]:
        """W_f: paired and unpaired female attribute terms."""
        return frozenset(p.female_term for p in self.attribute_pairs) | self.extra_attributes_female

    @property
    def male_terms(self) -> frozenset[str]:
        """W_m: paired and unpaired male attribute terms."""
        return frozenset(p.male_term for p in self.attribute_pairs) | self.extra_attributes_male

    @property
    def attribute_terms(self) -> frozenset[str]:
        return self.female_terms | self.male_terms

    @property
    def stereotypes(self) -> frozenset[str]:
        return self.stereotypes_female | self.stereotypes_male

    @property
    def names(self) -> frozenset[str]:
        return frozenset(term for pair in self.name_pairs for term in (pair.female_term, pair.male_term))

    @property
    def female_names(self) -> frozenset[str]:
        return frozenset(pair.female_term for pair in self.name_pairs)

    def attribute_gender(self, word: str) -> Optional[Gender]:
        word = word.lower()
        if word in self.female_terms:
            return FEMALE
        if word in self.male_terms:
            return MALE
        return None

    def stereotype_gender(self, word: str) -> Optional[Gender]:
        word = word.lower()
        if word in self.stereotypes_female:
            return FEMALE
        if word in self.stereotypes_male:
            return MALE
        return None


def _swap_map(pairs) -> dict:
    mapping = {}
    for pair in pairs:
        mapping[pair.female_term] = pair.male_term
        mapping[pair.male_term] = pair.female_term
    return mapping


def _bijection(pairs, kind: str) -> None:
    mapping = {}
    seen_pairs = set()
    for pair in pairs:
        key = (pair.female_term, pair.male_term)
        if key in seen_pairs:
            raise LexiconValidationError(f"duplicate {kind} pair {key}", term=pair.female_term)
        seen_pairs.add(key)
        if pair.female_term == pair.male_term:
            raise LexiconValidationError(f"{kind} pair maps '{pair.female_term}' to itself", term=pair.female_term)
        for term in key:
            if term in mapping:
                raise LexiconValidationError(f"'{term}' appears in two {kind} pairs", term=term)
        mapping[pair.female_term] = pair.male_term
        mapping[pair.male_term] = pair.female_term


class AttributeSplit(BaseModel):
    """
    A pair-consistent split of the attribute terms.

    Attributes:
        train_words (frozenset[str]): W_T, used to train the probe.
        test_words (frozenset[str]): W_I, held out to verify the probe generalizes.
        seed (int): Seed the split was drawn with.
    """
    model_config = ConfigDict(frozen=True)

    train_words: frozenset[str]
    test_words: frozenset[str]
    seed: int

    @model_validator(mode="after")
    def check_disjoint(self):
        if self.train_words & self.test_words:
            raise ValueError("train and test attribute words must be disjoint")
        return self


class LexiconFile(BaseModel):
    """Raw layout of a lexicon document before deduplication and validation."""
    attribute_pairs: list[tuple[str, str]]
    stereotypes_female: list[str]
    stereotypes_male: list[str]
    name_pairs: list[tuple[str, str]] = []
    extra_attributes_female: list[str] = []
    extra_attributes_male: list[str] = []


def _dedupe(values: list, label: str) -> list:
    unique = []
    seen = set()
    for value in values:
        key = tuple(v.strip().lower() for v in value) if isinstance(value, (tuple, list)) else value.strip().lower()
        if key in seen:
            logger.warning("Dropping duplicate entry %r from %s", value, label)
            continue
        seen.add(key)
        unique.append(value)
    return unique


def load_lexicon(path=DEFAULT_LEXICON_PATH) -> Lexicon:
    """
    Loads and validates a lexicon document.

    Duplicates inside any list are dropped with a warning.

    Args:
        path: Path to a UTF-8 JSON lexicon file.

    Returns:
        Lexicon: The validated lexicon.

    Raises:
        LexiconFormatError: If the document cannot be parsed.
        LexiconValidationError: If an invariant is violated; names the offending term.
    """
    try:
        raw = LexiconFile.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise LexiconFormatError(f"cannot read lexicon {path}: {e}")

    lexicon = Lexicon(
        attribute_pairs=[AttributePair(female_term=f, male_term=m)
                         for f, m in _dedupe(raw.attribute_pairs, "attribute_pairs")],
        stereotypes_female=_dedupe(raw.stereotypes_female, "stereotypes_female"),
        stereotypes_male=_dedupe(raw.stereotypes_male, "stereotypes_male"),
        name_pairs=[AttributePair(female_term=f, male_term=m) for f, m in _dedupe(raw.name_pairs, "name_pairs")],
        extra_attributes_female=_dedupe(raw.extra_attributes_female, "extra_attributes_female"),
        extra_attributes_male=_dedupe(raw.extra_attributes_male, "extra_attributes_male"),
    )
    for label, terms in (("attribute terms", lexicon.attribute_pairs),
                         ("female stereotypes", lexicon.stereotypes_female),
                         ("male stereotypes", lexicon.stereotypes_male)):
        if not terms:
            raise LexiconValidationError(f"lexicon {path} has no {label}")
    logger.info(
        "Loaded lexicon %s: |W|=%d, |X|=%d, %d name pairs",
        path, len(lexicon.attribute_terms), len(lexicon.stereotypes), len(lexicon.name_pairs),
    )
    return lexicon


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_attribute_terms(lexicon: Lexicon, train_fraction: float, seed: int) -> AttributeSplit:
    """
    Splits the attribute terms into probe train and test words.

    Both members of a pair always land on the same side. Unpaired terms are
    split with the same fraction.

    Args:
        lexicon (Lexicon): The lexicon to split.
        train_fraction (float): Share of pairs assigned to training, in (0, 1).
        seed (int): Seed of the random permutation.

    Returns:
        AttributeSplit: The split.

    Raises:
        InsufficientDataError: If the lexicon holds fewer than two pairs.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    pairs = sorted(lexicon.attribute_pairs, key=lambda p: (p.female_term, p.male_term))
    if len(pairs) < 2:
        raise InsufficientDataError(f"need at least 2 attribute pairs to split, got {len(pairs)}")

    rng = np.random.default_rng(seed)
    n_train = min(max(_round_half_up(train_fraction * len(pairs)), 1), len(pairs) - 1)
    order = rng.permutation(len(pairs))
    train = {term for i in order[:n_train] for term in (pairs[i].female_term, pairs[i].male_term)}
    test = {term for i in order[n_train:] for term in (pairs[i].female_term, pairs[i].male_term)}

    extras = sorted((lexicon.extra_attributes_female | lexicon.extra_attributes_male) - train - test)
    if extras:
        n_extra = _round_half_up(train_fraction * len(extras))
        extra_order = rng.permutation(len(extras))
        train.update(extras[i] for i in extra_order[:n_extra])
        test.update(extras[i] for i in extra_order[n_extra:])

    return AttributeSplit(train_words=frozenset(train), test_words=frozenset(test), seed=seed)


def _match_case(source: str, target: str) -> str:
    if len(source) > 1 and source.isupper():
        return target.upper()
    if source[:1].isupper():
        return target[:1].upper() + target[1:]
    return target


def counterfactual_of(token: str, lexicon: Lexicon, use_names: bool = False) -> Optional[str]:
    """
    Returns the paired term of an attribute (or name) token.

    Matching is case-insensitive; the result copies the source's lower,
    initial-capital or all-caps pattern. Stereotypes are never swapped.

    Args:
        token (str): The token to map.
        lexicon (Lexicon): The lexicon holding the pairs.
        use_names (bool): Whether name pairs are swapped too.

    Returns:
        Optional[str]: The counterfactual term, or None if the token has no pair.
    """
    key = token.lower()
    target = lexicon._attribute_swaps.get(key)
    if target is None and use_names:
        target = lexicon._name_swaps.get(key)
    if target is None:
        return None
    return _match_case(token, target)


def swap_text(text: str, lexicon: Lexicon, use_names: bool = False) -> str:
    """
    Swaps every swappable token of a text simultaneously.

    Args:
        text (str): The source text.
        lexicon (Lexicon): The lexicon holding the pairs.
        use_names (bool): Whether name pairs are swapped too.

    Returns:
        str: The counterfactual text (equal to the source if nothing was swappable).
    """
    def replace(match):
        return counterfactual_of(match.group(0), lexicon, use_names) or match.group(0)

    return SWAP_PATTERN.sub(replace, text)


def lexicon_hits(text: str, lexicon: Lexicon, include_names: bool = True) -> list[str]:
    """
    Lists the tokens of a text that are attribute terms (or names).

    Args:
        text (str): The text to scan.
        lexicon (Lexicon): The lexicon.
        include_names (bool): Whether names count as hits.

    Returns:
        list[str]: The matching tokens, in order.
    """
    terms = lexicon.attribute_terms | (lexicon.names if include_names else frozenset())
    return [token for token in tokenize(text) if token.lower() in terms]


def restrict(lexicon: Lexicon, keep: Callable[[str], bool]) -> Lexicon:
    """
    Keeps only the terms accepted by a predicate.

    A pair survives only if both of its members are kept.

    Args:
        lexicon (Lexicon): The lexicon to filter.
        keep (Callable[[str], bool]): Predicate deciding whether a term stays.

    Returns:
        Lexicon: The filtered lexicon.
    """
    def keep_pairs(pairs):
        return tuple(p for p in pairs if keep(p.female_term) and keep(p.male_term))

    return Lexicon(
        attribute_pairs=keep_pairs(lexicon.attribute_pairs),
        stereotypes_female=frozenset(filter(keep, lexicon.stereotypes_female)),
        stereotypes_male=frozenset(filter(keep, lexicon.stereotypes_male)),
        name_pairs=keep_pairs(lexicon.name_pairs),
        extra_attributes_female=frozenset(filter(keep, lexicon.extra_attributes_female)),
        extra_attributes_male=frozenset(filter(keep, lexicon.extra_attributes_male)),
    )
