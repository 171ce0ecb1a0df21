"""
Module for harvesting sentences that contain target words and turning them into embedding banks.

Classes:
    SentenceOccurrence: A sentence selected for one word.
    CoverageReport: How many sentences were found per word.
    WordVectors: All occurrence vectors of one word.
    BankMetadata: How a bank was created (corpus hash, cap, seed).
    EmbeddingBank: Per-word contextual vectors of one model.
"""

import hashlib
import json
import logging
import zlib
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np
from decouple import config
from pydantic import BaseModel, ConfigDict, model_validator

from exceptions import CorpusError
from lexicon import tokenize
from model_adapter import ContextualEmbedding, ModelHandle, embed_batch

logger = logging.getLogger(__name__)

HARVEST_CAP = config("HARVEST_CAP", default=1000, cast=int)
LOW_COVERAGE_THRESHOLD = config("LOW_COVERAGE_THRESHOLD", default=5, cast=int)

HASH_HEADER_BYTES = 64


class SentenceOccurrence(BaseModel):
    """
    A sentence harvested for a word.

    Attributes:
        sentence (str): The sentence text.
        word (str): The (lower-cased) word it was harvested for.
        sentence_id (int): Line number of the sentence in its corpus.
    """
    model_config = ConfigDict(frozen=True)

    sentence: str
    word: str
    sentence_id: Union[int, str]


class CoverageReport(BaseModel):
    counts: dict[str, int]
    missing: list[str]
    low_coverage: list[str]


class BankMetadata(BaseModel):
    corpus_hash: str = ""
    cap: Optional[int] = None
    seed: Optional[int] = None


class WordVectors(BaseModel):
    """
    Occurrence vectors of one word.

    Attributes:
        vectors (np.ndarray): float32 array of shape (n, hidden_size).
        sentence_ids (list): Source sentence of each row.
        positions (list[int]): Word index of each row inside its sentence.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vectors: np.ndarray
    sentence_ids: list[Union[int, str]]
    positions: list[int]

    @model_validator(mode="after")
    def check_lengths(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or not len(self.vectors) == len(self.sentence_ids) == len(self.positions):
            raise ValueError("vectors, sentence_ids and positions must have matching lengths")
        return self


class EmbeddingBank(BaseModel):
    """
    Contextual vectors of a model, indexed by word.

    Attributes:
        model_id (str): Identifier of the model that produced the vectors.
        hidden_size (int): Width of every vector.
        entries (dict[str, WordVectors]): Vectors per word.
        metadata (BankMetadata): Creation metadata.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model_id: str
    hidden_size: int
    entries: dict[str, WordVectors] = {}
    metadata: BankMetadata = BankMetadata()

    @model_validator(mode="after")
    def check_widths(self):
        for word, entry in self.entries.items():
            if entry.vectors.shape[1] != self.hidden_size:
                raise ValueError(f"vectors of '{word}' have width {entry.vectors.shape[1]}, expected {self.hidden_size}")
        return self

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def vectors(self, word: str) -> np.ndarray:
        return self.entries[word].vectors

    def occurrences(self, word: str) -> list[ContextualEmbedding]:
        entry = self.entries[word]
        return [
            ContextualEmbedding(vector=vector, word=word, sentence_id=sentence_id, position=position)
            for vector, sentence_id, position in zip(entry.vectors, entry.sentence_ids, entry.positions)
        ]

    def missing(self, words: Iterable[str]) -> set[str]:
        return {word for word in words if word not in self.entries}

    def map_vectors(self, transform: Callable[[np.ndarray], np.ndarray]) -> "EmbeddingBank":
        """Returns a bank whose per-word vector matrices went through ``transform``."""
        entries = {
            word: WordVectors(vectors=transform(entry.vectors), sentence_ids=entry.sentence_ids, positions=entry.positions)
            for word, entry in self.entries.items()
        }
        return EmbeddingBank(model_id=self.model_id, hidden_size=self.hidden_size, entries=entries, metadata=self.metadata)


def _lines(corpus) -> Iterable[str]:
    if isinstance(corpus, (str, Path)):
        with open(corpus, encoding="utf-8") as handle:
            yield from handle
    else:
        yield from corpus


def _word_rng(seed: int, word: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(word.encode("utf-8"))])


def harvest_sentences(corpus, words: Iterable[str], exclusion: Iterable[str] = (),
                      cap: int = HARVEST_CAP, seed: int = 0) -> list[SentenceOccurrence]:
    """
    Samples up to ``cap`` sentences per word from a one-sentence-per-line corpus.

    Matching is case-insensitive on word boundaries. A sentence holding any
    excluded token is skipped entirely. Sampling is uniform reservoir sampling
    with an independent seeded stream per word.

    Args:
        corpus: Path of a UTF-8 text file or an iterable of lines.
        words (Iterable[str]): Words to harvest.
        exclusion (Iterable[str]): Tokens that disqualify a sentence.
        cap (int): Maximum sentences per word.
        seed (int): Sampling seed.

    Returns:
        list[SentenceOccurrence]: Ordered by (word, sentence_id).

    Raises:
        CorpusError: If a harvested sentence still holds an excluded token.
    """
    if cap < 1:
        raise ValueError(f"cap must be at least 1, got {cap}")
    targets = {word.lower() for word in words}
    excluded = {word.lower() for word in exclusion}
    reservoirs = {word: [] for word in targets}
    seen = dict.fromkeys(targets, 0)
    rngs = {word: _word_rng(seed, word) for word in targets}

    for sentence_id, line in enumerate(_lines(corpus)):
        sentence = line.strip()
        if not sentence:
            continue
        tokens = {token.lower() for token in tokenize(sentence)}
        if tokens & excluded:
            continue
        for word in tokens & targets:
            seen[word] += 1
            reservoir = reservoirs[word]
            if len(reservoir) < cap:
                reservoir.append((sentence_id, sentence))
            else:
                slot = rngs[word].integers(seen[word])
                if slot < cap:
                    reservoir[slot] = (sentence_id, sentence)

    occurrences = [
        SentenceOccurrence(sentence=sentence, word=word, sentence_id=sentence_id)
        for word in sorted(reservoirs)
        for sentence_id, sentence in sorted(reservoirs[word])
    ]
    for occurrence in occurrences:
        leaked = {token.lower() for token in tokenize(occurrence.sentence)} & excluded
        if leaked:
            raise CorpusError(f"sentence {occurrence.sentence_id} holds excluded term(s) {sorted(leaked)}")
    return occurrences


def coverage_report(occurrences: Iterable[SentenceOccurrence], words: Iterable[str],
                    threshold: int = LOW_COVERAGE_THRESHOLD) -> CoverageReport:
    """
    Counts harvested sentences per word and flags missing and low-coverage words.

    Args:
        occurrences (Iterable[SentenceOccurrence]): Harvest result.
        words (Iterable[str]): The words that were requested.
        threshold (int): Words with fewer sentences are flagged low-coverage.

    Returns:
        CoverageReport: Counts, missing words and low-coverage words.
    """
    counts = {word.lower(): 0 for word in words}
    for occurrence in occurrences:
        counts[occurrence.word] = counts.get(occurrence.word, 0) + 1
    missing = sorted(word for word, count in counts.items() if count == 0)
    low = sorted(word for word, count in counts.items() if 0 < count < threshold)
    if missing:
        logger.warning("No sentences found for %d word(s): %s", len(missing), ", ".join(missing))
    if low:
        logger.warning("Low coverage (< %d sentences) for: %s", threshold, ", ".join(low))
    return CoverageReport(counts=dict(sorted(counts.items())), missing=missing, low_coverage=low)


def build_embedding_bank(model: ModelHandle, occurrences: list[SentenceOccurrence],
                         metadata: BankMetadata = None, progress: bool = False) -> EmbeddingBank:
    """
    Embeds every occurrence of every harvested word.

    Words that are not a single word piece are dropped with a warning; a
    sentence holding a word several times contributes several vectors.

    Args:
        model (ModelHandle): The model.
        occurrences (list[SentenceOccurrence]): Harvest result.
        metadata (BankMetadata): Creation metadata stored with the bank.
        progress (bool): Whether to show a progress bar.

    Returns:
        EmbeddingBank: The bank.
    """
    metadata = metadata or BankMetadata()
    if not occurrences:
        logger.warning("Building an empty embedding bank: no occurrences given")
        return EmbeddingBank(model_id=model.identifier, hidden_size=model.hidden_size, metadata=metadata)

    multi_piece = sorted({o.word for o in occurrences if not model.is_single_piece(o.word)})
    if multi_piece:
        logger.warning("Dropping %d multi-piece word(s): %s", len(multi_piece), ", ".join(multi_piece))
    items = [(o.sentence_id, o.sentence, o.word) for o in occurrences if o.word not in multi_piece]

    grouped = {}
    for embedding in embed_batch(model, items, progress=progress):
        grouped.setdefault(embedding.word, []).append(embedding)
    entries = {
        word: WordVectors(
            vectors=np.stack([e.vector for e in embeddings]),
            sentence_ids=[e.sentence_id for e in embeddings],
            positions=[e.position for e in embeddings],
        )
        for word, embeddings in sorted(grouped.items())
    }
    return EmbeddingBank(model_id=model.identifier, hidden_size=model.hidden_size, entries=entries, metadata=metadata)


def corpus_hash(path) -> str:
    """SHA-256 hex digest of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def array_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_name(path.name + ".index.json"), path.with_name(path.name + ".f32")


def save_bank(bank: EmbeddingBank, path) -> list[Path]:
    """
    Writes a bank as an index document plus a little-endian float32 array file.

    The array file starts with the corpus hash as a fixed-width ASCII header.

    Args:
        bank (EmbeddingBank): The bank.
        path: Base path; ``.index.json`` and ``.f32`` are appended.

    Returns:
        list[Path]: The two written files.
    """
    index_path, array_path = array_paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    words, offset, blocks = {}, 0, []
    for word in bank.words:
        entry = bank.entries[word]
        words[word] = {
            "offset": offset,
            "count": len(entry.vectors),
            "sentence_ids": entry.sentence_ids,
            "positions": entry.positions,
        }
        offset += len(entry.vectors)
        blocks.append(entry.vectors.astype("<f4"))

    header = bank.metadata.corpus_hash.encode("ascii").ljust(HASH_HEADER_BYTES, b" ")[:HASH_HEADER_BYTES]
    with open(array_path, "wb") as handle:
        handle.write(header)
        for block in blocks:
            handle.write(block.tobytes())
    index = {
        "model_id": bank.model_id,
        "hidden_size": bank.hidden_size,
        "metadata": bank.metadata.model_dump(),
        "words": words,
    }
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    return [index_path, array_path]


def load_bank(path) -> EmbeddingBank:
    """
    Reads a bank written by ``save_bank``.

    Raises:
        CorpusError: If the two files disagree on the corpus hash.
    """
    index_path, array_path = array_paths(path)
    index = json.loads(index_path.read_text(encoding="utf-8"))
    metadata = BankMetadata.model_validate(index["metadata"])
    raw = array_path.read_bytes()
    header = raw[:HASH_HEADER_BYTES].decode("ascii").strip()
    if header != metadata.corpus_hash[:HASH_HEADER_BYTES]:
        raise CorpusError(f"bank files {path} disagree on the corpus hash")
    hidden_size = index["hidden_size"]
    matrix = np.frombuffer(raw[HASH_HEADER_BYTES:], dtype="<f4").reshape(-1, hidden_size)
    entries = {
        word: WordVectors(
            vectors=matrix[info["offset"]:info["offset"] + info["count"]].astype(np.float32),
            sentence_ids=info["sentence_ids"],
            positions=info["positions"],
        )
        for word, info in index["words"].items()
    }
    return EmbeddingBank(model_id=index["model_id"], hidden_size=hidden_size, entries=entries, metadata=metadata)
