"""
Module implementing the intrinsic mitigation techniques.

Sent-debias:
    A gender subspace is estimated with PCA from sentence representations of
    counterfactual sentence pairs and projected out of final hidden states.
Context-debias:
    The encoder is retrained so that stereotype occurrence embeddings become
    orthogonal to fixed attribute word embeddings at every layer, with a
    regularizer keeping attribute-sentence embeddings close to the original.
CDA:
    Counterfactual copies of every sentence holding attribute terms are added
    to a corpus, which is then used for further masked-LM training.
"""

import copy
import json
import logging
import math
from collections.abc import Mapping
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import torch
from decouple import config
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.decomposition import PCA
from torch import nn
from tqdm import tqdm

from corpus import HASH_HEADER_BYTES, EmbeddingBank, SentenceOccurrence, WordVectors, array_paths
from exceptions import InsufficientDataError, RankError, TrainingFailureError
from lexicon import Lexicon, lexicon_hits, swap_text, tokenize
from model_adapter import ModelHandle, clone_for_training, inference, pooled_representation

logger = logging.getLogger(__name__)

SENT_DEBIAS_K = config("SENT_DEBIAS_K", default=1, cast=int)
CONTEXT_DEBIAS_ALPHA = config("CONTEXT_DEBIAS_ALPHA", default=1.0, cast=float)
CONTEXT_DEBIAS_BETA = config("CONTEXT_DEBIAS_BETA", default=1.0, cast=float)
CONTEXT_DEBIAS_EPOCHS = config("CONTEXT_DEBIAS_EPOCHS", default=3, cast=int)
CONTEXT_DEBIAS_LEARNING_RATE = config("CONTEXT_DEBIAS_LEARNING_RATE", default=5e-5, cast=float)
CDA_EPOCHS = config("CDA_EPOCHS", default=1, cast=int)
CDA_LEARNING_RATE = config("CDA_LEARNING_RATE", default=5e-5, cast=float)
MLM_MASK_PROBABILITY = config("MLM_MASK_PROBABILITY", default=0.15, cast=float)
TRAINING_BATCH_SIZE = config("TRAINING_BATCH_SIZE", default=16, cast=int)

LOSS_TOLERANCE = 1e-6


class BiasSubspace(BaseModel):
    """
    Orthonormal basis of the estimated gender subspace.

    Attributes:
        basis (np.ndarray): Shape (k, hidden_size), orthonormal rows.
        explained_variance (list[float]): Variance along every basis vector.
        model_id (str): Model the definition pairs were embedded with.
        corpus_hash (str): Hash of the corpus the definition sentences came from.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    basis: np.ndarray
    explained_variance: list[float]
    model_id: str = ""
    corpus_hash: str = ""

    @model_validator(mode="after")
    def check_orthonormal(self):
        self.basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        gram = self.basis @ self.basis.T
        if not np.allclose(gram, np.eye(len(self.basis)), atol=1e-6):
            raise ValueError("subspace basis vectors must be orthonormal")
        if len(self.explained_variance) != len(self.basis):
            raise ValueError("one explained variance per basis vector is required")
        return self

    @property
    def k(self) -> int:
        return len(self.basis)


class ContextDebiasConfig(BaseModel):
    """
    Weights and fixed attribute vectors of the Context-debias objective.

    Attributes:
        alpha (float): Weight of the orthogonality term.
        beta (float): Weight of the regularizer.
        attribute_vectors (dict[int, np.ndarray]): Layer index to (attribute words, hidden_size) matrix.
        layer_set (list[int]): Hidden-state indices constrained; all encoder layers when empty.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    alpha: float = Field(default=CONTEXT_DEBIAS_ALPHA, ge=0)
    beta: float = Field(default=CONTEXT_DEBIAS_BETA, ge=0)
    attribute_vectors: dict[int, np.ndarray] = {}
    layer_set: list[int] = []

    @model_validator(mode="after")
    def check_weights(self):
        if not self.alpha + self.beta > 0:
            raise ValueError("alpha + beta must be positive")
        return self


class TrainingSchedule(BaseModel):
    epochs: int = Field(default=CONTEXT_DEBIAS_EPOCHS, ge=1)
    learning_rate: float = Field(default=CONTEXT_DEBIAS_LEARNING_RATE, gt=0)
    batch_size: int = Field(default=TRAINING_BATCH_SIZE, ge=1)
    seed: int = 0
    progress: bool = False


class CdaSchedule(TrainingSchedule):
    epochs: int = Field(default=CDA_EPOCHS, ge=1)
    learning_rate: float = Field(default=CDA_LEARNING_RATE, gt=0)
    mask_probability: float = Field(default=MLM_MASK_PROBABILITY, gt=0, lt=1)
    use_names: bool = False


def definition_pairs(model: ModelHandle, sentences: Iterable[str], lexicon: Lexicon,
                     use_names: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Sentence representations of attribute-bearing sentences and of their counterfactuals.

    Args:
        model (ModelHandle): The model.
        sentences (Iterable[str]): Candidate sentences; those without a swappable term are skipped.
        lexicon (Lexicon): Attribute pairs used for swapping.
        use_names (bool): Whether names are swapped too.

    Returns:
        list[tuple[np.ndarray, np.ndarray]]: (original, counterfactual) pooled vectors.
    """
    originals, counterfactuals = [], []
    for sentence in sentences:
        swapped = swap_text(sentence, lexicon, use_names)
        if swapped != sentence:
            originals.append(sentence)
            counterfactuals.append(swapped)
    first = pooled_representation(model, originals)
    second = pooled_representation(model, counterfactuals)
    return list(zip(first, second))


def compute_bias_subspace(pairs: Sequence[Sequence[np.ndarray]], k: int = SENT_DEBIAS_K) -> BiasSubspace:
    """
    Top-k principal directions of pair-centered definition embeddings.

    Every pair (or larger set) is centered on its own mean; PCA runs over the
    union of centered vectors.

    Args:
        pairs: Sequence of definition sets, each a sequence of equal-width vectors.
        k (int): Subspace dimension.

    Returns:
        BiasSubspace: Orthonormal basis and explained variances.

    Raises:
        RankError: If the centered vectors span fewer than k dimensions.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not pairs:
        raise InsufficientDataError("no definition pairs to estimate a subspace from")
    centered = []
    for group in pairs:
        group = np.asarray(group, dtype=np.float64)
        centered.append(group - group.mean(axis=0))
    samples = np.concatenate(centered)
    rank = int(np.linalg.matrix_rank(samples))
    if rank < k:
        raise RankError(k, rank)

    pca = PCA(n_components=k, svd_solver="full").fit(samples)
    logger.info("Bias subspace of k=%d explains %.3f of the definition variance",
                k, float(np.sum(pca.explained_variance_ratio_)))
    return BiasSubspace(basis=pca.components_, explained_variance=pca.explained_variance_.tolist())


def sent_debias(h: np.ndarray, subspace: BiasSubspace) -> np.ndarray:
    """
    Removes the projection of ``h`` onto the bias subspace.

    Works on one vector or on a matrix of row vectors.
    """
    h = np.asarray(h, dtype=np.float64)
    return h - (h @ subspace.basis.T) @ subspace.basis


def debias_bank(bank: EmbeddingBank, subspace: BiasSubspace) -> EmbeddingBank:
    return bank.map_vectors(lambda vectors: sent_debias(vectors, subspace).astype(np.float32))


def equalize_bank(bank: EmbeddingBank, lexicon: Lexicon, subspace: BiasSubspace) -> EmbeddingBank:
    """
    Equalizes attribute pairs outside the bias subspace.

    Occurrences of both pair members are shifted so that their word means
    coincide outside the subspace, keeping their symmetric in-subspace offsets.
    Pairs with a member missing from the bank are left alone.
    """
    entries = dict(bank.entries)
    for pair in lexicon.attribute_pairs:
        if pair.female_term not in bank or pair.male_term not in bank:
            continue
        means = {term: bank.vectors(term).astype(np.float64).mean(axis=0) for term in (pair.female_term, pair.male_term)}
        center = (means[pair.female_term] + means[pair.male_term]) / 2
        for term, mean in means.items():
            outside = sent_debias(mean - center, subspace)
            entry = bank.entries[term]
            entries[term] = WordVectors(
                vectors=(entry.vectors - outside).astype(np.float32),
                sentence_ids=entry.sentence_ids,
                positions=entry.positions,
            )
    return EmbeddingBank(model_id=bank.model_id, hidden_size=bank.hidden_size, entries=entries, metadata=bank.metadata)


def apply_sent_debias(model: ModelHandle, subspace: BiasSubspace) -> ModelHandle:
    """Handle sharing the network whose final hidden states are projected off the subspace."""
    if subspace.basis.shape[1] != model.hidden_size:
        raise ValueError(f"subspace width {subspace.basis.shape[1]} does not match hidden size {model.hidden_size}")
    debiased = model.with_projection(torch.tensor(subspace.basis, dtype=torch.float32))
    debiased.identifier = f"{model.identifier}+sent-debias"
    return debiased


def save_subspace(subspace: BiasSubspace, path) -> list:
    index_path, array_path = array_paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    header = subspace.corpus_hash.encode("ascii").ljust(HASH_HEADER_BYTES, b" ")[:HASH_HEADER_BYTES]
    array_path.write_bytes(header + subspace.basis.astype("<f4").tobytes())
    index = subspace.model_dump(exclude={"basis"}) | {"shape": list(subspace.basis.shape)}
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    return [index_path, array_path]


def load_subspace(path) -> BiasSubspace:
    index_path, array_path = array_paths(path)
    index = json.loads(index_path.read_text(encoding="utf-8"))
    shape = index.pop("shape")
    stored = np.frombuffer(array_path.read_bytes()[HASH_HEADER_BYTES:], dtype="<f4").reshape(shape).astype(np.float64)
    # float32 storage is only orthonormal to about 1e-7
    q, r = np.linalg.qr(stored.T)
    return BiasSubspace(basis=(q * np.sign(np.diag(r))).T, **index)


def _by_layer(value) -> dict:
    if isinstance(value, Mapping):
        return {layer: torch.as_tensor(tensor) for layer, tensor in value.items()}
    return {0: torch.as_tensor(value)}


def context_debias_loss(current_embeddings, attribute_vectors, original_embeddings,
                        debias_config: ContextDebiasConfig, regularized_embeddings=None) -> torch.Tensor:
    """
    The Context-debias objective ``alpha * L_i + beta * L_reg``.

    ``L_i`` sums the squared inner products between every stereotype occurrence
    embedding and every fixed attribute vector of the same layer; ``L_reg`` sums
    squared distances between current and frozen embeddings of attribute-sentence
    tokens. Tensors may be given per layer (``{layer: tensor}``) or as a single
    tensor.

    Args:
        current_embeddings: Stereotype occurrence embeddings, (n, hidden_size) per layer.
        attribute_vectors: Fixed attribute vectors, (m, hidden_size) per layer.
        original_embeddings: Frozen embeddings of attribute-sentence tokens.
        debias_config (ContextDebiasConfig): alpha and beta.
        regularized_embeddings: Current embeddings of the same attribute-sentence tokens.

    Returns:
        torch.Tensor: Scalar loss, differentiable in the current embeddings.
    """
    current = _by_layer(current_embeddings)
    anchors = _by_layer(attribute_vectors)
    orthogonality = sum(
        ((current[layer] @ anchors[layer].to(current[layer].dtype).T) ** 2).sum()
        for layer in sorted(current) if layer in anchors
    )
    regularizer = 0.0
    if regularized_embeddings is not None and debias_config.beta > 0:
        moving = _by_layer(regularized_embeddings)
        frozen = _by_layer(original_embeddings)
        regularizer = sum(((moving[layer] - frozen[layer].to(moving[layer].dtype)) ** 2).sum() for layer in sorted(moving))
    return debias_config.alpha * torch.as_tensor(orthogonality) + debias_config.beta * torch.as_tensor(regularizer)


def _encode_occurrences(model: ModelHandle, occurrences: Sequence[SentenceOccurrence]):
    encodings, rows, pieces, words = [], [], [], []
    for row, occurrence in enumerate(occurrences):
        tokens = tokenize(occurrence.sentence)
        encoding = model.encode_words(tokens)
        encodings.append(encoding)
        for position, token in enumerate(tokens):
            if token.lower() == occurrence.word and position in encoding.word_index:
                rows.append(row)
                pieces.append(encoding.word_index.index(position))
                words.append(occurrence.word)
    return encodings, rows, pieces, words


def _batches(items: Sequence, batch_size: int, rng: Optional[np.random.Generator] = None) -> list:
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    return [[items[i] for i in order[start:start + batch_size]] for start in range(0, len(items), batch_size)]


def attribute_word_vectors(model: ModelHandle, occurrences: Sequence[SentenceOccurrence], layers: Sequence[int],
                           batch_size: int = TRAINING_BATCH_SIZE) -> dict[int, np.ndarray]:
    """
    Fixed per-layer attribute vectors: the average of every occurrence embedding of each attribute word.

    Returns:
        dict[int, np.ndarray]: Layer index to (attribute words, hidden_size) matrix, words in sorted order.
    """
    sums, counts = {}, {}
    with inference(model):
        for batch in _batches(occurrences, batch_size):
            encodings, rows, pieces, words = _encode_occurrences(model, batch)
            if not rows:
                continue
            states = model.hidden_states(*model.collate(encodings))
            for layer in layers:
                vectors = states[layer][rows, pieces].double().cpu().numpy()
                for word, vector in zip(words, vectors):
                    sums.setdefault(layer, {}).setdefault(word, np.zeros_like(vector))
                    sums[layer][word] += vector
            for word in words:
                counts[word] = counts.get(word, 0) + 1
    if not counts:
        raise InsufficientDataError("no attribute occurrences to build fixed attribute vectors from")
    return {
        layer: np.stack([sums[layer][word] / counts[word] for word in sorted(counts)])
        for layer in layers
    }


def _context_debias_step(clone: ModelHandle, original: ModelHandle, stereotype_batch, attribute_batch,
                         layers: Sequence[int], anchors: dict, debias_config: ContextDebiasConfig) -> torch.Tensor:
    encodings, rows, pieces, _ = _encode_occurrences(clone, stereotype_batch)
    current = {}
    if rows:
        states = clone.hidden_states(*clone.collate(encodings))
        current = {layer: states[layer][rows, pieces] for layer in layers}

    moving = frozen = None
    if attribute_batch and debias_config.beta > 0:
        texts = [occurrence.sentence for occurrence in attribute_batch]
        batch = clone.collate([clone.encode_words(tokenize(text)) for text in texts])
        keep = batch[1].bool()
        states = clone.hidden_states(*batch)
        moving = {layer: states[layer][keep] for layer in layers}
        with inference(original):
            original_states = original.hidden_states(*batch)
            frozen = {layer: original_states[layer][keep] for layer in layers}
    return context_debias_loss(current, anchors, frozen, debias_config, moving)


def run_context_debias(model: ModelHandle, lexicon: Lexicon, attribute_sentences: Sequence[SentenceOccurrence],
                       stereotype_sentences: Sequence[SentenceOccurrence], debias_config: ContextDebiasConfig = None,
                       schedule: TrainingSchedule = None) -> ModelHandle:
    """
    Retrains a copy of the model with the Context-debias objective.

    Args:
        model (ModelHandle): Source model; stays untouched and serves as the frozen original.
        lexicon (Lexicon): Attribute and stereotype words.
        attribute_sentences (Sequence[SentenceOccurrence]): Harvested sentences of attribute words.
        stereotype_sentences (Sequence[SentenceOccurrence]): Harvested sentences of stereotype words
            (Omega(t) of a stereotype t is the set of its sentences).
        debias_config (ContextDebiasConfig): alpha, beta, layers and optionally precomputed attribute vectors.
        schedule (TrainingSchedule): Epochs, learning rate, batch size and seed.

    Returns:
        ModelHandle: The retrained copy with one loss per epoch in ``training_history``.

    Raises:
        TrainingFailureError: If the loss stops being finite; carries the last finite state dict.
    """
    debias_config = debias_config or ContextDebiasConfig()
    schedule = schedule or TrainingSchedule()
    layers = debias_config.layer_set or list(range(1, model.num_layers + 1))
    attribute_sentences = [o for o in attribute_sentences if o.word in lexicon.attribute_terms]
    stereotype_sentences = [o for o in stereotype_sentences if o.word in lexicon.stereotypes]
    if not stereotype_sentences:
        raise InsufficientDataError("Context-debias needs stereotype sentences")

    anchors = debias_config.attribute_vectors or attribute_word_vectors(model, attribute_sentences, layers,
                                                                        schedule.batch_size)
    anchors = {layer: torch.as_tensor(anchors[layer], dtype=torch.float32) for layer in layers}

    clone = clone_for_training(model)
    clone.identifier = f"{model.identifier}+context-debias"
    torch.manual_seed(schedule.seed)
    optimizer = torch.optim.AdamW(clone.network.parameters(), lr=schedule.learning_rate, weight_decay=0.0)
    rng = np.random.default_rng(schedule.seed)
    checkpoint = copy.deepcopy(clone.network.state_dict())

    for epoch in tqdm(range(schedule.epochs), desc="context-debias", disable=not schedule.progress):
        stereotype_batches = _batches(stereotype_sentences, schedule.batch_size, rng)
        attribute_batches = _batches(attribute_sentences, schedule.batch_size, rng) or [[]]
        losses = []
        for step, stereotype_batch in enumerate(stereotype_batches):
            attribute_batch = attribute_batches[step % len(attribute_batches)]
            optimizer.zero_grad()
            loss = _context_debias_step(clone, model, stereotype_batch, attribute_batch, layers, anchors, debias_config)
            if not torch.isfinite(loss):
                raise TrainingFailureError(f"Context-debias loss diverged in epoch {epoch + 1}", checkpoint)
            if not loss.requires_grad:
                continue
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            checkpoint = copy.deepcopy(clone.network.state_dict())
        _record_epoch(clone, epoch, losses, "Context-debias")

    clone.network.eval()
    return clone


def _record_epoch(clone: ModelHandle, epoch: int, losses: list, label: str) -> None:
    average = float(np.mean(losses)) if losses else math.nan
    history = clone.training_history
    if history and average > history[-1] + LOSS_TOLERANCE * max(1.0, abs(history[-1])):
        logger.warning("%s epoch %d loss rose from %.6f to %.6f", label, epoch + 1, history[-1], average)
    history.append(average)
    logger.info("%s epoch %d: mean loss %.6f", label, epoch + 1, average)


def generate_cda_corpus(corpus: Iterable[str], lexicon: Lexicon, use_names: bool = False) -> Iterator[str]:
    """
    Yields every line followed, when it holds a swappable term, by its counterfactual.

    All swappable tokens of a line are swapped at once.

    Args:
        corpus (Iterable[str]): Lines of text.
        lexicon (Lexicon): Attribute pairs (and name pairs).
        use_names (bool): Whether names are swapped too.
    """
    for line in corpus:
        line = line.rstrip("\n")
        yield line
        if lexicon_hits(line, lexicon, include_names=use_names):
            swapped = swap_text(line, lexicon, use_names)
            if swapped != line:
                yield swapped


def _mask_tokens(model: ModelHandle, encodings, input_ids: torch.Tensor, probability: float,
                 generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    maskable = torch.zeros_like(input_ids, dtype=torch.bool)
    for row, encoding in enumerate(encodings):
        for column, word in enumerate(encoding.word_index):
            maskable[row, column] = word is not None
    selected = (torch.rand(input_ids.shape, generator=generator) < probability) & maskable
    labels = torch.where(selected, input_ids, torch.full_like(input_ids, -100))

    roll = torch.rand(input_ids.shape, generator=generator)
    masked = input_ids.clone()
    masked[selected & (roll < 0.8)] = model.mask_token_id
    randomized = selected & (roll >= 0.8) & (roll < 0.9)
    vocabulary_size = len(model.vocabulary)
    masked[randomized] = torch.randint(vocabulary_size, input_ids.shape, generator=generator)[randomized]
    return masked, labels


def run_cda_pretraining(model: ModelHandle, lines: Iterable[str], lexicon: Lexicon,
                        schedule: CdaSchedule = None) -> ModelHandle:
    """
    Continues masked-LM training of a copy of the model on the counterfactually augmented corpus.

    15% of the word pieces are selected per batch (80% replaced by the mask
    token, 10% by a random token, 10% kept).

    Raises:
        InsufficientDataError: If the corpus is empty.
        TrainingFailureError: If the loss stops being finite.
    """
    schedule = schedule or CdaSchedule()
    augmented = [line for line in generate_cda_corpus(lines, lexicon, schedule.use_names) if line.strip()]
    if not augmented:
        raise InsufficientDataError("CDA pretraining needs a non-empty corpus")
    logger.info("CDA corpus holds %d lines", len(augmented))

    clone = clone_for_training(model)
    clone.identifier = f"{model.identifier}+cda"
    optimizer = torch.optim.AdamW(clone.network.parameters(), lr=schedule.learning_rate, weight_decay=0.0)
    generator = torch.Generator().manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    loss_function = nn.CrossEntropyLoss(ignore_index=-100)
    checkpoint = copy.deepcopy(clone.network.state_dict())

    for epoch in tqdm(range(schedule.epochs), desc="cda", disable=not schedule.progress):
        losses = []
        for batch in _batches(augmented, schedule.batch_size, rng):
            encodings = [clone.encode_words(tokenize(text)) for text in batch]
            input_ids, attention_mask = clone.collate(encodings)
            masked, labels = _mask_tokens(clone, encodings, input_ids.cpu(), schedule.mask_probability, generator)
            if not (labels != -100).any():
                continue
            optimizer.zero_grad()
            logits = clone.mlm_logits(masked.to(input_ids.device), attention_mask)
            loss = loss_function(logits.view(-1, logits.shape[-1]), labels.to(logits.device).view(-1))
            if not torch.isfinite(loss):
                raise TrainingFailureError(f"CDA loss diverged in epoch {epoch + 1}", checkpoint)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            checkpoint = copy.deepcopy(clone.network.state_dict())
        _record_epoch(clone, epoch, losses, "CDA")

    clone.network.eval()
    return clone
