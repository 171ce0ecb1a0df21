"""
Module that puts a contextualized masked language model behind a small interface.

Every other module talks to a ``ModelHandle`` only: per-word contextual vectors
from the final encoder layer, vocabulary distributions at a masked position and
trainable copies for retraining and finetuning. Backends:

    TransformersHandle: any ``AutoModelForMaskedLM`` checkpoint.
    StubHandle (stub_model): a deterministic toy model for tests.
"""

import copy
import logging
import re
from abc import ABC, abstractmethod
from collections.abc import Mapping
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from decouple import config
from pydantic import BaseModel, ConfigDict, field_validator
from tqdm import tqdm

from exceptions import AllocationError, ModelLoadError, MultiPieceError, TemplateError
from lexicon import tokenize

logger = logging.getLogger(__name__)

INFERENCE_BATCH_SIZE = config("INFERENCE_BATCH_SIZE", default=32, cast=int)

MASK_SLOT = "<mask>"
BLANK_SLOT = "<blank>"
TEMPLATE_PATTERN = re.compile(r"<mask>|<blank>|\w+|[^\w\s]")
MASK_ALIASES = ("[MASK]",)


class ContextualEmbedding(BaseModel):
    """
    The vector of one occurrence of a word in a sentence.

    Attributes:
        vector (np.ndarray): float32 vector of length hidden_size.
        word (str): The embedded word.
        sentence_id: Identifier of the source sentence.
        position (int): Word index of the occurrence inside the sentence.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vector: np.ndarray
    word: str
    sentence_id: Union[int, str]
    position: int

    @field_validator("vector")
    @classmethod
    def finite_vector(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 1 or not np.all(np.isfinite(value)):
            raise ValueError("embedding vectors must be one-dimensional and finite")
        return value


class VocabDistribution(Mapping):
    """
    Probability of every vocabulary token at one masked position.

    Behaves as a read-only ``token -> probability`` mapping; ``probabilities``
    exposes the dense array indexed by token id.
    """

    def __init__(self, probabilities: np.ndarray, vocabulary: Mapping):
        self.probabilities = probabilities
        self._vocabulary = vocabulary

    def __getitem__(self, token: str) -> float:
        return float(self.probabilities[self._vocabulary[token]])

    def __iter__(self):
        return iter(self._vocabulary)

    def __len__(self) -> int:
        return len(self._vocabulary)


class EncodedWords(NamedTuple):
    input_ids: list
    word_index: list
    truncated: bool


class ModelHandle(ABC):
    """
    Backend-independent view of a masked language model.

    Attributes:
        identifier (str): Name the handle was loaded from.
        hidden_size (int): Width of the contextual vectors.
        vocabulary (Mapping[str, int]): Token to id map.
        max_sequence_length (int): Longest input, special tokens included.
        mask_token (str): The tokenizer's mask token.
        network (torch.nn.Module): The underlying trainable module.
        projection_basis (Optional[torch.Tensor]): Orthonormal rows removed from final hidden states.
    """

    def __init__(self, identifier: str, network: torch.nn.Module, hidden_size: int,
                 vocabulary: Mapping, max_sequence_length: int, mask_token: str):
        self.identifier = identifier
        self.network = network
        self.hidden_size = hidden_size
        self.vocabulary = vocabulary
        self.max_sequence_length = max_sequence_length
        self.mask_token = mask_token
        self.projection_basis = None
        self.training_history = []

    @property
    @abstractmethod
    def num_layers(self) -> int:
        """Number of encoder layers (the embedding layer excluded)."""

    @property
    @abstractmethod
    def pad_token_id(self) -> int:
        ...

    @abstractmethod
    def word_pieces(self, word: str) -> list[str]:
        """Word pieces of a single word, as the tokenizer splits it."""

    @abstractmethod
    def piece_ids(self, word: str) -> list[int]:
        ...

    @abstractmethod
    def add_special_tokens(self, ids: list[int]) -> tuple[list[int], int]:
        """Wraps ids with special tokens; returns the ids and the offset of the first original id."""

    @abstractmethod
    def _hidden_states(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> tuple:
        """Embedding-layer output followed by every encoder layer output."""

    @abstractmethod
    def _mlm_head(self, final_hidden: torch.Tensor) -> torch.Tensor:
        ...

    @property
    def mask_token_id(self) -> int:
        return self.vocabulary[self.mask_token]

    def is_single_piece(self, word: str) -> bool:
        return len(self.word_pieces(word)) == 1

    def encode_words(self, words: Sequence[str], max_length: int = None) -> EncodedWords:
        """
        Converts a word sequence into model input ids.

        ``<mask>`` and ``<blank>`` words become the mask token. Input longer
        than the limit is truncated with a warning.
        """
        limit = min(max_length or self.max_sequence_length, self.max_sequence_length)
        budget = limit - len(self.add_special_tokens([])[0])
        ids, word_index = [], []
        for index, word in enumerate(words):
            pieces = [self.mask_token_id] if word in (MASK_SLOT, BLANK_SLOT) else self.piece_ids(word)
            ids.extend(pieces)
            word_index.extend([index] * len(pieces))
        truncated = len(ids) > budget
        if truncated:
            logger.warning("Truncating input of %d pieces to %d", len(ids), budget)
            ids, word_index = ids[:budget], word_index[:budget]
        wrapped, offset = self.add_special_tokens(ids)
        aligned = [None] * len(wrapped)
        aligned[offset:offset + len(word_index)] = word_index
        return EncodedWords(wrapped, aligned, truncated)

    def collate(self, encodings: Sequence[EncodedWords]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(e.input_ids) for e in encodings)
        input_ids = torch.full((len(encodings), width), self.pad_token_id, dtype=torch.long)
        attention_mask = torch.zeros((len(encodings), width), dtype=torch.long)
        for row, encoding in enumerate(encodings):
            input_ids[row, :len(encoding.input_ids)] = torch.tensor(encoding.input_ids, dtype=torch.long)
            attention_mask[row, :len(encoding.input_ids)] = 1
        device = next(self.network.parameters()).device
        return input_ids.to(device), attention_mask.to(device)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.projection_basis is None:
            return hidden
        basis = self.projection_basis.to(hidden.dtype).to(hidden.device)
        return hidden - (hidden @ basis.T) @ basis

    def hidden_states(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> tuple:
        """All layer outputs; the final one is projected when a bias subspace is attached."""
        states = tuple(self._hidden_states(input_ids, attention_mask))
        return states[:-1] + (self.project(states[-1]),)

    def final_hidden(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.hidden_states(input_ids, attention_mask)[-1]

    def mlm_logits(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self._mlm_head(self.final_hidden(input_ids, attention_mask))

    def pool(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        """Mean of the final hidden states over non-padding positions."""
        hidden = self.final_hidden(input_ids, attention_mask)
        weights = attention_mask.unsqueeze(-1).to(hidden.dtype)
        return (hidden * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)

    def with_projection(self, basis: Optional[torch.Tensor]) -> "ModelHandle":
        """Shallow copy sharing the network, with a different projection basis."""
        projected = copy.copy(self)
        projected.projection_basis = basis
        return projected


@contextmanager
def inference(model: ModelHandle):
    """Puts the network in eval mode without gradients, restoring the previous mode afterwards."""
    was_training = model.network.training
    model.network.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.network.train(was_training)


class TransformersHandle(ModelHandle):
    """Handle over a Hugging Face masked language model and its tokenizer."""

    _HEAD_ATTRIBUTES = ("cls", "predictions", "lm_head")

    def __init__(self, identifier: str, network, tokenizer):
        max_length = min(tokenizer.model_max_length, network.config.max_position_embeddings)
        super().__init__(
            identifier=identifier,
            network=network,
            hidden_size=network.config.hidden_size,
            vocabulary=tokenizer.get_vocab(),
            max_sequence_length=max_length,
            mask_token=tokenizer.mask_token,
        )
        self.tokenizer = tokenizer
        wrapped = tokenizer.build_inputs_with_special_tokens([-1])
        self._offset = wrapped.index(-1)

    @property
    def num_layers(self) -> int:
        return self.network.config.num_hidden_layers

    @property
    def pad_token_id(self) -> int:
        return self.tokenizer.pad_token_id

    def word_pieces(self, word: str) -> list[str]:
        return self.tokenizer.tokenize(word)

    def piece_ids(self, word: str) -> list[int]:
        return self.tokenizer.convert_tokens_to_ids(self.tokenizer.tokenize(word))

    def add_special_tokens(self, ids: list[int]) -> tuple[list[int], int]:
        return self.tokenizer.build_inputs_with_special_tokens(list(ids)), self._offset

    def _hidden_states(self, input_ids, attention_mask) -> tuple:
        outputs = self.network.base_model(
            input_ids=input_ids, attention_mask=attention_mask, output_hidden_states=True
        )
        return outputs.hidden_states

    def _mlm_head(self, final_hidden):
        for name in self._HEAD_ATTRIBUTES:
            head = getattr(self.network, name, None)
            if head is not None:
                return head(final_hidden)
        raise ModelLoadError(f"{self.identifier}: no supported masked-LM head found")


def _load_transformers(name: str, options: dict) -> ModelHandle:
    from transformers import AutoModelForMaskedLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(name, **options.get("tokenizer", {}))
        network = AutoModelForMaskedLM.from_pretrained(name, **options.get("model", {}))
    except (OSError, ValueError) as e:
        raise ModelLoadError(f"cannot load model '{name}': {e}")
    network.eval()
    return TransformersHandle(name, network, tokenizer)


def _load_stub(name: str, options: dict) -> ModelHandle:
    from stub_model import StubHandle

    return StubHandle.from_options(options)


_LOADERS: dict[str, Callable[[str, dict], ModelHandle]] = {
    "hf": _load_transformers,
    "stub": _load_stub,
}


def register_loader(prefix: str, factory: Callable[[str, dict], ModelHandle]) -> None:
    """
    Registers a factory for identifiers of the form ``<prefix>:<name>``.

    Args:
        prefix (str): Identifier prefix.
        factory (Callable): Called with the name after the prefix and the options dict.
    """
    _LOADERS[prefix] = factory


def load_model(identifier: str, options: dict = None) -> ModelHandle:
    """
    Resolves a model identifier through the loader registry.

    Identifiers without a registered prefix are treated as Hugging Face names.

    Args:
        identifier (str): e.g. ``"bert-large-uncased"``, ``"hf:albert-large-v2"`` or ``"stub"``.
        options (dict): Backend specific options.

    Returns:
        ModelHandle: The loaded handle, in inference mode.

    Raises:
        ModelLoadError: If the backend cannot load the identifier.
    """
    options = options or {}
    prefix, _, name = identifier.partition(":")
    if prefix in _LOADERS:
        handle = _LOADERS[prefix](name, options)
    else:
        handle = _load_transformers(identifier, options)
    handle.identifier = identifier
    return handle


def embed_batch(model: ModelHandle, items: Sequence[tuple], batch_size: int = INFERENCE_BATCH_SIZE,
                progress: bool = False) -> list[ContextualEmbedding]:
    """
    Embeds every occurrence of target words in a batch of sentences.

    Args:
        model (ModelHandle): The model.
        items (Sequence[tuple]): ``(sentence_id, sentence, target)`` triples.
        batch_size (int): Sentences per forward pass.
        progress (bool): Whether to show a progress bar.

    Returns:
        list[ContextualEmbedding]: One embedding per occurrence, in input order.

    Raises:
        MultiPieceError: If a target is not a single word piece.
    """
    for target in {item[2] for item in items}:
        pieces = model.word_pieces(target)
        if len(pieces) != 1:
            raise MultiPieceError(target, pieces)

    results = []
    batches = range(0, len(items), batch_size)
    with inference(model):
        for start in tqdm(batches, desc="embedding", disable=not progress):
            chunk = items[start:start + batch_size]
            words = [tokenize(sentence) for _, sentence, _ in chunk]
            encodings = [model.encode_words(w) for w in words]
            final = model.final_hidden(*model.collate(encodings))
            for row, ((sentence_id, _, target), sentence_words, encoding) in enumerate(zip(chunk, words, encodings)):
                target_lower = target.lower()
                for position, word in enumerate(sentence_words):
                    if word.lower() != target_lower:
                        continue
                    if position not in encoding.word_index:
                        logger.warning("Occurrence of '%s' in sentence %s lost to truncation", target, sentence_id)
                        continue
                    piece = encoding.word_index.index(position)
                    results.append(ContextualEmbedding(
                        vector=final[row, piece].detach().cpu().numpy(),
                        word=target_lower,
                        sentence_id=sentence_id,
                        position=position,
                    ))
    return results


def embed_occurrences(model: ModelHandle, sentence: str, target: str,
                      sentence_id: Union[int, str] = 0) -> list[ContextualEmbedding]:
    """
    Extracts the final-layer vector of every occurrence of a word in a sentence.

    Args:
        model (ModelHandle): The model.
        sentence (str): The sentence.
        target (str): A single-wordpiece word, matched case-insensitively.
        sentence_id: Identifier stored with the embeddings.

    Returns:
        list[ContextualEmbedding]: One per occurrence; empty if the word is absent.

    Raises:
        MultiPieceError: If the target is not a single word piece.
    """
    return embed_batch(model, [(sentence_id, sentence, target)])


def _template_words(template: str, mask_token: Optional[str] = None) -> list[str]:
    for alias in (set(MASK_ALIASES) | {mask_token}) - {None, MASK_SLOT}:
        template = template.replace(alias, MASK_SLOT)
    words = TEMPLATE_PATTERN.findall(template)
    slots = words.count(MASK_SLOT)
    if slots != 1:
        raise TemplateError(f"template must hold exactly one {MASK_SLOT} slot, found {slots}: '{template}'")
    return words


def masked_distributions(model: ModelHandle, templates: Sequence[str],
                         batch_size: int = INFERENCE_BATCH_SIZE) -> list[VocabDistribution]:
    """
    Batched form of ``masked_distribution``.

    Args:
        model (ModelHandle): The model.
        templates (Sequence[str]): Templates with one ``<mask>`` and any number of ``<blank>`` slots;
            ``[MASK]`` and the tokenizer's own mask token stand for ``<mask>`` too.
        batch_size (int): Templates per forward pass.

    Returns:
        list[VocabDistribution]: One distribution per template.
    """
    word_lists = [_template_words(t, model.mask_token) for t in templates]
    distributions = []
    with inference(model):
        for start in range(0, len(word_lists), batch_size):
            chunk = word_lists[start:start + batch_size]
            encodings = [model.encode_words(words) for words in chunk]
            logits = model.mlm_logits(*model.collate(encodings))
            for row, (words, encoding) in enumerate(zip(chunk, encodings)):
                piece = encoding.word_index.index(words.index(MASK_SLOT))
                probabilities = torch.softmax(logits[row, piece].double(), dim=-1)
                distributions.append(VocabDistribution(probabilities.cpu().numpy(), model.vocabulary))
    return distributions


def masked_distribution(model: ModelHandle, template: str) -> VocabDistribution:
    """
    Predicts the vocabulary distribution at the ``<mask>`` slot of a template.

    ``<blank>`` slots are masked as well but not queried, which is how prior
    probabilities are obtained.

    Args:
        model (ModelHandle): The model.
        template (str): e.g. ``"<mask> is a doctor."`` or ``"[MASK] is a doctor."``.

    Returns:
        VocabDistribution: Normalized distribution over the full vocabulary.

    Raises:
        TemplateError: If the template does not hold exactly one ``<mask>``.
    """
    return masked_distributions(model, [template])[0]


def clone_for_training(model: ModelHandle) -> ModelHandle:
    """
    Creates an independent trainable copy of a handle.

    Args:
        model (ModelHandle): The source handle, left untouched.

    Returns:
        ModelHandle: The copy, in training mode.

    Raises:
        AllocationError: If the copy cannot be allocated.
    """
    try:
        clone = copy.deepcopy(model)
    except (MemoryError, RuntimeError) as e:
        raise AllocationError(f"cannot clone {model.identifier}: {e}")
    clone.training_history = []
    clone.network.train()
    return clone


def encode_texts(model: ModelHandle, texts: Sequence[str], max_length: int = None) -> tuple:
    """Tokenizes raw texts into a padded batch."""
    return model.collate([model.encode_words(tokenize(text), max_length) for text in texts])


def pooled_representation(model: ModelHandle, texts: Sequence[str], max_length: int = None,
                          batch_size: int = INFERENCE_BATCH_SIZE) -> np.ndarray:
    """
    Mean-pooled final-layer sentence vectors.

    Args:
        model (ModelHandle): The model.
        texts (Sequence[str]): Sentences.
        max_length (int): Optional truncation length.
        batch_size (int): Sentences per forward pass.

    Returns:
        np.ndarray: Array of shape (len(texts), hidden_size).
    """
    chunks = []
    with inference(model):
        for start in range(0, len(texts), batch_size):
            batch = encode_texts(model, texts[start:start + batch_size], max_length)
            chunks.append(model.pool(*batch).cpu().numpy())
    if not chunks:
        return np.zeros((0, model.hidden_size), dtype=np.float32)
    return np.concatenate(chunks).astype(np.float32)


def save_weights(model: ModelHandle, path) -> Path:
    """Persists the network weights of a handle."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.network.state_dict(), path)
    return path


def load_weights(model: ModelHandle, path) -> ModelHandle:
    """Returns a copy of a handle with weights read from ``path``."""
    clone = copy.deepcopy(model)
    clone.network.load_state_dict(torch.load(path, map_location="cpu"))
    clone.network.eval()
    return clone
