"""
Module with a deterministic toy masked language model.

The stub has a fixed embedding table, a few residual layers mixing each token
with the sentence mean, and a masked-LM head that is either tied to the
embeddings or returns a fixed logit vector everywhere (so conditional and
prior distributions coincide). A gender direction can be planted into chosen
words, which makes every metric of the audit testable without real weights.
"""

import math
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn

from model_adapter import ModelHandle

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
MASK_TOKEN = "[MASK]"


def planted_directions(hidden_size: int, count: int, seed: int) -> torch.Tensor:
    """Orthonormal rows drawn from a seeded generator; the first row does not depend on ``count``."""
    generator = torch.Generator().manual_seed(seed)
    directions = []
    for _ in range(count):
        direction = torch.randn(hidden_size, generator=generator)
        for previous in directions:
            direction = direction - (direction @ previous) * previous
        directions.append(direction / direction.norm())
    return torch.stack(directions)


class StubMaskedLM(nn.Module):
    def __init__(self, vocab_size: int, hidden_size: int, num_layers: int, seed: int,
                 context_weight: float = 0.5, fixed_logits: Optional[Sequence[float]] = None):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.embeddings = nn.Embedding(vocab_size, hidden_size)
        with torch.no_grad():
            self.embeddings.weight.copy_(
                torch.randn(vocab_size, hidden_size, generator=generator) / math.sqrt(hidden_size)
            )
        self.layers = nn.ModuleList(nn.Linear(hidden_size, hidden_size) for _ in range(num_layers))
        with torch.no_grad():
            for layer in self.layers:
                layer.weight.copy_(torch.randn(hidden_size, hidden_size, generator=generator) / math.sqrt(hidden_size))
                layer.bias.zero_()
        self.context_weight = context_weight
        self.output_bias = nn.Parameter(torch.zeros(vocab_size))
        if fixed_logits is not None:
            self.register_buffer("fixed_logits", torch.tensor(fixed_logits, dtype=torch.float32))
        else:
            self.fixed_logits = None

    def hidden_states(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> tuple:
        hidden = self.embeddings(input_ids)
        weights = attention_mask.unsqueeze(-1).to(hidden.dtype)
        states = [hidden]
        for layer in self.layers:
            context = (hidden * weights).sum(dim=1, keepdim=True) / weights.sum(dim=1, keepdim=True).clamp(min=1.0)
            hidden = hidden + self.context_weight * torch.tanh(layer(hidden + context))
            states.append(hidden)
        return tuple(states)

    def head(self, final_hidden: torch.Tensor) -> torch.Tensor:
        if self.fixed_logits is not None:
            return self.fixed_logits.expand(*final_hidden.shape[:-1], -1)
        return final_hidden @ self.embeddings.weight.T + self.output_bias


class StubHandle(ModelHandle):
    """
    Handle over ``StubMaskedLM`` with a word-level tokenizer.

    Words in the vocabulary are single pieces; any other word is split into
    character pieces (``n``, ``##u``, ...), so it counts as multi-piece.

    ``planted`` maps words to a sign or to a list of coefficients over
    orthonormal seeded directions; ``planted_direction`` is the first of them.
    """

    def __init__(self, vocabulary: Sequence[str], hidden_size: int = 8, num_layers: int = 2, seed: int = 0,
                 fixed_logits: Optional[Sequence[float]] = None, planted: Optional[dict] = None,
                 planted_strength: float = 1.0, context_weight: float = 0.5,
                 max_sequence_length: int = 128, special_tokens: bool = True):
        tokens = list(SPECIAL_TOKENS) if special_tokens else []
        planted = {word.lower(): torch.as_tensor(value, dtype=torch.float32).reshape(-1)
                   for word, value in (planted or {}).items()}
        for token in list(vocabulary) + sorted(planted) + [MASK_TOKEN]:
            token = token if token in SPECIAL_TOKENS else token.lower()
            if token not in tokens:
                tokens.append(token)
        index = {token: i for i, token in enumerate(tokens)}
        if fixed_logits is not None and len(fixed_logits) != len(tokens):
            raise ValueError(f"fixed_logits needs {len(tokens)} entries, got {len(fixed_logits)}")

        network = StubMaskedLM(len(tokens), hidden_size, num_layers, seed, context_weight, fixed_logits)
        if planted:
            directions = planted_directions(hidden_size, max(len(v) for v in planted.values()), seed + 1)
            with torch.no_grad():
                for word, coefficients in planted.items():
                    shift = coefficients @ directions[:len(coefficients)]
                    network.embeddings.weight[index[word]] += planted_strength * shift
            self.planted_directions = directions
            self.planted_direction = directions[0]
        else:
            self.planted_directions = None
            self.planted_direction = None
        network.eval()

        super().__init__(
            identifier="stub",
            network=network,
            hidden_size=hidden_size,
            vocabulary=index,
            max_sequence_length=max_sequence_length,
            mask_token=MASK_TOKEN,
        )
        self.special_tokens = special_tokens
        self._unk_id = index.get("[UNK]", index[MASK_TOKEN])
        self._pad_id = index.get("[PAD]", index[MASK_TOKEN])

    @classmethod
    def from_options(cls, options: dict) -> "StubHandle":
        """Builds a stub from loader options; ``vocabulary_file`` lists one token per line."""
        options = dict(options)
        vocabulary = list(options.pop("vocabulary", []))
        vocabulary_file = options.pop("vocabulary_file", None)
        if vocabulary_file:
            vocabulary += Path(vocabulary_file).read_text(encoding="utf-8").split()
        return cls(vocabulary=vocabulary, **options)

    @property
    def num_layers(self) -> int:
        return len(self.network.layers)

    @property
    def pad_token_id(self) -> int:
        return self._pad_id

    def word_pieces(self, word: str) -> list[str]:
        word = word.lower()
        if word in self.vocabulary or len(word) <= 1:
            return [word]
        return [word[0]] + [f"##{c}" for c in word[1:]]

    def piece_ids(self, word: str) -> list[int]:
        return [self.vocabulary.get(piece, self._unk_id) for piece in self.word_pieces(word)]

    def add_special_tokens(self, ids: list[int]) -> tuple[list[int], int]:
        if not self.special_tokens:
            return list(ids), 0
        return [self.vocabulary["[CLS]"]] + list(ids) + [self.vocabulary["[SEP]"]], 1

    def _hidden_states(self, input_ids, attention_mask) -> tuple:
        return self.network.hidden_states(input_ids, attention_mask)

    def _mlm_head(self, final_hidden):
        return self.network.head(final_hidden)
