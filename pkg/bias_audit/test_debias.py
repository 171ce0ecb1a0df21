import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import torch

from corpus import EmbeddingBank, WordVectors, harvest_sentences
from debias import (
    BiasSubspace,
    CdaSchedule,
    ContextDebiasConfig,
    TrainingSchedule,
    _context_debias_step,
    _mask_tokens,
    apply_sent_debias,
    attribute_word_vectors,
    compute_bias_subspace,
    context_debias_loss,
    debias_bank,
    definition_pairs,
    equalize_bank,
    generate_cda_corpus,
    load_subspace,
    run_cda_pretraining,
    run_context_debias,
    save_subspace,
    sent_debias,
)
from exceptions import InsufficientDataError, RankError, TrainingFailureError
from lexicon import AttributePair, Lexicon, tokenize
from model_adapter import pooled_representation
from stub_model import StubHandle

VOCABULARY = ["the", "a", "is", "she", "he", "her", "his", "nurse", "pilot", "works", "and", "son",
              "daughter", "mary", "john", "."]


def make_lexicon() -> Lexicon:
    return Lexicon(
        attribute_pairs=[
            AttributePair(female_term="she", male_term="he"),
            AttributePair(female_term="her", male_term="his"),
            AttributePair(female_term="daughter", male_term="son"),
        ],
        stereotypes_female={"nurse"},
        stereotypes_male={"pilot"},
        name_pairs=[AttributePair(female_term="mary", male_term="john")],
    )


def random_subspace(rng: np.random.Generator, k: int, hidden_size: int) -> BiasSubspace:
    q, _ = np.linalg.qr(rng.normal(size=(hidden_size, k)))
    return BiasSubspace(basis=q.T, explained_variance=[1.0] * k)


class TestBiasSubspace(unittest.TestCase):
    def test_recovers_planted_axis(self):
        rng = np.random.default_rng(0)
        axis = np.zeros(6)
        axis[0] = 1.0
        pairs = []
        for _ in range(20):
            base = rng.normal(size=6)
            scale = rng.uniform(0.5, 2.0)
            pairs.append((base + scale * axis, base - scale * axis))
        subspace = compute_bias_subspace(pairs, k=1)
        self.assertAlmostEqual(abs(subspace.basis[0, 0]), 1.0, places=9)
        self.assertEqual(subspace.k, 1)

    def test_rank_deficient_samples(self):
        vector = np.ones(4)
        with self.assertRaises(RankError) as context:
            compute_bias_subspace([(vector, vector), (2 * vector, 2 * vector)], k=1)
        self.assertEqual(context.exception.achievable, 0)

    def test_no_pairs(self):
        with self.assertRaises(InsufficientDataError):
            compute_bias_subspace([], k=1)

    def test_rejects_non_orthonormal_basis(self):
        with self.assertRaises(ValueError):
            BiasSubspace(basis=np.array([[1.0, 1.0]]), explained_variance=[1.0])

    def test_round_trip(self):
        subspace = random_subspace(np.random.default_rng(1), 2, 8)
        subspace = subspace.model_copy(update={"model_id": "stub", "corpus_hash": "a" * 64})
        with tempfile.TemporaryDirectory() as directory:
            save_subspace(subspace, Path(directory) / "subspace")
            restored = load_subspace(Path(directory) / "subspace")
        np.testing.assert_allclose(restored.basis @ restored.basis.T, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(restored.basis, subspace.basis, atol=1e-6)
        self.assertEqual(restored.model_id, "stub")


class TestSentDebias(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.subspace = random_subspace(self.rng, 3, 16)

    def test_output_is_orthogonal(self):
        vectors = self.rng.normal(size=(1000, 16))
        debiased = sent_debias(vectors, self.subspace)
        self.assertLess(np.max(np.abs(debiased @ self.subspace.basis.T)), 1e-6)

    def test_idempotent(self):
        vectors = self.rng.normal(size=(1000, 16))
        once = sent_debias(vectors, self.subspace)
        np.testing.assert_allclose(sent_debias(once, self.subspace), once, atol=1e-10)

    def test_single_vector(self):
        subspace = BiasSubspace(basis=np.array([[1.0, 0.0, 0.0]]), explained_variance=[1.0])
        np.testing.assert_array_equal(sent_debias(np.array([3.0, 2.0, 1.0]), subspace), [0.0, 2.0, 1.0])

    def test_debias_bank(self):
        bank = EmbeddingBank(model_id="m", hidden_size=16, entries={
            "nurse": WordVectors(vectors=self.rng.normal(size=(5, 16)), sentence_ids=list(range(5)), positions=[0] * 5),
        })
        debiased = debias_bank(bank, self.subspace)
        self.assertLess(np.max(np.abs(debiased.vectors("nurse") @ self.subspace.basis.T)), 1e-5)

    def test_equalize_bank(self):
        subspace = BiasSubspace(basis=np.array([[1.0, 0.0, 0.0]]), explained_variance=[1.0])
        bank = EmbeddingBank(model_id="m", hidden_size=3, entries={
            "she": WordVectors(vectors=np.array([[1.0, 2.0, 0.0], [1.0, 4.0, 0.0]]), sentence_ids=[0, 1], positions=[0, 0]),
            "he": WordVectors(vectors=np.array([[-1.0, 0.0, 2.0]]), sentence_ids=[2], positions=[0]),
        })
        equalized = equalize_bank(bank, make_lexicon(), subspace)
        female = equalized.vectors("she").mean(axis=0)
        male = equalized.vectors("he").mean(axis=0)
        np.testing.assert_allclose(female[1:], male[1:], atol=1e-6)
        np.testing.assert_allclose([female[0], male[0]], [1.0, -1.0], atol=1e-6)

    def test_apply_to_model(self):
        model = StubHandle(VOCABULARY, hidden_size=6, seed=0)
        subspace = random_subspace(self.rng, 1, 6)
        debiased = apply_sent_debias(model, subspace)
        pooled = pooled_representation(debiased, ["She is a nurse.", "He is a pilot."])
        self.assertLess(np.max(np.abs(pooled @ subspace.basis.T)), 1e-5)
        self.assertEqual(debiased.identifier, "stub+sent-debias")
        with self.assertRaises(ValueError):
            apply_sent_debias(model, random_subspace(self.rng, 1, 5))

    def test_definition_pairs_skip_sentences_without_terms(self):
        model = StubHandle(VOCABULARY, hidden_size=6, seed=0)
        pairs = definition_pairs(model, ["She is a nurse.", "The pilot works.", "His son works."], make_lexicon())
        self.assertEqual(len(pairs), 2)
        self.assertEqual(pairs[0][0].shape, (6,))


class TestContextDebiasLoss(unittest.TestCase):
    def test_single_term(self):
        loss = context_debias_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 0.0]]), None,
                                   ContextDebiasConfig(alpha=1.0, beta=0.0))
        self.assertEqual(float(loss), 1.0)

    def test_zero_when_orthogonal_and_unchanged(self):
        frozen = {1: torch.tensor([[0.3, 0.7]]), 2: torch.tensor([[0.1, -0.2]])}
        loss = context_debias_loss(
            {1: torch.tensor([[0.0, 2.0]]), 2: torch.tensor([[0.0, -1.0]])},
            {1: torch.tensor([[1.0, 0.0]]), 2: torch.tensor([[3.0, 0.0]])},
            frozen, ContextDebiasConfig(alpha=1.0, beta=1.0), {layer: value.clone() for layer, value in frozen.items()},
        )
        self.assertEqual(float(loss), 0.0)

    def test_weights_both_terms(self):
        loss = context_debias_loss(torch.tensor([[2.0, 0.0]]), torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]),
                                   ContextDebiasConfig(alpha=0.5, beta=2.0), torch.tensor([[0.0, 3.0]]))
        self.assertAlmostEqual(float(loss), 0.5 * 4.0 + 2.0 * 9.0)

    def test_rejects_zero_weights(self):
        with self.assertRaises(ValueError):
            ContextDebiasConfig(alpha=0.0, beta=0.0)

    def test_gradient_matches_finite_differences(self):
        generator = torch.Generator().manual_seed(0)
        anchors = torch.randn(2, 2, generator=generator, dtype=torch.float64)
        frozen = torch.randn(1, 2, generator=generator, dtype=torch.float64)
        debias_config = ContextDebiasConfig(alpha=0.7, beta=1.3)
        current = torch.randn(2, 2, generator=generator, dtype=torch.float64, requires_grad=True)
        moving = torch.randn(1, 2, generator=generator, dtype=torch.float64, requires_grad=True)

        def objective(current, moving):
            return context_debias_loss(current, anchors, frozen, debias_config, moving)

        self.assertTrue(torch.autograd.gradcheck(objective, (current, moving), eps=1e-6, atol=1e-8, rtol=1e-4))


class TestContextDebias(unittest.TestCase):
    def setUp(self):
        self.model = StubHandle(VOCABULARY, hidden_size=6, num_layers=2, seed=3)
        self.lexicon = make_lexicon()
        corpus = [
            "She is a nurse.", "He is a pilot.", "The nurse works.", "The pilot works.",
            "Her son works.", "His daughter works.", "She works.", "He works.",
        ]
        self.attribute_sentences = harvest_sentences(corpus, self.lexicon.attribute_terms, self.lexicon.stereotypes)
        self.stereotype_sentences = harvest_sentences(corpus, self.lexicon.stereotypes, self.lexicon.attribute_terms)

    def orthogonality(self, model, anchors) -> float:
        with torch.no_grad():
            loss = _context_debias_step(model, self.model, self.stereotype_sentences, [], [1, 2], anchors,
                                        ContextDebiasConfig(alpha=1.0, beta=0.0))
        return float(loss)

    def test_reduces_orthogonality_term(self):
        anchors = attribute_word_vectors(self.model, self.attribute_sentences, [1, 2])
        anchors = {layer: torch.as_tensor(value, dtype=torch.float32) for layer, value in anchors.items()}
        schedule = TrainingSchedule(epochs=5, learning_rate=0.01, batch_size=4, seed=0)
        trained = run_context_debias(self.model, self.lexicon, self.attribute_sentences, self.stereotype_sentences,
                                     ContextDebiasConfig(alpha=1.0, beta=0.0, layer_set=[1, 2]), schedule)
        self.assertLess(self.orthogonality(trained, anchors), self.orthogonality(self.model, anchors))
        self.assertEqual(len(trained.training_history), 5)
        self.assertEqual(trained.identifier, "stub+context-debias")
        self.assertFalse(trained.network.training)

    def test_original_stays_untouched(self):
        before = {name: value.clone() for name, value in self.model.network.state_dict().items()}
        run_context_debias(self.model, self.lexicon, self.attribute_sentences, self.stereotype_sentences,
                           schedule=TrainingSchedule(epochs=1, learning_rate=0.05, batch_size=4))
        for name, value in self.model.network.state_dict().items():
            torch.testing.assert_close(value, before[name])

    def test_preservation_alone_keeps_outputs(self):
        trained = run_context_debias(self.model, self.lexicon, self.attribute_sentences, self.stereotype_sentences,
                                     ContextDebiasConfig(alpha=0.0, beta=1.0),
                                     TrainingSchedule(epochs=2, learning_rate=0.01, batch_size=4))
        batch = self.model.collate([self.model.encode_words(["she", "is", "a", "nurse"])])
        with torch.no_grad():
            expected = self.model.hidden_states(*batch)
            actual = trained.hidden_states(*batch)
        for layer in range(len(expected)):
            torch.testing.assert_close(actual[layer], expected[layer], atol=1e-6, rtol=0)

    def test_attribute_vectors_cover_sorted_words(self):
        vectors = attribute_word_vectors(self.model, self.attribute_sentences, [0, 2])
        words = sorted({o.word for o in self.attribute_sentences})
        self.assertEqual(set(vectors), {0, 2})
        self.assertEqual(vectors[2].shape, (len(words), 6))

    def test_divergence(self):
        with patch("debias.context_debias_loss", return_value=torch.tensor(float("nan"))):
            with self.assertRaises(TrainingFailureError) as context:
                run_context_debias(self.model, self.lexicon, self.attribute_sentences, self.stereotype_sentences,
                                   schedule=TrainingSchedule(epochs=1, batch_size=4))
        self.assertIn("layers.0.weight", context.exception.checkpoint)

    def test_needs_stereotype_sentences(self):
        with self.assertRaises(InsufficientDataError):
            run_context_debias(self.model, self.lexicon, self.attribute_sentences, [])


class TestCda(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_corpus_counts(self):
        lines = ["She is a nurse.", "The pilot works.", "His son met Mary."]
        augmented = list(generate_cda_corpus(lines, self.lexicon))
        self.assertEqual(augmented, [
            "She is a nurse.", "He is a nurse.",
            "The pilot works.",
            "His son met Mary.", "Her daughter met Mary.",
        ])
        with_names = list(generate_cda_corpus(lines, self.lexicon, use_names=True))
        self.assertEqual(with_names[-1], "Her daughter met John.")

    def test_augmented_corpus_is_closed_under_swapping(self):
        lines = ["She is a nurse.", "The pilot works.", "His son met Mary."]
        augmented = set(generate_cda_corpus(lines, self.lexicon))
        self.assertEqual(set(generate_cda_corpus(sorted(augmented), self.lexicon)), augmented)

    def test_name_only_lines_need_names(self):
        self.assertEqual(list(generate_cda_corpus(["Mary works."], self.lexicon)), ["Mary works."])
        self.assertEqual(list(generate_cda_corpus(["Mary works."], self.lexicon, use_names=True)),
                         ["Mary works.", "John works."])

    def test_masking_rates(self):
        model = StubHandle(VOCABULARY)
        texts = ["the nurse and the pilot works . she is a nurse"] * 400
        encodings = [model.encode_words(tokenize(text)) for text in texts]
        input_ids, _ = model.collate(encodings)
        masked, labels = _mask_tokens(model, encodings, input_ids, 0.15, torch.Generator().manual_seed(0))
        selected = labels != -100
        self.assertAlmostEqual(float(selected.float().mean()) * 13 / 11, 0.15, delta=0.02)
        self.assertFalse(selected[:, 0].any())
        self.assertFalse(selected[:, -1].any())
        torch.testing.assert_close(labels[selected], input_ids[selected])
        mask_share = float((masked[selected] == model.mask_token_id).float().mean())
        self.assertAlmostEqual(mask_share, 0.8, delta=0.05)
        torch.testing.assert_close(masked[~selected], input_ids[~selected])

    def test_pretraining(self):
        model = StubHandle(VOCABULARY, hidden_size=6, seed=1)
        lines = ["She is a nurse.", "He is a pilot.", "The nurse works and the pilot works."] * 4
        trained = run_cda_pretraining(model, lines, self.lexicon,
                                      CdaSchedule(epochs=2, learning_rate=0.01, batch_size=4, seed=0))
        self.assertEqual(trained.identifier, "stub+cda")
        self.assertEqual(len(trained.training_history), 2)
        changed = any(not torch.equal(a, b) for a, b in zip(trained.network.parameters(), model.network.parameters()))
        self.assertTrue(changed)

    def test_empty_corpus(self):
        with self.assertRaises(InsufficientDataError):
            run_cda_pretraining(StubHandle(VOCABULARY), ["", "  "], self.lexicon)


if __name__ == "__main__":
    unittest.main()
