import unittest

import numpy as np
import torch

from stub_model import SPECIAL_TOKENS, StubHandle


class TestStubHandle(unittest.TestCase):
    def setUp(self):
        self.model = StubHandle(["Nurse", "she", "he"], hidden_size=4, num_layers=3, seed=5,
                                planted={"she": 1, "he": -1}, planted_strength=2.0)

    def test_vocabulary(self):
        self.assertEqual(list(self.model.vocabulary)[:len(SPECIAL_TOKENS)], list(SPECIAL_TOKENS))
        self.assertIn("nurse", self.model.vocabulary)
        self.assertEqual(self.model.num_layers, 3)

    def test_unknown_words_are_multi_piece(self):
        self.assertEqual(self.model.word_pieces("nurse"), ["nurse"])
        self.assertEqual(self.model.word_pieces("cat"), ["c", "##a", "##t"])
        self.assertFalse(self.model.is_single_piece("cat"))
        self.assertEqual(self.model.piece_ids("cat"), [self.model.vocabulary["[UNK]"]] * 3)

    def test_special_tokens_wrap_input(self):
        ids, offset = self.model.add_special_tokens([9])
        self.assertEqual(ids, [self.model.vocabulary["[CLS]"], 9, self.model.vocabulary["[SEP]"]])
        self.assertEqual(offset, 1)

    def test_planted_direction(self):
        weights = self.model.network.embeddings.weight.detach()
        unplanted = StubHandle(["Nurse", "she", "he"], hidden_size=4, num_layers=3, seed=5)
        base = unplanted.network.embeddings.weight.detach()
        shift = weights[self.model.vocabulary["she"]] - base[unplanted.vocabulary["she"]]
        torch.testing.assert_close(shift, 2.0 * self.model.planted_direction)
        self.assertAlmostEqual(float(self.model.planted_direction.norm()), 1.0, places=6)
        torch.testing.assert_close(weights[self.model.vocabulary["nurse"]], base[unplanted.vocabulary["nurse"]])

    def test_planted_coefficients_over_several_directions(self):
        model = StubHandle(["she", "he"], hidden_size=6, num_layers=0, seed=5,
                           planted={"she": [1.0, 0.0], "he": [0.0, -2.0]})
        directions = model.planted_directions
        self.assertEqual(tuple(directions.shape), (2, 6))
        torch.testing.assert_close(directions @ directions.T, torch.eye(2), atol=1e-5, rtol=0)
        single = StubHandle(["she", "he"], hidden_size=6, num_layers=0, seed=5, planted={"she": 1})
        torch.testing.assert_close(directions[0], single.planted_direction)
        unplanted = StubHandle(["she", "he"], hidden_size=6, num_layers=0, seed=5).network.embeddings.weight
        weights = model.network.embeddings.weight.detach()
        he = model.vocabulary["he"]
        torch.testing.assert_close(weights[he] - unplanted.detach()[he], -2.0 * directions[1])
        self.assertEqual(model.num_layers, 0)

    def test_same_seed_same_weights(self):
        other = StubHandle(["Nurse", "she", "he"], hidden_size=4, num_layers=3, seed=5,
                           planted={"she": 1, "he": -1}, planted_strength=2.0)
        for mine, theirs in zip(self.model.network.parameters(), other.network.parameters()):
            torch.testing.assert_close(mine, theirs)

    def test_fixed_logits_length(self):
        with self.assertRaises(ValueError):
            StubHandle(["a"], fixed_logits=[0.0, 1.0])

    def test_hidden_states_per_layer(self):
        input_ids = torch.tensor([[2, 5, 3]])
        states = self.model.hidden_states(input_ids, torch.ones_like(input_ids))
        self.assertEqual(len(states), 4)
        self.assertEqual(tuple(states[-1].shape), (1, 3, 4))
        self.assertTrue(np.isfinite(states[-1].detach().numpy()).all())


if __name__ == "__main__":
    unittest.main()
