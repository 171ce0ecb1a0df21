import json
import tempfile
import unittest
from pathlib import Path

from exceptions import InsufficientDataError, LexiconFormatError, LexiconValidationError
from lexicon import (
    FEMALE,
    MALE,
    AttributePair,
    Lexicon,
    counterfactual_of,
    lexicon_hits,
    load_lexicon,
    restrict,
    split_attribute_terms,
    swap_text,
)


def make_lexicon(**overrides) -> Lexicon:
    fields = dict(
        attribute_pairs=[
            AttributePair(female_term="she", male_term="he"),
            AttributePair(female_term="her", male_term="his"),
            AttributePair(female_term="woman", male_term="man"),
            AttributePair(female_term="mother", male_term="father"),
            AttributePair(female_term="girl", male_term="boy"),
        ],
        stereotypes_female={"nurse", "dancer"},
        stereotypes_male={"engineer", "pilot"},
        name_pairs=[AttributePair(female_term="mary", male_term="john")],
        extra_attributes_female={"diva"},
    )
    fields.update(overrides)
    return Lexicon(**fields)


class TestLexicon(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_term_sets(self):
        self.assertEqual(self.lexicon.female_terms, {"she", "her", "woman", "mother", "girl", "diva"})
        self.assertEqual(self.lexicon.male_terms, {"he", "his", "man", "father", "boy"})
        self.assertEqual(self.lexicon.stereotypes, {"nurse", "dancer", "engineer", "pilot"})
        self.assertEqual(self.lexicon.names, {"mary", "john"})

    def test_genders(self):
        self.assertEqual(self.lexicon.attribute_gender("She"), FEMALE)
        self.assertEqual(self.lexicon.attribute_gender("father"), MALE)
        self.assertIsNone(self.lexicon.attribute_gender("nurse"))
        self.assertEqual(self.lexicon.stereotype_gender("nurse"), FEMALE)
        self.assertEqual(self.lexicon.stereotype_gender("pilot"), MALE)

    def test_terms_are_lowercased(self):
        lexicon = make_lexicon(stereotypes_female={"Nurse "})
        self.assertIn("nurse", lexicon.stereotypes_female)

    def test_rejects_overlapping_groups(self):
        with self.assertRaises(LexiconValidationError) as context:
            make_lexicon(stereotypes_male={"nurse"})
        self.assertEqual(context.exception.term, "nurse")

    def test_rejects_attribute_stereotype_overlap(self):
        with self.assertRaises(LexiconValidationError) as context:
            make_lexicon(stereotypes_female={"mother"})
        self.assertEqual(context.exception.term, "mother")

    def test_rejects_term_in_two_pairs(self):
        with self.assertRaises(LexiconValidationError):
            make_lexicon(attribute_pairs=[
                AttributePair(female_term="she", male_term="he"),
                AttributePair(female_term="her", male_term="he"),
            ])

    def test_rejects_multi_word_terms(self):
        with self.assertRaises(LexiconValidationError):
            AttributePair(female_term="lady friend", male_term="guy")


class TestLoadLexicon(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / "lexicon.json"

    def tearDown(self):
        self.directory.cleanup()

    def write(self, document) -> Path:
        self.path.write_text(json.dumps(document) if not isinstance(document, str) else document, encoding="utf-8")
        return self.path

    def test_loads_and_deduplicates(self):
        path = self.write({
            "attribute_pairs": [["she", "he"], ["woman", "man"], ["she", "he"]],
            "stereotypes_female": ["nurse", "nurse"],
            "stereotypes_male": ["pilot"],
        })
        with self.assertLogs("lexicon", level="WARNING"):
            lexicon = load_lexicon(path)
        self.assertEqual(len(lexicon.attribute_pairs), 2)
        self.assertEqual(lexicon.stereotypes_female, {"nurse"})

    def test_malformed_document(self):
        with self.assertRaises(LexiconFormatError):
            load_lexicon(self.write("{not json"))

    def test_missing_file(self):
        with self.assertRaises(LexiconFormatError):
            load_lexicon(self.path)

    def test_empty_stereotypes(self):
        path = self.write({"attribute_pairs": [["she", "he"]], "stereotypes_female": [], "stereotypes_male": ["pilot"]})
        with self.assertRaises(LexiconValidationError):
            load_lexicon(path)

    def test_shipped_lexicon_is_valid(self):
        lexicon = load_lexicon()
        self.assertGreater(len(lexicon.attribute_pairs), 20)
        self.assertTrue(lexicon.stereotypes_female)
        self.assertTrue(lexicon.stereotypes_male)


class TestSplitAttributeTerms(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_pairs_stay_together(self):
        split = split_attribute_terms(self.lexicon, 0.8, seed=3)
        for pair in self.lexicon.attribute_pairs:
            self.assertEqual(pair.female_term in split.train_words, pair.male_term in split.train_words)
        self.assertFalse(split.train_words & split.test_words)
        self.assertEqual(split.train_words | split.test_words, self.lexicon.attribute_terms)

    def test_fraction_of_pairs(self):
        split = split_attribute_terms(self.lexicon, 0.8, seed=0)
        paired_train = [p for p in self.lexicon.attribute_pairs if p.female_term in split.train_words]
        self.assertEqual(len(paired_train), 4)

    def test_deterministic(self):
        self.assertEqual(split_attribute_terms(self.lexicon, 0.6, 11), split_attribute_terms(self.lexicon, 0.6, 11))

    def test_single_pair(self):
        lexicon = make_lexicon(attribute_pairs=[AttributePair(female_term="she", male_term="he")])
        with self.assertRaises(InsufficientDataError):
            split_attribute_terms(lexicon, 0.8, 0)

    def test_fraction_range(self):
        with self.assertRaises(ValueError):
            split_attribute_terms(self.lexicon, 1.0, 0)


class TestSwapping(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_counterfactual_keeps_case(self):
        self.assertEqual(counterfactual_of("She", self.lexicon), "He")
        self.assertEqual(counterfactual_of("HER", self.lexicon), "HIS")
        self.assertEqual(counterfactual_of("boy", self.lexicon), "girl")
        self.assertIsNone(counterfactual_of("nurse", self.lexicon))
        self.assertIsNone(counterfactual_of("diva", self.lexicon))

    def test_names_only_on_request(self):
        self.assertIsNone(counterfactual_of("Mary", self.lexicon))
        self.assertEqual(counterfactual_of("Mary", self.lexicon, use_names=True), "John")

    def test_swap_text(self):
        text = "She told her mother, the nurse."
        self.assertEqual(swap_text(text, self.lexicon), "He told his father, the nurse.")

    def test_swap_is_an_involution(self):
        text = "The woman and the boy met Mary; he waved at her."
        swapped = swap_text(text, self.lexicon, use_names=True)
        self.assertNotEqual(swapped, text)
        self.assertEqual(swap_text(swapped, self.lexicon, use_names=True), text)

    def test_lexicon_hits(self):
        hits = lexicon_hits("Mary said she is a diva and a nurse.", self.lexicon)
        self.assertEqual(hits, ["Mary", "she", "diva"])
        self.assertEqual(lexicon_hits("Mary sang.", self.lexicon, include_names=False), [])

    def test_restrict(self):
        restricted = restrict(self.lexicon, lambda word: word not in {"father", "pilot"})
        self.assertNotIn("mother", restricted.attribute_terms)
        self.assertEqual(restricted.stereotypes_male, {"engineer"})
        self.assertEqual(len(restricted.attribute_pairs), 4)


if __name__ == "__main__":
    unittest.main()
