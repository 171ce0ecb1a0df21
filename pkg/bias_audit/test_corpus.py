import tempfile
import unittest
from pathlib import Path

import numpy as np

from corpus import (
    HASH_HEADER_BYTES,
    BankMetadata,
    EmbeddingBank,
    SentenceOccurrence,
    WordVectors,
    array_paths,
    build_embedding_bank,
    corpus_hash,
    coverage_report,
    harvest_sentences,
    load_bank,
    save_bank,
)
from exceptions import CorpusError
from stub_model import StubHandle

CORPUS = [
    "The nurse helped her.",
    "",
    "He is an engineer.",
    "The Nurse and the engineer met.",
    "She became a nurse.",
    "A nurse, a nurse, a nurse.",
]


class TestHarvest(unittest.TestCase):
    def test_finds_words_case_insensitively(self):
        occurrences = harvest_sentences(CORPUS, ["nurse", "engineer"], cap=10)
        by_word = {}
        for occurrence in occurrences:
            by_word.setdefault(occurrence.word, []).append(occurrence.sentence_id)
        self.assertEqual(by_word, {"engineer": [2, 3], "nurse": [0, 3, 4, 5]})

    def test_exclusion_skips_whole_sentences(self):
        occurrences = harvest_sentences(CORPUS, ["nurse"], exclusion=["engineer", "she"], cap=10)
        self.assertEqual([o.sentence_id for o in occurrences], [0, 5])

    def test_cap_and_determinism(self):
        corpus = [f"The nurse number {i} arrived." for i in range(50)]
        first = harvest_sentences(corpus, ["nurse"], cap=5, seed=3)
        second = harvest_sentences(corpus, ["nurse"], cap=5, seed=3)
        other = harvest_sentences(corpus, ["nurse"], cap=5, seed=4)
        self.assertEqual(len(first), 5)
        self.assertEqual(first, second)
        self.assertNotEqual([o.sentence_id for o in first], [o.sentence_id for o in other])
        self.assertEqual([o.sentence_id for o in first], sorted(o.sentence_id for o in first))

    def test_reads_files(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "corpus.txt"
            path.write_text("\n".join(CORPUS), encoding="utf-8")
            occurrences = harvest_sentences(path, ["engineer"], cap=10)
            digest = corpus_hash(path)
        self.assertEqual(len(occurrences), 2)
        self.assertEqual(len(digest), 64)

    def test_invalid_cap(self):
        with self.assertRaises(ValueError):
            harvest_sentences(CORPUS, ["nurse"], cap=0)


class TestCoverage(unittest.TestCase):
    def test_missing_and_low(self):
        occurrences = harvest_sentences(CORPUS, ["nurse", "engineer", "pilot"], cap=10)
        with self.assertLogs("corpus", level="WARNING"):
            report = coverage_report(occurrences, ["nurse", "engineer", "pilot"], threshold=3)
        self.assertEqual(report.counts, {"engineer": 2, "nurse": 4, "pilot": 0})
        self.assertEqual(report.missing, ["pilot"])
        self.assertEqual(report.low_coverage, ["engineer"])


class TestEmbeddingBank(unittest.TestCase):
    def setUp(self):
        self.model = StubHandle(["the", "nurse", "engineer", "he", "is", "an", "a", "and", "met", "."], seed=4)
        self.occurrences = harvest_sentences(CORPUS, ["nurse", "engineer", "helped"], cap=10)
        self.metadata = BankMetadata(corpus_hash="ab" * 32, cap=10, seed=0)

    def test_one_row_per_occurrence(self):
        with self.assertLogs("corpus", level="WARNING"):
            bank = build_embedding_bank(self.model, self.occurrences, self.metadata)
        self.assertEqual(bank.words, ["engineer", "nurse"])
        self.assertNotIn("helped", bank)
        # sentence 5 holds "nurse" three times
        self.assertEqual(bank.vectors("nurse").shape, (6, self.model.hidden_size))
        self.assertEqual(bank.entries["nurse"].positions[-3:], [1, 4, 7])
        self.assertEqual(bank.missing(["nurse", "pilot"]), {"pilot"})

    def test_empty_bank(self):
        with self.assertLogs("corpus", level="WARNING"):
            bank = build_embedding_bank(self.model, [])
        self.assertEqual(bank.words, [])

    def test_map_vectors(self):
        bank = EmbeddingBank(model_id="m", hidden_size=2, entries={
            "x": WordVectors(vectors=np.ones((2, 2)), sentence_ids=[0, 1], positions=[0, 0]),
        })
        doubled = bank.map_vectors(lambda vectors: vectors * 2)
        np.testing.assert_array_equal(doubled.vectors("x"), np.full((2, 2), 2.0, dtype=np.float32))
        np.testing.assert_array_equal(bank.vectors("x"), np.ones((2, 2), dtype=np.float32))

    def test_rejects_wrong_width(self):
        with self.assertRaises(ValueError):
            EmbeddingBank(model_id="m", hidden_size=3, entries={
                "x": WordVectors(vectors=np.ones((1, 2)), sentence_ids=[0], positions=[0]),
            })

    def test_save_and_load(self):
        bank = build_embedding_bank(self.model, [o for o in self.occurrences if o.word != "helped"], self.metadata)
        with tempfile.TemporaryDirectory() as directory:
            base = Path(directory) / "bank"
            index_path, array_path = save_bank(bank, base)
            self.assertEqual((index_path, array_path), array_paths(base))
            self.assertEqual(array_path.read_bytes()[:HASH_HEADER_BYTES].decode("ascii"), "ab" * 32)
            restored = load_bank(base)
        self.assertEqual(restored.words, bank.words)
        self.assertEqual(restored.metadata, bank.metadata)
        for word in bank.words:
            np.testing.assert_array_equal(restored.vectors(word), bank.vectors(word))
            self.assertEqual(restored.entries[word].sentence_ids, bank.entries[word].sentence_ids)

    def test_hash_mismatch(self):
        bank = build_embedding_bank(self.model, [o for o in self.occurrences if o.word == "engineer"], self.metadata)
        with tempfile.TemporaryDirectory() as directory:
            base = Path(directory) / "bank"
            _, array_path = save_bank(bank, base)
            raw = array_path.read_bytes()
            array_path.write_bytes(b"cd" * 32 + raw[HASH_HEADER_BYTES:])
            with self.assertRaises(CorpusError):
                load_bank(base)


class TestSentenceOccurrence(unittest.TestCase):
    def test_frozen(self):
        occurrence = SentenceOccurrence(sentence="A nurse.", word="nurse", sentence_id=0)
        with self.assertRaises(Exception):
            occurrence.word = "pilot"


if __name__ == "__main__":
    unittest.main()
