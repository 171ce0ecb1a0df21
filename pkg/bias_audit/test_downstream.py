import math
import tempfile
import unittest
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd

from downstream import (
    DownstreamConfig,
    FoldMetrics,
    LabeledExample,
    compute_group_metrics,
    counterfactual_fairness,
    ingest_bias_in_bios,
    ingest_jigsaw,
    kfold_partitions,
    run_downstream_eval,
    scrub_attributes,
    summarize_folds,
    swap_attributes,
)
from exceptions import DatasetConfigurationError, InsufficientDataError, StratificationError
from lexicon import AttributePair, Lexicon, lexicon_hits, swap_text, tokenize
from stub_model import StubHandle


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


def example(text: str, label: int, group: str, example_id) -> LabeledExample:
    return LabeledExample(text=text, label=label, group=group, example_id=example_id)


class KeywordClassifier:
    """Binary classifier whose class 1 probability depends on the word "she" only."""

    def predict_proba(self, texts):
        probabilities = [0.6 if "she" in text.lower().split() else 0.4 for text in texts]
        return np.array([[1 - p, p] for p in probabilities])


class ConstantClassifier:
    def predict_proba(self, texts):
        return np.tile([0.3, 0.7], (len(texts), 1))


class TestIngestion(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / "data.csv"

    def tearDown(self):
        self.directory.cleanup()

    def test_jigsaw_rules(self):
        pd.DataFrame({
            "id": ["1", "2", "3", "4", "5", "6"],
            "comment_text": ["a", "b", "c", "d", "e", "f"],
            "target": ["0.8", "0", "0.3", "0.9", "x", "0"],
            "female": ["0.9", "0", "0.9", "0.6", "1", "0.5"],
            "male": ["0", "0.7", "0", "0.2", "0", "0"],
        }).to_csv(self.path, index=False)
        with self.assertLogs("downstream", level="WARNING"):
            examples = ingest_jigsaw(self.path)
        self.assertEqual([(e.example_id, e.label, e.group) for e in examples], [("1", 1, "f"), ("2", 0, "m")])

    def test_jigsaw_without_usable_rows(self):
        pd.DataFrame({
            "comment_text": ["a", "b"], "target": ["0.3", "0.3"], "female": ["1", "0"], "male": ["0", "1"],
        }).to_csv(self.path, index=False)
        with self.assertRaises(InsufficientDataError) as context:
            ingest_jigsaw(self.path)
        self.assertEqual(context.exception.exit_code, 3)

    def test_jigsaw_missing_column(self):
        pd.DataFrame({"comment_text": ["a"], "target": ["1"]}).to_csv(self.path, index=False)
        with self.assertRaises(DatasetConfigurationError):
            ingest_jigsaw(self.path)

    def test_bios_keeps_most_skewed_professions(self):
        rows = (
            [("nurse", "f")] * 3 + [("nurse", "m")]
            + [("surgeon", "m")] * 3
            + [("teacher", "f"), ("teacher", "m")]
            + [("dancer", "female")] * 2
            + [("pilot", "x")]
        )
        pd.DataFrame({
            "bio": [f"bio {i}" for i in range(len(rows))],
            "profession": [profession for profession, _ in rows],
            "gender": [gender for _, gender in rows],
        }).to_csv(self.path, index=False)
        with self.assertLogs("downstream", level="WARNING"):
            examples = ingest_bias_in_bios(self.path, classes_per_group=1)
        self.assertEqual({e.label_name for e in examples}, {"dancer", "surgeon"})
        self.assertEqual({e.label_name: e.label for e in examples}, {"dancer": 0, "surgeon": 1})
        self.assertEqual(len(examples), 5)
        with self.assertRaises(DatasetConfigurationError):
            ingest_bias_in_bios(self.path, classes_per_group=3)

    def test_bios_without_usable_rows(self):
        pd.DataFrame({"bio": ["a", "b"], "profession": ["nurse", "pilot"], "gender": ["x", "y"]}).to_csv(
            self.path, index=False)
        with self.assertLogs("downstream", level="WARNING"), self.assertRaises(InsufficientDataError):
            ingest_bias_in_bios(self.path)


class TestInterventions(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_scrubbing(self):
        scrubbed = scrub_attributes([example("She told John that her son is a nurse.", 1, "f", 0)], self.lexicon)
        self.assertEqual(scrubbed[0].text, "told that is a nurse.")
        self.assertEqual((scrubbed[0].label, scrubbed[0].group), (1, "f"))
        self.assertEqual(scrub_attributes(scrubbed, self.lexicon), scrubbed)
        self.assertEqual(lexicon_hits(scrubbed[0].text, self.lexicon), [])

    def test_swapping(self):
        examples = [
            example("She is a nurse.", 1, "f", "a"),
            example("The pilot works.", 0, "m", "b"),
            example("Mary met his son.", 0, "m", "c"),
        ]
        augmented = swap_attributes(examples, self.lexicon)
        self.assertEqual(len(augmented), 5)
        self.assertEqual(augmented[:3], examples)
        self.assertEqual(augmented[3].text, "He is a nurse.")
        self.assertEqual((augmented[3].group, augmented[3].example_id, augmented[3].label), ("m", "a-cf", 1))
        self.assertEqual(augmented[4].text, "John met her daughter.")
        self.assertEqual(len(swap_attributes(examples[1:2], self.lexicon)), 1)

    def test_scrubbing_a_generated_corpus(self):
        rng = np.random.default_rng(11)
        terms = ["she", "He", "HER", "his", "daughter", "Son", "mary", "John"]
        words = ["the", "nurse", "pilot", "shed", "hero", "this", "sons", "told", "x_he", "42"]
        separators = [" ", " ", ", ", "-", "'", " (", ") "]
        lexicon_terms = self.lexicon.attribute_terms | self.lexicon.names
        for _ in range(10_000):
            tokens = rng.choice(terms + words, size=rng.integers(1, 12))
            text = "".join(str(token) + str(rng.choice(separators)) for token in tokens) + "."
            scrubbed = scrub_attributes([example(text, 0, "f", 0)], self.lexicon)[0].text
            self.assertEqual(lexicon_hits(scrubbed, self.lexicon), [], msg=text)
            kept = [token for token in tokenize(text) if token.lower() not in lexicon_terms]
            self.assertEqual(tokenize(scrubbed), kept, msg=text)

    def test_swapping_preserves_the_label_distribution(self):
        texts = ["she is a nurse .", "his car .", "the pilot .", "mary and her son .", "he flies ."]
        examples = [example(texts[i % len(texts)], i % 3, "f" if i % 2 else "m", i) for i in range(30)]
        augmented = swap_attributes(examples, self.lexicon)
        swappable = [e for e in examples if swap_text(e.text, self.lexicon, True) != e.text]
        copies = augmented[len(examples):]
        self.assertEqual(Counter(e.label for e in copies), Counter(e.label for e in swappable))
        self.assertEqual(Counter(e.group for e in copies), Counter({"f": "m", "m": "f"}[e.group] for e in swappable))

        def shares(items):
            return {label: n / len(items) for label, n in Counter(e.label for e in items).items()}

        doubled = swap_attributes(swappable, self.lexicon)
        self.assertEqual(len(doubled), 2 * len(swappable))
        for label, share in shares(swappable).items():
            self.assertAlmostEqual(shares(doubled)[label], share)


class TestGroupMetrics(unittest.TestCase):
    def test_binary_gaps(self):
        labels = [1, 1, 1, 1, 1, 0, 0] * 2
        predictions = [1, 1, 1, 1, 0, 0, 1] + [1, 1, 1, 0, 0, 0, 0]
        groups = ["f"] * 7 + ["m"] * 7
        metrics = compute_group_metrics(predictions, labels, groups)
        self.assertAlmostEqual(metrics.tprd, 0.2)
        self.assertAlmostEqual(metrics.fprd, 0.5)
        self.assertAlmostEqual(metrics.acc_f, 5 / 7)
        self.assertAlmostEqual(metrics.acc_m, 5 / 7)

    def test_binary_gaps_match_confusion_tables(self):
        rng = np.random.default_rng(5)
        for case in range(20):
            size = int(rng.integers(8, 40))
            # every group holds a positive and a negative
            labels = np.concatenate([[1, 0, 1, 0], rng.integers(0, 2, size)])
            groups = np.concatenate([["f", "f", "m", "m"], rng.choice(["f", "m"], size)])
            predictions = rng.integers(0, 2, len(labels))
            metrics = compute_group_metrics(predictions, labels, groups)

            rates = {}
            for group in ("f", "m"):
                mask = groups == group
                table = pd.crosstab(labels[mask], predictions[mask]).reindex(index=[0, 1], columns=[0, 1],
                                                                             fill_value=0)
                true_negatives, false_positives = table.loc[0, 0], table.loc[0, 1]
                false_negatives, true_positives = table.loc[1, 0], table.loc[1, 1]
                rates[group] = (
                    true_positives / (true_positives + false_negatives),
                    false_positives / (false_positives + true_negatives),
                    (true_positives + true_negatives) / mask.sum(),
                )
            self.assertAlmostEqual(metrics.tprd, rates["f"][0] - rates["m"][0], msg=f"case {case}")
            self.assertAlmostEqual(metrics.fprd, rates["f"][1] - rates["m"][1], msg=f"case {case}")
            self.assertAlmostEqual(metrics.acc_f, rates["f"][2], msg=f"case {case}")
            self.assertAlmostEqual(metrics.acc_m, rates["m"][2], msg=f"case {case}")

    def test_multiclass_mean_absolute_gap(self):
        labels = [0, 0, 1, 1, 2, 2, 3]
        groups = ["f", "m", "f", "m", "f", "m", "f"]
        predictions = [0, 1, 1, 1, 2, 2, 3]
        with self.assertLogs("downstream", level="WARNING"):
            metrics = compute_group_metrics(predictions, labels, groups, num_classes=4)
        self.assertEqual(metrics.skipped_classes, (3,))
        self.assertEqual(metrics.per_class_gaps, {0: 1.0, 1: 0.0, 2: 0.0})
        self.assertAlmostEqual(metrics.tprd, 1 / 3)

    def test_missing_group(self):
        with self.assertLogs("downstream", level="WARNING"):
            metrics = compute_group_metrics([1, 0], [1, 0], ["f", "f"])
        self.assertTrue(math.isnan(metrics.acc_m))
        self.assertTrue(math.isnan(metrics.tprd))

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            compute_group_metrics([1], [1, 0], ["f", "m"])


class TestCounterfactualFairness(unittest.TestCase):
    def setUp(self):
        self.lexicon = make_lexicon()

    def test_sensitive_classifier(self):
        examples = [example("She is a nurse", 1, "f", 0), example("She works", 0, "f", 1)]
        self.assertAlmostEqual(counterfactual_fairness(KeywordClassifier(), examples, self.lexicon), 0.2)

    def test_unswappable_examples_count_as_zero(self):
        examples = [example("She is a nurse", 1, "f", 0), example("The pilot works", 1, "m", 1)]
        self.assertAlmostEqual(counterfactual_fairness(KeywordClassifier(), examples, self.lexicon), 0.1)

    def test_gender_blind_classifier(self):
        examples = [example("She is a nurse", 1, "f", 0), example("His son works", 0, "m", 1)]
        self.assertEqual(counterfactual_fairness(ConstantClassifier(), examples, self.lexicon), 0.0)
        self.assertEqual(counterfactual_fairness(ConstantClassifier(), [], self.lexicon), 0.0)


class TestFolds(unittest.TestCase):
    def balanced(self, per_cell: int = 10) -> list[LabeledExample]:
        return [
            example(f"text {label} {group} {i}", label, group, f"{label}{group}{i}")
            for label in (0, 1) for group in ("f", "m") for i in range(per_cell)
        ]

    def test_every_example_held_out_once(self):
        examples = self.balanced()
        partitions = kfold_partitions(examples, folds=5, seed=3)
        held_out = np.concatenate([test for _, test in partitions])
        self.assertEqual(sorted(held_out.tolist()), list(range(len(examples))))
        for train, test in partitions:
            self.assertEqual(set(train) & set(test), set())
        again = kfold_partitions(examples, folds=5, seed=3)
        for (first, _), (second, _) in zip(partitions, again):
            np.testing.assert_array_equal(first, second)

    def test_falls_back_to_label_stratification(self):
        examples = self.balanced(per_cell=5)[:-2]
        with self.assertLogs("downstream", level="WARNING"):
            partitions = kfold_partitions(examples, folds=4)
        self.assertEqual(len(partitions), 4)

    def test_scarce_class(self):
        examples = self.balanced(per_cell=10) + [example("rare", 2, "f", "r")]
        with self.assertRaises(StratificationError):
            kfold_partitions(examples, folds=5)


class TestSummaries(unittest.TestCase):
    def fold(self, fold: int, tprd: float, cf: float) -> FoldMetrics:
        return FoldMetrics(fold=fold, num_train=8, num_test=2, tprd=tprd, fprd=math.nan, acc_f=0.5, acc_m=0.5,
                           cf=cf, cf_tprd=None, cf_fprd=None, cf_acc_f=0.5, cf_acc_m=0.5,
                           per_class_gaps={1: tprd})

    def test_nan_becomes_none(self):
        self.assertIsNone(self.fold(0, 0.1, 0.0).fprd)

    def test_means_and_sample_std(self):
        report = summarize_folds([self.fold(0, 0.1, 0.0), self.fold(1, 0.3, 0.2)], "swapping", 20)
        self.assertAlmostEqual(report.tprd, 0.2)
        self.assertAlmostEqual(report.std["tprd"], math.sqrt(0.02))
        self.assertIsNone(report.fprd)
        self.assertIsNone(report.std["fprd"])
        self.assertAlmostEqual(report.per_class_tprd[1], 0.2)
        self.assertEqual((report.intervention, report.num_examples), ("swapping", 20))


class TestRunDownstreamEval(unittest.TestCase):
    def test_empty_dataset(self):
        model = StubHandle(["she", "he"], hidden_size=4)
        with self.assertRaises(InsufficientDataError):
            run_downstream_eval(model, [], make_lexicon(), DownstreamConfig(folds=2))

    def test_stub_end_to_end(self):
        model = StubHandle(["she", "he", "is", "a", "nurse", "pilot", "works", "the", "her", "his", "son"],
                           hidden_size=6, seed=2)
        texts = {1: "she is a nurse", 0: "he is a pilot"}
        examples = [example(f"{texts[i % 2]} {'the' if i % 4 < 2 else 'works'}", i % 2, "f" if i % 4 < 2 else "m", i)
                    for i in range(20)]
        before = [value.clone() for value in model.network.parameters()]
        with tempfile.TemporaryDirectory() as directory:
            downstream_config = DownstreamConfig(folds=2, epochs=1, batch_size=4, max_seq_len=16,
                                                 intervention="swapping", predictions_dir=directory)
            report = run_downstream_eval(model, examples, make_lexicon(), downstream_config)
            predictions = pd.read_csv(Path(directory) / "fold_0_predictions.csv")
        self.assertEqual(len(report.folds), 2)
        self.assertEqual(sum(fold.num_test for fold in report.folds), 20)
        self.assertGreater(report.folds[0].num_train, 10)
        self.assertEqual(len(predictions), report.folds[0].num_test)
        self.assertTrue(0.0 <= report.cf <= 1.0)
        self.assertEqual(report.intervention, "swapping")
        for original, current in zip(before, model.network.parameters()):
            self.assertTrue(original.equal(current))


if __name__ == "__main__":
    unittest.main()
