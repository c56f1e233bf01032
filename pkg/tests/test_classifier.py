import copy
import random

import pytest
import torch
from structlog.testing import capture_logs

from app.errors import CheckpointFormatError, ClassifierChangedError, DatasetError, EmptyUtteranceError
from app.models import TextCNN, Vocabulary
from app.schemas import (
    SCORE_STYLE_MEAN,
    SCORE_STYLE_SOURCE,
    SCORE_STYLE_TARGET,
    ClassifierTrainConfig,
    Dataset,
    LabeledUtterance,
    SentencePair,
    Split,
)
from app.services.classifier import (
    StyleClassifier,
    classifier_accuracy,
    filter_paraphrase_pairs,
    frozen,
    load_classifier,
    predict_style_probs,
    save_classifier,
    train_classifier,
)
from app.services.seq2seq import save_checkpoint

from conftest import STYLES, FixedScorer, marker_corpus, marker_sentence, utt

SMALL = ClassifierTrainConfig(epochs=2, batch_size=16, num_filters=4, embedding_dim=8, filter_widths=(1,), dropout=0.0)


def pair(source, target):
    return SentencePair(source=utt(source), target=utt(target), source_style=STYLES.source, target_style=STYLES.target)


def flipped(dataset):
    return dataset.with_items(
        [LabeledUtterance(utterance=i.utterance, style=STYLES.other(i.style)) for i in dataset.items]
    )


class TestTraining:
    def test_separates_marker_styles(self, tiny_classifier):
        test = marker_corpus(50, seed=9, split=Split.TEST)
        assert classifier_accuracy(tiny_classifier, test) >= 0.95

    def test_history_per_epoch(self, tiny_classifier):
        assert [h["epoch"] for h in tiny_classifier.history] == [1.0, 2.0, 3.0, 4.0, 5.0]

    def test_frozen_after_training(self, tiny_classifier):
        assert not any(p.requires_grad for p in tiny_classifier.model.parameters())

    def test_probabilities_sum_to_one(self, tiny_classifier):
        p1, p2 = predict_style_probs(tiny_classifier, utt("plz send u the report"))
        assert p1 + p2 == pytest.approx(1.0)
        assert p1 > p2

    def test_styles_default_to_corpus_order(self):
        clf = train_classifier(marker_corpus(10), Dataset(), SMALL)
        assert clf.styles.as_tuple() == STYLES.as_tuple()

    def test_single_style_rejected(self):
        rng = random.Random(0)
        items = [LabeledUtterance(utterance=utt(marker_sentence(rng, "formal")[0]), style="formal") for _ in range(5)]
        one = Dataset(items=tuple(items))
        with pytest.raises(DatasetError):
            train_classifier(one, Dataset(), SMALL, styles=STYLES)

    def test_empty_validation_falls_back_to_last_epoch(self):
        with capture_logs() as logs:
            clf = train_classifier(marker_corpus(10), Dataset(split=Split.VALID), SMALL, styles=STYLES)
        assert any(entry["event"] == "empty_validation_set" for entry in logs)
        assert len(clf.history) == SMALL.epochs

    def test_seeded_training_is_deterministic(self):
        train, valid = marker_corpus(30, seed=4), marker_corpus(10, seed=5, split=Split.VALID)
        first = train_classifier(train, valid, SMALL, styles=STYLES)
        second = train_classifier(train, valid, SMALL, styles=STYLES)
        assert first.fingerprint() == second.fingerprint()
        assert first.history == second.history

    @pytest.mark.slow
    def test_large_marker_corpus(self):
        cfg = ClassifierTrainConfig(
            epochs=3, batch_size=64, learning_rate=5e-3, num_filters=16, embedding_dim=16, filter_widths=(1, 2), dropout=0.0
        )
        clf = train_classifier(marker_corpus(2000, seed=21), marker_corpus(200, seed=22, split=Split.VALID), cfg, styles=STYLES)
        assert classifier_accuracy(clf, marker_corpus(500, seed=23, split=Split.TEST)) >= 0.98


class TestScoring:
    def test_zeroed_projection_is_indifferent(self):
        vocab = Vocabulary(["hello", "there"])
        model = TextCNN(len(vocab), embedding_dim=4, num_filters=2, filter_widths=(1, 2), dropout=0.0)
        with torch.no_grad():
            model.proj.weight.zero_()
            model.proj.bias.zero_()
        clf = StyleClassifier(model, vocab, STYLES, SMALL)
        assert predict_style_probs(clf, utt("hello there")) == pytest.approx((0.5, 0.5))
        # ties go to the first style
        assert clf.predict_styles([utt("hello")]) == [STYLES.source]

    def test_empty_utterance(self, tiny_classifier):
        with pytest.raises(EmptyUtteranceError):
            predict_style_probs(tiny_classifier, utt(""))

    def test_unknown_style(self, tiny_classifier):
        with pytest.raises(DatasetError):
            tiny_classifier.style_probs([utt("hello")], "sarcastic")


class TestAccuracy:
    def test_perfect_and_flipped(self, tiny_classifier):
        test = Dataset(
            items=(
                LabeledUtterance(utterance=utt("plz send u the report"), style="informal"),
                LabeledUtterance(utterance=utt("please send you the report"), style="formal"),
            ),
            split=Split.TEST,
        )
        assert classifier_accuracy(tiny_classifier, test) == 1.0
        assert classifier_accuracy(tiny_classifier, flipped(test)) == 0.0

    def test_empty_test_set(self, tiny_classifier):
        with pytest.raises(DatasetError):
            classifier_accuracy(tiny_classifier, Dataset(split=Split.TEST))


class TestParaphraseFilter:
    def test_mean_above_sigma_is_kept(self):
        scorer = FixedScorer(
            {
                "keep src": (0.95, 0.05),
                "keep tgt": (0.20, 0.80),
                "drop src": (0.90, 0.10),
                "drop tgt": (0.30, 0.70),
            }
        )
        pairs = Dataset(items=(pair("keep src", "keep tgt"), pair("drop src", "drop tgt")))
        kept = filter_paraphrase_pairs(scorer, pairs, 0.85)
        assert [p.source.text for p in kept.items] == ["keep src"]
        scores = kept.items[0].scores
        assert scores[SCORE_STYLE_SOURCE] == pytest.approx(0.95)
        assert scores[SCORE_STYLE_TARGET] == pytest.approx(0.80)
        assert scores[SCORE_STYLE_MEAN] == pytest.approx(0.875)

    def test_threshold_is_strict(self):
        scorer = FixedScorer({"a": (0.9, 0.1), "b": (0.1, 0.9)})
        assert len(filter_paraphrase_pairs(scorer, Dataset(items=(pair("a", "b"),)), 0.9)) == 0

    def test_matches_brute_force(self):
        rng = random.Random(4)
        table, items = {}, []
        for i in range(1000):
            p1, p2 = rng.random(), rng.random()
            table[f"s{i}"] = (p1, 1 - p1)
            table[f"t{i}"] = (1 - p2, p2)
            items.append(pair(f"s{i}", f"t{i}"))
        sigma = 0.7
        kept = filter_paraphrase_pairs(FixedScorer(table), Dataset(items=tuple(items)), sigma)
        expected = [p.source.text for p in items if (table[p.source.text][0] + table[p.target.text][1]) / 2 > sigma]
        assert [p.source.text for p in kept.items] == expected

    def test_higher_sigma_keeps_a_subset(self):
        rng = random.Random(6)
        table, items = {}, []
        for i in range(200):
            table[f"s{i}"] = (rng.random(), 0.0)
            table[f"t{i}"] = (0.0, rng.random())
            items.append(pair(f"s{i}", f"t{i}"))
        pairs = Dataset(items=tuple(items))
        previous = None
        for sigma in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
            kept = {p.source.text for p in filter_paraphrase_pairs(FixedScorer(table), pairs, sigma).items}
            if previous is not None:
                assert kept <= previous
            previous = kept
        assert previous == set()

    @pytest.mark.parametrize("sigma", [-0.1, 1.5])
    def test_sigma_range(self, sigma):
        with pytest.raises(ValueError):
            filter_paraphrase_pairs(FixedScorer({}), Dataset(), sigma)


class TestPersistence:
    def test_round_trip_keeps_predictions(self, tiny_classifier, tmp_path):
        path = save_classifier(tiny_classifier, tmp_path / "classifier.pt")
        loaded = load_classifier(path)
        sentences = marker_corpus(5, seed=11).utterances()
        assert loaded.fingerprint() == tiny_classifier.fingerprint()
        assert loaded.predict_styles(sentences) == tiny_classifier.predict_styles(sentences)
        assert loaded.styles == tiny_classifier.styles

    def test_model_checkpoint_is_not_a_classifier(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "base.pt")
        with pytest.raises(CheckpointFormatError):
            load_classifier(path)


class TestFrozen:
    def test_unchanged_classifier_passes(self, tiny_classifier):
        with capture_logs() as logs:
            with frozen(tiny_classifier, "ibt-train") as clf:
                clf.style_probs([utt("plz send u the report")], STYLES.target)
        assert [entry["event"] for entry in logs] == ["classifier_unchanged"]

    def test_changed_parameters_raise(self, tiny_classifier):
        clf = copy.deepcopy(tiny_classifier)
        with pytest.raises(ClassifierChangedError) as info:
            with frozen(clf, "ibt-train"):
                with torch.no_grad():
                    next(clf.model.parameters()).add_(1.0)
        assert info.value.exit_code == 1
        assert "ibt-train" in info.value.detail

    def test_no_classifier(self):
        with frozen(None, "train-offline") as clf:
            assert clf is None
