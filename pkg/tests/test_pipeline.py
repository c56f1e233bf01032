import random

import pandas as pd
import pytest
import torch

from app.errors import ConfigError, DatasetError, UnscoredPairError
from app.schemas import (
    SCORE_CONTENT,
    SCORE_STYLE_MEAN,
    SCORE_STYLE_SOURCE,
    SCORE_STYLE_TARGET,
    BackboneConfig,
    Dataset,
    IbtConfig,
    PairSelectionConfig,
    RewardConfig,
    SentencePair,
    Split,
    SupervisedConfig,
)
from app.services.metrics import DeskOracle
from app.services.pipeline import (
    LOG_COLUMNS,
    ModelPair,
    ValidationSplit,
    further_pretrain,
    generate_pseudo_pairs,
    ibt_step,
    ibt_train,
    offline_train,
    select_high_quality_pairs,
)
from app.services.seq2seq import ReferenceTinyModel, greedy_decode_batch, nll_loss

from conftest import STYLES, FixedScorer, flatten_generator, marker_corpus, marker_pairs, utt


def by_style(dataset, style):
    return dataset.with_items([item for item in dataset.items if item.style == style])


def scored(content, p_src, p_tgt, text="a"):
    return SentencePair(
        source=utt(text),
        target=utt("b"),
        source_style=STYLES.source,
        target_style=STYLES.target,
        scores={SCORE_CONTENT: content, SCORE_STYLE_SOURCE: p_src, SCORE_STYLE_TARGET: p_tgt},
    )


def random_scored(n, seed):
    rng = random.Random(seed)
    return [scored(rng.uniform(-1, 1), rng.random(), rng.random(), f"s{i}") for i in range(n)]


def reversed_pair(pair):
    return SentencePair(
        source=pair.target, target=pair.source, source_style=pair.target_style, target_style=pair.source_style
    )


@pytest.fixture
def pair_model(backbone_config):
    pairs = marker_pairs(200, seed=5)
    sentences = [u for p in pairs.items for u in (p.source, p.target)]
    return ReferenceTinyModel.build(sentences, backbone_config, STYLES), pairs


SHORT = SupervisedConfig(epochs=3, batch_size=16, max_len=12)


class TestSelection:
    def test_thresholds_are_strict(self):
        pairs = Dataset(
            items=(
                scored(0.5, 0.95, 0.90, "keep"),
                scored(0.1, 0.99, 0.99, "weak content"),
                scored(0.5, 0.90, 0.90, "on the line"),
                scored(0.15, 0.99, 0.99, "content on the line"),
            )
        )
        kept = select_high_quality_pairs(pairs, PairSelectionConfig(sigma_c=0.15, sigma_s=0.9))
        assert [p.source.text for p in kept.items] == ["keep"]
        assert kept.items[0].scores[SCORE_STYLE_MEAN] == pytest.approx(0.925)

    @pytest.mark.parametrize("sigma_c,sigma_s", [(0.15, 0.9), (0.2, 0.6)])
    def test_matches_brute_force(self, sigma_c, sigma_s):
        items = random_scored(1000, seed=8)
        cfg = PairSelectionConfig(sigma_c=sigma_c, sigma_s=sigma_s)
        kept = select_high_quality_pairs(Dataset(items=tuple(items)), cfg)
        expected = [
            p.source.text
            for p in items
            if p.scores[SCORE_CONTENT] > sigma_c
            and (p.scores[SCORE_STYLE_SOURCE] + p.scores[SCORE_STYLE_TARGET]) / 2 > sigma_s
        ]
        assert [p.source.text for p in kept.items] == expected

    def test_raising_a_threshold_never_adds_pairs(self):
        pairs = Dataset(items=tuple(random_scored(300, seed=9)))
        grid = [0.0, 0.2, 0.5, 0.8]

        def kept(sigma_c, sigma_s):
            selected = select_high_quality_pairs(pairs, PairSelectionConfig(sigma_c=sigma_c, sigma_s=sigma_s))
            return {p.source.text for p in selected.items}

        for low, high in zip(grid, grid[1:]):
            for other in grid:
                assert kept(high, other) <= kept(low, other)
                assert kept(other, high) <= kept(other, low)

    def test_unscored_pair(self):
        pairs = Dataset(items=(scored(0.5, 0.9, 0.9), marker_pairs(1).items[0]))
        with pytest.raises(UnscoredPairError):
            select_high_quality_pairs(pairs)


class TestFurtherPretrain:
    def test_zero_epochs_returns_base(self, pair_model):
        model, pairs = pair_model
        cfg = SupervisedConfig(epochs=0)
        assert further_pretrain(model, pairs, cfg) is model

    def test_lowers_nll_without_touching_base(self, pair_model):
        model, pairs = pair_model
        held = list(pairs.items[:20])
        before_fp = model.fingerprint()
        before = nll_loss(model, held).item()
        trained = further_pretrain(model, pairs, SHORT)
        assert nll_loss(trained, held).item() < before
        assert model.fingerprint() == before_fp

    def test_empty_pairs(self, pair_model):
        model, _ = pair_model
        with pytest.raises(DatasetError):
            further_pretrain(model, Dataset(), SHORT)


class TestOfflineTrain:
    def test_without_rewards_matches_pretraining(self, pair_model):
        model, pairs = pair_model
        cfg = SupervisedConfig(epochs=1, batch_size=32, max_len=12)
        offline = offline_train(model, pairs, RewardConfig.disabled(), None, None, cfg)
        pretrained = further_pretrain(model, pairs, cfg)
        assert offline.fingerprint() == pretrained.fingerprint()
        assert offline.styles == STYLES

    def test_direction_comes_from_pairs(self, pair_model):
        model, pairs = pair_model
        flipped = pairs.with_items([reversed_pair(p) for p in pairs.items[:10]])
        cfg = SupervisedConfig(epochs=1, batch_size=8, max_len=12)
        assert offline_train(model, flipped, RewardConfig.disabled(), None, None, cfg).styles == STYLES.reversed()

    def test_mixed_directions(self, pair_model):
        model, pairs = pair_model
        mixed = pairs.with_items([pairs.items[0], reversed_pair(pairs.items[1])])
        with pytest.raises(DatasetError):
            offline_train(model, mixed, RewardConfig.disabled(), None, None, SHORT)

    def test_style_reward_needs_classifier(self, pair_model):
        model, pairs = pair_model
        rewards = RewardConfig.disabled().model_copy(update={"sc0": True})
        with pytest.raises(ConfigError):
            offline_train(model, pairs, rewards, None, None, SHORT)


class TestIbtStep:
    def test_updates_both_models(self, tiny_model):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        before = (models.model_a.fingerprint(), models.model_b.fingerprint())
        corpus = marker_corpus(4, seed=6)
        s1 = by_style(corpus, STYLES.source).utterances()
        s2 = by_style(corpus, STYLES.target).utterances()
        models, metrics = ibt_step(models, s1, s2, None, RewardConfig.disabled(), None, max_len=8)
        assert models.model_a.fingerprint() != before[0]
        assert models.model_b.fingerprint() != before[1]
        assert set(metrics.per_model) == {"informal->formal", "formal->informal"}
        assert all(set(values) == {"nll"} for values in metrics.per_model.values())

    def test_indifferent_classifier_gives_zero_style_reward(self, tiny_model):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        rewards = RewardConfig.disabled().model_copy(update={"sc1": True})
        corpus = marker_corpus(3, seed=7)
        _, metrics = ibt_step(
            models,
            by_style(corpus, STYLES.source).utterances(),
            by_style(corpus, STYLES.target).utterances(),
            FixedScorer({}),
            rewards,
            None,
            torch.Generator().manual_seed(1),
            max_len=8,
        )
        for values in metrics.per_model.values():
            assert values["r_sc"] == 0.0

    def test_learner_targets_are_genuine_sentences(self, tiny_model, monkeypatch):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        corpus = marker_corpus(3, seed=8)
        s1 = by_style(corpus, STYLES.source).utterances()
        s2 = by_style(corpus, STYLES.target).utterances()
        generated = greedy_decode_batch(models.clone().model_a, s1, 8)
        seen = []

        def recording(model, pairs):
            seen.append((model.styles, list(pairs)))
            return nll_loss(model, pairs)

        monkeypatch.setattr("app.services.pipeline.nll_loss", recording)
        ibt_step(models, s1, s2, None, RewardConfig.disabled(), None, max_len=8)
        (styles_b, pairs_b), (styles_a, pairs_a) = seen
        assert styles_b == STYLES.reversed() and styles_a == STYLES
        assert [p.target for p in pairs_b] == s1
        assert [p.source for p in pairs_b] == generated
        assert [p.target for p in pairs_a] == s2
        assert all((p.source_style, p.target_style) == STYLES.reversed().as_tuple() for p in pairs_b)

    def test_empty_batch(self, tiny_model):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        with pytest.raises(DatasetError):
            ibt_step(models, [], [utt("hello")], None, RewardConfig.disabled(), None)


class TestIbtTrain:
    def test_zero_budget_returns_input(self, tiny_model):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        corpus = marker_corpus(4)
        same, log = ibt_train(
            models, by_style(corpus, "informal"), by_style(corpus, "formal"), None, None, IbtConfig(steps=0)
        )
        assert same is models
        assert log.rows == []

    def test_short_run_with_validation(self, tiny_model, marker_scorer, tmp_path):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        start = models.model_a.fingerprint()
        corpus = marker_corpus(8, seed=1)
        valid = marker_corpus(3, seed=2, split=Split.VALID)
        cfg = IbtConfig(steps=4, batch_size=4, valid_every=2, patience=5, max_len=8, rewards=RewardConfig.disabled())
        trained, log = ibt_train(
            models,
            by_style(corpus, "informal"),
            by_style(corpus, "formal"),
            ValidationSplit(s1=by_style(valid, "informal"), s2=by_style(valid, "formal")),
            marker_scorer,
            cfg,
        )
        frame = log.frame()
        assert list(frame.columns) == LOG_COLUMNS
        assert sorted(frame.dropna(subset=["valid_hm"])["step"].unique().tolist()) == [2, 4]
        assert set(frame.dropna(subset=["valid_hm"])["direction"]) == {"informal->formal", "formal->informal", "overall"}
        assert models.model_a.fingerprint() == start
        assert trained is not models
        assert log.write(tmp_path / "logs.tsv").is_file()

    def test_seeded_runs_agree(self, tiny_model, marker_scorer):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        corpus = marker_corpus(6, seed=10)
        cfg = IbtConfig(steps=3, batch_size=3, valid_every=3, max_len=8, rewards=RewardConfig(), seed=5)
        runs = [
            ibt_train(
                models,
                by_style(corpus, "informal"),
                by_style(corpus, "formal"),
                None,
                marker_scorer,
                cfg,
                oracle=DeskOracle(),
            )
            for _ in range(2)
        ]
        (first, first_log), (second, second_log) = runs
        assert first.model_a.fingerprint() == second.model_a.fingerprint()
        assert first.model_b.fingerprint() == second.model_b.fingerprint()
        pd.testing.assert_frame_equal(first_log.frame(), second_log.frame())
        assert first_log.frame()["r_sc"].notna().all()

    def test_validation_needs_classifier(self, tiny_model):
        models = ModelPair.from_pretrained(tiny_model, STYLES)
        corpus = marker_corpus(4)
        valid = ValidationSplit(s1=by_style(corpus, "informal"), s2=by_style(corpus, "formal"))
        with pytest.raises(ConfigError):
            ibt_train(models, by_style(corpus, "informal"), by_style(corpus, "formal"), valid, None, IbtConfig(steps=1, valid_every=1))


class TestPseudoPairs:
    @pytest.fixture
    def please_model(self):
        config = BackboneConfig(d_model=8, heads=2, encoder_layers=1, decoder_layers=1, ff_dim=16, dropout=0.0, max_len=6)
        model = ReferenceTinyModel.build([utt("please you thanks")], config, STYLES)
        flatten_generator(model, boosts=(model.vocab.stoi["please"],))
        return model

    def test_scores_attached(self, please_model, marker_scorer):
        sources = by_style(marker_corpus(10, seed=4), STYLES.source)
        pairs = generate_pseudo_pairs(please_model, sources, marker_scorer, DeskOracle(), sample_count=3, max_len=2)
        assert len(pairs) == 3
        for pair in pairs.items:
            assert pair.target.text == "please please"
            assert pair.scores[SCORE_STYLE_SOURCE] == pytest.approx(0.99)
            assert pair.scores[SCORE_STYLE_TARGET] == pytest.approx(0.99)
            assert pair.scores[SCORE_CONTENT] == pytest.approx(-1.0)
        # no content overlap, nothing survives selection
        assert len(select_high_quality_pairs(pairs)) == 0

    def test_empty_generations_are_kept_and_scored(self, please_model, marker_scorer):
        flatten_generator(please_model, boosts=(please_model.vocab.eos_id,))
        sources = by_style(marker_corpus(5, seed=6), STYLES.source)
        pairs = generate_pseudo_pairs(please_model, sources, marker_scorer, DeskOracle(), max_len=4)
        assert len(pairs) == 5
        assert [p.source for p in pairs.items] == sources.utterances()
        for pair in pairs.items:
            assert pair.target.tokens == ()
            assert pair.scores[SCORE_CONTENT] == pytest.approx(-1.0)
            assert pair.scores[SCORE_STYLE_SOURCE] == pytest.approx(0.99)
            assert pair.scores[SCORE_STYLE_TARGET] == pytest.approx(0.5)
        assert len(select_high_quality_pairs(pairs)) == 0

    def test_sources_must_match_direction(self, please_model, marker_scorer):
        sources = by_style(marker_corpus(3), STYLES.target)
        with pytest.raises(DatasetError):
            generate_pseudo_pairs(please_model, sources, marker_scorer, DeskOracle())
