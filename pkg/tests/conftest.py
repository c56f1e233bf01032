import random
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import pytest
import structlog
import torch

from app.schemas import (
    BackboneConfig,
    ClassifierTrainConfig,
    Dataset,
    LabeledUtterance,
    SentencePair,
    Split,
    StylePair,
    Utterance,
)
from app.services.classifier import train_classifier
from app.services.lexicon import load_antonyms, load_lexicon
from app.services.seq2seq import ReferenceTinyModel

ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT / "config"

STYLES = StylePair(source="informal", target="formal")

# informal marker -> formal marker
MARKERS = {"plz": "please", "u": "you", "thx": "thanks", "gonna": "going", "ur": "your"}
NOUNS = ["report", "file", "menu", "tickets", "photos", "notes", "invoice", "slides"]
DAYS = ["monday", "friday", "tomorrow", "tonight"]
TEMPLATES = [
    "{plz} send {u} the {noun} {day}",
    "{thx} for the {noun} , {u} rock",
    "{u} are {gonna} like the {noun}",
    "{plz} check {ur} {noun} before {day}",
    "is {ur} {noun} ready {day} ? {thx}",
]


def utt(text: str) -> Utterance:
    return Utterance.from_tokens(text.split())


def marker_sentence(rng: random.Random, style: str) -> Tuple[str, str]:
    """(sentence in `style`, the same sentence in the other style)."""
    template = rng.choice(TEMPLATES)
    slots = {"noun": rng.choice(NOUNS), "day": rng.choice(DAYS)}
    informal = template.format(**slots, **{k: k for k in MARKERS})
    formal = template.format(**slots, **MARKERS)
    return (informal, formal) if style == STYLES.source else (formal, informal)


def marker_corpus(n: int, seed: int = 0, split: Split = Split.TRAIN) -> Dataset:
    rng = random.Random(seed)
    items = []
    for style in STYLES.as_tuple():
        for _ in range(n):
            items.append(LabeledUtterance(utterance=utt(marker_sentence(rng, style)[0]), style=style))
    return Dataset(items=tuple(items), split=split)


def marker_pairs(n: int, seed: int = 0) -> Dataset:
    rng = random.Random(seed)
    pairs = []
    for _ in range(n):
        source, target = marker_sentence(rng, STYLES.source)
        pairs.append(
            SentencePair(source=utt(source), target=utt(target), source_style=STYLES.source, target_style=STYLES.target)
        )
    return Dataset(items=tuple(pairs))


def flatten_generator(model, boosts=()):
    """Zero the output layer, then push the listed ids up by 50 logits."""
    with torch.no_grad():
        model.net.generator.weight.zero_()
        model.net.generator.bias.zero_()
        for token_id in boosts:
            model.net.generator.bias[token_id] = 50.0


class FixedScorer:
    """Classifier stand-in: style probabilities looked up by sentence text."""

    def __init__(self, table: Dict[str, Tuple[float, float]], styles: StylePair = STYLES, default=(0.5, 0.5)):
        self.table = table
        self.styles = styles
        self.default = default

    def _row(self, utterance: Utterance) -> Tuple[float, float]:
        return self.table.get(utterance.text, self.default)

    def style_probs(self, utterances: Sequence[Utterance], style: str) -> List[float]:
        column = 0 if style == self.styles.source else 1
        return [self._row(u)[column] for u in utterances]

    def predict_styles(self, utterances: Sequence[Utterance]) -> List[str]:
        return [self.styles.target if self._row(u)[1] > self._row(u)[0] else self.styles.source for u in utterances]


class MarkerScorer(FixedScorer):
    """Confident rule-based classifier for the marker task."""

    def __init__(self):
        super().__init__({})

    def _row(self, utterance: Utterance) -> Tuple[float, float]:
        tokens = set(utterance.tokens)
        informal = len(tokens & set(MARKERS))
        formal = len(tokens & set(MARKERS.values()))
        if informal > formal:
            return (0.99, 0.01)
        if formal > informal:
            return (0.01, 0.99)
        return (0.5, 0.5)


@pytest.fixture(autouse=True)
def _reset_logging():
    # CLI runs reconfigure structlog; later tests capture with the defaults
    yield
    structlog.reset_defaults()


@pytest.fixture
def styles() -> StylePair:
    return STYLES


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon(CONFIG_DIR / "sentiment_lexicon.tsv")


@pytest.fixture(scope="session")
def antonyms():
    return load_antonyms(CONFIG_DIR / "antonyms.tsv")


@pytest.fixture(scope="session")
def tiny_classifier():
    cfg = ClassifierTrainConfig(
        epochs=5, batch_size=32, learning_rate=5e-3, num_filters=16, embedding_dim=16, filter_widths=(1, 2), dropout=0.0
    )
    return train_classifier(marker_corpus(150, seed=1), marker_corpus(40, seed=2, split=Split.VALID), cfg, styles=STYLES)


@pytest.fixture
def backbone_config() -> BackboneConfig:
    return BackboneConfig(
        d_model=16,
        heads=2,
        encoder_layers=1,
        decoder_layers=1,
        ff_dim=32,
        dropout=0.0,
        max_len=12,
        learning_rate=1e-3,
        seed=0,
    )


@pytest.fixture
def tiny_model(backbone_config) -> ReferenceTinyModel:
    sentences = marker_corpus(20, seed=3).utterances()
    return ReferenceTinyModel.build(sentences, backbone_config, STYLES)


@pytest.fixture
def marker_scorer() -> MarkerScorer:
    return MarkerScorer()
