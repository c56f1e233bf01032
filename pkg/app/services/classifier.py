import copy
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import structlog
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.errors import ClassifierChangedError, CorruptCheckpointError, DatasetError, EmptyUtteranceError
from app.models import TextCNN, Vocabulary, pad_batch
from app.schemas import (
    SCORE_STYLE_MEAN,
    SCORE_STYLE_SOURCE,
    SCORE_STYLE_TARGET,
    ClassifierTrainConfig,
    Dataset,
    LabeledUtterance,
    SentencePair,
    StyleId,
    StylePair,
    Utterance,
)
from app.services.checkpoint import FORMAT_CLASSIFIER, parameter_fingerprint, read_container, write_container

logger = structlog.get_logger(__name__)

INFERENCE_BATCH = 256


class StyleScorer(Protocol):
    def style_probs(self, utterances: Sequence[Utterance], style: StyleId) -> List[float]:
        ...


class StyleClassifier:
    """Frozen two-way TextCNN style classifier.

    Index 0 of every probability pair is `styles.source`, index 1 is `styles.target`."""

    def __init__(
        self,
        model: TextCNN,
        vocab: Vocabulary,
        styles: StylePair,
        config: ClassifierTrainConfig,
        history: Optional[List[Dict[str, float]]] = None,
        frozen: bool = True,
    ):
        self.model = model
        self.vocab = vocab
        self.styles = styles
        self.config = config
        self.history = history or []
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def _batch(self, utterances: Sequence[Utterance]) -> torch.Tensor:
        ids = [self.vocab.encode(u.tokens) for u in utterances]
        return pad_batch(ids, self.vocab.pad_id, min_len=self.model.min_length)

    @torch.no_grad()
    def probs(self, utterances: Sequence[Utterance]) -> torch.Tensor:
        """[N, 2] probabilities, rows summing to one. Empty utterances score as all padding."""
        self.model.eval()
        out = []
        for start in range(0, len(utterances), INFERENCE_BATCH):
            chunk = utterances[start : start + INFERENCE_BATCH]
            out.append(F.softmax(self.model(self._batch(chunk)), dim=-1))
        if not out:
            return torch.zeros((0, 2))
        return torch.cat(out, dim=0)

    def style_index(self, style: StyleId) -> int:
        if style == self.styles.source:
            return 0
        if style == self.styles.target:
            return 1
        raise DatasetError(f"style {style!r} is not one of {self.styles.as_tuple()}")

    def style_probs(self, utterances: Sequence[Utterance], style: StyleId) -> List[float]:
        column = self.style_index(style)
        return [float(p) for p in self.probs(list(utterances))[:, column]]

    def prob(self, utterance: Utterance, style: StyleId) -> float:
        return self.style_probs([utterance], style)[0]

    def predict_styles(self, utterances: Sequence[Utterance]) -> List[StyleId]:
        probs = self.probs(list(utterances))
        # ties go to index 0
        return [self.styles.target if row[1] > row[0] else self.styles.source for row in probs]

    def fingerprint(self) -> str:
        return parameter_fingerprint(self.model)


def _labeled(dataset: Dataset, what: str) -> List[LabeledUtterance]:
    if dataset.items and dataset.item_type is not LabeledUtterance:
        raise DatasetError(f"{what} set must contain labeled utterances")
    return list(dataset.items)


def _labels(items: Sequence[LabeledUtterance], styles: StylePair) -> torch.Tensor:
    labels = []
    for item in items:
        if item.style not in styles:
            raise DatasetError(f"label {item.style!r} is not one of {styles.as_tuple()}")
        labels.append(0 if item.style == styles.source else 1)
    return torch.tensor(labels, dtype=torch.long)


def train_classifier(
    train: Dataset,
    valid: Dataset,
    cfg: Optional[ClassifierTrainConfig] = None,
    styles: Optional[StylePair] = None,
    progress: bool = False,
) -> StyleClassifier:
    cfg = cfg or ClassifierTrainConfig()
    train_items = _labeled(train, "training")
    valid_items = _labeled(valid, "validation")
    found = train.styles()
    if len(found) < 2:
        raise DatasetError(f"classifier training needs both styles, found {found}")
    if styles is None:
        styles = StylePair(source=found[0], target=found[1])

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    vocab = Vocabulary.build((item.utterance.tokens for item in train_items), max_size=cfg.max_vocab)
    model = TextCNN(
        vocab_size=len(vocab),
        embedding_dim=cfg.embedding_dim,
        num_filters=cfg.num_filters,
        filter_widths=cfg.filter_widths,
        dropout=cfg.dropout,
        pad_id=vocab.pad_id,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    labels = _labels(train_items, styles)
    encoded = [vocab.encode(item.utterance.tokens) for item in train_items]

    clf = StyleClassifier(model, vocab, styles, cfg, frozen=False)

    history: List[Dict[str, float]] = []
    best_state, best_acc = None, -1.0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="classifier", disable=not progress):
        model.train()
        order = torch.randperm(len(encoded), generator=generator)
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            index = order[start : start + cfg.batch_size]
            ids = pad_batch([encoded[i] for i in index.tolist()], vocab.pad_id, min_len=model.min_length)
            loss = F.cross_entropy(model(ids), labels[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1

        model.eval()
        valid_acc = _accuracy(clf, valid_items) if valid_items else float("nan")
        mean_loss = total / max(batches, 1)
        history.append({"epoch": float(epoch), "loss": mean_loss, "valid_acc": valid_acc})
        logger.info("classifier_epoch", epoch=epoch, loss=round(mean_loss, 6), valid_acc=valid_acc)
        if valid_items and valid_acc > best_acc:
            best_acc = valid_acc
            best_state = copy.deepcopy(model.state_dict())

    if not valid_items:
        logger.warning("empty_validation_set", fallback="final_epoch")
    elif best_state is not None:
        model.load_state_dict(best_state)
        logger.info("classifier_selected", valid_acc=best_acc)
    clf.history = history
    clf.freeze()
    return clf


def _accuracy(clf: StyleClassifier, items: Sequence[LabeledUtterance]) -> float:
    predicted = clf.predict_styles([item.utterance for item in items])
    return sum(p == item.style for p, item in zip(predicted, items)) / len(items)


def predict_style_probs(clf: StyleClassifier, utterance: Utterance) -> Tuple[float, float]:
    if not utterance.tokens:
        raise EmptyUtteranceError("cannot classify an empty utterance")
    row = clf.probs([utterance])[0]
    return float(row[0]), float(row[1])


def filter_paraphrase_pairs(scorer: StyleScorer, pairs: Dataset, sigma: float) -> Dataset:
    """Keep pairs whose mean of p(source_style|source) and p(target_style|target)
    is strictly above `sigma`; kept pairs carry the three style scores."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    items: List[SentencePair] = list(pairs.items)
    if items and pairs.item_type is not SentencePair:
        raise DatasetError("paraphrase filtering needs a dataset of sentence pairs")

    source_probs = _grouped_probs(scorer, [(p.source, p.source_style) for p in items])
    target_probs = _grouped_probs(scorer, [(p.target, p.target_style) for p in items])
    kept = []
    for pair, p1, p2 in zip(items, source_probs, target_probs):
        mean = (p1 + p2) / 2
        if mean > sigma:
            kept.append(pair.with_scores(**{SCORE_STYLE_SOURCE: p1, SCORE_STYLE_TARGET: p2, SCORE_STYLE_MEAN: mean}))
    logger.info("paraphrases_filtered", sigma=sigma, total=len(items), kept=len(kept))
    return pairs.with_items(kept)


def _grouped_probs(scorer: StyleScorer, queries: Sequence[Tuple[Utterance, StyleId]]) -> List[float]:
    # one batched call per style, results back in query order
    out: List[float] = [0.0] * len(queries)
    by_style: Dict[StyleId, List[int]] = {}
    for i, (_, style) in enumerate(queries):
        by_style.setdefault(style, []).append(i)
    for style, positions in by_style.items():
        probs = scorer.style_probs([queries[i][0] for i in positions], style)
        for i, p in zip(positions, probs):
            out[i] = p
    return out


@contextmanager
def frozen(clf: Optional[StyleClassifier], stage: str) -> Iterator[Optional[StyleClassifier]]:
    """Raise when `clf` leaves the block with different parameters."""
    if clf is None:
        yield clf
        return
    before = clf.fingerprint()
    yield clf
    after = clf.fingerprint()
    if after != before:
        logger.error("classifier_changed", stage=stage, before=before[:12], after=after[:12])
        raise ClassifierChangedError(f"style classifier changed during {stage}")
    logger.info("classifier_unchanged", stage=stage, fingerprint=before[:12])


def classifier_accuracy(clf: StyleClassifier, test: Dataset) -> float:
    items = _labeled(test, "test")
    if not items:
        raise DatasetError("classifier accuracy needs a non-empty test set")
    return _accuracy(clf, items)


def save_classifier(clf: StyleClassifier, path: Union[str, Path]) -> Path:
    return write_container(
        path,
        FORMAT_CLASSIFIER,
        {
            "state_dict": clf.model.state_dict(),
            "vocab": clf.vocab.to_dict(),
            "styles": [clf.styles.source, clf.styles.target],
            "config": clf.config.model_dump(mode="json"),
            "history": clf.history,
        },
    )


def load_classifier(path: Union[str, Path]) -> StyleClassifier:
    data = read_container(path, FORMAT_CLASSIFIER)
    try:
        cfg = ClassifierTrainConfig(**data["config"])
        vocab = Vocabulary.from_dict(data["vocab"])
        styles = StylePair(source=data["styles"][0], target=data["styles"][1])
        model = TextCNN(
            vocab_size=len(vocab),
            embedding_dim=cfg.embedding_dim,
            num_filters=cfg.num_filters,
            filter_widths=cfg.filter_widths,
            dropout=cfg.dropout,
            pad_id=vocab.pad_id,
        )
        model.load_state_dict(data["state_dict"])
    except (KeyError, ValueError, RuntimeError) as e:
        raise CorruptCheckpointError(f"{path}: classifier payload is incomplete ({e})") from e
    return StyleClassifier(model, vocab, styles, cfg, list(data.get("history", [])))
