from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import structlog
from pydantic import BaseModel, ConfigDict, field_validator

from app.errors import CorpusFormatError, DatasetError
from app.schemas import Dataset, LabeledUtterance, SentencePair, StyleId, StylePair, Utterance
from app.services.corpus import read_lines

logger = structlog.get_logger(__name__)

DEFAULT_CUTOFF = 0.5


class PolarityLexicon(BaseModel):
    """Surface form -> (positive score, negative score); keys are lowercase."""

    model_config = ConfigDict(frozen=True)

    entries: Dict[str, Tuple[float, float]]

    @field_validator("entries")
    @classmethod
    def _check(cls, v):
        normalized = {}
        for word, (pos, neg) in v.items():
            if not (0.0 <= pos <= 1.0 and 0.0 <= neg <= 1.0):
                raise ValueError(f"scores for {word!r} must lie in [0, 1], got ({pos}, {neg})")
            normalized[word.lower()] = (float(pos), float(neg))
        return normalized

    @classmethod
    def from_senses(cls, senses: Iterable[Tuple[str, float, float]]) -> "PolarityLexicon":
        """Collapse per-sense rows to one entry per surface form: the sense
        with the largest |pos - neg| wins (earlier rows win ties)."""
        best: Dict[str, Tuple[float, float]] = {}
        for word, pos, neg in senses:
            word = word.lower()
            current = best.get(word)
            if current is None or abs(pos - neg) > abs(current[0] - current[1]):
                best[word] = (pos, neg)
        return cls(entries=best)

    def lookup(self, word: str) -> Tuple[float, float]:
        return self.entries.get(word.lower(), (0.0, 0.0))


class AntonymMap(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: Dict[str, Tuple[str, ...]]

    @field_validator("entries")
    @classmethod
    def _check(cls, v):
        normalized = {}
        for word, antonyms in v.items():
            key = word.lower()
            if key in (a.lower() for a in antonyms):
                raise ValueError(f"{word!r} lists itself as an antonym")
            normalized[key] = tuple(antonyms)
        return normalized

    def antonyms(self, word: str) -> Tuple[str, ...]:
        return self.entries.get(word.lower(), ())


def load_lexicon(path: Union[str, Path]) -> PolarityLexicon:
    """`word<TAB>pos_score<TAB>neg_score`; repeated words are collapsed per sense."""
    rows = []
    for line_no, line in read_lines(path):
        if not line.strip() or line.startswith("#"):
            continue
        columns = line.split("\t")
        if len(columns) != 3:
            raise CorpusFormatError(path, line_no, f"expected 3 columns, found {len(columns)}")
        try:
            pos, neg = float(columns[1]), float(columns[2])
        except ValueError as e:
            raise CorpusFormatError(path, line_no, "scores must be numbers") from e
        if not (0.0 <= pos <= 1.0 and 0.0 <= neg <= 1.0):
            raise CorpusFormatError(path, line_no, "scores must lie in [0, 1]")
        rows.append((columns[0].strip(), pos, neg))
    lexicon = PolarityLexicon.from_senses(rows)
    logger.info("lexicon_loaded", path=str(path), entries=len(lexicon.entries))
    return lexicon


def load_antonyms(path: Union[str, Path]) -> AntonymMap:
    """`word<TAB>antonym1,antonym2,...`; the stored order is kept."""
    entries: Dict[str, List[str]] = {}
    for line_no, line in read_lines(path):
        if not line.strip() or line.startswith("#"):
            continue
        columns = line.split("\t")
        if len(columns) != 2:
            raise CorpusFormatError(path, line_no, f"expected 2 columns, found {len(columns)}")
        word = columns[0].strip().lower()
        antonyms = entries.setdefault(word, [])
        for antonym in (a.strip() for a in columns[1].split(",")):
            if not antonym or antonym in antonyms:
                continue
            if antonym.lower() == word:
                logger.warning("self_antonym_dropped", path=str(path), line=line_no, word=word)
                continue
            antonyms.append(antonym)
    antonym_map = AntonymMap(entries={w: tuple(a) for w, a in entries.items()})
    logger.info("antonyms_loaded", path=str(path), entries=len(antonym_map.entries))
    return antonym_map


def word_polarity(lexicon: PolarityLexicon, word: str) -> float:
    pos, neg = lexicon.lookup(word)
    return pos - neg


def find_polarity_words(lexicon: PolarityLexicon, utterance: Utterance, cutoff: float = DEFAULT_CUTOFF) -> List[int]:
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    return [i for i, token in enumerate(utterance.tokens) if abs(word_polarity(lexicon, token)) >= cutoff]


def swap_polarity_word(
    lexicon: PolarityLexicon,
    antonyms: AntonymMap,
    utterance: Utterance,
    cutoff: float = DEFAULT_CUTOFF,
) -> Optional[Utterance]:
    """The utterance with its single polarity word replaced by the first antonym,
    or None when the sentence is not eligible."""
    hits = find_polarity_words(lexicon, utterance, cutoff)
    if len(hits) != 1:
        return None
    index = hits[0]
    token = utterance.tokens[index]
    # only all-lowercase tokens are swapped
    if token != token.lower():
        return None
    candidates = antonyms.antonyms(token)
    if not candidates:
        return None
    tokens = list(utterance.tokens)
    tokens[index] = candidates[0].lower()
    return Utterance.from_tokens(tokens)


def synthesize_pair(
    lexicon: PolarityLexicon,
    antonyms: AntonymMap,
    utterance: Utterance,
    cutoff: float = DEFAULT_CUTOFF,
    source_style: StyleId = "negative",
    target_style: StyleId = "positive",
) -> Optional[SentencePair]:
    target = swap_polarity_word(lexicon, antonyms, utterance, cutoff)
    if target is None:
        return None
    return SentencePair(source=utterance, target=target, source_style=source_style, target_style=target_style)


def build_synthetic_corpus(
    lexicon: PolarityLexicon,
    antonyms: AntonymMap,
    dataset: Dataset,
    cutoff: float = DEFAULT_CUTOFF,
    styles: Optional[StylePair] = None,
) -> Dataset:
    """Antonym-swap pairs for every eligible sentence, directed from the
    sentence's own style to the opposite one."""
    if dataset.items and dataset.item_type is not LabeledUtterance:
        raise DatasetError("synthetic pairs are built from an unpaired (labeled) dataset")
    if styles is None:
        found = dataset.styles()
        if len(found) != 2:
            raise DatasetError(f"cannot infer a style pair from styles {found}; pass `styles`")
        styles = StylePair(source=found[0], target=found[1])
    for style in dataset.styles():
        if style not in styles:
            raise DatasetError(f"style {style!r} is not one of {styles.as_tuple()}")
    pairs = []
    for item in dataset.items:
        pair = synthesize_pair(
            lexicon,
            antonyms,
            item.utterance,
            cutoff,
            source_style=item.style,
            target_style=styles.other(item.style),
        )
        if pair is not None:
            pairs.append(pair)
    logger.info("synthetic_pairs_built", sentences=len(dataset), pairs=len(pairs))
    return Dataset(items=tuple(pairs), split=dataset.split)


def swap_baseline(
    lexicon: PolarityLexicon,
    antonyms: AntonymMap,
    utterances: Iterable[Utterance],
    cutoff: float = DEFAULT_CUTOFF,
) -> List[Utterance]:
    """Lexicon-only transfer system: swap when eligible, copy otherwise."""
    out = []
    for utterance in utterances:
        swapped = swap_polarity_word(lexicon, antonyms, utterance, cutoff)
        out.append(swapped if swapped is not None else utterance)
    return out

