import re
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
import structlog

from app.errors import CorpusFormatError, DatasetError, EmptyUtteranceError, MissingFileError
from app.schemas import (
    DEFAULT_MAX_LEN,
    Dataset,
    LabeledUtterance,
    ReferenceSet,
    SentencePair,
    Split,
    StyleId,
    Utterance,
)

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

# clitics split off their host ("it's" -> "it" "'s", "don't" -> "do" "n't"),
# hyphenated words stay whole, every other punctuation mark is its own token
_TOKEN_RE = re.compile(
    r"\w+?(?=n['’]t\b)"
    r"|n['’]t\b"
    r"|['’](?:s|re|ve|ll|d|m)\b"
    r"|\w+(?:-\w+)*"
    r"|[^\w\s]",
    re.IGNORECASE,
)


def tokenize(text: str, lowercase: bool = False) -> Utterance:
    if not text or not text.strip():
        raise EmptyUtteranceError("cannot tokenize empty or whitespace-only text")
    source = text.lower() if lowercase else text
    tokens = tuple(_TOKEN_RE.findall(source))
    if not tokens:
        raise EmptyUtteranceError(f"no tokens in {text!r}")
    return Utterance(tokens=tokens, raw=text)


def detokenize(utterance: Utterance) -> str:
    return " ".join(utterance.tokens)


def token_spans(text: str) -> List[Tuple[str, int, int]]:
    """Tokens with their character offsets in `text`."""
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def truncate(utterance: Utterance, max_len: Optional[int], **context) -> Utterance:
    if max_len is None or len(utterance.tokens) <= max_len:
        return utterance
    logger.warning("utterance_truncated", length=len(utterance.tokens), max_len=max_len, **context)
    return Utterance(tokens=utterance.tokens[:max_len], raw=utterance.raw)


def split_from_path(path: PathLike) -> Split:
    """`{split}.{style}` naming: `valid.formal` -> Split.VALID; anything else is train."""
    prefix = Path(path).name.split(".", 1)[0]
    try:
        return Split(prefix)
    except ValueError:
        return Split.TRAIN


def read_lines(path: PathLike) -> Iterator[Tuple[int, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusFormatError(path, line_no, f"undecodable bytes at offset {e.start}") from e
            yield line_no, line.rstrip("\r\n")


def _tokenize_at(text: str, path: PathLike, line_no: int, lowercase: bool, max_len: Optional[int]) -> Utterance:
    try:
        utterance = tokenize(text, lowercase=lowercase)
    except EmptyUtteranceError as e:
        raise CorpusFormatError(path, line_no, e.detail) from e
    return truncate(utterance, max_len, path=str(path), line=line_no)


def load_unpaired(
    path: PathLike,
    style: StyleId,
    split: Optional[Split] = None,
    lowercase: bool = False,
    max_len: Optional[int] = DEFAULT_MAX_LEN,
) -> Dataset:
    items = []
    for line_no, line in read_lines(path):
        if not line.strip():
            continue
        utterance = _tokenize_at(line, path, line_no, lowercase, max_len)
        items.append(LabeledUtterance(utterance=utterance, style=style))
    dataset = Dataset(items=tuple(items), split=split or split_from_path(path))
    logger.info("dataset_loaded", path=str(path), kind="unpaired", style=style, count=len(dataset))
    return dataset


def load_pairs(
    path: PathLike,
    source_style: StyleId,
    target_style: StyleId,
    split: Optional[Split] = None,
    lowercase: bool = False,
    max_len: Optional[int] = DEFAULT_MAX_LEN,
) -> Dataset:
    items = []
    for line_no, line in read_lines(path):
        if not line.strip():
            continue
        columns = line.split("\t")
        if len(columns) != 2:
            raise CorpusFormatError(path, line_no, f"expected 2 tab-separated columns, found {len(columns)}")
        source = _tokenize_at(columns[0], path, line_no, lowercase, max_len)
        target = _tokenize_at(columns[1], path, line_no, lowercase, max_len)
        items.append(
            SentencePair(source=source, target=target, source_style=source_style, target_style=target_style)
        )
    dataset = Dataset(items=tuple(items), split=split or split_from_path(path))
    logger.info("dataset_loaded", path=str(path), kind="pairs", count=len(dataset))
    return dataset


def load_references(
    source_path: PathLike,
    ref_paths: Sequence[PathLike],
    split: Optional[Split] = None,
    lowercase: bool = False,
    max_len: Optional[int] = DEFAULT_MAX_LEN,
) -> Dataset:
    if not ref_paths:
        raise DatasetError("at least one reference file is required")
    sources = list(read_lines(source_path))
    references = [list(read_lines(p)) for p in ref_paths]
    for ref_path, lines in zip(ref_paths, references):
        if len(lines) != len(sources):
            line = min(len(lines), len(sources)) + 1
            raise CorpusFormatError(
                ref_path, line, f"has {len(lines)} lines but {source_path} has {len(sources)}"
            )

    items = []
    for row, (line_no, text) in enumerate(sources):
        source = _tokenize_at(text, source_path, line_no, lowercase, max_len)
        refs = tuple(
            _tokenize_at(lines[row][1], ref_path, line_no, lowercase, max_len)
            for ref_path, lines in zip(ref_paths, references)
        )
        items.append(ReferenceSet(source=source, references=refs))
    dataset = Dataset(items=tuple(items), split=split or split_from_path(source_path))
    logger.info("dataset_loaded", path=str(source_path), kind="references", refs=len(ref_paths), count=len(dataset))
    return dataset


def reference_paths(data_dir: PathLike, split: Split, style: Optional[StyleId] = None) -> List[Path]:
    """`{split}.{style}.ref0 .. refK` in index order; without a style, the
    shared `{split}.ref0 .. refK` that go with `{split}.src`."""
    data_dir = Path(data_dir)
    stem = f"{split.value}.{style}" if style is not None else split.value
    found = []
    k = 0
    while (data_dir / f"{stem}.ref{k}").is_file():
        found.append(data_dir / f"{stem}.ref{k}")
        k += 1
    return found


def shared_source_path(data_dir: PathLike, split: Split) -> Path:
    return Path(data_dir) / f"{split.value}.src"


def unpaired_path(data_dir: PathLike, split: Split, style: StyleId) -> Path:
    return Path(data_dir) / f"{split.value}.{style}"


# Writers
def write_unpaired(dataset: Dataset, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [detokenize(u) for u in dataset.utterances()]
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


def write_utterances(utterances: Sequence[Utterance], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{detokenize(u)}\n" for u in utterances), encoding="utf-8")
    return path


def write_pairs(dataset: Dataset, path: PathLike, with_scores: bool = False) -> Path:
    """Two-column TSV. With `with_scores`, scores go to a `<name>.scores.tsv` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pairs: List[SentencePair] = list(dataset.items)
    path.write_text(
        "".join(f"{detokenize(p.source)}\t{detokenize(p.target)}\n" for p in pairs),
        encoding="utf-8",
    )
    if with_scores:
        frame = pd.DataFrame([dict(p.scores or {}) for p in pairs])
        frame.to_csv(scores_path(path), sep="\t", index=False, float_format="%.6f")
    return path


def scores_path(pairs_path: PathLike) -> Path:
    pairs_path = Path(pairs_path)
    return pairs_path.with_name(pairs_path.name + ".scores.tsv")


def write_references(dataset: Dataset, source_path: PathLike, ref_paths: Sequence[PathLike]) -> List[Path]:
    sets: List[ReferenceSet] = list(dataset.items)
    widths = {len(s.references) for s in sets}
    if len(widths) > 1 or (widths and widths.pop() != len(ref_paths)):
        raise DatasetError("every reference set must have exactly one reference per output file")
    write_utterances([s.source for s in sets], source_path)
    written = [Path(source_path)]
    for k, ref_path in enumerate(ref_paths):
        written.append(write_utterances([s.references[k] for s in sets], ref_path))
    return written
