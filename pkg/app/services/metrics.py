"""Evaluation metrics: corpus and sentence BLEU, style accuracy, harmonic mean,
Pearson correlation, learned-metric oracles and report assembly."""

import math
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from app.errors import DatasetError, OracleError, UndefinedCorrelationError
from app.schemas import EvalReport, EvalRow, ReferenceSet, StyleId, Utterance

logger = structlog.get_logger(__name__)

MAX_ORDER = 4
OVERALL = "overall"


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _lower(utterance: Utterance) -> Utterance:
    return Utterance(tokens=tuple(t.lower() for t in utterance.tokens), raw=utterance.raw)


def _closest_ref_length(candidate_len: int, ref_lens: Sequence[int]) -> int:
    # closest length wins, ties go to the shorter reference
    return min(ref_lens, key=lambda r: (abs(r - candidate_len), r))


def _sentence_stats(candidate: Sequence[str], references: Sequence[Sequence[str]], max_order: int):
    matches = [0] * max_order
    totals = [0] * max_order
    for n in range(1, max_order + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= _ngrams(ref, n)
        matches[n - 1] = sum(min(count, max_ref[g]) for g, count in cand.items())
        totals[n - 1] = max(len(candidate) - n + 1, 0)
    ref_len = _closest_ref_length(len(candidate), [len(r) for r in references])
    return matches, totals, len(candidate), ref_len


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    if c >= r:
        return 1.0
    return math.exp(1 - r / c)


def bleu(
    candidates: Sequence[Utterance],
    refs: Sequence[ReferenceSet],
    max_order: int = MAX_ORDER,
    lowercase: bool = False,
) -> float:
    """Unsmoothed corpus BLEU with multi-reference clipping and closest-reference brevity penalty."""
    if len(candidates) != len(refs):
        raise DatasetError(f"{len(candidates)} candidates but {len(refs)} reference sets")
    if not candidates:
        raise DatasetError("BLEU needs a non-empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    c_total = r_total = 0
    for candidate, ref_set in zip(candidates, refs):
        if lowercase:
            candidate = _lower(candidate)
            references = [_lower(r).tokens for r in ref_set.references]
        else:
            references = [r.tokens for r in ref_set.references]
        m, t, c, r = _sentence_stats(candidate.tokens, references, max_order)
        for i in range(max_order):
            matches[i] += m[i]
            totals[i] += t[i]
        c_total += c
        r_total += r
    if any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    return min(1.0, _brevity_penalty(c_total, r_total) * math.exp(log_precision))


def sentence_bleu(candidate: Utterance, anchor: Utterance, max_order: int = MAX_ORDER) -> float:
    """Single-anchor BLEU with add-one smoothing on the n >= 2 precisions."""
    if not candidate.tokens:
        return 0.0
    m, t, c, r = _sentence_stats(candidate.tokens, [anchor.tokens], max_order)
    if m[0] == 0:
        return 0.0
    log_precision = math.log(m[0] / t[0])
    for n in range(1, max_order):
        log_precision += math.log((m[n] + 1) / (t[n] + 1))
    return min(1.0, _brevity_penalty(c, r) * math.exp(log_precision / max_order))


def harmonic_mean(acc: float, bleu: float) -> float:
    for name, value in (("acc", acc), ("bleu", bleu)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    if acc + bleu == 0:
        return 0.0
    return 2 * acc * bleu / (acc + bleu)


class StylePredictor(Protocol):
    def predict_styles(self, utterances: Sequence[Utterance]) -> List[StyleId]:
        ...


def style_accuracy(clf: StylePredictor, outputs: Sequence[Utterance], target: StyleId) -> float:
    if not outputs:
        raise DatasetError("style accuracy needs at least one output")
    predicted = clf.predict_styles(list(outputs))
    return sum(p == target for p in predicted) / len(outputs)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise UndefinedCorrelationError("correlation needs at least two values")
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance input")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# Learned-metric oracles
class LearnedMetricOracle(ABC):
    """score(candidate, anchor) -> finite real; `name` goes into reports."""

    name: str = "oracle"

    @abstractmethod
    def score_batch(self, pairs: Sequence[Tuple[Utterance, Utterance]]) -> List[float]:
        ...

    def score(self, candidate: Utterance, anchor: Utterance) -> float:
        return self.score_batch([(candidate, anchor)])[0]


def desk_oracle_score(candidate: Utterance, anchor: Utterance) -> float:
    """Token-multiset F1 mapped to [-1, 1] as 2*F1 - 1."""
    cand, ref = Counter(candidate.tokens), Counter(anchor.tokens)
    if not cand and not ref:
        return 1.0
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return -1.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    f1 = 2 * precision * recall / (precision + recall)
    return 2 * f1 - 1


class DeskOracle(LearnedMetricOracle):
    name = "desk"

    def __init__(self, lowercase: bool = False):
        self.lowercase = lowercase

    def score_batch(self, pairs):
        if self.lowercase:
            return [desk_oracle_score(_lower(c), _lower(a)) for c, a in pairs]
        return [desk_oracle_score(c, a) for c, a in pairs]


class CallableOracle(LearnedMetricOracle):
    """In-process adapter around `fn(candidate_text, anchor_text) -> float`."""

    def __init__(self, fn: Callable[[str, str], float], name: str = "callable"):
        self.fn = fn
        self.name = name

    def score_batch(self, pairs):
        scores = []
        for candidate, anchor in pairs:
            try:
                value = float(self.fn(candidate.text, anchor.text))
            except Exception as e:
                raise OracleError(f"{self.name}: scoring failed ({e})") from e
            if not math.isfinite(value):
                raise OracleError(f"{self.name}: non-finite score {value}")
            scores.append(value)
        return scores


class ExternalCommandOracle(LearnedMetricOracle):
    """Runs `command` once per batch: `candidate<TAB>anchor` lines on stdin,
    one float per line on stdout. Calls are serialized."""

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = command
        self.name = f"external:{command}"
        self.timeout = timeout
        self._lock = threading.Lock()

    def score_batch(self, pairs):
        if not pairs:
            return []
        payload = "".join(f"{c.text}\t{a.text}\n" for c, a in pairs)
        with self._lock:
            try:
                proc = subprocess.run(
                    shlex.split(self.command),
                    input=payload,
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise OracleError(f"{self.name}: {e}") from e
        if proc.returncode != 0:
            stderr = proc.stderr.strip().splitlines()
            raise OracleError(f"{self.name}: exit status {proc.returncode}: {stderr[-1] if stderr else ''}")
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if len(lines) != len(pairs):
            raise OracleError(f"{self.name}: expected {len(pairs)} scores, got {len(lines)}")
        try:
            scores = [float(line) for line in lines]
        except ValueError as e:
            raise OracleError(f"{self.name}: unparseable score ({e})") from e
        if not all(math.isfinite(s) for s in scores):
            raise OracleError(f"{self.name}: non-finite score in output")
        return scores


# Reports
@dataclass(frozen=True)
class DirectionOutputs:
    direction: str
    outputs: Sequence[Utterance]
    refs: Sequence[ReferenceSet]
    target: StyleId


def _learned_means(
    oracles: Sequence[LearnedMetricOracle], outputs: Sequence[Utterance], refs: Sequence[ReferenceSet]
) -> Dict[str, float]:
    means = {}
    for oracle in oracles:
        queries = [(out, ref) for out, ref_set in zip(outputs, refs) for ref in ref_set.references]
        scores = iter(oracle.score_batch(queries))
        per_sentence = []
        for ref_set in refs:
            k = len(ref_set.references)
            per_sentence.append(sum(next(scores) for _ in range(k)) / k)
        means[oracle.name] = float(np.mean(per_sentence))
    return means


def _row(
    direction: str,
    outputs: Sequence[Utterance],
    refs: Sequence[ReferenceSet],
    acc: float,
    oracles: Sequence[LearnedMetricOracle],
    lowercase: bool,
) -> EvalRow:
    score = bleu(outputs, refs, lowercase=lowercase)
    return EvalRow(
        direction=direction,
        count=len(outputs),
        learned=_learned_means(oracles, outputs, refs),
        bleu=score,
        acc=acc,
        hm=harmonic_mean(acc, score),
    )


def evaluate_system(
    outputs: Sequence[Utterance],
    refs: Sequence[ReferenceSet],
    clf: StylePredictor,
    oracles: Sequence[LearnedMetricOracle],
    target: StyleId,
    direction: Optional[str] = None,
    bleu_lowercase: bool = False,
    config: Optional[Dict[str, str]] = None,
) -> EvalReport:
    return evaluate_directions(
        [DirectionOutputs(direction or f"to_{target}", outputs, refs, target)],
        clf,
        oracles,
        bleu_lowercase=bleu_lowercase,
        config=config,
    )


def evaluate_directions(
    parts: Sequence[DirectionOutputs],
    clf: StylePredictor,
    oracles: Sequence[LearnedMetricOracle],
    bleu_lowercase: bool = False,
    config: Optional[Dict[str, str]] = None,
) -> EvalReport:
    """One row per direction; with two or more directions an `overall` row
    pools every output (ACC over all outputs, BLEU over the concatenation)."""
    if not parts:
        raise DatasetError("nothing to evaluate")
    rows = []
    all_outputs: List[Utterance] = []
    all_refs: List[ReferenceSet] = []
    correct = 0
    for part in parts:
        if len(part.outputs) != len(part.refs):
            raise DatasetError(
                f"{part.direction}: {len(part.outputs)} outputs but {len(part.refs)} reference sets"
            )
        acc = style_accuracy(clf, part.outputs, part.target)
        rows.append(_row(part.direction, part.outputs, part.refs, acc, oracles, bleu_lowercase))
        correct += round(acc * len(part.outputs))
        all_outputs.extend(part.outputs)
        all_refs.extend(part.refs)
        logger.info("direction_evaluated", direction=part.direction, bleu=rows[-1].bleu, acc=acc, hm=rows[-1].hm)
    if len(parts) > 1:
        rows.append(_row(OVERALL, all_outputs, all_refs, correct / len(all_outputs), oracles, bleu_lowercase))
    width = {len(r.references) for r in all_refs}
    return EvalReport(
        rows=rows,
        oracles=[o.name for o in oracles],
        references=max(width) if width else 1,
        config=dict(config or {}),
    )


def report_frame(report: EvalReport) -> pd.DataFrame:
    records = []
    for row in report.rows:
        record = {"direction": row.direction, "count": row.count}
        for name in report.oracles:
            record[name] = row.learned.get(name, float("nan"))
        record.update({"bleu": row.bleu, "acc": row.acc, "hm": row.hm})
        records.append(record)
    columns = ["direction", "count", *report.oracles, "bleu", "acc", "hm"]
    return pd.DataFrame.from_records(records, columns=columns)


def write_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(path, sep="\t", index=False, float_format="%.6f")
    return path


def format_report(report: EvalReport) -> str:
    return report_frame(report).to_string(index=False, float_format=lambda v: f"{v:.4f}")


def read_system_scores(path: Union[str, Path]) -> pd.DataFrame:
    """One row per system, first column the system name, one column per metric."""
    frame = pd.read_csv(path, sep="\t")
    if frame.shape[1] < 3:
        raise DatasetError(f"{path}: need a system column and at least two metric columns")
    return frame.set_index(frame.columns[0])


def correlation_matrix(scores: pd.DataFrame) -> pd.DataFrame:
    columns = [c for c in scores.columns if pd.api.types.is_numeric_dtype(scores[c])]
    if len(columns) < 2:
        raise DatasetError("correlation needs at least two numeric metric columns")
    matrix = pd.DataFrame(index=columns, columns=columns, dtype=float)
    for a in columns:
        for b in columns:
            try:
                matrix.loc[a, b] = pearson(scores[a].tolist(), scores[b].tolist())
            except UndefinedCorrelationError as e:
                raise UndefinedCorrelationError(f"{a} vs {b}: {e.detail}") from e
    return matrix
