"""Three-stage training: further pre-training on static pairs, iterative
back-translation with rewards between two direction models, and offline
training on quality-gated generated pairs."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
import torch
from tqdm import tqdm

from app.errors import ConfigError, DatasetError, UnscoredPairError
from app.schemas import (
    SCORE_CONTENT,
    SCORE_STYLE_MEAN,
    SCORE_STYLE_SOURCE,
    SCORE_STYLE_TARGET,
    Dataset,
    DecodeOutcome,
    EvalReport,
    IbtConfig,
    LabeledUtterance,
    PairSelectionConfig,
    ReferenceSet,
    RewardConfig,
    SentencePair,
    StylePair,
    SupervisedConfig,
    Utterance,
)
from app.services.classifier import StyleClassifier
from app.services.metrics import DirectionOutputs, LearnedMetricOracle, evaluate_directions
from app.services.rewards import learned_metric_reward, policy_gradient_loss, self_critical_bleu_reward, style_reward
from app.services.seq2seq import (
    Seq2SeqModel,
    greedy_decode_batch,
    nll_loss,
    sample_decode_batch,
    sequence_logprob,
    train_step,
)

logger = structlog.get_logger(__name__)

LOG_COLUMNS = ["step", "direction", "nll", "r_sc", "r_bleu", "r_learned", "valid_acc", "valid_bleu", "valid_hm"]


def direction_name(styles: StylePair) -> str:
    return f"{styles.source}->{styles.target}"


@dataclass
class ModelPair:
    """model_a transfers styles.source -> styles.target, model_b the reverse."""

    model_a: Seq2SeqModel
    model_b: Seq2SeqModel
    styles: StylePair

    @classmethod
    def from_pretrained(cls, model: Seq2SeqModel, styles: StylePair) -> "ModelPair":
        return cls(model.clone(styles), model.clone(styles.reversed()), styles)

    def clone(self) -> "ModelPair":
        return ModelPair(self.model_a.clone(), self.model_b.clone(), self.styles)


@dataclass
class ValidationSplit:
    """Validation sources per style: reference sets, or labeled utterances
    scored for BLEU against their own source."""

    s1: Dataset
    s2: Dataset


@dataclass
class TrainingLog:
    rows: List[Dict[str, object]] = field(default_factory=list)

    def add(self, step: int, direction: str, **values: float) -> None:
        row: Dict[str, object] = {"step": step, "direction": direction}
        row.update(values)
        self.rows.append(row)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, sep="\t", index=False, float_format="%.6f", na_rep="")
        return path


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def reference_sets(dataset: Dataset) -> List[ReferenceSet]:
    if dataset.items and dataset.item_type is ReferenceSet:
        return list(dataset.items)
    return [ReferenceSet(source=u, references=(u,)) for u in dataset.utterances()]


# Rewards as a policy-gradient term
def reward_loss(
    model: Seq2SeqModel,
    sources: Sequence[Utterance],
    clf: Optional[StyleClassifier],
    oracle: Optional[LearnedMetricOracle],
    rewards: RewardConfig,
    style: bool,
    bleu: bool,
    learned: bool,
    generator: torch.Generator,
    max_len: int,
    outcomes: Optional[Sequence[DecodeOutcome]] = None,
) -> Tuple[Optional[torch.Tensor], Dict[str, float]]:
    """Sample once per source (or reuse `outcomes`, aligned with `sources`) and
    weight log P(sample | source) by the summed enabled rewards. Rewards are
    measured against the model's own input."""
    if outcomes is not None:
        kept = [(x, o) for x, o in zip(sources, outcomes) if x.tokens]
        sources, outcomes = [x for x, _ in kept], [o for _, o in kept]
    else:
        sources = [x for x in sources if x.tokens]
    if not sources or not (style or bleu or learned):
        return None, {}
    if style and (clf is None or model.styles is None):
        raise ConfigError("the style reward needs a classifier and a model with a style direction")
    if learned and oracle is None:
        raise ConfigError("the learned-metric reward needs an oracle")

    if outcomes is None:
        outcomes = sample_decode_batch(model, sources, max_len, generator=generator)
    samples = [o.sampled for o in outcomes]
    totals = [0.0] * len(sources)
    means: Dict[str, float] = {}
    if style:
        p_src = clf.style_probs(samples, model.styles.source)
        p_tgt = clf.style_probs(samples, model.styles.target)
        values = [style_reward(a, b, rewards.lambda_sc) for a, b in zip(p_src, p_tgt)]
        totals = [t + v for t, v in zip(totals, values)]
        means["r_sc"] = _mean(values)
    if bleu:
        values = [
            self_critical_bleu_reward(o.greedy, o.sampled, x, rewards.lambda_bleu, rewards.sign)
            for o, x in zip(outcomes, sources)
        ]
        totals = [t + v for t, v in zip(totals, values)]
        means["r_bleu"] = _mean(values)
    if learned:
        values = [learned_metric_reward(o.sampled, x, rewards.lambda_learned, oracle) for o, x in zip(outcomes, sources)]
        totals = [t + v for t, v in zip(totals, values)]
        means["r_learned"] = _mean(values)

    logprobs = sequence_logprob(model, sources, samples)
    loss = torch.stack([policy_gradient_loss(r, lp) for r, lp in zip(totals, logprobs)]).mean()
    return loss, means


# Static pairs: further pre-training and offline training
def _pairs_of(pairs: Dataset) -> List[SentencePair]:
    if not pairs.items:
        raise DatasetError("training needs a non-empty set of pairs")
    if pairs.item_type is not SentencePair:
        raise DatasetError("training needs a dataset of sentence pairs")
    kept = [p for p in pairs.items if p.target.tokens and p.source.tokens]
    if len(kept) < len(pairs.items):
        logger.warning("empty_pairs_skipped", count=len(pairs.items) - len(kept))
    if not kept:
        raise DatasetError("every pair has an empty side")
    return kept


def _supervised(
    model: Seq2SeqModel,
    pairs: List[SentencePair],
    cfg: SupervisedConfig,
    rewards: RewardConfig,
    clf: Optional[StyleClassifier],
    oracle: Optional[LearnedMetricOracle],
    log: Optional[TrainingLog],
    stage: str,
    progress: bool,
) -> Seq2SeqModel:
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    style = rewards.sc0 or rewards.sc1
    step = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc=stage, disable=not progress):
        order = torch.randperm(len(pairs), generator=generator).tolist()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            model.module.train()
            nll = nll_loss(model, batch)
            pg, means = reward_loss(
                model,
                [p.source for p in batch],
                clf,
                oracle,
                rewards,
                style=style,
                bleu=rewards.bleu,
                learned=rewards.learned,
                generator=generator,
                max_len=cfg.max_len,
            )
            train_step(model, nll if pg is None else nll + pg)
            step += 1
            losses.append(float(nll.detach()))
            if log is not None:
                log.add(step, stage, nll=losses[-1], **means)
        logger.info("epoch_finished", stage=stage, epoch=epoch, nll=round(_mean(losses), 6))
    return model


def further_pretrain(
    base: Seq2SeqModel,
    pairs: Dataset,
    cfg: Optional[SupervisedConfig] = None,
    log: Optional[TrainingLog] = None,
    progress: bool = False,
) -> Seq2SeqModel:
    """NLL-only training on generic, filtered or synthetic pairs."""
    cfg = cfg or SupervisedConfig()
    items = _pairs_of(pairs)
    if cfg.epochs == 0:
        return base
    return _supervised(
        base.clone(), items, cfg, RewardConfig.disabled(), None, None, log, stage="pretrain", progress=progress
    )


def offline_train(
    base: Seq2SeqModel,
    pairs: Dataset,
    rewards: RewardConfig,
    clf: Optional[StyleClassifier],
    oracle: Optional[LearnedMetricOracle],
    cfg: Optional[SupervisedConfig] = None,
    log: Optional[TrainingLog] = None,
    progress: bool = False,
) -> Seq2SeqModel:
    """Supervised training of the original base model on static pairs plus
    every enabled reward term. All pairs must share one direction."""
    cfg = cfg or SupervisedConfig()
    items = _pairs_of(pairs)
    directions = {(p.source_style, p.target_style) for p in items}
    if len(directions) != 1:
        raise DatasetError(f"offline training pairs mix directions: {sorted(directions)}")
    source, target = next(iter(directions))
    styles = StylePair(source=source, target=target)
    if cfg.epochs == 0:
        return base
    model = base.clone(styles)
    return _supervised(model, items, cfg, rewards, clf, oracle, log, stage=direction_name(styles), progress=progress)


# Iterative back-translation
def _back_translate(
    generator_model: Seq2SeqModel,
    trainer: Seq2SeqModel,
    batch: Sequence[Utterance],
    clf: Optional[StyleClassifier],
    rewards: RewardConfig,
    oracle: Optional[LearnedMetricOracle],
    generator: torch.Generator,
    max_len: int,
) -> Tuple[Dict[str, float], Dict[str, float], int]:
    """One direction of an IBT step; returns (generator metrics, trainer metrics, skipped)."""
    sources = [x for x in batch if x.tokens]
    skipped = len(batch) - len(sources)
    gen_metrics: Dict[str, float] = {}
    if not sources:
        return gen_metrics, {}, skipped

    if rewards.sc1:
        outcomes = sample_decode_batch(generator_model, sources, max_len, generator=generator)
        pseudo_sources = [o.greedy for o in outcomes]
        generator_model.module.train()
        pg, gen_metrics = reward_loss(
            generator_model, sources, clf, oracle, rewards, True, False, False, generator, max_len, outcomes=outcomes
        )
        if pg is not None:
            train_step(generator_model, pg)
    else:
        pseudo_sources = greedy_decode_batch(generator_model, sources, max_len)

    # generated source, genuine corpus target
    styles = trainer.styles
    pseudo = [
        SentencePair(source=y, target=x, source_style=styles.source, target_style=styles.target)
        for y, x in zip(pseudo_sources, sources)
    ]
    trainer.module.train()
    nll = nll_loss(trainer, pseudo)
    pg, trainer_metrics = reward_loss(
        trainer,
        pseudo_sources,
        clf,
        oracle,
        rewards,
        style=rewards.sc0,
        bleu=rewards.bleu,
        learned=rewards.learned,
        generator=generator,
        max_len=max_len,
    )
    train_step(trainer, nll if pg is None else nll + pg)
    trainer_metrics["nll"] = float(nll.detach())
    return gen_metrics, trainer_metrics, skipped


@dataclass
class StepMetrics:
    per_model: Dict[str, Dict[str, float]]
    skipped: int = 0


def ibt_step(
    models: ModelPair,
    batch_s1: Sequence[Utterance],
    batch_s2: Sequence[Utterance],
    clf: Optional[StyleClassifier],
    rewards: RewardConfig,
    oracle: Optional[LearnedMetricOracle],
    generator: Optional[torch.Generator] = None,
    max_len: int = 64,
) -> Tuple[ModelPair, StepMetrics]:
    """A generates from s1 and B learns from (A(x), x); then the roles swap.
    Models are updated in place and returned."""
    if not batch_s1 or not batch_s2:
        raise DatasetError("both IBT batches must be non-empty")
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    name_a = direction_name(models.model_a.styles)
    name_b = direction_name(models.model_b.styles)
    metrics: Dict[str, Dict[str, float]] = {name_a: {}, name_b: {}}

    gen_a, train_b, skipped_1 = _back_translate(
        models.model_a, models.model_b, batch_s1, clf, rewards, oracle, generator, max_len
    )
    gen_b, train_a, skipped_2 = _back_translate(
        models.model_b, models.model_a, batch_s2, clf, rewards, oracle, generator, max_len
    )
    for name, gen, trained in ((name_a, gen_a, train_a), (name_b, gen_b, train_b)):
        merged = dict(trained)
        if "r_sc" in gen:
            # generator-side and learner-side style rewards of one model are averaged
            merged["r_sc"] = _mean([v for v in (gen.get("r_sc"), trained.get("r_sc")) if v is not None])
        metrics[name] = merged
    skipped = skipped_1 + skipped_2
    if skipped:
        logger.warning("decode_items_skipped", count=skipped)
    return models, StepMetrics(per_model=metrics, skipped=skipped)


class _Batches:
    """Endless reshuffled batches over one corpus."""

    def __init__(self, utterances: List[Utterance], batch_size: int, generator: torch.Generator):
        self.utterances = utterances
        self.batch_size = batch_size
        self.generator = generator
        self._order: List[int] = []

    def next(self) -> List[Utterance]:
        if len(self._order) < self.batch_size:
            self._order += torch.randperm(len(self.utterances), generator=self.generator).tolist()
        batch, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return [self.utterances[i] for i in batch]


def validate(
    models: ModelPair,
    valid: ValidationSplit,
    clf: StyleClassifier,
    max_len: int = 64,
    bleu_lowercase: bool = False,
) -> EvalReport:
    parts = []
    for model, dataset in ((models.model_a, valid.s1), (models.model_b, valid.s2)):
        refs = reference_sets(dataset)
        outputs = greedy_decode_batch(model, [r.source for r in refs], max_len)
        parts.append(DirectionOutputs(direction_name(model.styles), outputs, refs, model.styles.target))
    return evaluate_directions(parts, clf, [], bleu_lowercase=bleu_lowercase)


def ibt_train(
    models: ModelPair,
    unpaired_s1: Dataset,
    unpaired_s2: Dataset,
    valid: Optional[ValidationSplit],
    clf: Optional[StyleClassifier],
    cfg: Optional[IbtConfig] = None,
    oracle: Optional[LearnedMetricOracle] = None,
    log: Optional[TrainingLog] = None,
    progress: bool = False,
) -> Tuple[ModelPair, TrainingLog]:
    """Alternating IBT steps with periodic validation. The returned pair is the
    snapshot with the best overall validation HM."""
    cfg = cfg or IbtConfig()
    log = log if log is not None else TrainingLog()
    if cfg.steps == 0:
        return models, log
    s1 = [u for u in unpaired_s1.utterances() if u.tokens]
    s2 = [u for u in unpaired_s2.utterances() if u.tokens]
    if not s1 or not s2:
        raise DatasetError("IBT needs non-empty unpaired corpora for both styles")
    models = models.clone()
    if valid is not None and clf is None:
        raise ConfigError("validation needs a style classifier")
    if valid is None:
        logger.warning("no_validation_data", selection="final_step")

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    stream_1 = _Batches(s1, cfg.batch_size, generator)
    stream_2 = _Batches(s2, cfg.batch_size, generator)

    best, best_hm, stale = None, -math.inf, 0
    for step in tqdm(range(1, cfg.steps + 1), desc="ibt", disable=not progress):
        models, metrics = ibt_step(
            models, stream_1.next(), stream_2.next(), clf, cfg.rewards, oracle, generator, cfg.max_len
        )
        for name, values in metrics.per_model.items():
            log.add(step, name, **values)

        if valid is None or (step % cfg.valid_every and step != cfg.steps):
            continue
        report = validate(models, valid, clf, cfg.max_len)
        for row in report.rows:
            log.add(step, row.direction, valid_acc=row.acc, valid_bleu=row.bleu, valid_hm=row.hm)
        hm = report.row("overall").hm
        logger.info("ibt_validation", step=step, acc=report.row("overall").acc, bleu=report.row("overall").bleu, hm=hm)
        if hm > best_hm:
            best, best_hm, stale = models.clone(), hm, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("ibt_early_stop", step=step, best_hm=best_hm)
                break
    return (best if best is not None else models), log


# Pseudo-pair generation and selection
def generate_pseudo_pairs(
    model: Seq2SeqModel,
    sources: Dataset,
    clf: StyleClassifier,
    oracle: LearnedMetricOracle,
    sample_count: Optional[int] = None,
    max_len: int = 64,
    seed: int = 0,
) -> Dataset:
    """Greedy transfers of (a random subset of) `sources`, scored with
    content = oracle(x, y'), style_source = p(s1|x), style_target = p(s2|y')."""
    if model.styles is None:
        raise ConfigError("pseudo-pair generation needs a model with a style direction")
    styles = model.styles
    items = list(sources.items)
    if items and sources.item_type is LabeledUtterance:
        wrong = {i.style for i in items} - {styles.source}
        if wrong:
            raise DatasetError(f"sources must be {styles.source!r} sentences, found {sorted(wrong)}")
    utterances = sources.utterances()
    if sample_count is not None and sample_count < len(utterances):
        picked = torch.randperm(len(utterances), generator=torch.Generator().manual_seed(seed))[:sample_count]
        utterances = [utterances[i] for i in sorted(picked.tolist())]

    # empty generations stay in and are left to the selection thresholds
    xs = [u for u in utterances if u.tokens]
    outputs = greedy_decode_batch(model, xs, max_len) if xs else []
    kept = list(zip(xs, outputs))
    skipped = len(utterances) - len(kept)
    if skipped:
        logger.warning("decode_items_skipped", count=skipped)
    if not kept:
        return Dataset(items=(), split=sources.split)

    content = oracle.score_batch(kept)
    p_src = clf.style_probs([x for x, _ in kept], styles.source)
    p_tgt = clf.style_probs([y for _, y in kept], styles.target)
    pairs = [
        SentencePair(
            source=x,
            target=y,
            source_style=styles.source,
            target_style=styles.target,
            scores={SCORE_CONTENT: c, SCORE_STYLE_SOURCE: a, SCORE_STYLE_TARGET: b},
        )
        for (x, y), c, a, b in zip(kept, content, p_src, p_tgt)
    ]
    logger.info("pseudo_pairs_generated", direction=direction_name(styles), count=len(pairs), skipped=skipped)
    return Dataset(items=tuple(pairs), split=sources.split)


def select_high_quality_pairs(pairs: Dataset, cfg: Optional[PairSelectionConfig] = None) -> Dataset:
    """Keep pairs with content > sigma_c and mean style confidence > sigma_s."""
    cfg = cfg or PairSelectionConfig()
    kept = []
    for index, pair in enumerate(pairs.items):
        if not isinstance(pair, SentencePair):
            raise DatasetError("pair selection needs a dataset of sentence pairs")
        scores = pair.scores or {}
        missing = [k for k in (SCORE_CONTENT, SCORE_STYLE_SOURCE, SCORE_STYLE_TARGET) if k not in scores]
        if missing:
            raise UnscoredPairError(f"pair {index} lacks scores: {', '.join(missing)}")
        mean = (scores[SCORE_STYLE_SOURCE] + scores[SCORE_STYLE_TARGET]) / 2
        if scores[SCORE_CONTENT] > cfg.sigma_c and mean > cfg.sigma_s:
            kept.append(pair.with_scores(**{SCORE_STYLE_MEAN: mean}))
    logger.info("pairs_selected", sigma_c=cfg.sigma_c, sigma_s=cfg.sigma_s, total=len(pairs), kept=len(kept))
    return pairs.with_items(kept)
