import math
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Enums
class Split(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"

class BackboneKind(str, Enum):
    REFERENCE_TINY = "reference-tiny"
    EXTERNAL = "external"

class RewardSign(str, Enum):
    PAPER = "paper"
    SELF_CRITICAL = "self_critical"

    @classmethod
    def _missing_(cls, value):
        # `literal` names the same greedy-minus-sample form
        if value == "literal":
            return cls.PAPER
        return None

StyleId = str

# Score keys carried by SentencePair.scores
SCORE_CONTENT = "content"
SCORE_STYLE_SOURCE = "style_source"
SCORE_STYLE_TARGET = "style_target"
SCORE_STYLE_MEAN = "style_mean"

DEFAULT_MAX_LEN = 64


class StylePair(BaseModel):
    """The two styles a task binds; `source` is s1 and `target` is s2."""

    model_config = ConfigDict(frozen=True)

    source: StyleId = Field("informal", min_length=1)
    target: StyleId = Field("formal", min_length=1)

    @model_validator(mode="after")
    def _distinct(self):
        if self.source == self.target:
            raise ValueError(f"a task needs two distinct styles, got {self.source!r} twice")
        return self

    def as_tuple(self) -> Tuple[StyleId, StyleId]:
        return (self.source, self.target)

    def other(self, style: StyleId) -> StyleId:
        if style == self.source:
            return self.target
        if style == self.target:
            return self.source
        raise ValueError(f"style {style!r} is not one of {self.as_tuple()}")

    def reversed(self) -> "StylePair":
        return StylePair(source=self.target, target=self.source)

    def __contains__(self, style: object) -> bool:
        return style in (self.source, self.target)


# Data schemas
class Utterance(BaseModel):
    model_config = ConfigDict(frozen=True)

    tokens: Tuple[str, ...]
    raw: str = ""

    @field_validator("tokens")
    @classmethod
    def _no_whitespace_tokens(cls, v):
        for token in v:
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(f"invalid token {token!r}")
        return v

    @classmethod
    def from_tokens(cls, tokens, raw: Optional[str] = None) -> "Utterance":
        tokens = tuple(tokens)
        return cls(tokens=tokens, raw=" ".join(tokens) if raw is None else raw)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


class LabeledUtterance(BaseModel):
    model_config = ConfigDict(frozen=True)

    utterance: Utterance
    style: StyleId = Field(..., min_length=1)


class SentencePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: Utterance
    target: Utterance
    source_style: StyleId = Field(..., min_length=1)
    target_style: StyleId = Field(..., min_length=1)
    scores: Optional[Dict[str, float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.source_style == self.target_style:
            raise ValueError("source_style and target_style must differ")
        if self.scores is not None:
            for name, value in self.scores.items():
                if not math.isfinite(value):
                    raise ValueError(f"score {name!r} is not finite: {value}")
        return self

    def with_scores(self, **scores: float) -> "SentencePair":
        merged = dict(self.scores or {})
        merged.update(scores)
        return self.model_copy(update={"scores": merged})


class ReferenceSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: Utterance
    references: Tuple[Utterance, ...] = Field(..., min_length=1)

    @field_validator("references")
    @classmethod
    def _non_empty_references(cls, v):
        for ref in v:
            if not ref.tokens:
                raise ValueError("references must be non-empty utterances")
        return v


DatasetItem = Union[LabeledUtterance, SentencePair, ReferenceSet]


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    items: Tuple[DatasetItem, ...] = ()
    split: Split = Split.TRAIN

    @model_validator(mode="after")
    def _homogeneous(self):
        kinds = {type(item) for item in self.items}
        if len(kinds) > 1:
            names = sorted(k.__name__ for k in kinds)
            raise ValueError(f"dataset items must be homogeneous, got {names}")
        return self

    @property
    def item_type(self) -> Optional[type]:
        return type(self.items[0]) if self.items else None

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index):
        return self.items[index]

    def styles(self) -> List[StyleId]:
        """Distinct styles of a labeled dataset, in order of first appearance."""
        seen: List[StyleId] = []
        for item in self.items:
            if isinstance(item, LabeledUtterance) and item.style not in seen:
                seen.append(item.style)
        return seen

    def utterances(self) -> List[Utterance]:
        out = []
        for item in self.items:
            if isinstance(item, LabeledUtterance):
                out.append(item.utterance)
            elif isinstance(item, ReferenceSet):
                out.append(item.source)
            else:
                out.append(item.source)
        return out

    def with_items(self, items) -> "Dataset":
        return Dataset(items=tuple(items), split=self.split)


class DecodeOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    greedy: Utterance
    sampled: Utterance
    sampled_logprobs: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.sampled_logprobs) != len(self.sampled.tokens):
            raise ValueError("sampled_logprobs must align with sampled tokens")
        for lp in self.sampled_logprobs:
            if not math.isfinite(lp) or lp > 0:
                raise ValueError(f"invalid log-probability {lp}")
        return self


# Configuration schemas
class ConfigBase(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClassifierTrainConfig(ConfigBase):
    epochs: int = Field(5, gt=0)
    batch_size: int = Field(64, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    seed: int = Field(0, ge=0)
    num_filters: int = Field(100, gt=0)
    filter_widths: Tuple[int, ...] = (3, 4, 5)
    embedding_dim: int = Field(128, gt=0)
    dropout: float = Field(0.5, ge=0, lt=1)
    max_vocab: int = Field(20000, gt=0)

    @field_validator("filter_widths")
    @classmethod
    def _positive_widths(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("filter widths must be positive")
        return v


class BackboneConfig(ConfigBase):
    kind: BackboneKind = BackboneKind.REFERENCE_TINY
    external_name: Optional[str] = None
    encoder_layers: int = Field(2, gt=0)
    decoder_layers: int = Field(2, gt=0)
    d_model: int = Field(128, gt=0)
    heads: int = Field(4, gt=0)
    ff_dim: int = Field(256, gt=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    max_vocab: int = Field(1000, gt=4)
    max_len: int = Field(DEFAULT_MAX_LEN, gt=0)
    learning_rate: Optional[float] = Field(None, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.kind == BackboneKind.EXTERNAL and not self.external_name:
            raise ValueError("external backbone needs backbone.external_name")
        return self

    @property
    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-5 if self.kind == BackboneKind.EXTERNAL else 3e-4


class SupervisedConfig(ConfigBase):
    """Static-pair training: further pre-training and offline training."""

    epochs: int = Field(5, ge=0)
    batch_size: int = Field(32, gt=0)
    max_len: int = Field(DEFAULT_MAX_LEN, gt=0)
    seed: int = Field(0, ge=0)


class RewardConfig(ConfigBase):
    sc0: bool = True
    sc1: bool = True
    bleu: bool = True
    learned: bool = True
    sign: RewardSign = RewardSign.SELF_CRITICAL
    lambda_sc: float = Field(1.0, ge=0, allow_inf_nan=False)
    lambda_bleu: float = Field(1.0, ge=0, allow_inf_nan=False)
    lambda_learned: float = Field(1.0, ge=0, allow_inf_nan=False)

    @field_validator("sign", mode="before")
    @classmethod
    def _sign_alias(cls, v):
        return RewardSign(v) if v == "literal" else v

    @classmethod
    def disabled(cls) -> "RewardConfig":
        return cls(sc0=False, sc1=False, bleu=False, learned=False)

    @property
    def any_enabled(self) -> bool:
        return self.sc0 or self.sc1 or self.bleu or self.learned


class IbtConfig(ConfigBase):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(32, gt=0)
    valid_every: int = Field(200, gt=0)
    patience: int = Field(5, gt=0)
    max_len: int = Field(DEFAULT_MAX_LEN, gt=0)
    schedule: str = Field("alternate", pattern="^alternate$")
    rewards: RewardConfig = Field(default_factory=RewardConfig)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _cadence(self):
        if self.steps and self.valid_every > self.steps:
            raise ValueError("ibt.valid_every must not exceed ibt.steps")
        return self


class PairSelectionConfig(ConfigBase):
    sigma_c: float = Field(0.15, allow_inf_nan=False)
    sigma_s: float = Field(0.9, ge=0, le=1)
    sample_count: Optional[int] = Field(None, gt=0)


class MetricConfig(ConfigBase):
    oracle: str = "desk"
    bleu_lowercase: bool = False
    oracle_lowercase: bool = False

    @field_validator("oracle")
    @classmethod
    def _oracle_spec(cls, v):
        if v != "desk" and not (v.startswith("external:") and len(v) > len("external:")):
            raise ValueError("metric.oracle must be 'desk' or 'external:<command>'")
        return v


class DataConfig(ConfigBase):
    dir: str = "data/toy"
    paraphrases: Optional[str] = None
    lexicon: str = "config/sentiment_lexicon.tsv"
    antonyms: str = "config/antonyms.tsv"
    lowercase: bool = False
    max_len: int = Field(DEFAULT_MAX_LEN, gt=0)
    cutoff: float = Field(0.5, gt=0)


class RunConfig(ConfigBase):
    task: str = "toy"
    seed: int = Field(0, ge=0)
    style: StylePair = Field(default_factory=StylePair)
    sigma: float = Field(0.85, ge=0, le=1)
    data: DataConfig = Field(default_factory=DataConfig)
    classifier: ClassifierTrainConfig = Field(default_factory=ClassifierTrainConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    pretrain: SupervisedConfig = Field(default_factory=SupervisedConfig)
    ibt: IbtConfig = Field(default_factory=IbtConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    selection: PairSelectionConfig = Field(default_factory=PairSelectionConfig)
    offline: SupervisedConfig = Field(default_factory=SupervisedConfig)
    metric: MetricConfig = Field(default_factory=MetricConfig)

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data):
        # one seed drives every section
        if not isinstance(data, dict):
            return data
        data = dict(data)
        seed = data.get("seed", 0)
        for section in ("classifier", "backbone", "pretrain", "ibt", "offline"):
            block = data.get(section)
            if block is None:
                data[section] = {"seed": seed}
            elif isinstance(block, dict):
                data[section] = {**block, "seed": seed}
            elif isinstance(block, BaseModel) and hasattr(block, "seed"):
                data[section] = block.model_copy(update={"seed": seed})
        return data

    @model_validator(mode="after")
    def _share_rewards(self):
        # `reward.*` is the single source of reward settings for every stage
        self.ibt.rewards = self.reward
        return self


# Evaluation schemas
class EvalRow(BaseModel):
    direction: str
    count: int = Field(..., ge=0)
    learned: Dict[str, float] = Field(default_factory=dict)
    bleu: float = Field(..., ge=0, le=1)
    acc: float = Field(..., ge=0, le=1)
    hm: float = Field(..., ge=0, le=1)

    @model_validator(mode="after")
    def _consistent(self):
        expected = 0.0 if self.acc + self.bleu == 0 else 2 * self.acc * self.bleu / (self.acc + self.bleu)
        if abs(expected - self.hm) > 1e-9:
            raise ValueError("hm must equal the harmonic mean of acc and bleu")
        for name, value in self.learned.items():
            if not math.isfinite(value):
                raise ValueError(f"learned metric {name!r} is not finite")
        return self


class EvalReport(BaseModel):
    rows: List[EvalRow]
    oracles: List[str] = Field(default_factory=list)
    references: int = Field(1, ge=1)
    config: Dict[str, str] = Field(default_factory=dict)

    def row(self, direction: str) -> EvalRow:
        for row in self.rows:
            if row.direction == direction:
                return row
        raise KeyError(direction)
