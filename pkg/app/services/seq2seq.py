"""Pluggable encoder-decoder backbones.

Every backbone exposes the same small surface: batch encoding, a next-token
log-distribution for a decoder prefix, teacher-forced token log-probabilities,
and conversion of generated ids back to utterances. Decoding, the NLL
objective, optimisation and checkpointing are written once against it."""

import copy
import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Tuple, Union

import structlog
import torch
import torch.nn.functional as F
from torch import nn

from app.errors import ConfigError, CorruptCheckpointError, DatasetError, EmptyUtteranceError, NonFiniteLossError
from app.models import TinyTransformer, Vocabulary, pad_batch
from app.schemas import BackboneConfig, BackboneKind, DecodeOutcome, SentencePair, StylePair, Utterance
from app.services.checkpoint import FORMAT_SEQ2SEQ, parameter_fingerprint, read_container, write_container
from app.services.corpus import token_spans, truncate

logger = structlog.get_logger(__name__)

DECODE_BATCH = 64


class Seq2SeqModel(ABC):
    kind: BackboneKind

    def __init__(self, config: BackboneConfig, styles: Optional[StylePair] = None):
        self.config = config
        self.styles = styles
        self._optimizer: Optional[torch.optim.Optimizer] = None

    @property
    @abstractmethod
    def module(self) -> nn.Module:
        ...

    @property
    @abstractmethod
    def bos_id(self) -> int:
        ...

    @property
    @abstractmethod
    def eos_id(self) -> int:
        ...

    @property
    @abstractmethod
    def pad_id(self) -> int:
        ...

    @abstractmethod
    def encode(self, sources: Sequence[Utterance]) -> Any:
        ...

    @abstractmethod
    def next_logprobs(self, state: Any, prefix: torch.Tensor) -> torch.Tensor:
        """[batch, vocab] log-distribution of the token after `prefix`."""

    @abstractmethod
    def token_logprobs(
        self, sources: Sequence[Utterance], targets: Sequence[Utterance]
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced log p of every gold target token plus EOS, and the
        mask of real (non-padding) positions; both [batch, time]."""

    @abstractmethod
    def to_utterance(self, ids: Sequence[int], logprobs: Sequence[float]) -> Tuple[Utterance, List[float]]:
        ...

    @abstractmethod
    def payload(self) -> dict:
        ...

    def parameters(self):
        return self.module.parameters()

    @property
    def optimizer(self) -> torch.optim.Optimizer:
        if self._optimizer is None:
            self._optimizer = torch.optim.Adam(self.module.parameters(), lr=self.config.resolved_learning_rate)
        return self._optimizer

    def clone(self, styles: Optional[StylePair] = None) -> "Seq2SeqModel":
        """Independent copy with fresh optimizer state."""
        optimizer, self._optimizer = self._optimizer, None
        try:
            twin = copy.deepcopy(self)
        finally:
            self._optimizer = optimizer
        if styles is not None:
            twin.styles = styles
        return twin

    def fingerprint(self) -> str:
        return parameter_fingerprint(self.module)


class ReferenceTinyModel(Seq2SeqModel):
    kind = BackboneKind.REFERENCE_TINY

    def __init__(
        self,
        vocab: Vocabulary,
        config: BackboneConfig,
        styles: Optional[StylePair] = None,
        net: Optional[TinyTransformer] = None,
    ):
        super().__init__(config, styles)
        self.vocab = vocab
        self.net = net if net is not None else self._network(vocab, config)

    @staticmethod
    def _network(vocab: Vocabulary, config: BackboneConfig) -> TinyTransformer:
        return TinyTransformer(
            vocab_size=len(vocab),
            d_model=config.d_model,
            heads=config.heads,
            encoder_layers=config.encoder_layers,
            decoder_layers=config.decoder_layers,
            ff_dim=config.ff_dim,
            dropout=config.dropout,
            # BOS + max_len tokens, plus the forced EOS step
            max_positions=config.max_len + 2,
            pad_id=vocab.pad_id,
            blocked_ids=(vocab.pad_id, vocab.bos_id),
        )

    @classmethod
    def build(
        cls, sentences: Iterable[Utterance], config: BackboneConfig, styles: Optional[StylePair] = None
    ) -> "ReferenceTinyModel":
        vocab = Vocabulary.build((u.tokens for u in sentences), max_size=config.max_vocab)
        torch.manual_seed(config.seed)
        model = cls(vocab, config, styles)
        logger.info("model_built", kind=cls.kind.value, vocab=len(vocab))
        return model

    @classmethod
    def from_payload(cls, config: BackboneConfig, styles: Optional[StylePair], data: dict) -> "ReferenceTinyModel":
        vocab = Vocabulary.from_dict(data["vocab"])
        with torch.random.fork_rng():
            net = cls._network(vocab, config)
        net.load_state_dict(data["state_dict"])
        return cls(vocab, config, styles, net=net)

    @property
    def module(self) -> nn.Module:
        return self.net

    @property
    def bos_id(self) -> int:
        return self.vocab.bos_id

    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    @property
    def pad_id(self) -> int:
        return self.vocab.pad_id

    def encode(self, sources):
        ids = [
            self.vocab.encode(truncate(u, self.config.max_len, role="source").tokens, add_eos=True) for u in sources
        ]
        src = pad_batch(ids, self.pad_id)
        mask = src.eq(self.pad_id)
        return self.net.encode(src, mask), mask

    def next_logprobs(self, state, prefix):
        memory, mask = state
        return self.net.decode(memory, mask, prefix)[:, -1]

    def token_logprobs(self, sources, targets):
        memory, mask = self.encode(sources)
        gold = [self.vocab.encode(truncate(t, self.config.max_len, role="target").tokens) for t in targets]
        tgt_in = pad_batch([[self.bos_id] + g for g in gold], self.pad_id)
        tgt_out = pad_batch([g + [self.eos_id] for g in gold], self.pad_id)
        keep = tgt_out.ne(self.pad_id)
        logprobs = self.net.decode(memory, mask, tgt_in)
        index = tgt_out.masked_fill(~keep, self.eos_id).unsqueeze(2)
        return logprobs.gather(2, index).squeeze(2), keep

    def to_utterance(self, ids, logprobs):
        return Utterance.from_tokens(self.vocab.itos[i] for i in ids), list(logprobs)

    def payload(self) -> dict:
        return {"vocab": self.vocab.to_dict(), "state_dict": self.net.state_dict()}


class ExternalModel(Seq2SeqModel):
    """Adapter over a pre-trained `transformers` encoder-decoder checkpoint."""

    kind = BackboneKind.EXTERNAL

    def __init__(self, config: BackboneConfig, styles: Optional[StylePair] = None, tokenizer=None, net=None):
        super().__init__(config, styles)
        if tokenizer is None or net is None:
            try:
                from transformers import AutoModelForSeq2SeqLM, AutoTokenizer
            except ImportError as e:
                raise ConfigError("backbone.kind = external needs the transformers package") from e
            tokenizer = tokenizer or AutoTokenizer.from_pretrained(config.external_name)
            net = net or AutoModelForSeq2SeqLM.from_pretrained(config.external_name)
        self.tokenizer = tokenizer
        self.net = net

    @classmethod
    def from_payload(cls, config: BackboneConfig, styles: Optional[StylePair], data: dict) -> "ExternalModel":
        model = cls(config, styles)
        model.net.load_state_dict(data["state_dict"])
        return model

    @property
    def module(self) -> nn.Module:
        return self.net

    @property
    def bos_id(self) -> int:
        return self.net.config.decoder_start_token_id

    @property
    def eos_id(self) -> int:
        return self.tokenizer.eos_token_id

    @property
    def pad_id(self) -> int:
        return self.tokenizer.pad_token_id

    def _masked_logprobs(self, logits: torch.Tensor) -> torch.Tensor:
        logits = logits.clone()
        logits[..., self.pad_id] = float("-inf")
        return F.log_softmax(logits, dim=-1)

    def encode(self, sources):
        batch = self.tokenizer(
            [u.text for u in sources],
            return_tensors="pt",
            padding=True,
            truncation=True,
            max_length=self.config.max_len,
        )
        encoded = self.net.get_encoder()(input_ids=batch["input_ids"], attention_mask=batch["attention_mask"])
        return encoded, batch["attention_mask"]

    def next_logprobs(self, state, prefix):
        encoded, mask = state
        logits = self.net(encoder_outputs=encoded, attention_mask=mask, decoder_input_ids=prefix).logits
        return self._masked_logprobs(logits[:, -1])

    def token_logprobs(self, sources, targets):
        encoded, mask = self.encode(sources)
        labels = self.tokenizer(
            text_target=[t.text for t in targets],
            return_tensors="pt",
            padding=True,
            truncation=True,
            max_length=self.config.max_len + 1,
        )["input_ids"]
        keep = labels.ne(self.pad_id)
        start = torch.full((labels.size(0), 1), self.bos_id, dtype=torch.long)
        decoder_in = torch.cat([start, labels[:, :-1]], dim=1)
        logits = self.net(encoder_outputs=encoded, attention_mask=mask, decoder_input_ids=decoder_in).logits
        index = labels.masked_fill(~keep, self.eos_id).unsqueeze(2)
        return self._masked_logprobs(logits).gather(2, index).squeeze(2), keep

    def to_utterance(self, ids, logprobs):
        text = self.tokenizer.decode(list(ids), skip_special_tokens=True)
        spans = token_spans(text)
        if not spans:
            return Utterance(tokens=(), raw=text), []
        # each subword's log-prob goes to the word covering its last character
        word_logprobs = [0.0] * len(spans)
        for i, lp in enumerate(logprobs):
            end = len(self.tokenizer.decode(list(ids[: i + 1]), skip_special_tokens=True))
            position = max(end - 1, 0)
            word = next((k for k, (_, _, stop) in enumerate(spans) if position < stop), len(spans) - 1)
            word_logprobs[word] += lp
        return Utterance.from_tokens([t for t, _, _ in spans], raw=text), word_logprobs

    def payload(self) -> dict:
        return {"state_dict": self.net.state_dict()}


BACKBONES = {
    BackboneKind.REFERENCE_TINY: ReferenceTinyModel,
    BackboneKind.EXTERNAL: ExternalModel,
}


def build_model(
    config: BackboneConfig, sentences: Iterable[Utterance] = (), styles: Optional[StylePair] = None
) -> Seq2SeqModel:
    """Fresh backbone; the reference-tiny vocabulary comes from `sentences`."""
    if config.kind == BackboneKind.EXTERNAL:
        return ExternalModel(config, styles)
    return ReferenceTinyModel.build(sentences, config, styles)


# Objective
def sequence_logprob(model: Seq2SeqModel, sources: Sequence[Utterance], targets: Sequence[Utterance]) -> torch.Tensor:
    """log P(target | source) per pair, EOS included; carries gradients."""
    logprobs, keep = model.token_logprobs(sources, targets)
    return logprobs.masked_fill(~keep, 0.0).sum(dim=1)


def nll_loss(model: Seq2SeqModel, pairs: Union[SentencePair, Sequence[SentencePair]]) -> torch.Tensor:
    """Summed target NLL (EOS included), averaged over pairs."""
    if isinstance(pairs, SentencePair):
        pairs = [pairs]
    if not pairs:
        raise DatasetError("nll_loss needs at least one pair")
    for pair in pairs:
        if not pair.target.tokens:
            raise EmptyUtteranceError("training targets must be non-empty")
    return -sequence_logprob(model, [p.source for p in pairs], [p.target for p in pairs]).mean()


def train_step(model: Seq2SeqModel, loss: torch.Tensor) -> float:
    """One Adam update on `loss`; returns the pre-clipping gradient norm."""
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss is {value}; update skipped")
    if not loss.requires_grad:
        return 0.0
    optimizer = model.optimizer
    optimizer.zero_grad()
    loss.backward()
    norm = float(torch.nn.utils.clip_grad_norm_(list(model.parameters()), model.config.grad_clip))
    if not math.isfinite(norm):
        optimizer.zero_grad()
        raise NonFiniteLossError(f"gradient norm is {norm} at loss {value:.6f}; update skipped")
    optimizer.step()
    return norm


# Decoding
def _check_sources(sources: Sequence[Utterance]) -> None:
    for x in sources:
        if not x.tokens:
            raise EmptyUtteranceError("cannot decode an empty source")


def _decode(
    model: Seq2SeqModel,
    sources: Sequence[Utterance],
    max_len: int,
    generator: Optional[torch.Generator] = None,
) -> List[Tuple[List[int], List[float]]]:
    # at most max_len content tokens, then EOS is forced
    max_len = min(max_len, model.config.max_len)
    batch = len(sources)
    was_training = model.module.training
    model.module.eval()
    try:
        with torch.no_grad():
            state = model.encode(sources)
            prefix = torch.full((batch, 1), model.bos_id, dtype=torch.long)
            done = torch.zeros(batch, dtype=torch.bool)
            ids: List[List[int]] = [[] for _ in range(batch)]
            lps: List[List[float]] = [[] for _ in range(batch)]
            for step in range(max_len + 1):
                logprobs = model.next_logprobs(state, prefix)
                if step == max_len:
                    choice = torch.full((batch,), model.eos_id, dtype=torch.long)
                elif generator is None:
                    choice = logprobs.argmax(dim=-1)
                else:
                    choice = torch.multinomial(logprobs.exp(), 1, generator=generator).squeeze(1)
                chosen = logprobs.gather(1, choice.unsqueeze(1)).squeeze(1)
                for row in range(batch):
                    if done[row]:
                        continue
                    token = int(choice[row])
                    if token == model.eos_id:
                        done[row] = True
                    else:
                        ids[row].append(token)
                        lps[row].append(min(float(chosen[row]), 0.0))
                if bool(done.all()):
                    break
                prefix = torch.cat([prefix, choice.masked_fill(done, model.pad_id).unsqueeze(1)], dim=1)
    finally:
        model.module.train(was_training)
    return list(zip(ids, lps))


def greedy_decode_batch(
    model: Seq2SeqModel, sources: Sequence[Utterance], max_len: Optional[int] = None, batch_size: int = DECODE_BATCH
) -> List[Utterance]:
    _check_sources(sources)
    max_len = max_len or model.config.max_len
    out = []
    for start in range(0, len(sources), batch_size):
        for ids, lps in _decode(model, sources[start : start + batch_size], max_len):
            out.append(model.to_utterance(ids, lps)[0])
    return out


def greedy_decode(model: Seq2SeqModel, x: Utterance, max_len: Optional[int] = None) -> Utterance:
    return greedy_decode_batch(model, [x], max_len)[0]


def sample_decode_batch(
    model: Seq2SeqModel,
    sources: Sequence[Utterance],
    max_len: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> List[DecodeOutcome]:
    """Greedy decode plus one ancestral sample (temperature 1) per source."""
    _check_sources(sources)
    max_len = max_len or model.config.max_len
    generator = generator if generator is not None else torch.Generator().manual_seed(model.config.seed)
    greedy = _decode(model, sources, max_len)
    sampled = _decode(model, sources, max_len, generator=generator)
    outcomes = []
    for (g_ids, g_lps), (s_ids, s_lps) in zip(greedy, sampled):
        greedy_utt, _ = model.to_utterance(g_ids, g_lps)
        sampled_utt, sampled_lps = model.to_utterance(s_ids, s_lps)
        outcomes.append(DecodeOutcome(greedy=greedy_utt, sampled=sampled_utt, sampled_logprobs=tuple(sampled_lps)))
    return outcomes


def sample_decode(model: Seq2SeqModel, x: Utterance, max_len: Optional[int] = None, seed: int = 0) -> DecodeOutcome:
    return sample_decode_batch(model, [x], max_len, generator=torch.Generator().manual_seed(seed))[0]


# Checkpoints
def save_checkpoint(model: Seq2SeqModel, path: Union[str, Path]) -> Path:
    return write_container(
        path,
        FORMAT_SEQ2SEQ,
        {
            "kind": model.kind.value,
            "config": model.config.model_dump(mode="json"),
            "styles": [model.styles.source, model.styles.target] if model.styles else [],
            **model.payload(),
        },
    )


def load_checkpoint(path: Union[str, Path]) -> Seq2SeqModel:
    data = read_container(path, FORMAT_SEQ2SEQ)
    try:
        kind = BackboneKind(data["kind"])
        config = BackboneConfig(**data["config"])
        styles = StylePair(source=data["styles"][0], target=data["styles"][1]) if data["styles"] else None
        return BACKBONES[kind].from_payload(config, styles, data)
    except (KeyError, ValueError, RuntimeError) as e:
        raise CorruptCheckpointError(f"{path}: model payload is incomplete ({e})") from e
