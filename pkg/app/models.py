import math
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Token <-> id map with PAD/BOS/EOS/UNK at ids 0..3."""

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __init__(self, tokens: Sequence[str]):
        itos = list(SPECIALS)
        seen = set(itos)
        for token in tokens:
            if token not in seen:
                itos.append(token)
                seen.add(token)
        self.itos: List[str] = itos
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(itos)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], max_size: Optional[int] = None, min_freq: int = 1):
        counts = Counter(token for sentence in sentences for token in sentence)
        # frequency desc, then token for a stable order
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = [tok for tok, n in ranked if n >= min_freq and tok not in SPECIALS]
        if max_size is not None:
            tokens = tokens[: max(0, max_size - len(SPECIALS))]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str], add_bos: bool = False, add_eos: bool = False) -> List[int]:
        ids = [self.stoi.get(tok, self.unk_id) for tok in tokens]
        if add_bos:
            ids = [self.bos_id] + ids
        if add_eos:
            ids = ids + [self.eos_id]
        return ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        tokens = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            tokens.append(self.itos[i])
        return tokens

    def to_dict(self) -> dict:
        return {"itos": list(self.itos)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        itos = data["itos"]
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the special tokens")
        return cls(itos[len(SPECIALS):])


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int, min_len: int = 1) -> torch.Tensor:
    width = max([min_len] + [len(s) for s in sequences])
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        if seq:
            out[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return out


class TextCNN(nn.Module):
    """Convolutional sentence classifier: parallel filters of several widths,
    max-pooled over time, projected to class logits."""

    def __init__(
        self,
        vocab_size: int,
        embedding_dim: int = 128,
        num_filters: int = 100,
        filter_widths: Sequence[int] = (3, 4, 5),
        num_classes: int = 2,
        dropout: float = 0.5,
        pad_id: int = 0,
    ):
        super().__init__()
        self.filter_widths = tuple(filter_widths)
        self.embedding = nn.Embedding(vocab_size, embedding_dim, padding_idx=pad_id)
        self.convs = nn.ModuleList(nn.Conv1d(embedding_dim, num_filters, w) for w in self.filter_widths)
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(num_filters * len(self.filter_widths), num_classes)

    @property
    def min_length(self) -> int:
        return max(self.filter_widths)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        # ids: [batch, time], already padded to at least `min_length`
        x = self.embedding(ids).transpose(1, 2)
        pooled = [F.relu(conv(x)).max(dim=2).values for conv in self.convs]
        return self.proj(self.dropout(torch.cat(pooled, dim=1)))


class TinyTransformer(nn.Module):
    """Small from-scratch encoder-decoder with a shared source/target vocabulary."""

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 128,
        heads: int = 4,
        encoder_layers: int = 2,
        decoder_layers: int = 2,
        ff_dim: int = 256,
        dropout: float = 0.1,
        max_positions: int = 256,
        pad_id: int = 0,
        blocked_ids: Sequence[int] = (),
    ):
        super().__init__()
        self.d_model = d_model
        self.pad_id = pad_id
        self.max_positions = max_positions
        self.embedding = nn.Embedding(vocab_size, d_model, padding_idx=pad_id)
        self.positions = nn.Embedding(max_positions, d_model)
        self.transformer = nn.Transformer(
            d_model=d_model,
            nhead=heads,
            num_encoder_layers=encoder_layers,
            num_decoder_layers=decoder_layers,
            dim_feedforward=ff_dim,
            dropout=dropout,
            batch_first=True,
        )
        self.generator = nn.Linear(d_model, vocab_size)
        blocked = torch.zeros(vocab_size, dtype=torch.bool)
        blocked[list(blocked_ids)] = True
        # ids the decoder may never emit (padding, start symbol)
        self.register_buffer("blocked", blocked, persistent=False)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.size(1) > self.max_positions:
            raise ValueError(f"sequence length {ids.size(1)} exceeds {self.max_positions} positions")
        positions = torch.arange(ids.size(1), device=ids.device).unsqueeze(0)
        return self.embedding(ids) * math.sqrt(self.d_model) + self.positions(positions)

    def encode(self, src: torch.Tensor, src_pad_mask: torch.Tensor) -> torch.Tensor:
        return self.transformer.encoder(self._embed(src), src_key_padding_mask=src_pad_mask)

    def decode(self, memory: torch.Tensor, src_pad_mask: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over the vocabulary at every target position: [batch, time, vocab]."""
        width = tgt_in.size(1)
        causal = torch.triu(torch.ones(width, width, dtype=torch.bool, device=tgt_in.device), diagonal=1)
        hidden = self.transformer.decoder(
            self._embed(tgt_in),
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=tgt_in.eq(self.pad_id),
            memory_key_padding_mask=src_pad_mask,
        )
        logits = self.generator(hidden).masked_fill(self.blocked, float("-inf"))
        return F.log_softmax(logits, dim=-1)
