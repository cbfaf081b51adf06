"""Text generation: vocabulary, tokenizer, the prefix-conditioned decoder,
text-side encoders, and the cross-entropy / alignment losses.

The decoder is a small GPT-style stack whose attention concatenates
projected visual rows into each block's keys and values, so token queries
can attend to the conditioning feature at every layer while staying causal
among themselves. A larger pretrained decoder can be swapped in behind the
same interface.
"""

from __future__ import annotations

import json
import math
import re

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class Vocabulary:
    """Bijective token <-> id mapping with fixed reserved ids."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ShapeError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        seen = set()
        for text in corpus:
            seen.update(split_text(text))
        return cls(sorted(seen))

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token}, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        tokens = json.loads(payload)["tokens"]
        vocab = cls.__new__(cls)
        vocab.id_to_token = list(tokens)
        vocab.token_to_id = {t: i for i, t in enumerate(tokens)}
        return vocab


def split_text(text: str):
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int = None) -> list:
    """Lowercased word/punctuation split to ids, always ending with EOS."""
    ids = [vocab.token_to_id.get(tok, UNK) for tok in split_text(text)]
    if max_len is not None and len(ids) > max_len - 1:
        ids = ids[:max_len - 1]
    return ids + [EOS]


def detokenize(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.id_to_token[i])
    out = ""
    for word in words:
        glue = "" if (not out or not word[0].isalnum()) else " "
        out += glue + word
    return out


class PseudoSelfAttention(nn.Module):
    """Causal self-attention whose keys/values are extended with projected
    visual rows; queries come from token states only. With an empty visual
    prefix this is exactly standard masked self-attention.
    """

    def __init__(self, dim: int, heads: int, seed: int = 0):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        torch.manual_seed(seed)
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.visual_key = nn.Linear(dim, dim, bias=False)
        self.visual_value = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def forward(self, visual: torch.Tensor, tokens: torch.Tensor,
                return_weights: bool = False):
        """visual: (B,p,d) conditioning rows; tokens: (B,t,d) -> (B,t,d)."""
        if visual.shape[-1] != self.dim or tokens.shape[-1] != self.dim:
            raise ShapeError(
                f"inputs must have width {self.dim}, got {visual.shape[-1]}/{tokens.shape[-1]}"
            )
        b, t, _ = tokens.shape
        p = visual.shape[1]

        def heads_view(x):
            return x.reshape(b, x.shape[1], self.heads, self.head_dim).transpose(1, 2)

        q = heads_view(self.query(tokens))
        k = torch.cat([heads_view(self.visual_key(visual)),
                       heads_view(self.key(tokens))], dim=2)
        v = torch.cat([heads_view(self.visual_value(visual)),
                       heads_view(self.value(tokens))], dim=2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)

        mask = torch.zeros(t, p + t, dtype=torch.bool, device=tokens.device)
        mask[:, p:] = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, t, self.dim)
        result = self.out(mixed)
        return (result, weights) if return_weights else result


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_width: int, seed: int = 0):
        super().__init__()
        self.attention = PseudoSelfAttention(dim, heads, seed=seed)
        torch.manual_seed(seed + 1)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_width), nn.GELU(), nn.Linear(ffn_width, dim)
        )

    def forward(self, visual, tokens):
        tokens = tokens + self.attention(visual, self.norm1(tokens))
        return tokens + self.ffn(self.norm2(tokens))


class ReportDecoder(nn.Module):
    """Autoregressive token decoder conditioned on a visual prefix at every
    block. Greedy decoding only.
    """

    def __init__(self, vocab_size: int, dim: int = 128, heads: int = 8,
                 blocks: int = 2, ffn_width: int = 512, max_len: int = 24,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.max_len = max_len
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position_embedding = nn.Parameter(0.02 * torch.randn(max_len + 1, dim))
        self.blocks = nn.ModuleList(
            DecoderBlock(dim, heads, ffn_width, seed=seed + 10 * (i + 1))
            for i in range(blocks)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)

    def forward(self, visual: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """visual: (B,d) or (B,p,d); token_ids: (B,t) -> logits (B,t,V)."""
        if visual.dim() == 2:
            visual = visual.unsqueeze(1)
        if visual.shape[-1] != self.dim:
            raise ShapeError(f"visual width {visual.shape[-1]} != decoder width {self.dim}")
        t = token_ids.shape[1]
        if t > self.position_embedding.shape[0]:
            raise ShapeError(f"sequence length {t} exceeds maximum {self.position_embedding.shape[0]}")
        h = self.token_embedding(token_ids) + self.position_embedding[:t]
        for block in self.blocks:
            h = block(visual, h)
        return self.head(self.final_norm(h))

    @torch.no_grad()
    def decode(self, visual: torch.Tensor, max_len: int = None) -> list:
        """Greedy decode one sentence from a (d,) conditioning feature."""
        max_len = self.max_len if max_len is None else min(max_len, self.max_len)
        visual = visual.reshape(1, 1, self.dim)
        ids = [BOS]
        out = []
        for _ in range(max_len):
            logits = self(visual, torch.tensor([ids]))
            next_id = int(logits[0, -1].argmax())
            out.append(next_id)
            if next_id == EOS:
                break
            ids.append(next_id)
        return out


def teacher_forced_batch(sequences, pad_id: int = PAD):
    """Pad EOS-terminated id lists into decoder inputs/targets.

    Inputs are BOS-shifted; targets keep the original ids. Padded positions
    carry ``pad_id`` and are excluded from the loss.
    """
    width = max(len(s) for s in sequences)
    inputs = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    targets = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        inputs[row, 0] = BOS
        inputs[row, 1:len(seq)] = torch.tensor(seq[:-1], dtype=torch.long)
        targets[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
    return inputs, targets


def token_ce_sum(logits: torch.Tensor, targets: torch.Tensor,
                 pad_id: int = PAD) -> torch.Tensor:
    """Summed token-level cross-entropy, ignoring padded positions."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} misaligned with targets {tuple(targets.shape)}")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
        ignore_index=pad_id, reduction="sum",
    )


def sentence_ce_loss(per_sentence_logits, per_sentence_targets,
                     pad_id: int = PAD) -> torch.Tensor:
    """Report loss: sum of per-sentence summed cross-entropies."""
    if len(per_sentence_logits) != len(per_sentence_targets):
        raise ShapeError("sentence count mismatch between logits and targets")
    total = None
    for logits, targets in zip(per_sentence_logits, per_sentence_targets):
        term = token_ce_sum(logits, targets, pad_id)
        total = term if total is None else total + term
    return total


def llm_alignment_loss(targets, logits_from_visual, logits_from_text,
                       pad_id: int = PAD) -> torch.Tensor:
    """Sum of the visual-branch and text-branch report losses."""
    return (sentence_ce_loss(logits_from_visual, targets, pad_id)
            + sentence_ce_loss(logits_from_text, targets, pad_id))


class MeanEmbeddingTextEncoder(nn.Module):
    """Desk-scale sentence encoder: mean of learned token embeddings over the
    content tokens. A pretrained encoder plug-in can replace it.
    """

    def __init__(self, vocab_size: int, width: int = 128, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.width = width
        self.embedding = nn.Embedding(vocab_size, width)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(t,) or (B,t) padded ids -> (width,) or (B,width)."""
        squeeze = token_ids.dim() == 1
        if squeeze:
            token_ids = token_ids.unsqueeze(0)
        emb = self.embedding(token_ids)
        content = (token_ids != PAD) & (token_ids != EOS) & (token_ids != BOS)
        counts = content.sum(dim=1, keepdim=True)
        mask = content.unsqueeze(-1).to(emb.dtype)
        mean = (emb * mask).sum(dim=1) / counts.clamp(min=1)
        eos_fallback = self.embedding(torch.tensor(EOS)).expand_as(mean)
        out = torch.where(counts > 0, mean, eos_fallback)
        return out.squeeze(0) if squeeze else out
