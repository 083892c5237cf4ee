"""Vocabulary, embedding table with pseudo-token registry, and the prompt refiner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .errors import RegistryError, VocabularyError
from .numerics import RngStream

SEQ_LEN = 8
EMBED_DIM = 64
PAD, UNCOND = "<pad>", "<uncond>"
FUNCTION_WORDS = ("a", "photo", "of", "and")

KIND_PRETRAINED, KIND_PSEUDO, KIND_ANCHOR = "pretrained", "pseudo", "anchor"


@dataclass
class Vocabulary:
    tokens: list[str]
    noun_flags: list[bool]
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        if len(self.noun_flags) != len(self.tokens):
            raise VocabularyError("noun_flags length mismatch")
        if not self.kinds:
            self.kinds = [KIND_PRETRAINED] * len(self.tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls, nouns) -> "Vocabulary":
        toks = [PAD, UNCOND, *FUNCTION_WORDS, *nouns]
        return cls(toks, [t in set(nouns) for t in toks])

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def uncond_id(self) -> int:
        return self._index[UNCOND]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown word {token!r}") from None

    def add(self, token: str, noun: bool, kind: str) -> int:
        if token in self._index:
            raise RegistryError(f"token {token!r} already registered")
        self.tokens.append(token)
        self.noun_flags.append(noun)
        self.kinds.append(kind)
        self._index[token] = len(self.tokens) - 1
        return self._index[token]

    def noun_ids(self, kind: str | None = KIND_PRETRAINED) -> list[int]:
        return [i for i, f in enumerate(self.noun_flags) if f and (kind is None or self.kinds[i] == kind)]

    def tokenize(self, prompt: str, length: int = SEQ_LEN) -> list[int]:
        words = prompt.split()
        ids = [self.id(w) for w in words] if words else [self.uncond_id]
        ids = ids[:length]
        return ids + [self.pad_id] * (length - len(ids))

    def save(self, path: Path) -> None:
        lines = [f"{t}\t{int(n)}\t{k}" for t, n, k in zip(self.tokens, self.noun_flags, self.kinds)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        toks, flags, kinds = [], [], []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise VocabularyError(f"{path}:{lineno}: expected '<token>\\t<noun flag>'")
            toks.append(parts[0])
            flags.append(parts[1] == "1")
            kinds.append(parts[2] if len(parts) > 2 else KIND_PRETRAINED)
        return cls(toks, flags, kinds)


class RefinerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp_in = nn.Linear(dim, 4 * dim)
        self.mlp_out = nn.Linear(4 * dim, dim)
        # zero-initialized residual branches: the untrained block is the identity
        for lin in (self.attn_out, self.mlp_out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        mixed = (logits.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.attn_out(mixed)
        return x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))


class TextEncoder(nn.Module):
    """Owns the raw embedding table and the 2-layer bidirectional refiner."""

    def __init__(self, vocab: Vocabulary, dim: int = EMBED_DIM, heads: int = 4, layers: int = 2,
                 seq_len: int = SEQ_LEN, rng: RngStream | None = None, embed_std: float = 0.5):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.seq_len = seq_len
        rng = rng or RngStream(0, "text_encoder")
        self.table = nn.Parameter(rng.normal((len(vocab), dim)) * embed_std)
        self.pos = nn.Parameter(rng.normal((seq_len, dim)) * 0.02)
        self.blocks = nn.ModuleList(RefinerBlock(dim, heads) for _ in range(layers))

    def tokenize(self, prompt: str) -> list[int]:
        return self.vocab.tokenize(prompt, self.seq_len)

    def tokenize_batch(self, prompts) -> torch.Tensor:
        return torch.tensor([self.tokenize(p) for p in prompts], dtype=torch.long)

    def register_pseudo(self, name: str, superclass: str, rng: RngStream | None = None,
                        noise_scale: float = 0.01, init: str = "superclass") -> int:
        """Append a trainable row initialized at the superclass embedding plus small noise."""
        if name in self.vocab:
            raise RegistryError(f"pseudo-token {name!r} already registered")
        sup = self.vocab.id(superclass)
        rng = rng or RngStream(0, f"pseudo/{name}")
        with torch.no_grad():
            if init == "random":
                row = rng.normal((self.dim,), self.table.dtype) * self.table.std()
            else:
                row = self.table[sup].clone()
                if noise_scale > 0:
                    row = row + noise_scale * rng.normal((self.dim,), self.table.dtype)
        tid = self.vocab.add(name, noun=True, kind=KIND_PSEUDO)
        self.table = nn.Parameter(torch.cat([self.table.detach(), row[None]], dim=0))
        return tid

    def set_row(self, token_id: int, vector: torch.Tensor) -> None:
        with torch.no_grad():
            self.table[token_id] = vector.to(self.table.dtype)

    def refine(self, ids: torch.Tensor, table: torch.Tensor | None = None) -> torch.Tensor:
        """Map (B, L) token ids to (B, L, d) refined embeddings; pads are masked as keys."""
        table = self.table if table is None else table
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        x = table[ids] + self.pos[: ids.shape[1]]
        key_mask = ids != self.vocab.pad_id
        for blk in self.blocks:
            x = blk(x, key_mask)
        return x

    forward = refine

    def noun_positions(self, ids) -> list[tuple[int, int]]:
        ids = list(torch.as_tensor(ids).reshape(-1).tolist())
        return [(p, t) for p, t in enumerate(ids) if self.vocab.noun_flags[t]]


@dataclass
class RefinedPrompt:
    embeddings: torch.Tensor
    noun_positions: list[tuple[int, int]]


def refine_prompt(encoder: TextEncoder, prompt: str, table: torch.Tensor | None = None) -> RefinedPrompt:
    ids = torch.tensor(encoder.tokenize(prompt))
    return RefinedPrompt(encoder.refine(ids, table)[0], encoder.noun_positions(ids))
