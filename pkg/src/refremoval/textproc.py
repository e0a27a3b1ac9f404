"""Referring-expression tokenization, BIO role tagging and syntax embeddings.

Tokens are tagged as identity words (IW, the category noun), attribute
words (AW, appearance/location qualifiers) or other (O) by a BiLSTM-CRF
trained separately on a templated corpus. The tags select column subsets
of the contextual embedding matrix ``L`` for the fusion heads.
"""

from __future__ import annotations

import itertools
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

PAD, UNK = "<pad>", "<unk>"
SPECIALS = (PAD, UNK)
PAD_ID, UNK_ID = 0, 1

# index 0 is O so that all-equal scores decode to a valid sequence
LABELS = ("O", "B-IW", "I-IW", "B-AW", "I-AW")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
NUM_LABELS = len(LABELS)

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


class Vocabulary:
    """Token/id map with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        for tok in sorted(set(tokens) - set(SPECIALS)):
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        tokens: set[str] = set()
        for text in texts:
            tokens.update(normalize(text))
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        # line number == id - len(SPECIALS)
        Path(path).write_text("".join(tok + "\n" for tok in self.itos[len(SPECIALS):]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln]
        vocab = cls(lines)
        if vocab.itos[len(SPECIALS):] != lines:
            raise ValueError(f"{path}: vocabulary file is not a sorted unique token list")
        return vocab


@dataclass
class TokenizedExpression:
    tokens: list[str]
    ids: list[int]

    def __post_init__(self):
        if not self.tokens or len(self.tokens) != len(self.ids):
            raise ValueError("tokens and ids must be non-empty and equally long")

    @property
    def length(self) -> int:
        return len(self.tokens)


def normalize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def tokenize(text: str, vocab: Vocabulary) -> TokenizedExpression:
    tokens = normalize(text)
    if not tokens:
        raise ValueError("empty expression")
    return TokenizedExpression(tokens, [vocab.lookup(t) for t in tokens])


# ---------------------------------------------------------------------------
# BIO helpers


def is_valid_bio(tags: Sequence[str]) -> bool:
    prev = "O"
    for tag in tags:
        if tag not in LABEL_INDEX:
            return False
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            return False
        prev = tag
    return True


def bio_constraints() -> tuple[np.ndarray, np.ndarray]:
    """Boolean ``(start_allowed, transition_allowed)`` masks for BIO."""
    start = np.array([not lab.startswith("I-") for lab in LABELS])
    trans = np.ones((NUM_LABELS, NUM_LABELS), dtype=bool)
    for j, to in enumerate(LABELS):
        if to.startswith("I-"):
            for i, frm in enumerate(LABELS):
                trans[i, j] = frm != "O" and frm[2:] == to[2:]
    return start, trans


def spans(tags: Sequence[str], kind: str) -> list[int]:
    """Token indices covered by ``kind`` ("IW" or "AW") spans, in order."""
    return [i for i, t in enumerate(tags) if t != "O" and t[2:] == kind]


# ---------------------------------------------------------------------------
# Viterbi


def crf_decode(
    emissions: np.ndarray,
    transitions: np.ndarray,
    start: np.ndarray | None = None,
) -> list[int]:
    """Highest-scoring label path under ``emissions`` + ``transitions``.

    ``transitions[i, j]`` scores label ``i`` followed by label ``j``. Among
    equally scoring paths the lexicographically smallest one is returned,
    which is what the backward-suffix formulation below gives for free.
    """
    emissions = np.asarray(emissions, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    T, K = emissions.shape
    if transitions.shape != (K, K):
        raise ValueError(f"transitions must be {K}x{K}, got {transitions.shape}")
    if not (np.isfinite(emissions).all() and np.isfinite(transitions).all()):
        raise ValueError("scores must be finite")
    start = np.zeros(K) if start is None else np.asarray(start, dtype=np.float64)

    # best[t, y]: best score of the suffix t..T-1 given label y at t
    best = np.empty((T, K))
    best[-1] = emissions[-1]
    for t in range(T - 2, -1, -1):
        best[t] = emissions[t] + (transitions + best[t + 1][None, :]).max(axis=1)

    path = [int(np.argmax(start + best[0]))]
    for t in range(1, T):
        path.append(int(np.argmax(transitions[path[-1]] + best[t])))
    return path


def path_score(emissions, transitions, path, start=None) -> float:
    emissions = np.asarray(emissions, dtype=np.float64)
    score = 0.0 if start is None else float(start[path[0]])
    score += float(emissions[0, path[0]])
    for t in range(1, len(path)):
        score += float(transitions[path[t - 1], path[t]] + emissions[t, path[t]])
    return score


def brute_force_decode(emissions, transitions, start=None) -> list[int]:
    T, K = np.shape(emissions)
    best, best_path = -np.inf, None
    for path in itertools.product(range(K), repeat=T):
        s = path_score(emissions, transitions, path, start)
        if s > best:
            best, best_path = s, list(path)
    return best_path


# ---------------------------------------------------------------------------
# BiLSTM-CRF tagger


class BiLSTMCRF(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int = 32, hidden: int = 32):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(embed_dim, hidden, batch_first=True, bidirectional=True)
        self.emit = nn.Linear(2 * hidden, NUM_LABELS)
        self.transitions = nn.Parameter(torch.zeros(NUM_LABELS, NUM_LABELS))
        self.start = nn.Parameter(torch.zeros(NUM_LABELS))

    def emissions(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return self.emit(out)

    def nll(self, ids: torch.Tensor, lengths: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Mean negative log-likelihood of the gold label paths."""
        em = self.emissions(ids, lengths)
        B, T, K = em.shape
        mask = torch.arange(T)[None, :] < lengths[:, None]

        gold = self.start[labels[:, 0]] + em[:, 0].gather(1, labels[:, :1]).squeeze(1)
        alpha = self.start[None, :] + em[:, 0]
        for t in range(1, T):
            m = mask[:, t]
            step = self.transitions[labels[:, t - 1], labels[:, t]]
            step = step + em[:, t].gather(1, labels[:, t : t + 1]).squeeze(1)
            gold = gold + step * m
            nxt = torch.logsumexp(alpha[:, :, None] + self.transitions[None] + em[:, t, None, :], dim=1)
            alpha = torch.where(m[:, None], nxt, alpha)
        return (torch.logsumexp(alpha, dim=1) - gold).mean()


@dataclass
class TaggerParams:
    """Trained tagger plus the vocabulary it was trained with."""

    model: BiLSTMCRF
    vocab: Vocabulary

    def state(self) -> dict:
        return {"model": self.model.state_dict(), "vocab": list(self.vocab.itos[len(SPECIALS):])}

    @classmethod
    def from_state(cls, state: dict, embed_dim: int = 32, hidden: int = 32) -> "TaggerParams":
        vocab = Vocabulary(state["vocab"])
        model = BiLSTMCRF(len(vocab), embed_dim, hidden)
        model.load_state_dict(state["model"])
        model.eval()
        return cls(model, vocab)


def _constrained_scores(params: TaggerParams) -> tuple[np.ndarray, np.ndarray]:
    start_ok, trans_ok = bio_constraints()
    trans = params.model.transitions.detach().double().numpy().copy()
    start = params.model.start.detach().double().numpy().copy()
    trans[~trans_ok] = -1e4
    start[~start_ok] = -1e4
    return trans, start


def tag_roles(expr: TokenizedExpression, params: TaggerParams) -> list[str]:
    ids = torch.tensor([[params.vocab.lookup(t) for t in expr.tokens]])
    with torch.no_grad():
        em = params.model.emissions(ids, torch.tensor([expr.length]))[0]
    trans, start = _constrained_scores(params)
    tags = [LABELS[i] for i in crf_decode(em.double().numpy(), trans, start)]
    assert is_valid_bio(tags)
    return tags


def _batch(examples, vocab):
    T = max(len(toks) for toks, _ in examples)
    ids = torch.zeros(len(examples), T, dtype=torch.long)
    labels = torch.zeros(len(examples), T, dtype=torch.long)
    for b, (toks, tags) in enumerate(examples):
        ids[b, : len(toks)] = torch.tensor([vocab.lookup(t) for t in toks])
        labels[b, : len(tags)] = torch.tensor([LABEL_INDEX[t] for t in tags])
    lengths = torch.tensor([len(toks) for toks, _ in examples])
    return ids, lengths, labels


def train_tagger(
    corpus: Sequence[tuple[list[str], list[str]]],
    vocab: Vocabulary | None = None,
    epochs: int = 8,
    batch_size: int = 32,
    lr: float = 1e-2,
    seed: int = 0,
) -> TaggerParams:
    """Fit a BiLSTM-CRF on ``(tokens, tags)`` pairs."""
    if vocab is None:
        vocab = Vocabulary(t for toks, _ in corpus for t in toks)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = BiLSTMCRF(len(vocab))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(corpus), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            ids, lengths, labels = _batch([corpus[j] for j in order[i : i + batch_size]], vocab)
            loss = model.nll(ids, lengths, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return TaggerParams(model, vocab)


def tagger_accuracy(params: TaggerParams, corpus) -> float:
    right = total = 0
    for toks, gold in corpus:
        pred = tag_roles(tokenize(" ".join(toks), params.vocab), params)
        right += sum(p == g for p, g in zip(pred, gold))
        total += len(gold)
    return right / total


# ---------------------------------------------------------------------------
# Syntax embeddings


@dataclass
class SyntaxEmbeddings:
    """``L`` (C_L x T) and its identity/attribute column subsets."""

    L: torch.Tensor
    L_aw: torch.Tensor
    L_iw: torch.Tensor
    aw_index: list[int] = field(default_factory=list)
    iw_index: list[int] = field(default_factory=list)
    iw_fallback: bool = False

    @property
    def aw_empty(self) -> bool:
        return self.L_aw.shape[1] == 0


class TextEncoder(nn.Module):
    """Token embedding + BiLSTM giving one contextual column per token."""

    def __init__(self, vocab_size: int, dim: int = 32):
        super().__init__()
        if dim % 2:
            raise ValueError("text embedding dimension must be even")
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(dim, dim // 2, batch_first=True, bidirectional=True)
        # stands in for L_iw when no token was tagged as an identity word
        self.iw_fallback = nn.Parameter(torch.randn(dim) * 0.1)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``ids`` B x T -> contextual embeddings B x C_L x T (zeros past length)."""
        x = self.embed(ids)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return out.transpose(1, 2)


def extract_embeddings(
    expr: TokenizedExpression, tags: Sequence[str], encoder: TextEncoder
) -> SyntaxEmbeddings:
    if not is_valid_bio(tags):
        raise ValueError(f"invalid BIO sequence: {list(tags)}")
    ids = torch.tensor([expr.ids])
    L = encoder(ids, torch.tensor([expr.length]))[0]
    return select_columns(L, tags, encoder.iw_fallback)


def select_columns(L: torch.Tensor, tags: Sequence[str], fallback: torch.Tensor) -> SyntaxEmbeddings:
    aw, iw = spans(tags, "AW"), spans(tags, "IW")
    L_aw = L[:, aw]
    if iw:
        return SyntaxEmbeddings(L, L_aw, L[:, iw], aw, iw)
    return SyntaxEmbeddings(L, L_aw, fallback[:, None], aw, iw, iw_fallback=True)
