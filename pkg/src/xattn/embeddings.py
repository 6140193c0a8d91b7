"""Skip-gram word vectors with negative sampling, plus lookup helpers."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyCorpus, MissingWord, NonFinite, ParseError
from .io import atomic_write_text
from .text import EOS, AttributeSet, AttributeVocabulary, load_vocabulary

log = logging.getLogger(__name__)


@dataclass
class SkipGramConfig:
    dim: int = 256
    window: int = 5
    negatives_per_target: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    subsample_threshold: float = 1e-3
    seed: int = 0
    batch_pairs: int = 32

    def __post_init__(self):
        if self.dim <= 0 or self.window < 1 or self.negatives_per_target < 1 or self.epochs < 1:
            raise ValueError(f"invalid skip-gram config: {self}")


@dataclass
class EmbeddingTable:
    words: list[str]
    matrix: np.ndarray  # float32, one row per word
    vocab_counts: dict[str, int] = field(default_factory=dict)
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.words):
            raise ValueError("matrix rows must match words")
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def vectors(self) -> dict[str, np.ndarray]:
        return {w: self.matrix[i] for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._index

    def vector(self, word: str) -> np.ndarray:
        try:
            return self.matrix[self._index[word]].astype(np.float64)
        except KeyError:
            raise MissingWord(word) from None

    def save(self, path: str | Path) -> None:
        lines = [f"{len(self.words)} {self.dim}"]
        for w, row in zip(self.words, self.matrix):
            lines.append(w + " " + " ".join(f"{x:.9g}" for x in row))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            try:
                n, dim = int(header[0]), int(header[1])
            except (IndexError, ValueError):
                raise ParseError(path, 1, "expected '<vocab_size> <dim>' header") from None
            words, rows = [], []
            for lineno, line in enumerate(fh, 2):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise ParseError(path, lineno, f"expected {dim} values")
                words.append(parts[0])
                try:
                    rows.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise ParseError(path, lineno, "bad float") from None
        if len(words) != n:
            raise ParseError(path, 1, f"header says {n} words, found {len(words)}")
        return cls(words, np.array(rows, dtype=np.float32).reshape(n, dim))


def _sentences(corpus: Sequence[Sequence[str]]) -> list[list[str]]:
    out = []
    for seq in corpus:
        cur: list[str] = []
        for tok in seq:
            if tok == EOS:
                if cur:
                    out.append(cur)
                cur = []
            else:
                cur.append(tok)
        if cur:
            out.append(cur)
    return out


def _scatter_add(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """target[idx] += rows with repeated indices summed (deterministic order)."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    uniq, starts = np.unique(sidx, return_index=True)
    target[uniq] += np.add.reduceat(rows[order], starts, axis=0)


def train_embeddings(corpus: Sequence[Sequence[str]], cfg: SkipGramConfig | None = None,
                     vocab: AttributeVocabulary | None = None) -> EmbeddingTable:
    """Skip-gram with negative sampling over token sequences.

    Sentence markers split context windows.  Pairs are processed in small
    fixed-size batches with the learning rate decayed linearly to 10% of
    its initial value; results are bit-reproducible for a given seed.
    """
    cfg = cfg or SkipGramConfig()
    vocab = vocab or load_vocabulary()
    sents = _sentences(corpus)
    counts = Counter(tok for s in sents for tok in s)
    if not counts:
        raise EmptyCorpus("corpus has no tokens")
    missing = [w for w in vocab.words if w not in counts]
    if missing:
        log.warning("attribute words absent from corpus: %s", ", ".join(missing))

    words = sorted(counts, key=lambda w: (-counts[w], w))
    index = {w: i for i, w in enumerate(words)}
    freq = np.array([counts[w] for w in words], dtype=np.float64)
    total = freq.sum()
    ids = [np.array([index[t] for t in s], dtype=np.int64) for s in sents]

    rng = np.random.default_rng(cfg.seed)
    V, d, K = len(words), cfg.dim, cfg.negatives_per_target
    w_in = (rng.random((V, d)) - 0.5) / d
    w_out = np.zeros((V, d))

    noise = freq ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())
    t = cfg.subsample_threshold * total
    keep_prob = np.minimum(1.0, (np.sqrt(freq / t) + 1.0) * t / freq) if t > 0 else np.ones(V)

    flat = np.concatenate(ids)
    sent_id = np.repeat(np.arange(len(ids)), [s.size for s in ids])

    lr0 = cfg.learning_rate
    for epoch in range(cfg.epochs):
        keep = rng.random(flat.size) < keep_prob[flat]
        toks, sid = flat[keep], sent_id[keep]
        spans = rng.integers(1, cfg.window + 1, size=toks.size)
        pos_c, pos_o = [], []
        # (center, context) pairs within each center's sampled window, same sentence only
        for off in range(1, cfg.window + 1):
            i = np.arange(toks.size - off)
            ok = (sid[i] == sid[i + off])
            fwd = i[ok & (spans[i] >= off)]
            bwd = i[ok & (spans[i + off] >= off)] + off
            pos_c += [fwd, bwd]
            pos_o += [fwd + off, bwd - off]
        pos_c = np.concatenate(pos_c)
        pos_o = np.concatenate(pos_o)
        if pos_c.size == 0:
            continue
        order = np.lexsort((pos_o, pos_c))
        c_all = toks[pos_c[order]]
        o_all = toks[pos_o[order]]
        n_pairs = c_all.size
        B = cfg.batch_pairs
        n_batches = -(-n_pairs // B)
        for b in range(n_batches):
            progress = (epoch + b / n_batches) / cfg.epochs
            lr = lr0 * (1.0 - 0.9 * progress)
            c = c_all[b * B:(b + 1) * B]
            o = o_all[b * B:(b + 1) * B]
            neg = np.searchsorted(noise_cdf, rng.random((c.size, K)), side="right")
            np.minimum(neg, V - 1, out=neg)
            u = w_in[c]
            vo = w_out[o]
            vn = w_out[neg]
            s_pos = 1.0 / (1.0 + np.exp(-np.einsum("bd,bd->b", u, vo)))
            s_neg = 1.0 / (1.0 + np.exp(-np.einsum("bd,bkd->bk", u, vn)))
            g_pos = (s_pos - 1.0)[:, None]
            g_neg = s_neg[:, :, None]
            grad_u = g_pos * vo + (g_neg * vn).sum(axis=1)
            _scatter_add(w_out, np.concatenate([o, neg.reshape(-1)]),
                         np.concatenate([-lr * g_pos * u, (-lr * g_neg * u[:, None, :]).reshape(-1, d)]))
            _scatter_add(w_in, c, -lr * grad_u)
        if not (np.isfinite(w_in).all() and np.isfinite(w_out).all()):
            raise NonFinite(f"embedding weights diverged in epoch {epoch}")

    return EmbeddingTable(words, w_in.astype(np.float32), dict(counts))


def embed_attributes(attrs: AttributeSet, table: EmbeddingTable,
                     vocab: AttributeVocabulary | None = None) -> np.ndarray:
    """(M, dim) float64 matrix of attribute vectors in vocabulary order."""
    vocab = vocab or load_vocabulary()
    words = attrs.words(vocab)
    if not words:
        return np.zeros((0, table.dim))
    return np.stack([table.vector(w) for w in words])


def negative_attribute(attr: str, table: EmbeddingTable) -> str:
    """Nearest other word by cosine similarity; ties go to the smaller word."""
    if attr not in table:
        raise MissingWord(attr)
    if len(table) < 2:
        raise ValueError("need at least two words to pick a negative")
    mat = table.matrix.astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    norms[norms < 1e-12] = 1e-12
    q = table._index[attr]
    sims = (mat @ mat[q]) / (norms * norms[q])
    sims[q] = -np.inf
    best = sims.max()
    tied = np.flatnonzero(sims >= best - 1e-12 * max(1.0, abs(best)))
    return min(table.words[i] for i in tied)
