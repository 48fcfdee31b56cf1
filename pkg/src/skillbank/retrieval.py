"""Similarity primitives: cosine, tf-idf ranking, the two-stage shortlist,
union-find pattern canonicalization and the threshold checks built on them."""

from __future__ import annotations

import re
import threading
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .skill_model import Skill

# slack for float round-off in `sim >= threshold` comparisons
SIM_EPS = 1e-9

_TOKEN = re.compile(r"[a-z0-9]+")


class RetrievalError(ValueError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class ZeroVector(RetrievalError):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of an all-zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.asarray(vectors, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("all-zero embedding")
    return m / norms


class HashingEmbedder:
    """Deterministic stand-in embedder: seeded random projection of character
    n-gram counts. Similar strings get similar vectors; no network needed.
    """

    def __init__(self, dim: int = 256, seed: int = 0, ngram: int = 3):
        self.dim = dim
        self.seed = seed
        self.ngram = ngram
        self._gram_vecs: dict[str, np.ndarray] = {}
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _gram(self, gram: str) -> np.ndarray:
        vec = self._gram_vecs.get(gram)
        if vec is None:
            key = zlib.crc32(gram.encode()) ^ (self.seed * 0x9E3779B1 & 0xFFFFFFFF)
            vec = np.random.default_rng(key).standard_normal(self.dim)
            self._gram_vecs[gram] = vec
        return vec

    def _embed_one(self, text: str) -> np.ndarray:
        padded = f" {' '.join(text.lower().split())} "
        n = self.ngram
        counts = Counter(padded[i:i + n] for i in range(max(1, len(padded) - n + 1)))
        grams = list(counts)
        mat = np.stack([self._gram(g) for g in grams])
        vec = np.asarray([counts[g] for g in grams], dtype=float) @ mat
        if not np.any(vec):  # pragma: no cover - needs a degenerate projection
            raise ZeroVector(text)
        return vec

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for t in texts:
            vec = self._cache.get(t)
            if vec is None:
                with self._lock:
                    vec = self._embed_one(t)
                    self._cache[t] = vec
            out.append(vec)
        return out

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


class TableEmbedder:
    """Embedder backed by a fixed text -> vector table (tests, replay)."""

    def __init__(self, table: Mapping[str, Sequence[float]]):
        self._table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._table[t] for t in texts]


def embed_one(embedder: Embedder, text: str) -> np.ndarray:
    vec = np.asarray(embedder.embed([text])[0], dtype=float)
    if vec.shape != (embedder.dim,):
        raise DimensionMismatch(f"embedder declared dim {embedder.dim}, returned {vec.shape}")
    if not np.any(vec):
        raise ZeroVector(text[:60])
    return vec


def skill_embedding(skill: Skill, embedder: Embedder) -> np.ndarray:
    if skill.embedding is not None:
        return np.asarray(skill.embedding, dtype=float)
    return embed_one(embedder, skill.embedding_surface)


def embed_skill(skill: Skill, embedder: Embedder) -> Skill:
    return skill.with_embedding(embed_one(embedder, skill.embedding_surface))


# --------------------------------------------------------------------------- tf-idf


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class TfIdfIndex:
    """Raw-count tf, smoothed idf ln((1+N)/(1+df)) + 1, cosine scoring."""

    vocabulary: dict[str, int]
    idf: np.ndarray
    doc_vectors: np.ndarray  # (n_docs, n_terms), rows L2-normalised (zero rows allowed)
    doc_ids: list[str]

    @classmethod
    def build(cls, docs: Sequence[tuple[str, str]]) -> "TfIdfIndex":
        tokenized = [tokenize(text) for _, text in docs]
        vocab: dict[str, int] = {}
        for toks in tokenized:
            for t in toks:
                vocab.setdefault(t, len(vocab))
        n = len(docs)
        tf = np.zeros((n, len(vocab)))
        for i, toks in enumerate(tokenized):
            for t, c in Counter(toks).items():
                tf[i, vocab[t]] = c
        df = (tf > 0).sum(axis=0)
        idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        weights = tf * idf
        norms = np.linalg.norm(weights, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return cls(vocab, idf, weights / norms, [d for d, _ in docs])

    def scores(self, query: str) -> np.ndarray:
        q = np.zeros(len(self.vocabulary))
        for t, c in Counter(tokenize(query)).items():
            j = self.vocabulary.get(t)
            if j is not None:
                q[j] = c
        q *= self.idf
        norm = np.linalg.norm(q)
        if norm == 0 or not len(self.doc_ids):
            return np.zeros(len(self.doc_ids))
        return self.doc_vectors @ (q / norm)

    def topk(self, query: str, k: int) -> list[str]:
        return _rank(self.scores(query), self.doc_ids)[:k]


def _rank(scores: np.ndarray, ids: Sequence[str]) -> list[str]:
    # score descending, id ascending on ties (stable sort over id-sorted input)
    by_id = sorted(range(len(ids)), key=ids.__getitem__)
    rounded = np.round(np.asarray(scores, dtype=float)[by_id], 12)
    return [ids[by_id[i]] for i in np.argsort(-rounded, kind="stable")]


def tfidf_topk(query: str, docs: Sequence[tuple[str, str]], k: int) -> list[str]:
    if k < 1:
        raise ValueError("K must be >= 1")
    return TfIdfIndex.build(docs).topk(query, k)


class SkillIndex:
    """Both retrieval views over one skill set, built once per phase."""

    def __init__(self, skills: Sequence[Skill], embedder: Embedder):
        self.skills = sorted(skills, key=lambda s: s.id)
        self.ids = [s.id for s in self.skills]
        self.embedder = embedder
        self.tfidf = TfIdfIndex.build([(s.id, s.retrieval_text) for s in self.skills])
        if self.skills:
            self.emb = _unit_rows([skill_embedding(s, embedder) for s in self.skills])
        else:
            self.emb = np.zeros((0, embedder.dim))

    def __len__(self) -> int:
        return len(self.skills)

    def tfidf_ranking(self, text: str) -> tuple[list[str], np.ndarray]:
        scores = self.tfidf.scores(text)
        return _rank(scores, self.ids), scores

    def embedding_ranking(self, text: str) -> list[str]:
        if not self.skills:
            return []
        q = embed_one(self.embedder, text)
        scores = self.emb @ (q / np.linalg.norm(q))
        return _rank(scores, self.ids)

    def shortlist(self, text: str, k: int) -> list[str]:
        if k < 1:
            raise ValueError("K must be >= 1")
        lexical = self.tfidf_ranking(text)[0][:k]
        semantic = self.embedding_ranking(text)[:k]
        seen = set(lexical)
        return lexical + [i for i in semantic if i not in seen]


def shortlist(task_text: str, active_skills: Sequence[Skill], k: int, embedder: Embedder) -> list[str]:
    """tf-idf top-K followed by the embedding-only hits of the embedding top-K."""
    return SkillIndex(active_skills, embedder).shortlist(task_text, k)


# --------------------------------------------------------------------------- canonicalization


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


class CanonicalMap(dict):
    """pattern -> canonical pattern of its component."""

    def components(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for p, c in self.items():
            out.setdefault(c, set()).add(p)
        return out


def canonicalize(patterns: Iterable[str], tau_canon: float, embedder: Embedder) -> CanonicalMap:
    """Merge patterns whose embeddings are chained by cosine >= tau_canon.

    The representative of a component is its most frequent member in
    ``patterns`` (ties: lexicographically smallest).
    """
    if not 0 < tau_canon <= 1:
        raise ValueError("tau_canon must lie in (0, 1]")
    freq = Counter(patterns)
    unique = sorted(freq)
    if not unique:
        return CanonicalMap()
    unit = _unit_rows([embed_one(embedder, p) for p in unique])
    sims = unit @ unit.T
    uf = UnionFind(len(unique))
    rows, cols = np.nonzero(np.triu(sims >= tau_canon - SIM_EPS, k=1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(len(unique)):
        groups.setdefault(uf.find(i), []).append(i)
    cmap = CanonicalMap()
    for members in groups.values():
        rep = min((unique[i] for i in members), key=lambda p: (-freq[p], p))
        for i in members:
            cmap[unique[i]] = rep
    return cmap


def _embed_many(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    vecs = np.asarray(embedder.embed(list(texts)), dtype=float)
    if vecs.ndim != 2 or vecs.shape[1] != embedder.dim:
        raise DimensionMismatch(f"embedder declared dim {embedder.dim}, returned {vecs.shape}")
    return vecs


def max_similarity(text: str, others: Sequence[np.ndarray], embedder: Embedder) -> float:
    if not len(others):
        return -1.0
    q = embed_one(embedder, text)
    unit = _unit_rows(others)
    return float(np.max(unit @ (q / np.linalg.norm(q))))


def is_covered(
    cluster_pattern: str,
    active_skills: Sequence[Skill],
    threshold: float,
    embedder: Embedder,
    *,
    surface: str = "applies_when",
) -> bool:
    """True iff some active skill's applies_when (or full YAML) is within threshold."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if not active_skills:
        return False
    if surface == "applies_when":
        vecs = _embed_many(embedder, [s.guidance.applies_when for s in active_skills])
    elif surface == "yaml":
        vecs = [skill_embedding(s, embedder) for s in active_skills]
    else:
        raise ValueError(f"unknown cover surface {surface!r}")
    return max_similarity(cluster_pattern, vecs, embedder) >= threshold - SIM_EPS


def is_bank_duplicate(candidate: Skill, bank: Sequence[Skill], threshold: float, embedder: Embedder) -> bool:
    if not bank:
        return False
    cand = skill_embedding(candidate, embedder)
    unit = _unit_rows([skill_embedding(s, embedder) for s in bank])
    sims = unit @ (cand / np.linalg.norm(cand))
    return bool(np.max(sims) >= threshold - SIM_EPS)

