"""Node features: token and CPC embeddings, TF-IDF statistics, citation init."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputWarning, DimensionError, ParseError, ValidationError
from .numkit import Rng
from .textseg import content_tokens, tokenize

SECTIONS = frozenset("ABCDEFGHY")
INIT_SCALE = 0.1


# --------------------------------------------------------------------- CPC


@dataclass(frozen=True)
class CpcCode:
    section: str
    cls: str
    subclass: str | None = None
    main_group: int = 0
    raw: str = field(default="", compare=False)

    def render(self) -> str:
        out = self.section + self.cls
        if self.subclass is not None:
            out += self.subclass
            if self.main_group:
                out += str(self.main_group)
        return out

    def levels(self) -> tuple[str, str, str | None, str]:
        return self.section, self.cls, self.subclass, str(self.main_group)


def cpc_parse(code: str) -> CpcCode:
    """Parse codes such as ``A01B1/00``, ``A01B`` or the bare ``A47``.

    Missing subclass is ``None`` and a missing main group is 0.
    """
    lead = len(code) - len(code.lstrip())
    s = code.strip()

    def fail(i: int, why: str):
        raise ParseError(f"invalid CPC code {code!r} at position {lead + i}: {why}", lead + i)

    if not s:
        raise ParseError(f"empty CPC code {code!r}", lead)
    if s[0] not in SECTIONS:
        fail(0, f"section must be one of A-H or Y, got {s[0]!r}")
    for i in (1, 2):
        if i >= len(s):
            fail(i, "class needs two digits")
        if not s[i].isascii() or not s[i].isdigit():
            fail(i, f"expected a digit, got {s[i]!r}")
    if len(s) == 3:
        return CpcCode(s[0], s[1:3], None, 0, code)
    if not ("A" <= s[3] <= "Z"):
        fail(3, f"subclass must be an uppercase letter, got {s[3]!r}")
    i = 4
    while i < len(s) and s[i].isascii() and s[i].isdigit():
        i += 1
    group = int(s[4:i]) if i > 4 else 0
    if i < len(s):
        if s[i] != "/" or i == 4:
            fail(i, f"unexpected character {s[i]!r}")
        j = i + 1
        if j >= len(s):
            fail(j, "subgroup digits missing after '/'")
        while j < len(s):
            if not (s[j].isascii() and s[j].isdigit()):
                fail(j, f"expected a digit, got {s[j]!r}")
            j += 1
    return CpcCode(s[0], s[1:3], s[3], group, code)


# --------------------------------------------------------------- embeddings


class EmbeddingTable:
    """Token -> row lookup with a reserved out-of-vocabulary row 0."""

    def __init__(self, vocab: Iterable[Hashable], weights: np.ndarray):
        self.vocab: dict = {}
        for tok in vocab:
            if tok not in self.vocab:
                self.vocab[tok] = len(self.vocab) + 1
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != len(self.vocab) + 1:
            raise DimensionError(
                f"weights must have {len(self.vocab) + 1} rows (vocab + OOV), got shape {weights.shape}"
            )
        self.weights = weights

    @classmethod
    def init(cls, vocab: Iterable[Hashable], dim: int, rng: Rng) -> "EmbeddingTable":
        vocab = list(dict.fromkeys(vocab))
        return cls(vocab, rng.uniform(-INIT_SCALE, INIT_SCALE, (len(vocab) + 1, dim)))

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def index(self, token) -> int:
        return self.vocab.get(token, 0)

    def indices(self, tokens: Iterable) -> np.ndarray:
        return np.array([self.vocab.get(t, 0) for t in tokens], dtype=np.intp)

    def lookup(self, token) -> np.ndarray:
        return self.weights[self.index(token)]

    def tokens(self) -> list:
        return list(self.vocab)


class CpcEmbedder:
    """Four tables (section, class, subclass, main group), each of width d/4."""

    LEVELS = ("section", "class", "subclass", "group")

    def __init__(self, tables: Sequence[EmbeddingTable]):
        if len(tables) != 4:
            raise ValidationError("need exactly four CPC level tables")
        widths = {t.dim for t in tables}
        if len(widths) != 1:
            raise DimensionError(f"CPC tables have mixed widths {sorted(widths)}")
        self.tables = list(tables)

    @classmethod
    def init(cls, codes: Iterable[CpcCode], dim: int, rng: Rng) -> "CpcEmbedder":
        if dim % 4:
            raise DimensionError(f"embedding width {dim} is not divisible by 4")
        codes = list(codes)
        # a bare class code has no subclass; it falls back to the OOV row
        per_level = [[c.levels()[k] for c in codes if c.levels()[k] is not None] for k in range(4)]
        return cls([EmbeddingTable.init(v, dim // 4, rng) for v in per_level])

    @property
    def dim(self) -> int:
        return 4 * self.tables[0].dim

    def indices(self, code: CpcCode) -> list[int]:
        return [t.index(v) for t, v in zip(self.tables, code.levels())]


def cpc_embed(code: CpcCode, tables: Sequence[EmbeddingTable] | CpcEmbedder) -> np.ndarray:
    """Section, class, subclass and group embeddings concatenated in that order."""
    emb = tables if isinstance(tables, CpcEmbedder) else CpcEmbedder(tables)
    return np.concatenate([t.lookup(v) for t, v in zip(emb.tables, code.levels())])


def embed_text_node(tokens: Sequence, table: EmbeddingTable) -> np.ndarray:
    """Mean of the token rows; accepts ``Token`` objects or plain strings."""
    if len(tokens) == 0:
        raise ValidationError("cannot embed an empty sentence")
    keys = [getattr(t, "surface", t) for t in tokens]
    return table.weights[table.indices(keys)].mean(axis=0)


def document_embedding(sentences: Sequence[Sequence], table: EmbeddingTable) -> np.ndarray:
    """Mean of a document's text-node embeddings."""
    rows = [embed_text_node(s, table) for s in sentences if len(s)]
    if not rows:
        raise ValidationError("document has no non-empty sentences")
    return np.mean(rows, axis=0)


# ------------------------------------------------------------------- TF-IDF


def _terms(doc) -> list[str]:
    if isinstance(doc, str):
        return [t.surface for t in content_tokens(tokenize(doc))]
    return [getattr(t, "surface", t) for t in doc]


@dataclass
class TfIdfModel:
    """Smoothed idf: ``ln((1 + N) / (1 + df)) + 1``; tf is the raw count."""

    df: dict[str, int]
    n_docs: int
    doc_ids: list = field(default_factory=list)
    vectors: list[dict[str, float]] = field(default_factory=list)

    def idf(self, term: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(term, 0))) + 1.0

    def vectorize(self, doc) -> dict[str, float]:
        counts = Counter(_terms(doc))
        return {t: c * self.idf(t) for t, c in sorted(counts.items())}

    def vector(self, doc_id) -> dict[str, float]:
        try:
            return self.vectors[self.doc_ids.index(doc_id)]
        except ValueError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def token_weights(self, tokens: Sequence) -> np.ndarray:
        """Per-position tf-idf weight within ``tokens``, min-max scaled to [0, 1].

        A document whose weights are all equal maps to zeros.
        """
        terms = [getattr(t, "surface", t) for t in tokens]
        counts = Counter(terms)
        w = np.array([counts[t] * self.idf(t) for t in terms], dtype=np.float64)
        if w.size == 0:
            return w
        lo, hi = w.min(), w.max()
        if hi - lo <= 0:
            return np.zeros_like(w)
        return (w - lo) / (hi - lo)


def tfidf_fit(corpus, doc_ids: Sequence | None = None) -> TfIdfModel:
    """Fit on documents given as strings or token sequences."""
    docs = list(corpus)
    if not docs:
        raise ValidationError("tf-idf needs at least one document")
    ids = list(range(len(docs))) if doc_ids is None else list(doc_ids)
    if len(ids) != len(docs):
        raise DimensionError("doc_ids and corpus differ in length")
    if len(set(ids)) != len(ids):
        raise ValidationError("document ids must be unique")
    terms = [_terms(d) for d in docs]
    df = Counter()
    for ts in terms:
        df.update(set(ts))
    model = TfIdfModel(dict(sorted(df.items())), len(docs), ids)
    model.vectors = [model.vectorize(ts) for ts in terms]
    return model


def sparse_cosine(u: Mapping[str, float], v: Mapping[str, float]) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    small, big = (u, v) if len(u) <= len(v) else (v, u)
    dot = sum(x * big[t] for t, x in small.items() if t in big)
    return min(1.0, max(0.0, dot / (nu * nv)))


def tfidf_cos(model: TfIdfModel, d1, d2) -> float:
    return sparse_cosine(model.vector(d1), model.vector(d2))


# ---------------------------------------------------------------- citations


def cite_init(target_id, cited: Sequence[tuple[Hashable, np.ndarray]], model: TfIdfModel, dim: int) -> np.ndarray:
    """TF-IDF-similarity-weighted sum of cited-document embeddings.

    An empty citation set returns zeros and emits ``DegenerateInputWarning``.
    """
    out = np.zeros(dim)
    if not cited:
        warnings.warn("no cited documents; citation node initialized to zero", DegenerateInputWarning, stacklevel=2)
        return out
    for doc_id, emb in cited:
        emb = np.asarray(emb, dtype=np.float64).ravel()
        if emb.shape != (dim,):
            raise DimensionError(f"cited embedding for {doc_id!r} has width {emb.size}, expected {dim}")
        out = out + tfidf_cos(model, target_id, doc_id) * emb
    return out


def read_citations(path: str | Path) -> list[tuple[str, str]]:
    """``citing_id<TAB>cited_id`` per line; blank lines ignored."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not all(parts):
            raise ValidationError(f"{path}:{lineno}: expected citing_id<TAB>cited_id")
        pairs.append((parts[0], parts[1]))
    return pairs
