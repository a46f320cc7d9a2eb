"""Multi-granularity sparse attention.

Four levels run in sequence over a token sequence of length n:

* G1 words: sliding window of radius w plus a shared set of k global keys,
  scores ``q.k / sqrt(d) + lambda * tfidf_i * tfidf_j``.
* G2 phrases: bilinear attention ``h_m^T W h_n / tau`` among the phrases of
  one paragraph.
* G3 sentences and G4 paragraphs: clustered attention, each unit attending
  the units assigned to its R nearest prototypes.

Between levels the running token features are mean-pooled over the level's
spans, attended, broadcast back, and averaged with the input.

Attention is evaluated only on the permitted (query, key) pairs, so cost is
proportional to the pattern's pair count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .numkit import Rng, Var, ad
from .numkit.tape import lift

NEG_INF = -1e30
LAMBDA_INIT = 0.1
PHRASE_TAU_INIT = 1.0


def log_size(n: int) -> int:
    """Default window radius and global-set size, ``ceil(log2(n + 1))``."""
    return math.ceil(math.log2(n + 1))


def proto_count(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


# ------------------------------------------------------------------ patterns


@dataclass
class SparsityPattern:
    level: str
    allowed: list[np.ndarray]
    global_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    w: int | None = None
    k: int | None = None
    K: int | None = None
    R: int | None = None

    def __post_init__(self):
        for i, a in enumerate(self.allowed):
            if a.size == 0:
                raise ValidationError(f"query {i} has no permitted keys")

    @property
    def n(self) -> int:
        return len(self.allowed)

    @property
    def pair_count(self) -> int:
        return int(sum(a.size for a in self.allowed))

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(query, key) index arrays, sorted by query then key."""
        if not self.allowed:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        rows = np.repeat(np.arange(self.n, dtype=np.intp), [a.size for a in self.allowed])
        return rows, np.concatenate(self.allowed).astype(np.intp)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        rows, cols = self.pairs()
        m[rows, cols] = True
        return m

    def dump(self) -> str:
        return "".join(f"{i}: {' '.join(map(str, a.tolist()))}\n" for i, a in enumerate(self.allowed))


def dense_pattern(n: int, level: str = "dense") -> SparsityPattern:
    full = np.arange(n, dtype=np.intp)
    return SparsityPattern(level, [full] * n)


def top_k_global(H, k: int) -> np.ndarray:
    """Positions with the k largest dot products against the mean vector.

    Ties go to the lower index.  Returned sorted.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    k = min(k, n)
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    sim = H @ H.mean(axis=0)
    order = np.lexsort((np.arange(n), -sim))
    return np.sort(order[:k]).astype(np.intp)


def window_pattern(n: int, w: int | None = None, k: int | None = None, H=None) -> SparsityPattern:
    """Local band of radius ``w`` plus ``k`` shared global keys."""
    if n < 1:
        raise ValidationError("sequence length must be at least 1")
    w = log_size(n) if w is None else w
    k = log_size(n) if k is None else k
    if w < 0 or k < 0:
        raise ValidationError("window radius and global size must be non-negative")
    H = np.zeros((n, 1)) if H is None else np.asarray(H, dtype=np.float64)
    if H.shape[0] != n:
        raise DimensionError(f"features have {H.shape[0]} rows for length {n}")
    glob = top_k_global(H, k)
    allowed = []
    for i in range(n):
        band = np.arange(max(0, i - w), min(n, i + w + 1), dtype=np.intp)
        allowed.append(np.union1d(band, glob) if glob.size else band)
    return SparsityPattern("G1", allowed, glob, w=w, k=k)


def group_pattern(groups: Sequence[int], level: str = "G2") -> SparsityPattern:
    """Each unit attends every unit sharing its group id."""
    groups = np.asarray(groups)
    members: dict = {}
    for i, gid in enumerate(groups.tolist()):
        members.setdefault(gid, []).append(i)
    arrays = {gid: np.array(m, dtype=np.intp) for gid, m in members.items()}
    return SparsityPattern(level, [arrays[gid] for gid in groups.tolist()])


@dataclass
class PrototypeBank:
    """K prototype vectors; positions belong to their nearest prototype."""

    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] == 0:
            raise ValidationError("a prototype bank needs at least one prototype")

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def init(cls, H, K: int, rng: Rng | None = None) -> "PrototypeBank":
        """Seed from K rows of ``H``: evenly spaced, or drawn by ``rng``."""
        H = np.asarray(H, dtype=np.float64)
        if K < 1:
            raise ValidationError("K must be at least 1")
        n = H.shape[0]
        K = min(K, n)
        if rng is None:
            idx = np.unique(np.floor(np.arange(K) * n / K).astype(np.intp))
        else:
            idx = np.array(sorted(rng.sample(n, K)), dtype=np.intp)
        return cls(H[idx].copy())

    def distances(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        return np.sqrt(np.maximum(
            (H * H).sum(1)[:, None] - 2.0 * H @ self.centers.T + (self.centers ** 2).sum(1)[None, :], 0.0))

    def ranks(self, H) -> np.ndarray:
        """Prototype indices by increasing distance, ties to the lower index."""
        return np.argsort(self.distances(H), axis=1, kind="stable")

    def assign(self, H) -> np.ndarray:
        return self.ranks(H)[:, 0]

    def update(self, H) -> None:
        """One mean step; prototypes without members stay put."""
        H = np.asarray(H, dtype=np.float64)
        a = self.assign(H)
        for c in range(self.K):
            sel = a == c
            if sel.any():
                self.centers[c] = H[sel].mean(axis=0)


def prototype_pattern(H, bank: PrototypeBank, R: int = 1, level: str = "G3") -> SparsityPattern:
    """Position i attends every position assigned to one of its R nearest prototypes."""
    if bank.K == 0:
        raise ValidationError("K must be at least 1")
    if not 1 <= R <= bank.K:
        raise ValidationError(f"fan-out R={R} must lie in [1, {bank.K}]")
    ranks = bank.ranks(H)
    own = ranks[:, 0]
    members = {c: np.flatnonzero(own == c).astype(np.intp) for c in range(bank.K)}
    allowed = []
    cache: dict = {}
    for i in range(ranks.shape[0]):
        key = tuple(sorted(ranks[i, :R].tolist()))
        if key not in cache:
            cache[key] = np.sort(np.concatenate([members[c] for c in key]))
        allowed.append(cache[key])
    return SparsityPattern(level, allowed, K=bank.K, R=R)


# ------------------------------------------------------------------ scoring


def attn_scores(Q, K, pattern: SparsityPattern, lam=0.0, tfidf=None) -> Var:
    """Scores on the pattern's pairs, (m x 1) in ``pattern.pairs()`` order.

    ``Q_i . K_j / sqrt(d) + lam * tfidf[i] * tfidf[j]``.
    """
    Q, K, lam = lift(Q), lift(K), lift(lam)
    if Q.shape[1] != K.shape[1]:
        raise DimensionError(f"query width {Q.shape[1]} vs key width {K.shape[1]}")
    if Q.shape[0] != pattern.n or K.shape[0] != pattern.n:
        raise DimensionError(f"pattern covers {pattern.n} positions, got {Q.shape[0]} queries / {K.shape[0]} keys")
    if lam.value[0, 0] < 0:
        raise ValidationError("lambda must be non-negative")
    rows, cols = pattern.pairs()
    s = ad.mul(ad.rowdot(ad.take_rows(Q, rows), ad.take_rows(K, cols)), 1.0 / math.sqrt(Q.shape[1]))
    if tfidf is not None:
        w = np.asarray(tfidf, dtype=np.float64).ravel()
        if w.size != pattern.n:
            raise DimensionError(f"{w.size} tf-idf weights for {pattern.n} positions")
        s = ad.add(s, ad.mul(lam, (w[rows] * w[cols]).reshape(-1, 1)))
    return s


def dense_scores(scores, pattern: SparsityPattern) -> np.ndarray:
    """n x n score matrix with ``NEG_INF`` on disallowed pairs."""
    out = np.full((pattern.n, pattern.n), NEG_INF)
    rows, cols = pattern.pairs()
    out[rows, cols] = lift(scores).value[:, 0]
    return out


def attend_pairs(scores, V, pattern: SparsityPattern) -> Var:
    """Softmax per query over its permitted keys, then weighted value sum."""
    rows, cols = pattern.pairs()
    p = ad.segment_softmax(scores, rows, pattern.n)
    return ad.scatter_add_rows(ad.mul(ad.take_rows(lift(V), cols), p), rows, pattern.n)


def phrase_scores(P, pattern: SparsityPattern, W_phrase, tau) -> Var:
    P, tau = lift(P), lift(tau)
    if not tau.value[0, 0] > 0:
        raise ValidationError("phrase temperature must be positive")
    rows, cols = pattern.pairs()
    left = ad.matmul(ad.take_rows(P, rows), lift(W_phrase))
    return ad.div(ad.rowdot(left, ad.take_rows(P, cols)), tau)


def phrase_attention(P, paragraph_of: Sequence[int], W_phrase, tau) -> Var:
    """Dense phrase-to-phrase weights, zero across paragraphs."""
    pattern = group_pattern(paragraph_of, "G2")
    rows, cols = pattern.pairs()
    weights = ad.segment_softmax(phrase_scores(P, pattern, W_phrase, tau), rows, pattern.n)
    return ad.scatter_pairs(weights, rows, cols, (pattern.n, pattern.n))


# --------------------------------------------------------------- pipeline


@dataclass
class Structure:
    """Nested span partitions of ``range(n)`` in content-token index space."""

    n: int
    phrases: list[tuple[int, int]]
    sentences: list[tuple[int, int]]
    paragraphs: list[tuple[int, int]]

    def __post_init__(self):
        for name in ("phrases", "sentences", "paragraphs"):
            spans = getattr(self, name)
            covered = 0
            for s, e in spans:
                if s != covered or e <= s:
                    raise ValidationError(f"{name} must partition range({self.n}) in order")
                covered = e
            if covered != self.n:
                raise ValidationError(f"{name} must partition range({self.n}) in order")
        self.parent_of(self.phrases, self.sentences)
        self.parent_of(self.sentences, self.paragraphs)

    @staticmethod
    def seg_ids(spans, n: int) -> np.ndarray:
        ids = np.empty(n, dtype=np.intp)
        for k, (s, e) in enumerate(spans):
            ids[s:e] = k
        return ids

    @staticmethod
    def parent_of(inner, outer) -> np.ndarray:
        starts = np.array([s for s, _ in outer])
        out = np.searchsorted(starts, [s for s, _ in inner], side="right") - 1
        for (s, e), p in zip(inner, out):
            if not (outer[p][0] <= s and e <= outer[p][1]):
                raise ValidationError(f"span ({s}, {e}) is not nested in its parent level")
        return out

    @classmethod
    def single(cls, n: int) -> "Structure":
        whole = [(0, n)] if n else []
        return cls(n, [(i, i + 1) for i in range(n)], whole, whole)

    @classmethod
    def regular(cls, n: int, phrase: int = 3, sentence: int = 16, paragraph: int = 64) -> "Structure":
        """Fixed-length spans; phrases never cross sentences, sentences never cross paragraphs."""
        paras = [(s, min(n, s + paragraph)) for s in range(0, n, paragraph)]
        sents = [(s, min(pe, s + sentence)) for ps, pe in paras for s in range(ps, pe, sentence)]
        phr = [(s, min(se, s + phrase)) for ss, se in sents for s in range(ss, se, phrase)]
        return cls(n, phr, sents, paras)


@dataclass
class MsaConfig:
    w: int | None = None
    k: int | None = None
    K: int | None = None
    R: int = 1


@dataclass
class MsaParams:
    """Per-level projections; array fields may hold tape ``Var`` objects.

    ``lam`` and ``tau`` are the realized (positive) values.
    """

    word: tuple
    sentence: tuple
    paragraph: tuple
    W_phrase: object
    tau: object = PHRASE_TAU_INIT
    lam: object = LAMBDA_INIT

    @classmethod
    def init(cls, dim: int, rng: Rng, scale: float = 0.3) -> "MsaParams":
        def triple():
            return tuple(np.eye(dim) + rng.uniform(-scale, scale, (dim, dim)) / math.sqrt(dim) for _ in range(3))

        word, sent, para = triple(), triple(), triple()
        return cls(word, sent, para, np.eye(dim) + rng.uniform(-scale, scale, (dim, dim)) / math.sqrt(dim))

    @property
    def dim(self) -> int:
        return lift(self.W_phrase).shape[0]

    def named_arrays(self) -> list[tuple[str, object]]:
        out = []
        for lvl in ("word", "sentence", "paragraph"):
            for name, arr in zip(("Wq", "Wk", "Wv"), getattr(self, lvl)):
                out.append((f"{lvl}.{name}", arr))
        out.append(("W_phrase", self.W_phrase))
        return out


@dataclass
class ComplexityReport:
    rows: list[tuple[str, int, int, float, float]] = field(default_factory=list)

    def add(self, level: str, n: int, pairs: int, wall_ms: float) -> None:
        self.rows.append((level, n, pairs, pairs_per_nlogn(pairs, n), wall_ms))

    @property
    def total_pairs(self) -> int:
        return sum(r[2] for r in self.rows if r[0] != "total")

    def to_csv(self, include_time: bool = True) -> str:
        lines = ["level,n,pairs,pairs_per_nlogn,wall_ms"]
        for level, n, pairs, ratio, ms in self.rows:
            lines.append(f"{level},{n},{pairs},{ratio:.6f},{ms:.3f}" if include_time
                         else f"{level},{n},{pairs},{ratio:.6f},")
        return "\n".join(lines) + "\n"


def pairs_per_nlogn(pairs: int, n: int) -> float:
    return pairs / (n * math.log2(n)) if n >= 2 else float("nan")


@dataclass
class LevelPatterns:
    word: SparsityPattern
    phrase: SparsityPattern
    sentence: SparsityPattern
    paragraph: SparsityPattern

    def all(self) -> list[tuple[str, SparsityPattern]]:
        return [("G1", self.word), ("G2", self.phrase), ("G3", self.sentence), ("G4", self.paragraph)]


def pool_mean(X, spans, n: int) -> Var:
    ids = Structure.seg_ids(spans, n)
    counts = np.array([e - s for s, e in spans], dtype=np.float64).reshape(-1, 1)
    return ad.div(ad.scatter_add_rows(X, ids, len(spans)), counts)


def build_patterns(H, structure: Structure, config: MsaConfig | None = None,
                   banks: tuple[PrototypeBank, PrototypeBank] | None = None) -> LevelPatterns:
    """Patterns for all four levels, from the input features.

    Sentence and paragraph prototype banks are seeded from the pooled inputs
    when not supplied.
    """
    cfg = config or MsaConfig()
    Hv = lift(H).value
    n = structure.n
    if Hv.shape[0] != n:
        raise DimensionError(f"features have {Hv.shape[0]} rows, structure has {n} positions")
    word = window_pattern(n, cfg.w, cfg.k, Hv)
    para_of_phrase = Structure.parent_of(structure.phrases, structure.paragraphs)
    phrase = group_pattern(para_of_phrase, "G2")
    out = []
    for k, (spans, level) in enumerate(((structure.sentences, "G3"), (structure.paragraphs, "G4"))):
        pooled = pool_mean(Var(Hv), spans, n).value
        K = proto_count(len(spans)) if cfg.K is None else cfg.K
        bank = banks[k] if banks is not None else PrototypeBank.init(pooled, K)
        out.append(prototype_pattern(pooled, bank, min(cfg.R, bank.K), level))
    return LevelPatterns(word, phrase, out[0], out[1])


def patterns_fixed(structure: Structure, config: MsaConfig | None = None) -> bool:
    """True when ``build_patterns`` cannot depend on the feature values.

    That holds when the word window already spans the whole sequence and
    each prototype level has a single unit or a single prototype.
    """
    cfg = config or MsaConfig()
    n = structure.n
    w = log_size(n) if cfg.w is None else cfg.w
    if w < n - 1:
        return False
    for spans in (structure.sentences, structure.paragraphs):
        K = proto_count(len(spans)) if cfg.K is None else cfg.K
        if len(spans) > 1 and K > 1:
            return False
    return True


def dense_level_patterns(structure: Structure) -> LevelPatterns:
    return LevelPatterns(
        dense_pattern(structure.n, "G1"),
        dense_pattern(len(structure.phrases), "G2"),
        dense_pattern(len(structure.sentences), "G3"),
        dense_pattern(len(structure.paragraphs), "G4"),
    )


def _proj_attend(X, triple, pattern, lam=None, tfidf=None) -> Var:
    Wq, Wk, Wv = (lift(w) for w in triple)
    Q, K, V = ad.matmul(X, Wq), ad.matmul(X, Wk), ad.matmul(X, Wv)
    s = attn_scores(Q, K, pattern, 0.0 if lam is None else lam, tfidf)
    return attend_pairs(s, V, pattern)


def sparse_forward(H, structure: Structure, patterns: LevelPatterns, params: MsaParams,
                   tfidf=None, phrase_mixing=None) -> tuple[Var, ComplexityReport]:
    """Run the four levels; returns token features (n x d) and pair counts.

    ``phrase_mixing`` optionally replaces the hard phrase broadcast with
    soft token-to-token weights ``(rows, cols, weights)`` (training only).
    """
    X = lift(H)
    n = structure.n
    if X.shape[0] != n:
        raise DimensionError(f"features have {X.shape[0]} rows, structure has {n} positions")
    expected = {"G1": n, "G2": len(structure.phrases), "G3": len(structure.sentences),
                "G4": len(structure.paragraphs)}
    for level, pat in patterns.all():
        if pat.n != expected[level]:
            raise DimensionError(f"{level} pattern covers {pat.n} units, expected {expected[level]}")
    report = ComplexityReport()
    if n == 0:
        return X, report

    t0 = time.perf_counter()
    Y = _proj_attend(X, params.word, patterns.word, params.lam, tfidf)
    X = ad.mul(ad.add(X, Y), 0.5)
    report.add("G1", n, patterns.word.pair_count, (time.perf_counter() - t0) * 1e3)

    t0 = time.perf_counter()
    P = pool_mean(X, structure.phrases, n)
    rows, cols = patterns.phrase.pairs()
    wts = ad.segment_softmax(phrase_scores(P, patterns.phrase, params.W_phrase, params.tau), rows, patterns.phrase.n)
    Yp = ad.scatter_add_rows(ad.mul(ad.take_rows(P, cols), wts), rows, patterns.phrase.n)
    ids = Structure.seg_ids(structure.phrases, n)
    if phrase_mixing is None:
        back = ad.take_rows(Yp, ids)
    else:
        mr, mc, mw = phrase_mixing
        back = ad.scatter_add_rows(ad.mul(ad.take_rows(Yp, ids[mc]), mw), mr, n)
    X = ad.mul(ad.add(X, back), 0.5)
    report.add("G2", len(structure.phrases), patterns.phrase.pair_count, (time.perf_counter() - t0) * 1e3)

    for level, spans, pattern, triple in (("G3", structure.sentences, patterns.sentence, params.sentence),
                                          ("G4", structure.paragraphs, patterns.paragraph, params.paragraph)):
        t0 = time.perf_counter()
        U = pool_mean(X, spans, n)
        Yu = _proj_attend(U, triple, pattern)
        X = ad.mul(ad.add(X, ad.take_rows(Yu, Structure.seg_ids(spans, n))), 0.5)
        report.add(level, len(spans), pattern.pair_count, (time.perf_counter() - t0) * 1e3)

    report.add("total", n, report.total_pairs, sum(r[4] for r in report.rows))
    return X, report


# ------------------------------------------------------------ benchmarking


@dataclass
class SweepRow:
    n: int
    pairs: int
    ratio: float
    wall_ms: float
    dense_pairs: int
    dense_ms: float | None = None


def complexity_sweep(ns: Sequence[int], config: MsaConfig | None = None, dense: bool = False,
                     dim: int = 16, seed: int = 0, repeats: int = 1, time_dense: bool = False) -> list[SweepRow]:
    """Attended pairs and timing on synthetic documents of each length.

    Documents use fixed 3-token phrases, 16-token sentences and 64-token
    paragraphs.  ``dense=True`` measures plain full attention (n^2 pairs).
    Wall time is the median over ``repeats`` runs.
    """
    rows = []
    for n in ns:
        if n < 2:
            raise ValidationError("sweep lengths must be at least 2")
        rng = Rng(seed + n)
        H = rng.uniform(-1.0, 1.0, (n, dim))
        params = MsaParams.init(dim, Rng(seed))
        if dense:
            pairs = n * n
            ms = _median_ms(lambda: _dense_attention(H, params.word), repeats)
        else:
            st = Structure.regular(n)
            pats = build_patterns(H, st, config)
            pairs = sum(p.pair_count for _, p in pats.all())
            ms = _median_ms(lambda: sparse_forward(H, st, pats, params), repeats)
        dense_ms = _median_ms(lambda: _dense_attention(H, params.word), repeats) if time_dense else None
        rows.append(SweepRow(n, pairs, pairs_per_nlogn(pairs, n), ms, n * n, dense_ms))
    return rows


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _dense_attention(H, triple) -> np.ndarray:
    Wq, Wk, Wv = (lift(w).value for w in triple)
    Q, K, V = H @ Wq, H @ Wk, H @ Wv
    S = Q @ K.T / math.sqrt(Q.shape[1])
    S -= S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return (E / E.sum(axis=1, keepdims=True)) @ V


def sweep_csv(rows: Sequence[SweepRow], include_time: bool = True) -> str:
    lines = ["n,pairs,pairs_per_nlogn,wall_ms,dense_pairs,dense_ms"]
    for r in rows:
        ms = f"{r.wall_ms:.3f}" if include_time else ""
        dms = f"{r.dense_ms:.3f}" if include_time and r.dense_ms is not None else ""
        lines.append(f"{r.n},{r.pairs},{r.ratio:.6f},{ms},{r.dense_pairs},{dms}")
    return "\n".join(lines) + "\n"


def merge_patterns(parts: Sequence[SparsityPattern], level: str) -> SparsityPattern:
    """Block-diagonal union of independent patterns, offset in order."""
    allowed, glob, off = [], [], 0
    for p in parts:
        allowed.extend(a + off for a in p.allowed)
        glob.append(p.global_set + off)
        off += p.n
    g = np.concatenate(glob).astype(np.intp) if glob else np.zeros(0, dtype=np.intp)
    return SparsityPattern(level, allowed, g)


def merge_structures(parts: Sequence[Structure]) -> Structure:
    phr, sen, par, off = [], [], [], 0
    for s in parts:
        phr += [(a + off, b + off) for a, b in s.phrases]
        sen += [(a + off, b + off) for a, b in s.sentences]
        par += [(a + off, b + off) for a, b in s.paragraphs]
        off += s.n
    return Structure(off, phr, sen, par)
