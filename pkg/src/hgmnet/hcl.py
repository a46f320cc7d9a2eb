"""Three-level contrastive objective: word, sentence and paragraph losses.

Loss functions take and return ``Var`` objects so they can be evaluated on a
``Tape`` (for training and gradient checks) or on plain arrays.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputWarning, DimensionError, NumericError, ValidationError
from .numkit import Rng, Var, ad
from .numkit.tape import lift, stop_gradient

QUEUE_CAPACITY = 64
TARGET_SMOOTHING = 1e-6
PROTOTYPE_MOMENTUM = 0.9
TAU_INIT = 0.07
MASK_RATE = 0.15
EXCLUDED = -1e30


# --------------------------------------------------------------- lexicon


def read_lexicon(path: str | Path) -> dict[str, list[str]]:
    """``term<TAB>synonym1,synonym2,...`` per line."""
    lex = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        term, sep, syns = line.partition("\t")
        options = [s.strip() for s in syns.split(",") if s.strip()]
        if not sep or not term.strip() or not options:
            raise ValidationError(f"{path}:{lineno}: expected term<TAB>synonym[,synonym...]")
        lex[term.strip().lower()] = options
    return lex


def default_lexicon() -> dict[str, list[str]]:
    return read_lexicon(Path(__file__).parent / "data" / "patent_lexicon.tsv")


def augment_mask(tokens: Sequence, lexicon: Mapping[str, Sequence[str]], rng: Rng, rate: float = MASK_RATE) -> list[str]:
    """Replace ``ceil(rate * |covered|)`` lexicon-covered tokens with synonyms.

    Positions are drawn without replacement; each replacement is a uniform
    draw from the term's synonym list.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"mask rate must lie in [0, 1], got {rate}")
    words = [getattr(t, "surface", t) for t in tokens]
    if not lexicon:
        warnings.warn("empty lexicon; augmentation skipped", DegenerateInputWarning, stacklevel=2)
        return list(words)
    covered = [i for i, w in enumerate(words) if lexicon.get(w)]
    # the epsilon keeps 0.15 * 40 from rounding up to 7
    k = min(len(covered), math.ceil(rate * len(covered) - 1e-9))
    out = list(words)
    for pick in rng.sample(len(covered), k):
        i = covered[pick]
        out[i] = rng.choice(list(lexicon[words[i]]))
    return out


# ------------------------------------------------------------- word level


class NegativeQueue:
    """FIFO of embeddings from earlier batches."""

    def __init__(self, capacity: int = QUEUE_CAPACITY, dim: int | None = None):
        if capacity < 1:
            raise ValidationError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._items: deque[np.ndarray] = deque(maxlen=capacity)
        self._keys: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, vectors, keys: Sequence | None = None) -> None:
        """Enqueue rows in order, evicting the oldest beyond capacity.

        ``keys`` optionally tags each row (e.g. with its token id) so callers
        can mask false negatives.
        """
        rows = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        keys = [None] * len(rows) if keys is None else list(keys)
        if len(keys) != len(rows):
            raise DimensionError(f"{len(keys)} keys for {len(rows)} rows")
        for row, key in zip(rows, keys):
            if self.dim is None:
                self.dim = row.size
            elif row.size != self.dim:
                raise DimensionError(f"queue holds width {self.dim}, got {row.size}")
            self._items.append(row.copy())
            self._keys.append(key)

    def keys(self) -> list:
        return list(self._keys)

    def snapshot(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim or 0))
        return np.stack(list(self._items))


def _cosine_matrix(a: Var, b) -> Var:
    return ad.matmul(ad.normalize_rows(a), ad.transpose(ad.normalize_rows(b)))


def loss_word(h, h_pos, negatives, tau, literal_form: bool = False, exclude=None) -> Var:
    """Mean InfoNCE loss over the rows of ``h``.

    ``negatives`` is a (k x d) array or ``NegativeQueue`` of constants.  The
    default denominator includes the positive term; ``literal_form`` uses
    the negatives alone.  ``exclude`` is an optional (n x k) boolean mask of
    negatives to drop for each row (e.g. other occurrences of the same token).
    """
    h, h_pos, tau = lift(h), lift(h_pos), lift(tau)
    if tau.shape != (1, 1) or not tau.value[0, 0] > 0:
        raise ValidationError("temperature must be a positive scalar")
    if h.shape != h_pos.shape:
        raise DimensionError(f"anchor {h.shape} vs positive {h_pos.shape}")
    neg = negatives.snapshot() if isinstance(negatives, NegativeQueue) else negatives
    neg = stop_gradient(neg) if isinstance(neg, Var) else Var(np.asarray(neg, dtype=np.float64).reshape(-1, h.shape[1]))
    if neg.shape[0] and neg.shape[1] != h.shape[1]:
        raise DimensionError(f"negatives have width {neg.shape[1]}, embeddings {h.shape[1]}")
    pos = ad.div(ad.cosine_rows(h, h_pos), tau)
    bias = None
    if exclude is not None and neg.shape[0]:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != (h.shape[0], neg.shape[0]):
            raise DimensionError(f"exclude mask {exclude.shape} vs {(h.shape[0], neg.shape[0])}")
        bias = np.where(exclude, EXCLUDED, 0.0)
    if literal_form:
        if neg.shape[0] == 0:
            raise ValidationError("the negatives-only denominator needs a nonempty queue")
        negs = _masked(ad.div(_cosine_matrix(h, neg), tau), bias)
        lse = ad.sub(ad.take_cols(negs, 0, 1), ad.take_cols(ad.log_softmax_rows(negs), 0, 1))
        return ad.mean(ad.sub(lse, pos))
    if neg.shape[0] == 0:
        warnings.warn("empty negative queue; word loss is 0", DegenerateInputWarning, stacklevel=2)
        return ad.mul(ad.sum_(pos), 0.0)
    logits = ad.concat([pos, _masked(ad.div(_cosine_matrix(h, neg), tau), bias)], axis=1)
    return ad.neg(ad.mean(ad.take_cols(ad.log_softmax_rows(logits), 0, 1)))


def _masked(logits: Var, bias) -> Var:
    return logits if bias is None else ad.add(logits, bias)


def loss_word_batch(h, h_pos, tau, exclude=None) -> Var:
    """InfoNCE with in-batch negatives: row i's positive is ``h_pos[i]`` and
    every other ``h_pos[j]`` (unless excluded) is a negative."""
    h, h_pos, tau = lift(h), lift(h_pos), lift(tau)
    if tau.shape != (1, 1) or not tau.value[0, 0] > 0:
        raise ValidationError("temperature must be a positive scalar")
    if h.shape != h_pos.shape:
        raise DimensionError(f"anchor {h.shape} vs positive {h_pos.shape}")
    logits = ad.div(_cosine_matrix(h, h_pos), tau)
    n = h.shape[0]
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool) & ~np.eye(n, dtype=bool)
        logits = _masked(logits, np.where(exclude, EXCLUDED, 0.0))
    logp = ad.log_softmax_rows(logits)
    diag = np.eye(n)
    return ad.neg(ad.mul(ad.sum_(ad.mul(logp, diag)), 1.0 / n))


# --------------------------------------------------------- sentence level


def sent_sim_matrix(q, k, d: int | None = None) -> Var:
    """Row-stochastic ``softmax(Q K^T / sqrt(d))``."""
    q, k = lift(q), lift(k)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} vs key width {k.shape[1]}")
    d = q.shape[1] if d is None else d
    if d != q.shape[1]:
        raise DimensionError(f"declared width {d} but vectors have width {q.shape[1]}")
    return ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)))


@dataclass(frozen=True)
class AlignmentPair:
    """One sentence (row ``a`` of the attention matrix) and its candidates.

    ``b`` is the annotated aligned candidate (a column index in ``candidates``
    order is not required; it must be one of them).  ``target`` overrides the
    default smoothed one-hot distribution.
    """

    a: int
    b: int
    label: int
    candidates: tuple[int, ...]
    target: tuple[float, ...] | None = None

    def q(self, eps: float = TARGET_SMOOTHING) -> np.ndarray:
        if self.target is not None:
            q = np.asarray(self.target, dtype=np.float64)
            if q.size != len(self.candidates) or abs(q.sum() - 1.0) > 1e-9:
                raise ValidationError("target must be a distribution over the candidates")
            return q
        if self.b not in self.candidates:
            raise ValidationError(f"aligned index {self.b} is not a candidate")
        c = len(self.candidates)
        q = np.full(c, eps / c)
        q[self.candidates.index(self.b)] += 1.0 - eps
        return q


def loss_sentence(pairs: Sequence[AlignmentPair], attn) -> Var:
    """Mean over all pairs of the label-gated KL(p_m || q_m).

    ``p_m`` is row ``a`` of ``attn`` restricted to the candidates and
    renormalized.  Pairs with label 0 contribute zero but count in the mean.
    """
    if not pairs:
        raise ValidationError("sentence loss needs at least one pair")
    attn = lift(attn)
    groups: dict[tuple[int, ...], list[AlignmentPair]] = {}
    for p in pairs:
        if p.label == 1:
            groups.setdefault(p.candidates, []).append(p)
    total = Var(np.zeros((1, 1)))
    for cand, members in groups.items():
        rows = ad.take_rows(attn, [p.a for p in members])
        sub = ad.transpose(ad.take_rows(ad.transpose(rows), list(cand)))
        sub = ad.div(sub, ad.sum_(sub, axis=1))
        target = np.stack([p.q() for p in members])
        total = ad.add(total, ad.sum_(ad.kl_rows(sub, target)))
    return ad.mul(total, 1.0 / len(pairs))


# -------------------------------------------------------- paragraph level


class PrototypeSet:
    """Per-category prototypes, updated by an exponential moving average."""

    def __init__(self, dim: int, momentum: float = PROTOTYPE_MOMENTUM):
        if not 0.0 <= momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        self.dim = dim
        self.momentum = momentum
        self.mu: dict[Hashable, np.ndarray] = {}

    def categories(self) -> list:
        return list(self.mu)

    def matrix(self, categories: Sequence | None = None) -> np.ndarray:
        cats = self.categories() if categories is None else categories
        return np.stack([self.mu[c] for c in cats]) if cats else np.zeros((0, self.dim))

    def ensure(self, embeddings, labels: Sequence) -> None:
        """Seed missing categories with their current member mean."""
        emb = lift(embeddings).value
        for c in dict.fromkeys(labels):
            if c not in self.mu:
                self.mu[c] = emb[[i for i, l in enumerate(labels) if l == c]].mean(axis=0)

    def update(self, embeddings, labels: Sequence) -> None:
        emb = lift(embeddings).value
        for c in dict.fromkeys(labels):
            mean = emb[[i for i, l in enumerate(labels) if l == c]].mean(axis=0)
            if c in self.mu:
                self.mu[c] = self.momentum * self.mu[c] + (1.0 - self.momentum) * mean
            else:
                self.mu[c] = mean

    def loss(self, embeddings, labels: Sequence) -> Var:
        cats = self.categories()
        index = {c: k for k, c in enumerate(cats)}
        assign = [index.get(l, -1) for l in labels]
        return loss_prototype(self.matrix(cats), embeddings, assign)


def loss_prototype(prototypes, embeddings, assign: Sequence[int]) -> Var:
    """Sum over categories of ``||mu_c - mean of members||^2``.

    ``assign[i]`` is the category row of embedding ``i`` (or -1).  The
    prototypes are detached, so no gradient ever reaches them.
    """
    mu = stop_gradient(prototypes)
    emb = lift(embeddings)
    assign = np.asarray(assign, dtype=np.intp)
    if emb.shape[0] != assign.size:
        raise DimensionError("one category assignment per embedding row is required")
    if mu.shape[0] and mu.shape[1] != emb.shape[1]:
        raise DimensionError(f"prototype width {mu.shape[1]} vs embedding width {emb.shape[1]}")
    counts = np.bincount(assign[assign >= 0], minlength=mu.shape[0]).astype(np.float64)
    live = np.flatnonzero(counts > 0)
    if live.size < mu.shape[0]:
        warnings.warn(f"{mu.shape[0] - live.size} categories without members skipped",
                      DegenerateInputWarning, stacklevel=2)
    if live.size == 0:
        return ad.mul(ad.sum_(emb), 0.0)
    avg = np.zeros((live.size, emb.shape[0]))
    slot = {c: k for k, c in enumerate(live)}
    for i, c in enumerate(assign):
        if c >= 0 and counts[c] > 0:
            avg[slot[c], i] = 1.0 / counts[c]
    diff = ad.sub(ad.take_rows(mu, live), ad.matmul(Var(avg), emb))
    return ad.sum_(ad.square(diff))


# ------------------------------------------------------------- combination


@dataclass
class LossWeights:
    """Unconstrained scores whose softmax gives (alpha, beta, gamma)."""

    raw: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def realized(self) -> np.ndarray:
        r = np.asarray(self.raw, dtype=np.float64).reshape(1, 3)
        e = np.exp(r - r.max())
        return (e / e.sum()).ravel()


def loss_hcl(weights, lw, ls, lp) -> Var:
    """``alpha*Lw + beta*Ls + gamma*Lp`` with softmax-realized weights."""
    raw = weights.raw if isinstance(weights, LossWeights) else weights
    raw = lift(raw)
    if raw.shape != (1, 3):
        raise DimensionError(f"loss weights must be 1x3, got {raw.shape}")
    parts = [lift(x) for x in (lw, ls, lp)]
    for name, v in zip(("word", "sentence", "paragraph"), parts):
        if v.shape != (1, 1) or not np.isfinite(v.value[0, 0]):
            raise NumericError(f"{name}-level loss is not a finite scalar")
    w = ad.softmax_rows(raw)
    total = ad.mul(ad.take_cols(w, 0, 1), parts[0])
    total = ad.add(total, ad.mul(ad.take_cols(w, 1, 2), parts[1]))
    return ad.add(total, ad.mul(ad.take_cols(w, 2, 3), parts[2]))
