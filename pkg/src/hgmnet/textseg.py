"""Tokenization and word / phrase / sentence / paragraph decomposition.

Tokenizer rules, applied left to right:

==========  =====================================  ==========================
kind        pattern                                example
==========  =====================================  ==========================
marker      digits + ``.`` preceded by whitespace   ``1.`` in ``"1. A device"``
            (or text start) and followed by
            whitespace (or text end)
word        run of letters/digits with a letter    ``device``, ``a01b``
number      run of digits only                     ``42``
punctuation any other single non-space character   ``,`` ``:`` ``.``
==========  =====================================  ==========================

Word and number surfaces are lowercased.  Whitespace is never a token; it is
kept in ``Token.gap`` so the source can be rebuilt.

All spans are half-open ``(start, end)`` intervals over positions in the
full token list.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .numkit import ad

LEVELS = ("G1", "G2", "G3", "G4")
LEVEL_NAMES = {"G1": "word", "G2": "phrase", "G3": "sentence", "G4": "paragraph"}

TOKEN_CLASSES = ("word", "number", "marker", "stopword", "punctuation")
SENTENCE_END = frozenset(".!?")

STOPWORDS = frozenset(
    """a an the of and or to in on at by for with from as is are was were be
    been being it its this that these those which wherein whereby thereof
    said such into onto than then there"""
    .split()
)

_TOKEN_RE = re.compile(
    r"(?P<marker>(?<!\S)\d+\.(?=\s|$))"
    r"|(?P<alnum>[^\W_]+)"
    r"|(?P<punct>[^\w\s]|_)"
)
_BLANK_LINE_RE = re.compile(r"\n[^\S\n]*\n")


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    kind: str
    start: int
    end: int
    gap: str = ""
    raw: str = ""


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    for m in _TOKEN_RE.finditer(text):
        raw = m.group(0)
        if m.lastgroup == "marker":
            kind = "marker"
        elif m.lastgroup == "alnum":
            kind = "number" if raw.isdigit() else "word"
        else:
            kind = "punctuation"
        surface = raw.lower() if kind in ("word", "number") else raw
        tokens.append(Token(surface, len(tokens), kind, m.start(), m.end(), text[pos:m.start()], raw))
        pos = m.end()
    return tokens


def reconstruct(tokens: Sequence[Token]) -> str:
    """Source text up to trailing whitespace."""
    return "".join(t.gap + t.raw for t in tokens)


def content_tokens(tokens: Sequence[Token]) -> list[Token]:
    return [t for t in tokens if t.kind != "punctuation"]


def token_class(tok: Token) -> str:
    if tok.kind == "word" and tok.surface in STOPWORDS:
        return "stopword"
    return tok.kind


# ------------------------------------------------------------------ phrases


@dataclass
class TransitionTable:
    """Compatibility score in [0, 1] for each adjacent pair of token classes."""

    scores: dict[tuple[str, str], float]
    theta_phrase: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.theta_phrase < 1.0:
            raise ValidationError(f"theta_phrase must lie in (0, 1), got {self.theta_phrase}")
        for pair, s in self.scores.items():
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"transition score {pair} = {s} outside [0, 1]")

    def score(self, a: str, b: str) -> float:
        return self.scores.get((a, b), 0.0)

    @classmethod
    def uniform(cls, value: float, theta_phrase: float = 0.5) -> "TransitionTable":
        return cls({(a, b): value for a in TOKEN_CLASSES for b in TOKEN_CLASSES}, theta_phrase)

    @classmethod
    def default(cls) -> "TransitionTable":
        s = {(a, b): 0.0 for a in TOKEN_CLASSES for b in TOKEN_CLASSES}
        s[("word", "word")] = 0.8
        s[("word", "number")] = 0.7
        s[("number", "word")] = 0.6
        s[("number", "number")] = 0.7
        s[("word", "stopword")] = 0.3
        s[("stopword", "word")] = 0.6
        s[("stopword", "stopword")] = 0.2
        s[("marker", "word")] = 0.0
        return cls(s, 0.5)

    def to_matrix(self) -> np.ndarray:
        return np.array([[self.score(a, b) for b in TOKEN_CLASSES] for a in TOKEN_CLASSES])

    @classmethod
    def from_matrix(cls, m, theta_phrase: float) -> "TransitionTable":
        m = np.asarray(m, dtype=np.float64)
        return cls(
            {(a, b): float(m[i, j]) for i, a in enumerate(TOKEN_CLASSES) for j, b in enumerate(TOKEN_CLASSES)},
            float(theta_phrase),
        )


def link_scores(tokens: Sequence[Token], table: TransitionTable) -> list[float]:
    classes = [token_class(t) for t in tokens]
    return [table.score(classes[k], classes[k + 1]) for k in range(len(tokens) - 1)]


def segment_phrases(tokens: Sequence[Token], table: TransitionTable) -> list[tuple[int, int]]:
    """Greedy product-threshold phrase chunking.

    A span keeps absorbing the next token while the running product of link
    scores stays strictly above ``theta_phrase``.
    """
    return segment_by_links(link_scores(tokens, table), len(tokens), table.theta_phrase)


def segment_by_links(links: Sequence[float], n: int, theta: float) -> list[tuple[int, int]]:
    spans = []
    if n == 0:
        return spans
    start, running = 0, 1.0
    for k in range(n - 1):
        nxt = running * links[k]
        if nxt > theta:
            running = nxt
        else:
            spans.append((start, k + 1))
            start, running = k + 1, 1.0
    spans.append((start, n))
    return spans


def soft_phrase_mixing(links_logit, link_idx, sentence_of, theta_logit, temperature: float = 0.1):
    """Differentiable stand-in for the hard phrase rule, used during training.

    For tokens i < j in the same sentence the affinity is
    ``sigmoid((sum of log link scores on [i, j) - log theta) / temperature)``,
    with link scores ``sigmoid(links_logit)`` and ``theta = sigmoid(theta_logit)``.
    Returns ``(rows, cols, weights)``: weights are row-normalized affinities,
    an (m x 1) ``Var`` aligned with the integer index arrays.

    ``links_logit`` is a flattened (C*C x 1) class-pair table, ``link_idx[k]``
    selects the entry for the link between token k and k+1, and
    ``sentence_of`` gives each token's sentence id.
    """
    sentence_of = np.asarray(sentence_of)
    n = len(sentence_of)
    rows, cols, pair_of, link_of = [], [], [], []
    diag = []
    for i in range(n):
        rows.append(i)
        cols.append(i)
        diag.append(len(rows) - 1)
        for j in range(i + 1, n):
            if sentence_of[j] != sentence_of[i]:
                break
            for r, c in ((i, j), (j, i)):
                rows.append(r)
                cols.append(c)
                p = len(rows) - 1
                for k in range(i, j):
                    pair_of.append(p)
                    link_of.append(k)
    rows = np.array(rows, dtype=np.intp)
    cols = np.array(cols, dtype=np.intp)
    m = len(rows)
    diag = np.array(diag, dtype=np.intp)
    is_diag = np.zeros((m, 1))
    is_diag[diag] = 1.0

    log_link = ad.neg(ad.softplus(ad.neg(links_logit)))
    if link_of:
        per_link = ad.take_rows(log_link, np.asarray(link_idx, dtype=np.intp)[np.array(link_of)])
        log_prod = ad.scatter_add_rows(per_link, np.array(pair_of), m)
    else:
        log_prod = ad.Var(np.zeros((m, 1)))
    log_theta = ad.neg(ad.softplus(ad.neg(theta_logit)))
    aff = ad.sigmoid(ad.mul(ad.sub(log_prod, log_theta), 1.0 / temperature))
    aff = ad.add(ad.mul(aff, 1.0 - is_diag), is_diag)
    den = ad.scatter_add_rows(aff, rows, n)
    w = ad.div(aff, ad.take_rows(den, rows))
    return rows, cols, w


# ---------------------------------------------------------------- sentences


def segment_sentences(tokens: Sequence[Token]) -> list[tuple[int, int]]:
    """Split after ``. ! ?`` and before claim markers."""
    n = len(tokens)
    if n == 0:
        return []
    cuts = set()
    for k, t in enumerate(tokens):
        if t.kind == "punctuation" and t.surface in SENTENCE_END and k + 1 < n:
            cuts.add(k + 1)
        if t.kind == "marker" and k > 0:
            cuts.add(k)
    return _spans_from_cuts(sorted(cuts), n)


def _spans_from_cuts(cuts: Iterable[int], n: int) -> list[tuple[int, int]]:
    spans, start = [], 0
    for c in cuts:
        if start < c < n:
            spans.append((start, c))
            start = c
    if n:
        spans.append((start, n))
    return spans


# --------------------------------------------------------------- paragraphs


@dataclass(frozen=True)
class SectionLabel:
    label: str
    start: int
    end: int


def read_section_labels(path: str | Path) -> list[SectionLabel]:
    """Parse a ``label<TAB>start_token<TAB>end_token`` sidecar."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            out.append(SectionLabel(parts[0], int(parts[1]), int(parts[2])))
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: token offsets must be integers") from None
    return out


def segment_paragraphs(tokens: Sequence[Token], section_labels: Sequence[SectionLabel] | None = None):
    """Paragraph spans and their labels (``None`` for unlabeled stretches).

    With labels, each labeled range becomes one span and any uncovered
    stretch between them becomes an unlabeled span.  Without labels, a blank
    line in a token's leading whitespace starts a new paragraph.
    """
    n = len(tokens)
    if n == 0:
        return [], []
    if section_labels:
        labs = sorted(section_labels, key=lambda s: (s.start, s.end))
        prev_end = 0
        spans, labels = [], []
        for lab in labs:
            if lab.start < 0 or lab.end > n or lab.start >= lab.end:
                raise ValidationError(f"section {lab.label!r} range [{lab.start}, {lab.end}) invalid for {n} tokens")
            if lab.start < prev_end:
                raise ValidationError(f"section {lab.label!r} overlaps a previous section")
            if lab.start > prev_end:
                spans.append((prev_end, lab.start))
                labels.append(None)
            spans.append((lab.start, lab.end))
            labels.append(lab.label)
            prev_end = lab.end
        if prev_end < n:
            spans.append((prev_end, n))
            labels.append(None)
        return spans, labels
    cuts = [k for k, t in enumerate(tokens) if k > 0 and _BLANK_LINE_RE.search(t.gap)]
    spans = _spans_from_cuts(cuts, n)
    return spans, [None] * len(spans)


# ---------------------------------------------------------------- decompose


@dataclass
class GranularityView:
    level: str
    spans: list[tuple[int, int]]
    labels: list[str | None] | None = None


@dataclass
class Decomposition:
    tokens: list[Token]
    views: dict[str, GranularityView] = field(default_factory=dict)

    def __getitem__(self, level: str) -> GranularityView:
        return self.views[level]

    def content_spans(self, level: str) -> list[tuple[int, int]]:
        """Spans re-indexed over non-punctuation tokens; empty spans dropped."""
        remap = np.cumsum([0] + [t.kind != "punctuation" for t in self.tokens])
        out = []
        for s, e in self.views[level].spans:
            cs, ce = int(remap[s]), int(remap[e])
            if ce > cs:
                out.append((cs, ce))
        return out


def decompose(
    text: str,
    table: TransitionTable | None = None,
    labels: Sequence[SectionLabel] | None = None,
) -> Decomposition:
    table = table or TransitionTable.default()
    tokens = tokenize(text)
    n = len(tokens)
    g1 = [(t.index, t.index + 1) for t in tokens if t.kind != "punctuation"]
    g4, g4_labels = segment_paragraphs(tokens, labels)

    # sentences are cut at paragraph edges so they always nest
    g3 = []
    for ps, pe in g4:
        g3.extend((ps + s, ps + e) for s, e in segment_sentences(tokens[ps:pe]))

    g2 = []
    for ss, se in g3:
        for s, e in segment_phrases(tokens[ss:se], table):
            s, e = ss + s, ss + e
            if any(tokens[k].kind != "punctuation" for k in range(s, e)):
                g2.append((s, e))

    dec = Decomposition(tokens, {
        "G1": GranularityView("G1", g1),
        "G2": GranularityView("G2", g2),
        "G3": GranularityView("G3", g3),
        "G4": GranularityView("G4", g4, g4_labels),
    })
    check_nesting(dec, n)
    return dec


def check_nesting(dec: Decomposition, n: int) -> None:
    """Raise ``RuntimeError`` if any level breaks the partition/nesting rules."""
    for level in LEVELS:
        spans = dec[level].spans
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            if e0 > s1:
                raise RuntimeError(f"{level} spans overlap or are unsorted")
        for s, e in spans:
            if not 0 <= s < e <= n:
                raise RuntimeError(f"{level} span ({s}, {e}) out of range")
    for inner, outer in (("G1", "G2"), ("G2", "G3"), ("G3", "G4")):
        for s, e in dec[inner].spans:
            hits = sum(1 for os_, oe in dec[outer].spans if os_ <= s and e <= oe)
            if hits != 1:
                raise RuntimeError(f"{inner} span ({s}, {e}) is inside {hits} {outer} spans")
    for level in ("G3", "G4"):
        covered = sum(e - s for s, e in dec[level].spans)
        if covered != n:
            raise RuntimeError(f"{level} does not partition the tokens")


def spans_to_segment_ids(spans: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    ids = np.full(n, -1, dtype=np.intp)
    for k, (s, e) in enumerate(spans):
        ids[s:e] = k
    return ids
