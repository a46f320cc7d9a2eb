"""Phrase-pair CSV ingestion and corpus statistics."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..errors import ParseError, ValidationError
from ..features import cpc_parse
from ..textseg import STOPWORDS, content_tokens, tokenize

REQUIRED_COLUMNS = ("id", "anchor", "target", "context", "score")
BUCKET_WIDTH = 0.05


@dataclass(frozen=True)
class PhrasePairRecord:
    id: str
    anchor: str
    target: str
    context: str
    score: float


@dataclass
class IngestResult:
    records: list[PhrasePairRecord]
    problems: list[tuple[int, str]] = field(default_factory=list)

    def summary(self) -> str:
        return f"{len(self.records)} records ingested, {len(self.problems)} rows skipped"


def ingest(path: str | Path) -> IngestResult:
    """Read and validate a phrase-pair CSV.

    Raises ``ValidationError`` if a required column is missing and
    ``OSError`` if the file cannot be read.  Bad rows are skipped and
    reported with their line number.
    """
    path = Path(path)
    records: list[PhrasePairRecord] = []
    problems: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing required column(s): {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                rec = _parse_row(row)
            except ValidationError as exc:
                problems.append((line, str(exc)))
                continue
            if rec.id in seen:
                problems.append((line, f"duplicate id {rec.id!r}"))
                continue
            seen.add(rec.id)
            records.append(rec)
    return IngestResult(records, problems)


def _parse_row(row: dict) -> PhrasePairRecord:
    vals = {c: (row.get(c) or "").strip() for c in REQUIRED_COLUMNS}
    if not vals["id"]:
        raise ValidationError("empty id")
    for side in ("anchor", "target"):
        if not content_tokens(tokenize(vals[side])):
            raise ValidationError(f"{side} has no word tokens")
    try:
        score = float(vals["score"])
    except ValueError:
        raise ValidationError(f"score {vals['score']!r} is not a number") from None
    if not (0.0 <= score <= 1.0) or math.isnan(score):
        raise ValidationError(f"score {score} outside [0, 1]")
    try:
        cpc_parse(vals["context"])
    except ParseError as exc:
        raise ValidationError(str(exc)) from None
    return PhrasePairRecord(vals["id"], vals["anchor"], vals["target"], vals["context"], score)


# -------------------------------------------------------------------- stats


@dataclass
class ScoreHistogram:
    edges: list[float]
    counts: list[int]
    zero_count: int
    total: int

    @property
    def percentages(self) -> list[float]:
        return [100.0 * c / self.total for c in self.counts]

    @property
    def zero_share(self) -> float:
        return 100.0 * self.zero_count / self.total


def score_histogram(scores: Sequence[float], width: float = BUCKET_WIDTH) -> ScoreHistogram:
    """Buckets ``[lo, lo + width)`` over [0, 1]; the last bucket includes 1."""
    if not scores:
        raise ValidationError("statistics need at least one record")
    nb = round(1.0 / width)
    edges = [round(i * width, 10) for i in range(nb + 1)]
    counts = [0] * nb
    for s in scores:
        # the small epsilon keeps 0.15 / 0.05 from landing in bucket 2
        counts[min(nb - 1, int(s / width + 1e-9))] += 1
    return ScoreHistogram(edges, counts, sum(1 for s in scores if s == 0.0), len(scores))


def term_frequencies(texts: Sequence[str], top: int = 20, drop_stopwords: bool = True) -> list[tuple[str, int]]:
    c = Counter()
    for t in texts:
        for tok in content_tokens(tokenize(t)):
            if tok.kind == "word" and not (drop_stopwords and tok.surface in STOPWORDS):
                c[tok.surface] += 1
    return sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top]


def context_distribution(records: Sequence[PhrasePairRecord]) -> list[tuple[str, int]]:
    c = Counter(cpc_parse(r.context).section for r in records)
    return sorted(c.items())


@dataclass
class CorpusStats:
    histogram: ScoreHistogram
    anchor_terms: list[tuple[str, int]]
    target_terms: list[tuple[str, int]]
    sections: list[tuple[str, int]]


def stats(records: Sequence[PhrasePairRecord], top: int = 20) -> CorpusStats:
    return CorpusStats(
        score_histogram([r.score for r in records]),
        term_frequencies([r.anchor for r in records], top),
        term_frequencies([r.target for r in records], top),
        context_distribution(records),
    )


def histogram_csv(h: ScoreHistogram) -> str:
    lines = ["bucket_lo,bucket_hi,count,percent"]
    for lo, hi, c, p in zip(h.edges, h.edges[1:], h.counts, h.percentages):
        lines.append(f"{lo:.2f},{hi:.2f},{c},{p:.4f}")
    lines.append(f"zero,zero,{h.zero_count},{h.zero_share:.4f}")
    return "\n".join(lines) + "\n"


def pairs_csv(header: str, rows: Sequence[tuple[str, int]]) -> str:
    return header + "\n" + "".join(f"{k},{v}\n" for k, v in rows)


def text_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    out = []
    for k, r in enumerate(cells):
        out.append("  ".join(c.rjust(w) if k and _numeric(c) else c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_stats(st: CorpusStats, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "score_histogram.csv": histogram_csv(st.histogram),
        "anchor_terms.csv": pairs_csv("term,count", st.anchor_terms),
        "target_terms.csv": pairs_csv("term,count", st.target_terms),
        "context_sections.csv": pairs_csv("section,count", st.sections),
    }
    paths = []
    for name, body in files.items():
        p = out_dir / name
        p.write_text(body, encoding="utf-8")
        paths.append(p)
    return paths


def render_stats(st: CorpusStats) -> str:
    h = st.histogram
    parts = [
        f"records: {h.total}\nexact-zero share: {h.zero_share:.2f}%\n",
        text_table(["bucket", "count", "percent"],
                   [(f"[{lo:.2f},{hi:.2f}{']' if k == len(h.counts) - 1 else ')'}", c, f"{p:.2f}")
                    for k, (lo, hi, c, p) in enumerate(zip(h.edges, h.edges[1:], h.counts, h.percentages))]),
        text_table(["anchor term", "count"], st.anchor_terms),
        text_table(["target term", "count"], st.target_terms),
        text_table(["section", "count"], st.sections),
    ]
    return "\n".join(parts)
