"""Plain-text checkpoint format.

::

    HGMNET1
    #config
    {"dim": 16, ...}                 one line of JSON, keys sorted
    #vocab <name> <count>
    <one entry per line>
    #tfidf <n_docs> <count>
    <term>\t<df>
    #tensor <name> <rows> <cols>
    <rows lines of space-separated floats, 17 significant digits>
    #end

Floats written with 17 significant digits read back to the identical double.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ValidationError

FORMAT_TAG = "HGMNET1"


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    vocabs: dict[str, list[str]] = field(default_factory=dict)
    df: dict[str, int] = field(default_factory=dict)
    n_docs: int = 0


def dumps(ck: Checkpoint) -> str:
    out = [FORMAT_TAG, "#config", json.dumps(ck.config, sort_keys=True)]
    for name, words in ck.vocabs.items():
        _check_name(name)
        out.append(f"#vocab {name} {len(words)}")
        for w in words:
            if not w or "\n" in w or w.startswith("#"):
                raise ValidationError(f"vocabulary entry {w!r} cannot be stored")
            out.append(w)
    out.append(f"#tfidf {ck.n_docs} {len(ck.df)}")
    out.extend(f"{t}\t{c}" for t, c in ck.df.items())
    for name, arr in ck.tensors.items():
        _check_name(name)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"tensor {name} must be 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name} has non-finite entries")
        out.append(f"#tensor {name} {arr.shape[0]} {arr.shape[1]}")
        out.extend(" ".join(format(x, ".17g") for x in row) for row in arr)
    out.append("#end")
    return "\n".join(out) + "\n"


def _check_name(name: str) -> None:
    if not name or any(c.isspace() for c in name):
        raise ValidationError(f"invalid entry name {name!r}")


def loads(text: str) -> Checkpoint:
    lines = text.split("\n")
    if not lines or lines[0] != FORMAT_TAG:
        raise ValidationError(f"not a {FORMAT_TAG} checkpoint (first line {lines[0][:20]!r})")
    pos = 1

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise ValidationError("checkpoint is truncated")
        pos += 1
        return lines[pos - 1]

    if take() != "#config":
        raise ValidationError("checkpoint is missing its config block")
    try:
        ck = Checkpoint(json.loads(take()))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad config block: {exc}") from None
    while True:
        head = take().split()
        if not head:
            raise ValidationError(f"unexpected blank line at line {pos}")
        tag = head[0]
        try:
            if tag == "#end":
                return ck
            if tag == "#vocab" and len(head) == 3:
                ck.vocabs[head[1]] = [take() for _ in range(int(head[2]))]
            elif tag == "#tfidf" and len(head) == 3:
                ck.n_docs = int(head[1])
                for _ in range(int(head[2])):
                    term, count = take().split("\t")
                    ck.df[term] = int(count)
            elif tag == "#tensor" and len(head) == 4:
                r, c = int(head[2]), int(head[3])
                rows = [take().split() for _ in range(r)]
                arr = np.array([[float(x) for x in row] for row in rows], dtype=np.float64).reshape(r, c)
                ck.tensors[head[1]] = arr
            else:
                raise ValidationError(f"unknown checkpoint section {' '.join(head)!r} at line {pos}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed section {' '.join(head)!r}: {exc}") from None


def save(ck: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(ck), encoding="utf-8")
    return path


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))
