"""Attention complexity benchmark: sparse sweep plus a dense baseline."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from ..errors import ValidationError
from ..msa import MsaConfig, SweepRow, complexity_sweep, sweep_csv

DEFAULT_NS = (64, 128, 256, 512, 1024, 2048, 4096)
REPEATS = 5


@dataclass
class BenchConfig:
    ns: list[int] = field(default_factory=lambda: list(DEFAULT_NS))
    w: int | None = None
    k: int | None = None
    K: int | None = None
    R: int = 1
    dim: int = 16
    seed: int = 0
    repeats: int = REPEATS
    dense: bool = False

    def __post_init__(self):
        if not self.ns or any(n < 2 for n in self.ns):
            raise ValidationError("bench lengths must be at least 2")
        if self.repeats < 1:
            raise ValidationError("repeats must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchConfig":
        extra = sorted(set(d) - {f.name for f in fields(cls)})
        if extra:
            raise ValidationError(f"unknown bench config key(s): {', '.join(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad bench config: {exc}") from None

    def msa_config(self) -> MsaConfig:
        return MsaConfig(self.w, self.k, self.K, self.R)


def bench(config: BenchConfig) -> list[SweepRow]:
    """Pair counts and median wall time; sparse runs also time dense attention."""
    return complexity_sweep(config.ns, config.msa_config(), dense=config.dense, dim=config.dim,
                            seed=config.seed, repeats=config.repeats, time_dense=not config.dense)


def write_bench(rows: list[SweepRow], out_dir: str | Path, dense: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / ("complexity_dense.csv" if dense else "complexity.csv")
    path.write_text(sweep_csv(rows), encoding="utf-8")
    return path
