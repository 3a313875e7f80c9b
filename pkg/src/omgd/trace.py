"""Run traces and their CSV form."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("t", "theta_err_sq", "grad_norm_sq", "subopt", "decay_sq", "reshuffle_sq", "compress_sq")
_DECOMP = ("decay_sq", "reshuffle_sq", "compress_sq")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return format(float(v), ".17g")


@dataclass
class RunTrace:
    """Per-checkpoint record of one run.

    ``values`` maps each non-``t`` CSV column to a float array aligned with
    ``t``; missing quantities are NaN (written as blank cells).
    ``reconstruction`` holds the decomposition residual norm per checkpoint
    when decomposition was enabled.
    """

    t: np.ndarray
    values: dict
    label: str = ""
    seed: int | None = None
    partial_final_cycle: bool = False
    theta_final: np.ndarray | None = None
    reconstruction: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        for col in CSV_COLUMNS[1:]:
            arr = self.values.get(col)
            self.values[col] = (np.full(len(self.t), np.nan) if arr is None
                                else np.asarray(arr, dtype=np.float64))

    def __getitem__(self, col: str) -> np.ndarray:
        if col == "t":
            return self.t
        return self.values[col]

    def __len__(self):
        return len(self.t)

    @property
    def has_decomposition(self) -> bool:
        return not np.all(np.isnan(self.values["decay_sq"]))

    def prefix(self, n: int) -> "RunTrace":
        return RunTrace(self.t[:n], {k: v[:n] for k, v in self.values.items()}, self.label,
                        self.seed, self.partial_final_cycle, None,
                        None if self.reconstruction is None else self.reconstruction[:n], dict(self.meta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for k, t in enumerate(self.t):
            row = [str(int(t))] + [_fmt(self.values[c][k]) for c in CSV_COLUMNS[1:]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="ascii", newline="\n")

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "RunTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = tuple(h.strip() for h in lines[0].split(","))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        t, cols = [], {c: [] for c in CSV_COLUMNS[1:]}
        for ln in lines[1:]:
            cells = ln.split(",")
            if len(cells) != len(CSV_COLUMNS):
                raise ValueError(f"malformed trace row: {ln!r}")
            t.append(int(cells[0]))
            for c, v in zip(CSV_COLUMNS[1:], cells[1:]):
                cols[c].append(float(v) if v.strip() else np.nan)
        return cls(np.array(t), {c: np.array(v) for c, v in cols.items()}, label=label)

    @classmethod
    def read_csv(cls, path, label: str | None = None) -> "RunTrace":
        path = Path(path)
        return cls.from_csv(path.read_text(encoding="ascii"), label=label if label is not None else path.stem)
