"""
Evaluation records and their aggregate summary.

Per-item rows hold the truth and estimate acoustics plus the watermark
outcome; `summarize` recomputes every aggregate from the rows, so a report
can always be checked against its own items.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .acoustics import compare

REPORT_FORMAT = "echomark/run-report"


def _finite(v) -> Optional[float]:
    """JSON-safe float: NaN and infinities become None."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass(frozen=True)
class ItemResult:
    """Outcome of one manifest row."""

    index: int
    clean_path: str
    target_path: str
    snr_db: Optional[float]
    t60_true: float
    t60_est: float
    drr_true: float
    drr_est: float
    converged: bool
    final_loss: float
    message: Optional[str] = None
    decoded: Optional[str] = None
    present: Optional[bool] = None
    presence_score: Optional[float] = None
    bit_scores: tuple = ()
    negative_present: Optional[bool] = None
    negative_score: Optional[float] = None

    @property
    def bit_errors(self) -> Optional[int]:
        if self.message is None:
            return None
        return sum(a != b for a, b in zip(self.message, self.decoded or ""))

    @property
    def condition(self) -> str:
        return "clean" if self.snr_db is None else f"{self.snr_db:g} dB"

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("snr_db", "t60_true", "t60_est", "drr_true", "drr_est", "final_loss",
                    "presence_score", "negative_score"):
            out[key] = _finite(out[key])
        out["bit_scores"] = [_finite(s) for s in self.bit_scores]
        out["bit_errors"] = self.bit_errors
        return out


@dataclass(frozen=True)
class EvalSummary:
    """Acoustic agreement and watermark metrics over a set of items."""

    count: int
    t60: dict
    drr: dict
    wm_trials: int
    accuracy: Optional[float]
    ber: Optional[float]
    bits: int
    bit_errors: int

    def to_dict(self) -> dict:
        return asdict(self)


def _stats(est, truth) -> dict:
    pairs = [(e, t) for e, t in zip(est, truth) if math.isfinite(e) and math.isfinite(t)]
    if not pairs:
        return {"bias": None, "rmse": None, "pearson_rho": None, "count": 0}
    stats = compare([p[0] for p in pairs], [p[1] for p in pairs]).to_dict()
    return {k: (_finite(v) if k != "count" else v) for k, v in stats.items()}


def summarize(items: Sequence[ItemResult]) -> EvalSummary:
    """Aggregate metrics recomputed from per-item rows.

    Watermark accuracy counts each watermarked item's presence decision and,
    when a negative (unwatermarked) transfer was decoded too, its rejection.
    """
    t60 = _stats([i.t60_est for i in items], [i.t60_true for i in items])
    drr = _stats([i.drr_est for i in items], [i.drr_true for i in items])
    marked = [i for i in items if i.message is not None]
    correct = decisions = bits = errors = 0
    for i in marked:
        decisions += 1
        correct += bool(i.present)
        if i.negative_present is not None:
            decisions += 1
            correct += not i.negative_present
        bits += len(i.message)
        errors += i.bit_errors
    return EvalSummary(
        count=len(items), t60=t60, drr=drr, wm_trials=len(marked),
        accuracy=correct / decisions if decisions else None,
        ber=errors / bits if bits else None, bits=bits, bit_errors=errors)


@dataclass(frozen=True)
class RunReport:
    items: tuple
    summary: EvalSummary
    version: str
    config: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)  # condition -> EvalSummary

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": self.version,
            "config": self.config,
            "summary": self.summary.to_dict(),
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
            "items": [i.to_dict() for i in self.items],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"


def build_report(items: Sequence[ItemResult], version: str, config: dict,
                 group_by_condition: bool = False) -> RunReport:
    items = tuple(items)
    groups = {}
    if group_by_condition:
        for cond in dict.fromkeys(i.condition for i in items):
            groups[cond] = summarize([i for i in items if i.condition == cond])
    return RunReport(items, summarize(items), version, config, groups)


CSV_COLUMNS = ("index", "clean_path", "target_path", "snr_db", "t60_true", "t60_est",
               "drr_true", "drr_est", "converged", "final_loss", "message", "decoded",
               "present", "presence_score", "bit_errors", "negative_present", "negative_score")


def items_csv(items: Sequence[ItemResult]) -> str:
    """Tabular mirror of the per-item rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for item in items:
        row = item.to_dict()
        writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float)
                                                     else row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def ber(sent: Sequence[bool], received: Sequence[bool]) -> float:
    """Fraction of differing bits."""
    if len(sent) != len(received) or not sent:
        raise ValueError("bit sequences must be non-empty and equal length")
    return float(np.mean([a != b for a, b in zip(sent, received)]))
