"""Open-vocabulary emotion list scoring.

Semantic similarity between labels is approximated by exact matching after
mapping every label to a canonical member of its synonym group.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "EmptyGroundTruth",
    "SynonymMap",
    "normalize_labels",
    "match_score",
    "avg_score",
    "round_half_away",
    "ReportRow",
    "emit_report",
    "score_corpus",
]

log = logging.getLogger(__name__)

_QUOTED = re.compile(r"""['"]([^'"]*)['"]""")


class EmptyGroundTruth(ValueError):
    pass


class SynonymMap:
    """Disjoint label groups; each group's first member is its canonical form."""

    def __init__(self, groups: Iterable[Sequence[str]] = ()):
        self._canon: dict[str, str] = {}
        for group in groups:
            members = [g.strip().lower() for g in group if g.strip()]
            if not members:
                continue
            for m in members:
                if m in self._canon and self._canon[m] != members[0]:
                    raise ValueError(f"label {m!r} appears in two synonym groups")
                self._canon[m] = members[0]

    @classmethod
    def load(cls, path) -> "SynonymMap":
        groups = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                groups.append(line.split(","))
        return cls(groups)

    def canonical(self, label: str) -> str:
        label = label.strip().lower()
        return self._canon.get(label, label)

    def apply(self, labels: Iterable[str]) -> frozenset[str]:
        return frozenset(self.canonical(lab) for lab in labels)


def normalize_labels(raw: str) -> frozenset[str]:
    """Parse ``['a', 'b']`` into a lowercase, trimmed, deduplicated label set.

    Text without a bracketed list yields the empty set and a logged warning.
    """
    start, end = raw.find("["), raw.rfind("]")
    if start < 0 or end < start:
        log.warning("no label list in generated text: %.60r", raw)
        return frozenset()
    body = raw[start + 1:end]
    labels = _QUOTED.findall(body)
    if not labels and body.strip():
        labels = body.split(",")
    return frozenset(lab.strip().lower() for lab in labels if lab.strip())


def match_score(pred: Iterable[str], gt: Iterable[str],
                syn: SynonymMap | None = None) -> tuple[float, float]:
    """(accuracy_s, recall_s) in percent after synonym canonicalization."""
    syn = syn or SynonymMap()
    p, g = syn.apply(pred), syn.apply(gt)
    if not g:
        raise EmptyGroundTruth("ground-truth label set is empty")
    hit = len(p & g)
    acc = 100.0 * hit / len(p) if p else 0.0
    return acc, 100.0 * hit / len(g)


def round_half_away(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    d = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)
    return float(d)


def avg_score(accuracy_s: float, recall_s: float) -> float:
    """Mean of the two scores, rounded half away from zero to 2 decimals."""
    total = Decimal(repr(float(accuracy_s))) + Decimal(repr(float(recall_s)))
    return float((total / 2).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ReportRow:
    name: str
    accuracy_s: float
    recall_s: float

    @property
    def avg(self) -> float:
        return avg_score(self.accuracy_s, self.recall_s)


def emit_report(rows: Sequence[ReportRow], title: str | None = None) -> str:
    width = max([len("Model")] + [len(r.name) for r in rows])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Model':<{width}}  {'Avg':>6}  {'Accuracy_S':>10}  {'Recall_S':>8}")
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.avg:>6.2f}  "
                     f"{round_half_away(r.accuracy_s):>10.2f}  {round_half_away(r.recall_s):>8.2f}")
    return "\n".join(lines) + "\n"


def score_corpus(predictions: Sequence[str], ground_truth: Sequence[Iterable[str]],
                 syn: SynonymMap | None = None) -> tuple[float, float]:
    """Per-sample scores averaged over the corpus."""
    if not predictions:
        raise ValueError("no samples to score")
    accs, recs = [], []
    for raw, gt in zip(predictions, ground_truth, strict=True):
        a, r = match_score(normalize_labels(raw), gt, syn)
        accs.append(a)
        recs.append(r)
    return sum(accs) / len(accs), sum(recs) / len(recs)
