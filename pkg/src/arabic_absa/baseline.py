"""Majority-polarity baseline for aspect term polarity.

Each test aspect receives the most frequent training label of that exact
aspect string; unseen aspects fall back to the most frequent training label.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .corpus import POLARITIES, AspectInstance, nfc
from .errors import ConfigurationError, SchemaError

logger = logging.getLogger(__name__)

BASELINE_DEFINITION = "majority: per-aspect most frequent training label, global fallback"


def _pick(counts: Counter, global_counts: Counter) -> tuple[str, bool]:
    best = max(counts.values())
    tied = [label for label, c in counts.items() if c == best]
    if len(tied) == 1:
        return tied[0], False
    # higher global frequency first, then the canonical label order
    tied.sort(key=lambda label: (-global_counts[label], POLARITIES.index(label)))
    return tied[0], True


@dataclass(frozen=True)
class BaselineModel:
    per_aspect_majorities: dict
    global_majority: str
    tie_break_trace: tuple = field(default=())

    def to_json(self) -> dict:
        return {
            "kind": "majority_baseline",
            "per_aspect_majorities": dict(self.per_aspect_majorities),
            "global_majority": self.global_majority,
            "tie_break_trace": list(self.tie_break_trace),
        }

    @classmethod
    def from_json(cls, data: dict) -> "BaselineModel":
        if data.get("kind") != "majority_baseline":
            raise SchemaError(f"not a baseline model document: kind={data.get('kind')!r}")
        return cls(dict(data["per_aspect_majorities"]), data["global_majority"],
                   tuple(data.get("tie_break_trace", ())))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, indent=2, sort_keys=True)


def fit(train: Sequence[AspectInstance]) -> BaselineModel:
    if not train:
        raise ConfigurationError("cannot fit the majority baseline on an empty training set")
    global_counts = Counter(inst.polarity for inst in train)
    per_aspect: dict[str, Counter] = defaultdict(Counter)
    for inst in train:
        per_aspect[nfc(inst.aspect_text)][inst.polarity] += 1

    global_majority, global_tie = _pick(global_counts, global_counts)
    if global_tie:
        logger.info("global majority tie broken in favour of %s", global_majority)
    majorities, trace = {}, []
    for aspect, counts in per_aspect.items():
        majorities[aspect], tied = _pick(counts, global_counts)
        if tied:
            trace.append(aspect)
    return BaselineModel(majorities, global_majority, tuple(trace))


def predict(model: BaselineModel, aspect_text: str) -> str:
    return model.per_aspect_majorities.get(nfc(aspect_text), model.global_majority)


def evaluate_baseline(model: BaselineModel, test: Sequence[AspectInstance]) -> float:
    """Fraction of test instances whose predicted label equals the gold label."""
    if not test:
        raise ConfigurationError("cannot evaluate on an empty test set")
    correct = sum(predict(model, inst.aspect_text) == inst.polarity for inst in test)
    return correct / len(test)


def per_class_counts(model: BaselineModel, test: Iterable[AspectInstance]) -> dict:
    out: dict[str, dict[str, int]] = {}
    for inst in test:
        row = out.setdefault(inst.polarity, {"correct": 0, "support": 0})
        row["support"] += 1
        row["correct"] += predict(model, inst.aspect_text) == inst.polarity
    return out
