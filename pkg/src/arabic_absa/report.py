"""Evaluation reports and Table-3 style consolidation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# display order of rows / columns in consolidated tables
MODEL_ORDER = ("majority-baseline", "BERT-Linear-single", "BERT-Linear-pair")
DATASET_COLUMNS = {"hotels": "Arabic hotel reviews", "news": "Arabic news", "haad": "HAAD"}


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    model_name: str
    dataset_id: str
    test_accuracy: float
    per_class: dict
    config: dict
    split_mode: Optional[str]
    dev_curve: list = field(default_factory=list)
    truncation_count: int = 0
    selection: str = "last_epoch"
    seed: Optional[int] = None
    notes: str = ""
    fingerprint: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise SchemaError(f"accuracy {self.test_accuracy} outside [0, 1]")
        for epoch, acc in self.dev_curve:
            if not 0.0 <= acc <= 1.0:
                raise SchemaError(f"dev accuracy {acc} at epoch {epoch} outside [0, 1]")
        if not self.fingerprint:
            self.fingerprint = fingerprint(
                {"model": self.model_name, "dataset": self.dataset_id,
                 "split_mode": self.split_mode, "config": self.config})

    def to_json(self) -> dict:
        data = asdict(self)
        data["dev_curve"] = [[int(e), float(a)] for e, a in self.dev_curve]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(
                f"report schema version {version!r} is incompatible with {SCHEMA_VERSION}")
        data = dict(data)
        data["dev_curve"] = [(int(e), float(a)) for e, a in data.get("dev_curve", [])]
        return cls(**data)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=2,
                                         sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def dev_curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "accuracy"])
        writer.writerows((e, f"{a:.6f}") for e, a in self.dev_curve)
        return buf.getvalue()


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    rule = "-" * max(len(line) for line in lines)
    return "\n".join([rule, lines[0], rule, *lines[1:], rule])


def dedupe(reports: Iterable[EvalReport]) -> list[EvalReport]:
    seen, out = set(), []
    for r in reports:
        if r.fingerprint in seen:
            logger.warning("duplicate report %s (%s on %s) ignored",
                           r.fingerprint, r.model_name, r.dataset_id)
            continue
        seen.add(r.fingerprint)
        out.append(r)
    return out


def consolidate(reports: Sequence[EvalReport]) -> dict:
    """Rows = models, columns = datasets, cells = accuracy in percent."""
    reports = dedupe(reports)
    datasets = [d for d in DATASET_COLUMNS if any(r.dataset_id == d for r in reports)]
    models = sorted({r.model_name for r in reports},
                    key=lambda m: (MODEL_ORDER.index(m) if m in MODEL_ORDER else len(MODEL_ORDER), m))
    cells: dict = {m: {d: None for d in datasets} for m in models}
    for r in reports:
        if cells[r.model_name][r.dataset_id] is not None:
            logger.warning("several reports for %s on %s; keeping the first",
                           r.model_name, r.dataset_id)
            continue
        cells[r.model_name][r.dataset_id] = round(100 * r.test_accuracy, 2)
    return {"columns": datasets, "rows": models, "cells": cells}


def render_table(table: dict) -> str:
    header = ["Models"] + [DATASET_COLUMNS[d] for d in table["columns"]]
    rows = [header]
    for model in table["rows"]:
        vals = table["cells"][model]
        rows.append([model] + ["-" if vals[d] is None else f"{vals[d]:.2f}"
                               for d in table["columns"]])
    return _align(rows)


def render_comparison(finetuned: EvalReport, frozen: EvalReport) -> str:
    rows = [["Setting", "Dataset", "Test accuracy"],
            ["fine-tuned", finetuned.dataset_id, f"{100 * finetuned.test_accuracy:.2f}"],
            ["frozen", frozen.dataset_id, f"{100 * frozen.test_accuracy:.2f}"]]
    return _align(rows)
