"""Parsing of the three Arabic ABSA XML corpora into aspect-level instances.

Supported schemas:

* ``haad``   -- SemEval-2014 style: ``sentence/text`` + ``aspectTerms/aspectTerm``
* ``news``   -- SemEval-2014 style posts, with comment-level annotations that
  are counted and skipped
* ``hotels`` -- SemEval-2016 style: ``Review/sentences/sentence`` with
  ``Opinions/Opinion``
"""
from __future__ import annotations

import io
import json
import logging
import math
import unicodedata
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, CorpusParseError, SchemaError

logger = logging.getLogger(__name__)

# Fixed label order; label ids are positions in this tuple restricted to a
# dataset's inventory.
POLARITIES = ("positive", "negative", "neutral", "conflict")
DATASETS = ("haad", "news", "hotels")
SPLITS = ("train", "dev", "test")
SPLIT_MODES = ("official", "random_70_10_20")

DATASET_LABELS = {
    "haad": frozenset(POLARITIES),
    "news": frozenset({"positive", "negative", "neutral"}),
    "hotels": frozenset({"positive", "negative", "neutral"}),
}

JSONL_FIELDS = (
    "dataset_id", "review_id", "sentence_id", "sentence_text", "aspect_text",
    "aspect_category", "char_from", "char_to", "polarity", "split_tag",
)

XmlSource = Union[bytes, str, Path, IO[bytes]]


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def ordered_labels(inventory: Iterable[str]) -> tuple[str, ...]:
    """Labels of ``inventory`` in the canonical order."""
    inv = set(inventory)
    unknown = inv - set(POLARITIES)
    if unknown:
        raise SchemaError(f"unknown polarity labels: {sorted(unknown)}")
    return tuple(p for p in POLARITIES if p in inv)


def label_map(inventory: Iterable[str]) -> dict[str, int]:
    return {label: i for i, label in enumerate(ordered_labels(inventory))}


@dataclass(frozen=True)
class AspectInstance:
    dataset_id: str
    review_id: str
    sentence_id: str
    sentence_text: str
    aspect_text: str
    aspect_category: Optional[str]
    char_from: int
    char_to: int
    polarity: str

    def __post_init__(self):
        if self.dataset_id not in DATASETS:
            raise SchemaError(f"unknown dataset id {self.dataset_id!r}")
        if self.polarity not in POLARITIES:
            raise SchemaError(
                f"sentence {self.sentence_id}: unknown polarity {self.polarity!r}")
        if not self.sentence_text:
            raise SchemaError(f"sentence {self.sentence_id}: empty text")
        if not self.aspect_text:
            raise SchemaError(f"sentence {self.sentence_id}: empty aspect")
        if not 0 <= self.char_from <= self.char_to <= len(self.sentence_text):
            raise SchemaError(
                f"sentence {self.sentence_id}: offsets {self.char_from}:{self.char_to} "
                f"outside text of length {len(self.sentence_text)}")

    @property
    def key(self) -> tuple:
        return (self.dataset_id, self.review_id, self.sentence_id,
                self.char_from, self.char_to)


@dataclass(frozen=True)
class OffsetMismatch:
    sentence_id: str
    aspect_text: str
    char_from: int
    char_to: int
    found: str


@dataclass
class ParseReport:
    """Side information collected while parsing; never affects equality."""

    mismatches: list[OffsetMismatch] = field(default_factory=list)
    skipped_comments: list[str] = field(default_factory=list)
    # split tag (or None) -> number of sentence/post elements seen
    sentence_counts: dict = field(default_factory=dict)

    def merge(self, other: "ParseReport") -> "ParseReport":
        counts = Counter(self.sentence_counts)
        counts.update(other.sentence_counts)
        return ParseReport(self.mismatches + other.mismatches,
                           self.skipped_comments + other.skipped_comments,
                           dict(counts))

    def to_json(self) -> dict:
        return {
            "mismatches": [asdict(m) for m in self.mismatches],
            "skipped_comments": list(self.skipped_comments),
            "sentence_counts": {str(k): v for k, v in self.sentence_counts.items()},
        }


@dataclass(frozen=True)
class LabeledCorpus:
    """Instances in document order, each with one split tag.

    A split tag of ``None`` means the source carried no train/test identity
    and :func:`split` has not been applied yet.
    """

    dataset_id: str
    instances: tuple[AspectInstance, ...]
    split_tags: tuple[Optional[str], ...]
    label_inventory: frozenset
    report: ParseReport = field(default_factory=ParseReport, compare=False, repr=False)
    split_mode: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.instances) != len(self.split_tags):
            raise ConfigurationError("one split tag per instance is required")
        for inst, tag in zip(self.instances, self.split_tags):
            if tag is not None and tag not in SPLITS:
                raise ConfigurationError(f"unknown split tag {tag!r}")
            if inst.polarity not in self.label_inventory:
                raise SchemaError(
                    f"sentence {inst.sentence_id}: polarity {inst.polarity!r} not in "
                    f"{self.dataset_id} label inventory {sorted(self.label_inventory)}")
            if inst.dataset_id != self.dataset_id:
                raise ConfigurationError(
                    f"instance from {inst.dataset_id} in {self.dataset_id} corpus")

    def __len__(self):
        return len(self.instances)

    def __iter__(self) -> Iterator[tuple[AspectInstance, Optional[str]]]:
        return iter(zip(self.instances, self.split_tags))

    def subset(self, tag: Optional[str]) -> list[AspectInstance]:
        return [inst for inst, t in self if t == tag]

    @property
    def train(self) -> list[AspectInstance]:
        return self.subset("train")

    @property
    def dev(self) -> list[AspectInstance]:
        return self.subset("dev")

    @property
    def test(self) -> list[AspectInstance]:
        return self.subset("test")

    @property
    def has_source_split(self) -> bool:
        return all(t is not None for t in self.split_tags)


def concat(*corpora: LabeledCorpus) -> LabeledCorpus:
    """Join corpora of one dataset (e.g. the train and test files)."""
    if not corpora:
        raise ConfigurationError("nothing to concatenate")
    ids = {c.dataset_id for c in corpora}
    if len(ids) != 1:
        raise ConfigurationError(f"cannot concatenate different datasets: {sorted(ids)}")
    report = ParseReport()
    for c in corpora:
        report = report.merge(c.report)
    return LabeledCorpus(
        dataset_id=corpora[0].dataset_id,
        instances=tuple(i for c in corpora for i in c.instances),
        split_tags=tuple(t for c in corpora for t in c.split_tags),
        label_inventory=frozenset().union(*(c.label_inventory for c in corpora)),
        report=report,
    )


# ---------------------------------------------------------------------------
# XML parsing
# ---------------------------------------------------------------------------

def _read_root(source: XmlSource) -> ET.Element:
    try:
        if isinstance(source, (bytes, bytearray)):
            return ET.fromstring(bytes(source))
        if isinstance(source, (str, Path)):
            return ET.parse(str(source)).getroot()
        return ET.parse(source).getroot()
    except ET.ParseError as exc:
        line, column = getattr(exc, "position", (None, None))
        raise CorpusParseError(f"malformed XML: {exc.msg if hasattr(exc, 'msg') else exc}",
                               line, column) from exc


def _local(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _expect_root(root: ET.Element, tags: Sequence[str], dataset_id: str) -> None:
    if _local(root.tag) not in tags:
        raise SchemaError(f"{dataset_id}: expected root element {' or '.join(tags)}, "
                          f"found <{_local(root.tag)}>; wrong dataset flag?")


def _polarity(raw: Optional[str], sentence_id: str, inventory: frozenset) -> str:
    if raw is None:
        raise SchemaError(f"sentence {sentence_id}: missing polarity attribute")
    value = raw.strip().lower()
    if value not in inventory:
        raise SchemaError(f"sentence {sentence_id}: unknown polarity {raw!r}")
    return value


def _offset(el: ET.Element, name: str, sentence_id: str) -> int:
    raw = el.get(name)
    if raw is None:
        raise SchemaError(f"sentence {sentence_id}: missing {name!r} attribute")
    try:
        return int(raw)
    except ValueError:
        raise SchemaError(f"sentence {sentence_id}: non-integer {name}={raw!r}") from None


def _sentence_text(el: ET.Element, sentence_id: str) -> str:
    text_el = el.find("text")
    if text_el is None or not (text_el.text or "").strip():
        raise SchemaError(f"sentence {sentence_id}: missing or empty <text>")
    return text_el.text


def _normalize_span(raw_text: str, start: int, end: int, sentence_id: str):
    """NFC-normalize ``raw_text`` and carry the span over to the new string."""
    if not 0 <= start <= end <= len(raw_text):
        raise SchemaError(
            f"sentence {sentence_id}: offsets {start}:{end} outside text "
            f"of length {len(raw_text)}")
    text = nfc(raw_text)
    if text == raw_text:
        return text, start, end
    return text, len(nfc(raw_text[:start])), len(nfc(raw_text[:end]))


class _Builder:
    def __init__(self, dataset_id: str, split_tag: Optional[str]):
        if split_tag is not None and split_tag not in SPLITS:
            raise ConfigurationError(f"unknown split tag {split_tag!r}")
        self.dataset_id = dataset_id
        self.split_tag = split_tag
        self.inventory = DATASET_LABELS[dataset_id]
        self.instances: list[AspectInstance] = []
        self.report = ParseReport(sentence_counts={split_tag: 0})

    def sentence_seen(self):
        self.report.sentence_counts[self.split_tag] += 1

    def add_term(self, *, review_id, sentence_id, raw_text, term, start, end,
                 polarity, category=None):
        text, start, end = _normalize_span(raw_text, start, end, sentence_id)
        aspect = nfc(term)
        found = text[start:end]
        if found != aspect:
            self.report.mismatches.append(
                OffsetMismatch(sentence_id, aspect, start, end, found))
        self.instances.append(AspectInstance(
            dataset_id=self.dataset_id, review_id=review_id, sentence_id=sentence_id,
            sentence_text=text, aspect_text=aspect, aspect_category=category,
            char_from=start, char_to=end,
            polarity=_polarity(polarity, sentence_id, self.inventory)))

    def build(self) -> LabeledCorpus:
        if self.report.mismatches:
            logger.warning("%s: %d aspect offsets do not match their term text",
                           self.dataset_id, len(self.report.mismatches))
        return LabeledCorpus(
            dataset_id=self.dataset_id,
            instances=tuple(self.instances),
            split_tags=(self.split_tag,) * len(self.instances),
            label_inventory=self.inventory,
            report=self.report,
        )


def _review_of(sentence_id: str) -> str:
    return sentence_id.split(":", 1)[0]


def _add_aspect_terms(builder: _Builder, sentence: ET.Element, review_id=None):
    sid = sentence.get("id")
    if sid is None:
        raise SchemaError(f"<{_local(sentence.tag)}> element without an id attribute")
    builder.sentence_seen()
    terms = sentence.findall("aspectTerms/aspectTerm")
    if not terms:
        return
    raw_text = _sentence_text(sentence, sid)
    for term in terms:
        surface = term.get("term")
        if surface is None or not surface.strip():
            raise SchemaError(f"sentence {sid}: aspectTerm without a term attribute")
        builder.add_term(
            review_id=review_id or _review_of(sid), sentence_id=sid, raw_text=raw_text,
            term=surface, start=_offset(term, "from", sid), end=_offset(term, "to", sid),
            polarity=term.get("polarity"))


def parse_haad(xml_document: XmlSource, split_tag: Optional[str] = None) -> LabeledCorpus:
    """One instance per ``aspectTerm`` of a SemEval-2014 shaped document."""
    root = _read_root(xml_document)
    _expect_root(root, ("sentences", "sentence"), "haad")
    builder = _Builder("haad", split_tag)
    if _local(root.tag) == "sentence":
        sentences = [root]
    else:
        sentences = root.iter("sentence")
    for sentence in sentences:
        _add_aspect_terms(builder, sentence)
    return builder.build()


_POST_TAGS = {"sentence", "post"}


def _is_comment(tag: str) -> bool:
    tag = tag.lower()
    return tag.startswith("comment") and tag != "comments"


def parse_news(xml_document: XmlSource, split_tag: Optional[str] = None) -> LabeledCorpus:
    """Post-level aspect terms of the news corpus.

    Comment elements (and everything below them) are not modelled; their ids
    go to ``report.skipped_comments``.
    """
    root = _read_root(xml_document)
    if _local(root.tag) in ("Reviews", "Review"):
        raise SchemaError("news: got a SemEval-2016 <Reviews> document; wrong dataset flag?")
    builder = _Builder("news", split_tag)

    def walk(el: ET.Element):
        tag = _local(el.tag)
        if _is_comment(tag):
            builder.report.skipped_comments.append(el.get("id") or f"<{tag}>")
            return
        if tag.lower() in _POST_TAGS and el.find("text") is not None:
            _add_aspect_terms(builder, el)
        for child in el:
            walk(child)

    walk(root)
    if builder.report.skipped_comments:
        logger.warning("news: skipped %d comment-level elements",
                       len(builder.report.skipped_comments))
    return builder.build()


def parse_hotels(xml_document: XmlSource, split_tag: Optional[str] = None) -> LabeledCorpus:
    """Sentence-level ``Opinion`` tuples of a SemEval-2016 document.

    Text-level opinions attached directly to ``Review`` are ignored.  A NULL
    target is replaced by the opinion category with offsets 0:0.
    """
    root = _read_root(xml_document)
    _expect_root(root, ("Reviews", "Review"), "hotels")
    builder = _Builder("hotels", split_tag)
    reviews = [root] if _local(root.tag) == "Review" else root.iter("Review")
    for review in reviews:
        rid = review.get("rid")
        for sentence in review.iter("sentence"):
            sid = sentence.get("id")
            if sid is None:
                raise SchemaError(f"review {rid}: <sentence> without an id attribute")
            builder.sentence_seen()
            opinions = sentence.findall("Opinions/Opinion")
            if not opinions:
                continue
            raw_text = _sentence_text(sentence, sid)
            for op in opinions:
                category = op.get("category")
                if not category:
                    raise SchemaError(f"sentence {sid}: Opinion without a category")
                target = op.get("target")
                if target is None:
                    raise SchemaError(f"sentence {sid}: Opinion without a target attribute")
                if target == "NULL":
                    text = nfc(raw_text)
                    builder.instances.append(AspectInstance(
                        dataset_id="hotels", review_id=rid or _review_of(sid),
                        sentence_id=sid, sentence_text=text, aspect_text=nfc(category),
                        aspect_category=category, char_from=0, char_to=0,
                        polarity=_polarity(op.get("polarity"), sid, builder.inventory)))
                    continue
                builder.add_term(
                    review_id=rid or _review_of(sid), sentence_id=sid, raw_text=raw_text,
                    term=target, start=_offset(op, "from", sid), end=_offset(op, "to", sid),
                    polarity=op.get("polarity"), category=category)
    return builder.build()


PARSERS = {"haad": parse_haad, "news": parse_news, "hotels": parse_hotels}


def load_corpus(dataset_id: str, sources: Mapping[Optional[str], XmlSource]) -> LabeledCorpus:
    """Parse one or more files, keyed by split tag (``None`` = no identity)."""
    if dataset_id not in PARSERS:
        raise ConfigurationError(f"unknown dataset {dataset_id!r}; expected one of {DATASETS}")
    parser = PARSERS[dataset_id]
    return concat(*(parser(src, split_tag=tag) for tag, src in sources.items()))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    s = sum(weights)
    if s == 0:
        return [0] * len(weights)
    quotas = [total * w / s for w in weights]
    alloc = [min(int(math.floor(q)), w) for q, w in zip(quotas, weights)]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order:
        if sum(alloc) >= total:
            break
        if alloc[i] < weights[i]:
            alloc[i] += 1
    return alloc


def _by_label(indices: Iterable[int], instances) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {p: [] for p in POLARITIES}
    for i in indices:
        groups[instances[i].polarity].append(i)
    return groups


def split(corpus: LabeledCorpus, mode: str, seed: int = 0,
          dev_fraction: float = 0.1) -> LabeledCorpus:
    """Assign train/dev/test tags.

    ``random_70_10_20`` stratifies every label 70/10/20 over the whole corpus.
    ``official`` keeps the source test set and moves ``dev_fraction`` of the
    whole corpus from train to dev, stratified by the train label mix.
    """
    if mode not in SPLIT_MODES:
        raise ConfigurationError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    if seed is None:
        raise ConfigurationError("a seed is required for splitting")
    rng = np.random.default_rng(seed)
    tags: list[Optional[str]] = list(corpus.split_tags)
    instances = corpus.instances

    if mode == "random_70_10_20":
        for label, idx in _by_label(range(len(instances)), instances).items():
            perm = [idx[j] for j in rng.permutation(len(idx))]
            n = len(perm)
            n_train = _round_half_up(0.7 * n)
            n_dev = min(_round_half_up(0.1 * n), n - n_train)
            for rank, i in enumerate(perm):
                tags[i] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    else:
        if not corpus.has_source_split:
            raise ConfigurationError(
                "official split needs train/test identity from the source files")
        pool = [i for i, t in enumerate(tags) if t in ("train", "dev")]
        for i in pool:
            tags[i] = "train"
        groups = _by_label(pool, instances)
        n_dev = min(_round_half_up(dev_fraction * len(instances)), len(pool))
        quota = _largest_remainder(n_dev, [len(groups[p]) for p in POLARITIES])
        for label, k in zip(POLARITIES, quota):
            idx = groups[label]
            for j in rng.permutation(len(idx))[:k]:
                tags[idx[j]] = "dev"

    return replace(corpus, split_tags=tuple(tags), split_mode=mode)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

_ROW_NAMES = {"train": "Train", "dev": "Dev", "test": "Test", None: "Unsplit"}


@dataclass(frozen=True)
class CorpusStats:
    dataset_id: str
    labels: tuple[str, ...]
    # split tag -> label -> count
    counts: dict
    sentences: dict = field(default_factory=dict)

    def split_total(self, tag) -> int:
        return sum(self.counts.get(tag, {}).values())

    @property
    def grand_total(self) -> int:
        return sum(self.split_total(t) for t in self.counts)

    def label_total(self, label: str) -> int:
        return sum(row.get(label, 0) for row in self.counts.values())

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "labels": list(self.labels),
            "counts": {str(t): dict(row) for t, row in self.counts.items()},
            "totals": {str(t): self.split_total(t) for t in self.counts},
            "grand_total": self.grand_total,
            "sentences": {str(t): n for t, n in self.sentences.items()},
        }

    def render(self) -> str:
        header = ["Dataset"] + [label.capitalize() for label in self.labels] + ["Total"]
        rows = []
        for tag in (*SPLITS, None):
            if self.split_total(tag):
                rows.append([_ROW_NAMES[tag]] + [str(self.counts[tag].get(label, 0))
                                                 for label in self.labels]
                            + [str(self.split_total(tag))])
        rows.append(["Overall"] + [str(self.label_total(label)) for label in self.labels]
                    + [str(self.grand_total)])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        rule = "-" * len(fmt(header))
        return "\n".join([rule, fmt(header), rule, *map(fmt, rows), rule])


def stats(corpus: LabeledCorpus) -> CorpusStats:
    labels = ordered_labels(corpus.label_inventory)
    counts: dict = {t: {label: 0 for label in labels} for t in SPLITS}
    for inst, tag in corpus:
        counts.setdefault(tag, {label: 0 for label in labels})[inst.polarity] += 1
    return CorpusStats(corpus.dataset_id, labels, counts,
                       dict(corpus.report.sentence_counts))


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def _destination_name(stream) -> str:
    return str(getattr(stream, "name", repr(stream)))


def export_jsonl(corpus: LabeledCorpus, destination: IO) -> int:
    """Write one JSON record per instance; returns the number written.

    Works with text streams and binary streams alike (binary receives UTF-8).
    """
    binary = isinstance(destination, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(
        destination, "mode", "")
    n = 0
    try:
        for inst, tag in corpus:
            record = asdict(inst)
            record["split_tag"] = tag
            line = json.dumps({k: record[k] for k in JSONL_FIELDS}, ensure_ascii=False) + "\n"
            destination.write(line.encode("utf-8") if binary else line)
            n += 1
        destination.flush()
    except OSError as exc:
        raise OSError(f"failed writing {_destination_name(destination)}: {exc}") from exc
    return n


def import_jsonl(source: IO, dataset_id: Optional[str] = None) -> LabeledCorpus:
    """Inverse of :func:`export_jsonl`."""
    instance_fields = [f.name for f in fields(AspectInstance)]
    instances, tags = [], []
    for lineno, line in enumerate(source, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
        missing = set(JSONL_FIELDS) - record.keys()
        if missing:
            raise SchemaError(f"line {lineno}: missing fields {sorted(missing)}")
        instances.append(AspectInstance(**{k: record[k] for k in instance_fields}))
        tags.append(record["split_tag"])
    ids = {i.dataset_id for i in instances}
    if dataset_id is None:
        if len(ids) != 1:
            raise ConfigurationError(
                f"cannot infer dataset id from records: {sorted(ids) or 'empty input'}")
        dataset_id = ids.pop()
    return LabeledCorpus(dataset_id, tuple(instances), tuple(tags),
                         DATASET_LABELS[dataset_id])


def write_jsonl(corpus: LabeledCorpus, path: Union[str, Path]) -> int:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        return export_jsonl(corpus, fh)


def read_jsonl(path: Union[str, Path], dataset_id: Optional[str] = None) -> LabeledCorpus:
    with open(path, encoding="utf-8") as fh:
        return import_jsonl(fh, dataset_id)
