"""WordPiece encoding of aspect instances for single and pair input modes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
from tokenizers import Tokenizer, normalizers, pre_tokenizers
from tokenizers.models import WordPiece

from .corpus import DATASET_LABELS, AspectInstance, label_map as make_label_map
from .errors import ConfigurationError, EncodingError, LoadError

MODES = ("single", "pair")
DEFAULT_MAX_LENGTH = 128
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
VOCAB_FILE = "vocab.txt"


@dataclass(frozen=True)
class TokenizerHandle:
    vocabulary: Mapping[str, int]
    cls_id: int
    sep_id: int
    pad_id: int
    unk_id: int
    max_sequence_length: int = DEFAULT_MAX_LENGTH
    vocab_path: Optional[str] = None
    _backend: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len({self.cls_id, self.sep_id, self.pad_id}) != 3:
            raise LoadError("[CLS], [SEP] and [PAD] must have distinct ids")
        if self.max_sequence_length < 8:
            raise ConfigurationError(
                f"max_sequence_length must be >= 8, got {self.max_sequence_length}")

    @classmethod
    def from_vocab_file(cls, path: Union[str, Path],
                        max_sequence_length: int = DEFAULT_MAX_LENGTH) -> "TokenizerHandle":
        """Load a BERT ``vocab.txt`` (one subword per line, id = line number).

        The text is neither lower-cased nor stripped of diacritics.
        """
        path = Path(path)
        if path.is_dir():
            path = path / VOCAB_FILE
        try:
            tokens = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise LoadError(f"cannot read vocabulary {path}: {exc}") from exc
        vocab = {tok: i for i, tok in enumerate(tokens) if tok}
        missing = [t for t in ("[CLS]", "[SEP]", "[PAD]", "[UNK]") if t not in vocab]
        if missing:
            raise LoadError(f"vocabulary {path} lacks special tokens {missing}")
        backend = Tokenizer(WordPiece(vocab, unk_token="[UNK]", max_input_chars_per_word=100))
        backend.normalizer = normalizers.BertNormalizer(
            clean_text=True, handle_chinese_chars=True, strip_accents=False, lowercase=False)
        backend.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
        return cls(vocab, vocab["[CLS]"], vocab["[SEP]"], vocab["[PAD]"], vocab["[UNK]"],
                   max_sequence_length, str(path), backend)

    def with_max_length(self, max_sequence_length: int) -> "TokenizerHandle":
        return TokenizerHandle(self.vocabulary, self.cls_id, self.sep_id, self.pad_id,
                               self.unk_id, max_sequence_length, self.vocab_path, self._backend)

    def subwords(self, text: str) -> list[str]:
        return self._backend.encode(text, add_special_tokens=False).tokens

    def subword_ids(self, text: str) -> list[int]:
        return self._backend.encode(text, add_special_tokens=False).ids

    def id_to_token(self, idx: int) -> str:
        return self._backend.id_to_token(idx)

    def save_vocab(self, directory: Union[str, Path]) -> Path:
        out = Path(directory) / VOCAB_FILE
        by_id = sorted(self.vocabulary.items(), key=lambda kv: kv[1])
        out.write_text("".join(tok + "\n" for tok, _ in by_id), encoding="utf-8")
        return out


def write_vocab(tokens: Sequence[str], path: Union[str, Path]) -> Path:
    """Write a vocabulary file with the BERT special tokens first."""
    seen = list(SPECIAL_TOKENS)
    seen += [t for t in dict.fromkeys(tokens) if t not in SPECIAL_TOKENS]
    path = Path(path)
    path.write_text("".join(t + "\n" for t in seen), encoding="utf-8")
    return path


@dataclass(frozen=True)
class EncodedExample:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    label_id: int
    instance_key: tuple
    mode: str = "pair"
    # number of review-sentence subwords cut off to fit the length budget
    truncated: int = 0

    @property
    def length(self) -> int:
        return sum(self.attention_mask)


def _label_id(instance: AspectInstance, labels: Optional[Mapping[str, int]]) -> int:
    labels = labels if labels is not None else make_label_map(DATASET_LABELS[instance.dataset_id])
    if instance.polarity not in labels:
        raise EncodingError(
            f"{instance.sentence_id}: label {instance.polarity!r} not in label map {dict(labels)}")
    return labels[instance.polarity]


def _assemble(tok: TokenizerHandle, first: list[int], second: Optional[list[int]],
              instance: AspectInstance, label_id: int, mode: str, truncated: int) -> EncodedExample:
    T = tok.max_sequence_length
    ids = [tok.cls_id, *first, tok.sep_id]
    segments = [0] * len(ids)
    if second is not None:
        ids += [*second, tok.sep_id]
        segments += [1] * (len(second) + 1)
    n = len(ids)
    pad = T - n
    return EncodedExample(
        token_ids=tuple(ids + [tok.pad_id] * pad),
        segment_ids=tuple(segments + [0] * pad),
        attention_mask=tuple([1] * n + [0] * pad),
        label_id=label_id,
        instance_key=instance.key,
        mode=mode,
        truncated=truncated,
    )


def encode_single(instance: AspectInstance, tok: TokenizerHandle,
                  labels: Optional[Mapping[str, int]] = None) -> EncodedExample:
    """``[CLS] sentence [SEP]`` padded to the handle's length; the tail is cut if needed."""
    sentence = tok.subword_ids(instance.sentence_text)
    if not sentence:
        raise EncodingError(f"{instance.sentence_id}: sentence tokenizes to nothing")
    budget = tok.max_sequence_length - 2
    cut = max(0, len(sentence) - budget)
    return _assemble(tok, sentence[:budget], None, instance,
                     _label_id(instance, labels), "single", cut)


def encode_pair(instance: AspectInstance, tok: TokenizerHandle,
                labels: Optional[Mapping[str, int]] = None) -> EncodedExample:
    """``[CLS] sentence [SEP] aspect [SEP]``; only the sentence is ever truncated."""
    sentence = tok.subword_ids(instance.sentence_text)
    aspect = tok.subword_ids(instance.aspect_text)
    if not sentence:
        raise EncodingError(f"{instance.sentence_id}: sentence tokenizes to nothing")
    if not aspect:
        raise EncodingError(f"{instance.sentence_id}: aspect tokenizes to nothing")
    budget = tok.max_sequence_length - 3 - len(aspect)
    if budget < 0:
        raise EncodingError(
            f"{instance.sentence_id}: aspect has {len(aspect)} subwords, more than "
            f"the {tok.max_sequence_length - 3} that fit")
    cut = max(0, len(sentence) - budget)
    return _assemble(tok, sentence[:budget], aspect, instance,
                     _label_id(instance, labels), "pair", cut)


ENCODERS = {"single": encode_single, "pair": encode_pair}


@dataclass
class TruncationReport:
    mode: str
    max_sequence_length: int
    entries: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {"mode": self.mode, "max_sequence_length": self.max_sequence_length,
                "count": self.count, "entries": self.entries}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, indent=2)


def encode_all(instances: Sequence[AspectInstance], tok: TokenizerHandle, mode: str,
               labels: Optional[Mapping[str, int]] = None
               ) -> tuple[list[EncodedExample], TruncationReport]:
    if mode not in MODES:
        raise ConfigurationError(f"unknown input mode {mode!r}; expected one of {MODES}")
    encode = ENCODERS[mode]
    report = TruncationReport(mode, tok.max_sequence_length)
    out = []
    for inst in instances:
        ex = encode(inst, tok, labels)
        if ex.truncated:
            report.entries.append({"instance_key": list(inst.key), "dropped_subwords": ex.truncated})
        out.append(ex)
    return out, report


def batch(examples: Sequence[EncodedExample], batch_size: int,
          shuffle_seed: Optional[int] = None) -> list[list[EncodedExample]]:
    """Split into consecutive batches, optionally after a seeded shuffle."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    return [[examples[i] for i in order[s:s + batch_size]]
            for s in range(0, len(examples), batch_size)]
