"""Fine-tuning, evaluation and inference for the BERT aspect classifier."""
from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .corpus import (SPLIT_MODES, AspectInstance, LabeledCorpus, label_map as make_label_map,
                     nfc, split)
from .encoding import MODES, TokenizerHandle, batch, encode_all
from .errors import ConfigurationError, ContractError, NumericError
from .model import (ClassifierHead, EncoderConfig, EncoderHandle, forward_batch,
                    load_checkpoint, load_encoder, loss_and_grads, predict_proba,
                    save_checkpoint)
from .report import EvalReport, render_comparison

logger = logging.getLogger(__name__)

# batch size and head dropout per dataset, as published for the three corpora
DATASET_DEFAULTS = {
    "hotels": {"batch_size": 24, "head_dropout": 0.1},
    "haad": {"batch_size": 16, "head_dropout": 0.3},
    "news": {"batch_size": 64, "head_dropout": 0.3},
}
# news has no tabulated train/test division, so it is split at random by default
DEFAULT_SPLIT = {"hotels": "official", "haad": "official", "news": "random_70_10_20"}
SELECTIONS = ("last_epoch", "best_dev")


@dataclass(frozen=True)
class TrainConfig:
    dataset_id: str
    input_mode: str = "pair"
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: Optional[int] = None
    head_dropout: Optional[float] = None
    encoder_dropout: float = 0.3
    fine_tune: bool = True
    seed: int = 0
    split_mode: Optional[str] = None
    selection: str = "last_epoch"
    max_sequence_length: int = 128
    checkpoint_id: str = ""
    num_layers: int = 12
    num_heads: int = 12
    hidden_size: int = 768
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.dataset_id not in DATASET_DEFAULTS:
            raise ConfigurationError(f"unknown dataset {self.dataset_id!r}")
        if self.input_mode not in MODES:
            raise ConfigurationError(f"input_mode must be one of {MODES}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.split_mode is not None and self.split_mode not in SPLIT_MODES:
            raise ConfigurationError(f"split_mode must be one of {SPLIT_MODES}")
        if self.selection not in SELECTIONS:
            raise ConfigurationError(f"selection must be one of {SELECTIONS}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def resolved(self) -> "TrainConfig":
        """Copy with the per-dataset defaults filled in."""
        defaults = DATASET_DEFAULTS[self.dataset_id]
        return replace(
            self,
            batch_size=self.batch_size if self.batch_size is not None else defaults["batch_size"],
            head_dropout=(self.head_dropout if self.head_dropout is not None
                          else defaults["head_dropout"]),
            split_mode=self.split_mode or DEFAULT_SPLIT[self.dataset_id])

    def to_json(self) -> dict:
        return asdict(self.resolved())

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.checkpoint_id, self.num_layers, self.num_heads,
                             self.hidden_size, self.fine_tune, self.encoder_dropout)


@dataclass
class TrainedModel:
    encoder: EncoderHandle
    head: ClassifierHead
    tok: TokenizerHandle
    input_mode: str
    dataset_id: str
    config: dict = field(default_factory=dict)

    @property
    def label_map(self) -> dict:
        return self.head.label_map

    def save(self, destination: Union[str, Path], probe=None) -> dict:
        return save_checkpoint(self.encoder, self.head, self.tok, destination, probe=probe,
                               extra={"input_mode": self.input_mode,
                                      "dataset_id": self.dataset_id,
                                      "train_config": self.config})

    @classmethod
    def load(cls, source: Union[str, Path]) -> "TrainedModel":
        encoder, head, tok, manifest = load_checkpoint(source)
        return cls(encoder, head, tok, manifest.get("input_mode", "pair"),
                   manifest.get("dataset_id", ""), manifest.get("train_config", {}))


def _ensure_split(corpus: LabeledCorpus, config: TrainConfig) -> LabeledCorpus:
    if None in corpus.split_tags:
        if config.split_mode == "official":
            raise ConfigurationError(
                "corpus has instances without train/test identity; use the random split")
        return split(corpus, config.split_mode, config.seed)
    if not corpus.dev:
        return split(corpus, config.split_mode, config.seed)
    return corpus


def _warn_missing_classes(corpus: LabeledCorpus) -> None:
    support = {tag: Counter(i.polarity for i in corpus.subset(tag))
               for tag in ("train", "dev", "test")}
    absent = sorted((set(support["dev"]) | set(support["test"])) - set(support["train"]))
    if absent:
        table = "\n".join(f"  {tag:<5} " + " ".join(f"{k}={v}" for k, v in sorted(c.items()))
                          for tag, c in support.items())
        warnings.warn(f"classes {absent} occur in dev/test but never in train; support:\n{table}",
                      stacklevel=3)


def _accuracy(probs: np.ndarray, gold: Sequence[int]) -> float:
    if len(gold) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(gold)))


def train(corpus: LabeledCorpus, config: TrainConfig) -> tuple[TrainedModel, EvalReport]:
    """Adam on cross-entropy for ``config.epochs`` shuffled passes over train.

    Dev accuracy is recorded after every epoch; the returned model is the last
    epoch's (or the best dev epoch's with ``selection='best_dev'``), evaluated
    on test.  Runs are repeatable for a fixed seed on one platform.
    """
    config = config.resolved()
    if corpus.dataset_id != config.dataset_id:
        raise ConfigurationError(
            f"config is for {config.dataset_id} but the corpus is {corpus.dataset_id}")
    corpus = _ensure_split(corpus, config)
    for tag in ("train", "dev", "test"):
        if not corpus.subset(tag):
            raise ConfigurationError(f"the {tag} split is empty")
    _warn_missing_classes(corpus)

    torch.manual_seed(config.seed)
    labels = make_label_map(corpus.label_inventory)
    tok = TokenizerHandle.from_vocab_file(config.checkpoint_id, config.max_sequence_length)
    encoded = {}
    truncated = 0
    for tag in ("train", "dev", "test"):
        encoded[tag], rep = encode_all(corpus.subset(tag), tok, config.input_mode, labels)
        truncated += rep.count
    if truncated:
        logger.info("%d inputs truncated to %d tokens", truncated, config.max_sequence_length)

    encoder = load_encoder(config.encoder_config())
    head = ClassifierHead(encoder.hidden_size, labels, config.head_dropout, seed=config.seed)
    params = list(head.parameters()) + encoder.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2),
                                 eps=config.adam_eps, weight_decay=config.weight_decay)
    dev_gold = [e.label_id for e in encoded["dev"]]

    dev_curve, best = [], (-1.0, None, None)
    for epoch in range(1, config.epochs + 1):
        batches = batch(encoded["train"], config.batch_size,
                        shuffle_seed=config.seed * 100_003 + epoch)
        for step, examples in enumerate(batches, 1):
            try:
                probs = forward_batch(encoder, head, examples, dropout_active=True)
                _, grads = loss_and_grads(probs, [e.label_id for e in examples], params)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            for p, g in zip(params, grads):
                p.grad = g
            optimizer.step()
        dev_acc = _accuracy(predict_proba(encoder, head, encoded["dev"]), dev_gold)
        dev_curve.append((epoch, dev_acc))
        logger.info("epoch %d: dev accuracy %.4f", epoch, dev_acc)
        if config.selection == "best_dev" and dev_acc > best[0]:
            best = (dev_acc, encoder.state_snapshot(),
                    {k: v.detach().clone() for k, v in head.state_dict().items()})

    if config.selection == "best_dev":
        encoder.bert.load_state_dict(best[1])
        head.load_state_dict(best[2])

    model = TrainedModel(encoder, head, tok, config.input_mode, config.dataset_id,
                         config.to_json())
    accuracy, per_class = evaluate(model, corpus.test)
    report = EvalReport(
        model_name=f"BERT-Linear-{config.input_mode}",
        dataset_id=config.dataset_id,
        test_accuracy=accuracy,
        per_class=per_class,
        config=config.to_json(),
        split_mode=corpus.split_mode or "source",
        dev_curve=dev_curve,
        truncation_count=truncated,
        selection=config.selection,
        seed=config.seed,
    )
    return model, report


def evaluate(model: TrainedModel, instances: Sequence[AspectInstance],
             input_mode: Optional[str] = None) -> tuple[float, dict]:
    """Accuracy (correct / total) and per-class correct/support counts."""
    if not instances:
        raise ConfigurationError("cannot evaluate on an empty instance list")
    unseen = sorted({i.polarity for i in instances} - set(model.label_map))
    if unseen:
        raise ContractError(f"gold labels {unseen} are not in the model's label map "
                            f"{sorted(model.label_map)}")
    mode = input_mode or model.input_mode
    examples, _ = encode_all(instances, model.tok, mode, model.label_map)
    pred = np.argmax(predict_proba(model.encoder, model.head, examples), axis=1)
    per_class: dict = {}
    correct = 0
    for inst, p in zip(instances, pred):
        row = per_class.setdefault(inst.polarity, {"correct": 0, "support": 0})
        row["support"] += 1
        hit = model.head.labels[p] == inst.polarity
        row["correct"] += int(hit)
        correct += int(hit)
    return correct / len(instances), per_class


def evaluation_report(model: TrainedModel, instances: Sequence[AspectInstance],
                      split_mode: Optional[str] = None) -> EvalReport:
    accuracy, per_class = evaluate(model, instances)
    return EvalReport(model_name=f"BERT-Linear-{model.input_mode}",
                      dataset_id=model.dataset_id, test_accuracy=accuracy,
                      per_class=per_class, config=model.config, split_mode=split_mode,
                      seed=model.config.get("seed"),
                      notes="evaluation of a saved checkpoint")


@dataclass
class Comparison:
    finetuned: EvalReport
    frozen: EvalReport
    table: str
    models: tuple = ()

    def to_json(self) -> dict:
        return {"fine_tuned": self.finetuned.test_accuracy,
                "frozen": self.frozen.test_accuracy,
                "dataset_id": self.finetuned.dataset_id}


def compare_finetune(corpus: LabeledCorpus, config: TrainConfig) -> Comparison:
    """Two runs that differ only in whether the encoder is updated."""
    tuned_model, tuned = train(corpus, replace(config, fine_tune=True))
    frozen_model, frozen = train(corpus, replace(config, fine_tune=False))
    tuned.notes = "fine-tuned encoder"
    frozen.notes = "frozen encoder"
    return Comparison(tuned, frozen, render_comparison(tuned, frozen),
                      (tuned_model, frozen_model))


def predict_cases(model: TrainedModel, cases: Sequence[tuple[str, str]],
                  input_mode: Optional[str] = None) -> list[tuple[tuple[str, str], str, list[float]]]:
    """Label and class probabilities for free-text (sentence, aspect) pairs."""
    mode = input_mode or model.input_mode
    if mode not in MODES:
        raise ConfigurationError(f"input mode must be one of {MODES}")
    instances = []
    for n, (sentence, aspect) in enumerate(cases):
        if not sentence or not sentence.strip() or not aspect or not aspect.strip():
            raise ContractError(f"case {n}: sentence and aspect must be non-empty")
        sentence, aspect = nfc(sentence), nfc(aspect)
        start = sentence.find(aspect)
        span = (start, start + len(aspect)) if start >= 0 else (0, 0)
        instances.append(AspectInstance(
            dataset_id=model.dataset_id or "hotels", review_id="case", sentence_id=str(n),
            sentence_text=sentence, aspect_text=aspect, aspect_category=None,
            char_from=span[0], char_to=span[1],
            # placeholder gold label; only the input ids matter here
            polarity=model.head.labels[0]))
    if not instances:
        return []
    examples, _ = encode_all(instances, model.tok, mode, model.label_map)
    probs = predict_proba(model.encoder, model.head, examples)
    return [(tuple(case), model.head.labels[int(np.argmax(p))], p.tolist())
            for case, p in zip(cases, probs)]
