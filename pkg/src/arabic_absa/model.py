"""Pretrained BERT encoder plus a linear softmax head on the [CLS] state."""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import transformers
from safetensors.torch import load_file, save_file
from torch import nn
from transformers import BertConfig, BertModel

from .encoding import VOCAB_FILE, EncodedExample, TokenizerHandle
from .errors import ContractError, LoadError, NumericError

logger = logging.getLogger(__name__)
transformers.logging.set_verbosity_error()
transformers.logging.disable_progress_bar()

MANIFEST = "manifest.json"
ENCODER_DIR = "encoder"
HEAD_FILE = "head.safetensors"
PROBE_FILE = "probe.json"
CHECKPOINT_PARTS = (MANIFEST, f"{ENCODER_DIR}/config.json",
                    f"{ENCODER_DIR}/model.safetensors", HEAD_FILE, VOCAB_FILE)
MANIFEST_KEYS = ("encoder_config", "label_map", "head_dropout", "max_sequence_length",
                 "fingerprint")


@dataclass(frozen=True)
class EncoderConfig:
    """What to load and how to treat it.

    ``dropout_rate`` is the encoder-internal hidden dropout; dropout on the
    head input is a property of :class:`ClassifierHead`.
    """

    checkpoint_id: str
    num_layers: int = 12
    num_heads: int = 12
    hidden_size: int = 768
    fine_tune: bool = True
    dropout_rate: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class EncoderOutput:
    hidden_states: torch.Tensor  # [batch, T, hidden]
    cls_state: torch.Tensor      # [batch, hidden]


class EncoderHandle:
    """A loaded BERT encoder; frozen unless ``config.fine_tune``."""

    def __init__(self, bert: BertModel, config: EncoderConfig):
        self.bert = bert
        self.config = config
        self.set_fine_tune(config.fine_tune)

    @property
    def num_layers(self) -> int:
        return self.bert.config.num_hidden_layers

    @property
    def hidden_size(self) -> int:
        return self.bert.config.hidden_size

    @property
    def max_positions(self) -> int:
        return self.bert.config.max_position_embeddings

    def set_fine_tune(self, fine_tune: bool) -> None:
        self.fine_tune = fine_tune
        for p in self.bert.parameters():
            p.requires_grad_(fine_tune)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.bert.parameters() if p.requires_grad]

    def state_snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.bert.state_dict().items()}

    def __call__(self, token_ids: torch.Tensor, segment_ids: torch.Tensor,
                 attention_mask: torch.Tensor, dropout_active: bool = False) -> EncoderOutput:
        self.bert.train(dropout_active)
        out = self.bert(input_ids=token_ids, token_type_ids=segment_ids,
                        attention_mask=attention_mask, output_hidden_states=True)
        # hidden_states[0] is the embedding layer, [l] the output of layer l
        for layer, h in enumerate(out.hidden_states):
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation at encoder layer {layer}")
        last = out.last_hidden_state
        return EncoderOutput(last, last[:, 0])


def load_encoder(config: EncoderConfig) -> EncoderHandle:
    path = Path(config.checkpoint_id)
    if not (path / "config.json").is_file():
        raise LoadError(f"no encoder checkpoint at {path} (config.json missing)")
    try:
        bert, info = BertModel.from_pretrained(
            str(path), hidden_dropout_prob=config.dropout_rate, add_pooling_layer=False,
            output_loading_info=True)
    except Exception as exc:  # safetensors / json / torch errors all mean a bad checkpoint
        raise LoadError(f"cannot load encoder from {path}: {exc}") from exc
    missing = sorted(k for k in info["missing_keys"] if not k.startswith("pooler."))
    if missing or info.get("mismatched_keys"):
        raise LoadError(f"incomplete encoder checkpoint {path}: missing {missing[:5]}"
                        f"{'...' if len(missing) > 5 else ''}, "
                        f"mismatched {sorted(info.get('mismatched_keys') or [])[:5]}")
    found = (bert.config.num_hidden_layers, bert.config.num_attention_heads,
             bert.config.hidden_size)
    expected = (config.num_layers, config.num_heads, config.hidden_size)
    if found != expected:
        raise LoadError(f"encoder dimension mismatch: expected (layers, heads, hidden)="
                        f"{expected}, found {found}")
    return EncoderHandle(bert, config)


def make_random_checkpoint(directory: Union[str, Path], vocab_path: Union[str, Path], *,
                           num_layers: int = 2, num_heads: int = 2, hidden_size: int = 32,
                           intermediate_size: int = 64, max_positions: int = 128,
                           seed: int = 0) -> Path:
    """Write a randomly initialised BERT checkpoint (with vocabulary) to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab_size = sum(1 for line in Path(vocab_path).read_text(encoding="utf-8").splitlines())
    torch.manual_seed(seed)
    bert = BertModel(BertConfig(vocab_size=vocab_size, hidden_size=hidden_size,
                                num_hidden_layers=num_layers, num_attention_heads=num_heads,
                                intermediate_size=intermediate_size,
                                max_position_embeddings=max_positions),
                     add_pooling_layer=False)
    bert.save_pretrained(str(directory))
    if Path(vocab_path).resolve() != (directory / VOCAB_FILE).resolve():
        shutil.copyfile(vocab_path, directory / VOCAB_FILE)
    return directory


class ClassifierHead(nn.Module):
    """``P = softmax(W^T dropout(h_cls) + b)`` with ``W`` of shape [hidden, K]."""

    def __init__(self, hidden_size: int, label_map: Mapping[str, int], dropout: float = 0.1,
                 seed: Optional[int] = None, init_std: float = 0.02,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        k = len(label_map)
        if sorted(label_map.values()) != list(range(k)):
            raise ContractError(f"label map ids must be 0..K-1, got {dict(label_map)}")
        self.label_map = dict(label_map)
        self.labels = [lab for lab, _ in sorted(label_map.items(), key=lambda kv: kv[1])]
        self.dropout_rate = dropout
        gen = torch.Generator().manual_seed(seed if seed is not None else 0)
        self.W = nn.Parameter(torch.randn(hidden_size, k, generator=gen, dtype=dtype) * init_std)
        self.b = nn.Parameter(torch.zeros(k, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.b.shape[0]

    def logits(self, h_cls: torch.Tensor, dropout_active: bool = False) -> torch.Tensor:
        h = nn.functional.dropout(h_cls, self.dropout_rate, training=dropout_active)
        return h @ self.W + self.b

    def forward(self, h_cls: torch.Tensor, dropout_active: bool = False) -> torch.Tensor:
        return torch.softmax(self.logits(h_cls, dropout_active), dim=-1)


def collate(examples: Sequence[EncodedExample]) -> dict[str, torch.Tensor]:
    return {
        "token_ids": torch.tensor([e.token_ids for e in examples], dtype=torch.long),
        "segment_ids": torch.tensor([e.segment_ids for e in examples], dtype=torch.long),
        "attention_mask": torch.tensor([e.attention_mask for e in examples], dtype=torch.long),
        "labels": torch.tensor([e.label_id for e in examples], dtype=torch.long),
    }


def forward_batch(encoder: EncoderHandle, head: ClassifierHead,
                  examples: Sequence[EncodedExample], dropout_active: bool = False) -> torch.Tensor:
    """Class probabilities, shape [len(examples), K]."""
    batch = collate(examples)
    if batch["token_ids"].shape[1] > encoder.max_positions:
        raise ContractError(f"sequence length {batch['token_ids'].shape[1]} exceeds the "
                            f"encoder's {encoder.max_positions} positions")
    # a frozen encoder is a fixed feature extractor: no dropout inside it
    out = encoder(batch["token_ids"], batch["segment_ids"], batch["attention_mask"],
                  dropout_active=dropout_active and encoder.fine_tune)
    probs = head(out.cls_state.to(head.W.dtype), dropout_active)
    if not torch.isfinite(probs).all():
        raise NumericError(f"non-finite probabilities after the classifier head "
                           f"(layer {encoder.num_layers + 1})")
    return probs


def forward(encoder: EncoderHandle, head: ClassifierHead, example: EncodedExample,
            dropout_active: bool = False) -> np.ndarray:
    with torch.no_grad():
        return forward_batch(encoder, head, [example], dropout_active)[0].double().numpy()


def predict_proba(encoder: EncoderHandle, head: ClassifierHead,
                  examples: Sequence[EncodedExample], batch_size: int = 64) -> np.ndarray:
    """Dropout-free probabilities for many examples, shape [N, K]."""
    out = []
    with torch.no_grad():
        for s in range(0, len(examples), batch_size):
            out.append(forward_batch(encoder, head, examples[s:s + batch_size]).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, head.num_classes))


def loss_and_grads(probs: torch.Tensor, gold: Union[int, Sequence[int], torch.Tensor],
                   parameters: Iterable[torch.Tensor]) -> tuple[float, list[torch.Tensor]]:
    """Mean ``-log P[gold]`` and its gradient with respect to ``parameters``.

    ``probs`` is [K] or [batch, K] and must still be attached to the graph.
    """
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    gold = torch.as_tensor(gold, dtype=torch.long).reshape(-1)
    k = probs.shape[-1]
    if gold.shape[0] != probs.shape[0]:
        raise ContractError(f"{gold.shape[0]} gold labels for {probs.shape[0]} rows")
    if ((gold < 0) | (gold >= k)).any():
        raise ContractError(f"gold label ids {gold.tolist()} outside [0, {k})")
    loss = -torch.log(probs.gather(1, gold[:, None])).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    params = list(parameters)
    grads = torch.autograd.grad(loss, params, allow_unused=True) if params else ()
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return loss.item(), grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(encoder: EncoderHandle, head: ClassifierHead, tok: TokenizerHandle,
                    destination: Union[str, Path], *, extra: Optional[dict] = None,
                    probe: Optional[Sequence[EncodedExample]] = None) -> dict:
    """Write encoder weights, head weights, vocabulary and a JSON manifest.

    With ``probe`` the dropout-free outputs on those examples are stored so a
    later :func:`verify_probe` can confirm the round trip.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    encoder.bert.save_pretrained(str(dest / ENCODER_DIR))
    save_file({"W": head.W.detach().contiguous(), "b": head.b.detach().contiguous()},
              str(dest / HEAD_FILE))
    tok.save_vocab(dest)
    if probe:
        probs = predict_proba(encoder, head, probe)
        (dest / PROBE_FILE).write_text(json.dumps({
            "token_ids": [list(e.token_ids) for e in probe],
            "segment_ids": [list(e.segment_ids) for e in probe],
            "attention_mask": [list(e.attention_mask) for e in probe],
            "probabilities": probs.tolist(),
        }), encoding="utf-8")

    enc_cfg = asdict(encoder.config)
    enc_cfg["fine_tune"] = encoder.fine_tune
    manifest = {
        "encoder_config": enc_cfg,
        "label_map": head.label_map,
        "head_dropout": head.dropout_rate,
        "head_dtype": str(head.W.dtype).replace("torch.", ""),
        "max_sequence_length": tok.max_sequence_length,
        "fine_tune": encoder.fine_tune,
        "dropout_rate": encoder.config.dropout_rate,
        **(extra or {}),
    }
    parts = [p for p in CHECKPOINT_PARTS if p != MANIFEST]
    if probe:
        parts.append(PROBE_FILE)
    manifest["files"] = {p: _sha256(dest / p) for p in parts}
    manifest["fingerprint"] = hashlib.sha256(
        json.dumps(manifest["files"], sort_keys=True).encode()).hexdigest()[:16]
    (dest / MANIFEST).write_text(json.dumps(manifest, ensure_ascii=False, indent=2,
                                            sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_checkpoint(source: Union[str, Path]
                    ) -> tuple[EncoderHandle, ClassifierHead, TokenizerHandle, dict]:
    src = Path(source)
    missing = [p for p in CHECKPOINT_PARTS if not (src / p).is_file()]
    if missing:
        raise LoadError(f"checkpoint {src} is incomplete; missing {missing}")
    try:
        manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"corrupt manifest in {src}: {exc}") from exc
    absent = [k for k in MANIFEST_KEYS if k not in manifest]
    if absent:
        raise LoadError(f"manifest in {src} lacks {absent}")
    for name, digest in manifest.get("files", {}).items():
        if (src / name).is_file() and _sha256(src / name) != digest:
            raise LoadError(f"checkpoint file {name} does not match its manifest digest")

    enc_cfg = dict(manifest["encoder_config"])
    enc_cfg["checkpoint_id"] = str(src / ENCODER_DIR)
    encoder = load_encoder(EncoderConfig(**enc_cfg))
    tensors = load_file(str(src / HEAD_FILE))
    W, b = tensors["W"], tensors["b"]
    label_map = manifest["label_map"]
    if W.shape != (encoder.hidden_size, len(label_map)) or b.shape != (len(label_map),):
        raise LoadError(f"head shape W{tuple(W.shape)} b{tuple(b.shape)} does not fit hidden "
                        f"size {encoder.hidden_size} and {len(label_map)} labels")
    head = ClassifierHead(encoder.hidden_size, label_map, manifest["head_dropout"], dtype=W.dtype)
    with torch.no_grad():
        head.W.copy_(W)
        head.b.copy_(b)
    tok = TokenizerHandle.from_vocab_file(src / VOCAB_FILE, manifest["max_sequence_length"])
    return encoder, head, tok, manifest


def verify_probe(source: Union[str, Path]) -> float:
    """Max absolute difference between stored and recomputed probe outputs."""
    src = Path(source)
    if not (src / PROBE_FILE).is_file():
        raise LoadError(f"checkpoint {src} has no probe batch")
    encoder, head, _, _ = load_checkpoint(src)
    probe = json.loads((src / PROBE_FILE).read_text(encoding="utf-8"))
    examples = [EncodedExample(tuple(t), tuple(s), tuple(a), 0, ())
                for t, s, a in zip(probe["token_ids"], probe["segment_ids"],
                                   probe["attention_mask"])]
    now = predict_proba(encoder, head, examples)
    before = np.asarray(probe["probabilities"])
    return float(np.max(np.abs(now - before))) if before.size else 0.0
