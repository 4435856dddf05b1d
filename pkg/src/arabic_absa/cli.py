"""Command-line entry point: ``absa <command> ...``.

Every command writes its artifacts plus a ``manifest.json`` into ``--output``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import baseline as baseline_mod
from .corpus import DATASETS, PARSERS, concat, read_jsonl, stats, write_jsonl, LabeledCorpus
from .errors import AbsaError, ConfigurationError
from .report import EvalReport, consolidate, dedupe, render_table

logger = logging.getLogger("arabic_absa")

SPLIT_FLAGS = {"official": "official", "random": "random_70_10_20"}


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, data) -> Path:
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


class Run:
    """Collects what a command read and wrote, then writes the run manifest."""

    def __init__(self, command: str, output: Path, seed: Optional[int] = None):
        self.command = command
        self.output = output
        self.seed = seed
        self.config: dict = {}
        self.inputs: dict = {}
        self.outputs: list[str] = []
        self.started = time.time()
        output.mkdir(parents=True, exist_ok=True)

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"input not found: {path}")
        if path.is_dir():
            for f in sorted(p for p in path.rglob("*") if p.is_file()):
                self.inputs[str(f)] = _digest(f)
        else:
            self.inputs[str(path)] = _digest(path)
        return path

    def wrote(self, path) -> Path:
        path = Path(path)
        self.outputs.append(str(path))
        return path

    def finish(self) -> dict:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise AbsaError(f"declared artifacts were not written: {missing}")
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_seconds": round(time.time() - self.started, 3),
            "seed": self.seed,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        _dump(self.output / "manifest.json", manifest)
        return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _parse_inputs(values: Sequence[str]) -> dict:
    sources: dict = {}
    for value in values:
        tag, sep, path = value.partition("=")
        if not sep:
            tag, path = None, value
        elif tag not in ("train", "dev", "test"):
            raise ConfigurationError(f"--input prefix must be train=, dev= or test=, got {tag!r}")
        if tag in sources:
            raise ConfigurationError(f"two inputs for split {tag!r}")
        sources[tag] = path
    return sources


def cmd_ingest(args) -> int:
    run = Run("ingest", Path(args.output))
    sources = _parse_inputs(args.input)
    run.config = {"dataset": args.dataset, "inputs": {str(k): v for k, v in sources.items()}}
    parser = PARSERS[args.dataset]
    parts = []
    for tag, path in sources.items():
        with open(run.read(path), "rb") as fh:
            parts.append(parser(fh, split_tag=tag))
    corpus = concat(*parts)
    out = run.output
    write_jsonl(corpus, run.wrote(out / "instances.jsonl"))
    for tag in ("train", "dev", "test"):
        subset = corpus.subset(tag)
        if subset:
            write_jsonl(LabeledCorpus(corpus.dataset_id, tuple(subset), (tag,) * len(subset),
                                      corpus.label_inventory), run.wrote(out / f"{tag}.jsonl"))
    st = stats(corpus)
    _dump(run.wrote(out / "stats.json"), st.to_json())
    run.wrote(out / "stats.txt").write_text(st.render() + "\n", encoding="utf-8")
    report = corpus.report.to_json()
    _dump(run.wrote(out / "mismatches.json"), report["mismatches"])
    _dump(run.wrote(out / "skipped.json"), report["skipped_comments"])
    run.finish()
    print(st.render())
    return 0


def cmd_baseline(args) -> int:
    run = Run("baseline", Path(args.output))
    train = read_jsonl(run.read(args.train))
    test = read_jsonl(run.read(args.test))
    if train.dataset_id != test.dataset_id:
        raise ConfigurationError(
            f"train is {train.dataset_id} but test is {test.dataset_id}")
    model = baseline_mod.fit(list(train.instances))
    accuracy = baseline_mod.evaluate_baseline(model, list(test.instances))
    run.config = {"baseline_definition": baseline_mod.BASELINE_DEFINITION,
                  "aspect_matching": "exact after NFC",
                  "tie_break": "global frequency, then positive > negative > neutral > conflict"}
    notes = baseline_mod.BASELINE_DEFINITION
    if train.dataset_id == "hotels":
        notes += "; the published hotels baseline is an n-gram SVM, not this rule"
    report = EvalReport(
        model_name="majority-baseline", dataset_id=train.dataset_id, test_accuracy=accuracy,
        per_class=baseline_mod.per_class_counts(model, test.instances), config=run.config,
        split_mode=None, notes=notes)
    out = run.output
    run.wrote(out / "baseline_model.json").write_text(model.dumps() + "\n", encoding="utf-8")
    report.save(run.wrote(out / "report.json"))
    run.finish()
    print(f"{train.dataset_id}\tmajority-baseline\taccuracy={accuracy:.4f}")
    return 0


def _train_config(args, corpus_dataset: Optional[str]):
    from .trainer import TrainConfig

    valid = TrainConfig.keys()
    values: dict = {}
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = sorted(set(data) - set(valid))
        if unknown:
            raise ConfigurationError(f"invalid config keys {unknown}; valid keys: {valid}")
        values.update(data)
    overrides = {
        "dataset_id": args.dataset, "input_mode": args.mode, "seed": args.seed,
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
        "head_dropout": args.dropout, "checkpoint_id": args.checkpoint,
        "max_sequence_length": args.max_length, "selection": args.selection,
        "split_mode": SPLIT_FLAGS.get(args.split) if args.split else None,
        "fine_tune": False if args.freeze else True if args.finetune else None,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    values.setdefault("dataset_id", corpus_dataset)
    values.setdefault("seed", 0)
    if not values.get("checkpoint_id"):
        raise ConfigurationError("no encoder checkpoint given (--checkpoint or config key "
                                 "checkpoint_id)")
    return TrainConfig(**values).resolved()


def cmd_train(args) -> int:
    from .trainer import train

    run = Run("train", Path(args.output))
    corpus = read_jsonl(run.read(args.input))
    config = _train_config(args, corpus.dataset_id)
    run.read(config.checkpoint_id)
    run.seed = config.seed
    run.config = config.to_json()
    model, report = train(corpus, config)
    out = run.output
    model.save(run.wrote(out / "checkpoint"))
    report.save(run.wrote(out / "report.json"))
    run.wrote(out / "dev_curve.csv").write_text(report.dev_curve_csv(), encoding="utf-8")
    run.finish()
    print(f"{report.dataset_id}\t{report.model_name}\ttest_accuracy={report.test_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import TrainedModel, evaluation_report

    run = Run("eval", Path(args.output))
    model = TrainedModel.load(run.read(args.model))
    if args.mode:
        model.input_mode = args.mode
    corpus = read_jsonl(run.read(args.input))
    instances = corpus.subset(args.split_tag) if args.split_tag else list(corpus.instances)
    run.config = {"split_tag": args.split_tag, "input_mode": model.input_mode,
                  "train_config": model.config}
    run.seed = model.config.get("seed")
    report = evaluation_report(model, instances, split_mode=args.split_tag)
    report.save(run.wrote(run.output / "report.json"))
    run.finish()
    print(f"{report.dataset_id}\t{report.model_name}\taccuracy={report.test_accuracy:.4f}")
    return 0


def cmd_compare(args) -> int:
    from .trainer import compare_finetune

    run = Run("compare", Path(args.output))
    corpus = read_jsonl(run.read(args.input))
    config = _train_config(args, corpus.dataset_id)
    run.read(config.checkpoint_id)
    run.seed = config.seed
    run.config = config.to_json()
    result = compare_finetune(corpus, config)
    out = run.output
    result.finetuned.save(run.wrote(out / "report_finetuned.json"))
    result.frozen.save(run.wrote(out / "report_frozen.json"))
    run.wrote(out / "comparison.txt").write_text(result.table + "\n", encoding="utf-8")
    run.finish()
    print(result.table)
    return 0


def _read_cases(path: Path) -> list[tuple[str, str]]:
    cases = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            rec = json.loads(line)
            cases.append((rec["sentence"], rec["aspect"]))
        else:
            sentence, sep, aspect = line.partition("\t")
            if not sep:
                raise ConfigurationError(f"{path}:{lineno}: expected sentence<TAB>aspect")
            cases.append((sentence, aspect))
    return cases


def cmd_predict(args) -> int:
    from .trainer import TrainedModel, predict_cases

    run = Run("predict", Path(args.output))
    model = TrainedModel.load(run.read(args.model))
    cases = _read_cases(run.read(args.cases))
    run.config = {"input_mode": args.mode or model.input_mode}
    run.seed = model.config.get("seed")
    results = predict_cases(model, cases, args.mode)
    lines = []
    for (sentence, aspect), label, probs in results:
        dist = {lab: round(p, 6) for lab, p in zip(model.head.labels, probs)}
        lines.append(json.dumps({"sentence": sentence, "aspect": aspect, "label": label,
                                 "probabilities": dist}, ensure_ascii=False))
    run.wrote(run.output / "predictions.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8")
    run.finish()
    for line in lines:
        print(line)
    return 0


def cmd_report(args) -> int:
    run = Run("report", Path(args.output))
    reports = [EvalReport.load(run.read(p)) for p in args.reports]
    versions = {r.schema_version for r in reports}
    if len(versions) > 1:
        raise ConfigurationError(f"reports mix schema versions {sorted(versions)}")
    reports = dedupe(reports)
    table = consolidate(reports)
    out = run.output
    _dump(run.wrote(out / "table.json"), table)
    text = render_table(table)
    run.wrote(out / "table.txt").write_text(text + "\n", encoding="utf-8")
    if args.curves:
        for r in reports:
            name = f"curve_{r.model_name}_{r.dataset_id}_{r.fingerprint}.csv"
            run.wrote(out / name).write_text(r.dev_curve_csv(), encoding="utf-8")
    run.finish()
    print(text)
    return 0


# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--input", required=True, help="instances JSONL from `ingest`")
    p.add_argument("--output", required=True)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--mode", choices=("single", "pair"))
    p.add_argument("--split", choices=tuple(SPLIT_FLAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float, help="dropout on the classifier input")
    p.add_argument("--checkpoint", help="pretrained encoder directory (HF format + vocab.txt)")
    p.add_argument("--max-length", type=int)
    p.add_argument("--selection", choices=("last_epoch", "best_dev"))
    tune = p.add_mutually_exclusive_group()
    tune.add_argument("--freeze", action="store_true", help="keep encoder weights fixed")
    tune.add_argument("--finetune", action="store_true", help="update encoder weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse an XML corpus into JSONL + statistics")
    p.add_argument("--dataset", required=True, choices=DATASETS)
    p.add_argument("--input", required=True, action="append",
                   help="XML file, optionally prefixed with train= / test=; repeatable")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("baseline", help="majority-polarity baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train", help="fine-tune the BERT classifier")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="fine-tuned vs. frozen encoder")
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--split-tag", choices=("train", "dev", "test"))
    p.add_argument("--mode", choices=("single", "pair"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="label free-text (sentence, aspect) cases")
    p.add_argument("--model", required=True)
    p.add_argument("--cases", required=True,
                   help='JSONL with "sentence"/"aspect" keys, or sentence<TAB>aspect lines')
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("single", "pair"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="consolidate EvalReports into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output", required=True)
    p.add_argument("--curves", action="store_true", help="also write dev curves as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (AbsaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
