"""Command-line entry points: preprocess, pretrain, finetune, evaluate, treesim.

Every command is deterministic given its inputs and --seed, writes its
effective configuration beside its outputs, and exits nonzero on any error
path.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import reporting
from .config import RunConfig, load_config, save_config
from .corpus import (
    AnnotationParseError,
    CleaningConfig,
    Vocabulary,
    assemble_example,
    build_vocabulary,
    clean_corpus,
    load_corpus,
    parse_annotation_string,
)
from .finetune import (
    FinetuneConfig,
    IntentHead,
    evaluate_e2e,
    evaluate_intent,
    finetune_e2e,
    finetune_intent,
    grid_search,
    load_e2e_dataset,
    load_intent_corpus,
)
from .metrics import EvalReport, joint_goal_accuracy
from .model import UnifiedDialogModel
from .objectives import (
    PretrainHeads,
    StepRecord,
    make_optimizer,
    train,
)
from .semtree import (
    build_semantic_tree,
    canonicalize,
    similarity_coefficient,
    tree_edit_distance,
)

logger = logging.getLogger("todflow")


class CommandError(RuntimeError):
    pass


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    offensive = frozenset()
    if args.offensive_words:
        words_file = _require_file(args.offensive_words, "offensive-word list")
        offensive = frozenset(
            w.strip().lower() for w in words_file.read_text().splitlines() if w.strip()
        )
    cleaning = CleaningConfig(offensive_words=offensive, replacement=args.replacement)

    all_cleaned = []
    report_blob = {}
    for source, path in (("labeled", args.labeled), ("unlabeled", args.unlabeled)):
        if not path:
            continue
        in_path = _require_file(path, f"{source} corpus")
        dialogs = load_corpus(in_path, source)
        cleaned, report = clean_corpus(dialogs, cleaning)
        out_path = out_dir / f"{source}.jsonl"
        with open(out_path, "w", encoding="utf-8") as fh:
            for d in cleaned:
                fh.write(json.dumps(_dialog_record(d)) + "\n")
        report_blob[source] = report.to_dict()
        print(f"{source}: {len(dialogs)} read, {len(cleaned)} kept -> {out_path}")
        print(report.summary())
        all_cleaned.extend(cleaned)

    if not all_cleaned:
        raise CommandError("no dialogs survived preprocessing (or no inputs given)")

    vocab = build_vocabulary(all_cleaned, min_freq=args.min_freq)
    vocab_path = out_dir / "vocab.json"
    with open(vocab_path, "w", encoding="utf-8") as fh:
        json.dump(vocab.to_dict(), fh)
    report_path = out_dir / "cleaning_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_blob, fh, indent=2)
    with open(out_dir / "preprocess_config.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "labeled": args.labeled,
                "unlabeled": args.unlabeled,
                "min_freq": args.min_freq,
                "replacement": args.replacement,
                "offensive_words": args.offensive_words,
            },
            fh,
            indent=2,
        )
    print(f"vocabulary: {len(vocab)} entries -> {vocab_path}")
    return 0


def _dialog_record(dialog) -> dict:
    turns = []
    for t in dialog.turns:
        rec = {"speaker": t.speaker, "text": t.text}
        if t.annotations is not None:
            rec["annotations"] = [
                {
                    "domain": a.domain,
                    "intent": a.intent,
                    "slots": [{"slot": s, "value": v} for s, v in a.slots],
                }
                for a in t.annotations
            ]
        turns.append(rec)
    return {"dialog_id": dialog.dialog_id, "turns": turns}


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def _load_corpora(config: RunConfig) -> tuple[list, list, Vocabulary | None]:
    data = config.data
    labeled_dialogs = []
    unlabeled_dialogs = []
    if data.labeled_path:
        labeled_dialogs = load_corpus(_require_file(data.labeled_path, "labeled corpus"), "labeled")
    if data.unlabeled_path:
        unlabeled_dialogs = load_corpus(
            _require_file(data.unlabeled_path, "unlabeled corpus"), "unlabeled"
        )
    if not labeled_dialogs and not unlabeled_dialogs:
        raise CommandError("config names no labeled_path or unlabeled_path")

    vocab = None
    if data.vocab_path:
        with open(_require_file(data.vocab_path, "vocabulary")) as fh:
            vocab = Vocabulary.from_dict(json.load(fh))
    return labeled_dialogs, unlabeled_dialogs, vocab


def _assemble_all(dialogs, vocab, limits):
    return [
        assemble_example(d, k, vocab, limits)
        for d in dialogs
        for k in range(1, d.num_pairs + 1)
    ]


def cmd_pretrain(args) -> int:
    config = load_config(_require_file(args.config, "config")) if args.config else RunConfig()
    if args.seed is not None:
        config.training.seed = args.seed
    if args.out:
        config.output_dir = args.out
    if args.labeled:
        config.data.labeled_path = args.labeled
    if args.unlabeled:
        config.data.unlabeled_path = args.unlabeled
    if args.steps is not None:
        config.training.steps = args.steps

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled_dialogs, unlabeled_dialogs, vocab = _load_corpora(config)

    torch.manual_seed(config.training.seed)
    start_step = 0
    if args.resume:
        loaded = ckpt.load_checkpoint(_require_file(args.resume, "checkpoint"))
        vocab = loaded.vocab  # checkpoint vocabulary is authoritative
        model = loaded.build_model()
        heads = loaded.build_heads()
        optimizer = make_optimizer(model, heads, config.training)
        if loaded.optimizer_state is not None:
            optimizer.load_state_dict(loaded.optimizer_state)
        start_step = loaded.step
        config.model = model.config
    else:
        if vocab is None:
            vocab = build_vocabulary(
                labeled_dialogs + unlabeled_dialogs, config.data.min_freq
            )
        config.model.vocab_size = len(vocab)
        model = UnifiedDialogModel(config.model)
        heads = PretrainHeads(config.model.hidden_dim, config.model.vocab_size)
        optimizer = make_optimizer(model, heads, config.training)

    labeled = _assemble_all(labeled_dialogs, vocab, config.data.limits)
    unlabeled = _assemble_all(unlabeled_dialogs, vocab, config.data.limits)
    save_config(config, out_dir / "config.json")

    log_path = out_dir / "training_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()

    def on_step(record: StepRecord):
        reporting.append_jsonl(record.to_dict(), log_path)
        every = config.training.checkpoint_every
        if every and (record.step + 1) % every == 0:
            ckpt.save_checkpoint(
                out_dir / f"checkpoint_step{record.step + 1}.pt",
                model, vocab, heads, optimizer, step=record.step + 1,
            )
        if (record.step + 1) % 50 == 0 or record.step == start_step:
            logger.info(
                "step %d [%s] joint=%.4f", record.step, record.source,
                record.losses.joint,
            )

    if config.training.steps > start_step:
        train(
            model, heads, optimizer, labeled, unlabeled, vocab,
            config.training, start_step=start_step, on_step=on_step,
            masking=config.data.masking,
        )
    ckpt.save_checkpoint(
        out_dir / "checkpoint_final.pt", model, vocab, heads, optimizer,
        step=config.training.steps,
    )
    if log_path.exists():
        reporting.plot_loss_curves(reporting.read_jsonl(log_path), out_dir / "loss_curves.png")
    print(f"final checkpoint -> {out_dir / 'checkpoint_final.pt'}")
    return 0


# ---------------------------------------------------------------------------
# finetune / evaluate
# ---------------------------------------------------------------------------


def _finetune_config(args) -> FinetuneConfig:
    cfg = FinetuneConfig()
    if args.config:
        with open(_require_file(args.config, "config")) as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(FinetuneConfig)}
        unknown = set(raw) - known
        if unknown:
            raise CommandError(f"unknown finetune config key(s): {sorted(unknown)}")
        cfg = FinetuneConfig(**raw)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write_report(report: EvalReport, out_dir: Path, figure_title: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    reporting.write_metrics_tsv(report.metrics, out_dir / "metrics.tsv")
    reporting.plot_metric_bars(report.metrics, out_dir / "metrics.png", figure_title)
    print(report.table())


def cmd_finetune(args) -> int:
    cfg = _finetune_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = ckpt.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    model = loaded.build_model()
    vocab = loaded.vocab
    data_dir = Path(args.data)

    if args.task == "intent":
        train_set = load_intent_corpus(_require_file(data_dir / "train.jsonl", "intent train set"))
        eval_set = load_intent_corpus(_require_file(data_dir / "test.jsonl", "intent test set"))
        if cfg.grid_learning_rates and cfg.grid_epochs:
            def run(lr, epochs, seed):
                trial_model = loaded.build_model()
                trial_cfg = dataclasses.replace(
                    cfg, learning_rate=lr, epochs=epochs, seed=seed,
                    grid_learning_rates=[], grid_epochs=[],
                )
                _, _, rep = finetune_intent(trial_model, vocab, train_set, eval_set, trial_cfg)
                return rep.metrics["acc"]

            lr, epochs, best, _ = grid_search(
                run, cfg.grid_learning_rates, cfg.grid_epochs, cfg.grid_seeds
            )
            print(f"grid search best: lr={lr} epochs={epochs} mean_acc={best:.4f}")
            cfg = dataclasses.replace(
                cfg, learning_rate=lr, epochs=epochs,
                grid_learning_rates=[], grid_epochs=[],
            )
        head, labels, report = finetune_intent(model, vocab, train_set, eval_set, cfg)
        ckpt.save_checkpoint(
            out_dir / "checkpoint_finetuned.pt", model, vocab,
            extra={"task": "intent", "intent_head": head.state_dict(), "labels": labels},
        )
    elif args.task == "e2e":
        train_data = load_e2e_dataset(_require_file(data_dir / "train.json", "e2e train set"))
        eval_data = load_e2e_dataset(_require_file(data_dir / "test.json", "e2e test set"))
        if cfg.grid_learning_rates and cfg.grid_epochs:
            def run(lr, epochs, seed):
                trial_model = loaded.build_model()
                trial_cfg = dataclasses.replace(
                    cfg, learning_rate=lr, epochs=epochs, seed=seed,
                    grid_learning_rates=[], grid_epochs=[],
                )
                rep = finetune_e2e(trial_model, vocab, train_data, eval_data, trial_cfg)
                return rep.metrics["comb"]

            lr, epochs, best, _ = grid_search(
                run, cfg.grid_learning_rates, cfg.grid_epochs, cfg.grid_seeds
            )
            print(f"grid search best: lr={lr} epochs={epochs} mean_comb={best:.2f}")
            cfg = dataclasses.replace(
                cfg, learning_rate=lr, epochs=epochs,
                grid_learning_rates=[], grid_epochs=[],
            )
        report = finetune_e2e(model, vocab, train_data, eval_data, cfg)
        ckpt.save_checkpoint(
            out_dir / "checkpoint_finetuned.pt", model, vocab, extra={"task": "e2e"},
        )
    else:
        raise CommandError(f"unknown finetune task {args.task!r}")

    with open(out_dir / "finetune_config.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2)
    _write_report(report, out_dir, f"finetune:{args.task}")
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_config.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"task": args.task, "checkpoint": args.checkpoint, "data": str(args.data)},
            fh, indent=2,
        )
    if args.task == "dst":
        with open(_require_file(args.data, "state file")) as fh:
            blob = json.load(fh)
        jga = joint_goal_accuracy(blob["predicted"], blob["gold"])
        report = EvalReport(task="dst_formula", metrics={"jga": jga}, dataset_id=str(args.data))
        _write_report(report, out_dir, "evaluate:dst")
        return 0

    loaded = ckpt.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    model = loaded.build_model()
    vocab = loaded.vocab
    if args.task == "e2e":
        data = load_e2e_dataset(_require_file(args.data, "e2e dataset"))
        report = evaluate_e2e(model, vocab, data)
    elif args.task == "intent":
        extra = loaded.extra or {}
        if "intent_head" not in extra:
            raise CommandError("checkpoint carries no intent head; finetune first")
        labels = list(extra["labels"])
        head = IntentHead(model.config.hidden_dim, len(labels))
        head.load_state_dict(extra["intent_head"])
        eval_set = load_intent_corpus(_require_file(args.data, "intent dataset"))
        report = evaluate_intent(model, head, labels, vocab, eval_set, str(args.data))
    else:
        raise CommandError(f"unknown evaluate task {args.task!r}")
    _write_report(report, out_dir, f"evaluate:{args.task}")
    return 0


# ---------------------------------------------------------------------------
# treesim
# ---------------------------------------------------------------------------


def cmd_treesim(args) -> int:
    if args.file:
        lines = [
            l.strip() for l in _require_file(args.file, "annotation file").read_text().splitlines()
            if l.strip()
        ]
        if len(lines) < 2:
            raise CommandError("annotation file must contain two non-empty lines")
        first, second = lines[0], lines[1]
    else:
        if args.first is None or args.second is None:
            raise CommandError("treesim needs two annotation strings or --file")
        first, second = args.first, args.second

    t1 = canonicalize(build_semantic_tree(parse_annotation_string(first)))
    t2 = canonicalize(build_semantic_tree(parse_annotation_string(second)))
    d = tree_edit_distance(t1, t2)
    f = similarity_coefficient(t1, t2)
    print(json.dumps({
        "t1_nodes": t1.size,
        "t2_nodes": t2.size,
        "distance": d,
        "similarity": round(f, 6),
    }))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="todflow",
        description="Unified task-oriented dialog model: preprocessing, "
        "pre-training, fine-tuning, evaluation and tree similarity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean corpora and build the vocabulary")
    p.add_argument("--labeled", help="labeled corpus (JSONL)")
    p.add_argument("--unlabeled", help="unlabeled corpus (JSONL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-freq", type=int, default=1, dest="min_freq")
    p.add_argument("--offensive-words", dest="offensive_words",
                   help="file with one offensive word per line")
    p.add_argument("--replacement", default="",
                   help="replacement for non-renderable characters")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="run joint pre-training")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--labeled", help="override labeled corpus path")
    p.add_argument("--unlabeled", help="override unlabeled corpus path")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a task")
    p.add_argument("--task", required=True, choices=["intent", "e2e"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="FinetuneConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or state file")
    p.add_argument("--task", required=True, choices=["intent", "e2e", "dst"])
    p.add_argument("--checkpoint", help="model checkpoint (not needed for dst)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("treesim", help="compare two annotation strings")
    p.add_argument("first", nargs="?", help="annotation string, e.g. 'restaurant-inform(food=indian)'")
    p.add_argument("second", nargs="?")
    p.add_argument("--file", help="file with one annotation string per line (first two used)")
    p.set_defaults(func=cmd_treesim)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AnnotationParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
