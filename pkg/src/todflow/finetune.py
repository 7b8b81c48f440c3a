"""Downstream adaptation: intent classification and end-to-end generation.

Intent prediction trains a linear head on the pooled query vector, touching
only the encoding and understanding stages; the policy prompt and generation
head stay untouched.  End-to-end fine-tuning keeps the whole stage pipeline
and trains response generation (with an optional policy-matching auxiliary),
then scores decoded responses with BLEU / inform / success / combined.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (
    BOS,
    BOU,
    EOS,
    EOU,
    Dialog,
    Limits,
    ROLE_IDS,
    SYSTEM,
    USER,
    TrainingExample,
    Turn,
    Vocabulary,
    assemble_example,
    tokenize,
)
from .metrics import (
    DialogGoal,
    EvalReport,
    bleu,
    combined_score,
    inform_success,
    turn_accuracy,
)
from .model import DecodeStrategy, ForwardMode, UnifiedDialogModel, decode_response
from .objectives import derive_seed, policy_semantic_loss, response_generation_loss

logger = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    epochs: int = 120
    batch_size: int = 8
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    seed: int = 0
    head_only: bool = False
    policy_weight: float = 1.0
    decode_max_len: int = 48
    train_fraction: float = 1.0  # subsample for few-shot style runs
    grid_learning_rates: list[float] = field(default_factory=list)
    grid_epochs: list[int] = field(default_factory=list)
    grid_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


# ---------------------------------------------------------------------------
# Intent prediction
# ---------------------------------------------------------------------------


@dataclass
class IntentExample:
    text: str
    label: str


class IntentHead(nn.Module):
    """Linear classifier over the pooled query vector."""

    def __init__(self, hidden_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, num_classes)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.linear(h)


def load_intent_corpus(path) -> list[IntentExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "text" not in rec or "label" not in rec:
                raise ValueError(f"{path} line {lineno}: need 'text' and 'label'")
            examples.append(IntentExample(text=str(rec["text"]), label=str(rec["label"])))
    return examples


def utterance_example(text: str, vocab: Vocabulary, limits: Limits | None = None) -> TrainingExample:
    """A single-utterance context example (for query-side-only tasks)."""
    limits = limits or Limits()
    words = tokenize(text)[: limits.max_context_len - 2]
    ctx = [BOU] + words + [EOU]
    resp = [BOS, EOS]  # placeholder; never attended in query mode
    return TrainingExample(
        dialog_id="utt",
        pair_index=1,
        labeled=False,
        context_tokens=vocab.encode(ctx),
        context_role_ids=[ROLE_IDS[USER]] * len(ctx),
        context_turn_ids=[0] * len(ctx),
        context_position_ids=list(range(len(ctx))),
        response_tokens=vocab.encode(resp),
        response_role_ids=[ROLE_IDS[SYSTEM]] * 2,
        response_turn_ids=[0, 0],
        response_position_ids=[0, 1],
        query_tokens=vocab.encode(words),
        response_interior=[],
    )


def _query_vectors(model, examples, vocab, dropout_seed=None):
    return model.semantic_vector(
        examples, ForwardMode.QUERY, vocab.pad_id, dropout_seed
    )


def finetune_intent(
    model: UnifiedDialogModel,
    vocab: Vocabulary,
    train_set: list[IntentExample],
    eval_set: list[IntentExample],
    config: FinetuneConfig | None = None,
) -> tuple[IntentHead, list[str], EvalReport]:
    """Train an intent head (and by default the backbone) on pooled query vectors.

    Only the query path participates: the policy prompt and the generation
    bias receive no gradient.  Returns the head, the label inventory, and an
    accuracy report on ``eval_set``; eval labels unseen in training are
    counted wrong with a warning.
    """
    config = config or FinetuneConfig()
    rng = random.Random(config.seed)
    torch.manual_seed(derive_seed(config.seed, 7))

    if config.train_fraction < 1.0:
        keep = max(1, int(len(train_set) * config.train_fraction))
        train_set = rng.sample(train_set, keep)

    labels = sorted({ex.label for ex in train_set})
    label_to_id = {l: i for i, l in enumerate(labels)}
    head = IntentHead(model.config.hidden_dim, len(labels))

    params = list(head.parameters())
    if not config.head_only:
        params += list(model.parameters())
    optimizer = torch.optim.AdamW(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )

    cached = [(utterance_example(ex.text, vocab), label_to_id[ex.label]) for ex in train_set]
    model.train()
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(cached)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [cached[i] for i in order[start:start + config.batch_size]]
            examples = [ex for ex, _ in batch]
            target = torch.tensor([y for _, y in batch], dtype=torch.long)
            seed = derive_seed(config.seed, 11, step)
            if config.head_only:
                with torch.no_grad():
                    h = _query_vectors(model, examples, vocab, seed)
            else:
                h = _query_vectors(model, examples, vocab, seed)
            loss = F.cross_entropy(head(h), target)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1

    report = evaluate_intent(model, head, labels, vocab, eval_set)
    report.config["finetune"] = {
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "head_only": config.head_only,
        "seed": config.seed,
    }
    return head, labels, report


@torch.no_grad()
def evaluate_intent(
    model: UnifiedDialogModel,
    head: IntentHead,
    labels: list[str],
    vocab: Vocabulary,
    eval_set: list[IntentExample],
    dataset_id: str = "intent",
) -> EvalReport:
    model.eval()
    label_to_id = {l: i for i, l in enumerate(labels)}
    unseen = sorted({ex.label for ex in eval_set} - set(labels))
    if unseen:
        logger.warning("eval labels never seen in training: %s", unseen)
    predictions = []
    gold = []
    batch_size = 32
    for start in range(0, len(eval_set), batch_size):
        chunk = eval_set[start:start + batch_size]
        examples = [utterance_example(ex.text, vocab) for ex in chunk]
        logits = head(_query_vectors(model, examples, vocab))
        predictions.extend(int(i) for i in logits.argmax(dim=-1))
        gold.extend(label_to_id.get(ex.label, -1) for ex in chunk)
    acc = turn_accuracy(predictions, gold)
    return EvalReport(task="intent", metrics={"acc": acc}, dataset_id=dataset_id)


# ---------------------------------------------------------------------------
# End-to-end generation
# ---------------------------------------------------------------------------


@dataclass
class E2EDataset:
    dialogs: list[Dialog]
    goals: list[DialogGoal]
    database: list[dict]
    dataset_id: str = "e2e"


def load_e2e_dataset(path, dataset_id: str | None = None) -> E2EDataset:
    """One JSON object: {"database": [entities], "dialogs": [records with goals]}."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    dialogs = []
    goals = []
    for rec in data["dialogs"]:
        turns = [
            Turn(speaker=t["speaker"], text=t["text"]) for t in rec["turns"]
        ]
        dialogs.append(Dialog(dialog_id=rec["dialog_id"], turns=turns, source="unlabeled"))
        goals.append(DialogGoal.from_dict(rec.get("goal", {})))
    return E2EDataset(
        dialogs=dialogs,
        goals=goals,
        database=list(data.get("database", [])),
        dataset_id=dataset_id or str(path),
    )


def _dialog_examples(
    dialogs: list[Dialog], vocab: Vocabulary, limits: Limits
) -> list[TrainingExample]:
    out = []
    for d in dialogs:
        for k in range(1, d.num_pairs + 1):
            out.append(assemble_example(d, k, vocab, limits))
    return out


def finetune_e2e(
    model: UnifiedDialogModel,
    vocab: Vocabulary,
    train_data: E2EDataset,
    eval_data: E2EDataset,
    config: FinetuneConfig | None = None,
    limits: Limits | None = None,
) -> EvalReport:
    """Fine-tune generation (with optional policy matching) and score the eval split."""
    config = config or FinetuneConfig()
    limits = limits or Limits()
    rng = random.Random(config.seed)
    torch.manual_seed(derive_seed(config.seed, 13))

    dialogs = train_data.dialogs
    if config.train_fraction < 1.0:
        keep = max(1, int(len(dialogs) * config.train_fraction))
        dialogs = rng.sample(dialogs, keep)
    examples = _dialog_examples(dialogs, vocab, limits)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )

    model.train()
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            seed = derive_seed(config.seed, 19, step)
            gen = model.generation_forward(batch, vocab.pad_id, seed)
            loss = response_generation_loss(
                gen.lm_logits, [ex.response_tokens for ex in batch]
            )
            if config.policy_weight > 0:
                hr = model.semantic_vector(
                    batch, ForwardMode.RESPONSE_POSTERIOR, vocab.pad_id,
                    derive_seed(config.seed, 23, step),
                )
                ho = model.semantic_vector(
                    batch, ForwardMode.POLICY_PRIOR, vocab.pad_id,
                    derive_seed(config.seed, 29, step),
                )
                loss = loss + config.policy_weight * policy_semantic_loss(ho, hr)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1

    return evaluate_e2e(model, vocab, eval_data, config, limits)


@torch.no_grad()
def evaluate_e2e(
    model: UnifiedDialogModel,
    vocab: Vocabulary,
    data: E2EDataset,
    config: FinetuneConfig | None = None,
    limits: Limits | None = None,
    strategy: DecodeStrategy | None = None,
) -> EvalReport:
    """Decode every turn against its gold context and score the corpus."""
    config = config or FinetuneConfig()
    limits = limits or Limits()
    model.eval()
    hyps: list[str] = []
    refs: list[str] = []
    per_dialog_responses: list[list[str]] = []
    for dialog in data.dialogs:
        responses = []
        for k in range(1, dialog.num_pairs + 1):
            example = assemble_example(dialog, k, vocab, limits)
            decoded = decode_response(
                model,
                example,
                vocab.bos_id,
                vocab.eos_id,
                vocab.pad_id,
                strategy=strategy,
                max_len=config.decode_max_len,
            )
            text = " ".join(vocab.decode(decoded))
            responses.append(text)
            hyps.append(text)
            refs.append(" ".join(vocab.decode(example.response_interior)))
        per_dialog_responses.append(responses)

    bleu_score = bleu(hyps, refs)
    inform, success = inform_success(per_dialog_responses, data.goals, data.database)
    metrics = {
        "bleu": bleu_score,
        "inform": inform * 100.0,
        "success": success * 100.0,
    }
    metrics["comb"] = combined_score(metrics["inform"], metrics["success"], bleu_score)
    return EvalReport(task="e2e", metrics=metrics, dataset_id=data.dataset_id)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def grid_search(run_fn, learning_rates, epoch_choices, seeds=(0, 1, 2)):
    """Sweep (learning_rate, epochs) cells, averaging run_fn's metric over seeds.

    ``run_fn(learning_rate, epochs, seed)`` must return a scalar where higher
    is better.  Returns (best_lr, best_epochs, best_mean, all_results).
    """
    results = []
    for lr in learning_rates:
        for epochs in epoch_choices:
            scores = [run_fn(lr, epochs, seed) for seed in seeds]
            results.append((lr, epochs, sum(scores) / len(scores)))
    best = max(results, key=lambda r: r[2])
    return best[0], best[1], best[2], results
