"""Evaluation metrics: corpus BLEU, entity/request success rates, state accuracy.

All rates are returned in [0, 1]; BLEU and the combined scores follow the
usual 0-100 scale.  The combined score is (inform + success) * 0.5 + bleu
with the rate arguments expressed consistently (x100 alongside BLEU).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

# Smoothing constant substituted for zero clipped n-gram counts; orders with
# no n-grams at all (hypotheses shorter than n) are skipped.
BLEU_EPSILON = 1e-10
BLEU_MAX_ORDER = 4

_WS_RE = re.compile(r"\s+")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[str], references: list[str]) -> float:
    """Corpus-level BLEU-4 with uniform weights and brevity penalty, in [0, 100].

    Zero clipped counts are smoothed with BLEU_EPSILON; an empty hypothesis
    contributes zero matches and zero length.
    """
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must be nonempty and aligned")
    clipped = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_toks = hyp.split()
        ref_toks = ref.split()
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp_toks, n)
            ref_counts = _ngrams(ref_toks, n)
            totals[n - 1] += sum(hyp_counts.values())
            clipped[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(BLEU_MAX_ORDER):
        if totals[n] == 0:
            continue  # no n-grams of this order anywhere: skip it
        p = clipped[n] / totals[n] if clipped[n] > 0 else BLEU_EPSILON / totals[n]
        log_precision += math.log(p) / BLEU_MAX_ORDER
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# Goal-based dialog success
# ---------------------------------------------------------------------------


@dataclass
class DialogGoal:
    """What the user wanted: entity constraints plus the slots they asked for."""

    constraints: dict[str, str] = field(default_factory=dict)
    requested: frozenset[str] = frozenset()

    @classmethod
    def from_dict(cls, data: dict) -> "DialogGoal":
        return cls(
            constraints={str(k): str(v) for k, v in data.get("constraints", {}).items()},
            requested=frozenset(str(s) for s in data.get("requested", [])),
        )

    def to_dict(self) -> dict:
        return {
            "constraints": dict(self.constraints),
            "requested": sorted(self.requested),
        }


def slot_placeholder(slot: str) -> str:
    """Delexicalized stand-in token for a slot value inside responses."""
    return f"value_{slot}"


def matching_entities(database: list[dict], constraints: dict[str, str]) -> list[dict]:
    return [
        e
        for e in database
        if all(str(e.get(slot, "")).lower() == value.lower()
               for slot, value in constraints.items())
    ]


def inform_success(
    predicted_responses: list[list[str]],
    goals: list[DialogGoal],
    database: list[dict],
) -> tuple[float, float]:
    """Entity-offer and request-coverage rates over dialogs, each in [0, 1].

    A dialog informs when some predicted response names an entity satisfying
    the goal constraints; it succeeds when it informs and every requested
    slot's placeholder appears somewhere in its predicted responses.
    """
    if len(predicted_responses) != len(goals):
        raise ValueError("one goal per dialog required")
    if not goals:
        return 0.0, 0.0
    informed = 0
    succeeded = 0
    for responses, goal in zip(predicted_responses, goals):
        text = " ".join(responses).lower()
        tokens = set(text.split())
        names = {str(e["name"]).lower() for e in matching_entities(database, goal.constraints)}
        ok_inform = bool(names & tokens)
        ok_success = ok_inform and all(
            slot_placeholder(slot) in tokens for slot in goal.requested
        )
        informed += ok_inform
        succeeded += ok_success
    return informed / len(goals), succeeded / len(goals)


# ---------------------------------------------------------------------------
# State accuracy
# ---------------------------------------------------------------------------


def _normalize_state(state: dict) -> dict[str, str]:
    out = {}
    for slot, value in state.items():
        key = _WS_RE.sub(" ", str(slot).strip().lower())
        out[key] = _WS_RE.sub(" ", str(value).strip().lower())
    return out


def joint_goal_accuracy(predicted: list[dict], gold: list[dict]) -> float:
    """Fraction of turns whose entire predicted slot-value map matches gold.

    Values are compared case- and whitespace-normalized; two empty maps match.
    """
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold states must align per turn")
    if not gold:
        return 0.0
    correct = sum(
        _normalize_state(p) == _normalize_state(g) for p, g in zip(predicted, gold)
    )
    return correct / len(gold)


def turn_accuracy(predicted: list, gold: list) -> float:
    if len(predicted) != len(gold):
        raise ValueError("predictions and labels must align")
    if not gold:
        return 0.0
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)


# ---------------------------------------------------------------------------
# Combined scores
# ---------------------------------------------------------------------------


def combined_score(inform: float, success: float, bleu_score: float) -> float:
    """(inform + success) * 0.5 + bleu, all on the same x100 scale."""
    return (inform + success) * 0.5 + bleu_score


def combined_score_camrest(match: float, succ_f1: float, bleu_score: float) -> float:
    """(match + succ_f1) * 0.5 + bleu for match/success-F1 style benchmarks."""
    return (match + succ_f1) * 0.5 + bleu_score


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


EVAL_TASKS = ("intent", "dst_formula", "e2e")


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    dataset_id: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in EVAL_TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "e2e":
            expected = combined_score(
                self.metrics.get("inform", 0.0),
                self.metrics.get("success", 0.0),
                self.metrics.get("bleu", 0.0),
            )
            got = self.metrics.get("comb")
            if got is None or abs(got - expected) > 1e-9:
                raise ValueError(
                    f"combined score {got} does not equal (inform+success)*0.5+bleu"
                    f" = {expected}"
                )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": dict(self.metrics),
            "dataset_id": self.dataset_id,
            "config": dict(self.config),
        }

    def table(self) -> str:
        width = max(len(k) for k in self.metrics) if self.metrics else 6
        lines = [f"task: {self.task}   dataset: {self.dataset_id}"]
        for name in sorted(self.metrics):
            lines.append(f"  {name.ljust(width)}  {self.metrics[name]:.4f}")
        return "\n".join(lines)
