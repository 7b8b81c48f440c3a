"""Dialog corpus ingestion, cleaning, vocabulary and example assembly.

Corpora are line-delimited JSON, one dialog per line:

    {"dialog_id": "...",
     "turns": [{"speaker": "user"|"system", "text": "...",
                "annotations": [{"domain": ..., "intent": ...,
                                 "slots": [{"slot": ..., "value": ...|null}]}]}]}

Labeled dialogs carry annotation lists (possibly empty) on their turns;
unlabeled dialogs must not carry any.  Cleaning applies six rules: dialogs
containing URLs, three-plus consecutive repeats of a word, non-English text,
markup brackets, or words from a configurable offensive list are dropped;
non-renderable characters (emoji etc.) are replaced in place.

Assembled examples concatenate the dialog history plus the current user query
into a bounded context, bracketed per utterance with [BOU]/[EOU] (user) and
[BOS]/[EOS] (system), with aligned role / turn / position id sequences.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, replace

from .semtree import SemanticTree, build_semantic_tree

logger = logging.getLogger(__name__)

PAD, UNK, MASK, BOU, EOU, BOS, EOS = SPECIAL_TOKENS = (
    "[PAD]", "[UNK]", "[MASK]", "[BOU]", "[EOU]", "[BOS]", "[EOS]",
)

USER, SYSTEM = "user", "system"
ROLE_IDS = {USER: 0, SYSTEM: 1}

_URL_RE = re.compile(r"https?://\S+|www\.\S+", re.IGNORECASE)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_WS_RE = re.compile(r"\s+")

CLEANING_RULES = (
    "url",
    "repeated_words",
    "non_english",
    "markup",
    "offensive",
    "empty_after_replacement",
)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class ActAnnotation:
    """One dialog act: domain, intent, and (slot, value) pairs; value None means unfilled."""

    domain: str
    intent: str
    slots: list[tuple[str, str | None]] = field(default_factory=list)


class AnnotationParseError(ValueError):
    """Raised on malformed annotation strings; carries the 1-based column."""

    def __init__(self, message: str, column: int):
        super().__init__(f"column {column}: {message}")
        self.column = column


def parse_annotation_string(text: str) -> list[ActAnnotation]:
    """Parse acts written as ``domain-intent(slot=value, ...)`` joined by ``;``.

    A value of ``?`` stands for an unfilled slot.  The slot list is optional:
    ``general-thank`` and ``general-thank()`` both parse to a slot-free act.
    """
    annotations = []
    offset = 0
    for segment in text.split(";"):
        stripped = segment.strip()
        if stripped:
            col = offset + segment.index(stripped[0]) + 1
            annotations.append(_parse_act_segment(stripped, col))
        offset += len(segment) + 1
    return annotations


def _parse_act_segment(segment: str, col: int) -> ActAnnotation:
    head, paren, rest = segment.partition("(")
    if paren and not rest.endswith(")"):
        raise AnnotationParseError("unclosed '('", col + len(head))
    if "-" not in head:
        raise AnnotationParseError("expected 'domain-intent'", col)
    domain, _, intent = head.partition("-")
    domain, intent = domain.strip(), intent.strip()
    if not domain or not intent:
        raise AnnotationParseError("expected 'domain-intent'", col)

    slots: list[tuple[str, str | None]] = []
    body = rest[:-1] if paren else ""
    offset = col + len(head) + 1
    for part in body.split(",") if body.strip() else []:
        slot, eq, value = part.partition("=")
        slot = slot.strip()
        if not slot or not eq:
            raise AnnotationParseError("expected 'slot=value'", offset)
        value = value.strip()
        slots.append((slot, None if value == "?" else value))
        offset += len(part) + 1
    return ActAnnotation(domain=domain, intent=intent, slots=slots)


@dataclass
class Turn:
    speaker: str
    text: str
    annotations: list[ActAnnotation] | None = None


@dataclass
class Dialog:
    dialog_id: str
    turns: list[Turn]
    source: str  # "labeled" | "unlabeled"

    @property
    def num_pairs(self) -> int:
        """Number of complete (user, system) turn pairs."""
        return len(self.turns) // 2


@dataclass
class Limits:
    max_context_len: int = 256
    max_response_len: int = 50


@dataclass
class TrainingExample:
    """Model-ready view of one dialog turn pair.

    ``context_tokens`` covers the history plus the current user query, each
    utterance wrapped in its boundary tokens; ``response_tokens`` is the
    system reply wrapped in [BOS]/[EOS].  The ``*_role/turn/position`` arrays
    align one-to-one with the respective token arrays.  ``query_tokens`` /
    ``response_interior`` hold the unbracketed word ids used as bag-of-words
    targets.  ``value_token_spans`` index located annotation-value spans
    inside the context (used for labeled span masking).
    """

    dialog_id: str
    pair_index: int
    labeled: bool
    context_tokens: list[int]
    context_role_ids: list[int]
    context_turn_ids: list[int]
    context_position_ids: list[int]
    response_tokens: list[int]
    response_role_ids: list[int]
    response_turn_ids: list[int]
    response_position_ids: list[int]
    query_tokens: list[int]
    response_interior: list[int]
    query_tree: SemanticTree | None = None
    response_tree: SemanticTree | None = None
    value_token_spans: list[tuple[int, int]] = field(default_factory=list)
    unlocated_values: int = 0


@dataclass
class MaskedExample:
    """A TrainingExample with a masked context; originals kept as loss targets."""

    base: TrainingExample
    masked_positions: tuple[int, ...]
    original_tokens: tuple[int, ...]

    def masked_context_tokens(self, mask_id: int) -> list[int]:
        tokens = list(self.base.context_tokens)
        for pos in self.masked_positions:
            tokens[pos] = mask_id
        return tokens

    def unmasked_context(self) -> list[int]:
        tokens = list(self.base.context_tokens)
        for pos, tok in zip(self.masked_positions, self.original_tokens):
            tokens[pos] = tok
        return tokens


class Vocabulary:
    """Word-level token/id map with reserved low ids for the special tokens."""

    def __init__(self, words: list[str]):
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(words)
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def bou_id(self) -> int:
        return self.token_to_id[BOU]

    @property
    def eou_id(self) -> int:
        return self.token_to_id[EOU]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    @property
    def protected_ids(self) -> frozenset[int]:
        """Ids that span masking must never touch ([UNK] is fair game)."""
        return frozenset(self.special_ids - {self.unk_id})

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def to_dict(self) -> dict:
        return {"words": self.id_to_token[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(data["words"])


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace-and-punctuation word tokens."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _parse_annotation(raw: dict) -> ActAnnotation:
    slots = []
    for s in raw.get("slots", []) or []:
        slots.append((str(s["slot"]), None if s.get("value") is None else str(s["value"])))
    return ActAnnotation(
        domain=str(raw.get("domain", "")),
        intent=str(raw.get("intent", "")),
        slots=slots,
    )


def _validate_record(record: dict, source: str) -> Dialog:
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    dialog_id = record.get("dialog_id")
    if not isinstance(dialog_id, str) or not dialog_id:
        raise ValueError("missing or empty dialog_id")
    raw_turns = record.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise ValueError("missing or empty turns")

    turns: list[Turn] = []
    for i, raw in enumerate(raw_turns):
        speaker = raw.get("speaker")
        if speaker not in ROLE_IDS:
            raise ValueError(f"turn {i}: invalid speaker {speaker!r}")
        expected = USER if i % 2 == 0 else SYSTEM
        if speaker != expected:
            raise ValueError(f"turn {i}: expected {expected} turn, got {speaker}")
        text = raw.get("text")
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"turn {i}: empty text")
        if source == "unlabeled":
            if "annotations" in raw:
                raise ValueError(f"turn {i}: unlabeled record carries annotations")
            annotations = None
        else:
            annotations = [_parse_annotation(a) for a in raw.get("annotations", []) or []]
        turns.append(Turn(speaker=speaker, text=text, annotations=annotations))
    return Dialog(dialog_id=dialog_id, turns=turns, source=source)


def load_corpus(path, source: str) -> list[Dialog]:
    """Load a line-delimited dialog corpus; invalid records are logged and skipped.

    An unreadable file raises; a malformed record only produces a diagnostic
    naming its line number.
    """
    if source not in ("labeled", "unlabeled"):
        raise ValueError(f"source must be 'labeled' or 'unlabeled', got {source!r}")
    dialogs: list[Dialog] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                dialogs.append(_validate_record(record, source))
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s line %d: skipped record (%s)", path, lineno, exc)
    return dialogs


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


@dataclass
class CleaningConfig:
    offensive_words: frozenset[str] = frozenset()
    replacement: str = ""
    ascii_alpha_threshold: float = 0.8


@dataclass
class CleaningReport:
    """Per-rule rejection counts plus how many kept dialogs had replacements."""

    kept: int = 0
    rejected: Counter = field(default_factory=Counter)
    dialogs_with_replacements: int = 0

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "rejected": {rule: self.rejected.get(rule, 0) for rule in CLEANING_RULES},
            "dialogs_with_replacements": self.dialogs_with_replacements,
        }

    def summary(self) -> str:
        lines = [f"kept\t{self.kept}"]
        for rule in CLEANING_RULES:
            lines.append(f"rejected[{rule}]\t{self.rejected.get(rule, 0)}")
        lines.append(f"replacements\t{self.dialogs_with_replacements}")
        return "\n".join(lines)


def _is_renderable(ch: str) -> bool:
    if ord(ch) > 0xFFFF:
        return False
    return unicodedata.category(ch) not in ("So", "Sk", "Cs", "Co", "Cn")


def _replace_unrenderable(text: str, replacement: str) -> str:
    out = "".join(ch if _is_renderable(ch) else replacement for ch in text)
    return _WS_RE.sub(" ", out).strip()


def _has_word_repeat(text: str, min_run: int = 3) -> bool:
    words = text.lower().split()
    run = 1
    for prev, cur in zip(words, words[1:]):
        run = run + 1 if cur == prev else 1
        if run >= min_run:
            return True
    return False


def _looks_english(text: str, threshold: float) -> bool:
    alpha = [ch for ch in text if ch.isalpha()]
    if not alpha:
        return True
    ascii_count = sum(1 for ch in alpha if ord(ch) < 128)
    return ascii_count / len(alpha) >= threshold


def _reject_rule(text: str, config: CleaningConfig) -> str | None:
    """Name of the first cleaning rule that rejects this utterance, if any."""
    if _URL_RE.search(text):
        return "url"
    if _has_word_repeat(text):
        return "repeated_words"
    if not _looks_english(text, config.ascii_alpha_threshold):
        return "non_english"
    if "[" in text or "]" in text:
        return "markup"
    if config.offensive_words:
        words = set(re.findall(r"[a-z']+", text.lower()))
        if words & config.offensive_words:
            return "offensive"
    return None


def clean_dialog(
    dialog: Dialog,
    config: CleaningConfig | None = None,
    report: CleaningReport | None = None,
) -> Dialog | None:
    """Apply the cleaning rules to one dialog; returns None when rejected.

    Total and idempotent: replacement runs first, the reject rules are then
    evaluated on the replaced text, so a second pass is a no-op.
    """
    config = config or CleaningConfig()
    new_turns = []
    replaced = False
    for turn in dialog.turns:
        text = _replace_unrenderable(turn.text, config.replacement)
        if text != turn.text:
            replaced = True
        if not text:
            if report is not None:
                report.rejected["empty_after_replacement"] += 1
            return None
        rule = _reject_rule(text, config)
        if rule is not None:
            if report is not None:
                report.rejected[rule] += 1
            return None
        new_turns.append(replace(turn, text=text))
    if report is not None:
        report.kept += 1
        if replaced:
            report.dialogs_with_replacements += 1
    return replace(dialog, turns=new_turns)


def clean_corpus(
    dialogs: list[Dialog], config: CleaningConfig | None = None
) -> tuple[list[Dialog], CleaningReport]:
    report = CleaningReport()
    kept = []
    for d in dialogs:
        cleaned = clean_dialog(d, config, report)
        if cleaned is not None:
            kept.append(cleaned)
    return kept, report


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def build_vocabulary(dialogs: list[Dialog], min_freq: int = 1) -> Vocabulary:
    """Frequency-thresholded word vocabulary, deterministic under input order.

    Words are ranked by descending frequency with alphabetical tie-break;
    everything below min_freq maps to [UNK] at encode time.
    """
    if not dialogs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for d in dialogs:
        for turn in d.turns:
            counts.update(tokenize(turn.text))
    words = sorted(
        (w for w, c in counts.items() if c >= min_freq),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(words)


# ---------------------------------------------------------------------------
# Example assembly
# ---------------------------------------------------------------------------


@dataclass
class _Utterance:
    speaker: str
    turn_id: int
    tokens: list[str]       # word tokens, no boundaries
    values: list[str]       # annotation value strings attached to this turn


def _bracket(speaker: str) -> tuple[str, str]:
    return (BOU, EOU) if speaker == USER else (BOS, EOS)


def assemble_example(
    dialog: Dialog,
    k: int,
    vocab: Vocabulary,
    limits: Limits | None = None,
) -> TrainingExample:
    """Build the model-ready example for turn pair k (1-based).

    The context is turns 1..k-1 plus the user query of pair k.  Turn ids
    count pairs backwards from the current pair (current = 0); position ids
    restart at every utterance boundary.  When the context exceeds the limit,
    whole oldest pairs are dropped first; if the query alone still exceeds it,
    its head is truncated.  The response keeps its head on overflow.
    """
    limits = limits or Limits()
    if k < 1 or k > dialog.num_pairs:
        raise ValueError(
            f"turn pair index {k} out of range 1..{dialog.num_pairs} "
            f"for dialog {dialog.dialog_id}"
        )
    labeled = dialog.source == "labeled"

    utterances: list[_Utterance] = []
    for j in range(2 * (k - 1) + 1):  # turns u_1,s_1,...,u_k
        turn = dialog.turns[j]
        pair = j // 2 + 1
        values = []
        if labeled and turn.annotations:
            for ann in turn.annotations:
                for _, value in ann.slots:
                    if value is not None and value.strip():
                        values.append(value)
        utterances.append(
            _Utterance(
                speaker=turn.speaker,
                turn_id=k - pair,
                tokens=tokenize(turn.text),
                values=values,
            )
        )

    def bracketed_len(utt: _Utterance) -> int:
        return len(utt.tokens) + 2

    # Drop whole oldest pairs while over budget; the list always holds
    # 2(k-1)+1 utterances, so pairs peel off the front until only u_k is left.
    total = sum(bracketed_len(u) for u in utterances)
    while total > limits.max_context_len and len(utterances) > 1:
        total -= bracketed_len(utterances[0]) + bracketed_len(utterances[1])
        utterances = utterances[2:]
    # Head-truncate the remaining oldest utterance if it alone still overflows.
    if total > limits.max_context_len:
        utt = utterances[0]
        excess = total - limits.max_context_len
        utt.tokens = utt.tokens[excess:]

    context_tokens: list[str] = []
    role_ids: list[int] = []
    turn_ids: list[int] = []
    position_ids: list[int] = []
    utterance_spans: list[tuple[int, int]] = []
    for utt in utterances:
        open_tok, close_tok = _bracket(utt.speaker)
        start = len(context_tokens)
        seq = [open_tok] + utt.tokens + [close_tok]
        context_tokens.extend(seq)
        role_ids.extend([ROLE_IDS[utt.speaker]] * len(seq))
        turn_ids.extend([utt.turn_id] * len(seq))
        position_ids.extend(range(len(seq)))
        utterance_spans.append((start, len(context_tokens)))

    value_token_spans, unlocated = _locate_value_spans(
        utterances, utterance_spans, context_tokens
    )

    # Response: system utterance of pair k, head kept on overflow.
    resp_turn = dialog.turns[2 * k - 1]
    resp_words = tokenize(resp_turn.text)
    keep = limits.max_response_len - 2
    resp_words = resp_words[:keep]
    response_tokens = [BOS] + resp_words + [EOS]

    query_tree = response_tree = None
    if labeled:
        query_tree = build_semantic_tree(dialog.turns[2 * k - 2].annotations or [])
        response_tree = build_semantic_tree(resp_turn.annotations or [])

    return TrainingExample(
        dialog_id=dialog.dialog_id,
        pair_index=k,
        labeled=labeled,
        context_tokens=vocab.encode(context_tokens),
        context_role_ids=role_ids,
        context_turn_ids=turn_ids,
        context_position_ids=position_ids,
        response_tokens=vocab.encode(response_tokens),
        response_role_ids=[ROLE_IDS[SYSTEM]] * len(response_tokens),
        response_turn_ids=[0] * len(response_tokens),
        response_position_ids=list(range(len(response_tokens))),
        query_tokens=vocab.encode(utterances[-1].tokens),
        response_interior=vocab.encode(resp_words),
        query_tree=query_tree,
        response_tree=response_tree,
        value_token_spans=value_token_spans,
        unlocated_values=unlocated,
    )


def _locate_value_spans(
    utterances: list[_Utterance],
    utterance_spans: list[tuple[int, int]],
    context_tokens: list[str],
) -> tuple[list[tuple[int, int]], int]:
    """Find the context token span of each annotation value.

    A value is searched as a whole-token subsequence in its own utterance
    first, then in earlier utterances from most recent to oldest; the first
    match wins and only that occurrence is recorded.  Unlocated values are
    counted, not fatal.
    """
    spans: list[tuple[int, int]] = []
    taken = set()
    unlocated = 0
    for idx, utt in enumerate(utterances):
        for value in utt.values:
            needle = tokenize(value)
            if not needle:
                unlocated += 1
                continue
            found = None
            for u in range(idx, -1, -1):
                start, end = utterance_spans[u]
                found = _find_subsequence(
                    context_tokens, needle, start + 1, end - 1, taken
                )
                if found is not None:
                    break
            if found is None:
                unlocated += 1
            else:
                spans.append(found)
                taken.update(range(found[0], found[1]))
    spans.sort()
    return spans, unlocated


def _find_subsequence(haystack, needle, start, end, taken) -> tuple[int, int] | None:
    n = len(needle)
    for i in range(start, end - n + 1):
        if any(p in taken for p in range(i, i + n)):
            continue
        if haystack[i:i + n] == needle:
            return (i, i + n)
    return None


# ---------------------------------------------------------------------------
# Span masking
# ---------------------------------------------------------------------------


@dataclass
class MaskingConfig:
    mask_fraction: float = 0.15
    mean_span_len: float = 3.0
    min_span_len: int = 1
    max_span_len: int = 8


def apply_span_mask(
    example: TrainingExample,
    rng_seed: int,
    vocab: Vocabulary,
    config: MaskingConfig | None = None,
) -> MaskedExample:
    """Mask context spans for the masked-prediction objective.

    Labeled examples mask exactly their located annotation-value spans.
    Unlabeled examples mask random contiguous spans (geometric lengths,
    clipped) covering the target fraction of non-special context tokens.
    Deterministic per (example, seed).
    """
    config = config or MaskingConfig()
    protected = vocab.protected_ids
    maskable = [
        i for i, t in enumerate(example.context_tokens) if t not in protected
    ]

    if example.labeled:
        positions = sorted(
            p for start, end in example.value_token_spans for p in range(start, end)
        )
    else:
        positions = _sample_mask_positions(maskable, rng_seed, config)

    originals = tuple(example.context_tokens[p] for p in positions)
    return MaskedExample(
        base=example,
        masked_positions=tuple(positions),
        original_tokens=originals,
    )


def _sample_mask_positions(
    maskable: list[int], rng_seed: int, config: MaskingConfig
) -> list[int]:
    if not maskable:
        return []
    rng = random.Random(rng_seed)
    target = int(round(config.mask_fraction * len(maskable)))
    if target < 1:
        return []
    maskable_set = set(maskable)
    masked: set[int] = set()
    geom_p = 1.0 / config.mean_span_len
    attempts = 0
    while len(masked) < target and attempts < 10 * target + 20:
        attempts += 1
        span_len = min(
            max(_geometric(rng, geom_p), config.min_span_len), config.max_span_len
        )
        span_len = min(span_len, target - len(masked))
        free = [p for p in maskable if p not in masked]
        if not free:
            break
        anchor = rng.choice(free)
        run = []
        pos = anchor
        while len(run) < span_len and pos in maskable_set and pos not in masked:
            run.append(pos)
            pos += 1
        masked.update(run)
    return sorted(masked)


def _geometric(rng: random.Random, p: float) -> int:
    """Geometric draw on {1, 2, ...} with success probability p (mean 1/p)."""
    u = rng.random()
    return max(1, int(math.ceil(math.log(1.0 - u) / math.log(1.0 - p))))
