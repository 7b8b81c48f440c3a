"""Shared-parameter transformer split into four stages by attention masks.

One weight set serves four stages laid out as segments of a single sequence:
a bidirectional context encoder, an understanding stage that pools the query
(or, with the response segment inserted, the response) into a vector at its
last prompt token, a policy stage that pools a plan vector at its last prompt
token, and a causal generation stage over the response.  Which stage sees
which is controlled entirely by the segment visibility rules in
:func:`build_attention_mask`: a segment sees every segment laid out before it,
never one after it; prompts are internally causal so their last token
summarizes; the generation response is causal while the posterior response is
bidirectional.
"""

from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import MaskedExample, TrainingExample


class ForwardMode(enum.Enum):
    MLM = "mlm"
    QUERY = "query"
    RESPONSE_POSTERIOR = "response_posterior"
    POLICY_PRIOR = "policy_prior"
    GENERATE = "generate"


class SegmentKind(enum.Enum):
    CONTEXT = "context"
    RESPONSE_POST = "response_post"
    RESPONSE_GEN = "response_gen"
    U_PROMPT = "u_prompt"
    P_PROMPT = "p_prompt"


# Segment sequence each mode must use, in order.
MODE_LAYOUTS: dict[ForwardMode, tuple[SegmentKind, ...]] = {
    ForwardMode.MLM: (SegmentKind.CONTEXT,),
    ForwardMode.QUERY: (SegmentKind.CONTEXT, SegmentKind.U_PROMPT),
    ForwardMode.RESPONSE_POSTERIOR: (
        SegmentKind.CONTEXT,
        SegmentKind.RESPONSE_POST,
        SegmentKind.U_PROMPT,
    ),
    ForwardMode.POLICY_PRIOR: (
        SegmentKind.CONTEXT,
        SegmentKind.U_PROMPT,
        SegmentKind.P_PROMPT,
    ),
    ForwardMode.GENERATE: (
        SegmentKind.CONTEXT,
        SegmentKind.U_PROMPT,
        SegmentKind.P_PROMPT,
        SegmentKind.RESPONSE_GEN,
    ),
}

# Earlier segments a given segment kind may attend to (in full).
_CROSS_VISIBLE: dict[SegmentKind, frozenset[SegmentKind]] = {
    SegmentKind.CONTEXT: frozenset(),
    SegmentKind.RESPONSE_POST: frozenset({SegmentKind.CONTEXT}),
    SegmentKind.U_PROMPT: frozenset({SegmentKind.CONTEXT, SegmentKind.RESPONSE_POST}),
    SegmentKind.P_PROMPT: frozenset({SegmentKind.CONTEXT, SegmentKind.U_PROMPT}),
    SegmentKind.RESPONSE_GEN: frozenset(
        {SegmentKind.CONTEXT, SegmentKind.U_PROMPT, SegmentKind.P_PROMPT}
    ),
}

_CAUSAL_WITHIN = frozenset(
    {SegmentKind.RESPONSE_GEN, SegmentKind.U_PROMPT, SegmentKind.P_PROMPT}
)


class LayoutError(ValueError):
    """Segment layout inconsistent with the requested forward mode."""


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered (kind, length) segments describing one input sequence."""

    segments: tuple[tuple[SegmentKind, int], ...]

    @property
    def total_len(self) -> int:
        return sum(length for _, length in self.segments)

    def kinds(self) -> tuple[SegmentKind, ...]:
        return tuple(kind for kind, _ in self.segments)

    def slices(self) -> dict[SegmentKind, slice]:
        out = {}
        offset = 0
        for kind, length in self.segments:
            out[kind] = slice(offset, offset + length)
            offset += length
        return out

    def validate_for_mode(self, mode: ForwardMode) -> None:
        expected = MODE_LAYOUTS[mode]
        if self.kinds() != expected:
            raise LayoutError(
                f"mode {mode.value} requires segments "
                f"{[k.value for k in expected]}, got {[k.value for k in self.kinds()]}"
            )
        for kind, length in self.segments:
            if length < 1:
                raise LayoutError(f"segment {kind.value} has length {length}")


def layout_for_mode(
    mode: ForwardMode,
    context_len: int,
    response_len: int = 0,
    u_prompt_len: int = 0,
    p_prompt_len: int = 0,
) -> SegmentLayout:
    lengths = {
        SegmentKind.CONTEXT: context_len,
        SegmentKind.RESPONSE_POST: response_len,
        SegmentKind.RESPONSE_GEN: response_len,
        SegmentKind.U_PROMPT: u_prompt_len,
        SegmentKind.P_PROMPT: p_prompt_len,
    }
    layout = SegmentLayout(tuple((k, lengths[k]) for k in MODE_LAYOUTS[mode]))
    layout.validate_for_mode(mode)
    return layout


def build_attention_mask(layout: SegmentLayout) -> torch.Tensor:
    """Boolean (query, key) visibility matrix for one layout.

    A position sees every position of segments laid out before its own that
    its segment kind is allowed to read, never a later segment.  Within a
    segment, context and the posterior response are bidirectional; prompts
    and the generation response are causal.
    """
    total = layout.total_len
    mask = torch.zeros(total, total, dtype=torch.bool)
    slices = []
    offset = 0
    for kind, length in layout.segments:
        slices.append((kind, offset, offset + length))
        offset += length

    for q_kind, q_start, q_end in slices:
        for k_kind, k_start, k_end in slices:
            if k_start > q_start:
                continue  # never attend forward in the layout
            if q_start == k_start:
                if q_kind in _CAUSAL_WITHIN:
                    length = q_end - q_start
                    tri = torch.tril(torch.ones(length, length, dtype=torch.bool))
                    mask[q_start:q_end, k_start:k_end] = tri
                else:
                    mask[q_start:q_end, k_start:k_end] = True
            elif k_kind in _CROSS_VISIBLE[q_kind]:
                mask[q_start:q_end, k_start:k_end] = True
    return mask


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_positions: int = 256
    max_turns: int = 64
    dropout: float = 0.2
    understanding_prompt_len: int = 5
    policy_prompt_len: int = 5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.understanding_prompt_len < 1 or self.policy_prompt_len < 1:
            raise ValueError("prompt lengths must be at least 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# Batched inputs
# ---------------------------------------------------------------------------


@dataclass
class ForwardInputs:
    """Padded tensors plus per-example layouts for one forward mode."""

    tokens: torch.Tensor          # (B, T) long
    roles: torch.Tensor           # (B, T) long
    turns: torch.Tensor           # (B, T) long
    positions: torch.Tensor       # (B, T) long
    prompt_kind: torch.Tensor     # (B, T) long: 0 none, 1 understanding, 2 policy
    prompt_index: torch.Tensor    # (B, T) long: index within the prompt sequence
    attn: torch.Tensor            # (B, T, T) bool
    lengths: torch.Tensor         # (B,) long, true sequence lengths
    layouts: list[SegmentLayout]
    vector_pos: Optional[torch.Tensor] = None     # (B,) long
    response_start: Optional[torch.Tensor] = None  # (B,) long
    response_len: Optional[torch.Tensor] = None    # (B,) long
    masked_positions: Optional[list[tuple[int, ...]]] = None


@dataclass
class ForwardOutput:
    hidden: torch.Tensor                       # (B, T, H)
    semantic_vector: Optional[torch.Tensor] = None   # (B, H)
    mlm_logits: Optional[torch.Tensor] = None        # (total_masked, V)
    mlm_targets: Optional[torch.Tensor] = None       # (total_masked,)
    lm_logits: Optional[torch.Tensor] = None         # (B, Tr, V)
    response_len: Optional[torch.Tensor] = None      # (B,)


def collate_examples(
    examples: Sequence[TrainingExample | MaskedExample],
    mode: ForwardMode,
    config: ModelConfig,
    pad_id: int,
    mask_id: int | None = None,
    response_override: Sequence[list[int]] | None = None,
) -> ForwardInputs:
    """Assemble padded mode-specific inputs from examples.

    MLM takes MaskedExamples and substitutes the mask token in the context.
    ``response_override`` replaces the stored response tokens (used by the
    decoder for partial hypotheses).
    """
    rows = []
    masked_positions: list[tuple[int, ...]] = []
    for i, ex in enumerate(examples):
        if isinstance(ex, MaskedExample):
            if mode is not ForwardMode.MLM:
                raise LayoutError("masked examples are only valid in MLM mode")
            if mask_id is None:
                raise ValueError("mask_id required for MLM collation")
            base = ex.base
            ctx_tokens = ex.masked_context_tokens(mask_id)
            masked_positions.append(ex.masked_positions)
        else:
            base = ex
            ctx_tokens = list(ex.context_tokens)
            masked_positions.append(())

        if response_override is not None:
            resp_tokens = list(response_override[i])
        else:
            resp_tokens = list(base.response_tokens)

        rows.append(_build_row(base, ctx_tokens, resp_tokens, mode, config))

    max_len = max(r["layout"].total_len for r in rows)
    batch = len(rows)
    tokens = torch.full((batch, max_len), pad_id, dtype=torch.long)
    roles = torch.zeros(batch, max_len, dtype=torch.long)
    turns = torch.zeros(batch, max_len, dtype=torch.long)
    positions = torch.zeros(batch, max_len, dtype=torch.long)
    prompt_kind = torch.zeros(batch, max_len, dtype=torch.long)
    prompt_index = torch.zeros(batch, max_len, dtype=torch.long)
    attn = torch.zeros(batch, max_len, max_len, dtype=torch.bool)
    lengths = torch.zeros(batch, dtype=torch.long)
    vector_pos = torch.full((batch,), -1, dtype=torch.long)
    response_start = torch.full((batch,), -1, dtype=torch.long)
    response_len = torch.zeros(batch, dtype=torch.long)

    for i, row in enumerate(rows):
        n = row["layout"].total_len
        tokens[i, :n] = torch.tensor(row["tokens"], dtype=torch.long)
        roles[i, :n] = torch.tensor(row["roles"], dtype=torch.long)
        turns[i, :n] = torch.tensor(row["turns"], dtype=torch.long)
        positions[i, :n] = torch.tensor(row["positions"], dtype=torch.long)
        prompt_kind[i, :n] = torch.tensor(row["prompt_kind"], dtype=torch.long)
        prompt_index[i, :n] = torch.tensor(row["prompt_index"], dtype=torch.long)
        attn[i, :n, :n] = build_attention_mask(row["layout"])
        # Padding attends to itself only, so its softmax rows stay finite.
        for p in range(n, max_len):
            attn[i, p, p] = True
        lengths[i] = n
        if row["vector_pos"] is not None:
            vector_pos[i] = row["vector_pos"]
        if row["response_start"] is not None:
            response_start[i] = row["response_start"]
            response_len[i] = row["response_len"]

    vector_modes = (
        ForwardMode.QUERY,
        ForwardMode.RESPONSE_POSTERIOR,
        ForwardMode.POLICY_PRIOR,
    )
    return ForwardInputs(
        tokens=tokens,
        roles=roles,
        turns=turns,
        positions=positions,
        prompt_kind=prompt_kind,
        prompt_index=prompt_index,
        attn=attn,
        lengths=lengths,
        layouts=[r["layout"] for r in rows],
        vector_pos=vector_pos if mode in vector_modes else None,
        response_start=(
            response_start if mode is ForwardMode.GENERATE else None
        ),
        response_len=response_len if mode is ForwardMode.GENERATE else None,
        masked_positions=masked_positions if mode is ForwardMode.MLM else None,
    )


def _build_row(
    base: TrainingExample,
    ctx_tokens: list[int],
    resp_tokens: list[int],
    mode: ForwardMode,
    config: ModelConfig,
) -> dict:
    a = config.understanding_prompt_len
    b = config.policy_prompt_len
    ctx = {
        "tokens": ctx_tokens,
        "roles": list(base.context_role_ids),
        "turns": list(base.context_turn_ids),
        "positions": list(base.context_position_ids),
        "prompt_kind": [0] * len(ctx_tokens),
        "prompt_index": [0] * len(ctx_tokens),
    }
    resp = {
        "tokens": resp_tokens,
        "roles": list(base.response_role_ids[: len(resp_tokens)]),
        "turns": list(base.response_turn_ids[: len(resp_tokens)]),
        "positions": list(range(len(resp_tokens))),
        "prompt_kind": [0] * len(resp_tokens),
        "prompt_index": [0] * len(resp_tokens),
    }
    if len(resp["roles"]) < len(resp_tokens):  # override longer than stored
        pad_n = len(resp_tokens) - len(resp["roles"])
        resp["roles"] += [resp["roles"][-1] if resp["roles"] else 1] * pad_n
        resp["turns"] += [0] * pad_n
    uprompt = {
        "tokens": [0] * a,
        "roles": [0] * a,
        "turns": [0] * a,
        "positions": [0] * a,
        "prompt_kind": [1] * a,
        "prompt_index": list(range(a)),
    }
    pprompt = {
        "tokens": [0] * b,
        "roles": [0] * b,
        "turns": [0] * b,
        "positions": [0] * b,
        "prompt_kind": [2] * b,
        "prompt_index": list(range(b)),
    }

    pieces: list[dict]
    if mode is ForwardMode.MLM:
        pieces = [ctx]
    elif mode is ForwardMode.QUERY:
        pieces = [ctx, uprompt]
    elif mode is ForwardMode.RESPONSE_POSTERIOR:
        pieces = [ctx, resp, uprompt]
    elif mode is ForwardMode.POLICY_PRIOR:
        pieces = [ctx, uprompt, pprompt]
    elif mode is ForwardMode.GENERATE:
        pieces = [ctx, uprompt, pprompt, resp]
    else:  # pragma: no cover
        raise LayoutError(f"unknown mode {mode}")

    row = {key: sum((p[key] for p in pieces), []) for key in ctx}
    layout = layout_for_mode(
        mode,
        context_len=len(ctx_tokens),
        response_len=len(resp_tokens),
        u_prompt_len=a,
        p_prompt_len=b,
    )
    row["layout"] = layout
    slices = layout.slices()
    row["vector_pos"] = None
    row["response_start"] = None
    row["response_len"] = None
    if mode in (ForwardMode.QUERY, ForwardMode.RESPONSE_POSTERIOR):
        row["vector_pos"] = slices[SegmentKind.U_PROMPT].stop - 1
    elif mode is ForwardMode.POLICY_PRIOR:
        row["vector_pos"] = slices[SegmentKind.P_PROMPT].stop - 1
    elif mode is ForwardMode.GENERATE:
        s = slices[SegmentKind.RESPONSE_GEN]
        row["response_start"] = s.start
        row["response_len"] = s.stop - s.start
    return row


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.head_dim = config.hidden_dim // config.num_heads
        self.qkv = nn.Linear(config.hidden_dim, 3 * config.hidden_dim)
        self.out = nn.Linear(config.hidden_dim, config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        bsz, seq, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (bsz, seq, self.num_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~visible.unsqueeze(1), float("-inf"))
        weights = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (weights @ v).transpose(1, 2).reshape(bsz, seq, dim)
        return self.out(ctx)


class TransformerBlock(nn.Module):
    """Pre-norm block: stable to train without warmup at desk-scale rates."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(config)
        self.ln1 = nn.LayerNorm(config.hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(config.hidden_dim, config.ffn_dim),
            nn.GELU(),
            nn.Linear(config.ffn_dim, config.hidden_dim),
        )
        self.ln2 = nn.LayerNorm(config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.ln1(x), visible))
        x = x + self.dropout(self.ffn(self.ln2(x)))
        return x


class UnifiedDialogModel(nn.Module):
    """The shared transformer backbone plus prompt banks and the tied LM head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.token_emb = nn.Embedding(config.vocab_size, h)
        self.role_emb = nn.Embedding(2, h)
        self.turn_emb = nn.Embedding(config.max_turns, h)
        self.pos_emb = nn.Embedding(config.max_positions, h)
        self.understanding_prompt = nn.Parameter(
            torch.randn(config.understanding_prompt_len, h) * 0.02
        )
        self.policy_prompt = nn.Parameter(
            torch.randn(config.policy_prompt_len, h) * 0.02
        )
        self.emb_norm = nn.LayerNorm(h)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(config) for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(h)
        self.lm_out = nn.Linear(h, config.vocab_size)

    # -- embeddings ---------------------------------------------------------

    def input_embedding(
        self,
        tokens: torch.Tensor,
        roles: torch.Tensor,
        turns: torch.Tensor,
        positions: torch.Tensor,
        prompt_kind: torch.Tensor,
        prompt_index: torch.Tensor,
    ) -> torch.Tensor:
        """Per-position sum of token/role/turn/position embeddings.

        Prompt positions receive their learned prompt vector exactly; their
        role/turn/position embeddings are zeroed out.  Position ids beyond the
        table are fatal; turn ids clamp to the last turn bucket.
        """
        if int(positions.max()) >= self.config.max_positions:
            raise ValueError(
                f"position id {int(positions.max())} exceeds "
                f"max_positions {self.config.max_positions}"
            )
        turns = turns.clamp(max=self.config.max_turns - 1)
        emb = (
            self.token_emb(tokens)
            + self.role_emb(roles)
            + self.turn_emb(turns)
            + self.pos_emb(positions)
        )
        # Overwrite prompt rows per bank; a bank absent from the layout must
        # stay entirely out of the graph (no zero-grad weight-decay drift).
        is_u = prompt_kind == 1
        if bool(is_u.any()):
            u_vec = self.understanding_prompt[
                prompt_index.clamp(max=self.config.understanding_prompt_len - 1)
            ]
            emb = torch.where(is_u.unsqueeze(-1), u_vec, emb)
        is_p = prompt_kind == 2
        if bool(is_p.any()):
            p_vec = self.policy_prompt[
                prompt_index.clamp(max=self.config.policy_prompt_len - 1)
            ]
            emb = torch.where(is_p.unsqueeze(-1), p_vec, emb)
        return emb

    def lm_head(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_out(hidden)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        inputs: ForwardInputs,
        mode: ForwardMode,
        dropout_seed: int | None = None,
    ) -> ForwardOutput:
        for layout in inputs.layouts:
            layout.validate_for_mode(mode)

        with self._rng_scope(dropout_seed):
            x = self.input_embedding(
                inputs.tokens,
                inputs.roles,
                inputs.turns,
                inputs.positions,
                inputs.prompt_kind,
                inputs.prompt_index,
            )
            x = self.emb_dropout(self.emb_norm(x))
            for block in self.blocks:
                x = block(x, inputs.attn)
            x = self.final_norm(x)

        out = ForwardOutput(hidden=x)
        if inputs.vector_pos is not None:
            idx = inputs.vector_pos.view(-1, 1, 1).expand(-1, 1, x.size(-1))
            out.semantic_vector = x.gather(1, idx).squeeze(1)
        if mode is ForwardMode.MLM and inputs.masked_positions is not None:
            gathered = [
                x[i, list(pos)] for i, pos in enumerate(inputs.masked_positions) if pos
            ]
            if gathered:
                out.mlm_logits = self.lm_head(torch.cat(gathered, dim=0))
            else:
                out.mlm_logits = x.new_zeros((0, self.config.vocab_size))
        if mode is ForwardMode.GENERATE:
            max_resp = int(inputs.response_len.max())
            rows = []
            for i in range(x.size(0)):
                start = int(inputs.response_start[i])
                n = int(inputs.response_len[i])
                block = x[i, start:start + n]
                if n < max_resp:
                    block = torch.cat(
                        [block, block.new_zeros(max_resp - n, block.size(-1))]
                    )
                rows.append(block)
            out.lm_logits = self.lm_head(torch.stack(rows))
            out.response_len = inputs.response_len
        return out

    @contextlib.contextmanager
    def _rng_scope(self, dropout_seed: int | None):
        """Deterministic dropout: fork the CPU RNG and seed it per call."""
        needs_rng = self.training and self.config.dropout > 0
        if needs_rng and dropout_seed is not None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(dropout_seed)
                yield
        else:
            yield

    # -- convenience wrappers -----------------------------------------------

    def semantic_vector(
        self,
        examples: Sequence[TrainingExample],
        mode: ForwardMode,
        pad_id: int,
        dropout_seed: int | None = None,
    ) -> torch.Tensor:
        inputs = collate_examples(examples, mode, self.config, pad_id)
        return self.forward(inputs, mode, dropout_seed).semantic_vector

    def mlm_forward(
        self,
        masked: Sequence[MaskedExample],
        pad_id: int,
        mask_id: int,
        dropout_seed: int | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits at masked context positions and the flat original-token targets."""
        inputs = collate_examples(
            masked, ForwardMode.MLM, self.config, pad_id, mask_id=mask_id
        )
        out = self.forward(inputs, ForwardMode.MLM, dropout_seed)
        targets = torch.tensor(
            [t for ex in masked for t in ex.original_tokens], dtype=torch.long
        )
        return out.mlm_logits, targets

    def generation_forward(
        self,
        examples: Sequence[TrainingExample],
        pad_id: int,
        dropout_seed: int | None = None,
    ) -> ForwardOutput:
        inputs = collate_examples(examples, ForwardMode.GENERATE, self.config, pad_id)
        return self.forward(inputs, ForwardMode.GENERATE, dropout_seed)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass
class DecodeStrategy:
    kind: str = "greedy"  # "greedy" | "beam"
    beam_width: int = 1

    def __post_init__(self):
        if self.kind not in ("greedy", "beam"):
            raise ValueError(f"unknown decode strategy {self.kind!r}")
        if self.kind == "beam" and self.beam_width < 1:
            raise ValueError("beam width must be >= 1")


@torch.no_grad()
def decode_response(
    model: UnifiedDialogModel,
    example: TrainingExample,
    bos_id: int,
    eos_id: int,
    pad_id: int,
    strategy: DecodeStrategy | None = None,
    max_len: int = 48,
) -> list[int]:
    """Autoregressive decode of a response for the example's context.

    Emits tokens after [BOS] until [EOS] or ``max_len`` generated tokens;
    the returned list excludes both boundary tokens.  Greedy takes the argmax
    each step; beam keeps ``beam_width`` hypotheses ranked by mean
    log-probability.
    """
    strategy = strategy or DecodeStrategy()
    was_training = model.training
    model.eval()
    try:
        if strategy.kind == "greedy" or strategy.beam_width == 1:
            return _greedy_decode(model, example, bos_id, eos_id, pad_id, max_len)
        return _beam_decode(
            model, example, bos_id, eos_id, pad_id, strategy.beam_width, max_len
        )
    finally:
        if was_training:
            model.train()


def _step_logits(
    model: UnifiedDialogModel,
    example: TrainingExample,
    prefixes: list[list[int]],
    pad_id: int,
) -> torch.Tensor:
    """Next-token logits for each hypothesis prefix (prefix includes [BOS])."""
    inputs = collate_examples(
        [example] * len(prefixes),
        ForwardMode.GENERATE,
        model.config,
        pad_id,
        response_override=prefixes,
    )
    out = model.forward(inputs, ForwardMode.GENERATE)
    last = [int(n) - 1 for n in out.response_len]
    return torch.stack([out.lm_logits[i, last[i]] for i in range(len(prefixes))])


def _greedy_decode(model, example, bos_id, eos_id, pad_id, max_len) -> list[int]:
    prefix = [bos_id]
    generated: list[int] = []
    while len(generated) < max_len:
        logits = _step_logits(model, example, [prefix], pad_id)[0]
        nxt = int(torch.argmax(logits))
        if nxt == eos_id:
            break
        generated.append(nxt)
        prefix.append(nxt)
    return generated


def _beam_decode(model, example, bos_id, eos_id, pad_id, width, max_len) -> list[int]:
    # Hypotheses: (tokens-after-bos, sum_logp, steps, finished); ranked by
    # mean log-probability score/steps.
    beams: list[tuple[list[int], float, int, bool]] = [([], 0.0, 0, False)]

    def mean_logp(b):
        return b[1] / max(1, b[2])

    for _ in range(max_len):
        if all(done for _, _, _, done in beams):
            break
        active = [b for b in beams if not b[3]]
        finished = [b for b in beams if b[3]]
        logits = _step_logits(
            model, example, [[bos_id] + toks for toks, _, _, _ in active], pad_id
        )
        logprobs = F.log_softmax(logits, dim=-1)
        candidates = list(finished)
        for (toks, score, steps, _), lp in zip(active, logprobs):
            top = torch.topk(lp, min(width, lp.numel()))
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                done = idx == eos_id
                new_toks = toks if done else toks + [idx]
                candidates.append((new_toks, score + val, steps + 1, done))
        candidates.sort(key=mean_logp, reverse=True)
        beams = candidates[:width]
    return max(beams, key=mean_logp)[0]
