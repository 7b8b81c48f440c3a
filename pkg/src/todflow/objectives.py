"""Pre-training objectives and the joint multi-task training step.

Five losses share one backbone: masked-span prediction over the context,
a semi-supervised contrastive loss over pooled query/response vectors
(similarity-weighted on labeled batches, dropout-positive-pair on unlabeled),
a bag-of-words reconstruction from each pooled vector, a squared-distance
match between the policy vector and the posterior response vector, and
teacher-forced response generation.  Their unweighted sum is the joint
objective optimized with AdamW.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import MaskedExample, TrainingExample, Vocabulary, apply_span_mask
from .model import ForwardMode, UnifiedDialogModel
from .semtree import batch_similarity_matrix


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; the step was aborted."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is non-finite ({value})")
        self.component = component


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class ProjectionHead(nn.Module):
    """Affine map followed by L2 normalization onto the unit sphere."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        z = self.linear(h)
        norms = z.norm(dim=-1)
        if bool((norms == 0).any()):
            raise FloatingPointError("projection produced a zero vector")
        return z / norms.unsqueeze(-1)


class BowHead(nn.Module):
    """Projects a pooled vector to vocabulary scores (bag-of-words prediction)."""

    def __init__(self, hidden_dim: int, vocab_size: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, vocab_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.linear(h)

    def probabilities(self, h: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.linear(h), dim=-1)


class PretrainHeads(nn.Module):
    """Container for the loss-specific heads trained alongside the backbone."""

    def __init__(self, hidden_dim: int, vocab_size: int):
        super().__init__()
        self.projection = ProjectionHead(hidden_dim)
        self.bow = BowHead(hidden_dim, vocab_size)


# ---------------------------------------------------------------------------
# Individual losses
# ---------------------------------------------------------------------------


def span_mlm_loss(mlm_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the original tokens at masked positions.

    Defined as zero when no positions are masked.
    """
    if targets.numel() == 0:
        return torch.zeros((), dtype=mlm_logits.dtype)
    return F.cross_entropy(mlm_logits, targets)


def supervised_contrastive_loss(
    z: torch.Tensor,
    f: torch.Tensor,
    temperature: float,
    include_self_term: bool = False,
) -> torch.Tensor:
    """Similarity-weighted contrastive loss over a duplicated batch.

    Every other sample acts as a positive with weight f_ij normalized over the
    anchor's row; the log-term denominator always excludes the anchor itself.
    By default the degenerate j == i term is excluded from both the outer sum
    and the normalization; ``include_self_term`` restores it.  Anchors whose
    weight row sums to zero contribute nothing.  Summed over anchors.
    """
    n = z.size(0)
    sim = (z @ z.t()) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    denom = sim.masked_fill(eye, float("-inf")).logsumexp(dim=1, keepdim=True)
    log_prob = sim - denom

    f = f.to(z.dtype)
    weights = f if include_self_term else f.masked_fill(eye, 0.0)
    row_sum = weights.sum(dim=1, keepdim=True)
    safe = row_sum.clamp(min=torch.finfo(z.dtype).tiny)
    norm_w = torch.where(row_sum > 0, weights / safe, torch.zeros_like(weights))
    if not include_self_term:
        log_prob = log_prob.masked_fill(eye, 0.0)
    return -(norm_w * log_prob).sum()


def self_supervised_contrastive_loss(
    z: torch.Tensor, pairing: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Contrastive loss where each anchor's sole positive is its dropout twin."""
    n = z.size(0)
    sim = (z @ z.t()) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    denom = sim.masked_fill(eye, float("-inf")).logsumexp(dim=1)
    pos = sim.gather(1, pairing.view(-1, 1)).squeeze(1)
    return -(pos - denom).sum()


def bow_loss(
    h: torch.Tensor, targets: list[list[int]], head: BowHead
) -> torch.Tensor:
    """Order-free token reconstruction from a pooled vector.

    Per sample: the summed negative log-probability of every target token
    (repeats counted); averaged over the batch.
    """
    log_probs = F.log_softmax(head(h), dim=-1)
    total = torch.zeros((), dtype=log_probs.dtype)
    for i, toks in enumerate(targets):
        if toks:
            idx = torch.tensor(toks, dtype=torch.long)
            total = total - log_probs[i, idx].sum()
    return total / max(1, len(targets))


def policy_semantic_loss(
    policy_vec: torch.Tensor, response_vec: torch.Tensor, stop_gradient: bool = False
) -> torch.Tensor:
    """Batch-mean squared Euclidean distance between policy and response vectors.

    Gradient flows into both sides unless ``stop_gradient`` detaches the
    response (teacher mode).
    """
    if policy_vec.shape != response_vec.shape:
        raise ValueError(
            f"shape mismatch {tuple(policy_vec.shape)} vs {tuple(response_vec.shape)}"
        )
    if stop_gradient:
        response_vec = response_vec.detach()
    return ((policy_vec - response_vec) ** 2).sum(dim=-1).mean()


def response_generation_loss(
    lm_logits: torch.Tensor, response_tokens: list[list[int]]
) -> torch.Tensor:
    """Teacher-forced next-token loss over response positions.

    ``lm_logits[i, t]`` scores the token following position t, so each
    response contributes predictions for tokens 1..N-1 of its bracketed
    sequence (the closing boundary token included).  Mean over all predicted
    positions in the batch.
    """
    rows = []
    targets = []
    for i, toks in enumerate(response_tokens):
        if len(toks) < 2:
            continue
        rows.append(lm_logits[i, : len(toks) - 1])
        targets.append(torch.tensor(toks[1:], dtype=torch.long))
    if not rows:
        return torch.zeros((), dtype=lm_logits.dtype)
    return F.cross_entropy(torch.cat(rows), torch.cat(targets))


# ---------------------------------------------------------------------------
# Contrastive batch plumbing
# ---------------------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    """A batch duplicated by dropout for contrastive training.

    The duplicated index set is {0..2L-1} with sample i paired to i+L; both
    copies share inputs and trees and differ only in dropout seed.  Labeled
    batches carry the pairwise tree-similarity matrices for query and
    response sides.
    """

    examples: list[TrainingExample]
    labeled: bool
    dropout_seeds: tuple[int, int]
    temperature: float
    f_query: torch.Tensor | None = None
    f_response: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return len(self.examples)

    def pairing(self) -> torch.Tensor:
        n = self.size
        return torch.cat(
            [torch.arange(n, 2 * n), torch.arange(0, n)]
        )


def make_contrastive_batch(
    examples: list[TrainingExample],
    dropout_seeds: tuple[int, int],
    temperature: float,
) -> ContrastiveBatch:
    """Build the duplicated batch; labeled batches get tree-similarity weights."""
    labeled = all(ex.labeled for ex in examples)
    if not labeled and any(ex.labeled for ex in examples):
        raise ValueError("batch mixes labeled and unlabeled examples")
    f_query = f_response = None
    if labeled:
        if any(ex.query_tree is None or ex.response_tree is None for ex in examples):
            raise ValueError("labeled batch is missing semantic trees")
        f_query = _duplicated_similarity([ex.query_tree for ex in examples])
        f_response = _duplicated_similarity([ex.response_tree for ex in examples])
    return ContrastiveBatch(
        examples=examples,
        labeled=labeled,
        dropout_seeds=dropout_seeds,
        temperature=temperature,
        f_query=f_query,
        f_response=f_response,
    )


def _duplicated_similarity(trees) -> torch.Tensor:
    base = torch.from_numpy(batch_similarity_matrix(list(trees)).f)
    return base.repeat(2, 2)


def contrastive_loss(
    batch: ContrastiveBatch,
    query_vectors: torch.Tensor,
    response_vectors: torch.Tensor,
    head: ProjectionHead,
    include_self_term: bool = False,
) -> torch.Tensor:
    """Query-side plus response-side contrastive loss for one duplicated batch.

    Labeled batches use the tree-similarity weighting on both sides;
    unlabeled batches fall back to the dropout-pair objective.
    """
    zq = head(query_vectors)
    zr = head(response_vectors)
    if batch.labeled:
        loss_q = supervised_contrastive_loss(
            zq, batch.f_query, batch.temperature, include_self_term
        )
        loss_r = supervised_contrastive_loss(
            zr, batch.f_response, batch.temperature, include_self_term
        )
    else:
        pairing = batch.pairing()
        loss_q = self_supervised_contrastive_loss(zq, pairing, batch.temperature)
        loss_r = self_supervised_contrastive_loss(zr, pairing, batch.temperature)
    return loss_q + loss_r


# ---------------------------------------------------------------------------
# Joint step
# ---------------------------------------------------------------------------


@dataclass
class LossBundle:
    """The five scalar losses of one step and their exact sum."""

    span_mlm: float
    contrastive: float
    bow: float
    policy: float
    generation: float

    @property
    def joint(self) -> float:
        return (
            self.span_mlm + self.contrastive + self.bow + self.policy + self.generation
        )

    def to_dict(self) -> dict:
        return {
            "span_mlm": self.span_mlm,
            "contrastive": self.contrastive,
            "bow": self.bow,
            "policy": self.policy,
            "generation": self.generation,
            "joint": self.joint,
        }


@dataclass
class ObjectiveConfig:
    temperature: float = 0.07
    include_self_term: bool = False
    policy_stop_gradient: bool = False


def compute_joint_loss(
    model: UnifiedDialogModel,
    heads: PretrainHeads,
    examples: list[TrainingExample],
    masked: list[MaskedExample],
    vocab: Vocabulary,
    config: ObjectiveConfig,
    seeds: dict[str, int] | None = None,
) -> tuple[torch.Tensor, LossBundle]:
    """Run the forward modes each loss needs and sum the five components.

    ``seeds`` maps forward-pass names to dropout seeds; missing entries fall
    back to the global RNG stream.  Raises TrainingDiverged on a non-finite
    component.
    """
    seeds = seeds or {}
    pad, mask_id = vocab.pad_id, vocab.mask_id

    mlm_logits, mlm_targets = model.mlm_forward(
        masked, pad, mask_id, seeds.get("mlm")
    )
    l_slm = span_mlm_loss(mlm_logits, mlm_targets)

    hq_a = model.semantic_vector(examples, ForwardMode.QUERY, pad, seeds.get("query_a"))
    hq_b = model.semantic_vector(examples, ForwardMode.QUERY, pad, seeds.get("query_b"))
    hr_a = model.semantic_vector(
        examples, ForwardMode.RESPONSE_POSTERIOR, pad, seeds.get("resp_a")
    )
    hr_b = model.semantic_vector(
        examples, ForwardMode.RESPONSE_POSTERIOR, pad, seeds.get("resp_b")
    )
    cbatch = make_contrastive_batch(
        examples,
        (seeds.get("query_a", 0), seeds.get("query_b", 1)),
        config.temperature,
    )
    l_scl = contrastive_loss(
        cbatch,
        torch.cat([hq_a, hq_b]),
        torch.cat([hr_a, hr_b]),
        heads.projection,
        config.include_self_term,
    )

    l_bow = bow_loss(hq_a, [ex.query_tokens for ex in examples], heads.bow) + bow_loss(
        hr_a, [ex.response_interior for ex in examples], heads.bow
    )

    ho = model.semantic_vector(
        examples, ForwardMode.POLICY_PRIOR, pad, seeds.get("policy")
    )
    l_psm = policy_semantic_loss(ho, hr_a, config.policy_stop_gradient)

    gen = model.generation_forward(examples, pad, seeds.get("generate"))
    l_rgm = response_generation_loss(
        gen.lm_logits, [ex.response_tokens for ex in examples]
    )

    components = {
        "span_mlm": l_slm,
        "contrastive": l_scl,
        "bow": l_bow,
        "policy": l_psm,
        "generation": l_rgm,
    }
    for name, value in components.items():
        if not torch.isfinite(value):
            raise TrainingDiverged(name, float(value))

    total = l_slm + l_scl + l_bow + l_psm + l_rgm
    bundle = LossBundle(
        span_mlm=float(l_slm.detach()),
        contrastive=float(l_scl.detach()),
        bow=float(l_bow.detach()),
        policy=float(l_psm.detach()),
        generation=float(l_rgm.detach()),
    )
    return total, bundle


def joint_training_step(
    model: UnifiedDialogModel,
    heads: PretrainHeads,
    optimizer: torch.optim.Optimizer,
    examples: list[TrainingExample],
    masked: list[MaskedExample],
    vocab: Vocabulary,
    config: ObjectiveConfig,
    seeds: dict[str, int] | None = None,
) -> LossBundle:
    """One optimizer step over a homogeneous labeled or unlabeled batch."""
    total, bundle = compute_joint_loss(
        model, heads, examples, masked, vocab, config, seeds
    )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return bundle


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainerConfig:
    batch_size: int = 8
    steps: int = 500
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    seed: int = 0
    labeled_ratio: int = 1    # labeled steps per cycle
    unlabeled_ratio: int = 1  # unlabeled steps per cycle
    checkpoint_every: int = 0  # 0 = final only
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)


def derive_seed(base: int, *parts: int) -> int:
    """Deterministic per-step/per-pass seed; avoids carrying RNG state."""
    value = base & 0xFFFFFFFF
    for p in parts:
        value = (value * 1000003 + p + 0x9E3779B9) & 0xFFFFFFFF
    return value


def step_source(step: int, config: TrainerConfig, have_labeled: bool, have_unlabeled: bool) -> str:
    """Which corpus feeds this step under the alternating schedule."""
    if not have_unlabeled:
        return "labeled"
    if not have_labeled:
        return "unlabeled"
    cycle = config.labeled_ratio + config.unlabeled_ratio
    return "labeled" if step % cycle < config.labeled_ratio else "unlabeled"


def select_batch(
    pool: list[TrainingExample], step: int, config: TrainerConfig
) -> list[TrainingExample]:
    import random as _random

    rng = _random.Random(derive_seed(config.seed, step, 17))
    if len(pool) >= config.batch_size:
        return rng.sample(pool, config.batch_size)
    return [rng.choice(pool) for _ in range(config.batch_size)]


def mask_batch(
    batch: list[TrainingExample],
    step: int,
    vocab: Vocabulary,
    config: TrainerConfig,
    masking=None,
) -> list[MaskedExample]:
    return [
        apply_span_mask(ex, derive_seed(config.seed, step, 31, i), vocab, masking)
        for i, ex in enumerate(batch)
    ]


def pass_seeds(step: int, config: TrainerConfig) -> dict[str, int]:
    names = ("mlm", "query_a", "query_b", "resp_a", "resp_b", "policy", "generate")
    return {n: derive_seed(config.seed, step, 101 + i) for i, n in enumerate(names)}


@dataclass
class StepRecord:
    step: int
    source: str
    losses: LossBundle
    learning_rate: float
    wall_time: float

    def to_dict(self) -> dict:
        rec = {"step": self.step, "source": self.source}
        rec.update(self.losses.to_dict())
        rec["learning_rate"] = self.learning_rate
        rec["wall_time"] = self.wall_time
        return rec


def train(
    model: UnifiedDialogModel,
    heads: PretrainHeads,
    optimizer: torch.optim.Optimizer,
    labeled: list[TrainingExample],
    unlabeled: list[TrainingExample],
    vocab: Vocabulary,
    config: TrainerConfig,
    start_step: int = 0,
    on_step=None,
    masking=None,
) -> list[StepRecord]:
    """Run the joint training loop from ``start_step`` to ``config.steps``.

    Batch composition, masking and dropout seeds are pure functions of
    (config.seed, step), so a resumed run retraces the interrupted one
    exactly.
    """
    if not labeled and not unlabeled:
        raise ValueError("no training data")
    model.train()
    records = []
    for step in range(start_step, config.steps):
        source = step_source(step, config, bool(labeled), bool(unlabeled))
        pool = labeled if source == "labeled" else unlabeled
        batch = select_batch(pool, step, config)
        masked = mask_batch(batch, step, vocab, config, masking)
        t0 = time.monotonic()
        bundle = joint_training_step(
            model,
            heads,
            optimizer,
            batch,
            masked,
            vocab,
            config.objective,
            pass_seeds(step, config),
        )
        record = StepRecord(
            step=step,
            source=source,
            losses=bundle,
            learning_rate=optimizer.param_groups[0]["lr"],
            wall_time=time.monotonic() - t0,
        )
        records.append(record)
        if on_step is not None:
            on_step(record)
    return records


def make_optimizer(
    model: UnifiedDialogModel, heads: PretrainHeads, config: TrainerConfig
) -> torch.optim.Optimizer:
    params = list(model.parameters()) + list(heads.parameters())
    return torch.optim.AdamW(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )
