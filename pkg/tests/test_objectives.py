"""Loss definitions: closed forms, reduction identities, reference evaluators.

The batched contrastive implementation is checked against a straight-line
per-scalar evaluator written directly from the weighted-softmax definition,
kept deliberately loop-based and independent of the tensor code.
"""

import math
import random

import pytest
import torch

from todflow.corpus import apply_span_mask
from todflow.model import ForwardMode
from todflow.objectives import (
    BowHead,
    LossBundle,
    ObjectiveConfig,
    PretrainHeads,
    ProjectionHead,
    TrainingDiverged,
    bow_loss,
    compute_joint_loss,
    contrastive_loss,
    make_contrastive_batch,
    policy_semantic_loss,
    response_generation_loss,
    self_supervised_contrastive_loss,
    span_mlm_loss,
    supervised_contrastive_loss,
)

LN10 = math.log(10.0)


def reference_supervised(z, f, tau):
    """Direct per-scalar evaluation of the weighted contrastive definition."""
    n = len(z)
    total = 0.0
    for i in range(n):
        weight_sum = sum(f[i][v] for v in range(n) if v != i)
        if weight_sum == 0:
            continue
        for j in range(n):
            if j == i:
                continue
            num = math.exp(sum(a * b for a, b in zip(z[i], z[j])) / tau)
            den = sum(
                math.exp(sum(a * b for a, b in zip(z[i], z[l])) / tau)
                for l in range(n)
                if l != i
            )
            total -= (f[i][j] / weight_sum) * math.log(num / den)
    return total


def reference_self(z, pairing, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        num = math.exp(sum(a * b for a, b in zip(z[i], z[pairing[i]])) / tau)
        den = sum(
            math.exp(sum(a * b for a, b in zip(z[i], z[l])) / tau)
            for l in range(n)
            if l != i
        )
        total -= math.log(num / den)
    return total


def random_unit_vectors(n, dim, seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, dim, generator=g, dtype=torch.float64)
    return z / z.norm(dim=1, keepdim=True)


class TestSpanMlmLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = torch.zeros(1, 10)
        loss = span_mlm_loss(logits, torch.tensor([3]))
        assert float(loss) == pytest.approx(LN10, abs=1e-6)

    def test_confident_correct_prediction_goes_to_zero(self):
        logits = torch.full((1, 10), -1e4)
        logits[0, 3] = 1e4
        loss = span_mlm_loss(logits, torch.tensor([3]))
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_empty_mask_set_is_zero(self):
        loss = span_mlm_loss(torch.zeros(0, 10), torch.zeros(0, dtype=torch.long))
        assert float(loss) == 0.0


class TestProjection:
    def test_identity_weights_normalize(self):
        head = ProjectionHead(4)
        with torch.no_grad():
            head.linear.weight.copy_(torch.eye(4))
            head.linear.bias.zero_()
        out = head(torch.tensor([[3.0, 4.0, 0.0, 0.0]]))
        assert torch.allclose(out, torch.tensor([[0.6, 0.8, 0.0, 0.0]]), atol=1e-7)

    def test_unit_norm_postcondition(self):
        head = ProjectionHead(8)
        g = torch.Generator().manual_seed(0)
        h = torch.randn(16, 8, generator=g)
        norms = head(h).norm(dim=1)
        assert torch.allclose(norms, torch.ones(16), atol=1e-6)

    def test_scale_invariant_when_bias_zero(self):
        head = ProjectionHead(6)
        with torch.no_grad():
            head.linear.bias.zero_()
        g = torch.Generator().manual_seed(1)
        h = torch.randn(4, 6, generator=g)
        assert torch.allclose(head(h), head(2.0 * h), atol=1e-6)

    def test_zero_vector_fatal(self):
        head = ProjectionHead(4)
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        with pytest.raises(FloatingPointError):
            head(torch.ones(1, 4))


class TestSupervisedContrastive:
    def test_matches_reference_on_random_batches(self):
        rng = random.Random(0)
        for trial in range(20):
            n = 2 * rng.randint(1, 4)
            z = random_unit_vectors(n, 6, seed=trial)
            g = torch.Generator().manual_seed(1000 + trial)
            f = torch.rand(n, n, generator=g, dtype=torch.float64)
            f = (f + f.t()) / 2
            f.fill_diagonal_(1.0)
            tau = rng.choice([0.07, 0.5, 1.0])
            ours = float(supervised_contrastive_loss(z, f, tau))
            ref = reference_supervised(z.tolist(), f.tolist(), tau)
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_two_identical_vectors_give_zero(self):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        f = torch.tensor([[1.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
        assert float(supervised_contrastive_loss(z, f, 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_indicator_weights_reduce_to_self_supervised(self):
        for trial in range(50):
            n = 2 * random.Random(trial).randint(1, 5)
            half = n // 2
            z = random_unit_vectors(n, 8, seed=trial)
            pairing = torch.cat([torch.arange(half, n), torch.arange(0, half)])
            f = torch.zeros(n, n, dtype=torch.float64)
            for i in range(n):
                f[i, pairing[i]] = 1.0
            sup = float(supervised_contrastive_loss(z, f, 0.07))
            self_ = float(self_supervised_contrastive_loss(z, pairing, 0.07))
            assert sup == pytest.approx(self_, abs=1e-6)

    def test_zero_weight_row_contributes_nothing(self):
        z = random_unit_vectors(4, 4, seed=5)
        f = torch.ones(4, 4, dtype=torch.float64)
        f[0, :] = 0.0
        full = supervised_contrastive_loss(z, f, 0.5)
        assert torch.isfinite(full)

    def test_include_self_term_flag_changes_value_and_stays_finite(self):
        z = random_unit_vectors(4, 4, seed=9)
        g = torch.Generator().manual_seed(2)
        f = torch.rand(4, 4, generator=g, dtype=torch.float64)
        f = (f + f.t()) / 2
        f.fill_diagonal_(1.0)
        excluded = float(supervised_contrastive_loss(z, f, 0.5, include_self_term=False))
        included = float(supervised_contrastive_loss(z, f, 0.5, include_self_term=True))
        assert math.isfinite(included)
        assert included != pytest.approx(excluded, abs=1e-9)


class TestSelfSupervisedContrastive:
    def test_orthogonal_negatives_closed_form(self):
        # pairs share an axis, negatives orthogonal: per anchor -log(e/(e+2))
        z = torch.tensor(
            [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64
        )
        pairing = torch.tensor([2, 3, 0, 1])
        loss = float(self_supervised_contrastive_loss(z, pairing, 1.0))
        expected = 4 * math.log((math.e + 2) / math.e)
        assert loss == pytest.approx(expected, abs=1e-9)
        assert loss == pytest.approx(2.206, abs=1e-3)

    def test_sole_candidate_pair_gives_zero(self):
        z = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64)
        pairing = torch.tensor([1, 0])
        assert float(self_supervised_contrastive_loss(z, pairing, 1.0)) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_matches_reference(self):
        for trial in range(10):
            n = 6
            z = random_unit_vectors(n, 5, seed=trial)
            pairing = torch.tensor([3, 4, 5, 0, 1, 2])
            ours = float(self_supervised_contrastive_loss(z, pairing, 0.3))
            ref = reference_self(z.tolist(), pairing.tolist(), 0.3)
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_permutation_invariance(self):
        z = random_unit_vectors(6, 5, seed=3)
        pairing = torch.tensor([3, 4, 5, 0, 1, 2])
        base = float(self_supervised_contrastive_loss(z, pairing, 0.2))
        perm = torch.tensor([2, 0, 1, 5, 3, 4])
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(6)
        z_p = z[perm]
        pairing_p = inv[pairing[perm]]
        permuted = float(self_supervised_contrastive_loss(z_p, pairing_p, 0.2))
        assert permuted == pytest.approx(base, abs=1e-9)


class TestContrastiveRouting:
    def test_unlabeled_batch_uses_self_supervised(self, examples, vocab):
        unlabeled = [ex for ex in examples[:2]]
        for ex in unlabeled:
            ex = ex  # keep originals; build copies below
        import dataclasses
        unlabeled = [dataclasses.replace(ex, labeled=False, query_tree=None,
                                         response_tree=None) for ex in examples[:2]]
        batch = make_contrastive_batch(unlabeled, (0, 1), 0.07)
        assert not batch.labeled
        z = random_unit_vectors(4, 6, seed=0).float()
        head = ProjectionHead(6)
        with torch.no_grad():
            loss = contrastive_loss(batch, z, z, head)
            zq = head(z)
            expected = 2 * float(
                self_supervised_contrastive_loss(zq, batch.pairing(), 0.07)
            )
        assert float(loss) == pytest.approx(expected, rel=1e-6)

    def test_labeled_batch_builds_similarity_weights(self, examples):
        batch = make_contrastive_batch(examples[:3], (0, 1), 0.07)
        assert batch.labeled
        assert batch.f_query.shape == (6, 6)
        assert torch.allclose(torch.diagonal(batch.f_query), torch.ones(6, dtype=torch.float64))
        # duplicated twin entries share the tree: similarity exactly 1
        for i in range(3):
            assert float(batch.f_query[i, i + 3]) == 1.0

    def test_labeled_batch_missing_trees_fatal(self, examples):
        import dataclasses
        broken = [dataclasses.replace(examples[0], query_tree=None)]
        with pytest.raises(ValueError):
            make_contrastive_batch(broken, (0, 1), 0.07)

    def test_mixed_batch_fatal(self, examples):
        import dataclasses
        mixed = [examples[0], dataclasses.replace(examples[1], labeled=False)]
        with pytest.raises(ValueError):
            make_contrastive_batch(mixed, (0, 1), 0.07)


class TestBowLoss:
    def make_uniform_head(self, dim=4, vocab=10):
        head = BowHead(dim, vocab).double()
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        return head

    @torch.no_grad()
    def test_uniform_distribution_three_tokens(self):
        head = self.make_uniform_head()
        loss = bow_loss(torch.zeros(1, 4, dtype=torch.float64), [[1, 2, 3]], head)
        assert float(loss) == pytest.approx(3 * LN10, abs=1e-9)

    @torch.no_grad()
    def test_order_invariance(self):
        head = BowHead(4, 10).double()
        g = torch.Generator().manual_seed(0)
        h = torch.randn(1, 4, generator=g, dtype=torch.float64)
        a = float(bow_loss(h, [[1, 5, 7, 2]], head))
        b = float(bow_loss(h, [[7, 2, 1, 5]], head))
        assert a == pytest.approx(b, abs=1e-9)

    @torch.no_grad()
    def test_repeated_token_counted_twice(self):
        head = self.make_uniform_head()
        once = float(bow_loss(torch.zeros(1, 4, dtype=torch.float64), [[3]], head))
        twice = float(bow_loss(torch.zeros(1, 4, dtype=torch.float64), [[3, 3]], head))
        assert twice == pytest.approx(2 * once, abs=1e-9)

    def test_probabilities_sum_to_one(self):
        head = BowHead(4, 10)
        g = torch.Generator().manual_seed(1)
        probs = head.probabilities(torch.randn(5, 4, generator=g))
        assert torch.allclose(probs.sum(dim=1), torch.ones(5), atol=1e-6)


class TestPolicySemanticLoss:
    def test_coincident_vectors(self):
        h = torch.ones(2, 8)
        assert float(policy_semantic_loss(h, h.clone())) == 0.0

    def test_unit_offset(self):
        a = torch.zeros(1, 4)
        b = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
        assert float(policy_semantic_loss(a, b)) == pytest.approx(1.0, abs=1e-9)

    def test_one_two_offset_gives_five(self):
        a = torch.zeros(1, 2)
        b = torch.tensor([[1.0, 2.0]])
        assert float(policy_semantic_loss(a, b)) == pytest.approx(5.0, abs=1e-9)

    def test_dimension_mismatch_fatal(self):
        with pytest.raises(ValueError):
            policy_semantic_loss(torch.zeros(1, 4), torch.zeros(1, 5))

    def test_stop_gradient_detaches_response_side(self):
        a = torch.zeros(1, 3, requires_grad=True)
        b = torch.ones(1, 3, requires_grad=True)
        policy_semantic_loss(a, b, stop_gradient=True).backward()
        assert b.grad is None
        assert a.grad is not None


class TestGenerationLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(1, 5, 10)
        loss = response_generation_loss(logits, [[0, 1, 2, 3, 4]])
        assert float(loss) == pytest.approx(LN10, abs=1e-6)

    def test_perfect_prediction(self):
        tokens = [5, 1, 2, 6]
        logits = torch.full((1, 4, 10), -1e4)
        for t, nxt in enumerate(tokens[1:]):
            logits[0, t, nxt] = 1e4
        loss = response_generation_loss(logits, [tokens])
        assert float(loss) == pytest.approx(0.0, abs=1e-6)


class TestJointLoss:
    def test_sum_identity_and_finiteness(self, tiny_model, examples, vocab):
        heads = PretrainHeads(tiny_model.config.hidden_dim, len(vocab))
        masked = [apply_span_mask(ex, i, vocab) for i, ex in enumerate(examples[:3])]
        total, bundle = compute_joint_loss(
            tiny_model, heads, examples[:3], masked, vocab, ObjectiveConfig(),
            seeds={"mlm": 1, "query_a": 2, "query_b": 3, "resp_a": 4, "resp_b": 5,
                   "policy": 6, "generate": 7},
        )
        parts = (bundle.span_mlm + bundle.contrastive + bundle.bow
                 + bundle.policy + bundle.generation)
        assert bundle.joint == pytest.approx(parts, abs=1e-9)
        assert math.isfinite(bundle.joint)
        assert float(total.detach()) == pytest.approx(bundle.joint, rel=1e-6)

    def test_batch_order_invariance_with_dropout_off(self, vocab, examples):
        import todflow.model as model_mod
        cfg = model_mod.ModelConfig(
            vocab_size=len(vocab), num_layers=1, hidden_dim=16, num_heads=2,
            ffn_dim=32, dropout=0.0,
        )
        torch.manual_seed(0)
        model = model_mod.UnifiedDialogModel(cfg).double()
        heads = PretrainHeads(16, len(vocab)).double()
        batch = examples[:3]
        masked = [apply_span_mask(ex, i, vocab) for i, ex in enumerate(batch)]
        _, fwd = compute_joint_loss(model, heads, batch, masked, vocab, ObjectiveConfig())
        perm = [2, 0, 1]
        _, rev = compute_joint_loss(
            model, heads, [batch[i] for i in perm], [masked[i] for i in perm],
            vocab, ObjectiveConfig(),
        )
        for field in ("span_mlm", "contrastive", "bow", "policy", "generation"):
            assert getattr(fwd, field) == pytest.approx(getattr(rev, field), abs=1e-8)

    def test_duplicates_identical_with_dropout_off(self, vocab, examples):
        import todflow.model as model_mod
        cfg = model_mod.ModelConfig(
            vocab_size=len(vocab), num_layers=1, hidden_dim=16, num_heads=2,
            ffn_dim=32, dropout=0.0,
        )
        torch.manual_seed(1)
        model = model_mod.UnifiedDialogModel(cfg)
        model.train()
        a = model.semantic_vector(examples[:2], ForwardMode.QUERY, vocab.pad_id, 11)
        b = model.semantic_vector(examples[:2], ForwardMode.QUERY, vocab.pad_id, 22)
        assert torch.equal(a, b)

    def test_divergence_detected(self):
        with pytest.raises(TrainingDiverged) as err:
            raise TrainingDiverged("bow", float("nan"))
        assert err.value.component == "bow"

    def test_policy_and_contrastive_ignore_generation_head(self, tiny_model, examples, vocab):
        heads = PretrainHeads(tiny_model.config.hidden_dim, len(vocab))
        masked = [apply_span_mask(ex, i, vocab) for i, ex in enumerate(examples[:2])]
        seeds = {k: i for i, k in enumerate(
            ("mlm", "query_a", "query_b", "resp_a", "resp_b", "policy", "generate"))}
        _, before = compute_joint_loss(
            tiny_model, heads, examples[:2], masked, vocab, ObjectiveConfig(), seeds
        )
        with torch.no_grad():
            tiny_model.lm_out.weight.zero_()
            tiny_model.lm_out.bias.zero_()
        _, after = compute_joint_loss(
            tiny_model, heads, examples[:2], masked, vocab, ObjectiveConfig(), seeds
        )
        assert after.policy == pytest.approx(before.policy, abs=1e-9)
        assert after.contrastive == pytest.approx(before.contrastive, abs=1e-9)
        assert after.generation != pytest.approx(before.generation, abs=1e-9)

    def test_loss_bundle_serialization(self):
        bundle = LossBundle(1.0, 2.0, 3.0, 4.0, 5.0)
        record = bundle.to_dict()
        assert record["joint"] == pytest.approx(15.0)
        assert set(record) == {"span_mlm", "contrastive", "bow", "policy",
                               "generation", "joint"}
