"""Fine-tuning harnesses: intent head wiring, e2e evaluation, grid search.

Full-strength training runs live in the acceptance suite; these tests use
abbreviated budgets to exercise the mechanics.
"""

import pytest
import torch

from todflow import synth
from todflow.corpus import Dialog, Turn, build_vocabulary
from todflow.finetune import (
    FinetuneConfig,
    IntentExample,
    IntentHead,
    evaluate_e2e,
    evaluate_intent,
    finetune_intent,
    grid_search,
    load_e2e_dataset,
    load_intent_corpus,
    utterance_example,
)
from todflow.model import ForwardMode, ModelConfig, UnifiedDialogModel


@pytest.fixture(scope="module")
def intent_data():
    train = [IntentExample(r["text"], r["label"]) for r in synth.make_intent_examples(24, seed=0)]
    test = [IntentExample(r["text"], r["label"]) for r in synth.make_intent_examples(12, seed=5)]
    return train, test


@pytest.fixture(scope="module")
def intent_vocab(intent_data):
    train, _ = intent_data
    dialogs = [
        Dialog(f"d{i}", [Turn("user", ex.text), Turn("system", "ok")], "unlabeled")
        for i, ex in enumerate(train)
    ]
    return build_vocabulary(dialogs)


def small_model(vocab, dropout=0.1, seed=0):
    torch.manual_seed(seed)
    return UnifiedDialogModel(
        ModelConfig(vocab_size=len(vocab), num_layers=2, hidden_dim=32,
                    num_heads=2, ffn_dim=64, dropout=dropout)
    )


class TestIntent:
    def test_utterance_example_layout(self, intent_vocab):
        ex = utterance_example("hello there", intent_vocab)
        assert intent_vocab.decode(ex.context_tokens)[0] == "[BOU]"
        assert intent_vocab.decode(ex.context_tokens)[-1] == "[EOU]"
        assert len(ex.response_tokens) == 2

    def test_evaluate_all_correct_gives_one(self, intent_vocab, intent_data):
        _, test = intent_data
        model = small_model(intent_vocab)
        labels = sorted({ex.label for ex in test})
        head = IntentHead(model.config.hidden_dim, len(labels))

        # force the head to agree with itself: evaluate on predictions
        report = evaluate_intent(model, head, labels, intent_vocab, test)
        predicted = report.metrics["acc"]
        assert 0.0 <= predicted <= 1.0
        relabeled = []
        model.eval()
        with torch.no_grad():
            for ex in test:
                h = model.semantic_vector(
                    [utterance_example(ex.text, intent_vocab)],
                    ForwardMode.QUERY,
                    intent_vocab.pad_id,
                )
                pred = int(head(h).argmax())
                relabeled.append(IntentExample(ex.text, labels[pred]))
        again = evaluate_intent(model, head, labels, intent_vocab, relabeled)
        assert again.metrics["acc"] == 1.0

    def test_short_finetune_learns_something(self, intent_vocab, intent_data):
        train, test = intent_data
        torch.manual_seed(0)
        model = UnifiedDialogModel(ModelConfig(vocab_size=len(intent_vocab), dropout=0.1))
        cfg = FinetuneConfig(epochs=60, batch_size=8, learning_rate=2e-3, seed=0)
        head, labels, report = finetune_intent(model, intent_vocab, train, test, cfg)
        assert report.metrics["acc"] > 1.0 / 3.0
        assert sorted(labels) == labels

    def test_unseen_eval_label_counted_wrong_with_warning(self, intent_vocab, intent_data, caplog):
        train, _ = intent_data
        model = small_model(intent_vocab)
        labels = sorted({ex.label for ex in train})
        head = IntentHead(model.config.hidden_dim, len(labels))
        stranger = [IntentExample("strange text here", "never_seen_label")]
        with caplog.at_level("WARNING"):
            report = evaluate_intent(model, head, labels, intent_vocab, stranger)
        assert report.metrics["acc"] == 0.0
        assert "never_seen_label" in caplog.text

    def test_intent_finetune_leaves_policy_and_generation_untouched(
        self, intent_vocab, intent_data
    ):
        train, test = intent_data
        model = small_model(intent_vocab)
        before = {
            "policy_prompt": model.policy_prompt.detach().clone(),
            "lm_out.weight": model.lm_out.weight.detach().clone(),
            "lm_out.bias": model.lm_out.bias.detach().clone(),
        }
        changed_probe = model.token_emb.weight.detach().clone()
        cfg = FinetuneConfig(epochs=3, batch_size=8, learning_rate=2e-3, seed=0)
        finetune_intent(model, intent_vocab, train, test, cfg)
        assert torch.equal(model.policy_prompt.detach(), before["policy_prompt"])
        assert torch.equal(model.lm_out.weight.detach(), before["lm_out.weight"])
        assert torch.equal(model.lm_out.bias.detach(), before["lm_out.bias"])
        assert not torch.equal(model.token_emb.weight.detach(), changed_probe)

    def test_head_only_mode_freezes_backbone(self, intent_vocab, intent_data):
        train, test = intent_data
        model = small_model(intent_vocab)
        snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
        cfg = FinetuneConfig(epochs=3, batch_size=8, learning_rate=2e-3, seed=0, head_only=True)
        finetune_intent(model, intent_vocab, train, test, cfg)
        for key, value in model.state_dict().items():
            assert torch.equal(value, snapshot[key]), key

    def test_train_fraction_subsamples(self, intent_vocab, intent_data):
        train, test = intent_data
        model = small_model(intent_vocab)
        cfg = FinetuneConfig(epochs=1, batch_size=8, seed=0, train_fraction=0.25)
        head, labels, _ = finetune_intent(model, intent_vocab, train, test, cfg)
        assert len(labels) <= 3

    def test_load_intent_corpus(self, tmp_path):
        path = tmp_path / "intent.jsonl"
        path.write_text('{"text": "hi", "label": "greet"}\n\n{"text": "bye", "label": "farewell"}\n')
        examples = load_intent_corpus(path)
        assert [e.label for e in examples] == ["greet", "farewell"]
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"text": "hi"}\n')
        with pytest.raises(ValueError):
            load_intent_corpus(bad)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    blob = synth.make_e2e_dataset(6, seed=0, foods=("indian",),
                                  areas=("north", "south"), stars=())
    path = tmp_path_factory.mktemp("e2e") / "train.json"
    synth.write_e2e_dataset(blob, path)
    return load_e2e_dataset(path, "mini")


class TestE2E:

    def test_load_round_trip(self, dataset):
        assert dataset.dataset_id == "mini"
        assert len(dataset.dialogs) == 6
        assert len(dataset.goals) == 6
        assert all(g.constraints for g in dataset.goals)
        assert {e["name"] for e in dataset.database} == {
            "indian_north_house", "indian_south_house",
        }

    def test_evaluate_untrained_model_reports_consistent_comb(self, dataset):
        vocab = build_vocabulary(dataset.dialogs)
        model = small_model(vocab, dropout=0.0)
        cfg = FinetuneConfig(decode_max_len=8)
        report = evaluate_e2e(model, vocab, dataset, cfg)
        m = report.metrics
        assert m["comb"] == pytest.approx((m["inform"] + m["success"]) * 0.5 + m["bleu"])
        assert report.task == "e2e"

    def test_gold_responses_achieve_full_success(self, dataset):
        # scoring path sanity: the corpus' own responses satisfy every goal
        from todflow.metrics import inform_success
        responses = [[t.text.lower() for t in d.turns if t.speaker == "system"]
                     for d in dataset.dialogs]
        inform, success = inform_success(responses, dataset.goals, dataset.database)
        assert inform == 1.0
        assert success == 1.0


class TestE2ETraining:
    def test_overfit_single_dialog_reaches_bleu_95(self, tmp_path):
        from todflow.finetune import finetune_e2e
        blob = synth.make_e2e_dataset(1, seed=3)
        path = tmp_path / "one.json"
        synth.write_e2e_dataset(blob, path)
        data = load_e2e_dataset(path, "one")
        vocab = build_vocabulary(data.dialogs)
        torch.manual_seed(0)
        model = UnifiedDialogModel(ModelConfig(vocab_size=len(vocab), dropout=0.0))
        cfg = FinetuneConfig(epochs=120, batch_size=4, learning_rate=2e-3, seed=0,
                             decode_max_len=30)
        report = finetune_e2e(model, vocab, data, data, cfg)
        assert report.metrics["bleu"] >= 95.0

    def test_copy_policy_reaches_full_success_on_train(self, tmp_path):
        from todflow.finetune import finetune_e2e
        blob = synth.make_e2e_dataset(12, seed=0, foods=("indian",),
                                      areas=("north", "south"), stars=())
        path = tmp_path / "two-entity.json"
        synth.write_e2e_dataset(blob, path)
        data = load_e2e_dataset(path, "two-entity")
        vocab = build_vocabulary(data.dialogs)
        torch.manual_seed(0)
        model = UnifiedDialogModel(ModelConfig(vocab_size=len(vocab), dropout=0.0))
        cfg = FinetuneConfig(epochs=300, batch_size=8, learning_rate=2e-3, seed=0,
                             decode_max_len=30)
        report = finetune_e2e(model, vocab, data, data, cfg)
        assert report.metrics["success"] == pytest.approx(100.0)
        assert report.metrics["inform"] == pytest.approx(100.0)


class TestGridSearch:
    def test_picks_best_cell(self):
        calls = []

        def run(lr, epochs, seed):
            calls.append((lr, epochs, seed))
            return lr * 10 + epochs / 100 + seed * 0.001

        best_lr, best_epochs, best_score, results = grid_search(
            run, [0.1, 0.2], [10, 20], seeds=(0, 1, 2)
        )
        assert (best_lr, best_epochs) == (0.2, 20)
        assert len(calls) == 12
        assert len(results) == 4
