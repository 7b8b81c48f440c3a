import random

import pytest
import torch

from todflow import synth
from todflow.corpus import assemble_example, build_vocabulary, load_corpus
from todflow.model import ModelConfig, UnifiedDialogModel
from todflow.semtree import Node, SemanticTree, canonicalize


@pytest.fixture(scope="session")
def labeled_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "labeled.jsonl"
    synth.write_jsonl(synth.make_pretrain_dialogs(8, seed=0), path)
    return path


@pytest.fixture(scope="session")
def labeled_dialogs(labeled_corpus_path):
    return load_corpus(labeled_corpus_path, "labeled")


@pytest.fixture(scope="session")
def vocab(labeled_dialogs):
    return build_vocabulary(labeled_dialogs)


@pytest.fixture(scope="session")
def examples(labeled_dialogs, vocab):
    return [
        assemble_example(d, k, vocab)
        for d in labeled_dialogs
        for k in range(1, d.num_pairs + 1)
    ]


@pytest.fixture
def tiny_model(vocab):
    torch.manual_seed(0)
    config = ModelConfig(
        vocab_size=len(vocab), num_layers=2, hidden_dim=32, num_heads=2,
        ffn_dim=64, dropout=0.1,
    )
    return UnifiedDialogModel(config)


def random_tree(rng: random.Random, max_nodes: int = 8, labels=None) -> SemanticTree:
    """Random canonical tree with bounded size and the domain's depth cap."""
    labels = labels or ["a", "b", "c", "d", "null"]
    n = rng.randint(1, max_nodes)
    root = Node(rng.choice(labels))
    nodes = [(root, 1)]
    count = 1
    while count < n:
        parent, depth = rng.choice(nodes)
        if depth >= 5:
            continue
        child = Node(rng.choice(labels))
        parent.children.append(child)
        nodes.append((child, depth + 1))
        count += 1
    return canonicalize(SemanticTree(root))
