"""todflow: a desk-scale unified task-oriented dialog model.

One shared-parameter transformer, split by attention masks into context
encoding, understanding, policy and generation stages, trained jointly with
five objectives over labeled and unlabeled dialog corpora, plus fine-tuning
and evaluation harnesses and a tree-similarity kernel over dialog-act
annotations.
"""

__version__ = "0.1.0"
