"""Semantic trees over dialog-act annotations and their edit-distance similarity.

A turn's annotations (domain, intent, slot=value tuples) expand into a
four-layer labeled tree under a ROOT node.  Siblings are order-free, so trees
are canonicalized by recursive alphabetical sorting before comparison.  The
similarity coefficient between two trees is derived from their edit distance:

    f = max(0, (max(|T1|, |T2|) - d) / max(|T1|, |T2|))

where d is the unit-cost ordered tree edit distance (insert / delete /
relabel) between the canonical forms.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

LAYERS = ("ROOT", "DOMAIN", "INTENT", "SLOT", "VALUE")
NULL_LABEL = "null"
MAX_DEPTH = len(LAYERS)

# Trees above this size are rejected by the exhaustive reference distance;
# the memoized forest recursion stays fast comfortably past the full
# annotation-example trees (10 nodes).
ORACLE_MAX_NODES = 12


@dataclass
class Node:
    """One tree node: a label plus an ordered list of children."""

    label: str
    children: list["Node"] = field(default_factory=list)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)

    def to_tuple(self) -> tuple:
        """Immutable (hashable) form: (label, child_tuple, ...)."""
        return (self.label,) + tuple(c.to_tuple() for c in self.children)

    def __eq__(self, other) -> bool:
        return isinstance(other, Node) and self.to_tuple() == other.to_tuple()

    def __hash__(self) -> int:
        return hash(self.to_tuple())


@dataclass
class SemanticTree:
    """A labeled tree rooted at ROOT with at most one layer per annotation level."""

    root: Node

    @property
    def size(self) -> int:
        return self.root.size()

    def layer_of(self, depth: int) -> str:
        return LAYERS[depth]

    def is_canonical(self) -> bool:
        return _is_canonical(self.root)

    def __eq__(self, other) -> bool:
        return isinstance(other, SemanticTree) and self.root == other.root

    def __hash__(self) -> int:
        return hash(self.root)

    def __repr__(self) -> str:
        return f"SemanticTree({_serialize(self.root)})"


def _serialize(node: Node) -> str:
    if not node.children:
        return node.label
    inner = ",".join(_serialize(c) for c in node.children)
    return f"{node.label}({inner})"


def _normalize_label(label: str | None) -> str:
    """Lowercased, whitespace-trimmed label; absent values become the NULL marker."""
    if label is None:
        return NULL_LABEL
    label = label.strip().lower()
    return label if label else NULL_LABEL


def build_semantic_tree(annotations) -> SemanticTree:
    """Expand a list of dialog-act annotations into a semantic tree.

    Distinct domains become children of ROOT, distinct (domain, intent) pairs
    become intent nodes, and so on down to value leaves.  Missing elements at
    any layer appear as NULL nodes, so an empty annotation list yields the
    five-node all-NULL chain.  Duplicate annotations collapse (set semantics
    per layer).
    """
    paths: list[tuple[str, str, str, str]] = []
    for ann in annotations:
        domain = _normalize_label(getattr(ann, "domain", None))
        intent = _normalize_label(getattr(ann, "intent", None))
        slots = list(getattr(ann, "slots", []) or [])
        if not slots:
            paths.append((domain, intent, NULL_LABEL, NULL_LABEL))
            continue
        for slot, value in slots:
            paths.append(
                (domain, intent, _normalize_label(slot), _normalize_label(value))
            )
    if not paths:
        paths.append((NULL_LABEL, NULL_LABEL, NULL_LABEL, NULL_LABEL))

    root = Node("root")
    for path in paths:
        node = root
        for label in path:
            child = next((c for c in node.children if c.label == label), None)
            if child is None:
                child = Node(label)
                node.children.append(child)
            node = child
    return SemanticTree(root)


def canonicalize(tree: SemanticTree) -> SemanticTree:
    """Return a copy with siblings sorted ascending by label at every node.

    Ties between equal labels are broken by the serialized subtree, making the
    canonical form deterministic even for hand-built trees with repeated
    sibling labels.  Idempotent.
    """
    return SemanticTree(_canonical_node(tree.root))


def _canonical_node(node: Node) -> Node:
    children = [_canonical_node(c) for c in node.children]
    children.sort(key=lambda c: (c.label, _serialize(c)))
    return Node(node.label, children)


def _is_canonical(node: Node) -> bool:
    keys = [(c.label, _serialize(c)) for c in node.children]
    if keys != sorted(keys):
        return False
    return all(_is_canonical(c) for c in node.children)


def _require_canonical(tree: SemanticTree, name: str) -> None:
    if not tree.is_canonical():
        raise ValueError(f"{name} is not canonical; call canonicalize() first")


# ---------------------------------------------------------------------------
# Ordered tree edit distance (keyroot dynamic program)
# ---------------------------------------------------------------------------


class _PostorderTree:
    """Postorder node array with leftmost-descendant indices and keyroots."""

    def __init__(self, root: Node):
        self.labels: list[str] = []
        self.lmd: list[int] = []

        def walk(node: Node) -> int:
            first_leaf = None
            for child in node.children:
                leaf = walk(child)
                if first_leaf is None:
                    first_leaf = leaf
            idx = len(self.labels)
            self.labels.append(node.label)
            self.lmd.append(first_leaf if first_leaf is not None else idx)
            return self.lmd[idx]

        walk(root)
        # keyroots: deepest node for every distinct leftmost descendant
        seen: dict[int, int] = {}
        for i, l in enumerate(self.lmd):
            seen[l] = i
        self.keyroots = sorted(seen.values())


def tree_edit_distance(t1: SemanticTree, t2: SemanticTree) -> int:
    """Unit-cost edit distance between two canonical trees.

    Minimum number of node insertions, deletions and relabels transforming t1
    into t2, computed by the classic keyroot dynamic program over postorder
    traversals.  Both inputs must already be canonical.
    """
    _require_canonical(t1, "t1")
    _require_canonical(t2, "t2")

    a = _PostorderTree(t1.root)
    b = _PostorderTree(t2.root)
    n, m = len(a.labels), len(b.labels)
    treedist = np.zeros((n, m), dtype=np.int64)

    for i in a.keyroots:
        for j in b.keyroots:
            _keyroot_distance(a, b, i, j, treedist)
    return int(treedist[n - 1][m - 1])


def _keyroot_distance(a: _PostorderTree, b: _PostorderTree, i: int, j: int, treedist) -> None:
    ioff = a.lmd[i] - 1
    joff = b.lmd[j] - 1
    p = i - a.lmd[i] + 2
    q = j - b.lmd[j] + 2
    fd = np.zeros((p, q), dtype=np.int64)
    fd[1:, 0] = np.arange(1, p)
    fd[0, 1:] = np.arange(1, q)

    for x in range(1, p):
        for y in range(1, q):
            if a.lmd[i] == a.lmd[x + ioff] and b.lmd[j] == b.lmd[y + joff]:
                relabel = 0 if a.labels[x + ioff] == b.labels[y + joff] else 1
                fd[x][y] = min(
                    fd[x - 1][y] + 1,
                    fd[x][y - 1] + 1,
                    fd[x - 1][y - 1] + relabel,
                )
                treedist[x + ioff][y + joff] = fd[x][y]
            else:
                u = a.lmd[x + ioff] - 1 - ioff
                v = b.lmd[y + joff] - 1 - joff
                fd[x][y] = min(
                    fd[x - 1][y] + 1,
                    fd[x][y - 1] + 1,
                    fd[u][v] + treedist[x + ioff][y + joff],
                )


# ---------------------------------------------------------------------------
# Exhaustive reference distance (test oracle)
# ---------------------------------------------------------------------------


def oracle_tree_edit_distance(t1: SemanticTree, t2: SemanticTree) -> int:
    """Exact edit distance by exhaustive forest decomposition with memoization.

    Ground truth for tree_edit_distance on small trees; refuses inputs larger
    than ORACLE_MAX_NODES nodes.
    """
    for name, t in (("t1", t1), ("t2", t2)):
        if t.size > ORACLE_MAX_NODES:
            raise ValueError(
                f"{name} has {t.size} nodes; oracle is limited to {ORACLE_MAX_NODES}"
            )
    return _forest_distance((t1.root.to_tuple(),), (t2.root.to_tuple(),))


def _tuple_size(t: tuple) -> int:
    return 1 + sum(_tuple_size(c) for c in t[1:])


@functools.lru_cache(maxsize=None)
def _forest_distance(f1: tuple, f2: tuple) -> int:
    """Edit distance between two ordered forests of tuple-encoded trees.

    Decomposes on the rightmost roots: delete it (children splice into the
    forest), insert the other side's rightmost root, or match the two roots
    and recurse into their child forests.
    """
    if not f1 and not f2:
        return 0
    if not f1:
        return sum(_tuple_size(t) for t in f2)
    if not f2:
        return sum(_tuple_size(t) for t in f1)

    t1, t2 = f1[-1], f2[-1]
    delete = _forest_distance(f1[:-1] + t1[1:], f2) + 1
    insert = _forest_distance(f1, f2[:-1] + t2[1:]) + 1
    match = (
        _forest_distance(t1[1:], t2[1:])
        + _forest_distance(f1[:-1], f2[:-1])
        + (0 if t1[0] == t2[0] else 1)
    )
    return min(delete, insert, match)


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------


def similarity_coefficient(t1: SemanticTree, t2: SemanticTree) -> float:
    """Size-normalized tree similarity in [0, 1]; 1 iff the canonical trees match.

    Unit-cost distance between very differently shaped trees can exceed the
    larger node count, so the coefficient is clamped at zero to keep the
    stated range.
    """
    _require_canonical(t1, "t1")
    _require_canonical(t2, "t2")
    d = tree_edit_distance(t1, t2)
    larger = max(t1.size, t2.size)
    return max(0.0, (larger - d) / larger)


@dataclass
class SimilarityMatrix:
    """Pairwise similarity coefficients f and edit distances d over a tree list."""

    f: np.ndarray
    d: np.ndarray


def batch_similarity_matrix(trees: list[SemanticTree]) -> SimilarityMatrix:
    """All-pairs similarity over a list of trees (not necessarily canonical).

    Equal trees (e.g. dropout-duplicated samples sharing one tree) get entry 1.
    """
    if not trees:
        raise ValueError("batch_similarity_matrix requires at least one tree")
    canon = [t if t.is_canonical() else canonicalize(t) for t in trees]
    n = len(canon)
    d = np.zeros((n, n), dtype=np.int64)
    f = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if canon[i] == canon[j]:
                dij = 0
            else:
                dij = tree_edit_distance(canon[i], canon[j])
            d[i, j] = d[j, i] = dij
            larger = max(canon[i].size, canon[j].size)
            fij = max(0.0, (larger - dij) / larger)
            f[i, j] = f[j, i] = fij
    return SimilarityMatrix(f=f, d=d)
