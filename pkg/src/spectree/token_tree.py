"""Token trees: construction by prefix merge, traversal, and greedy verification.

A tree is stored as two parallel tuples, ``tokens`` and ``parents``.  Node 0 is
the root and carries the last verified token of the running sequence; every
other node's parent has a smaller id.  Trees produced by
:func:`merge_sequences` number their nodes in depth-first preorder with
children visited in ascending token order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .errors import (
    EmptyInput,
    InvalidTree,
    MissingOutput,
    RootMismatch,
    TreeTooLarge,
    UnknownNode,
)

ROOT = -1
MAX_TREE_NODES = 64


@dataclass(frozen=True)
class TokenTree:
    tokens: tuple[int, ...]
    parents: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.parents):
            raise InvalidTree("tokens and parents differ in length")
        if not self.tokens:
            raise InvalidTree("a token tree needs a root")
        if self.parents[0] != ROOT:
            raise InvalidTree("node 0 must be the root")
        seen: set[tuple[int, int]] = set()
        for node in range(1, len(self.tokens)):
            parent = self.parents[node]
            if not 0 <= parent < node:
                raise InvalidTree(f"node {node} has parent {parent}; parents must precede children")
            key = (parent, self.tokens[node])
            if key in seen:
                raise InvalidTree(f"node {parent} has two children with token {self.tokens[node]}")
            seen.add(key)
        if any(t < 0 for t in self.tokens):
            raise InvalidTree("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def root(self) -> int:
        return 0

    @cached_property
    def _children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in self.tokens]
        for node in range(1, len(self.tokens)):
            kids[self.parents[node]].append(node)
        return tuple(tuple(sorted(k, key=lambda n: self.tokens[n])) for k in kids)

    @cached_property
    def _child_by_token(self) -> tuple[dict[int, int], ...]:
        return tuple({self.tokens[c]: c for c in kids} for kids in self._children)

    @cached_property
    def _depths(self) -> tuple[int, ...]:
        depths = [0] * len(self.tokens)
        for node in range(1, len(self.tokens)):
            depths[node] = depths[self.parents[node]] + 1
        return tuple(depths)

    def _check(self, node: int) -> None:
        if not 0 <= node < len(self.tokens):
            raise UnknownNode(node)

    def children(self, node: int) -> tuple[int, ...]:
        """Child node ids, ordered by ascending token."""
        self._check(node)
        return self._children[node]

    def child_with_token(self, node: int, token: int) -> int | None:
        self._check(node)
        return self._child_by_token[node].get(token)

    def depth(self, node: int) -> int:
        self._check(node)
        return self._depths[node]

    @property
    def max_depth(self) -> int:
        return max(self._depths)

    def path(self, node: int) -> list[int]:
        """Node ids from the root down to ``node`` inclusive."""
        self._check(node)
        out = []
        while node != ROOT:
            out.append(node)
            node = self.parents[node]
        return out[::-1]

    def leaves(self) -> list[int]:
        return [n for n in range(len(self.tokens)) if not self._children[n]]

    def preorder(self) -> list[int]:
        order, stack = [], [0]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(self._children[node]))
        return order

    def sequences(self) -> list[list[int]]:
        """Token sequences of every root-to-leaf path, in preorder."""
        return [ancestors(self, leaf) for leaf in self.preorder() if not self._children[leaf]]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "parents": list(self.parents)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "TokenTree":
        return cls(tuple(int(t) for t in data["tokens"]), tuple(int(p) for p in data["parents"]))


def merge_sequences(sequences: Iterable[Sequence[int]], max_nodes: int | None = MAX_TREE_NODES) -> TokenTree:
    """Merge token sequences that share a first token into one prefix tree.

    The result has exactly one node per distinct prefix of the inputs.
    ``max_nodes=None`` disables the size cap.
    """
    sequences = [list(s) for s in sequences]
    if not sequences or any(len(s) == 0 for s in sequences):
        raise EmptyInput("need at least one non-empty sequence")
    root_token = sequences[0][0]
    if any(s[0] != root_token for s in sequences):
        raise RootMismatch("all sequences must start with the same token")

    trie: dict = {}
    for seq in sequences:
        level = trie
        for tok in seq[1:]:
            level = level.setdefault(int(tok), {})

    tokens, parents = [int(root_token)], [ROOT]

    def place(level: dict, parent: int) -> None:
        for tok in sorted(level):
            node = len(tokens)
            tokens.append(tok)
            parents.append(parent)
            place(level[tok], node)

    place(trie, 0)
    if max_nodes is not None and len(tokens) > max_nodes:
        raise TreeTooLarge(f"merged tree has {len(tokens)} nodes, cap is {max_nodes}")
    return TokenTree(tuple(tokens), tuple(parents))


def ancestors(tree: TokenTree, node: int) -> list[int]:
    """Token sequence from the root to ``node`` inclusive."""
    return [tree.tokens[n] for n in tree.path(node)]


def dfs_chains(tree: TokenTree) -> list[list[int]]:
    """Split the depth-first order of non-root nodes into maximal parent-linked runs.

    >>> t = merge_sequences([[2, 3, 4, 5], [2, 3, 6, 7], [2, 3, 8, 9]])
    >>> [[t.tokens[n] for n in chain] for chain in dfs_chains(t)]
    [[3, 4, 5], [6, 7], [8, 9]]
    """
    chains: list[list[int]] = []
    prev = tree.root
    for node in tree.preorder()[1:]:
        if chains and tree.parents[node] == prev:
            chains[-1].append(node)
        else:
            chains.append([node])
        prev = node
    return chains


def verify_path(tree: TokenTree, llm_outputs: Mapping[int, int] | Sequence[int]) -> tuple[list[int], list[int]]:
    """Greedy verification returning ``(matched_node_ids, verified_tokens)``.

    ``matched_node_ids`` excludes the root; ``verified_tokens`` holds the
    token of every matched node followed by the bonus token.
    """
    for node in range(len(tree)):
        try:
            llm_outputs[node]
        except (KeyError, IndexError):
            raise MissingOutput(node) from None
    node = tree.root
    matched: list[int] = []
    verified: list[int] = []
    while True:
        child = tree.child_with_token(node, int(llm_outputs[node]))
        if child is None:
            break
        node = child
        matched.append(node)
        verified.append(tree.tokens[node])
    verified.append(int(llm_outputs[node]))
    return matched, verified


def verify(tree: TokenTree, llm_outputs: Mapping[int, int] | Sequence[int]) -> list[int]:
    """Tokens accepted from ``tree`` given the LLM's greedy output at every node."""
    return verify_path(tree, llm_outputs)[1]
