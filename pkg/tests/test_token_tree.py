import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_tree
from spectree.errors import EmptyInput, InvalidTree, MissingOutput, RootMismatch, TreeTooLarge, UnknownNode
from spectree.token_tree import (
    ROOT,
    TokenTree,
    ancestors,
    dfs_chains,
    merge_sequences,
    verify,
)


def tree_tokens(tree):
    return [list(tree.tokens[n] for n in chain) for chain in dfs_chains(tree)]


def prefixes(sequences):
    return {tuple(s[:i]) for s in sequences for i in range(1, len(s) + 1)}


def naive_chains(tree):
    """Recursive DFS; a node starts a new chain unless it follows its parent."""
    order = []

    def visit(node):
        order.append(node)
        kids = [n for n in range(len(tree)) if tree.parents[n] == node]
        for kid in sorted(kids, key=lambda n: tree.tokens[n]):
            visit(kid)

    visit(0)
    chains, prev = [], 0
    for node in order[1:]:
        if chains and tree.parents[node] == prev:
            chains[-1].append(node)
        else:
            chains.append([node])
        prev = node
    return chains


class TestMerge:
    def test_example_pair(self):
        tree = merge_sequences([[2, 3, 4, 5], [2, 3, 8, 9]])
        # six distinct prefixes: t2, t2t3, t2t3t4, t2t3t4t5, t2t3t8, t2t3t8t9
        assert len(tree) == 6
        assert tree.tokens == (2, 3, 4, 5, 8, 9)
        assert tree.parents == (ROOT, 0, 1, 2, 1, 4)
        assert sorted(map(tuple, tree.sequences())) == [(2, 3, 4, 5), (2, 3, 8, 9)]
        three = tree.child_with_token(0, 3)
        assert [tree.tokens[c] for c in tree.children(three)] == [4, 8]

    def test_single_sequence_is_linear(self):
        tree = merge_sequences([[7, 1, 1]])
        assert tree.tokens == (7, 1, 1)
        assert tree.parents == (ROOT, 0, 1)

    def test_random_sequences_node_count(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            seqs = [[0] + list(rng.integers(0, 4, size=3)) for _ in range(5)]
            assert len(merge_sequences(seqs)) == len(prefixes(seqs))

    def test_preorder_ids_with_ascending_children(self):
        tree = merge_sequences([[0, 5, 1], [0, 2, 9], [0, 5, 0]])
        assert tree.preorder() == list(range(len(tree)))
        assert tree.tokens == (0, 2, 9, 5, 0, 1)

    def test_errors(self):
        with pytest.raises(EmptyInput):
            merge_sequences([])
        with pytest.raises(EmptyInput):
            merge_sequences([[1, 2], []])
        with pytest.raises(RootMismatch):
            merge_sequences([[1, 2], [2, 2]])
        with pytest.raises(TreeTooLarge):
            merge_sequences([list(range(70))])
        assert len(merge_sequences([list(range(70))], max_nodes=None)) == 70

    def test_order_insensitive(self):
        seqs = [[1, 2, 3], [1, 4], [1, 2, 5]]
        assert merge_sequences(seqs) == merge_sequences(seqs[::-1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 5), min_size=0, max_size=6), min_size=1, max_size=8))
    def test_completeness_and_idempotence(self, tails):
        seqs = [[9] + t for t in tails]
        tree = merge_sequences(seqs, max_nodes=None)
        node_paths = {tuple(ancestors(tree, n)) for n in range(len(tree))}
        assert node_paths == prefixes(seqs)
        assert len(node_paths) == len(tree)
        again = merge_sequences(tree.sequences(), max_nodes=None)
        assert again == tree


class TestTreeValidation:
    def test_rejects_duplicate_children(self):
        with pytest.raises(InvalidTree):
            TokenTree((0, 1, 1), (ROOT, 0, 0))

    def test_rejects_forward_parent(self):
        with pytest.raises(InvalidTree):
            TokenTree((0, 1, 2), (ROOT, 2, 0))

    def test_requires_root_first(self):
        with pytest.raises(InvalidTree):
            TokenTree((0, 1), (1, ROOT))

    def test_dict_round_trip(self):
        tree = merge_sequences([[1, 2, 3], [1, 4]])
        assert TokenTree.from_dict(tree.to_dict()) == tree


class TestAncestors:
    def test_example_leaf(self):
        tree = merge_sequences([[2, 3, 4, 5], [2, 3, 8, 9]])
        nine = [n for n in range(len(tree)) if tree.tokens[n] == 9][0]
        assert ancestors(tree, nine) == [2, 3, 8, 9]

    def test_root(self):
        assert ancestors(merge_sequences([[4, 1]]), 0) == [4]

    def test_unknown(self):
        with pytest.raises(UnknownNode):
            ancestors(merge_sequences([[4, 1]]), 5)

    def test_matches_parent_walk(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            tree = random_tree(rng)
            for leaf in tree.leaves():
                walk, node = [], leaf
                while node != ROOT:
                    walk.append(tree.tokens[node])
                    node = tree.parents[node]
                assert ancestors(tree, leaf) == walk[::-1]


class TestChains:
    def example_tree(self):
        return merge_sequences([[2, 3, 4, 5], [2, 3, 6, 7], [2, 3, 8, 9]])

    def test_example_three_kernels(self):
        assert tree_tokens(self.example_tree()) == [[3, 4, 5], [6, 7], [8, 9]]

    def test_linear(self):
        tree = merge_sequences([[0, 1, 2, 3, 4]])
        assert tree_tokens(tree) == [[1, 2, 3, 4]]

    def test_root_only(self):
        assert dfs_chains(merge_sequences([[3]])) == []

    def test_star(self):
        tree = merge_sequences([[0, 1], [0, 2], [0, 3]])
        assert tree_tokens(tree) == [[1], [2], [3]]

    def test_random_against_naive_dfs(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            tree = random_tree(rng)
            chains = dfs_chains(tree)
            assert chains == naive_chains(tree)
            flat = [n for c in chains for n in c]
            assert sorted(flat) == list(range(1, len(tree)))
            for chain in chains:
                for a, b in zip(chain, chain[1:]):
                    assert tree.parents[b] == a
            # a node opens a new chain exactly when it has a left sibling, plus the first chain
            if len(tree) > 1:
                left_sibling = sum(
                    1 for n in range(1, len(tree)) if tree.children(tree.parents[n])[0] != n
                )
                assert len(chains) == left_sibling + 1


class TestVerify:
    def test_root_only(self):
        assert verify(merge_sequences([[5]]), {0: 8}) == [8]

    def test_hand_executed(self):
        # r=0 with children a=1, b=2; a has child c=3
        tree = merge_sequences([[0, 1, 3], [0, 2]])
        a = tree.child_with_token(0, 1)
        c = tree.child_with_token(a, 3)
        b = tree.child_with_token(0, 2)
        outputs = {0: 1, a: 3, c: 7, b: 0}
        assert verify(tree, outputs) == [1, 3, 7]

    def test_immediate_mismatch(self):
        tree = merge_sequences([[0, 1], [0, 2]])
        assert verify(tree, {0: 9, 1: 0, 2: 0}) == [9]

    def test_missing_output(self):
        tree = merge_sequences([[0, 1], [0, 2]])
        with pytest.raises(MissingOutput):
            verify(tree, {0: 1, 1: 0})

    def test_properties_random(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            tree = random_tree(rng, vocab=4)
            outputs = {n: int(rng.integers(0, 4)) for n in range(len(tree))}
            out = verify(tree, outputs)
            assert 1 <= len(out) <= tree.max_depth + 1
            # all but the bonus token trace a root-to-node path
            node = 0
            for tok in out[:-1]:
                node = tree.child_with_token(node, tok)
                assert node is not None
            assert out[-1] == outputs[node]
