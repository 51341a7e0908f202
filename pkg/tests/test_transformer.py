import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_tree
from spectree.errors import CacheGap, EmptyContext, PromptTooLong, ShapeMismatch, TreeTooDeep
from spectree.token_tree import ancestors, merge_sequences
from spectree.transformer import (
    KVCache,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    attention,
    causal_mask,
    chain_attention_step,
    decode_incremental,
    final_hidden,
    forward_full,
    init_random_weights,
    masked_softmax,
    prefill,
    tree_parallel_decode,
)


def identity_layer(d):
    eye = np.eye(d)
    z = np.zeros(d)
    return LayerWeights(z + 1, z, eye, eye, eye, eye, z + 1, z, np.zeros((d, 4 * d)), np.zeros(4 * d), np.zeros((4 * d, d)), z)


def incremental_path_logits(weights, prefix, path_tokens):
    """Per-path oracle: prefill the prefix, then one token at a time."""
    cache = KVCache(weights.config)
    rows = [prefill(weights, list(prefix) + [path_tokens[0]], cache)]
    for tok in path_tokens[1:]:
        rows.append(decode_incremental(weights, tok, cache.length, cache))
    return rows


class TestConfigAndWeights:
    def test_parameter_count_closed_form(self):
        cfg = ModelConfig(num_layers=3, num_heads=2, d_model=8, vocab_size=11, max_positions=20)
        v, d, p, f = 11, 8, 20, 32
        per_layer = 4 * d * d + 4 * d + d * f + f + f * d + d
        expected = v * d + p * d + 3 * per_layer + 2 * d + d * v
        assert cfg.num_parameters() == expected
        w = init_random_weights(cfg, 0)
        assert w.flat().size == expected

    def test_seeded_determinism(self):
        cfg = ModelConfig(2, 2, 8, 10, 16)
        a = init_random_weights(cfg, 7).flat()
        b = init_random_weights(cfg, 7).flat()
        c = init_random_weights(cfg, 8).flat()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_init_range(self):
        w = init_random_weights(ModelConfig(1, 1, 8, 10, 16), 0)
        for name, t in w.tensors():
            centre = 1.0 if name.endswith("_g") else 0.0
            assert np.all(np.abs(t - centre) < 0.08)

    def test_flat_round_trip(self, small_model):
        again = ModelWeights.from_flat(small_model.config, small_model.flat())
        assert np.array_equal(again.flat(), small_model.flat())
        with pytest.raises(ShapeMismatch):
            ModelWeights.from_flat(small_model.config, small_model.flat()[:-1])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig(1, 3, 8, 10)


class TestAttention:
    def test_single_row_returns_value_projection(self):
        rng = np.random.default_rng(0)
        w = init_random_weights(ModelConfig(1, 2, 8, 10), 1).layers[0]
        x = rng.normal(size=(1, 8))
        # one row attends only to itself with weight 1
        expected = x @ w.wv @ w.wo
        assert np.allclose(attention(x, w, 2, causal_mask(1)), expected, atol=1e-14)

    def test_two_by_two_by_hand(self):
        x = np.eye(2)
        out = attention(x, identity_layer(2), 1, causal_mask(2))
        # row 1 scores: [0, 1/sqrt(2)]
        e = math.exp(1 / math.sqrt(2))
        p0 = 1 / (1 + e)
        expected = np.array([[1.0, 0.0], [p0, 1 - p0]])
        assert np.allclose(out, expected, atol=1e-15)

    def test_causality(self, small_model):
        rng = np.random.default_rng(3)
        layer = small_model.layers[0]
        x = rng.normal(size=(6, 16))
        y = x.copy()
        y[4:] = rng.normal(size=(2, 16))
        a = attention(x, layer, 2, causal_mask(6))
        b = attention(y, layer, 2, causal_mask(6))
        assert np.array_equal(a[:4], b[:4])

    def test_shape_errors(self, small_model):
        layer = small_model.layers[0]
        with pytest.raises(ShapeMismatch):
            attention(np.zeros((3, 5)), layer, 2, causal_mask(3))
        with pytest.raises(ShapeMismatch):
            attention(np.zeros((3, 16)), layer, 2, causal_mask(2))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-50, 50)))
    def test_softmax_rows_normalized(self, scores):
        n, m = scores.shape
        mask = np.zeros((n, m))
        # keep at least the first column visible per row
        mask[1::2, 1:] = -np.inf
        probs = masked_softmax(scores, mask)
        assert np.all(np.abs(probs.sum(axis=-1) - 1) <= 1e-12)
        assert np.all(probs[np.isneginf(mask)] == 0)


class TestIncremental:
    def test_prefill_and_decode_match_full_recompute(self, small_model):
        rng = np.random.default_rng(4)
        for _ in range(10):
            seq = rng.integers(0, 32, size=rng.integers(2, 30))
            ref, ref_hidden = forward_full(small_model, seq)
            cache = KVCache(small_model.config)
            split = int(rng.integers(1, len(seq)))
            rows = [prefill(small_model, seq[:split], cache)]
            for pos in range(split, len(seq)):
                rows.append(decode_incremental(small_model, int(seq[pos]), pos, cache))
            assert np.max(np.abs(np.array(rows) - ref[split - 1:])) <= 1e-9
            assert np.max(np.abs(final_hidden(cache) - ref_hidden[-1])) <= 1e-9

    def test_cache_gap(self, small_model):
        cache = KVCache(small_model.config)
        prefill(small_model, [1, 2], cache)
        with pytest.raises(CacheGap):
            decode_incremental(small_model, 1, 3, cache)

    def test_prompt_too_long(self, small_model):
        with pytest.raises(PromptTooLong):
            prefill(small_model, [1] * 65, KVCache(small_model.config))
        cache = KVCache(small_model.config)
        prefill(small_model, [1] * 64, cache)
        with pytest.raises(PromptTooLong):
            decode_incremental(small_model, 1, 64, cache)

    def test_final_hidden_empty(self, small_model):
        with pytest.raises(EmptyContext):
            final_hidden(KVCache(small_model.config))


class TestChainStep:
    def test_matches_sequential_decode(self, small_model):
        rng = np.random.default_rng(6)
        for _ in range(50):
            prefix = rng.integers(0, 32, size=rng.integers(1, 10))
            chain = rng.integers(0, 32, size=rng.integers(1, 9))
            cache = KVCache(small_model.config)
            prefill(small_model, prefix, cache)
            batched = chain_attention_step(small_model, chain, len(prefix), cache)
            ref = KVCache(small_model.config)
            prefill(small_model, prefix, ref)
            seq = [decode_incremental(small_model, int(t), len(prefix) + i, ref) for i, t in enumerate(chain)]
            assert np.max(np.abs(batched - np.array(seq))) <= 1e-9

    def test_negative_control_without_intra_chain_mask(self, small_model):
        prefix, chain = [1, 2, 3], [4, 5, 6, 7]
        cache = KVCache(small_model.config)
        prefill(small_model, prefix, cache)
        broken = chain_attention_step(small_model, chain, 3, cache, fix_chain=False)
        ref, _ = forward_full(small_model, prefix + chain)
        fixed = chain_attention_step(small_model, chain, 3, cache)
        assert np.max(np.abs(fixed - ref[3:])) <= 1e-9
        # without the mask the first chain row attends to its own future
        assert np.max(np.abs(broken[0] - ref[3])) > 1e-6


class TestTreeDecode:
    def test_example_tree_three_steps(self, small_model):
        tree = merge_sequences([[2, 3, 4, 5], [2, 3, 6, 7], [2, 3, 8, 9]])
        cache = KVCache(small_model.config)
        prefill(small_model, [1, 1, 1], cache)
        res = tree_parallel_decode(small_model, tree, 4, cache)
        assert res.num_chain_steps == 3
        assert cache.length == 4

    def test_matches_per_path_oracle(self, small_model):
        rng = np.random.default_rng(8)
        for _ in range(30):
            tree = random_tree(rng, max_nodes=20, max_depth=6)
            prefix = [int(t) for t in rng.integers(0, 32, size=rng.integers(1, 10))]
            cache = KVCache(small_model.config)
            prefill(small_model, prefix[:-1] + [0], cache)  # root row must be overwritten
            cache.truncate(len(prefix) - 1)
            res = tree_parallel_decode(small_model, tree, len(prefix), cache)
            for leaf in tree.leaves():
                path = ancestors(tree, leaf)
                nodes = [leaf]
                while tree.parents[nodes[-1]] >= 0:
                    nodes.append(tree.parents[nodes[-1]])
                nodes.reverse()
                rows = incremental_path_logits(small_model, prefix[:-1], path)
                for node, row in zip(nodes, rows):
                    assert res.outputs[node] == int(np.argmax(row))
                    assert np.max(np.abs(res.logits[node] - row)) <= 1e-9

    def test_dfs_cache_invariant(self, small_model):
        """Before each chain step the cache holds exactly the chain's ancestors."""
        rng = np.random.default_rng(9)
        for _ in range(100):
            tree = random_tree(rng, max_nodes=24, max_depth=8)
            prefix = [int(t) for t in rng.integers(0, 32, size=rng.integers(1, 8))]
            p = len(prefix)

            def hook(group, base, cache):
                above = ancestors(tree, group[0])[:-1]
                assert cache.length >= base
                assert list(cache.tokens[:base]) == prefix[:-1] + above

            cache = KVCache(small_model.config)
            if p > 1:
                prefill(small_model, prefix[:-1], cache)
            tree_parallel_decode(small_model, tree, p, cache, hook=hook)
            assert cache.length == p

    def test_commit_equals_sequential(self, small_model):
        tree = merge_sequences([[5, 1, 2], [5, 3]])
        prefix = [7, 8, 5]
        cache = KVCache(small_model.config)
        prefill(small_model, prefix[:-1], cache)
        res = tree_parallel_decode(small_model, tree, 3, cache)
        one = tree.child_with_token(0, 1)
        res.commit(cache, [one, tree.child_with_token(one, 2)])
        assert cache.length == 5
        ref = KVCache(small_model.config)
        prefill(small_model, prefix + [1, 2], ref)
        assert np.max(np.abs(cache.keys[:, :5] - ref.keys[:, :5])) <= 1e-12
        assert np.max(np.abs(cache.hidden[:5] - ref.hidden[:5])) <= 1e-12

    def test_too_deep(self, small_model):
        tree = merge_sequences([list(range(10))])
        cache = KVCache(small_model.config)
        prefill(small_model, [0] * 55, cache)
        # root at 55, deepest node at 55 + 9 = 64 == max_positions
        with pytest.raises(TreeTooDeep):
            tree_parallel_decode(small_model, tree, 56, cache)
        tree_parallel_decode(small_model, tree, 55, cache)

    def test_cache_gap(self, small_model):
        with pytest.raises(CacheGap):
            tree_parallel_decode(small_model, merge_sequences([[1, 2]]), 3, KVCache(small_model.config))
