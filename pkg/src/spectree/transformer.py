"""A small decoder-only transformer in 64-bit numpy.

Blocks are pre-norm (layer norm, multi-head attention, residual, layer norm,
GELU feed-forward, residual) with learned absolute position embeddings.  The
same row kernel serves prompt prefill, single-token decoding and chain-batched
tree decoding, all against one :class:`KVCache` indexed by absolute position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import (
    CacheGap,
    ChainNotLinked,
    EmptyContext,
    PromptTooLong,
    ShapeMismatch,
    TreeTooDeep,
)
from .token_tree import TokenTree, dfs_chains

INIT_SCALE = 0.08
LN_EPS = 1e-5
# Additive stand-in for -inf; exp() of it underflows to exactly 0.0.
MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    d_model: int
    vocab_size: int
    max_positions: int = 256
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "max_positions", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Every parameter tensor in serialization order."""
        d, f = self.d_model, self.d_ff
        shapes = [("tok_emb", (self.vocab_size, d)), ("pos_emb", (self.max_positions, d))]
        for i in range(self.num_layers):
            shapes += [
                (f"layers.{i}.ln1_g", (d,)),
                (f"layers.{i}.ln1_b", (d,)),
                (f"layers.{i}.wq", (d, d)),
                (f"layers.{i}.wk", (d, d)),
                (f"layers.{i}.wv", (d, d)),
                (f"layers.{i}.wo", (d, d)),
                (f"layers.{i}.ln2_g", (d,)),
                (f"layers.{i}.ln2_b", (d,)),
                (f"layers.{i}.w1", (d, f)),
                (f"layers.{i}.b1", (f,)),
                (f"layers.{i}.w2", (f, d)),
                (f"layers.{i}.b2", (d,)),
            ]
        shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, self.vocab_size))]
        return shapes

    def num_parameters(self) -> int:
        return sum(math.prod(shape) for _, shape in self.tensor_shapes())


LAYER_FIELDS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: np.ndarray

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b
        yield "w_out", self.w_out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()]).astype(np.float64)

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelWeights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != config.num_parameters():
            raise ShapeMismatch(f"expected {config.num_parameters()} parameters, got {flat.size}")
        tensors: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in config.tensor_shapes():
            n = math.prod(shape)
            tensors[name] = flat[offset:offset + n].reshape(shape).copy()
            offset += n
        return cls._from_named(config, tensors)

    @classmethod
    def _from_named(cls, config: ModelConfig, t: Mapping[str, np.ndarray]) -> "ModelWeights":
        layers = [
            LayerWeights(**{name: t[f"layers.{i}.{name}"] for name in LAYER_FIELDS})
            for i in range(config.num_layers)
        ]
        return cls(config, t["tok_emb"], t["pos_emb"], layers, t["lnf_g"], t["lnf_b"], t["w_out"])

    def validate(self) -> None:
        for (name, tensor), (_, shape) in zip(self.tensors(), self.config.tensor_shapes()):
            if tensor.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {tensor.shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"{name} has non-finite entries")


def init_random_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded weights, uniform in (-0.08, 0.08); layer-norm gains are offset by 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes():
        values = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        if name.endswith("_g"):
            values += 1.0
        tensors[name] = values
    return ModelWeights._from_named(config, tensors)


@dataclass
class KVCache:
    """Per-layer key/value rows by absolute position.

    Positions below ``length`` are occupied.  ``tokens`` and ``hidden`` record
    the token and final-layer hidden state written at each position.
    """

    config: ModelConfig
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    hidden: np.ndarray = field(init=False)
    tokens: np.ndarray = field(init=False)
    length: int = 0

    def __post_init__(self):
        c = self.config
        self.keys = np.zeros((c.num_layers, c.max_positions, c.d_model))
        self.values = np.zeros_like(self.keys)
        self.hidden = np.zeros((c.max_positions, c.d_model))
        self.tokens = np.full(c.max_positions, -1, dtype=np.int64)

    def truncate(self, length: int) -> None:
        """Mark positions ``length`` and beyond vacant without zeroing them."""
        self.length = min(self.length, length)
        self.tokens[self.length:] = -1

    def copy(self) -> "KVCache":
        new = KVCache.__new__(KVCache)
        new.config = self.config
        new.keys = self.keys.copy()
        new.values = self.values.copy()
        new.hidden = self.hidden.copy()
        new.tokens = self.tokens.copy()
        new.length = self.length
        return new


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax of ``scores + mask`` where mask entries are 0 or -inf."""
    finite = np.where(np.isneginf(mask), MASK_VALUE, mask)
    z = scores + finite
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int, mask: np.ndarray) -> np.ndarray:
    n, d_model = q.shape
    hd = d_model // num_heads
    qh = q.reshape(n, num_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(-1, num_heads, hd).transpose(1, 0, 2)
    vh = v.reshape(-1, num_heads, hd).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd)
    probs = masked_softmax(scores, mask)
    return (probs @ vh).transpose(1, 0, 2).reshape(n, d_model)


def attention(x: np.ndarray, layer: LayerWeights, num_heads: int, mask: np.ndarray) -> np.ndarray:
    """Multi-head self-attention of the rows of ``x`` under an additive {0, -inf} mask."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != layer.wq.shape[0]:
        raise ShapeMismatch(f"input has shape {x.shape}, expected (l, {layer.wq.shape[0]})")
    if mask.shape != (n, n):
        raise ShapeMismatch(f"mask has shape {mask.shape}, expected {(n, n)}")
    h = _attend(x @ layer.wq, x @ layer.wk, x @ layer.wv, num_heads, mask)
    return h @ layer.wo


def _run_rows(
    weights: ModelWeights,
    tokens: np.ndarray,
    start: int,
    cache: KVCache,
    fix_chain: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Run consecutive positions ``start..start+n-1`` against cache rows ``[0, start)``.

    Writes K/V, tokens and final hidden states for the new rows and sets the
    cache length to ``start + n``.  Returns ``(logits, hidden)``.
    """
    cfg = weights.config
    n = len(tokens)
    end = start + n
    if end > cfg.max_positions:
        raise PromptTooLong(f"position {end - 1} exceeds max_positions {cfg.max_positions}")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        raise ValueError("token id out of vocabulary")
    mask = np.zeros((n, end))
    if fix_chain:
        mask[np.arange(end)[None, :] > (start + np.arange(n))[:, None]] = -np.inf

    x = weights.tok_emb[tokens] + weights.pos_emb[start:end]
    for li, layer in enumerate(weights.layers):
        a = layer_norm(x, layer.ln1_g, layer.ln1_b)
        cache.keys[li, start:end] = a @ layer.wk
        cache.values[li, start:end] = a @ layer.wv
        h = _attend(a @ layer.wq, cache.keys[li, :end], cache.values[li, :end], cfg.num_heads, mask)
        x = x + h @ layer.wo
        f = layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + gelu(f @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    final = layer_norm(x, weights.lnf_g, weights.lnf_b)
    cache.hidden[start:end] = final
    cache.tokens[start:end] = tokens
    cache.length = end
    cache.tokens[end:] = -1
    return final @ weights.w_out, final


def prefill(weights: ModelWeights, prompt, cache: KVCache) -> np.ndarray:
    """Fill positions ``0..len(prompt)-1`` and return next-token logits."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("prompt must be non-empty")
    if prompt.size > weights.config.max_positions:
        raise PromptTooLong(f"prompt of {prompt.size} tokens exceeds {weights.config.max_positions}")
    logits, _ = _run_rows(weights, prompt, 0, cache)
    return logits[-1]


def decode_incremental(weights: ModelWeights, token: int, position: int, cache: KVCache) -> np.ndarray:
    """Decode one token at ``position``; positions below it must be occupied."""
    if position > cache.length:
        raise CacheGap(f"position {position} requested but only {cache.length} occupied")
    logits, _ = _run_rows(weights, np.array([token], dtype=np.int64), position, cache)
    return logits[0]


def greedy(logits: np.ndarray) -> int:
    """Argmax with the lowest token id winning ties."""
    return int(np.argmax(logits))


def chain_attention_step(
    weights: ModelWeights,
    chain_tokens,
    base_depth: int,
    cache: KVCache,
    fix_chain: bool = True,
) -> np.ndarray:
    """Decode a parent-linked run of tokens in one batched pass.

    Positions ``[0, base_depth)`` must hold the chain's ancestry.  All chain
    rows are projected at once against the cache as it stands after the last
    chain token; queries are then barred from later chain keys.  ``fix_chain``
    exists only so tests can switch that correction off.
    """
    tokens = np.asarray(chain_tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ChainNotLinked("chain must be a non-empty token sequence")
    if base_depth > cache.length:
        raise CacheGap(f"chain starts at {base_depth} but only {cache.length} positions occupied")
    logits, _ = _run_rows(weights, tokens, base_depth, cache, fix_chain=fix_chain)
    return logits


def final_hidden(cache: KVCache) -> np.ndarray:
    """Final-layer hidden state (pre-projection) at the last occupied position."""
    if cache.length == 0:
        raise EmptyContext("no decoded positions")
    return cache.hidden[cache.length - 1].copy()


def forward_full(weights: ModelWeights, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Cache-free causal forward pass over a whole sequence.

    Returns ``(logits, hidden)`` for every position.  Used as the recompute
    oracle for the cached paths.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if n > cfg.max_positions:
        raise PromptTooLong(f"sequence of {n} tokens exceeds {cfg.max_positions}")
    mask = causal_mask(n)
    x = weights.tok_emb[tokens] + weights.pos_emb[:n]
    for layer in weights.layers:
        a = layer_norm(x, layer.ln1_g, layer.ln1_b)
        x = x + attention(a, layer, cfg.num_heads, mask)
        f = layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + gelu(f @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    final = layer_norm(x, weights.lnf_g, weights.lnf_b)
    return final @ weights.w_out, final


ChainHook = Callable[[list[int], int, KVCache], None]


@dataclass
class TreeDecodeResult:
    """Per-node outputs of one tree pass plus the rows needed to commit a path."""

    tree: TokenTree
    prefix_len: int
    outputs: dict[int, int]
    logits: dict[int, np.ndarray]
    hidden: dict[int, np.ndarray]
    keys: dict[int, np.ndarray]
    values: dict[int, np.ndarray]
    num_chain_steps: int

    def commit(self, cache: KVCache, nodes: list[int]) -> None:
        """Write the saved rows of a root-descending node path after the root."""
        pos = self.prefix_len
        for node in nodes:
            if self.tree.depth(node) != pos - self.prefix_len + 1:
                raise ChainNotLinked("committed nodes must form a path below the root")
            cache.keys[:, pos] = self.keys[node]
            cache.values[:, pos] = self.values[node]
            cache.hidden[pos] = self.hidden[node]
            cache.tokens[pos] = self.tree.tokens[node]
            pos += 1
        cache.length = pos
        cache.tokens[pos:] = -1


def tree_parallel_decode(
    weights: ModelWeights,
    tree: TokenTree,
    prefix_len: int,
    cache: KVCache,
    hook: ChainHook | None = None,
    fix_chain: bool = True,
) -> TreeDecodeResult:
    """Compute the LLM's greedy token at every node of ``tree`` in one pass.

    The root sits at absolute position ``prefix_len - 1`` and a node at tree
    depth ``k`` at ``prefix_len - 1 + k``.  Positions ``[0, prefix_len - 1)``
    must be occupied; the root row is (re)written.  Chains are visited in
    depth-first order, each overwriting the positions of the previous branch,
    and the root is batched with the first chain.  Afterwards the cache is
    truncated to ``prefix_len``.

    ``hook(node_ids, base_position, cache)`` runs before each chain step.
    """
    cfg = weights.config
    if prefix_len < 1:
        raise ValueError("prefix_len must be >= 1 (the root occupies prefix_len - 1)")
    if prefix_len - 1 + tree.max_depth >= cfg.max_positions:
        raise TreeTooDeep(
            f"tree depth {tree.max_depth} after {prefix_len} prefix tokens exceeds {cfg.max_positions}"
        )
    if cache.length < prefix_len - 1:
        raise CacheGap(f"cache holds {cache.length} positions, need {prefix_len - 1}")

    chains = dfs_chains(tree)
    groups = [[tree.root] + chains[0]] + chains[1:] if chains else [[tree.root]]
    logits: dict[int, np.ndarray] = {}
    hidden: dict[int, np.ndarray] = {}
    keys: dict[int, np.ndarray] = {}
    values: dict[int, np.ndarray] = {}
    for group in groups:
        base = prefix_len - 1 + tree.depth(group[0])
        if hook is not None:
            hook(group, base, cache)
        rows = chain_attention_step(weights, [tree.tokens[n] for n in group], base, cache, fix_chain)
        for i, node in enumerate(group):
            logits[node] = rows[i]
            hidden[node] = cache.hidden[base + i].copy()
            keys[node] = cache.keys[:, base + i].copy()
            values[node] = cache.values[:, base + i].copy()
    cache.truncate(prefix_len)
    outputs = {node: greedy(row) for node, row in logits.items()}
    return TreeDecodeResult(tree, prefix_len, outputs, logits, hidden, keys, values, len(groups))
