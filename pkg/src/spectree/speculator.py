"""Small speculative models, beam-search speculation and token-tree assembly."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .token_tree import MAX_TREE_NODES, TokenTree, merge_sequences
from .transformer import KVCache, ModelWeights, decode_incremental, prefill

BEAM_WIDTHS = (1, 2, 4)
BEAM_DEPTHS = (1, 2, 4, 8, 16)


@dataclass(frozen=True, order=True)
class SpecConfig:
    beam_width: int
    beam_depth: int

    def __post_init__(self):
        if self.beam_width not in BEAM_WIDTHS:
            raise ValueError(f"beam_width must be one of {BEAM_WIDTHS}")
        if self.beam_depth not in BEAM_DEPTHS:
            raise ValueError(f"beam_depth must be one of {BEAM_DEPTHS}")

    @property
    def key(self) -> str:
        return f"{self.beam_width}x{self.beam_depth}"

    @classmethod
    def from_key(cls, key: str) -> "SpecConfig":
        b, d = key.split("x")
        return cls(int(b), int(d))


# Width-major, depth-minor; this is also the predictor's output order.
ALL_CONFIGS: tuple[SpecConfig, ...] = tuple(SpecConfig(b, d) for b in BEAM_WIDTHS for d in BEAM_DEPTHS)


@dataclass
class NgramTable:
    order: int
    vocab_size: int
    alpha: float
    counts: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def context(self, tokens: Sequence[int]) -> tuple[int, ...]:
        if self.order == 1:
            return ()
        return tuple(int(t) for t in tokens[-(self.order - 1):])

    def probs(self, context: tuple[int, ...]) -> np.ndarray:
        row = self.counts.get(context)
        if row is None:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        return (row + self.alpha) / (row.sum() + self.alpha * self.vocab_size)

    def logprobs(self, context: tuple[int, ...]) -> np.ndarray:
        return np.log(self.probs(context))


def ngram_fit(corpus: Iterable[Sequence[int]], n: int, alpha: float, vocab_size: int) -> NgramTable:
    """Count n-gram transitions with add-``alpha`` smoothing.

    Only full-length contexts are counted; a sequence shorter than ``n``
    contributes nothing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    table = NgramTable(n, vocab_size, alpha)
    for seq in corpus:
        seq = [int(t) for t in seq]
        for i in range(n - 1, len(seq)):
            ctx = tuple(seq[i - n + 1:i])
            row = table.counts.get(ctx)
            if row is None:
                row = table.counts[ctx] = np.zeros(vocab_size)
            row[seq[i]] += 1.0
    return table


class Speculator(Protocol):
    """Anything that proposes continuations of a prefix.

    Returned sequences must start with the prefix's last token.
    """

    id: int

    def speculate(self, prefix: Sequence[int], width: int, depth: int, eos: int | None = None) -> list[list[int]]:
        ...


class NgramSSM:
    kind = "ngram"

    def __init__(self, table: NgramTable, id: int = 0):
        self.table = table
        self.id = id

    @property
    def vocab_size(self) -> int:
        return self.table.vocab_size

    def start(self, prefix: Sequence[int]):
        return self.table.context(prefix)

    def logprobs(self, state) -> np.ndarray:
        return self.table.logprobs(state)

    def advance(self, state, token: int):
        if self.table.order == 1:
            return ()
        return (state + (int(token),))[-(self.table.order - 1):]

    def speculate(self, prefix, width, depth, eos=None):
        return beam_search(self, prefix, width, depth, eos)


class TransformerSSM:
    """A transformer used as a speculator; state is a private cache plus logits."""

    kind = "transformer"

    def __init__(self, weights: ModelWeights, id: int = 0):
        self.weights = weights
        self.id = id

    @property
    def vocab_size(self) -> int:
        return self.weights.config.vocab_size

    def start(self, prefix: Sequence[int]):
        limit = self.weights.config.max_positions
        prefix = list(prefix)[-limit:]
        cache = KVCache(self.weights.config)
        logits = prefill(self.weights, prefix, cache)
        return cache, logits

    def logprobs(self, state) -> np.ndarray:
        logits = state[1]
        z = logits - logits.max()
        return z - np.log(np.exp(z).sum())

    def advance(self, state, token: int):
        cache, _ = state
        if cache.length >= self.weights.config.max_positions:
            return None
        cache = cache.copy()
        logits = decode_incremental(self.weights, int(token), cache.length, cache)
        return cache, logits

    def speculate(self, prefix, width, depth, eos=None):
        return beam_search(self, prefix, width, depth, eos)


@dataclass
class _Beam:
    tokens: list[int]
    score: float
    state: object
    done: bool = False


def _beam_steps(model, prefix: Sequence[int], width: int, depth: int, eos: int | None):
    """Yield ``(step, sequences)`` after each beam-search step."""
    if not prefix:
        raise ValueError("prefix must be non-empty")
    root = int(prefix[-1])
    beams = [_Beam([], 0.0, model.start(prefix))]
    for step in range(1, depth + 1):
        if all(b.done for b in beams):
            yield step, [[root] + b.tokens for b in beams]
            continue
        scores, toks, parents = [], [], []
        for bi, beam in enumerate(beams):
            if beam.done:
                scores.append(np.array([beam.score]))
                toks.append(np.array([beam.tokens[-1]]))
                parents.append(np.array([bi]))
                continue
            lp = model.logprobs(beam.state)
            scores.append(beam.score + lp)
            toks.append(np.arange(lp.size))
            parents.append(np.full(lp.size, bi))
        s, t, p = np.concatenate(scores), np.concatenate(toks), np.concatenate(parents)
        new_beams = []
        for idx in np.lexsort((p, t, -s))[:width]:
            parent = beams[p[idx]]
            if parent.done:
                new_beams.append(parent)
                continue
            tok = int(t[idx])
            state = model.advance(parent.state, tok)
            done = (eos is not None and tok == eos) or state is None
            new_beams.append(_Beam(parent.tokens + [tok], float(s[idx]), state, done))
        beams = new_beams
        yield step, [[root] + b.tokens for b in beams]


def beam_search(model, prefix: Sequence[int], width: int, depth: int, eos: int | None = None) -> list[list[int]]:
    """Fixed-depth beam search over summed log-probabilities.

    Returns up to ``width`` sequences, each the prefix's last token followed by
    at most ``depth`` tokens, best first.  Candidates are ranked by score, then
    token id, then parent beam index.  A beam that emits ``eos`` stops growing
    but keeps competing with its final score.
    """
    result = [[int(prefix[-1])]] if prefix else None
    for _, result in _beam_steps(model, prefix, width, depth, eos):
        pass
    return result


def beam_snapshots(model, prefix: Sequence[int], width: int, depths: Iterable[int],
                   eos: int | None = None) -> dict[int, list[list[int]]]:
    """Beam sets at several depths from a single search.

    The beams after step ``k`` do not depend on the final depth, so one run
    to ``max(depths)`` yields the result of every shallower search.
    """
    depths = sorted(set(depths))
    out = {}
    for step, seqs in _beam_steps(model, prefix, width, depths[-1], eos):
        if step in depths:
            out[step] = seqs
    return out


def beam_speculate(ssm, prefix: Sequence[int], cfg: SpecConfig, eos: int | None = None) -> list[list[int]]:
    return ssm.speculate(prefix, cfg.beam_width, cfg.beam_depth, eos)


def speculate_tree(
    pool: Sequence[Speculator],
    prefix: Sequence[int],
    cfgs: Mapping[int, SpecConfig] | SpecConfig,
    max_nodes: int | None = MAX_TREE_NODES,
    depth_cap: int | None = None,
    eos: int | None = None,
    workers: int | None = None,
) -> TokenTree:
    """Run every pool member on ``prefix`` and merge their candidates.

    ``cfgs`` is either one shared config or a map from member id to config.
    ``depth_cap`` clamps every member's depth (the engine uses it near the
    token budget or the position limit).
    """
    if not pool:
        raise ValueError("speculator pool is empty")

    def run(member) -> list[list[int]]:
        cfg = cfgs if isinstance(cfgs, SpecConfig) else cfgs[member.id]
        depth = cfg.beam_depth if depth_cap is None else min(cfg.beam_depth, depth_cap)
        if depth <= 0:
            return [[int(prefix[-1])]]
        return member.speculate(prefix, cfg.beam_width, depth, eos)

    members = sorted(pool, key=lambda m: m.id)
    if workers and workers > 1 and len(members) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, members))
    else:
        results = [run(m) for m in members]
    sequences = [seq for group in results for seq in group]
    return merge_sequences(sequences, max_nodes=max_nodes)
