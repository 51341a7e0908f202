"""Serving loops: incremental greedy decoding and speculate/verify decoding."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import PromptTooLong
from .speculator import SpecConfig, Speculator, speculate_tree
from .token_tree import TokenTree, verify_path
from .transformer import (
    KVCache,
    ModelWeights,
    decode_incremental,
    final_hidden,
    greedy,
    prefill,
    tree_parallel_decode,
)

ENGINE_MAX_TREE_NODES = 1024


@dataclass(frozen=True)
class GenerationRequest:
    prompt: tuple[int, ...]
    max_new_tokens: int
    eos: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class RunMetrics:
    llm_steps: int = 0
    ssm_runs: int = 0
    tokens_generated: int = 0
    wall_ms: float = 0.0

    @property
    def verified_per_step(self) -> float:
        return self.tokens_generated / self.llm_steps if self.llm_steps else 0.0

    def __add__(self, other: "RunMetrics") -> "RunMetrics":
        return RunMetrics(
            self.llm_steps + other.llm_steps,
            self.ssm_runs + other.ssm_runs,
            self.tokens_generated + other.tokens_generated,
            self.wall_ms + other.wall_ms,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verified_per_step"] = self.verified_per_step
        return d


class ConfigPolicy(Protocol):
    def choose(self, hidden: np.ndarray) -> SpecConfig:
        ...


def _budget(weights: ModelWeights, req: GenerationRequest) -> int:
    limit = weights.config.max_positions
    if len(req.prompt) > limit:
        raise PromptTooLong(f"prompt of {len(req.prompt)} tokens exceeds {limit}")
    # the last token of the sequence must itself fit at a position to be decoded
    return min(req.max_new_tokens, limit + 1 - len(req.prompt))


def run_incremental(llm: ModelWeights, req: GenerationRequest) -> tuple[list[int], RunMetrics]:
    """Greedy one-token-per-step decoding.  Returns the generated tokens only."""
    t0 = time.perf_counter()
    budget = _budget(llm, req)
    cache = KVCache(llm.config)
    logits = prefill(llm, req.prompt, cache)
    out: list[int] = []
    steps = 1
    while True:
        tok = greedy(logits)
        out.append(tok)
        if tok == req.eos or len(out) >= budget:
            break
        logits = decode_incremental(llm, tok, len(req.prompt) + len(out) - 1, cache)
        steps += 1
    wall = (time.perf_counter() - t0) * 1e3
    return out, RunMetrics(steps, 0, len(out), wall)


VerifyFn = Callable[[TokenTree, dict], list[int]]


def _default_verify(tree: TokenTree, outputs: dict) -> list[int]:
    return verify_path(tree, outputs)[1]


@dataclass
class StepTrace:
    prefix_len: int
    config: SpecConfig | None
    tree_size: int
    verified: list[int]


@dataclass
class SpeculativeRun:
    tokens: list[int]
    metrics: RunMetrics
    trace: list[StepTrace] = field(default_factory=list)


def run_speculative(
    llm: ModelWeights,
    pool: Sequence[Speculator],
    policy: SpecConfig | ConfigPolicy,
    req: GenerationRequest,
    max_tree_nodes: int | None = ENGINE_MAX_TREE_NODES,
    verify_fn: VerifyFn = _default_verify,
    workers: int | None = None,
    keep_trace: bool = False,
) -> tuple[list[int], RunMetrics]:
    run = speculative_run(llm, pool, policy, req, max_tree_nodes, verify_fn, workers, keep_trace)
    return run.tokens, run.metrics


def speculative_run(
    llm: ModelWeights,
    pool: Sequence[Speculator],
    policy: SpecConfig | ConfigPolicy,
    req: GenerationRequest,
    max_tree_nodes: int | None = ENGINE_MAX_TREE_NODES,
    verify_fn: VerifyFn = _default_verify,
    workers: int | None = None,
    keep_trace: bool = False,
) -> SpeculativeRun:
    """Speculate a token tree, verify it in one LLM pass, append, repeat.

    The root of each tree is the last token of the running sequence.  Its
    key/value row is produced by the tree pass itself, so the prompt is
    prefilled without its last token and prefill is not counted as a step.
    Matched tree nodes have their saved rows committed to the cache; the
    bonus token is decoded as the next tree's root.
    """
    if not pool:
        raise ValueError("speculator pool is empty")
    t0 = time.perf_counter()
    budget = _budget(llm, req)
    limit = llm.config.max_positions
    seq = list(req.prompt)
    cache = KVCache(llm.config)
    if len(seq) > 1:
        prefill(llm, seq[:-1], cache)
    out: list[int] = []
    metrics = RunMetrics()
    trace: list[StepTrace] = []
    finished = False
    while not finished:
        prefix_len = len(seq)
        remaining = budget - len(out)
        if isinstance(policy, SpecConfig):
            cfg = policy
        else:
            h = final_hidden(cache) if cache.length else np.zeros(llm.config.d_model)
            cfg = policy.choose(h)
        depth = min(cfg.beam_depth, remaining - 1, limit - prefix_len)
        tree = speculate_tree(pool, seq, cfg, max_nodes=max_tree_nodes, depth_cap=depth, eos=req.eos,
                              workers=workers)
        metrics.ssm_runs += max(depth, 0) * len(pool)
        result = tree_parallel_decode(llm, tree, prefix_len, cache)
        metrics.llm_steps += 1
        verified = [int(t) for t in verify_fn(tree, result.outputs)]
        verified = verified[:remaining]
        accepted = []
        for tok in verified:
            accepted.append(tok)
            if tok == req.eos:
                finished = True
                break
        if len(out) + len(accepted) >= budget:
            finished = True
        if keep_trace:
            trace.append(StepTrace(prefix_len, cfg, len(tree), accepted))
        if not finished:
            _advance_cache(llm, cache, tree, result, seq, accepted)
        seq.extend(accepted)
        out.extend(accepted)
    metrics.tokens_generated = len(out)
    metrics.wall_ms = (time.perf_counter() - t0) * 1e3
    return SpeculativeRun(out, metrics, trace)


def _advance_cache(llm, cache, tree, result, seq, accepted) -> None:
    """Bring the cache up to every accepted token except the last one."""
    path, node = [], tree.root
    for tok in accepted[:-1]:
        child = tree.child_with_token(node, tok)
        if child is None:
            break
        path.append(child)
        node = child
    result.commit(cache, path)
    # tokens a non-standard verifier accepted off the tree are decoded directly
    for i, tok in enumerate(accepted[len(path):-1]):
        decode_incremental(llm, tok, len(seq) + len(path) + i, cache)


@dataclass
class PromptResult:
    index: int
    passed: bool
    first_mismatch: int | None
    incremental: list[int]
    speculative: list[int]


@dataclass
class EquivalenceReport:
    results: list[PromptResult]
    incremental: RunMetrics
    speculative: RunMetrics

    @property
    def mismatches(self) -> int:
        return sum(not r.passed for r in self.results)

    @property
    def exit_code(self) -> int:
        return 1 if self.mismatches else 0


def first_mismatch(a: Sequence[int], b: Sequence[int]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


def compare_equivalence(
    llm: ModelWeights,
    pool: Sequence[Speculator],
    policy: SpecConfig | ConfigPolicy,
    requests: Sequence[GenerationRequest],
    **kwargs,
) -> EquivalenceReport:
    """Run both decoders on every request and compare outputs token by token."""
    results = []
    inc_total, spec_total = RunMetrics(), RunMetrics()
    for i, req in enumerate(requests):
        inc, inc_m = run_incremental(llm, req)
        spec, spec_m = run_speculative(llm, pool, policy, req, **kwargs)
        pos = first_mismatch(inc, spec)
        results.append(PromptResult(i, pos is None, pos, inc, spec))
        inc_total = inc_total + inc_m
        spec_total = spec_total + spec_m
    return EquivalenceReport(results, inc_total, spec_total)
