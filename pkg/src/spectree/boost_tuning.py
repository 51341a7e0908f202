"""Collective boost-tuning of a speculator pool.

Each round fits one new SSM on the samples that no earlier SSM reproduces,
then removes the samples the new SSM reproduces.  Removal is hard filtering;
there are no sample weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .engine import GenerationRequest, RunMetrics, run_incremental, run_speculative
from .speculator import NgramSSM, SpecConfig, beam_search, ngram_fit, speculate_tree
from .token_tree import verify
from .transformer import KVCache, ModelWeights, prefill, tree_parallel_decode

DEFAULT_MARK_HORIZON = 4


@dataclass(frozen=True)
class PromptSample:
    prompt: tuple[int, ...]
    llm_continuation: tuple[int, ...]


@dataclass
class BoostPool:
    ssms: list
    mark_horizon: float
    residual_counts: list[int] = field(default_factory=list)


SsmFactory = Callable[[list[PromptSample], int], object]


def matching_length(llm_seq: Sequence[int], ssm_seq: Sequence[int]) -> int:
    """Length of the longest common prefix."""
    n = 0
    for a, b in zip(llm_seq, ssm_seq):
        if a != b:
            break
        n += 1
    return n


def generate_samples(llm: ModelWeights, prompts: Sequence[Sequence[int]], horizon: int,
                     eos: int | None = None) -> list[PromptSample]:
    """Greedy LLM continuations of ``horizon`` tokens for each prompt."""
    samples = []
    for prompt in prompts:
        cont, _ = run_incremental(llm, GenerationRequest(tuple(prompt), horizon, eos))
        samples.append(PromptSample(tuple(prompt), tuple(cont)))
    return samples


def ngram_factory(order: int, alpha: float, vocab_size: int) -> SsmFactory:
    """Factory fitting an n-gram SSM on LLM continuations.

    Each training sequence is the continuation preceded by the prompt's last
    ``order - 1`` tokens, so contexts straddling the prompt boundary count.
    """

    def fit(samples: list[PromptSample], index: int) -> NgramSSM:
        tail = order - 1
        corpus = [(s.prompt[-tail:] if tail else ()) + s.llm_continuation for s in samples]
        return NgramSSM(ngram_fit(corpus, order, alpha, vocab_size), id=index)

    return fit


def is_marked(ssm, sample: PromptSample, k: float) -> bool:
    """True when ``ssm``'s greedy continuation reproduces the first ``k`` LLM tokens."""
    if math.isinf(k):
        return False
    horizon = min(int(k), len(sample.llm_continuation))
    if horizon == 0:
        return True
    guess = beam_search(ssm, sample.prompt, 1, horizon)[0][1:]
    return matching_length(sample.llm_continuation, guess) >= horizon


def collective_boost_tune(
    pool_size: int,
    corpus: Sequence[PromptSample],
    ssm_factory: SsmFactory,
    k: float = DEFAULT_MARK_HORIZON,
) -> BoostPool:
    """Fit up to ``pool_size`` SSMs, each on the residual of the previous ones.

    Stops early once every sample is marked.  ``residual_counts[i]`` is the
    residual size after round ``i``.  ``k=math.inf`` disables marking.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if not corpus:
        raise ValueError("corpus is empty")
    residual = list(corpus)
    pool = BoostPool([], k)
    for i in range(pool_size):
        ssm = ssm_factory(residual, i)
        pool.ssms.append(ssm)
        residual = [s for s in residual if not is_marked(ssm, s, k)]
        pool.residual_counts.append(len(residual))
        if not residual:
            break
    return pool


def pool_coverage(pool: Sequence, requests: Sequence[GenerationRequest], cfg: SpecConfig,
                  llm: ModelWeights) -> float:
    """Average verified tokens per LLM step of the speculative engine."""
    if not requests:
        raise ValueError("no evaluation requests")
    total = RunMetrics()
    for req in requests:
        _, m = run_speculative(llm, pool, cfg, req)
        total = total + m
    return total.verified_per_step


def prefix_verified_count(llm: ModelWeights, pool: Sequence, prefix: Sequence[int], cfg: SpecConfig) -> int:
    """Tokens one verification step accepts for a fixed prefix."""
    prefix = list(prefix)
    cache = KVCache(llm.config)
    if len(prefix) > 1:
        prefill(llm, prefix[:-1], cache)
    tree = speculate_tree(pool, prefix, cfg, max_nodes=None,
                          depth_cap=llm.config.max_positions - len(prefix))
    result = tree_parallel_decode(llm, tree, len(prefix), cache)
    return len(verify(tree, result.outputs))
