import numpy as np
import pytest

from spectree.boost_tuning import collective_boost_tune, generate_samples, ngram_factory
from spectree.token_tree import ROOT, TokenTree
from spectree.transformer import ModelConfig, init_random_weights

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_model():
    return init_random_weights(ModelConfig(2, 2, 16, 32, 64), seed=1)


@pytest.fixture(scope="session")
def medium_model():
    return init_random_weights(ModelConfig(2, 2, 32, 64, 128), seed=3)


def random_prompts(rng, n, vocab, lo=4, hi=12):
    return [[int(t) for t in rng.integers(0, vocab, size=rng.integers(lo, hi))] for _ in range(n)]


@pytest.fixture(scope="session")
def boosted(medium_model):
    """Five-round boosted order-4 n-gram pool over the medium model."""
    rng = np.random.default_rng(0)
    prompts = random_prompts(rng, 500, medium_model.config.vocab_size)
    samples = generate_samples(medium_model, prompts, 16)
    pool = collective_boost_tune(5, samples, ngram_factory(4, 0.01, medium_model.config.vocab_size), k=4)
    return prompts, samples, pool


def random_tree(rng, max_nodes=32, max_depth=8, vocab=32) -> TokenTree:
    """Random deduplicated tree in insertion (topological, not preorder) order."""
    n = int(rng.integers(1, max_nodes + 1))
    tokens, parents, depths = [int(rng.integers(vocab))], [ROOT], [0]
    used: dict[int, set] = {0: set()}
    for _ in range(n - 1):
        candidates = [i for i, d in enumerate(depths) if d < max_depth and len(used[i]) < vocab]
        parent = int(rng.choice(candidates))
        free = [t for t in range(vocab) if t not in used[parent]]
        tok = int(rng.choice(free))
        used[parent].add(tok)
        used[len(tokens)] = set()
        tokens.append(tok)
        parents.append(parent)
        depths.append(depths[parent] + 1)
    return TokenTree(tuple(tokens), tuple(parents))
