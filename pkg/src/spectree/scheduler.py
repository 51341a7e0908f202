"""Learned choice of beam width and depth per decoding step.

A three-layer MLP maps the LLM's latest final-layer hidden state to a
predicted matching length for each of the 15 (width, depth) configurations.
The configuration with the most predicted tokens per millisecond of
verification plus speculation latency wins.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boost_tuning import matching_length
from .engine import GenerationRequest, run_incremental
from .errors import IncompleteProfile, ShapeMismatch
from .speculator import ALL_CONFIGS, BEAM_DEPTHS, BEAM_WIDTHS, SpecConfig, beam_snapshots, speculate_tree
from .transformer import KVCache, ModelWeights, forward_full, prefill, tree_parallel_decode

HIDDEN_SIZE = 64
NUM_OUTPUTS = len(ALL_CONFIGS)


@dataclass
class MatchPredictor:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "MatchPredictor":
        return MatchPredictor([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_predictor(input_dim: int, seed: int = 0, hidden: int = HIDDEN_SIZE) -> MatchPredictor:
    rng = np.random.default_rng(seed)
    dims = [input_dim, hidden, hidden, NUM_OUTPUTS]
    weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims, dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return MatchPredictor(weights, biases)


def zero_predictor(input_dim: int, hidden: int = HIDDEN_SIZE) -> MatchPredictor:
    p = init_predictor(input_dim, 0, hidden)
    return MatchPredictor([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])


def _forward(p: MatchPredictor, x: np.ndarray):
    acts = [x]
    pre = []
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(p.weights) - 1 else z)
    return acts, pre


def mlp_forward(p: MatchPredictor, h: np.ndarray) -> np.ndarray:
    """Predicted matching lengths, one per entry of ``ALL_CONFIGS``.

    Accepts a single feature vector or a batch of them.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != p.input_dim:
        raise ShapeMismatch(f"feature vector has {h.shape[-1]} entries, predictor expects {p.input_dim}")
    return _forward(p, h)[0][-1]


def mse_loss_and_grads(p: MatchPredictor, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean (over samples and outputs) squared error and its gradient.

    Gradients come back in ``p.params()`` order.
    """
    acts, pre = _forward(p, x)
    diff = acts[-1] - y
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    grads_w, grads_b = [], []
    for i in reversed(range(len(p.weights))):
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i:
            delta = (delta @ p.weights[i].T) * (pre[i - 1] > 0)
    grads_w.reverse()
    grads_b.reverse()
    return loss, [g for pair in zip(grads_w, grads_b) for g in pair]


@dataclass
class TrainSample:
    h: np.ndarray
    y: np.ndarray


def mlp_train(
    samples: Sequence[TrainSample],
    epochs: int = 20,
    lr: float = 1e-2,
    seed: int = 0,
    batch_size: int = 32,
    init: MatchPredictor | None = None,
) -> MatchPredictor:
    """Minibatch gradient descent on mean squared error."""
    if not samples:
        raise ValueError("no training samples")
    x = np.stack([np.asarray(s.h, dtype=np.float64) for s in samples])
    y = np.stack([np.asarray(s.y, dtype=np.float64) for s in samples])
    p = (init or init_predictor(x.shape[1], seed)).copy()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            _, grads = mse_loss_and_grads(p, x[idx], y[idx])
            for param, g in zip(p.params(), grads):
                param -= lr * g
    return p


def training_loss(p: MatchPredictor, samples: Sequence[TrainSample]) -> float:
    x = np.stack([s.h for s in samples])
    y = np.stack([s.y for s in samples])
    return float(np.mean((mlp_forward(p, x) - y) ** 2))


@dataclass
class CostProfile:
    """Latency tables in milliseconds, keyed by configuration."""

    verify_ms: dict[SpecConfig, float]
    speculate_ms: dict[SpecConfig, float]
    samples: dict[SpecConfig, int] = field(default_factory=dict)

    def check(self) -> None:
        for cfg in ALL_CONFIGS:
            if cfg not in self.verify_ms or cfg not in self.speculate_ms:
                raise IncompleteProfile(f"no latency for {cfg.key}")
            if self.verify_ms[cfg] <= 0 or self.speculate_ms[cfg] <= 0:
                raise IncompleteProfile(f"non-positive latency for {cfg.key}")

    def latency(self, cfg: SpecConfig) -> float:
        return self.verify_ms[cfg] + self.speculate_ms[cfg]

    def scaled(self, factor: float) -> "CostProfile":
        return CostProfile({c: v * factor for c, v in self.verify_ms.items()},
                           {c: v * factor for c, v in self.speculate_ms.items()}, dict(self.samples))

    def to_dict(self) -> dict:
        return {
            "verify_ms": {c.key: v for c, v in self.verify_ms.items()},
            "speculate_ms": {c.key: v for c, v in self.speculate_ms.items()},
            "samples": {c.key: n for c, n in self.samples.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CostProfile":
        conv = lambda m: {SpecConfig.from_key(k): v for k, v in m.items()}  # noqa: E731
        return cls(conv(data["verify_ms"]), conv(data["speculate_ms"]), conv(data.get("samples", {})))


def cost(matched: float, verify_ms: float, speculate_ms: float) -> float:
    """Expected matched tokens per millisecond."""
    return matched / (verify_ms + speculate_ms)


def choose_from_predictions(predicted: Sequence[float], profile: CostProfile) -> SpecConfig:
    """Argmax of predicted-length per latency; ties go to smaller width, then depth."""
    profile.check()
    best, best_cost = None, -np.inf
    # ALL_CONFIGS is width-major ascending, so strict '>' keeps the first of equals
    for cfg, f in zip(ALL_CONFIGS, predicted):
        c = cost(float(f), profile.verify_ms[cfg], profile.speculate_ms[cfg])
        if c > best_cost:
            best, best_cost = cfg, c
    return best


def choose_config(p: MatchPredictor, h: np.ndarray, profile: CostProfile) -> SpecConfig:
    return choose_from_predictions(mlp_forward(p, h), profile)


@dataclass
class LearnedScheduler:
    """Engine policy backed by a predictor and a latency profile."""

    predictor: MatchPredictor
    profile: CostProfile

    def __post_init__(self):
        self.profile.check()

    def choose(self, hidden: np.ndarray) -> SpecConfig:
        return choose_config(self.predictor, hidden, self.profile)


def collect_samples(
    llm: ModelWeights,
    pool: Sequence,
    prompts: Sequence[Sequence[int]],
    max_new_tokens: int,
    eos: int | None = None,
) -> list[TrainSample]:
    """One training sample per greedy decoding step of each prompt.

    The feature is the hidden state of the token before the current last
    one, which is what the speculative engine holds when it picks a
    configuration (zeros when there is none).  The label for each
    configuration is the depth to which the merged speculation tree follows
    the LLM's own continuation.
    """
    max_depth = max(BEAM_DEPTHS)
    samples = []
    for prompt in prompts:
        prompt = list(prompt)
        generated, _ = run_incremental(llm, GenerationRequest(tuple(prompt), max_new_tokens + max_depth, eos))
        steps = min(max_new_tokens, len(generated))
        full = prompt + generated
        _, hidden = forward_full(llm, full[:len(prompt) + steps - 1])
        for i in range(steps):
            context = full[:len(prompt) + i]
            h = hidden[len(context) - 2] if len(context) >= 2 else np.zeros(llm.config.d_model)
            truth = full[len(context):]
            y = np.zeros(NUM_OUTPUTS)
            per_width = {}
            for b in BEAM_WIDTHS:
                merged: dict[int, list[list[int]]] = {d: [] for d in BEAM_DEPTHS}
                for ssm in pool:
                    snaps = beam_snapshots(ssm, context, b, BEAM_DEPTHS, eos)
                    for d in BEAM_DEPTHS:
                        merged[d].extend(snaps[d])
                per_width[b] = merged
            for j, cfg in enumerate(ALL_CONFIGS):
                seqs = per_width[cfg.beam_width][cfg.beam_depth]
                y[j] = max(matching_length(truth, s[1:]) for s in seqs)
            samples.append(TrainSample(np.array(h, dtype=np.float64), y))
    return samples


def measure_cost_profile(
    llm: ModelWeights,
    pool: Sequence,
    reps: int = 30,
    context_len: int = 32,
    seed: int = 0,
) -> CostProfile:
    """Median wall-clock latency of speculation and verification per configuration.

    Uses a fixed random context of ``context_len`` tokens.  Verification is
    timed on the tree the pool actually produced for that context.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    context_len = min(context_len, llm.config.max_positions - max(BEAM_DEPTHS))
    context = [int(t) for t in rng.integers(0, llm.config.vocab_size, size=context_len)]
    base = KVCache(llm.config)
    prefill(llm, context[:-1], base)
    verify_ms, speculate_ms, counts = {}, {}, {}
    for cfg in ALL_CONFIGS:
        spec_times, verify_times = [], []
        tree = None
        for _ in range(reps):
            t0 = time.perf_counter()
            tree = speculate_tree(pool, context, cfg, max_nodes=None)
            spec_times.append((time.perf_counter() - t0) * 1e3)
            cache = base.copy()
            t0 = time.perf_counter()
            tree_parallel_decode(llm, tree, len(context), cache)
            verify_times.append((time.perf_counter() - t0) * 1e3)
        speculate_ms[cfg] = statistics.median(spec_times)
        verify_ms[cfg] = statistics.median(verify_times)
        counts[cfg] = reps
    return CostProfile(verify_ms, speculate_ms, counts)


def modeled_cost_profile(verify_base_ms: float = 2.0, verify_per_node_ms: float = 0.05,
                         speculate_per_step_ms: float = 0.1) -> CostProfile:
    """Deterministic profile: verification grows with tree size, speculation with depth.

    Useful where timing noise would make results irreproducible.
    """
    verify_ms = {c: verify_base_ms + verify_per_node_ms * (1 + c.beam_width * c.beam_depth) for c in ALL_CONFIGS}
    speculate_ms = {c: speculate_per_step_ms * c.beam_depth * (1 + 0.25 * (c.beam_width - 1)) for c in ALL_CONFIGS}
    return CostProfile(verify_ms, speculate_ms)

