"""Gradient fine-tuning of tiny transformer SSMs.

Autograd comes from torch, imported lazily so the rest of the package runs on
numpy alone.  The torch forward pass mirrors :mod:`spectree.transformer`
exactly; tests hold the two to 1e-10.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .speculator import TransformerSSM
from .transformer import LN_EPS, ModelWeights


def _torch():
    try:
        import torch
    except ImportError as exc:  # pragma: no cover
        raise ImportError("transformer fine-tuning needs torch: pip install 'spectree[torch]'") from exc
    return torch


def torch_forward(params: dict, config, tokens):
    torch = _torch()
    F = torch.nn.functional
    n = len(tokens)
    idx = torch.as_tensor(tokens, dtype=torch.long)
    x = params["tok_emb"][idx] + params["pos_emb"][:n]
    mask = torch.triu(torch.full((n, n), float("-inf"), dtype=torch.float64), diagonal=1)
    h, hd = config.num_heads, config.head_dim
    for i in range(config.num_layers):
        p = lambda name: params[f"layers.{i}.{name}"]  # noqa: E731
        a = F.layer_norm(x, (config.d_model,), p("ln1_g"), p("ln1_b"), eps=LN_EPS)
        q = (a @ p("wq")).view(n, h, hd).transpose(0, 1)
        k = (a @ p("wk")).view(n, h, hd).transpose(0, 1)
        v = (a @ p("wv")).view(n, h, hd).transpose(0, 1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd) + mask, dim=-1)
        x = x + (att @ v).transpose(0, 1).reshape(n, config.d_model) @ p("wo")
        f = F.layer_norm(x, (config.d_model,), p("ln2_g"), p("ln2_b"), eps=LN_EPS)
        x = x + F.gelu(f @ p("w1") + p("b1"), approximate="tanh") @ p("w2") + p("b2")
    final = F.layer_norm(x, (config.d_model,), params["lnf_g"], params["lnf_b"], eps=LN_EPS)
    return final @ params["w_out"]


def finetune_weights(
    weights: ModelWeights,
    sequences: Sequence[tuple[Sequence[int], Sequence[int]]],
    epochs: int = 3,
    lr: float = 1e-2,
) -> ModelWeights:
    """Plain per-sequence gradient descent on next-token cross-entropy.

    ``sequences`` holds ``(context, target)`` pairs; only the target tokens
    are scored.
    """
    torch = _torch()
    config = weights.config
    params = {name: torch.tensor(t, dtype=torch.float64, requires_grad=True) for name, t in weights.tensors()}
    limit = config.max_positions
    for _ in range(epochs):
        for context, target in sequences:
            full = (list(context) + list(target))[-limit:]
            n_target = min(len(target), len(full) - 1)
            if n_target <= 0:
                continue
            logits = torch_forward(params, config, full[:-1])
            labels = torch.as_tensor(full[1:], dtype=torch.long)
            loss = torch.nn.functional.cross_entropy(logits[-n_target:], labels[-n_target:])
            grads = torch.autograd.grad(loss, list(params.values()))
            with torch.no_grad():
                for param, g in zip(params.values(), grads):
                    param -= lr * g
    flat = np.concatenate([params[name].detach().numpy().ravel() for name, _ in weights.tensors()])
    return ModelWeights.from_flat(config, flat)


def transformer_factory(base: ModelWeights, epochs: int = 3, lr: float = 1e-2):
    """Boost-tuning factory: fine-tune a fresh copy of ``base`` on the residual samples."""

    def fit(samples, index: int) -> TransformerSSM:
        pairs = [(s.prompt, s.llm_continuation) for s in samples]
        return TransformerSSM(finetune_weights(base, pairs, epochs, lr), id=index)

    return fit
