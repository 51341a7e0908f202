import numpy as np
import pytest

torch = pytest.importorskip("torch")

from spectree.boost_tuning import PromptSample  # noqa: E402
from spectree.finetune import finetune_weights, torch_forward, transformer_factory  # noqa: E402
from spectree.transformer import forward_full  # noqa: E402


def test_torch_forward_matches_numpy(small_model):
    params = {name: torch.tensor(t) for name, t in small_model.tensors()}
    tokens = [3, 1, 4, 1, 5, 9, 2, 6]
    ref, _ = forward_full(small_model, tokens)
    got = torch_forward(params, small_model.config, tokens).numpy()
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_finetuning_raises_target_likelihood(small_model):
    pairs = [([1, 2, 3], [7, 7, 7, 7])]

    def nll(w):
        logits, _ = forward_full(w, [1, 2, 3, 7, 7, 7])
        z = logits[2:] - logits[2:].max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[:, 7].mean()

    before = small_model.flat()
    tuned = finetune_weights(small_model, pairs, epochs=5, lr=0.1)
    assert nll(tuned) < nll(small_model)
    # the base weights are untouched
    assert np.array_equal(small_model.flat(), before)


def test_factory_builds_transformer_ssm(small_model):
    ssm = transformer_factory(small_model, epochs=1)([PromptSample((1, 2), (3, 4))], 2)
    assert ssm.kind == "transformer" and ssm.id == 2
