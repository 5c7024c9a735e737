import numpy as np
import pytest

from senselign import corpus
from senselign.model import BackpackLM, ModelConfig


def fd_gradcheck(loss_fn, params, rng, n_coords=30, h=1e-5):
    """Worst relative error between analytic gradients and central finite
    differences over randomly sampled coordinates of the given parameters.

    The denominator floor (1e-5) keeps coordinates whose true gradient sits
    at the central-difference roundoff scale (~1e-11 for O(1) losses at
    h=1e-5) from reporting pure FD noise as disagreement; any systematic
    backward bug shows up at full magnitude on the other coordinates.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            denom = max(abs(num), abs(grad[i]), 1e-5)
            worst = max(worst, abs(num - grad[i]) / denom)
    return worst


def make_side(id_lists, pad_id=0):
    """TokenizedBatch from explicit id lists (no tokenizer involved)."""
    return corpus._pad_side([list(map(int, ids)) for ids in id_lists], pad_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_vocab():
    return corpus.Vocab.build(["aa", "bb", "cc", "dd", "ee", "ff", "gg", "hh"])


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2,
                      n_senses=3, max_positions=16)
    return BackpackLM.init(cfg, seed=7)
