import numpy as np
import pytest

from ssmclip import tensor as T
from ssmclip.attention import AttentionBlock, AttentionEncoder, AttnConfig, SelfAttention, TokenOverflowError
from ssmclip.gradcheck import gradcheck
from ssmclip.tensor import Tensor


def test_single_token_attends_to_itself(rng):
    att = SelfAttention(8, 2, rng)
    x = rng.normal(size=(1, 8))
    w = att.qkv.weight.data
    value = x @ w[:, 16:] + att.qkv.bias.data[16:]
    expected = value @ att.out.weight.data + att.out.bias.data
    np.testing.assert_allclose(att(Tensor(x)).data, expected, rtol=1e-12)


def test_permutation_equivariance_without_positions(rng):
    blk = AttentionBlock(8, 2, 2, rng)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(blk(Tensor(x[perm])).data, blk(Tensor(x)).data[perm], atol=1e-12)


def test_block_gradient(rng):
    blk = AttentionBlock(8, 2, 2, rng)
    x = Tensor(rng.normal(size=(4, 8)))
    w = rng.normal(size=(4, 8))
    assert gradcheck(lambda: T.sum(blk(x) * w), [x] + blk.parameters()) <= 1e-6


def test_width_must_split_into_heads():
    with pytest.raises(ValueError):
        AttnConfig(width=10, heads=3)


def test_overflow_above_training_resolution(rng):
    enc = AttentionEncoder(AttnConfig(max_tokens=64, width=8, depth=1, projection_dim=6), rng)
    out = enc(rng.uniform(size=(2, 32, 32, 3))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    with pytest.raises(TokenOverflowError, match="256 tokens"):
        enc(rng.uniform(size=(1, 64, 64, 3)))


def test_position_table_grows_parameters():
    small = AttentionEncoder(AttnConfig(max_tokens=64)).num_parameters()
    large = AttentionEncoder(AttnConfig(max_tokens=256)).num_parameters()
    assert large - small == 192 * AttnConfig().width


def test_encoder_without_positions_ignores_patch_order(rng):
    cfg = AttnConfig(width=8, depth=2, max_tokens=16, projection_dim=5, positional=False)
    enc = AttentionEncoder(cfg, rng)
    img = rng.uniform(size=(16, 16, 3))
    blocks = img.reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(16, 4, 4, 3)
    perm = rng.permutation(16)
    shuffled = blocks[perm].reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(16, 16, 3)
    np.testing.assert_allclose(enc(shuffled).data, enc(img).data, atol=1e-12)


def test_encoder_gradient(rng):
    enc = AttentionEncoder(AttnConfig(4, 8, 2, 2, 4, 6, 2), rng)
    img = Tensor(rng.uniform(size=(8, 8, 3)))
    w = rng.normal(size=6)
    assert gradcheck(lambda: T.sum(enc(img) * w), [img] + enc.parameters(), max_coords=15, rng=rng) <= 1e-6
