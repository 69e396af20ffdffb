import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmclip import tensor as T
from ssmclip.attention import AttentionEncoder, AttnConfig
from ssmclip.cost import BlockSpec, flops_memory, measured_macs
from ssmclip.text import TextConfig, TextEncoder, TokenBatch
from ssmclip.vision import VisionConfig, VisionEncoder


def hand_tally(L, d, N, expand=2, k=4):
    E = expand * d
    return (L * d * 2 * E          # in_proj
            + k * L * E            # causal conv
            + L * E * E            # step-size projection
            + 2 * L * E * N        # B and C projections
            + 2 * L * E * N        # scan: state update and readout
            + L * E * d)           # out_proj


def test_golden_tiny_block():
    spec = BlockSpec(width=4, n_state=2)
    assert hand_tally(8, 4, 2) == 2048
    assert flops_memory("ssm-block", 8, config=spec).flops == 2048
    assert measured_macs("ssm-block", 8, spec) == 2048


@pytest.mark.parametrize("arch", ["ssm-block", "attn-block"])
@pytest.mark.parametrize("L", [1, 5, 16, 33])
def test_analytic_count_equals_instrumented(arch, L):
    spec = BlockSpec(width=8, n_state=3, heads=2)
    assert flops_memory(arch, L, config=spec).flops == measured_macs(arch, L, spec)


def test_towers_match_instrumented_counts():
    rng = np.random.default_rng(0)
    vc = VisionConfig(4, (1, 1), (8, 16), 4, 12)
    enc = VisionEncoder(vc, rng)
    with T.no_grad(), T.count_macs() as c:
        enc(rng.uniform(size=(1, 32, 32, 3)))
    assert flops_memory("ssm", resolution=32, config=vc).flops == c[0]

    ac = AttnConfig(4, 8, 2, 2, 64, 12, 2)
    att = AttentionEncoder(ac, rng)
    with T.no_grad(), T.count_macs() as c:
        att(rng.uniform(size=(1, 32, 32, 3)))
    assert flops_memory("attn", resolution=32, config=ac).flops == c[0]

    tc = TextConfig(vocab_size=10, width=8, n_layers=2, n_state=3, projection_dim=6)
    txt = TextEncoder(tc, rng)
    with T.no_grad(), T.count_macs() as c:
        txt(TokenBatch.from_ids([list(range(2, 10)) * 2]))
    assert flops_memory("text", 16, config=tc).flops == c[0]


def test_quadrupling_tokens():
    a1, a4 = flops_memory("attn-block", 64), flops_memory("attn-block", 256)
    assert a4.flops_by_order[2] == 16 * a1.flops_by_order[2]
    assert a4.flops_by_order[1] == 4 * a1.flops_by_order[1]
    s1, s4 = flops_memory("ssm-block", 64), flops_memory("ssm-block", 256)
    assert s4.flops == 4 * s1.flops
    assert s4.flops_by_order[2] == 0
    assert s4.activation_bytes == 4 * s1.activation_bytes


@pytest.mark.parametrize("tokens", [64, 256, 1024])
def test_vision_towers_scale(tokens):
    s1, s4 = flops_memory("ssm", tokens), flops_memory("ssm", 4 * tokens)
    assert s4.flops_by_order[1] == 4 * s1.flops_by_order[1]
    assert s4.flops_by_order[2] == 0
    a1, a4 = flops_memory("attn", tokens), flops_memory("attn", 4 * tokens)
    assert a4.flops_by_order[2] == 16 * a1.flops_by_order[2]


def test_attention_to_ssm_ratio_grows():
    # above the 6 * width crossover the quadratic term dominates the attention count
    for L in (256, 1024):
        r1 = flops_memory("attn", L).flops / flops_memory("ssm", L).flops
        r2 = flops_memory("attn", 16 * L).flops / flops_memory("ssm", 16 * L).flops
        assert r2 / r1 > 8


def test_resolution_specific_memory():
    ssm = flops_memory("ssm", resolution=64)
    assert ssm.resolution_specific_bytes == 0
    cfg = AttnConfig()
    att = flops_memory("attn", resolution=32, config=cfg)
    assert att.resolution_specific_bytes == (cfg.max_tokens * cfg.width + cfg.heads * 64 * 64) * 4
    over = flops_memory("attn", resolution=64, config=cfg)
    assert over.tokens == 256 and over.notes


def test_text_activation_memory_linear():
    m64 = flops_memory("text", 64).activation_bytes
    m512 = flops_memory("text", 512)
    assert m512.activation_bytes / m64 <= 8.5
    assert m512.flops_by_order[2] == 0


def test_parameter_bytes_match_modules():
    assert flops_memory("ssm", 64).param_bytes == VisionEncoder(VisionConfig()).num_parameters() * 4
    assert flops_memory("attn", 64, dtype_bytes=8).param_bytes == AttentionEncoder().num_parameters() * 8


@given(st.sampled_from(["ssm", "attn", "text", "ssm-block", "attn-block"]), st.sampled_from([16, 64, 256]))
def test_counts_are_deterministic(arch, L):
    assert flops_memory(arch, L) == flops_memory(arch, L)


def test_argument_errors():
    with pytest.raises(ValueError):
        flops_memory("rnn", 64)
    with pytest.raises(ValueError):
        flops_memory("ssm", 60)
    with pytest.raises(ValueError):
        flops_memory("ssm", 64, resolution=32)
    with pytest.raises(ValueError):
        flops_memory("text", resolution=32)
    with pytest.raises(ValueError):
        measured_macs("ssm", 16)
