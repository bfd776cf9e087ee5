import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylefusion.core.exceptions import ShapeError
from stylefusion.models.config import DssiConfig, FusionMode
from stylefusion.models.tensors import ProjectionWeights, QkvBlocks, TokenBlocks
from stylefusion.services.attention import (
    DitBlock, branch_masses, dit_block_forward, dit_block_forward_traced, full_block_attention, init_dit_weights,
    output_block_attention, project_qkv, split_output_attention, vanilla_output_attention, weights_from_json,
    weights_to_json, zero_dit_weights,
)
from stylefusion.services.verification import random_qkv
from stylefusion.utils.linalg import make_rng


def _scalar_qkv(q_o, k, v):
    """One token per block, width 1."""
    m = lambda x: np.array([[float(x)]])
    return QkvBlocks(
        Q_p=m(0), Q_s=m(0), Q_o=m(q_o),
        K_p=m(k[0]), K_s=m(k[1]), K_o=m(k[2]),
        V_p=m(v[0]), V_s=m(v[1]), V_o=m(v[2]),
    )


def test_identity_projection(blocks_factory, rng):
    """Identity weights return the input blocks."""
    blocks = blocks_factory(rng)
    eye = np.eye(blocks.d)
    qkv = project_qkv(blocks, ProjectionWeights(W_q=eye, W_k=eye, W_v=eye))
    assert np.array_equal(qkv.Q_p, blocks.x_p)
    assert np.array_equal(qkv.K_s, blocks.style)
    assert np.array_equal(qkv.V_o, blocks.x_o)


def test_one_hot_rows_select_weight_rows(rng):
    """One-hot prompt tokens pick rows of W_q."""
    d = 4
    w = rng.standard_normal((d, d))
    blocks = TokenBlocks(
        x_p=np.eye(d)[[2, 0]], x_s=(rng.standard_normal((2, d)),), x_o=rng.standard_normal((3, d)),
        mask_o=np.zeros(3, dtype=np.int8),
    )
    qkv = project_qkv(blocks, ProjectionWeights(W_q=w, W_k=w, W_v=w))
    assert np.array_equal(qkv.Q_p, w[[2, 0]])


def test_zero_output_tokens_project_to_zero(blocks_factory, rng):
    """Zeroed x_o gives zero Q_o, K_o and V_o."""
    blocks = blocks_factory(rng)
    blocks = TokenBlocks(x_p=blocks.x_p, x_s=blocks.x_s, x_o=np.zeros_like(blocks.x_o), mask_o=blocks.mask_o)
    w = rng.standard_normal((blocks.d, blocks.d))
    qkv = project_qkv(blocks, ProjectionWeights(W_q=w, W_k=w, W_v=w))
    assert not qkv.Q_o.any() and not qkv.K_o.any() and not qkv.V_o.any()


def test_projection_width_mismatch(blocks_factory, rng):
    """Weights of another width are a shape error."""
    eye = np.eye(3)
    with pytest.raises(ShapeError):
        project_qkv(blocks_factory(rng), ProjectionWeights(W_q=eye, W_k=eye, W_v=eye))


def test_identical_tokens_attend_to_shared_value():
    """All tokens equal means every H row equals the shared value row."""
    row = np.array([[0.3, -1.2, 2.0]])
    same = lambda n: np.repeat(row, n, axis=0)
    qkv = QkvBlocks(
        Q_p=same(2), Q_s=same(3), Q_o=same(4), K_p=same(2), K_s=same(3), K_o=same(4),
        V_p=same(2), V_s=same(3), V_o=same(4),
    )
    full = full_block_attention(qkv, 3)
    for h in (full.H_p, full.H_s, full.H_o):
        assert np.allclose(h, row, atol=1e-14)


def test_three_key_hand_case():
    """Logits [0, ln 2, 0] give weights [1/4, 1/2, 1/4]."""
    qkv = _scalar_qkv(1.0, (0.0, math.log(2.0), 0.0), (1.0, 2.0, 3.0))
    out = vanilla_output_attention(qkv, 1)
    assert np.allclose(out.attn.concatenated(), [[0.25, 0.5, 0.25]], atol=1e-15)
    assert out.h_o[0, 0] == pytest.approx(0.25 * 1 + 0.5 * 2 + 0.25 * 3)


def test_key_scaling_scales_logits(small_qkv):
    """Scaling every key by c scales the logits by c."""
    c = 2.5
    scaled = QkvBlocks(**{**small_qkv.__dict__, "K_p": c * small_qkv.K_p, "K_s": c * small_qkv.K_s, "K_o": c * small_qkv.K_o})
    base = output_block_attention(small_qkv, small_qkv.d).logits_Z
    assert np.allclose(output_block_attention(scaled, scaled.d).logits_Z, c * base, atol=1e-12)


def test_all_ones_values_give_all_ones_output(small_qkv):
    """Rows of attention are convex weights."""
    ones = lambda m: np.ones_like(m)
    qkv = QkvBlocks(**{**small_qkv.__dict__, "V_p": ones(small_qkv.V_p), "V_s": ones(small_qkv.V_s), "V_o": ones(small_qkv.V_o)})
    assert np.allclose(vanilla_output_attention(qkv, qkv.d).h_o, 1.0, atol=1e-14)


def _shifted_style_qkv(shift):
    d = 4
    return QkvBlocks(
        Q_p=np.ones((2, d)), Q_s=np.ones((3, d)), Q_o=np.ones((5, d)),
        K_p=np.zeros((2, d)), K_s=np.full((3, d), shift), K_o=np.zeros((5, d)),
        V_p=np.zeros((2, d)), V_s=np.zeros((3, d)), V_o=np.zeros((5, d)),
    )


def test_style_shift_takes_nearly_all_mass():
    """Keys shifted by +10 capture more than 99% of every row."""
    masses = branch_masses(output_block_attention(_shifted_style_qkv(10.0), 4))
    assert np.all(masses.mass_s > 0.99)


def test_unreachable_style_token_has_no_mass():
    """A -1e9 logit leaves the style branch with no mass."""
    qkv = _scalar_qkv(1.0, (0.0, -1e9, 0.0), (1.0, 1.0, 1.0))
    assert branch_masses(output_block_attention(qkv, 1)).mass_s[0] < 1e-12


def test_uniform_logits_split_mass_by_count():
    """Zero logits give mass N_b / N per block."""
    masses = branch_masses(output_block_attention(_shifted_style_qkv(0.0), 4))
    assert np.allclose(masses.mass_p, 0.2)
    assert np.allclose(masses.mass_s, 0.3)
    assert np.allclose(masses.mass_o, 0.5)


def test_vanilla_matches_full_attention_rows():
    """Vanilla output equals the o rows of full attention for 200 random draws."""
    rng = make_rng(3)
    for _ in range(200):
        qkv = random_qkv((3, 4, 5), 6, rng)
        out = vanilla_output_attention(qkv, 6)
        assert np.allclose(out.h_o, full_block_attention(qkv, 6).H_o, atol=1e-12)
        masses = branch_masses(out.attn)
        assert np.allclose(masses.mass_p + masses.mass_s + masses.mass_o, 1.0, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_attention_rows_are_stochastic(seed):
    """Concatenated alpha rows sum to 1 with entries in [0, 1]."""
    qkv = random_qkv((2, 3, 4), 5, make_rng(seed))
    alpha = output_block_attention(qkv, 5).concatenated()
    assert np.all((alpha >= 0) & (alpha <= 1))
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-10)


def test_permuting_style_tokens_permutes_columns(small_qkv):
    """Reordering style keys reorders the alpha_s columns."""
    perm = np.array([3, 0, 5, 1, 4, 2])
    permuted = QkvBlocks(**{**small_qkv.__dict__, "K_s": small_qkv.K_s[perm], "V_s": small_qkv.V_s[perm]})
    base = output_block_attention(small_qkv, small_qkv.d)
    moved = output_block_attention(permuted, permuted.d)
    assert np.allclose(moved.alpha_s, base.alpha_s[:, perm], atol=1e-14)
    assert np.allclose(vanilla_output_attention(permuted, permuted.d).h_o,
                       vanilla_output_attention(small_qkv, small_qkv.d).h_o, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(min_value=0.01, max_value=5.0))
def test_raising_style_keys_never_lowers_style_mass(seed, shift):
    """Adding c > 0 to style logits is monotone in style mass."""
    qkv = random_qkv((2, 3, 4), 5, make_rng(seed))
    base = output_block_attention(qkv, 5)
    logits = base.logits_Z.copy()
    logits[:, 2:5] += shift
    raised = split_output_attention(logits, qkv.counts)
    assert np.all(branch_masses(raised).mass_s >= branch_masses(base).mass_s - 1e-15)


def test_zero_weights_are_identity(blocks_factory, rng):
    """Zero projections and MLP leave every block unchanged."""
    blocks = blocks_factory(rng)
    out = dit_block_forward(blocks, zero_dit_weights(blocks.d), DssiConfig())
    assert np.allclose(out.stacked(), blocks.stacked(), atol=0.0)


def test_forward_preserves_mask_and_is_finite(rng):
    """The mask passes through and outputs stay within the weight-norm envelope."""
    d = 6
    blocks = TokenBlocks(
        x_p=rng.standard_normal((2, d)), x_s=(rng.standard_normal((3, d)),),
        x_o=rng.standard_normal((4, d)), mask_o=np.array([1, 1, 0, 0]),
    )
    w = init_dit_weights(d, 1, seed=11)[0]
    out = dit_block_forward(blocks, w, DssiConfig(mode=FusionMode.VANILLA))
    assert np.array_equal(out.mask_o, blocks.mask_o)
    x = blocks.stacked()
    x_norm = np.abs(x).max() * math.sqrt(d)
    v_norm = np.linalg.norm(w.proj.W_v, 2)
    mid = x_norm * (1.0 + v_norm)
    envelope = mid * (1.0 + np.linalg.norm(w.W_mlp1, 2) * np.linalg.norm(w.W_mlp2, 2))
    assert np.all(np.linalg.norm(out.stacked(), axis=1) <= envelope + 1e-9)


def test_traced_forward_records_style_weight(blocks_factory, rng):
    """Dynamic fusion stores lambda; disabled fusion records vanilla."""
    blocks = blocks_factory(rng)
    w = init_dit_weights(blocks.d, 1, seed=2)[0]
    _, trace = dit_block_forward_traced(blocks, w, DssiConfig(), layer=3)
    assert trace.layer == 3 and trace.mode == "dssi" and 0.0 < trace.lam < 1.0
    _, off = dit_block_forward_traced(blocks, w, DssiConfig(), apply_fusion=False)
    assert off.mode == "vanilla" and off.lam is None


def test_multiple_style_blocks_share_one_slot(rng):
    """Two style blocks act exactly like their pre-merged concatenation."""
    d = 5
    a, b = rng.standard_normal((2, d)), rng.standard_normal((3, d))
    common = dict(x_p=rng.standard_normal((2, d)), x_o=rng.standard_normal((4, d)), mask_o=np.zeros(4))
    split = TokenBlocks(x_s=(a, b), **common)
    merged = TokenBlocks(x_s=(np.vstack([a, b]),), **common)
    w = init_dit_weights(d, 1, seed=4)[0]
    out_split = dit_block_forward(split, w, DssiConfig())
    out_merged = dit_block_forward(merged, w, DssiConfig())
    assert [s.shape[0] for s in out_split.x_s] == [2, 3]
    assert np.allclose(out_split.stacked(), out_merged.stacked(), atol=1e-12)


def test_weights_json_replays_exactly():
    """A serialised weight stack reloads to the same matrices."""
    weights = init_dit_weights(4, 2, seed=8)
    loaded = weights_from_json(weights_to_json(weights, seed=8))
    assert len(loaded) == 2
    for original, again in zip(weights, loaded):
        assert np.array_equal(original.proj.W_k, again.proj.W_k)
        assert np.array_equal(original.W_mlp2, again.W_mlp2)


def test_init_weights_are_seeded():
    """Same seed, same weights; layers draw from different streams."""
    a = init_dit_weights(4, 2, seed=1)
    b = init_dit_weights(4, 2, seed=1)
    assert np.array_equal(a[1].proj.W_q, b[1].proj.W_q)
    assert not np.array_equal(a[0].proj.W_q, a[1].proj.W_q)


@pytest.mark.parametrize("apply_fusion", [True, False])
def test_dit_block_matches_traced_forward(blocks_factory, rng, apply_fusion):
    blocks = blocks_factory(rng)
    w = init_dit_weights(blocks.d, 1, seed=5)[0]
    cfg = DssiConfig(kappa=1.7)
    out, trace = DitBlock(w, cfg).forward(blocks, layer=2, apply_fusion=apply_fusion)
    expected_out, expected_trace = dit_block_forward_traced(blocks, w, cfg, layer=2, apply_fusion=apply_fusion)
    assert np.array_equal(out.x_o, expected_out.x_o)
    assert np.array_equal(trace.h_o, expected_trace.h_o)
    assert trace.lam == expected_trace.lam


def test_dit_block_keeps_its_fuser_mode(blocks_factory, rng):
    """Disabling fusion for one call leaves the block's configured mode untouched."""
    blocks = blocks_factory(rng)
    block = DitBlock(init_dit_weights(blocks.d, 1, seed=5)[0])
    block.forward(blocks, apply_fusion=False)
    assert block.fuser.config.mode == FusionMode.DSSI
