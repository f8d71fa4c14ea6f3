from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedid import tensor as T
from gatedid.nn import Attention
from gatedid.saa import (
    ADAPTIVE,
    INTERVENED,
    FaceInput,
    GatingWeights,
    LayoutPolicy,
    MaskOverlapError,
    RegionMask,
    SampleLayout,
    activation_weights,
    gated_attention,
    intervene,
    multi_id_gate,
    saa_forward,
    saa_multi_forward,
)
from gatedid.tensor import ParamSet, ShapeError, Tensor


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def proj(d_q, d_kv, d_a=None, d_out=None, seed=0, heads=1, name="p"):
    d_a = d_a or d_q
    return Attention(ParamSet(), name, d_q, d_kv, d_a, d_out or d_q, np.random.default_rng(seed), heads=heads, dtype=np.float64)


def set_weights(p: Attention, **mats):
    for key, val in mats.items():
        p.params[f"{p.name}.{key}.weight"].data = np.asarray(val, dtype=np.float64)


def gate(values, stage=ADAPTIVE):
    return GatingWeights(t64(values), stage)


def mask(bits, label=0):
    return RegionMask(np.asarray(bits), label)


# ---------------------------------------------------------------- activation_weights


def test_activation_weights_hand_example():
    # Q = I, K = [[2, 0]]: logit sums [2, 0] -> w = [1, 0]
    p = proj(2, 2)
    set_weights(p, q=np.eye(2), k=np.eye(2))
    w = activation_weights(t64(np.eye(2)), t64([[2.0, 0.0]]), p)
    np.testing.assert_array_equal(w.numpy(), [1.0, 0.0])
    assert w.stage == ADAPTIVE


def test_activation_weights_degenerate_is_zero():
    p = proj(3, 2)
    z = t64(np.tile([[0.4, -1.0, 2.0]], (5, 1)))
    w = activation_weights(z, t64(np.ones((2, 2))), p)
    np.testing.assert_array_equal(w.numpy(), np.zeros(5))


def test_activation_weights_logit_scaling_invariance_random_4x3():
    rng = np.random.default_rng(3)
    p = proj(3, 3)
    z, c = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    base = activation_weights(t64(z), t64(c), p).numpy()
    for c_scale in (0.1, 7.0, 1e3):
        scaled = activation_weights(t64(z * c_scale), t64(c), p).numpy()
        np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-12)
    # with and without the 1/sqrt(d) factor
    with_factor = activation_weights(t64(z), t64(c), p, scale_logits=True).numpy()
    np.testing.assert_allclose(with_factor, base, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_adaptive_weights_minmax_property(n, k, seed):
    rng = np.random.default_rng(seed)
    p = proj(3, 2, seed=seed)
    w = activation_weights(t64(rng.normal(size=(n, 3))), t64(rng.normal(size=(k, 2))), p).numpy()
    assert np.all((w >= 0) & (w <= 1))
    if np.any(w):
        assert w.min() == 0.0 and w.max() == 1.0


def test_multi_head_gates_are_averaged():
    rng = np.random.default_rng(1)
    p = proj(4, 3, heads=2)
    z, c = t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(2, 3)))
    q, k, _ = p.project(z, c)
    per_head = []
    for h in range(2):
        sums = (q.data[:, 2 * h : 2 * h + 2] @ k.data[:, 2 * h : 2 * h + 2].T).sum(axis=1)
        per_head.append((sums - sums.min()) / (sums.max() - sums.min()))
    np.testing.assert_allclose(activation_weights(z, c, p).numpy(), np.mean(per_head, axis=0), atol=1e-14)


# ---------------------------------------------------------------- saa_forward


def test_saa_forward_zero_gate_is_bit_identical():
    rng = np.random.default_rng(0)
    z = t64(rng.normal(size=(6, 4)))
    out = saa_forward(z, t64(rng.normal(size=(3, 2))), proj(4, 2), gate(np.zeros(6)))
    assert out.data.tobytes() == z.data.tobytes()


def test_saa_forward_unit_gate_is_residual_cross_attention():
    rng = np.random.default_rng(1)
    p = proj(4, 2)
    z, c = t64(rng.normal(size=(6, 4))), t64(rng.normal(size=(3, 2)))
    np.testing.assert_allclose(saa_forward(z, c, p, gate(np.ones(6))).data, (z.data + p(z, c).data), atol=1e-6)


def test_saa_forward_scalar_hand_case():
    # n=2, k=1, d=1: single key so each query attends with weight 1 to V=3
    p = proj(1, 1)
    set_weights(p, q=[[1.0]], k=[[1.0]], v=[[3.0]], o=[[1.0]])
    out = saa_forward(t64([[1.0], [2.0]]), t64([[1.0]]), p, gate([1.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[4.0], [2.0]])


def test_saa_forward_zero_rows_exact_and_shape_error():
    rng = np.random.default_rng(2)
    z = t64(rng.normal(size=(5, 4)))
    out = saa_forward(z, t64(rng.normal(size=(2, 3))), proj(4, 3), gate([0.0, 0.7, 0.0, 1.0, 0.0]))
    for i in (0, 2, 4):
        assert out.data[i].tobytes() == z.data[i].tobytes()
    with pytest.raises(ShapeError):
        saa_forward(z, t64(np.ones((2, 3))), proj(4, 3), gate(np.ones(4)))


# ---------------------------------------------------------------- intervene


def test_intervene_beta_zero_is_identity():
    w = gate([0.0, 0.3, 1.0, 0.25])
    out = intervene(w, mask([1, 0, 1, 0]), 0.0)
    assert out.numpy().tobytes() == w.numpy().tobytes()
    assert out.stage == INTERVENED


def test_intervene_hand_example():
    out = intervene(gate([0.5, 0.2]), mask([1, 0]), 2.0).numpy()
    np.testing.assert_allclose(out, [2.5, 0.2 / 3], rtol=0, atol=1e-15)


def test_intervene_full_mask_adds_beta():
    w = np.array([0.0, 0.4, 1.0])
    np.testing.assert_allclose(intervene(gate(w), mask([1, 1, 1]), 2.0).numpy(), w + 2.0)


def test_intervene_rejects_negative_beta_and_intervened_input():
    with pytest.raises(ValueError):
        intervene(gate([0.5]), mask([1]), -0.1)
    with pytest.raises(ValueError):
        intervene(gate([0.5], INTERVENED), mask([1]), 1.0)


# ---------------------------------------------------------------- multi_id_gate


W6 = np.array([0.0, 0.3, 0.9, 1.0, 0.6, 0.15])
A = mask([1, 1, 0, 0, 0, 0], 0)
B = mask([0, 0, 1, 1, 0, 0], 1)


def test_multi_id_gate_inside_window():
    policy = LayoutPolicy(0.24, 2.0, [A, B])
    out = multi_id_gate(gate(W6), policy, 0, 0, 50).numpy()
    expect = np.array([W6[0] + 2, W6[1] + 2, 0.0, 0.0, W6[4] / 3, W6[5] / 3])
    np.testing.assert_allclose(out, expect, atol=1e-15)


def test_multi_id_gate_window_boundary_is_ceil():
    policy = LayoutPolicy(0.24, 2.0, [A, B])
    assert policy.intervention_steps(50) == 12
    inside = multi_id_gate(gate(W6), policy, 0, 11, 50).numpy()
    after = multi_id_gate(gate(W6), policy, 0, 12, 50).numpy()
    assert inside[0] == W6[0] + 2
    np.testing.assert_array_equal(after, [W6[0], W6[1], 0.0, 0.0, W6[4], W6[5]])


def test_multi_id_gate_single_identity_matches_intervene():
    policy = LayoutPolicy(0.5, 2.0, [A])
    out = multi_id_gate(gate(W6), policy, 0, 0, 10).numpy()
    np.testing.assert_array_equal(out, intervene(gate(W6), A, 2.0).numpy())
    np.testing.assert_array_equal(multi_id_gate(gate(W6), policy, 0, 9, 10).numpy(), W6)


def test_multi_id_gate_confine_zeroes_outside_own_mask():
    policy = LayoutPolicy(0.0, 2.0, [A, B], confine=True)
    np.testing.assert_array_equal(multi_id_gate(gate(W6), policy, 1, 0, 10).numpy(), [0, 0, 0.9, 1.0, 0, 0])


def test_overlapping_masks_name_the_pair():
    with pytest.raises(MaskOverlapError, match="0 and 1"):
        LayoutPolicy(0.2, 2.0, [A, mask([0, 1, 1, 0, 0, 0], 1)])


def test_layout_policy_validation():
    with pytest.raises(ValueError):
        LayoutPolicy(1.5, 2.0, [])
    with pytest.raises(ValueError):
        LayoutPolicy(0.2, -1.0, [])


def test_region_mask_from_box_row_major():
    m = RegionMask.from_box((1, 0, 3, 2), height=3, width=4, label=0)
    np.testing.assert_array_equal(m.m.reshape(3, 4), [[0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]])
    with pytest.raises(ValueError):
        RegionMask.from_box((0, 0, 5, 1), height=3, width=4, label=0)


# ---------------------------------------------------------------- saa_multi_forward


def _faces(rng, n_ids, d=4, d_f=3, k=2):
    return [FaceInput(t64(rng.normal(size=(k, d_f))), proj(d, d_f, seed=10 + i, name=f"f{i}"), i) for i in range(n_ids)]


def test_multi_forward_single_identity_equals_saa_forward():
    rng = np.random.default_rng(4)
    z = t64(rng.normal(size=(6, 4)))
    (face,) = _faces(rng, 1)
    policy = LayoutPolicy(0.5, 2.0, [A])
    g = multi_id_gate(activation_weights(z, face.tokens, face.proj), policy, 0, 0, 4)
    ref = saa_forward(z, face.tokens, face.proj, g)
    assert saa_multi_forward(z, [face], policy, 0, 4).data.tobytes() == ref.data.tobytes()


@pytest.mark.parametrize("config_seed", [0, 1, 2])
def test_multi_forward_order_invariant_bitwise(config_seed):
    rng = np.random.default_rng(config_seed)
    n_ids = 3
    z = t64(rng.normal(size=(9, 4)))
    faces = _faces(rng, n_ids)
    masks = [mask(np.eye(3, dtype=int)[i].repeat(3), i) for i in range(n_ids)]
    policy = LayoutPolicy(0.3, 2.0, masks)
    ref = saa_multi_forward(z, faces, policy, 0, 10).data.tobytes()
    perms = list(itertools.permutations(range(n_ids)))
    for _ in range(10):
        order = perms[rng.integers(len(perms))]
        assert saa_multi_forward(z, [faces[i] for i in order], policy, 0, 10).data.tobytes() == ref


def test_multi_forward_contribution_decomposition_under_suppression():
    rng = np.random.default_rng(5)
    z = t64(rng.normal(size=(4, 4)))
    fa, fb = _faces(rng, 2)
    ma, mb = mask([1, 1, 0, 0], 0), mask([0, 0, 1, 1], 1)
    policy = LayoutPolicy(0.0, 2.0, [ma, mb])
    out = saa_multi_forward(z, [fa, fb], policy, 0, 1).data
    ga = multi_id_gate(activation_weights(z, fa.tokens, fa.proj), policy, 0, 0, 1)
    only_a = gated_attention(z, fa.tokens, fa.proj, ga).data
    # rows under mask A receive only identity A's contribution
    np.testing.assert_allclose(out[:2], z.data[:2] + only_a[:2], atol=1e-12)


def test_multi_forward_rows_independent_of_other_identity_tokens():
    rng = np.random.default_rng(6)
    z = t64(rng.normal(size=(6, 4)))
    fa, fb = _faces(rng, 2)
    policy = LayoutPolicy(0.24, 2.0, [A, B])
    base = saa_multi_forward(z, [fa, fb], policy, 0, 20).data
    fb2 = FaceInput(t64(fb.tokens.data + rng.normal(size=fb.tokens.shape)), fb.proj, 1)
    moved = saa_multi_forward(z, [fa, fb2], policy, 0, 20).data
    np.testing.assert_allclose(moved[A.m], base[A.m], atol=1e-6)


def test_multi_forward_keep_zeroes_gate_per_sample():
    rng = np.random.default_rng(7)
    z = t64(rng.normal(size=(2, 6, 4)))
    (face,) = _faces(rng, 1)
    tokens = t64(np.stack([face.tokens.data] * 2))
    out = saa_multi_forward(z, [FaceInput(tokens, face.proj, 0, np.array([True, False]))])
    assert out.data[1].tobytes() == z.data[1].tobytes()
    assert not np.array_equal(out.data[0], z.data[0])


def test_multi_forward_errors():
    rng = np.random.default_rng(8)
    z = t64(rng.normal(size=(6, 4)))
    with pytest.raises(ValueError):
        saa_multi_forward(z, [])
    fa, fb = _faces(rng, 2)
    fb.label = 0
    with pytest.raises(ValueError):
        saa_multi_forward(z, [fa, fb])


def test_gates_receive_gradients():
    rng = np.random.default_rng(9)
    ps = ParamSet({"z": Tensor(rng.normal(size=(5, 4)), requires_grad=True)})
    p = proj(4, 3)
    c = t64(rng.normal(size=(2, 3)))
    loss = T.reduce_sum(saa_forward(ps["z"], c, p, activation_weights(ps["z"], c, p)))
    loss.backward()
    assert ps["z"].grad is not None and np.all(np.isfinite(ps["z"].grad))


# ---------------------------------------------------------------- per-sample layout (training)


def test_sample_layout_hand_example():
    w = gate([[0.2, 0.6, 1.0], [0.2, 0.6, 1.0]])
    layout = SampleLayout(np.array([[1, 0, 0], [1, 1, 0]], dtype=bool), np.array([True, False]), 2.0)
    out = layout.apply(w)
    np.testing.assert_allclose(out.numpy(), [[2.2, 0.2, 1.0 / 3.0], [0.2, 0.6, 1.0]], rtol=0, atol=1e-15)
    assert out.stage == INTERVENED


def test_sample_layout_matches_intervene_on_active_rows():
    rng = np.random.default_rng(2)
    w = gate(rng.random((1, 6)))
    m = rng.random(6) < 0.5
    ref = intervene(gate(w.numpy()[0]), mask(m), 1.5).numpy()
    out = SampleLayout(m[None], np.array([True]), 1.5).apply(w).numpy()[0]
    np.testing.assert_array_equal(out, ref)


def test_sample_layout_beta_zero_and_errors():
    w = gate([[0.1, 0.7]])
    assert SampleLayout(np.array([[True, False]]), np.array([True]), 0.0).apply(w).numpy().tobytes() == w.numpy().tobytes()
    with pytest.raises(ShapeError):
        SampleLayout(np.ones((1, 3), dtype=bool), np.array([True]), 1.0).apply(w)
    with pytest.raises(ValueError):
        SampleLayout(np.ones((1, 2), dtype=bool), np.array([True]), -1.0).apply(w)
