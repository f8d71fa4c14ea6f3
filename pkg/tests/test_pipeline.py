from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedid import tensor as T
from gatedid.pipeline import (
    AnchorBatch,
    DenoiserNet,
    NoiseSchedule,
    SamplerTrace,
    add_noise,
    anchoring_loss,
    cfg_combine,
    corrupt,
    ddim_loop,
    ddim_sample,
    ddim_timesteps,
    initial_noise,
    isolation_mask,
)
from gatedid.saa import LayoutPolicy, RegionMask
from gatedid.tensor import ParamSet, ShapeError, Tensor

SCHED = NoiseSchedule.linear(200)


def tiny_net(precondition=True, seed=0, n=16, d_z=3, d_f=4):
    params = ParamSet()
    net = DenoiserNet(
        params, n_tokens=n, d_z=d_z, d_model=8, d_f=d_f, n_blocks=2, heads=2,
        rng=np.random.default_rng(seed), alpha_bars=SCHED.alpha_bars if precondition else None, dtype=np.float64,
    )
    # break the zero-initialised output so the network is not trivially constant
    rng = np.random.default_rng(seed + 1)
    for name, p in params.items():
        if name.endswith(".o.weight") or name.startswith("den.out"):
            p.data = rng.normal(0, 0.3, size=p.shape)
    return net


# ---------------------------------------------------------------- schedule


def test_schedule_invariants():
    ab = SCHED.alpha_bars
    assert np.all((SCHED.betas > 0) & (SCHED.betas < 1))
    assert np.all(np.diff(ab) < 0) and ab[0] <= 1 and ab[-1] > 0
    assert SCHED.t_train == 200


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([]))


def test_schedule_reference_rescaling():
    plain = NoiseSchedule.linear(1000, reference_steps=None)
    short = NoiseSchedule.linear(200, reference_steps=1000)
    np.testing.assert_allclose(short.betas[[0, -1]], [5e-4, 0.1])
    np.testing.assert_allclose(plain.betas[[0, -1]], [1e-4, 2e-2])


# ---------------------------------------------------------------- add_noise


def test_corrupt_alpha_bar_one_is_z0():
    z0 = np.array([1.0, -2.0])
    np.testing.assert_array_equal(corrupt(z0, 1.0, np.array([5.0, 5.0])), z0)


def test_corrupt_alpha_bar_zero_limit_is_eps():
    eps = np.array([0.3, -0.7])
    np.testing.assert_allclose(corrupt(np.array([9.0, 9.0]), 1e-14, eps), eps, atol=1e-6)


def test_corrupt_scalar_hand_value():
    assert corrupt(np.array(2.0), 0.25, np.array(0.0)) == pytest.approx(1.0, abs=1e-15)


def test_add_noise_range_and_shape_errors():
    z = np.zeros((2, 3))
    with pytest.raises(ValueError):
        add_noise(z, [0, 200], z, SCHED)
    with pytest.raises(ValueError):
        add_noise(z, [-1, 0], z, SCHED)
    with pytest.raises(ShapeError):
        add_noise(z, [0, 1], np.zeros((2, 4)), SCHED)


# ---------------------------------------------------------------- loss


def _batch(rng, b=4, n=16, d_z=3):
    return AnchorBatch(
        z0=rng.normal(size=(b, n, d_z)), faces=None, text=Tensor(rng.normal(size=(b, 2, 4))),
        t=rng.integers(0, 200, size=b), eps=rng.normal(size=(b, n, d_z)),
    )


def test_anchoring_loss_oracle_is_zero():
    rng = np.random.default_rng(0)
    batch = _batch(rng)
    oracle = lambda z, t, text, faces, **kw: Tensor(batch.eps.copy())  # noqa: E731
    assert anchoring_loss(oracle, batch, SCHED).item() == 0.0


def test_anchoring_loss_zero_predictor_is_noise_power():
    rng = np.random.default_rng(1)
    batch = AnchorBatch(
        z0=np.zeros((10, 100, 10)), faces=None, text=Tensor(np.zeros((10, 1, 1))),
        t=np.zeros(10, dtype=int), eps=rng.normal(size=(10, 100, 10)),
    )
    zero = lambda z, t, text, faces, **kw: Tensor(np.zeros(np.shape(z)))  # noqa: E731
    assert anchoring_loss(zero, batch, SCHED).item() == pytest.approx(1.0, abs=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_anchoring_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(seed=seed % 7)
    assert anchoring_loss(net, _batch(rng), SCHED).item() >= 0.0


# ---------------------------------------------------------------- cfg


def test_cfg_scale_one_is_conditional():
    c, u = np.array([0.3, 1.7]), np.array([-2.0, 5.0])
    assert cfg_combine(c, u, 1.0) is c


def test_cfg_scale_zero_is_unconditional():
    c, u = np.array([0.3, 1.7]), np.array([-2.0, 5.0])
    assert cfg_combine(c, u, 0.0) is u


def test_cfg_scalar_hand_value():
    assert cfg_combine(np.array(2.0), np.array(1.0), 5.0) == 6.0


def test_cfg_shape_mismatch():
    with pytest.raises(ShapeError):
        cfg_combine(np.zeros(2), np.zeros(3), 5.0)


# ---------------------------------------------------------------- DDIM


def test_ddim_timesteps_endpoints_and_bounds():
    ts = ddim_timesteps(200, 20)
    assert ts[0] == 199 and ts[-1] == 0 and len(ts) == 20 and np.all(np.diff(ts) < 0)
    with pytest.raises(ValueError):
        ddim_timesteps(200, 201)


@pytest.mark.parametrize("steps", [20, 50])
def test_ddim_zero_predictor_closed_form(steps):
    x_T = np.random.default_rng(0).normal(size=(2, 5))
    ts = ddim_timesteps(200, steps)
    ab = SCHED.alpha_bars
    seen = []
    out = ddim_loop(SCHED, x_T, steps, lambda x, t, i: np.zeros_like(x), lambda i, t, x: seen.append(x.copy()))
    x = x_T.copy()
    for i, t in enumerate(ts):
        prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x = np.sqrt(prev) / np.sqrt(ab[t]) * x
        np.testing.assert_allclose(seen[i], x, rtol=0, atol=1e-6)
    np.testing.assert_allclose(out, x_T / np.sqrt(ab[199]), rtol=0, atol=1e-6)


def test_ddim_exact_oracle_recovers_z0():
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(3, 4))
    ab = SCHED.alpha_bars

    def oracle(x, t, i):
        return (x - np.sqrt(ab[t]) * z0) / np.sqrt(1.0 - ab[t])

    out = ddim_loop(SCHED, rng.normal(size=z0.shape), 200, oracle)
    np.testing.assert_allclose(out, z0, atol=1e-3)


def test_ddim_sample_deterministic_and_seeded():
    net = tiny_net()
    rng = np.random.default_rng(3)
    text, null = Tensor(rng.normal(size=(2, 2, 4))), Tensor(np.zeros((2, 2, 4)))
    faces = [(0, Tensor(rng.normal(size=(2, 3, 4))))]
    kw = dict(steps=5, cfg=5.0, policy=None, schedule=SCHED, null_text=null)
    a = ddim_sample(net, faces, text, seed=[1, 2], **kw)
    b = ddim_sample(net, faces, text, seed=[1, 2], **kw)
    c = ddim_sample(net, faces, text, seed=[1, 3], **kw)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a[1], c[1])
    np.testing.assert_array_equal(initial_noise([1], 16, 3)[0], initial_noise([1, 2], 16, 3)[0])


def test_ddim_sample_errors():
    net = tiny_net()
    text = Tensor(np.zeros((2, 2, 4)))
    with pytest.raises(ShapeError):
        ddim_sample(net, [], text, steps=3, cfg=1.0, policy=None, seed=[1], schedule=SCHED)
    with pytest.raises(ValueError):
        ddim_sample(net, [], text, steps=3, cfg=5.0, policy=None, seed=[1, 2], schedule=SCHED)
    with pytest.raises(ValueError):
        ddim_sample(net, [], text, steps=3, cfg=1.0, policy=None, seed=[1, 2], schedule=SCHED, isolate=True)


def test_sampler_trace_files(tmp_path):
    net = tiny_net()
    rng = np.random.default_rng(4)
    masks = [RegionMask.from_box((0, 0, 2, 2), 4, 4, 0)]
    trace = SamplerTrace()
    ddim_sample(
        net, [(0, Tensor(rng.normal(size=(1, 3, 4))))], Tensor(rng.normal(size=(1, 2, 4))),
        steps=3, cfg=1.0, policy=LayoutPolicy(0.34, 2.0, masks), seed=[0], schedule=SCHED, trace=trace,
    )
    trace.write(tmp_path)
    shape = tuple(int(v) for v in (tmp_path / "latents.shape").read_text().strip().split(","))
    assert shape == (4, 1, 16, 3)
    assert np.fromfile(tmp_path / "latents.bin", dtype="<f4").size == np.prod(shape)
    rows = (tmp_path / "gates.csv").read_text().splitlines()
    assert rows[0] == "step,t,block,label,sample,cell,w"
    assert len(rows) == 1 + 3 * 2 * 16  # steps x blocks x cells


# ---------------------------------------------------------------- denoiser


@pytest.mark.parametrize("precondition", [True, False])
def test_denoiser_shape_preserved(precondition):
    net = tiny_net(precondition)
    rng = np.random.default_rng(5)
    out = net(rng.normal(size=(3, 16, 3)), np.array([0, 50, 199]), Tensor(rng.normal(size=(3, 2, 4))),
              [(0, Tensor(rng.normal(size=(3, 5, 4))))])
    assert out.shape == (3, 16, 3)
    with pytest.raises(ShapeError):
        net(rng.normal(size=(3, 15, 3)), np.array([0, 1, 2]), Tensor(rng.normal(size=(3, 2, 4))))


def test_preconditioning_zero_output_is_scaled_input():
    params = ParamSet()
    net = DenoiserNet(params, n_tokens=4, d_z=2, d_model=4, d_f=3, n_blocks=1, heads=1,
                      rng=np.random.default_rng(0), alpha_bars=SCHED.alpha_bars, dtype=np.float64)
    z = np.random.default_rng(1).normal(size=(2, 4, 2))
    out = net(z, np.array([10, 150]), Tensor(np.zeros((2, 1, 3)))).data
    c_skip = np.sqrt(1.0 - SCHED.alpha_bars[[10, 150]])[:, None, None]
    np.testing.assert_allclose(out, c_skip * z, atol=1e-14)


def test_isolation_mask_blocks_cross_region_attention():
    a = np.array([1, 1, 0, 0, 0], dtype=bool)
    b = np.array([0, 0, 0, 1, 0], dtype=bool)
    m = isolation_mask([a, b])
    assert m[0, 1] and m[0, 2] and not m[0, 3]  # face A sees itself and background
    assert m[2, 4] and not m[2, 0] and not m[2, 3]  # background sees background only
    with pytest.raises(ValueError):
        isolation_mask([a, a])


def test_background_independent_of_face_tokens_with_confine_and_isolation():
    net = tiny_net(seed=3)
    rng = np.random.default_rng(6)
    masks = [RegionMask.from_box((0, 0, 2, 2), 4, 4, 0), RegionMask.from_box((2, 2, 4, 4), 4, 4, 1)]
    policy = LayoutPolicy(0.24, 2.0, masks, confine=True)
    text, null = Tensor(rng.normal(size=(1, 2, 4))), Tensor(np.zeros((1, 2, 4)))
    outs = []
    for _ in range(2):
        faces = [(j, Tensor(rng.normal(size=(1, 3, 4)))) for j in range(2)]
        outs.append(ddim_sample(net, faces, text, steps=6, cfg=5.0, policy=policy, seed=[7], schedule=SCHED,
                                null_text=null, isolate=True))
    bg = ~(masks[0].m | masks[1].m)
    np.testing.assert_allclose(outs[0][0][bg], outs[1][0][bg], atol=1e-4)
    assert not np.allclose(outs[0][0][masks[0].m], outs[1][0][masks[0].m])


def test_unconditional_branch_matches_zero_gate():
    net = tiny_net(seed=4)
    rng = np.random.default_rng(8)
    z, t = rng.normal(size=(2, 16, 3)), np.array([3, 90])
    text = Tensor(rng.normal(size=(2, 2, 4)))
    faces = [(0, Tensor(rng.normal(size=(2, 3, 4))))]
    with T.no_grad():
        dropped = net(z, t, text, faces, keep=np.array([False, False])).data
        plain = net(z, t, text, ()).data
    assert dropped.tobytes() == plain.tobytes()
