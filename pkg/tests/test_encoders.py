from __future__ import annotations

import numpy as np
import pytest

from gatedid import tensor as T
from gatedid.encoders import SOURCE, face_encode, motion_encode, normalize_landmarks, phase_means
from gatedid.model import Model, ModelConfig
from gatedid.world import MotionState, perturb_landmarks

MODEL = Model(ModelConfig(), seed=0)
WORLD = MODEL.world


def sample(ident=0, e=0, o=0, box=(2, 2, 7, 7), seed=1):
    g = np.random.default_rng(ident * 31 + e * 7 + o)
    return WORLD.render(WORLD.identity(ident, 0), MotionState.sample(e, o, g), 0, seed, box)


def psi(samples, expressions=None):
    lm = np.stack([s.landmarks for s in samples])
    ex = expressions if expressions is not None else [s.motion.expression for s in samples]
    return motion_encode(lm, ex, [s.motion.orientation for s in samples], MODEL.motion)


# ---------------------------------------------------------------- face encoder


def test_face_encode_deterministic_and_tagged():
    s = sample()
    a, b = face_encode([s], MODEL.face), face_encode([s], MODEL.face)
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes()
    assert a.tag == SOURCE and a.tokens.shape == (1, 8, 32)


def test_face_encode_zero_projection_gives_zero_tokens():
    m = Model(ModelConfig(), seed=0)
    for name in m.names(["face.proj."]):
        m.params[name].data = np.zeros_like(m.params[name].data)
    assert not np.any(m.face([sample()]).data)


def test_face_tokens_entangle_motion():
    a = MODEL.face([sample(3, 0, 0)]).data.ravel()
    b = MODEL.face([sample(3, 5, 2)]).data.ravel()
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 0.999


def test_face_gradient_reaches_only_projection():
    m = Model(ModelConfig(), seed=0)
    m.params.set_trainable(True)
    for name in m.frozen_names():
        m.params[name].requires_grad = False
    T.reduce_sum(m.face([sample()])).backward()
    assert all(m.params[n].grad is None for n in m.frozen_names())
    assert all(m.params[n].grad is not None for n in m.names(["face.proj."]))


def test_phase_means_needs_every_phase():
    s = sample()
    assert phase_means(WORLD, s).shape == (4, WORLD.config.d_z)
    s.mask.m[:] = False
    s.mask.m[0] = True
    with pytest.raises(ValueError):
        phase_means(WORLD, s)


# ---------------------------------------------------------------- text encoder


def test_text_encoder_rows_and_null():
    tok = MODEL.text.encode([(1, 2, 3), (None, None, None)])
    assert tok.shape == (2, 3, 32)
    np.testing.assert_array_equal(tok.data[1], MODEL.text.null(1).data[0])
    with pytest.raises(ValueError):
        MODEL.text.encode([(7, 0, 0)])


# ---------------------------------------------------------------- motion encoder


def test_motion_encode_deterministic():
    s = [sample(1, 2, 1)]
    assert psi(s).data.tobytes() == psi(s).data.tobytes()


def test_motion_encode_shape_contract():
    assert psi([sample(), sample(1)]).shape == (2, 4, 32)


def test_motion_encode_expression_changes_psi():
    s = [sample(1, 2, 1)]
    assert np.linalg.norm(psi(s, [2]).data - psi(s, [5]).data) > 0


def test_motion_encode_unknown_class():
    with pytest.raises(ValueError):
        psi([sample()], [9])


def test_motion_encode_stable_under_landmark_perturbation():
    g = np.random.default_rng(0)
    ratios = []
    for k in range(50):
        s = sample(k, k % 7, k % 4)
        base = psi([s]).data
        lm = perturb_landmarks(WORLD, s.landmarks, 0.02, g)
        moved = motion_encode(lm[None], [s.motion.expression], [s.motion.orientation], MODEL.motion).data
        ratios.append(np.linalg.norm(moved - base) / np.linalg.norm(base))
    assert np.median(ratios) < 0.2


def test_normalize_landmarks_translation_and_scale_invariant():
    lm = sample().landmarks.astype(np.float64)
    np.testing.assert_allclose(normalize_landmarks(lm * 3 + 2), normalize_landmarks(lm), atol=1e-12)
