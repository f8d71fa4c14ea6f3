"""Text, face and motion encoders.

The text encoder is a frozen embedding table over prompt attributes. The
face encoder pairs two frozen random extractors (a global one over the
whole face, a local one per parity phase of the face cells) with a
trainable projection to ``k`` tokens. The motion encoder turns prompt
attributes plus landmarks into ``c`` tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Linear
from .tensor import ParamSet, Tensor
from .world import EXPRESSIONS, N_PHASES, ORIENTATIONS, World, WorldSample

SOURCE, PRED, TARGET = "source", "pred", "target"


@dataclass
class FaceFeatureTokens:
    tokens: Tensor  # (..., k, d_f)
    tag: str = SOURCE


class TextEncoder:
    """Frozen table: one slot each for expression, orientation, scene; each slot
    has a trailing "unspecified" row used for dropped attributes."""

    N_SLOTS = 3

    def __init__(self, params: ParamSet, n_scenes: int, d_f: int, rng: np.random.Generator, dtype=np.float32):
        self.params = params
        self.sizes = (len(EXPRESSIONS), len(ORIENTATIONS), n_scenes)
        self.offsets = (0, self.sizes[0] + 1, self.sizes[0] + self.sizes[1] + 2)
        rows = sum(self.sizes) + self.N_SLOTS
        params.add("text.table", Tensor(rng.normal(0.0, 1.0, size=(rows, d_f)).astype(dtype)))

    def row(self, slot: int, value: Optional[int]) -> int:
        size = self.sizes[slot]
        if value is None:
            return self.offsets[slot] + size
        if not 0 <= value < size:
            raise ValueError(f"unknown class id {value} for prompt slot {slot}")
        return self.offsets[slot] + int(value)

    def rows(self, prompts: Sequence[Sequence[Optional[int]]]) -> np.ndarray:
        return np.array([[self.row(s, p[s]) for s in range(self.N_SLOTS)] for p in prompts], dtype=np.int64)

    def encode(self, prompts: Sequence[Sequence[Optional[int]]]) -> Tensor:
        """(B, 3, d_f) tokens; ``None`` entries select the unspecified row."""
        return T.embedding(self.params["text.table"], self.rows(prompts))

    def null(self, batch: int) -> Tensor:
        return self.encode([(None, None, None)] * batch)


def phase_means(world: World, sample: WorldSample) -> np.ndarray:
    """Mean face-cell content per parity phase, (4, d_z)."""
    cells = np.flatnonzero(sample.mask.m)
    ph = world.phases[cells]
    out = np.zeros((N_PHASES, world.config.d_z))
    for p in range(N_PHASES):
        sel = cells[ph == p]
        if sel.size == 0:
            raise ValueError(f"face box {sample.box} does not cover every parity phase")
        out[p] = sample.z0[sel].mean(axis=0)
    return out


class FaceEncoder:
    def __init__(
        self,
        params: ParamSet,
        world: World,
        *,
        d_f: int,
        k: int,
        d_global: int,
        d_hidden: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.params = params
        self.world = world
        self.k, self.d_f = k, d_f
        self.dtype = dtype
        d_z = world.config.d_z
        self.global_extractor = Linear(params, "face.global", N_PHASES * d_z, d_global, rng, bias=False, dtype=dtype)
        self.local_extractor = Linear(params, "face.local", d_z, d_f, rng, bias=False, dtype=dtype)
        for name in ("face.global.weight", "face.local.weight"):
            params[name].requires_grad = False
        self.proj = MLP(params, "face.proj", d_global + N_PHASES * d_f, d_hidden, k * d_f, rng, dtype=dtype)

    def extract(self, samples: Sequence[WorldSample]) -> np.ndarray:
        """Frozen features, (B, d_global + 4 * d_f); no gradient path."""
        means = np.stack([phase_means(self.world, s) for s in samples]).astype(self.dtype)
        with T.no_grad():
            flat = Tensor(means.reshape(len(samples), -1))
            g = T.tanh(self.global_extractor(flat))
            loc = T.tanh(self.local_extractor(Tensor(means)))
        return np.concatenate([g.data, loc.data.reshape(len(samples), -1)], axis=1)

    def project(self, features: np.ndarray) -> Tensor:
        out = self.proj(Tensor(np.asarray(features, dtype=self.dtype)))
        return T.reshape(out, (features.shape[0], self.k, self.d_f))

    def __call__(self, samples: Sequence[WorldSample]) -> Tensor:
        return self.project(self.extract(samples))


def face_encode(samples: Sequence[WorldSample], enc: FaceEncoder, tag: str = SOURCE) -> FaceFeatureTokens:
    return FaceFeatureTokens(enc(samples), tag)


def normalize_landmarks(landmarks: np.ndarray) -> np.ndarray:
    """Centre on the centroid and divide by RMS spread; (..., L, 2) -> (..., 2L)."""
    pts = np.asarray(landmarks, dtype=np.float64)
    c = pts - pts.mean(axis=-2, keepdims=True)
    rms = np.sqrt((c**2).sum(axis=-1).mean(axis=-1))[..., None, None]
    return (c / np.maximum(rms, 1e-9)).reshape(*pts.shape[:-2], -1)


class MotionEncoder:
    """psi = MLP(concat(keypoint_encoder(landmarks), text(expression, orientation)))."""

    def __init__(
        self,
        params: ParamSet,
        text: TextEncoder,
        *,
        n_landmarks: int,
        d_f: int,
        c: int,
        d_landmark: int,
        d_hidden: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.params = params
        self.text = text
        self.c, self.d_f = c, d_f
        self.dtype = dtype
        self.keypoints = MLP(params, "motion.keypoint", 2 * n_landmarks, d_landmark, d_landmark, rng, dtype=dtype)
        self.fuse = MLP(params, "motion.fuse", d_landmark + 2 * d_f, d_hidden, c * d_f, rng, dtype=dtype)

    def __call__(self, landmarks: np.ndarray, expressions: Sequence[int], orientations: Sequence[int]) -> Tensor:
        b = len(expressions)
        if len(orientations) != b or np.shape(landmarks)[0] != b:
            raise ValueError("motion batch sizes disagree")
        rows = np.array(
            [[self.text.row(0, int(e)), self.text.row(1, int(o))] for e, o in zip(expressions, orientations)]
        )
        f_p = T.reshape(T.embedding(self.params["text.table"], rows), (b, 2 * self.d_f))
        f_l = self.keypoints(Tensor(normalize_landmarks(landmarks).astype(self.dtype)))
        psi = self.fuse(T.concat([f_l, f_p], axis=-1))
        return T.reshape(psi, (b, self.c, self.d_f))


def motion_encode(landmarks, expressions, orientations, enc: MotionEncoder) -> Tensor:
    return enc(landmarks, expressions, orientations)
