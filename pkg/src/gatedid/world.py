"""Procedural identity x motion scenes on a small latent grid.

A face occupies an axis-aligned box of cells. Every face cell holds
``G[phase] @ [u; onehot(expression); onehot(orientation)]`` where ``u`` is
the identity's unit vector and ``phase`` is the cell's (row % 2, col % 2)
parity class. The four maps ``G[phase]`` are frozen random matrices fixed
by ``FROZEN_MAP_SEED``, so any face region touching all four phases can be
inverted by least squares. Background cells hold the scene embedding.
A small noise field, independent of identity and motion, covers the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .saa import RegionMask

FROZEN_MAP_SEED = 0x9E3779B97F4A7C15

EXPRESSIONS = ("neutral", "happy", "angry", "disgusted", "surprised", "sad", "afraid")
ORIENTATIONS = ("front", "side", "up", "down")
SCENES = ("lake", "mountains", "street", "snow", "desert", "sofa", "beach")

# (yaw range, pitch range) in degrees per orientation class
ORIENTATION_BOUNDS = {
    "front": ((-8.0, 8.0), (-8.0, 8.0)),
    "side": ((25.0, 45.0), (-8.0, 8.0)),
    "up": ((-8.0, 8.0), (15.0, 30.0)),
    "down": ((-8.0, 8.0), (-30.0, -15.0)),
}

# eyes, nose tip, mouth corners as (x, y) fractions of the face box
LANDMARK_TEMPLATE = np.array([[0.3, 0.35], [0.7, 0.35], [0.5, 0.55], [0.35, 0.75], [0.65, 0.75]])
LANDMARK_DEPTH = np.array([0.5, 0.5, 1.0, 0.6, 0.6])

N_PHASES = 4


@dataclass(frozen=True)
class WorldConfig:
    height: int = 12
    width: int = 12
    d_z: int = 16
    d_id: int = 16
    n_scenes: int = 4
    face_min: int = 3
    face_max: int = 6
    render_noise: float = 0.05

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def n_expr(self) -> int:
        return len(EXPRESSIONS)

    @property
    def n_orient(self) -> int:
        return len(ORIENTATIONS)

    @property
    def code_dim(self) -> int:
        return self.d_id + self.n_expr + self.n_orient


@dataclass(frozen=True)
class IdentityProfile:
    id: int
    u: np.ndarray


@dataclass(frozen=True)
class MotionState:
    expression: int
    orientation: int
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        if not 0 <= self.expression < len(EXPRESSIONS):
            raise ValueError(f"unknown expression class {self.expression}")
        if not 0 <= self.orientation < len(ORIENTATIONS):
            raise ValueError(f"unknown orientation class {self.orientation}")
        (ylo, yhi), (plo, phi) = ORIENTATION_BOUNDS[ORIENTATIONS[self.orientation]]
        if not (ylo <= self.yaw <= yhi and plo <= self.pitch <= phi):
            raise ValueError(f"jitter ({self.yaw}, {self.pitch}) outside bounds of {ORIENTATIONS[self.orientation]}")

    @classmethod
    def sample(cls, expression: int, orientation: int, rng: np.random.Generator) -> "MotionState":
        (ylo, yhi), (plo, phi) = ORIENTATION_BOUNDS[ORIENTATIONS[orientation]]
        return cls(expression, orientation, float(rng.uniform(ylo, yhi)), float(rng.uniform(plo, phi)))


@dataclass
class WorldSample:
    identity: IdentityProfile
    motion: MotionState
    scene: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1
    mask: RegionMask
    z0: np.ndarray  # (n, d_z)
    landmarks: np.ndarray  # (L, 2) as (x, y) grid coordinates
    seed: int = 0

    @property
    def prompt(self) -> tuple[int, int, int]:
        return (self.motion.expression, self.motion.orientation, self.scene)


def phase_of_cells(height: int, width: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(height * width), width)
    return (rows % 2) * 2 + (cols % 2)


class World:
    """The frozen generative map plus identity catalogue helpers."""

    def __init__(self, config: WorldConfig = WorldConfig()):
        self.config = config
        if config.height < config.face_min or config.width < config.face_min:
            raise ValueError("grid too small for the minimum face box")
        g = rngmod.stream(FROZEN_MAP_SEED, rngmod.WORLD, config.d_z, config.d_id)
        # x = [u; e; o] has squared norm 3, so this gives unit variance per channel
        self.maps = g.normal(0.0, math.sqrt(1.0 / 3.0), size=(N_PHASES, config.d_z, config.code_dim))
        self.scene_embeddings = g.normal(0.0, 1.0, size=(config.n_scenes, config.d_z))
        self.phases = phase_of_cells(config.height, config.width)

    # -- factors ---------------------------------------------------------
    def identity(self, identity_id: int, seed: int) -> IdentityProfile:
        v = rngmod.stream(seed, "identity", identity_id).normal(size=self.config.d_id)
        return IdentityProfile(identity_id, (v / np.linalg.norm(v)).astype(np.float32))

    def code(self, u: np.ndarray, motion: MotionState) -> np.ndarray:
        c = self.config
        e = np.zeros(c.n_expr)
        e[motion.expression] = 1.0
        o = np.zeros(c.n_orient)
        o[motion.orientation] = 1.0
        return np.concatenate([u, e, o])

    def face_content(self, u: np.ndarray, motion: MotionState, cells: np.ndarray) -> np.ndarray:
        x = self.code(u, motion)
        return np.einsum("pdc,c->pd", self.maps, x)[self.phases[cells]]

    def landmarks(self, box: Sequence[int], motion: MotionState) -> np.ndarray:
        x0, y0, x1, y1 = box
        yaw, pitch = math.radians(motion.yaw), math.radians(motion.pitch)
        frac = LANDMARK_TEMPLATE.copy()
        frac[:, 0] = 0.5 + (frac[:, 0] - 0.5) * math.cos(yaw) + 0.35 * math.sin(yaw) * LANDMARK_DEPTH
        frac[:, 1] = 0.5 + (frac[:, 1] - 0.5) * math.cos(pitch) - 0.35 * math.sin(pitch) * LANDMARK_DEPTH
        pts = np.stack([x0 + frac[:, 0] * (x1 - x0), y0 + frac[:, 1] * (y1 - y0)], axis=1)
        return self.clamp(pts)

    def clamp(self, pts: np.ndarray) -> np.ndarray:
        c = self.config
        out = pts.copy()
        out[:, 0] = np.clip(out[:, 0], 0.0, float(c.width))
        out[:, 1] = np.clip(out[:, 1], 0.0, float(c.height))
        return out

    def random_box(self, rng: np.random.Generator) -> tuple[int, int, int, int]:
        c = self.config
        w = int(rng.integers(c.face_min, min(c.face_max, c.width) + 1))
        h = int(rng.integers(c.face_min, min(c.face_max, c.height) + 1))
        x0 = int(rng.integers(0, c.width - w + 1))
        y0 = int(rng.integers(0, c.height - h + 1))
        return (x0, y0, x0 + w, y0 + h)

    # -- rendering -------------------------------------------------------
    def render(
        self,
        identity: IdentityProfile,
        motion: MotionState,
        scene: int,
        seed: int,
        box: Optional[Sequence[int]] = None,
    ) -> WorldSample:
        c = self.config
        if not 0 <= scene < c.n_scenes:
            raise ValueError(f"unknown scene class {scene}")
        g = rngmod.stream(seed, "render")
        if box is None:
            box = self.random_box(g)
        box = tuple(int(v) for v in box)
        bw, bh = box[2] - box[0], box[3] - box[1]
        if bw < 2 or bh < 2:
            raise ValueError(f"face box {box} must span at least 2x2 cells")
        mask = RegionMask.from_box(box, c.height, c.width, identity.id)
        noise = g.normal(0.0, c.render_noise, size=(c.n, c.d_z))
        z0 = np.tile(self.scene_embeddings[scene], (c.n, 1))
        cells = np.flatnonzero(mask.m)
        z0[cells] = self.face_content(identity.u, motion, cells)
        z0 = (z0 + noise).astype(np.float32)
        lm = self.landmarks(box, motion).astype(np.float32)
        return WorldSample(identity, motion, scene, box, mask, z0, lm, seed)

    def render_background(self, scene: int, seed: int) -> np.ndarray:
        c = self.config
        g = rngmod.stream(seed, "background")
        z = np.tile(self.scene_embeddings[scene], (c.n, 1)) + g.normal(0.0, c.render_noise, size=(c.n, c.d_z))
        return z.astype(np.float32)


def perturb_landmarks(world: World, landmarks: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian jitter with std ``sigma * grid extent``, clamped to the grid."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return landmarks.copy()
    extent = float(max(world.config.height, world.config.width))
    return world.clamp(landmarks + rng.normal(0.0, sigma * extent, size=landmarks.shape))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    world: World
    seed: int
    samples: list[WorldSample]
    train_ids: list[int]
    heldout_ids: list[int]
    aux_ids: list[int] = field(default_factory=list)

    def by_identity(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.identity.id, []).append(i)
        return out

    def indices(self, ids: Sequence[int]) -> list[int]:
        wanted = set(ids)
        return [i for i, s in enumerate(self.samples) if s.identity.id in wanted]

    def catalog(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids ascending, unit vectors) over every identity in the dataset."""
        seen: dict[int, np.ndarray] = {}
        for s in self.samples:
            seen.setdefault(s.identity.id, s.identity.u)
        ids = np.array(sorted(seen))
        return ids, np.stack([seen[i] for i in ids])


def make_dataset(
    world: World,
    n_ids: int = 200,
    n_motions_per_id: int = 12,
    split: float = 0.8,
    seed: int = 0,
    n_aux_ids: int = 10,
) -> Dataset:
    """Main identities with ``n_motions_per_id`` distinct (expression, orientation)
    pairs each, a train/held-out identity split, and an auxiliary set whose
    identities show every expression x orientation combination."""
    if n_ids < 2:
        raise ValueError("need at least two identities")
    n_combos = len(EXPRESSIONS) * len(ORIENTATIONS)
    if not 1 <= n_motions_per_id <= n_combos:
        raise ValueError(f"n_motions_per_id must lie in [1, {n_combos}]")
    if not 0.0 < split < 1.0:
        raise ValueError("split must be a train fraction in (0, 1)")
    order = rngmod.stream(seed, "split").permutation(n_ids)
    n_train = int(round(split * n_ids))
    n_train = min(max(n_train, 1), n_ids - 1)
    train_ids = sorted(int(i) for i in order[:n_train])
    heldout_ids = sorted(int(i) for i in order[n_train:])

    samples: list[WorldSample] = []
    for ident in range(n_ids):
        g = rngmod.stream(seed, "motions", ident)
        combos = g.choice(n_combos, size=n_motions_per_id, replace=False)
        samples.extend(_render_combos(world, seed, ident, combos, g))
    aux_ids = list(range(n_ids, n_ids + n_aux_ids))
    for ident in aux_ids:
        g = rngmod.stream(seed, "motions", ident)
        samples.extend(_render_combos(world, seed, ident, np.arange(n_combos), g))
    return Dataset(world, seed, samples, train_ids, heldout_ids, aux_ids)


def _render_combos(world: World, seed: int, ident: int, combos, g: np.random.Generator) -> list[WorldSample]:
    profile = world.identity(ident, seed)
    out = []
    for j, combo in enumerate(combos):
        e, o = divmod(int(combo), len(ORIENTATIONS))
        motion = MotionState.sample(e, o, g)
        scene = int(g.integers(world.config.n_scenes))
        sample_seed = int(rngmod.stream(seed, "sample-seed", ident, j).integers(2**63))
        out.append(world.render(profile, motion, scene, sample_seed))
    return out


# -- persistence -------------------------------------------------------------

MANIFEST = "manifest.json"


def _sample_record(s: WorldSample) -> dict:
    return {
        "identity": s.identity.id,
        "expression": s.motion.expression,
        "orientation": s.motion.orientation,
        "yaw": s.motion.yaw,
        "pitch": s.motion.pitch,
        "scene": s.scene,
        "box": list(s.box),
        "seed": s.seed,
    }


def save_dataset(ds: Dataset, directory: Path) -> None:
    """Manifest JSON plus one flat little-endian float32 file per sample:
    z0 (n*d_z), mask (n), landmarks (L*2), identity vector (d_id)."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(ds.samples):
        flat = np.concatenate(
            [s.z0.reshape(-1), s.mask.m.astype(np.float32), s.landmarks.reshape(-1), s.identity.u.astype(np.float32)]
        )
        (directory / "samples" / f"{i:06d}.bin").write_bytes(flat.astype("<f4").tobytes())
        records.append(_sample_record(s))
    c = ds.world.config
    manifest = {
        "format": "gatedid-dataset",
        "version": 1,
        "world": asdict(c),
        "seed": ds.seed,
        "counts": {
            "samples": len(ds.samples),
            "train_ids": len(ds.train_ids),
            "heldout_ids": len(ds.heldout_ids),
            "aux_ids": len(ds.aux_ids),
        },
        "layout": {"z0": c.n * c.d_z, "mask": c.n, "landmarks": 2 * len(LANDMARK_TEMPLATE), "u": c.d_id},
        "splits": {"train": ds.train_ids, "heldout": ds.heldout_ids, "aux": ds.aux_ids},
        "samples": records,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("format") != "gatedid-dataset":
        raise ValueError(f"{directory} is not a dataset directory")
    world = World(WorldConfig(**manifest["world"]))
    c = world.config
    lay = manifest["layout"]
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        flat = np.frombuffer((directory / "samples" / f"{i:06d}.bin").read_bytes(), dtype="<f4").astype(np.float32)
        if flat.size != sum(lay.values()):
            raise ValueError(f"sample {i}: truncated file")
        z0, rest = np.split(flat, [lay["z0"]])
        m, rest = np.split(rest, [lay["mask"]])
        lm, u = np.split(rest, [lay["landmarks"]])
        motion = MotionState(rec["expression"], rec["orientation"], rec["yaw"], rec["pitch"])
        samples.append(
            WorldSample(
                IdentityProfile(rec["identity"], u),
                motion,
                rec["scene"],
                tuple(rec["box"]),
                RegionMask(m.astype(np.int64), rec["identity"]),
                z0.reshape(c.n, c.d_z),
                lm.reshape(-1, 2),
                rec["seed"],
            )
        )
    sp = manifest["splits"]
    return Dataset(world, manifest["seed"], samples, sp["train"], sp["heldout"], sp.get("aux", []))
