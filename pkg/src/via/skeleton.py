"""Skeleton sequences, a synthetic motion/character generator, and VIAS files.

A sequence is a ``[T, V, C]`` float32 array. The generator renders a bank of
procedural motions on a 13-joint skeleton for a set of characters (view angle,
limb proportions, root placement), so that the cross-reconstruction target
for any (motion, character) pair is known exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ROOT = 0

JOINT_NAMES = (
    "root", "neck", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_knee", "r_knee", "l_ankle", "r_ankle",
)
PARENTS = (-1, 0, 1, 1, 1, 3, 4, 5, 6, 0, 0, 9, 10)
# limb group per joint, indexes into CharacterFactor.body_scale
LIMB_OF = (-1, 0, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6)
LIMBS = ("torso", "head", "shoulder", "upper_arm", "forearm", "thigh", "shin")
# rest-pose bone vectors (child - parent), y up, +x is the character's left
REST_BONES = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.50, 0.0],
    [0.0, 0.18, 0.0],
    [0.17, 0.0, 0.0],
    [-0.17, 0.0, 0.0],
    [0.0, -0.27, 0.0],
    [0.0, -0.27, 0.0],
    [0.0, -0.24, 0.0],
    [0.0, -0.24, 0.0],
    [0.10, -0.42, 0.0],
    [-0.10, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
])
# global factor keeping every coordinate inside [-1, 1]
WORLD_SCALE = 0.6
# bones that swing in the generated motions (the rest stay rigid)
ACTIVE_BONES = (1, 2, 5, 6, 7, 8, 9, 10, 11, 12)

MAGIC = b"VIAS"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
MAX_PAYLOAD_BYTES = 1 << 31


class SequenceFormatError(ValueError):
    code = "format"


class BadMagicError(SequenceFormatError):
    code = "bad-magic"


class UnsupportedVersionError(SequenceFormatError):
    code = "bad-version"


class TruncatedPayloadError(SequenceFormatError):
    code = "truncated"


class DimensionOverflowError(SequenceFormatError):
    code = "dimension-overflow"


@dataclass
class SkeletonSequence:
    frames: np.ndarray
    motion_id: int | None = None
    character_id: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        validate_frames(self.frames)

    @property
    def shape(self):
        return self.frames.shape


def validate_frames(frames: np.ndarray) -> None:
    if frames.ndim != 3:
        raise ValueError(f"skeleton sequence must be [T, V, C], got shape {frames.shape}")
    t, v, c = frames.shape
    if t < 8 or v < 2 or c not in (2, 3):
        raise ValueError(f"need T >= 8, V >= 2, C in (2, 3); got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("skeleton sequence contains non-finite coordinates")


@dataclass
class CharacterFactor:
    view_angle: float
    body_scale: tuple[float, ...]
    root_offset: tuple[float, ...]

    def __post_init__(self):
        if len(self.body_scale) != len(LIMBS) or min(self.body_scale) <= 0:
            raise ValueError(f"body_scale needs {len(LIMBS)} strictly positive factors")

    @classmethod
    def identity(cls, dim: int = 3) -> "CharacterFactor":
        return cls(0.0, (1.0,) * len(LIMBS), (0.0,) * dim)


# ---------------------------------------------------------------- geometry


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about the vertical (y) axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def forward_kinematics(bones: np.ndarray) -> np.ndarray:
    """Joint positions ``[T, V, 3]`` from per-frame bone vectors ``[T, V, 3]``."""
    pos = np.zeros_like(bones)
    for j, p in enumerate(PARENTS):
        if p >= 0:
            pos[:, j] = pos[:, p] + bones[:, j]
    return pos


def apply_character(bones: np.ndarray, factor: CharacterFactor, dim: int) -> np.ndarray:
    """Render canonical bone trajectories for one character.

    Limbs are scaled, the body is rotated by the view angle, the root is
    offset, and for ``dim == 2`` the result is projected orthographically
    onto the image plane (x, y).
    """
    limb_scale = np.array([1.0] + [factor.body_scale[LIMB_OF[j]] for j in range(1, len(PARENTS))])
    pos = forward_kinematics(bones * limb_scale[None, :, None]) * WORLD_SCALE
    pos = pos @ yaw_matrix(factor.view_angle).T
    offset = np.zeros(3)
    offset[:len(factor.root_offset)] = factor.root_offset
    pos = pos + offset
    return pos[..., :2] if dim == 2 else pos


def root_center(seq):
    """Subtract the root joint from every joint, frame by frame."""
    frames = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    centered = frames - frames[..., ROOT:ROOT + 1, :]
    if isinstance(seq, SkeletonSequence):
        return SkeletonSequence(centered, seq.motion_id, seq.character_id)
    return centered


# ---------------------------------------------------------------- motion bank


@dataclass
class MotionBankEntry:
    motion_id: int
    # per active bone and axis (x-swing, z-swing): arrays of (amplitude, cycles, phase)
    waves: dict = field(repr=False)
    # transient burst: bone, axis, amplitude, centre (fraction of T), width
    burst: tuple = ()

    def angles(self, T: int) -> np.ndarray:
        """Swing angles ``[T, V, 2]`` (about x and about z) of every bone."""
        tau = np.arange(T) / T
        out = np.zeros((T, len(PARENTS), 2))
        for (bone, axis), comps in self.waves.items():
            for amp, cyc, ph in comps:
                out[:, bone, axis] += amp * np.sin(2 * np.pi * cyc * tau + ph)
        bone, axis, amp, centre, width = self.burst
        out[:, bone, axis] += amp * np.exp(-0.5 * ((tau - centre) / width) ** 2)
        return out

    def bones(self, T: int) -> np.ndarray:
        ang = self.angles(T)
        rot = _rot_z(ang[..., 1]) @ _rot_x(ang[..., 0])
        return np.einsum("tvij,vj->tvi", rot, REST_BONES)


def _draw_motion(motion_id: int, rng: np.random.Generator) -> MotionBankEntry:
    waves = {}
    for bone in ACTIVE_BONES:
        rigid = bone in (1, 2)
        for axis in (0, 1):
            n = int(rng.integers(2, 5))
            top = 0.25 if rigid else (0.9 if axis == 0 else 0.5)
            amps = rng.uniform(0.2, 1.0, n) * top / np.sqrt(n)
            cycles = rng.integers(1, 4, n).astype(float)
            phases = rng.uniform(0, 2 * np.pi, n)
            waves[(bone, axis)] = np.stack([amps, cycles, phases], 1)
    burst = (int(rng.choice(ACTIVE_BONES[2:])), int(rng.integers(0, 2)),
             float(rng.uniform(0.5, 1.2) * rng.choice([-1, 1])),
             float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.05, 0.12)))
    return MotionBankEntry(motion_id, waves, burst)


def motion_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-joint Euclidean distance between two trajectories."""
    return float(np.linalg.norm(a - b, axis=-1).mean())


def motion_bank(n_motions: int, T: int, seed: int, margin: float = 0.05) -> list[MotionBankEntry]:
    """Draw ``n_motions`` motions whose canonical trajectories differ by at least ``margin``."""
    rng = np.random.default_rng([seed, 1])
    bank: list[MotionBankEntry] = []
    canon: list[np.ndarray] = []
    attempts = 0
    while len(bank) < n_motions:
        attempts += 1
        if attempts > 100 * n_motions:
            raise RuntimeError("could not draw separable motions; lower the margin")
        m = _draw_motion(len(bank), rng)
        traj = forward_kinematics(m.bones(T)) * WORLD_SCALE
        if all(motion_distance(traj, c) > margin for c in canon):
            bank.append(m)
            canon.append(traj)
    return bank


def draw_characters(n_characters: int, dim: int, seed: int,
                    yaw_range: float = np.pi) -> list[CharacterFactor]:
    """Characters with view angles stratified over ``[-yaw_range, yaw_range]``."""
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(n_characters)
    chars = []
    for c in range(n_characters):
        u = (order[c] + rng.uniform(0.1, 0.9)) / n_characters
        yaw = float(-yaw_range + 2 * yaw_range * u)
        scale = tuple(float(s) for s in rng.uniform(0.8, 1.25, len(LIMBS)))
        offset = tuple(float(o) for o in rng.uniform(-0.1, 0.1, dim))
        chars.append(CharacterFactor(yaw, scale, offset))
    return chars


# ---------------------------------------------------------------- dataset


@dataclass
class SkeletonDataset:
    frames: np.ndarray            # [N, T, V, C] float32, raw (not root-centred)
    motion_ids: np.ndarray        # [N]
    character_ids: np.ndarray     # [N]
    characters: list[CharacterFactor]
    params: dict
    frames3d: np.ndarray | None = None
    clusters: np.ndarray | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def dataset_id(self) -> str:
        return dataset_id(self.params)

    @property
    def n_motions(self) -> int:
        return int(self.params["n_motions"])

    @property
    def n_characters(self) -> int:
        return int(self.params["n_characters"])

    def index(self, motion_id: int, character_id: int) -> int:
        return int(motion_id) * self.n_characters + int(character_id)

    def sequence(self, i: int) -> SkeletonSequence:
        return SkeletonSequence(self.frames[i], int(self.motion_ids[i]), int(self.character_ids[i]))

    def centered(self) -> np.ndarray:
        return root_center(self.frames).astype(np.float32)

    def target(self, motion_id: int, character_id: int) -> np.ndarray:
        """Ground-truth cross-reconstruction target for (motion, character)."""
        return self.frames[self.index(motion_id, character_id)]


def dataset_id(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(n_motions: int = 8, n_characters: int = 12, T: int = 64, V: int = 13,
                     dim: int = 2, seed: int = 7, yaw_range_deg: float = 180.0) -> SkeletonDataset:
    """Render every motion of a fresh bank on every character.

    Sequence ``i`` holds motion ``i // n_characters`` on character
    ``i % n_characters``.
    """
    if n_motions < 2 or n_characters < 2:
        raise ValueError("need at least 2 motions and 2 characters")
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if V != len(JOINT_NAMES):
        raise ValueError(f"the synthetic skeleton has {len(JOINT_NAMES)} joints, got V={V}")
    if T < 8:
        raise ValueError(f"T must be at least 8, got {T}")
    bank = motion_bank(n_motions, T, seed)
    chars = draw_characters(n_characters, dim, seed, np.deg2rad(yaw_range_deg))
    frames, frames3d, mids, cids = [], [], [], []
    for m in bank:
        bones = m.bones(T)
        for c, factor in enumerate(chars):
            frames3d.append(apply_character(bones, factor, 3))
            frames.append(frames3d[-1][..., :dim])
            mids.append(m.motion_id)
            cids.append(c)
    frames = np.stack(frames).astype(np.float32)
    params = dict(n_motions=n_motions, n_characters=n_characters, T=T, V=V, dim=dim, seed=seed,
                  yaw_range_deg=yaw_range_deg)
    ds = SkeletonDataset(frames, np.array(mids), np.array(cids), chars, params,
                         frames3d=np.stack(frames3d).astype(np.float32))
    _check_distinct(ds)
    return ds


def _check_distinct(ds: SkeletonDataset) -> None:
    x = ds.frames.reshape(ds.n_motions, ds.n_characters, -1).astype(np.float64)
    for m in range(ds.n_motions):
        d = np.linalg.norm(x[m][:, None] - x[m][None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() <= 0:
            raise RuntimeError(f"two characters render motion {m} identically")
    for c in range(ds.n_characters):
        d = np.linalg.norm(x[:, c][:, None] - x[:, c][None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() <= 0:
            raise RuntimeError(f"two motions render identically on character {c}")


# ---------------------------------------------------------------- VIAS files


def encode_sequence(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames, dtype="<f4")
    t, v, c = frames.shape
    return _HEADER.pack(MAGIC, VERSION, t, v, c) + frames.tobytes(order="C")


def decode_sequence(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, got {len(blob)}")
    magic, version, t, v, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported VIAS version {version}")
    n = t * v * c * 4
    if t == 0 or v == 0 or c == 0 or n > MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"invalid dimensions T={t} V={v} C={c}")
    payload = blob[_HEADER.size:]
    if len(payload) != n:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header implies {n}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, v, c).astype(np.float32)


def write_sequence(path, seq) -> None:
    frames = seq.frames if isinstance(seq, SkeletonSequence) else seq
    _atomic_write(Path(path), encode_sequence(frames))


def read_sequence(path) -> SkeletonSequence:
    return SkeletonSequence(decode_sequence(Path(path).read_bytes()))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_dataset(ds: SkeletonDataset, out_dir) -> Path:
    """Write one VIAS file per sequence plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        name = f"seq_{i:05d}.vias"
        write_sequence(out / name, ds.frames[i])
        c = int(ds.character_ids[i])
        entry = dict(file=name, index=i, motion_id=int(ds.motion_ids[i]), character_id=c,
                     factor=asdict(ds.characters[c]))
        if ds.clusters is not None:
            entry["cluster"] = int(ds.clusters[i])
        entries.append(entry)
    manifest = dict(format="VIAS", version=VERSION, dataset_id=ds.dataset_id,
                    params=ds.params, joints=list(JOINT_NAMES), root_joint=ROOT,
                    sequences=entries)
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return path


def read_dataset(path) -> SkeletonDataset:
    """Load a dataset from a directory or its ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    entries = sorted(manifest["sequences"], key=lambda e: e["index"])
    frames = np.stack([read_sequence(path.parent / e["file"]).frames for e in entries])
    n_chars = manifest["params"]["n_characters"]
    chars: list[CharacterFactor | None] = [None] * n_chars
    for e in entries:
        f = e["factor"]
        chars[e["character_id"]] = CharacterFactor(f["view_angle"], tuple(f["body_scale"]),
                                                   tuple(f["root_offset"]))
    clusters = None
    if all("cluster" in e for e in entries):
        clusters = np.array([e["cluster"] for e in entries])
    return SkeletonDataset(frames, np.array([e["motion_id"] for e in entries]),
                           np.array([e["character_id"] for e in entries]), chars,
                           manifest["params"], clusters=clusters)
