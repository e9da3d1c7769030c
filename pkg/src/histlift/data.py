"""Synthetic articulated-motion generation and dataset serialization.

Clips are produced by driving a 17-joint skeleton with band-limited joint
angle trajectories, running forward kinematics to millimeter world space,
projecting through a pinhole camera, and adding Gaussian pixel noise with
matching confidence scores. Files use the little-endian "HPD1" format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, ConfigError, NumericError, TruncatedError, VersionError
from .rng import derive_rng

JOINT_NAMES = (
    "pelvis", "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "spine", "thorax", "neck", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
)

ACTIONS = ("walk", "run", "sit", "wave", "squat", "stretch", "turn", "jump")

# per-action modifiers: angle amplitude, frequency, root translation amplitude (mm)
_ACTION_STYLE = {
    "walk": (1.0, 1.0, 200.0),
    "run": (1.3, 1.6, 320.0),
    "sit": (0.5, 0.4, 60.0),
    "wave": (0.8, 1.2, 80.0),
    "squat": (0.9, 0.6, 120.0),
    "stretch": (0.7, 0.5, 100.0),
    "turn": (0.6, 0.8, 150.0),
    "jump": (1.1, 1.4, 260.0),
}

FPS = 50.0
MAX_FREQ_HZ = 2.0


@dataclass
class Skeleton:
    parents: np.ndarray        # (J,) parent index, -1 at the root
    rest_dirs: np.ndarray      # (J, 3) unit bone direction from parent
    bone_lengths: np.ndarray   # (J,) mm, 0 at the root
    flip_pairs: tuple          # ((left, right), ...)
    root: int = 0

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def validate(self) -> None:
        joints = self.joint_count
        roots = [j for j in range(joints) if self.parents[j] < 0]
        if roots != [self.root]:
            raise ConfigError(f"skeleton must have exactly the root {self.root}, got {roots}")
        for j in range(joints):
            seen, node = 0, j
            while self.parents[node] >= 0:
                node = self.parents[node]
                seen += 1
                if seen > joints:
                    raise ConfigError(f"cycle in skeleton parents at joint {j}")
        used = [j for pair in self.flip_pairs for j in pair]
        if len(used) != len(set(used)):
            raise ConfigError("joint appears in more than one flip pair")
        for left, right in self.flip_pairs:
            if not (0 <= left < joints and 0 <= right < joints):
                raise ConfigError(f"flip pair ({left}, {right}) out of range")

    @classmethod
    def default_human(cls) -> "Skeleton":
        parents = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15])
        dirs = np.zeros((17, 3))
        lengths = np.zeros(17)
        right, left, up = np.array([-1.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
        down = -up
        spec = {
            1: (right, 130.0), 2: (down, 450.0), 3: (down, 440.0),
            4: (left, 130.0), 5: (down, 450.0), 6: (down, 440.0),
            7: (up, 230.0), 8: (up, 250.0), 9: (up, 120.0), 10: (up, 120.0),
            11: (left, 150.0), 12: (left, 280.0), 13: (left, 250.0),
            14: (right, 150.0), 15: (right, 280.0), 16: (right, 250.0),
        }
        for j, (direction, length) in spec.items():
            dirs[j] = direction
            lengths[j] = length
        skel = cls(parents=parents, rest_dirs=dirs, bone_lengths=lengths,
                   flip_pairs=((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)))
        skel.validate()
        return skel


@dataclass
class CameraModel:
    focal_px: float
    principal: tuple        # (cx, cy) px
    rotation: np.ndarray    # (3, 3) world -> camera
    translation: np.ndarray  # (3,) so X_c = R X_w + t
    image_size: tuple = (1000, 1000)

    @classmethod
    def default(cls) -> "CameraModel":
        center = np.array([0.0, 1000.0, 4200.0])  # camera position, mm
        target = np.array([0.0, 900.0, 0.0])
        forward = target - center
        forward = forward / np.linalg.norm(forward)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, world_up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(focal_px=1100.0, principal=(500.0, 500.0), rotation=rotation,
                   translation=-rotation @ center)

    def camera_coords(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def normalize(self, px) -> np.ndarray:
        width = self.image_size[0]
        center = np.array([self.image_size[0] / 2.0, self.image_size[1] / 2.0])
        return (np.asarray(px) - center) / (width / 2.0)


def project(points, camera: CameraModel) -> np.ndarray:
    """Pinhole projection of (.., 3) mm world points to (.., 2) pixels."""
    cam = camera.camera_coords(points)
    z = cam[..., 2]
    if np.any(z <= 0):
        raise NumericError("point behind camera")
    u = camera.focal_px * cam[..., 0] / z + camera.principal[0]
    v = camera.focal_px * cam[..., 1] / z + camera.principal[1]
    return np.stack([u, v], axis=-1)


def _euler_to_matrix(angles) -> np.ndarray:
    """(.., 3) xyz angles -> (.., 3, 3) rotation, R = Rz Ry Rx."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa = np.cos(ax), np.sin(ax)
    cb, sb = np.cos(ay), np.sin(ay)
    cc, sc = np.cos(az), np.sin(az)
    row0 = np.stack([cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa], axis=-1)
    row1 = np.stack([sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa], axis=-1)
    row2 = np.stack([-sb, cb * sa, cb * ca], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def forward_kinematics(skeleton: Skeleton, local_rots, root_positions) -> np.ndarray:
    """(T, J, 3, 3) local rotations + (T, 3) root path -> (T, J, 3) mm."""
    frames = local_rots.shape[0]
    joints = skeleton.joint_count
    acc = np.zeros((frames, joints, 3, 3))
    pos = np.zeros((frames, joints, 3))
    acc[:, skeleton.root] = local_rots[:, skeleton.root]
    pos[:, skeleton.root] = root_positions
    for j in range(joints):
        parent = skeleton.parents[j]
        if parent < 0:
            continue
        offset = skeleton.rest_dirs[j] * skeleton.bone_lengths[j]
        pos[:, j] = pos[:, parent] + np.einsum("tab,b->ta", acc[:, parent], offset)
        acc[:, j] = np.einsum("tab,tbc->tac", acc[:, parent], local_rots[:, j])
    return pos


# amplitude budget (radians) by joint, matching rough human ranges
_ANGLE_LIMITS = np.array([
    0.0,                     # pelvis articulation lives in the root transform
    0.5, 0.9, 0.4,           # right leg
    0.5, 0.9, 0.4,           # left leg
    0.15, 0.15, 0.15, 0.15,  # spine, thorax, neck, head
    0.5, 0.9, 0.4,           # left arm
    0.5, 0.9, 0.4,           # right arm
])


def _band_limited_angles(rng, frames, amplitude, freq_scale):
    """Sum of three sinusoids per angle, frequencies capped at 2 Hz."""
    t = np.arange(frames) / FPS
    angles = np.zeros((frames, 3))
    for axis in range(3):
        freqs = rng.uniform(0.2, MAX_FREQ_HZ, size=3) * freq_scale
        freqs = np.minimum(freqs, MAX_FREQ_HZ)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        weights = rng.uniform(0.2, 1.0, size=3)
        weights = weights / weights.sum() * amplitude * rng.uniform(0.4, 1.0)
        for f, p, w in zip(freqs, phases, weights):
            angles[:, axis] += w * np.sin(2.0 * np.pi * f * t + p)
    return angles


@dataclass
class MotionClip:
    gt3d: np.ndarray    # (T, J, 3) mm world space
    pose2d: np.ndarray  # (T, J, 3) normalized x, y + confidence
    action: str


def gen_clip(skeleton: Skeleton, camera: CameraModel, frames: int, seed: int,
             sigma_px: float = 2.0, action: str | None = None) -> MotionClip:
    """Deterministic synthetic clip; same seed reproduces identical bytes."""
    if frames < 2:
        raise ConfigError(f"clips need at least 2 frames, got {frames}")
    rng = derive_rng(seed, "clip")
    if action is None:
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
    if action not in _ACTION_STYLE:
        raise ConfigError(f"unknown action {action!r}")
    amp_scale, freq_scale, trans_amp = _ACTION_STYLE[action]
    joints = skeleton.joint_count

    for attempt in range(10):
        local = np.zeros((frames, joints, 3, 3))
        for j in range(joints):
            limit = _ANGLE_LIMITS[j] * amp_scale if j < len(_ANGLE_LIMITS) else 0.3
            angles = _band_limited_angles(rng, frames, limit, freq_scale)
            local[:, j] = _euler_to_matrix(angles)

        yaw = rng.uniform(0.0, 2.0 * np.pi)
        sway = _band_limited_angles(rng, frames, 0.25 * amp_scale, freq_scale)
        sway[:, 1] += yaw
        local[:, skeleton.root] = _euler_to_matrix(sway)

        base = np.array([0.0, 900.0, 0.0])
        drift = _band_limited_angles(rng, frames, 1.0, freq_scale) * trans_amp
        drift[:, 1] *= 0.2  # mostly in-plane motion
        root_path = base + drift

        gt3d = forward_kinematics(skeleton, local, root_path)
        cam_z = camera.camera_coords(gt3d)[..., 2]
        if np.all(cam_z > 1.0):
            break
    else:
        raise NumericError("could not place all joints in front of the camera in 10 attempts")

    clean_px = project(gt3d, camera)
    noise = rng.normal(0.0, sigma_px, size=clean_px.shape) if sigma_px > 0 else np.zeros_like(clean_px)
    noisy_px = clean_px + noise
    normalized = camera.normalize(noisy_px)
    if sigma_px > 0:
        kappa = 1.0 / (4.0 * sigma_px)
        confidence = np.clip(1.0 - kappa * np.linalg.norm(noise, axis=-1), 0.0, 1.0)
    else:
        confidence = np.ones(clean_px.shape[:-1])
    pose2d = np.concatenate([normalized, confidence[..., None]], axis=-1)
    return MotionClip(gt3d=gt3d, pose2d=pose2d, action=action)


def gen_dataset(skeleton: Skeleton, camera: CameraModel, clip_count: int, frames: int,
                master_seed: int, sigma_px: float = 2.0) -> list:
    """Clips with independent per-(seed, index) streams and balanced actions."""
    clips = []
    for index in range(clip_count):
        clip_seed = int(np.random.SeedSequence([master_seed & 0xFFFFFFFF, index]).generate_state(1)[0])
        action = ACTIONS[index % len(ACTIONS)]
        clips.append(gen_clip(skeleton, camera, frames, clip_seed, sigma_px, action))
    return clips


# -- flipping ----------------------------------------------------------------------


def flip(seq, pairs) -> np.ndarray:
    """Mirror a (T, J, 3) sequence about x=0, swapping left/right joints.

    Works for 3D poses (x negated) and 2D+confidence poses (x negated,
    confidence follows its joint). An involution: flip(flip(x)) == x.
    """
    arr = np.asarray(seq)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ConfigError(f"flip expects (T, J, 3), got {arr.shape}")
    joints = arr.shape[1]
    used = [j for pair in pairs for j in pair]
    if len(used) != len(set(used)) or any(not 0 <= j < joints for j in used):
        raise ConfigError("flip pairs must be disjoint and in range")
    out = arr.copy()
    out[..., 0] = -out[..., 0]
    for left, right in pairs:
        out[:, [left, right]] = out[:, [right, left]]
    return out


def bone_lengths_of(p3d, skeleton: Skeleton) -> np.ndarray:
    """Measured bone lengths per frame, (T, J); root column is zero."""
    p3d = np.asarray(p3d)
    out = np.zeros(p3d.shape[:-1])
    for j in range(skeleton.joint_count):
        parent = skeleton.parents[j]
        if parent >= 0:
            out[:, j] = np.linalg.norm(p3d[:, j] - p3d[:, parent], axis=-1)
    return out


# -- HPD1 dataset format ---------------------------------------------------------------

_HPD1_MAGIC = b"HPD1"
_HPD1_VERSION = 1


def write_dataset(clips, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HPD1_MAGIC)
        fh.write(struct.pack("<II", _HPD1_VERSION, len(clips)))
        for clip in clips:
            frames, joints = clip.gt3d.shape[:2]
            label = clip.action.encode("utf-8")
            fh.write(struct.pack("<III", frames, joints, len(label)))
            fh.write(label)
            fh.write(clip.gt3d.astype("<f4").tobytes())
            fh.write(clip.pose2d.astype("<f4").tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) < count:
        raise TruncatedError(f"HPD1: file ended inside {what}")
    return data


def read_dataset(path) -> list:
    clips = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _HPD1_MAGIC:
            raise BadMagicError(f"HPD1: bad magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _HPD1_VERSION:
            raise VersionError(f"HPD1: unsupported version {version}")
        for _ in range(count):
            frames, joints, label_len = struct.unpack("<III", _read_exact(fh, 12, "clip header"))
            action = _read_exact(fh, label_len, "label").decode("utf-8")
            size = frames * joints * 3 * 4
            gt3d = np.frombuffer(_read_exact(fh, size, "gt3d payload"), dtype="<f4")
            pose2d = np.frombuffer(_read_exact(fh, size, "pose2d payload"), dtype="<f4")
            clips.append(MotionClip(
                gt3d=gt3d.reshape(frames, joints, 3).astype(np.float64),
                pose2d=pose2d.reshape(frames, joints, 3).astype(np.float64),
                action=action,
            ))
    return clips


def dataset_file_size(clips) -> int:
    """Exact on-disk size of write_dataset output."""
    total = 4 + 8
    for clip in clips:
        frames, joints = clip.gt3d.shape[:2]
        total += 12 + len(clip.action.encode("utf-8")) + 2 * frames * joints * 3 * 4
    return total


def root_relative(gt3d, skeleton: Skeleton) -> np.ndarray:
    """Subtract the root joint per frame; training/eval target space."""
    arr = np.asarray(gt3d)
    return arr - arr[:, skeleton.root:skeleton.root + 1, :]
