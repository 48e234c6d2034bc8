"""Articulated capsule humanoid with per-vertex part labels and COCO-17 keypoints.

The template has fixed topology: every call to make_humanoid yields the same
vertex count, face list, and part labeling, so meshes from different calls are
in one-to-one vertex correspondence (required for mean per-vertex error).

Canonical pose: feet on z=0, facing +x, left side toward +y. Zero joint
angles give a T-pose (arms horizontal along +/-y).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum

import numpy as np

from .geometry import Pose, rot_x, rot_y


class PartLabel(IntEnum):
    head = 0
    torso = 1
    left_upper_arm = 2
    left_lower_arm = 3
    left_hand = 4
    right_upper_arm = 5
    right_lower_arm = 6
    right_hand = 7
    left_upper_leg = 8
    left_lower_leg = 9
    left_foot = 10
    right_upper_leg = 11
    right_lower_leg = 12
    right_foot = 13


ALL_PARTS = frozenset(PartLabel)

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Parts whose own surface never occludes a keypoint (the keypoint sits at or
# under that surface); used by the keypoint-visibility oracle.
KEYPOINT_LOCAL_PARTS: dict[str, frozenset[PartLabel]] = {
    "nose": frozenset({PartLabel.head}),
    "left_eye": frozenset({PartLabel.head}),
    "right_eye": frozenset({PartLabel.head}),
    "left_ear": frozenset({PartLabel.head}),
    "right_ear": frozenset({PartLabel.head}),
    "left_shoulder": frozenset({PartLabel.torso, PartLabel.left_upper_arm}),
    "right_shoulder": frozenset({PartLabel.torso, PartLabel.right_upper_arm}),
    "left_elbow": frozenset({PartLabel.left_upper_arm, PartLabel.left_lower_arm}),
    "right_elbow": frozenset({PartLabel.right_upper_arm, PartLabel.right_lower_arm}),
    "left_wrist": frozenset({PartLabel.left_lower_arm, PartLabel.left_hand}),
    "right_wrist": frozenset({PartLabel.right_lower_arm, PartLabel.right_hand}),
    "left_hip": frozenset({PartLabel.torso, PartLabel.left_upper_leg}),
    "right_hip": frozenset({PartLabel.torso, PartLabel.right_upper_leg}),
    "left_knee": frozenset({PartLabel.left_upper_leg, PartLabel.left_lower_leg}),
    "right_knee": frozenset({PartLabel.right_upper_leg, PartLabel.right_lower_leg}),
    "left_ankle": frozenset({PartLabel.left_lower_leg, PartLabel.left_foot}),
    "right_ankle": frozenset({PartLabel.right_lower_leg, PartLabel.right_foot}),
}


@dataclass(frozen=True)
class JointAngles:
    """Limb swing angles in radians, anatomically signed per side.

    Shoulders/elbows swing in the coronal plane (positive lowers the arm /
    bends it further); hips swing forward (positive), knees bend backward
    (positive). Equal left/right values give a sagittally mirrored body.
    """

    left_shoulder: float = 0.0
    right_shoulder: float = 0.0
    left_elbow: float = 0.0
    right_elbow: float = 0.0
    left_hip: float = 0.0
    right_hip: float = 0.0
    left_knee: float = 0.0
    right_knee: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def validate(self) -> None:
        for f in fields(self):
            a = float(getattr(self, f.name))
            if abs(a) > np.pi / 2 + 1e-12:
                raise ValueError(f"joint angle {f.name}={a:.3f} outside +/-pi/2")


@dataclass
class LabeledMesh:
    """Triangle mesh with per-vertex part labels and rigidly attached keypoints."""

    vertices: np.ndarray          # (N, 3)
    faces: np.ndarray             # (F, 3) int
    part_of: np.ndarray           # (N,) PartLabel values
    keypoints: np.ndarray         # (17, 3), ordered as KEYPOINT_NAMES

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.part_of = np.asarray(self.part_of, dtype=np.int64).reshape(-1)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(17, 3)
        if len(self.part_of) != len(self.vertices):
            raise ValueError("part_of length mismatch")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def vertex_indices_of(self, parts) -> np.ndarray:
        part_vals = np.array(sorted(int(p) for p in parts), dtype=np.int64)
        if part_vals.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(np.isin(self.part_of, part_vals))

    def transformed(self, pose: Pose) -> "LabeledMesh":
        return LabeledMesh(pose.apply(self.vertices), self.faces,
                           self.part_of, pose.apply(self.keypoints))

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


# ---------------------------------------------------------------------------
# template proportions, as fractions of standing height

_TORSO = dict(a=(0.0, 0.0, 0.50), b=(0.0, 0.0, 0.85), r=0.100)
_HEAD = dict(a=(0.0, 0.0, 0.875), b=(0.0, 0.0, 0.930), r=0.065)
_SHOULDER_Y, _SHOULDER_Z = 0.115, 0.82
_UA_LEN, _LA_LEN, _HAND_LEN = 0.17, 0.15, 0.075
_R_UA, _R_LA, _R_HAND = 0.042, 0.035, 0.033
_HIP_Y, _HIP_Z = 0.065, 0.50
_UL_LEN, _LL_LEN = 0.215, 0.24
_R_UL, _R_LL, _R_FOOT = 0.062, 0.045, 0.032
_FOOT_A, _FOOT_B = (-0.01, 0.0, -0.010), (0.10, 0.0, -0.010)

_N_SEG = 14
_CAP_RINGS = 3       # rings per hemispherical cap, including the equator ring
_CYL_RINGS = 2       # interior cylinder rings


def _capsule(a, b, r):
    """Tessellate a capsule from a to b; vertices lie on the exact surface."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = b - a
    length = np.linalg.norm(w)
    w = w / length if length > 1e-12 else np.array([0.0, 0.0, 1.0])
    ref = np.array([1.0, 0.0, 0.0])
    if abs(w @ ref) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ w) * w
    u = u / np.linalg.norm(u)
    v = np.cross(w, u)

    phis = 2 * np.pi * np.arange(_N_SEG) / _N_SEG
    circle = np.outer(np.cos(phis), u) + np.outer(np.sin(phis), v)   # (S, 3)

    rings = []
    cap_thetas = np.linspace(-np.pi / 2, 0.0, _CAP_RINGS + 1)[1:]    # skip pole
    for th in cap_thetas:
        rings.append(a + r * np.sin(th) * w + (r * np.cos(th)) * circle)
    for s in np.linspace(0.0, 1.0, _CYL_RINGS + 2)[1:-1]:
        rings.append(a + s * length * w + r * circle)
    for th in np.linspace(0.0, np.pi / 2, _CAP_RINGS + 1)[:-1]:
        rings.append(b + r * np.sin(th) * w + (r * np.cos(th)) * circle)

    n_rings = len(rings)
    verts = np.vstack([a - r * w] + rings + [b + r * w])
    bot, top = 0, len(verts) - 1
    ring0 = 1

    faces = []
    for s in range(_N_SEG):
        s2 = (s + 1) % _N_SEG
        faces.append((bot, ring0 + s2, ring0 + s))
    for k in range(n_rings - 1):
        r0, r1 = ring0 + k * _N_SEG, ring0 + (k + 1) * _N_SEG
        for s in range(_N_SEG):
            s2 = (s + 1) % _N_SEG
            faces.append((r0 + s, r0 + s2, r1 + s))
            faces.append((r0 + s2, r1 + s2, r1 + s))
    rl = ring0 + (n_rings - 1) * _N_SEG
    for s in range(_N_SEG):
        s2 = (s + 1) % _N_SEG
        faces.append((top, rl + s, rl + s2))
    return verts, np.array(faces, dtype=np.int64)


def _mirror_y(pts: np.ndarray) -> np.ndarray:
    out = pts.copy()
    out[..., 1] = -out[..., 1]
    return out


def _pose_skeleton(angles: JointAngles) -> dict[str, np.ndarray]:
    """Joint positions (unit height, left side only; right is mirrored)."""
    sh = np.array([0.0, _SHOULDER_Y, _SHOULDER_Z])
    d1 = rot_x(-angles.left_shoulder) @ np.array([0.0, 1.0, 0.0])
    d2 = rot_x(-(angles.left_shoulder + angles.left_elbow)) @ np.array([0.0, 1.0, 0.0])
    elbow = sh + _UA_LEN * d1
    wrist = elbow + _LA_LEN * d2
    hand_tip = wrist + _HAND_LEN * d2

    hip = np.array([0.0, _HIP_Y, _HIP_Z])
    dl1 = rot_y(-angles.left_hip) @ np.array([0.0, 0.0, -1.0])
    R_ll = rot_y(-(angles.left_hip - angles.left_knee))
    dl2 = R_ll @ np.array([0.0, 0.0, -1.0])
    knee = hip + _UL_LEN * dl1
    ankle = knee + _LL_LEN * dl2
    foot_a = ankle + R_ll @ np.asarray(_FOOT_A)
    foot_b = ankle + R_ll @ np.asarray(_FOOT_B)
    return dict(shoulder=sh, elbow=elbow, wrist=wrist, hand_tip=hand_tip,
                hip=hip, knee=knee, ankle=ankle, foot_a=foot_a, foot_b=foot_b)


def _right_angles(angles: JointAngles) -> JointAngles:
    return JointAngles(left_shoulder=angles.right_shoulder,
                       left_elbow=angles.right_elbow,
                       left_hip=angles.right_hip,
                       left_knee=angles.right_knee)


def make_humanoid(joint_angles: JointAngles | None = None,
                  scale: float = 1.7) -> LabeledMesh:
    """Build the posed humanoid; deterministic and topology-stable.

    scale is the standing height in meters (1.4 to 2.0); joint angles are
    limited to +/-pi/2. Mirrored (equal per-side) angles produce a mesh
    symmetric across the sagittal plane.
    """
    angles = joint_angles or JointAngles()
    angles.validate()
    if not (1.4 <= scale <= 2.0):
        raise ValueError(f"scale {scale} outside [1.4, 2.0] m")

    left = _pose_skeleton(angles)
    vleft = _pose_skeleton(_right_angles(angles))   # virtual left posed with right angles

    segs: list[tuple[PartLabel, np.ndarray, np.ndarray, float, bool]] = [
        (PartLabel.head, np.asarray(_HEAD["a"]), np.asarray(_HEAD["b"]), _HEAD["r"], False),
        (PartLabel.torso, np.asarray(_TORSO["a"]), np.asarray(_TORSO["b"]), _TORSO["r"], False),
        (PartLabel.left_upper_arm, left["shoulder"], left["elbow"], _R_UA, False),
        (PartLabel.left_lower_arm, left["elbow"], left["wrist"], _R_LA, False),
        (PartLabel.left_hand, left["wrist"], left["hand_tip"], _R_HAND, False),
        (PartLabel.right_upper_arm, vleft["shoulder"], vleft["elbow"], _R_UA, True),
        (PartLabel.right_lower_arm, vleft["elbow"], vleft["wrist"], _R_LA, True),
        (PartLabel.right_hand, vleft["wrist"], vleft["hand_tip"], _R_HAND, True),
        (PartLabel.left_upper_leg, left["hip"], left["knee"], _R_UL, False),
        (PartLabel.left_lower_leg, left["knee"], left["ankle"], _R_LL, False),
        (PartLabel.left_foot, left["foot_a"], left["foot_b"], _R_FOOT, False),
        (PartLabel.right_upper_leg, vleft["hip"], vleft["knee"], _R_UL, True),
        (PartLabel.right_lower_leg, vleft["knee"], vleft["ankle"], _R_LL, True),
        (PartLabel.right_foot, vleft["foot_a"], vleft["foot_b"], _R_FOOT, True),
    ]

    all_verts, all_faces, all_parts = [], [], []
    offset = 0
    for part, a, b, r, mirrored in segs:
        verts, faces = _capsule(a, b, r)
        if mirrored:
            verts = _mirror_y(verts)
            faces = faces[:, ::-1]
        all_verts.append(verts)
        all_faces.append(faces + offset)
        all_parts.append(np.full(len(verts), int(part), dtype=np.int64))
        offset += len(verts)

    vertices = np.vstack(all_verts) * scale
    faces = np.vstack(all_faces)
    part_of = np.concatenate(all_parts)

    rl, rr = left, vleft
    head_kp = {
        "nose": (0.062, 0.0, 0.930),
        "left_eye": (0.055, 0.025, 0.945), "right_eye": (0.055, -0.025, 0.945),
        "left_ear": (0.0, 0.065, 0.935), "right_ear": (0.0, -0.065, 0.935),
    }
    kp = dict(head_kp)
    kp["left_shoulder"], kp["right_shoulder"] = rl["shoulder"], _mirror_y(rr["shoulder"])
    kp["left_elbow"], kp["right_elbow"] = rl["elbow"], _mirror_y(rr["elbow"])
    kp["left_wrist"], kp["right_wrist"] = rl["wrist"], _mirror_y(rr["wrist"])
    kp["left_hip"], kp["right_hip"] = rl["hip"], _mirror_y(rr["hip"])
    kp["left_knee"], kp["right_knee"] = rl["knee"], _mirror_y(rr["knee"])
    kp["left_ankle"], kp["right_ankle"] = rl["ankle"], _mirror_y(rr["ankle"])
    keypoints = np.array([kp[name] for name in KEYPOINT_NAMES], dtype=np.float64) * scale

    # ground: rest the lowest vertex on z=0 (bent legs would otherwise float)
    dz = vertices[:, 2].min()
    vertices[:, 2] -= dz
    keypoints[:, 2] -= dz
    return LabeledMesh(vertices, faces, part_of, keypoints)
