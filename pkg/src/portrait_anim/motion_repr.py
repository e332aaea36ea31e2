"""Motion representation math: head rig, keypoint algebra and hand control images.

Coordinates are canonical (dimensionless, roughly the ``[-1, 1]^3`` cube, y up,
larger z closer to the camera). Mapping to pixels always goes through an
explicit :class:`Camera`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidParamsError, InvalidRigError, ShapeMismatchError

REGIONS = ("eyes", "mouth", "eyebrows", "contour")
HEAD_KINDS = ("head_explicit", "body_implicit", "fused")

N_HEAD = 68
N_EXPR = 16
N_BODY = 20
N_JOINTS = 15

# head keypoint index layout
CONTOUR = np.arange(0, 26)
BROW_L, BROW_R = np.arange(26, 31), np.arange(31, 36)
EYE_L, EYE_R = np.arange(36, 42), np.arange(42, 48)
MOUTH_OUTER = np.arange(48, 60)
MOUTH_INNER = np.arange(60, 68)

# expression channels with fixed semantics; 8..15 are procedural
JAW_OPEN, MOUTH_WIDE, LIP_ROUND, SMILE, BROW_RAISE, BROW_FROWN, EYE_WIDE, BLINK = range(8)
MOUTH_CHANNELS = (JAW_OPEN, MOUTH_WIDE, LIP_ROUND)
STYLE_CHANNELS = (SMILE, BROW_RAISE, BROW_FROWN, EYE_WIDE)

HEAD_CENTER = np.array([0.0, 0.6, 0.0])
JAW_DROP = 0.10
INNER_GAP = 0.01

# body keypoint layout (index: name)
BODY_NAMES = (
    "neck_top", "neck_base", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
    "wrist_l", "wrist_r", "hip_l", "hip_r", "chest", "belly", "side_upper_l",
    "side_upper_r", "side_lower_l", "side_lower_r", "upper_arm_l", "upper_arm_r",
    "forearm_l", "forearm_r",
)
WRIST_L, WRIST_R = 6, 7


def euler_to_matrix(rot):
    """Rotation matrix for Euler angles applied X first, then Y, then Z."""
    rx, ry, rz = (float(a) for a in rot)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def euler_to_matrix_batch(rot):
    rot = np.asarray(rot, dtype=np.float64)
    cx, sx = np.cos(rot[..., 0]), np.sin(rot[..., 0])
    cy, sy = np.cos(rot[..., 1]), np.sin(rot[..., 1])
    cz, sz = np.cos(rot[..., 2]), np.sin(rot[..., 2])
    one, zero = np.ones_like(cx), np.zeros_like(cx)
    mx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(rot.shape[:-1] + (3, 3))
    my = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(rot.shape[:-1] + (3, 3))
    mz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(rot.shape[:-1] + (3, 3))
    return mz @ my @ mx


def _frozen(arr, dtype=np.float64):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Orthographic camera: ``u = scale_x * x + offset_x``, ``v = scale_y * y + offset_y``."""

    scale_x: float
    scale_y: float
    offset_x: float
    offset_y: float

    def project(self, points):
        pts = np.asarray(points, dtype=np.float64)
        u = self.scale_x * pts[..., 0] + self.offset_x
        v = self.scale_y * pts[..., 1] + self.offset_y
        return np.stack([u, v], axis=-1)

    def unproject(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] - self.offset_x) / self.scale_x,
                         (uv[..., 1] - self.offset_y) / self.scale_y], axis=-1)

    @property
    def pixel_scale(self):
        return math.sqrt(abs(self.scale_x * self.scale_y))

    def to_normalized(self, points, width, height):
        """Canonical points -> grid_sample coordinates ``(x, y, z)`` in [-1, 1]."""
        pts = np.asarray(points, dtype=np.float64)
        uv = self.project(pts)
        return np.stack([2.0 * uv[..., 0] / width - 1.0,
                         2.0 * uv[..., 1] / height - 1.0,
                         pts[..., 2]], axis=-1)

    def normalized_affine(self, width, height):
        """(scale, offset) 3-vectors so that ``normalized = scale * canonical + offset``."""
        scale = np.array([2.0 * self.scale_x / width, 2.0 * self.scale_y / height, 1.0])
        offset = np.array([2.0 * self.offset_x / width - 1.0, 2.0 * self.offset_y / height - 1.0, 0.0])
        return scale, offset

    def as_tuple(self):
        return (self.scale_x, self.scale_y, self.offset_x, self.offset_y)


def body_camera(width=128, height=192):
    return Camera(width / 2.0, -width / 2.0, width / 2.0, 0.375 * height)


def head_camera(size=128):
    s = 1.25 * size
    return Camera(s, -s, size / 2.0, size / 2.0 + s * HEAD_CENTER[1])


def hand_camera(center, size=64, extent=0.5):
    """Camera framing a square of side ``extent`` canonical units around ``center``."""
    s = size / extent
    return Camera(s, -s, size / 2.0 - s * center[0], size / 2.0 + s * center[1])


# --------------------------------------------------------------------------
# head
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FaceCoeffs:
    expr: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "expr", _frozen(self.expr))
        object.__setattr__(self, "pose", _frozen(self.pose))
        if self.expr.ndim != 1 or self.pose.shape != (6,):
            raise ShapeMismatchError(f"bad FaceCoeffs shapes {self.expr.shape}, {self.pose.shape}")

    def validate(self):
        if not (np.all(np.isfinite(self.expr)) and np.all(np.isfinite(self.pose))):
            raise InvalidParamsError("non-finite face coefficients")
        if np.any(self.expr < 0) or np.any(self.expr > 1):
            raise InvalidParamsError("expression weights outside [0, 1]")
        if np.any(np.abs(self.pose[:3]) > math.pi):
            raise InvalidParamsError("rotation component beyond pi")
        return self

    @classmethod
    def neutral(cls, n_expr=N_EXPR):
        return cls(np.zeros(n_expr), np.zeros(6))

    def to_vector(self):
        return np.concatenate([self.expr, self.pose])

    @classmethod
    def from_vector(cls, vec, n_expr=N_EXPR):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:n_expr], vec[n_expr:n_expr + 6])


@dataclass(frozen=True)
class HeadRig:
    mean_keypoints: np.ndarray
    basis: np.ndarray
    region_labels: tuple
    pivot: np.ndarray = field(default_factory=lambda: HEAD_CENTER.copy())

    def __post_init__(self):
        object.__setattr__(self, "mean_keypoints", _frozen(self.mean_keypoints))
        object.__setattr__(self, "basis", _frozen(self.basis))
        object.__setattr__(self, "pivot", _frozen(self.pivot))
        object.__setattr__(self, "region_labels", tuple(self.region_labels))
        n = self.mean_keypoints.shape[0]
        if self.mean_keypoints.shape != (n, 3) or self.basis.ndim != 3 or self.basis.shape[1:] != (n, 3):
            raise InvalidRigError("rig mean/basis shapes disagree")
        if len(self.region_labels) != n:
            raise InvalidRigError("one region label per keypoint required")
        if not np.all(np.isfinite(self.basis)):
            raise InvalidRigError("non-finite blendshape basis")
        if np.any(np.abs(self.mean_keypoints) > 1.0):
            raise InvalidRigError("mean keypoints leave the canonical cube")
        missing = set(REGIONS) - set(self.region_labels)
        if missing:
            raise InvalidRigError(f"missing region labels {sorted(missing)}")

    @property
    def n_points(self):
        return self.mean_keypoints.shape[0]

    @property
    def n_expr(self):
        return self.basis.shape[0]


def _ellipse_pts(n, rx, ry, start=0.0):
    ang = start + 2 * np.pi * np.arange(n) / n
    return np.stack([rx * np.cos(ang), ry * np.sin(ang)], -1), ang


def build_head_rig(seed=0, n_expr=N_EXPR):
    """Procedural linear blendshape rig with 68 points.

    The first eight bases have fixed meaning (see the channel constants);
    the remainder are seeded smooth displacement fields, one region each.
    """
    if n_expr < 8:
        raise InvalidRigError("rig needs at least the 8 semantic blendshapes")
    local = np.zeros((N_HEAD, 3))
    labels = [""] * N_HEAD

    ang = 2 * np.pi * np.arange(26) / 26
    local[CONTOUR] = np.stack([0.26 * np.sin(ang), -0.32 * np.cos(ang), np.zeros(26)], -1)
    for i in CONTOUR:
        labels[i] = "contour"

    bx = np.linspace(-0.18, -0.05, 5)
    by = 0.12 + 0.02 * np.sin(np.pi * np.arange(5) / 4)
    local[BROW_L] = np.stack([bx, by, np.full(5, 0.2)], -1)
    local[BROW_R] = np.stack([-bx, by, np.full(5, 0.2)], -1)
    for i in np.concatenate([BROW_L, BROW_R]):
        labels[i] = "eyebrows"

    eye = np.array([[-0.165, 0.05], [-0.13, 0.072], [-0.09, 0.072],
                    [-0.055, 0.05], [-0.09, 0.028], [-0.13, 0.028]])
    local[EYE_L, :2] = eye
    local[EYE_R, :2] = eye * np.array([-1.0, 1.0])
    local[EYE_L, 2] = 0.2
    local[EYE_R, 2] = 0.2
    for i in np.concatenate([EYE_L, EYE_R]):
        labels[i] = "eyes"

    outer, outer_ang = _ellipse_pts(12, 0.10, 0.04)
    inner, inner_ang = _ellipse_pts(8, 0.07, INNER_GAP / 2)
    local[MOUTH_OUTER, :2] = outer + np.array([0.0, -0.14])
    local[MOUTH_INNER, :2] = inner + np.array([0.0, -0.14])
    local[MOUTH_OUTER, 2] = 0.22
    local[MOUTH_INNER, 2] = 0.22
    for i in np.concatenate([MOUTH_OUTER, MOUTH_INNER]):
        labels[i] = "mouth"

    basis = np.zeros((n_expr, N_HEAD, 3))
    # jaw open: lower lips and chin drop
    basis[JAW_OPEN, MOUTH_INNER, 1] = -JAW_DROP * np.clip(-np.sin(inner_ang), 0, None)
    basis[JAW_OPEN, MOUTH_OUTER, 1] = -0.09 * np.clip(-np.sin(outer_ang), 0, None)
    chin = np.clip(-np.cos(ang) - 0.5, 0, None) / 0.5
    basis[JAW_OPEN, CONTOUR, 1] = -0.06 * chin
    # wide: horizontal stretch of the mouth
    basis[MOUTH_WIDE, MOUTH_OUTER, 0] = 0.03 * np.cos(outer_ang)
    basis[MOUTH_WIDE, MOUTH_INNER, 0] = 0.03 * np.cos(inner_ang)
    # round: pucker towards the center and forward
    basis[LIP_ROUND, MOUTH_OUTER, 0] = -0.3 * outer[:, 0]
    basis[LIP_ROUND, MOUTH_INNER, 0] = -0.3 * inner[:, 0]
    basis[LIP_ROUND, MOUTH_OUTER, 2] = 0.02
    basis[LIP_ROUND, MOUTH_INNER, 2] = 0.02
    # smile: corners up and out
    cos_o, cos_i = np.cos(outer_ang), np.cos(inner_ang)
    basis[SMILE, MOUTH_OUTER, 1] = 0.025 * cos_o ** 2
    basis[SMILE, MOUTH_OUTER, 0] = 0.012 * cos_o
    basis[SMILE, MOUTH_INNER, 1] = 0.025 * cos_i ** 2
    basis[SMILE, MOUTH_INNER, 0] = 0.012 * cos_i
    # brows
    basis[BROW_RAISE, BROW_L, 1] = 0.035
    basis[BROW_RAISE, BROW_R, 1] = 0.035
    inner_w = np.linspace(0.0, 1.0, 5)
    basis[BROW_FROWN, BROW_L, 1] = -0.025 * inner_w
    basis[BROW_FROWN, BROW_L, 0] = 0.012 * inner_w
    basis[BROW_FROWN, BROW_R, 1] = -0.025 * inner_w
    basis[BROW_FROWN, BROW_R, 0] = -0.012 * inner_w
    # eyes: lids at local positions 1, 2 (upper) and 4, 5 (lower)
    for eye_idx in (EYE_L, EYE_R):
        upper, lower = eye_idx[[1, 2]], eye_idx[[4, 5]]
        basis[EYE_WIDE, upper, 1] = 0.012
        basis[EYE_WIDE, lower, 1] = -0.006
        basis[BLINK, upper, 1] = -0.044
    groups = {
        "contour": CONTOUR, "eyebrows": np.concatenate([BROW_L, BROW_R]),
        "eyes": np.concatenate([EYE_L, EYE_R]),
        "mouth": np.concatenate([MOUTH_OUTER, MOUTH_INNER]),
    }
    rng = np.random.default_rng(seed)
    for b in range(8, n_expr):
        idx = groups[REGIONS[b % 4]]
        p = local[idx]
        disp = np.zeros_like(p)
        for _ in range(3):
            omega = rng.normal(0.0, 6.0, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.3])
            disp += np.sin(p @ omega + phase)[:, None] * direction
        disp *= 0.012 / (np.abs(disp).max() + 1e-12)
        basis[b, idx] = disp

    return HeadRig(local + HEAD_CENTER, basis, tuple(labels), HEAD_CENTER.copy())


@dataclass(frozen=True)
class KeypointSet:
    points: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown keypoint kind {self.kind!r}")
        object.__setattr__(self, "points", _frozen(self.points))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatchError(f"keypoints must be M x 3, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise InvalidParamsError("non-finite keypoints")

    def __len__(self):
        return self.points.shape[0]


def project_head_keypoints(face, rig):
    """Posed explicit head keypoints for one frame of face coefficients."""
    if face.expr.shape != (rig.n_expr,):
        raise InvalidRigError(f"expression has {face.expr.shape[0]} weights, rig has {rig.n_expr} bases")
    shape = rig.mean_keypoints + np.tensordot(face.expr, rig.basis, axes=1)
    rot = euler_to_matrix(face.pose[:3])
    pts = (shape - rig.pivot) @ rot.T + rig.pivot + face.pose[3:]
    return KeypointSet(pts, "head_explicit")


def project_head_batch(expr, pose, rig):
    """Vectorized :func:`project_head_keypoints`: ``(T, E), (T, 6) -> (T, N_h, 3)``."""
    expr = np.asarray(expr, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    if expr.shape[-1] != rig.n_expr:
        raise InvalidRigError(f"expression has {expr.shape[-1]} weights, rig has {rig.n_expr} bases")
    shape = rig.mean_keypoints + np.tensordot(expr, rig.basis, axes=1)
    rot = euler_to_matrix_batch(pose[..., :3])
    centered = shape - rig.pivot
    posed = np.einsum("...ij,...nj->...ni", rot, centered)
    return posed + rig.pivot + pose[..., None, 3:]


def apply_head_offset(x_ori, offsets):
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != x_ori.points.shape:
        raise ShapeMismatchError(f"offset shape {offsets.shape} != keypoints {x_ori.points.shape}")
    if not np.all(np.isfinite(offsets)):
        raise InvalidParamsError("non-finite offsets")
    return KeypointSet(x_ori.points + offsets, x_ori.kind)


# --------------------------------------------------------------------------
# body
# --------------------------------------------------------------------------

_BODY_TEMPLATE = np.array([
    [0.0, 0.22, 0.0], [0.0, 0.08, 0.0], [-0.42, 0.02, 0.0], [0.42, 0.02, 0.0],
    [-0.58, -0.45, 0.1], [0.58, -0.45, 0.1], [-0.34, -0.75, 0.3], [0.34, -0.75, 0.3],
    [-0.3, -1.0, 0.0], [0.3, -1.0, 0.0], [0.0, -0.2, 0.05], [0.0, -0.65, 0.05],
    [-0.38, -0.3, 0.0], [0.38, -0.3, 0.0], [-0.33, -0.7, 0.0], [0.33, -0.7, 0.0],
    [-0.52, -0.2, 0.05], [0.52, -0.2, 0.05], [-0.46, -0.62, 0.2], [0.46, -0.62, 0.2],
])
_BODY_TEMPLATE[:, 2] -= _BODY_TEMPLATE[:, 2].mean()


def body_template():
    """Rest layout of the 20 implicit body keypoints (zero mean depth)."""
    return _BODY_TEMPLATE.copy()


@dataclass(frozen=True)
class BodyMotionParams:
    canonical: np.ndarray
    deformation: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "canonical", _frozen(self.canonical))
        object.__setattr__(self, "deformation", _frozen(self.deformation))
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rotation(self):
        return np.eye(3)

    def validate(self):
        if not self.scale > 0:
            raise InvalidParamsError(f"body scale must be positive, got {self.scale}")
        if self.canonical.shape != self.deformation.shape or self.canonical.ndim != 2:
            raise ShapeMismatchError("canonical and deformation must both be k x 3")
        if self.translation.shape != (3,):
            raise ShapeMismatchError("translation must be a 3-vector")
        for arr in (self.canonical, self.deformation, self.translation):
            if not np.all(np.isfinite(arr)):
                raise InvalidParamsError("non-finite body parameters")
        return self


def compose_body_keypoints(p):
    """Implicit body keypoints ``s * (X_c R + delta) + t`` with ``R = I``."""
    p.validate()
    pts = p.scale * (p.canonical @ p.rotation + p.deformation) + p.translation
    return KeypointSet(pts, "body_implicit")


def compose_body_batch(canonical, deformation, scale, translation):
    """Sequence version: ``(k,3)`` or ``(T,k,3)`` canonical, ``(T,k,3)`` deformation."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidParamsError("body scale must be positive")
    return scale[..., None, None] * (np.asarray(canonical) + np.asarray(deformation)) \
        + np.asarray(translation)[..., None, :]


def fuse_control(head, body):
    if head.kind != "head_explicit" or body.kind != "body_implicit":
        raise ValueError(f"fuse_control needs (head_explicit, body_implicit), got ({head.kind}, {body.kind})")
    return KeypointSet(np.concatenate([head.points, body.points], axis=0), "fused")


def split_fused(fused, n_head):
    if fused.kind != "fused":
        raise ValueError("split_fused expects a fused keypoint set")
    return (KeypointSet(fused.points[:n_head], "head_explicit"),
            KeypointSet(fused.points[n_head:], "body_implicit"))


# --------------------------------------------------------------------------
# hands
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HandCoeffs:
    joint_angles: np.ndarray
    wrist_pose: np.ndarray
    handedness: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "joint_angles", _frozen(self.joint_angles))
        object.__setattr__(self, "wrist_pose", _frozen(self.wrist_pose))
        if self.handedness not in ("left", "right"):
            raise ValueError(f"handedness must be left or right, got {self.handedness!r}")
        if self.wrist_pose.shape != (6,):
            raise ShapeMismatchError("wrist pose must be a 6-vector")

    def validate(self):
        if np.any(np.abs(self.joint_angles) > math.pi / 2 + 1e-12):
            raise InvalidParamsError("joint angle beyond pi/2")
        if not np.all(np.isfinite(self.wrist_pose)) or not np.all(np.isfinite(self.joint_angles)):
            raise InvalidParamsError("non-finite hand parameters")
        return self


@dataclass(frozen=True)
class HandControlImage:
    pixels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(self.pixels))
        object.__setattr__(self, "mask", _frozen(self.mask, dtype=np.uint8))


# digit order: thumb, index, middle, ring, pinky
_DIGIT_BASE = np.array([[-0.06, 0.03, 0.0], [-0.045, 0.13, 0.0], [-0.015, 0.135, 0.0],
                        [0.015, 0.13, 0.0], [0.045, 0.12, 0.0]])
_DIGIT_DIR = np.array([[-0.8, 0.6, 0.0], [-0.1, 1.0, 0.0], [0.0, 1.0, 0.0],
                       [0.08, 1.0, 0.0], [0.18, 1.0, 0.0]])
_DIGIT_LEN = np.array([[0.05, 0.04, 0.03], [0.06, 0.04, 0.03], [0.065, 0.045, 0.03],
                       [0.06, 0.04, 0.03], [0.045, 0.03, 0.025]])
_DIGIT_RADIUS = np.array([0.018, 0.016, 0.016, 0.016, 0.014])
PALM_LENGTH, PALM_RADIUS = 0.1, 0.06
_DIGIT_COLOR = np.array([[0.9, 0.2, 0.2], [0.95, 0.55, 0.1], [0.9, 0.85, 0.15],
                         [0.2, 0.75, 0.3], [0.2, 0.4, 0.9]])
PALM_COLOR = np.array([0.85, 0.65, 0.55])
_SEGMENT_SHADE = np.array([1.0, 0.8, 0.6])


def hand_segments(hand, radius_scale=1.0):
    """3-D capsule chain (palm + 5 digits x 3 segments) of one hand.

    Returns ``(p0, p1, radii, colors)`` with 16 rows, in world canonical units.
    """
    mirror = np.array([-1.0, 1.0, 1.0]) if hand.handedness == "left" else np.ones(3)
    angles = np.asarray(hand.joint_angles, dtype=np.float64).reshape(5, 3)
    p0 = [np.zeros(3)]
    p1 = [np.array([0.0, PALM_LENGTH, 0.0])]
    radii = [PALM_RADIUS]
    colors = [PALM_COLOR]
    back = np.array([0.0, 0.0, -1.0])
    for d in range(5):
        direction = _DIGIT_DIR[d] / np.linalg.norm(_DIGIT_DIR[d])
        start = _DIGIT_BASE[d].copy()
        theta = 0.0
        for j in range(3):
            theta += angles[d, j]
            seg_dir = math.cos(theta) * direction + math.sin(theta) * back
            end = start + _DIGIT_LEN[d, j] * seg_dir
            p0.append(start)
            p1.append(end)
            radii.append(_DIGIT_RADIUS[d])
            colors.append(_DIGIT_COLOR[d] * _SEGMENT_SHADE[j])
            start = end
    rot = euler_to_matrix(hand.wrist_pose[:3])
    p0 = (np.array(p0) * mirror) @ rot.T + hand.wrist_pose[3:]
    p1 = (np.array(p1) * mirror) @ rot.T + hand.wrist_pose[3:]
    return p0, p1, np.array(radii) * radius_scale, np.array(colors)


def render_hand_control(hands, camera, size=(64, 64), radius_scale=1.0):
    """Flat-shaded capsule-chain hand raster with painter's depth ordering.

    ``hands`` is one :class:`HandCoeffs` or a sequence of them; ``size`` is
    ``(height, width)``.
    """
    if isinstance(hands, HandCoeffs):
        hands = [hands]
    height, width = size
    if not hands:
        return HandControlImage(np.zeros((height, width, 3)), np.zeros((height, width), np.uint8))
    parts = [hand_segments(h.validate(), radius_scale) for h in hands]
    p0 = np.concatenate([p[0] for p in parts])
    p1 = np.concatenate([p[1] for p in parts])
    radii = np.concatenate([p[2] for p in parts])
    colors = np.concatenate([p[3] for p in parts])
    depth = 0.5 * (p0[:, 2] + p1[:, 2])
    order = np.argsort(depth, kind="stable")
    uv0 = camera.project(p0[order])
    uv1 = camera.project(p1[order])
    rgb, mask = kernels.raster_capsules(uv0, uv1, radii[order] * camera.pixel_scale,
                                        colors[order], height, width)
    return HandControlImage(rgb, mask)
