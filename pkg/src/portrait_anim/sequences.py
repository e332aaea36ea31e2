"""Per-frame motion sequences exchanged between the two stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidParamsError, ShapeMismatchError
from .motion_repr import N_BODY, N_HEAD, N_JOINTS, FaceCoeffs, HandCoeffs

N_HANDS = 2
HAND_SIDES = ("right", "left")
SCALE_RANGE = (0.5, 2.0)
JOINT_LIMIT = np.pi / 2


def _arr(x):
    return np.array(x, dtype=np.float64, copy=True)


@dataclass(frozen=True)
class MotionChunk:
    """``L`` frames of face coefficients: ``expr (L, E)`` and ``pose (L, 6)``."""

    expr: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "expr", _arr(self.expr))
        object.__setattr__(self, "pose", _arr(self.pose))
        if self.expr.ndim != 2 or self.pose.shape != (self.expr.shape[0], 6):
            raise ShapeMismatchError(f"bad chunk shapes {self.expr.shape}, {self.pose.shape}")

    def __len__(self):
        return self.expr.shape[0]

    @property
    def n_expr(self):
        return self.expr.shape[1]

    def frame(self, i):
        return FaceCoeffs(self.expr[i], self.pose[i])

    def to_array(self):
        return np.concatenate([self.expr, self.pose], axis=1)

    @classmethod
    def from_array(cls, arr, n_expr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, :n_expr], arr[:, n_expr:n_expr + 6])

    @classmethod
    def zeros(cls, length, n_expr):
        return cls(np.zeros((length, n_expr)), np.zeros((length, 6)))

    def clamped(self):
        pose = self.pose.copy()
        pose[:, :3] = np.clip(pose[:, :3], -np.pi, np.pi)
        return MotionChunk(np.clip(self.expr, 0.0, 1.0), pose)

    def slice(self, start, stop):
        return MotionChunk(self.expr[start:stop], self.pose[start:stop])

    def tail(self, n):
        return self.slice(len(self) - n, len(self))


def style_ranges(chunk):
    """(expr_range, pose_range): mean temporal std of expression weights and of pose velocity."""
    expr_range = float(np.mean(np.std(chunk.expr, axis=0)))
    if len(chunk) > 1:
        pose_range = float(np.mean(np.std(np.diff(chunk.pose, axis=0), axis=0)))
    else:
        pose_range = 0.0
    return expr_range, pose_range


@dataclass(frozen=True)
class StyleControl:
    expr_range: float
    pose_range: float
    reference: Optional[MotionChunk] = None

    def __post_init__(self):
        if not (np.isfinite(self.expr_range) and np.isfinite(self.pose_range)):
            raise InvalidParamsError("style ranges must be finite")
        if self.expr_range < 0 or self.pose_range < 0:
            raise InvalidParamsError("style ranges must be non-negative")
        if self.reference is not None and len(self.reference) < 1:
            raise InvalidParamsError("reference sequence must hold at least one frame")

    @classmethod
    def from_chunk(cls, chunk, reference=None):
        return cls(*style_ranges(chunk), reference=reference)

    def with_reference(self, reference):
        return StyleControl(self.expr_range, self.pose_range, reference)


@dataclass(frozen=True)
class BodyMotionOutput:
    """Per-frame body stage output (``L`` frames)."""

    head_offsets: np.ndarray   # (L, N_h, 3)
    deformation: np.ndarray    # (L, k, 3)
    scale: np.ndarray          # (L,)
    translation: np.ndarray    # (L, 3)
    joint_angles: np.ndarray   # (L, 2, H)
    wrist_pose: np.ndarray     # (L, 2, 6)

    def __post_init__(self):
        for name in ("head_offsets", "deformation", "scale", "translation", "joint_angles", "wrist_pose"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        n = self.scale.shape[0]
        for name in ("head_offsets", "deformation", "translation", "joint_angles", "wrist_pose"):
            if getattr(self, name).shape[0] != n:
                raise ShapeMismatchError(f"{name} length disagrees with scale length {n}")

    def __len__(self):
        return self.scale.shape[0]

    @staticmethod
    def flat_dim(n_head=N_HEAD, n_body=N_BODY, n_joints=N_JOINTS):
        return 3 * n_head + 3 * n_body + 1 + 3 + N_HANDS * (n_joints + 6)

    def to_flat(self):
        n = len(self)
        return np.concatenate([
            self.head_offsets.reshape(n, -1), self.deformation.reshape(n, -1),
            self.scale[:, None], self.translation,
            self.joint_angles.reshape(n, -1), self.wrist_pose.reshape(n, -1),
        ], axis=1)

    @classmethod
    def from_flat(cls, flat, n_head=N_HEAD, n_body=N_BODY, n_joints=N_JOINTS):
        flat = np.asarray(flat, dtype=np.float64)
        n = flat.shape[0]
        if flat.shape[1] != cls.flat_dim(n_head, n_body, n_joints):
            raise ShapeMismatchError(f"flat body vector has {flat.shape[1]} entries")
        o = 0
        head = flat[:, o:o + 3 * n_head].reshape(n, n_head, 3); o += 3 * n_head
        deform = flat[:, o:o + 3 * n_body].reshape(n, n_body, 3); o += 3 * n_body
        scale = flat[:, o]; o += 1
        trans = flat[:, o:o + 3]; o += 3
        joints = flat[:, o:o + N_HANDS * n_joints].reshape(n, N_HANDS, n_joints); o += N_HANDS * n_joints
        wrist = flat[:, o:o + N_HANDS * 6].reshape(n, N_HANDS, 6)
        return cls(head, deform, scale, trans, joints, wrist)

    def clamped(self):
        return BodyMotionOutput(self.head_offsets, self.deformation,
                                np.clip(self.scale, *SCALE_RANGE), self.translation,
                                np.clip(self.joint_angles, -JOINT_LIMIT, JOINT_LIMIT),
                                self.wrist_pose)

    def hands(self, i):
        return [HandCoeffs(self.joint_angles[i, h], self.wrist_pose[i, h], HAND_SIDES[h])
                for h in range(N_HANDS)]

    def slice(self, start, stop):
        return BodyMotionOutput(self.head_offsets[start:stop], self.deformation[start:stop],
                                self.scale[start:stop], self.translation[start:stop],
                                self.joint_angles[start:stop], self.wrist_pose[start:stop])
