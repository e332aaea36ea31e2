"""Self-consistent synthetic avatar world.

A clip is sampled entirely from seeded band-limited noise pushed through the
motion forward model; frames are a deterministic rasterization of the
resulting keypoints, and audio features are a fixed function of the mouth
channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d

from . import kernels
from . import motion_repr as mr
from .audio import FPS, AudioFeatureSeq
from .errors import InvalidParamsError, SplitContaminationError
from .records import array_from_record, array_record, dump_json, load_json, read_ppm, write_ppm
from .sequences import BodyMotionOutput, MotionChunk

_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
# std of unit white noise after three passes of the binomial kernel
_SMOOTH_STD = float(np.sqrt(np.sum(np.convolve(np.convolve(_KERNEL, _KERNEL), _KERNEL) ** 2)))
_AUDIO_SEED = 1234


@dataclass(frozen=True)
class SynthConfig:
    width: int = 128
    height: int = 192
    head_size: int = 128
    n_expr: int = mr.N_EXPR
    audio_dim: int = 32
    rig_seed: int = 0
    fps: int = FPS

    def __post_init__(self):
        if self.width < 16 or self.height < 16 or self.head_size < 16:
            raise InvalidParamsError("frame sizes must be at least 16 pixels")
        if self.n_expr < 8:
            raise InvalidParamsError("need at least 8 expression channels")
        if self.audio_dim < 3:
            raise InvalidParamsError("audio_dim must cover the three mouth channels")
        if self.fps != FPS:
            raise InvalidParamsError(f"synthetic clips run at {FPS} frames/s")

    def body_camera(self):
        return mr.body_camera(self.width, self.height)

    def head_camera(self):
        return mr.head_camera(self.head_size)


@lru_cache(maxsize=8)
def rig_for(seed, n_expr):
    return mr.build_head_rig(seed, n_expr)


def band_limited(rng, n, dims):
    """Unit-variance smooth noise: white noise through the 5-tap binomial kernel, three times."""
    pad = 8
    x = rng.standard_normal((n + 2 * pad, dims))
    for _ in range(3):
        x = convolve1d(x, _KERNEL, axis=0, mode="reflect")
    return x[pad:pad + n] / _SMOOTH_STD


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@lru_cache(maxsize=4)
def _audio_weights(audio_dim):
    rng = np.random.default_rng(_AUDIO_SEED)
    w_lin = rng.normal(0.0, 1.0, (audio_dim, 3))
    w_nl = rng.normal(0.0, 2.0, (audio_dim, 3))
    b_nl = rng.normal(0.0, 0.5, audio_dim)
    w_vel = rng.normal(0.0, 1.0, (audio_dim, 3))
    return w_lin, w_nl, b_nl, w_vel


def audio_from_mouth(mouth, voice):
    """Fixed linear-plus-nonlinear map from mouth channels ``(T, 3)`` to features ``(T, D)``."""
    w_lin, w_nl, b_nl, w_vel = _audio_weights(voice.shape[1])
    vel = np.diff(mouth, axis=0, prepend=mouth[:1])
    return (mouth @ w_lin.T + 0.5 * np.tanh(mouth @ w_nl.T + b_nl)
            + 0.5 * vel @ w_vel.T + 0.03 * voice)


@dataclass(frozen=True)
class Look:
    """Per-identity colors."""

    background: tuple
    skin: np.ndarray
    hair: np.ndarray
    shirt: np.ndarray
    accent: np.ndarray
    pants: np.ndarray
    lips: np.ndarray

    @classmethod
    def sample(cls, rng):
        def col(lo, hi):
            return rng.uniform(lo, hi, 3)
        return cls(
            background=(col(0.55, 0.9), col(0.3, 0.7)),
            skin=np.array([0.85, 0.68, 0.55]) * rng.uniform(0.75, 1.1),
            hair=col(0.05, 0.45),
            shirt=col(0.1, 0.9),
            accent=col(0.1, 0.95),
            pants=col(0.05, 0.4),
            lips=np.array([0.75, 0.3, 0.3]) * rng.uniform(0.8, 1.1),
        )


EYE_WHITE = np.array([0.96, 0.96, 0.94])
PUPIL = np.array([0.08, 0.06, 0.05])
BROW = np.array([0.18, 0.12, 0.08])
MOUTH_DARK = np.array([0.25, 0.04, 0.06])


@dataclass(frozen=True)
class FrameState:
    """Everything the renderer needs for one frame (all canonical units)."""

    head: np.ndarray       # (N_h, 3) final head keypoints (explicit + offsets)
    body: np.ndarray       # (k, 3) composed body keypoints
    hands: tuple           # HandCoeffs per hand


def mouth_radius_max(pixel_scale=1.0):
    """Vertical radius of the inner-mouth ellipse at full jaw opening (no offsets)."""
    return 0.5 * (mr.INNER_GAP + mr.JAW_DROP) * pixel_scale


def _ellipse_from_points(uv):
    center = uv.mean(axis=0)
    cov = np.cov((uv - center).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    radii = np.sqrt(2.0 * np.clip(evals, 1e-12, None))
    major = evecs[:, 1]
    return center, radii[1], radii[0], float(np.arctan2(major[1], major[0]))


def _feature_ellipse(uv, left, right, top, bottom):
    """Ellipse through two corner points with height set by the top/bottom point groups."""
    center = uv.mean(axis=0)
    axis = uv[right] - uv[left]
    rx = 0.5 * np.linalg.norm(axis)
    gap = np.mean(np.atleast_2d(uv[top]), axis=0) - np.mean(np.atleast_2d(uv[bottom]), axis=0)
    return center, rx, 0.5 * np.linalg.norm(gap), float(np.arctan2(axis[1], axis[0]))


def scene_shapes(state, camera, look):
    """Soft shapes for one frame, back to front (hands are composited separately)."""
    ps = camera.pixel_scale
    S = kernels.ShapeList()
    head = camera.project(state.head)
    body = camera.project(state.body)
    b = {name: body[i] for i, name in enumerate(mr.BODY_NAMES)}

    drop = np.array([0.0, 1.0]) * ps
    S.polygon([b["hip_l"], b["hip_r"], b["hip_r"] + drop + [0.05 * ps, 0], b["hip_l"] + drop - [0.05 * ps, 0]],
              look.pants)
    S.polygon([b["shoulder_l"], b["side_upper_l"], b["side_lower_l"], b["hip_l"], b["hip_r"],
               b["side_lower_r"], b["side_upper_r"], b["shoulder_r"], b["neck_base"]], look.shirt)
    S.ellipse(*b["chest"], 0.09 * ps, 0.06 * ps, 0.0, look.accent)
    S.ellipse(*b["belly"], 0.05 * ps, 0.05 * ps, 0.0, look.accent * 0.6)
    for side in ("l", "r"):
        S.polyline([b[f"shoulder_{side}"], b[f"upper_arm_{side}"], b[f"elbow_{side}"]], 0.075 * ps, look.shirt * 0.85)
        S.polyline([b[f"elbow_{side}"], b[f"forearm_{side}"], b[f"wrist_{side}"]], 0.055 * ps, look.skin * 0.95)
    S.capsule(b["neck_top"], b["neck_base"], 0.075 * ps, look.skin * 0.9)

    center, rx, ry, ang = _ellipse_from_points(head[mr.CONTOUR])
    up = camera.project(np.array([0.0, 1.0, 0.0])) - camera.project(np.zeros(3))
    up = up / (np.linalg.norm(up) + 1e-12)
    S.ellipse(*(center + 0.22 * ry * up), 1.1 * rx, 0.95 * ry, ang, look.hair)
    S.ellipse(*center, rx, ry, ang, look.skin)

    S.polyline(head[mr.BROW_L], 0.013 * ps, BROW)
    S.polyline(head[mr.BROW_R], 0.013 * ps, BROW)
    for eye in (mr.EYE_L, mr.EYE_R):
        uv = head[eye]
        c, erx, ery, eang = _feature_ellipse(uv, 0, 3, [1, 2], [4, 5])
        S.ellipse(*c, erx, ery, eang, EYE_WHITE)
        pr = min(ery, 0.4 * erx)
        S.ellipse(*c, pr, pr, 0.0, PUPIL)

    S.polygon(head[mr.MOUTH_OUTER], look.lips)
    inner = head[mr.MOUTH_INNER]
    c, mrx, mry, mang = _feature_ellipse(inner, 4, 0, 2, 6)
    S.ellipse(*c, mrx, mry, mang, MOUTH_DARK)
    return S


def background(look, height, width):
    t = np.linspace(0.0, 1.0, height)[:, None, None]
    top, bottom = look.background
    return np.broadcast_to((1 - t) * top + t * bottom, (height, width, 3)).copy()


def hand_shading(control_rgb, skin):
    return 0.55 * skin + 0.45 * control_rgb


def render_frame(state, camera, size, look):
    """Rasterize one :class:`FrameState` into a float32 ``H x W x 3`` image in [0, 1]."""
    height, width = size
    canvas = background(look, height, width)
    kernels.raster_soft(scene_shapes(state, camera, look), canvas)
    hand = mr.render_hand_control(list(state.hands), camera, (height, width))
    m = hand.mask.astype(bool)
    canvas[m] = hand_shading(hand.pixels[m], look.skin)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


@dataclass
class SyntheticClip:
    seed: int
    style_seed: int
    audio: AudioFeatureSeq
    face: MotionChunk
    body: BodyMotionOutput
    canonical: np.ndarray
    look: Look
    config: SynthConfig
    frames: Optional[np.ndarray] = None
    _head_frames: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.face)

    @property
    def rig(self):
        return rig_for(self.config.rig_seed, self.config.n_expr)

    def head_explicit(self):
        return mr.project_head_batch(self.face.expr, self.face.pose, self.rig)

    def head_keypoints(self):
        return self.head_explicit() + self.body.head_offsets

    def body_keypoints(self):
        return mr.compose_body_batch(self.canonical, self.body.deformation,
                                     self.body.scale, self.body.translation)

    def state(self, i, head=None, body=None):
        head = self.head_keypoints()[i] if head is None else head
        body = self.body_keypoints()[i] if body is None else body
        return FrameState(head, body, tuple(self.body.hands(i)))

    def render(self, mode="body"):
        cfg = self.config
        if mode == "body":
            cam, size = cfg.body_camera(), (cfg.height, cfg.width)
        elif mode == "head":
            cam, size = cfg.head_camera(), (cfg.head_size, cfg.head_size)
        else:
            raise ValueError(f"unknown render mode {mode!r}")
        heads, bodies = self.head_keypoints(), self.body_keypoints()
        return np.stack([render_frame(FrameState(heads[i], bodies[i], tuple(self.body.hands(i))),
                                      cam, size, self.look) for i in range(len(self))])

    def head_frames(self):
        if self._head_frames is None:
            self._head_frames = self.render("head")
        return self._head_frames

    def face_chunks(self, length):
        return [self.face.slice(s, s + length) for s in range(0, len(self) - length + 1, length)]


def make_clip(seed, length_s=2.0, config=None, style_seed=None, render=True):
    """Sample one synthetic clip. Same arguments give bit-identical output."""
    config = config or SynthConfig()
    if length_s < 1.0:
        raise InvalidParamsError("clips must be at least 1 s long")
    style_seed = seed if style_seed is None else style_seed
    n = int(round(length_s * config.fps))
    E = config.n_expr
    rng = np.random.default_rng([seed, 0])
    rng_style = np.random.default_rng([style_seed, 1])
    rng_id = np.random.default_rng([seed, 2])

    expr = np.zeros((n, E))
    mouth_noise = band_limited(rng, n, 3)
    expr[:, mr.JAW_OPEN] = _sigmoid(1.8 * mouth_noise[:, 0] - 0.6)
    expr[:, mr.MOUTH_WIDE] = _sigmoid(1.4 * mouth_noise[:, 1] - 1.0)
    expr[:, mr.LIP_ROUND] = _sigmoid(1.4 * mouth_noise[:, 2] - 1.2)
    gain = rng.uniform(0.5, 1.2)
    style_bias = rng_style.uniform(-2.0, 1.0, len(mr.STYLE_CHANNELS))
    style_noise = band_limited(rng, n, len(mr.STYLE_CHANNELS))
    for j, ch in enumerate(mr.STYLE_CHANNELS):
        expr[:, ch] = _sigmoid(style_bias[j] + gain * style_noise[:, j])
    blink = np.zeros(n)
    for start in np.flatnonzero(rng.random(n) < 0.03):
        pulse = np.array([0.5, 1.0, 1.0, 0.5])[: n - start]
        blink[start:start + len(pulse)] = np.maximum(blink[start:start + len(pulse)], pulse)
    expr[:, mr.BLINK] = blink
    if E > 8:
        expr[:, 8:] = _sigmoid(-1.5 + gain * band_limited(rng, n, E - 8))

    pose_noise = band_limited(rng, n, 5)
    pose = np.zeros((n, 6))
    pose[:, :3] = 0.06 * pose_noise[:, :3]
    pose[:, 3] = 0.03 * pose_noise[:, 3]
    pose[:, 4] = 0.02 * pose_noise[:, 4]
    face = MotionChunk(expr, pose)

    rig = rig_for(config.rig_seed, E)
    eye_scale = rng_id.uniform(-0.15, 0.3)
    static = np.zeros((mr.N_HEAD, 3))
    for eye in (mr.EYE_L, mr.EYE_R):
        pts = rig.mean_keypoints[eye]
        static[eye] = eye_scale * (pts - pts.mean(axis=0)) * np.array([1.0, 1.0, 0.0])
    offsets = static[None] + 0.3 * expr[:, mr.JAW_OPEN, None, None] * rig.basis[mr.JAW_OPEN][None]

    canonical = mr.body_template() + rng_id.normal(0.0, 0.015, (mr.N_BODY, 3)) * np.array([1.0, 1.0, 0.0])
    body_noise = band_limited(rng, n, 3 * mr.N_BODY + 4).reshape(n, -1)
    amp = np.full(mr.N_BODY, 0.01)
    amp[[4, 5, 6, 7, 16, 17, 18, 19]] = 0.07
    deform = body_noise[:, : 3 * mr.N_BODY].reshape(n, mr.N_BODY, 3) * amp[None, :, None]
    deform[..., 2] *= 0.3
    deform[:, [mr.WRIST_L, mr.WRIST_R], 1] += 0.08 * (expr[:, mr.JAW_OPEN, None] - 0.4)
    scale = 1.0 + 0.03 * body_noise[:, -4]
    trans = np.zeros((n, 3))
    trans[:, :2] = 0.8 * pose[:, 3:5] + 0.01 * body_noise[:, -3:-1]

    body_kp = mr.compose_body_batch(canonical, deform, scale, trans)
    hand_noise = band_limited(rng, n, 2 * (2 + 3))
    joints = np.zeros((n, 2, mr.N_JOINTS))
    wrist = np.zeros((n, 2, 6))
    profile = np.array([0.7, 0.9, 0.6])
    digit_jitter = rng_id.uniform(0.7, 1.2, (2, 5))
    for h, (wrist_idx, roll) in enumerate(((mr.WRIST_L, 0.35), (mr.WRIST_R, -0.35))):
        hn = hand_noise[:, 5 * h: 5 * h + 5]
        curl = _sigmoid(1.5 * hn[:, 0])
        ang = curl[:, None, None] * profile[None, None, :] * digit_jitter[h][None, :, None]
        ang = ang + 0.15 * hn[:, 1, None, None]
        joints[:, h] = np.clip(ang, 0.0, 1.5).reshape(n, -1)
        wrist[:, h, 0] = 0.2 * hn[:, 2]
        wrist[:, h, 1] = 0.2 * hn[:, 3]
        wrist[:, h, 2] = roll + 0.25 * hn[:, 4]
        wrist[:, h, 3:] = body_kp[:, wrist_idx] + np.array([0.0, 0.0, 0.05])
    body = BodyMotionOutput(offsets, deform, scale, trans, joints, wrist)

    voice = band_limited(rng, n, config.audio_dim)
    audio = AudioFeatureSeq(audio_from_mouth(expr[:, list(mr.MOUTH_CHANNELS)], voice))

    clip = SyntheticClip(seed, style_seed, audio, face, body, canonical, Look.sample(rng_id), config)
    if render:
        clip.frames = clip.render("body")
    return clip


def _seed_key(seed):
    if isinstance(seed, (tuple, list)):
        return int(seed[0]), int(seed[1])
    return int(seed), int(seed)


class SyntheticDataset:
    """Train/test clip collections over disjoint seed sets; clips are generated lazily."""

    def __init__(self, train_seeds, test_seeds=(), config=None, length_s=2.0):
        self.train_seeds = [_seed_key(s) for s in train_seeds]
        self.test_seeds = [_seed_key(s) for s in test_seeds]
        overlap = {s[0] for s in self.train_seeds} & {s[0] for s in self.test_seeds}
        if overlap:
            raise SplitContaminationError(f"seeds in both splits: {sorted(overlap)}")
        self.config = config or SynthConfig()
        self.length_s = length_s

    def seeds(self, split):
        if split == "train":
            return list(self.train_seeds)
        if split == "test":
            return list(self.test_seeds)
        raise ValueError(f"unknown split {split!r}")

    def iter(self, split, render=True):
        for seed, style in self.seeds(split):
            yield make_clip(seed, self.length_s, self.config, style_seed=style, render=render)

    def clips(self, split, render=True):
        return list(self.iter(split, render))


def dataset(seeds, split, other_split_seeds=(), config=None, length_s=2.0, render=True):
    """Lazily generated clips for ``split``; refuses seeds shared with the other split."""
    if split == "train":
        ds = SyntheticDataset(seeds, other_split_seeds, config, length_s)
    else:
        ds = SyntheticDataset(other_split_seeds, seeds, config, length_s)
    return ds.iter(split, render)


# --------------------------------------------------------------------------
# on-disk cache
# --------------------------------------------------------------------------

def save_clip(clip, directory):
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        write_ppm(d / "frames" / f"{i:05d}.ppm", frame)
    dump_json({
        "audio": array_record("audio_features", clip.audio.frames),
        "expr": array_record("expr", clip.face.expr),
        "pose": array_record("pose", clip.face.pose),
        "body": array_record("body_flat", clip.body.to_flat()),
        "canonical": array_record("body_canonical", clip.canonical),
    }, d / "motion.json")
    dump_json({"seed": clip.seed, "style_seed": clip.style_seed, "frames": len(clip),
               "fps": clip.config.fps, "config": clip.config.__dict__}, d / "manifest.json")


def load_clip(directory):
    d = Path(directory)
    manifest = load_json(d / "manifest.json")
    motion = load_json(d / "motion.json")
    config = SynthConfig(**manifest["config"])
    clip = make_clip(manifest["seed"], manifest["frames"] / config.fps, config,
                     style_seed=manifest["style_seed"], render=False)
    clip.face = MotionChunk(array_from_record(motion["expr"]), array_from_record(motion["pose"]))
    clip.body = BodyMotionOutput.from_flat(array_from_record(motion["body"]))
    clip.audio = AudioFeatureSeq(array_from_record(motion["audio"]))
    clip.canonical = array_from_record(motion["canonical"])
    clip.frames = np.stack([read_ppm(d / "frames" / f"{i:05d}.ppm")
                            for i in range(manifest["frames"])]).astype(np.float32)
    return clip
