"""Stage 1: audio to face coefficients, then face keypoints to body and hand motion.

Both sub-stages are epsilon-prediction diffusion transformers. The face model
conditions every block on (timestep, expr_range, pose_range) through adaptive
layer norm and cross-attends to audio and history tokens; a reference motion
sequence, when given, is prepended to the temporal tokens and its output
positions are dropped. The body model reads frame-aligned face keypoints and
audio plus appearance tokens from the source frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from . import motion_repr as mr
from .diffusion import ConditionBundle, sample
from .errors import CheckpointError, ShapeMismatchError
from .metrics import style_transfer_error  # noqa: F401  (public stage-1 metric)
from .sequences import BodyMotionOutput, MotionChunk, StyleControl


@dataclass(frozen=True)
class FaceModelConfig:
    n_expr: int = mr.N_EXPR
    audio_dim: int = 32
    width: int = 128
    heads: int = 4
    depth: int = 6
    history: int = 10
    chunk: int = 30
    ff_mult: int = 4

    @property
    def feat_dim(self):
        return self.n_expr + 6

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BodyModelConfig:
    n_head: int = mr.N_HEAD
    n_body: int = mr.N_BODY
    n_joints: int = mr.N_JOINTS
    audio_dim: int = 32
    width: int = 128
    heads: int = 4
    depth: int = 2
    chunk: int = 30
    ff_mult: int = 4
    app_tokens: int = 8
    app_size: tuple = (48, 32)

    @property
    def feat_dim(self):
        return BodyMotionOutput.flat_dim(self.n_head, self.n_body, self.n_joints)

    def to_dict(self):
        d = asdict(self)
        d["app_size"] = list(self.app_size)
        return d


def sinusoid(positions, width):
    """Standard sine/cosine embedding of a float tensor of positions -> ``(*, width)``."""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.to(torch.float32)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Normalizer(nn.Module):
    """Fixed per-feature affine standardization stored with the model."""

    def __init__(self, dim):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    @torch.no_grad()
    def fit(self, data, std_floor=1e-2):
        data = torch.tensor(np.asarray(data), dtype=torch.float32).reshape(-1, self.mean.numel())
        self.mean.copy_(data.mean(0))
        self.std.copy_(data.std(0, unbiased=False).clamp_min(std_floor))
        return self

    def forward(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


class AdaBlock(nn.Module):
    """Transformer block with adaLN-zero modulation: self-attention, cross-attentions, feed-forward."""

    def __init__(self, width, heads, n_cross, ff_mult):
        super().__init__()
        self.n_sub = 2 + n_cross
        self.norms = nn.ModuleList(nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
                                   for _ in range(self.n_sub))
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.cross = nn.ModuleList(nn.MultiheadAttention(width, heads, batch_first=True)
                                   for _ in range(n_cross))
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(),
                                nn.Linear(ff_mult * width, width))
        self.mod = nn.Linear(width, 3 * width * self.n_sub)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x, cond, contexts):
        mods = self.mod(tf.silu(cond)).unsqueeze(1).chunk(3 * self.n_sub, dim=-1)

        def modulated(i):
            return self.norms[i](x) * (1 + mods[3 * i + 1]) + mods[3 * i]

        h = modulated(0)
        x = x + mods[2] * self.self_attn(h, h, h, need_weights=False)[0]
        for j, ctx in enumerate(contexts):
            h = modulated(1 + j)
            x = x + mods[3 * (1 + j) + 2] * self.cross[j](h, ctx, ctx, need_weights=False)[0]
        i = self.n_sub - 1
        x = x + mods[3 * i + 2] * self.ff(modulated(i))
        return x


class FinalLayer(nn.Module):
    def __init__(self, width, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, out_dim)
        for layer in (self.mod, self.out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, cond):
        shift, scale = self.mod(tf.silu(cond)).unsqueeze(1).chunk(2, dim=-1)
        return self.out(self.norm(x) * (1 + scale) + shift)


class TimestepEmbed(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        return self.mlp(sinusoid(t, self.width))


class FaceDenoiser(nn.Module):
    """Epsilon predictor over normalized ``(B, L, n_expr + 6)`` face-coefficient chunks."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or FaceModelConfig()
        self.config = cfg
        w, f = cfg.width, cfg.feat_dim
        self.norm = Normalizer(f)
        self.register_buffer("style_scale", torch.ones(2))
        self.x_in = nn.Linear(f, w)
        self.ref_in = nn.Linear(f, w)
        self.ref_type = nn.Parameter(torch.zeros(w))
        self.audio_in = nn.Linear(cfg.audio_dim, w)
        self.hist_in = nn.Linear(f, w)
        self.t_embed = TimestepEmbed(w)
        self.style_embed = nn.Sequential(nn.Linear(2, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(AdaBlock(w, cfg.heads, 2, cfg.ff_mult) for _ in range(cfg.depth))
        self.final = FinalLayer(w, f)

    @torch.no_grad()
    def fit_normalization(self, motion, styles):
        """Fit feature statistics on ``(N, F)`` training frames and the style ranges ``(M, 2)``."""
        self.norm.fit(motion)
        s = torch.tensor(np.asarray(styles), dtype=torch.float32).reshape(-1, 2)
        self.style_scale.copy_(s.mean(0).clamp_min(1e-4))

    def _pos(self, n, offset=0):
        return sinusoid(torch.arange(offset, offset + n), self.config.width)

    def forward(self, x_t, t, c):
        cfg = self.config
        B, L, F = x_t.shape
        if F != cfg.feat_dim:
            raise ShapeMismatchError(f"face chunk has {F} features, model expects {cfg.feat_dim}")
        if c.audio is None or c.audio.shape[1] < L:
            raise ShapeMismatchError("audio condition must cover every frame of the chunk")
        if c.audio.shape[2] != cfg.audio_dim:
            raise ShapeMismatchError(f"audio has {c.audio.shape[2]} features, expected {cfg.audio_dim}")
        history = c.history
        if history is None:
            history = torch.zeros(B, cfg.history, F)
        if history.shape[1:] != (cfg.history, F):
            raise ShapeMismatchError(f"history must be ({cfg.history}, {F}), got {tuple(history.shape[1:])}")
        style = c.style if c.style is not None else torch.zeros(B, 2)

        cond = self.t_embed(t.to(torch.float32)) + self.style_embed(style / self.style_scale)
        H = cfg.history
        hist = self.hist_in(self.norm(history)) + self._pos(H)
        audio = self.audio_in(c.audio) + self._pos(c.audio.shape[1], H)
        tokens = self.x_in(x_t) + self._pos(L, H)
        n_ref = 0
        if c.reference is not None:
            ref = c.reference
            if ref.shape[0] != B or ref.shape[2] != F or ref.shape[1] < 1:
                raise ShapeMismatchError(f"reference shape {tuple(ref.shape)} incompatible with chunk")
            n_ref = ref.shape[1]
            ref_tok = self.ref_in(self.norm(ref)) + self._pos(n_ref) + self.ref_type
            tokens = torch.cat([ref_tok, tokens], dim=1)
        for block in self.blocks:
            tokens = block(tokens, cond, (audio, hist))
        return self.final(tokens[:, n_ref:], cond)


class AppearanceEncoder(nn.Module):
    """Source frame -> a few appearance tokens for the body motion model."""

    def __init__(self, width, n_tokens, size):
        super().__init__()
        self.size = tuple(size)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, 2, 1), nn.SiLU(),
        )
        grid = (2, n_tokens // 2) if n_tokens % 2 == 0 else (1, n_tokens)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.proj = nn.Linear(64, width)
        self.pos = nn.Parameter(torch.randn(n_tokens, width) * 0.02)

    def forward(self, image):
        x = tf.interpolate(image, size=self.size, mode="area")
        x = self.pool(self.net(x)).flatten(2).transpose(1, 2)
        return self.proj(x) + self.pos


class BodyDenoiser(nn.Module):
    """Epsilon predictor over normalized flat body/hand motion ``(B, L, flat_dim)``."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or BodyModelConfig()
        self.config = cfg
        w, f = cfg.width, cfg.feat_dim
        self.norm = Normalizer(f)
        self.kp_norm = Normalizer(3 * cfg.n_head)
        self.x_in = nn.Linear(f, w)
        self.face_in = nn.Linear(3 * cfg.n_head, w)
        self.audio_in = nn.Linear(cfg.audio_dim, w)
        self.appearance = AppearanceEncoder(w, cfg.app_tokens, cfg.app_size)
        self.t_embed = TimestepEmbed(w)
        self.blocks = nn.ModuleList(AdaBlock(w, cfg.heads, 1, cfg.ff_mult) for _ in range(cfg.depth))
        self.final = FinalLayer(w, f)

    @torch.no_grad()
    def fit_normalization(self, motion_flat, face_keypoints):
        self.norm.fit(motion_flat, std_floor=5e-3)
        self.kp_norm.fit(face_keypoints, std_floor=5e-3)

    def appearance_tokens(self, image):
        """``(B, 3, H, W)`` source frames in [0, 1] -> ``(B, n_tokens, width)``."""
        return self.appearance(image)

    def forward(self, x_t, t, c):
        cfg = self.config
        B, L, F = x_t.shape
        if F != cfg.feat_dim:
            raise ShapeMismatchError(f"body chunk has {F} features, model expects {cfg.feat_dim}")
        if c.face_keypoints is None or c.face_keypoints.shape[1:] != (L, 3 * cfg.n_head):
            raise ShapeMismatchError("face keypoint condition must be (L, 3 N_h) per sample")
        if c.audio is None or c.audio.shape[1] < L:
            raise ShapeMismatchError("audio condition must cover every frame of the chunk")
        if c.appearance is None:
            raise ShapeMismatchError("body model needs an appearance condition")
        app = c.appearance
        if app.ndim == 4:
            app = self.appearance_tokens(app)
        pos = sinusoid(torch.arange(L), cfg.width)
        tokens = (self.x_in(x_t) + self.face_in(self.kp_norm(c.face_keypoints))
                  + self.audio_in(c.audio[:, :L]) + pos)
        cond = self.t_embed(t.to(torch.float32))
        for block in self.blocks:
            tokens = block(tokens, cond, (app,))
        return self.final(tokens, cond)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def _require(model):
    if model is None:
        raise CheckpointError("no trained model loaded")
    return model


def _t(x):
    return torch.tensor(np.asarray(x), dtype=torch.float32)


def generate_face_batch(model, audio, history, style, sched, steps=50, seed=0, reference=None):
    """Batched deterministic sampling; arrays in, clamped ``(B, L, F)`` numpy array out.

    ``audio (B, L, D)``, ``history (B, H, F)`` raw coefficients, ``style (B, 2)``,
    ``reference (B, L_ref, F)`` or None.
    """
    model = _require(model)
    audio = _t(audio)
    B, L = audio.shape[:2]
    c = ConditionBundle(audio=audio, history=_t(history), style=_t(style),
                        reference=None if reference is None else _t(reference))
    gen = torch.Generator().manual_seed(int(seed))
    x_T = torch.randn((B, L, model.config.feat_dim), generator=gen)
    x0 = sample(model, c, sched, steps, rng=gen, mode="deterministic", x_T=x_T)
    out = model.norm.inverse(x0).double().numpy()
    n = model.config.n_expr
    out[..., :n] = np.clip(out[..., :n], 0.0, 1.0)
    out[..., n:n + 3] = np.clip(out[..., n:n + 3], -np.pi, np.pi)
    return out


def generate_face_motion(model, audio, history, style, sched, steps=50, seed=0):
    """One chunk of face coefficients, as long as ``audio``.

    ``history`` is a :class:`MotionChunk` of ``H`` frames or None for stream start.
    """
    model = _require(model)
    cfg = model.config
    frames = audio.frames if hasattr(audio, "frames") else np.asarray(audio)
    hist = (np.zeros((cfg.history, cfg.feat_dim)) if history is None else history.to_array())
    if hist.shape != (cfg.history, cfg.feat_dim):
        raise ShapeMismatchError(f"history must hold {cfg.history} frames")
    style = style or StyleControl(0.0, 0.0)
    ref = None if style.reference is None else style.reference.to_array()[None]
    out = generate_face_batch(model, frames[None], hist[None],
                              [[style.expr_range, style.pose_range]], sched, steps, seed, ref)
    return MotionChunk.from_array(out[0], cfg.n_expr)


def project_face_condition(chunk, rig):
    """Per-frame explicit head keypoints of a chunk, as :class:`KeypointSet` objects."""
    pts = mr.project_head_batch(chunk.expr, chunk.pose, rig)
    return [mr.KeypointSet(p, "head_explicit") for p in pts]


def face_condition_array(chunk, rig):
    """``(L, 3 N_h)`` flattened head keypoints used to condition the body model."""
    return mr.project_head_batch(chunk.expr, chunk.pose, rig).reshape(len(chunk), -1)


def generate_body_batch(model, face_kp, audio, appearance, sched, steps=50, seed=0):
    """Batched body sampling. ``appearance`` is ``(B, 3, H, W)`` images or precomputed tokens."""
    model = _require(model)
    face_kp = _t(face_kp)
    B, L = face_kp.shape[:2]
    app = appearance if isinstance(appearance, torch.Tensor) else _t(appearance)
    with torch.no_grad():
        if app.ndim == 4:
            app = model.appearance_tokens(app)
    c = ConditionBundle(audio=_t(audio), face_keypoints=face_kp, appearance=app)
    gen = torch.Generator().manual_seed(int(seed))
    x_T = torch.randn((B, L, model.config.feat_dim), generator=gen)
    x0 = sample(model, c, sched, steps, rng=gen, mode="deterministic", x_T=x_T)
    return model.norm.inverse(x0).double().numpy()


def generate_upper_body(model, face, audio, appearance, sched, rig, steps=50, seed=0):
    """Body, head-offset and hand motion for a face chunk. ``appearance`` is an ``H x W x 3`` frame
    or tokens from :meth:`BodyDenoiser.appearance_tokens`."""
    model = _require(model)
    frames = audio.frames if hasattr(audio, "frames") else np.asarray(audio)
    if frames.shape[0] < len(face):
        raise ShapeMismatchError("audio shorter than the face chunk")
    if not isinstance(appearance, torch.Tensor):
        appearance = _t(appearance).permute(2, 0, 1)[None]
    cfg = model.config
    flat = generate_body_batch(model, face_condition_array(face, rig)[None], frames[None, :len(face)],
                               appearance, sched, steps, seed)[0]
    return BodyMotionOutput.from_flat(flat, cfg.n_head, cfg.n_body, cfg.n_joints).clamped()
