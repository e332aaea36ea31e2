"""Training loops, checkpoints and deterministic execution for every stage."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import audio2motion as a2m
from . import losses as L
from . import motion_repr as mr
from . import synth
from . import video_gen as vg
from .diffusion import ConditionBundle, build_schedule, denoise_loss
from .errors import CheckpointError, InvalidParamsError, NonFiniteError
from .sequences import MotionChunk, style_ranges

STAGES = ("a2m_face", "a2m_body", "gen_body", "gen_face_refine", "gen_head")
MAGIC = b"PANIMCK1"
GEN_WEIGHTS = {"E": 1.0, "L": 1.0, "D": 1.0, "Per": 1.0, "GAN": 1.0, "Recon": 1.0, "lms": 1.0,
               "Per_hand": 1.0}
FACE_WEIGHTS = {"Per": 1.0, "GAN": 1.0, "Recon": 1.0, "Per_face": 1.0}


def fingerprint(obj):
    """sha256 of the canonical JSON encoding."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class TrainConfig:
    stage: str = "a2m_face"
    steps: int = 20000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    loss_weights: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train_seeds: list = field(default_factory=lambda: list(range(1, 9)))
    clip_seconds: float = 2.0
    log_every: int = 1
    checkpoint_every: int = 1000
    # stage options
    reference_dropout: float = 0.5
    style_gain_p: float = 0.25
    same_frame_p: float = 0.25
    disc_lr_scale: float = 1.0
    # "constant", or "cosine": constant until decay_start, then cosine to zero at the last step
    lr_schedule: str = "constant"
    decay_start: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise InvalidParamsError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidParamsError("steps must be >= 0 and batch size, learning rate positive")
        if self.lr_schedule not in ("constant", "cosine") or self.decay_start < 0:
            raise InvalidParamsError(f"bad learning-rate schedule {self.lr_schedule!r} from step {self.decay_start}")
        allowed = {"gen_body": L.BODY_TERMS, "gen_head": L.BODY_TERMS,
                   "gen_face_refine": L.FACE_REQUIRED + L.FACE_OPTIONAL}.get(self.stage, ())
        bad = [k for k in self.loss_weights if k not in allowed]
        if bad:
            raise InvalidParamsError(f"loss weights {bad} do not apply to stage {self.stage}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise InvalidParamsError("loss weights must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def fingerprint(self):
        return fingerprint(self.to_dict())

    def weights(self):
        base = FACE_WEIGHTS if self.stage == "gen_face_refine" else GEN_WEIGHTS
        w = dict(base)
        w.update(self.loss_weights)
        return w


def model_spec(stage, model_overrides):
    """Stage plus full model dimensions; its fingerprint guards checkpoint loading."""
    return {"stage": stage, "model": build_model_config(stage, model_overrides)}


def build_model_config(stage, overrides):
    o = dict(overrides or {})
    if stage == "a2m_face":
        return a2m.FaceModelConfig(**o).to_dict()
    if stage == "a2m_body":
        if "app_size" in o:
            o["app_size"] = tuple(o["app_size"])
        return a2m.BodyModelConfig(**o).to_dict()
    if stage == "gen_face_refine":
        return {"crop": int(o.get("crop", 64))}
    if "dec_channels" in o:
        o["dec_channels"] = tuple(o["dec_channels"])
    if stage == "gen_head":
        o.setdefault("mode", "head")
        o.setdefault("height", 128)
        o.setdefault("width", 128)
        o.setdefault("hand_injection", False)
    return vg.GeneratorConfig(**o).to_dict()


def build_model(spec):
    stage, cfg = spec["stage"], dict(spec["model"])
    if stage == "a2m_face":
        return a2m.FaceDenoiser(a2m.FaceModelConfig(**cfg))
    if stage == "a2m_body":
        cfg["app_size"] = tuple(cfg["app_size"])
        return a2m.BodyDenoiser(a2m.BodyModelConfig(**cfg))
    if stage == "gen_face_refine":
        return vg.FaceRefiner(cfg["crop"])
    cfg["dec_channels"] = tuple(cfg["dec_channels"])
    return vg.PortraitGenerator(vg.GeneratorConfig(**cfg))


# --------------------------------------------------------------------------
# determinism and checkpoints
# --------------------------------------------------------------------------

@contextmanager
def deterministic_mode(threads=1):
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


@dataclass
class Checkpoint:
    spec: dict
    state: dict
    step: int
    rng_state: dict
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return fingerprint(self.spec)

    def model(self):
        m = build_model(self.spec)
        m.load_state_dict(self.state)
        m.eval()
        return m


def _capture_rng(torch_gen, np_rng):
    return {"torch": torch_gen.get_state().clone(), "numpy": copy.deepcopy(np_rng.bit_generator.state)}


def save_checkpoint(ckpt, path):
    """Magic, payload length, payload, sha256 of the payload. Written atomically."""
    buf = io.BytesIO()
    torch.save({"spec": ckpt.spec, "fingerprint": ckpt.fingerprint, "state": ckpt.state,
                "step": ckpt.step, "rng_state": ckpt.rng_state, "extra": ckpt.extra}, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_spec=None, stage=None):
    """Read and verify a checkpoint; ``expected_spec`` (or a fingerprint string) must match."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) != start + n + 32:
        raise CheckpointError(f"{path}: truncated or padded checkpoint")
    payload = data[start:start + n]
    if hashlib.sha256(payload).digest() != data[start + n:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    obj = torch.load(io.BytesIO(payload), weights_only=False)
    ckpt = Checkpoint(obj["spec"], obj["state"], int(obj["step"]), obj["rng_state"], obj.get("extra", {}))
    if ckpt.fingerprint != obj["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint does not match its model spec")
    if expected_spec is not None:
        want = expected_spec if isinstance(expected_spec, str) else fingerprint(expected_spec)
        if want != ckpt.fingerprint:
            raise CheckpointError(f"{path}: config fingerprint mismatch")
    if stage is not None and ckpt.spec["stage"] != stage:
        raise CheckpointError(f"{path}: holds a {ckpt.spec['stage']} model, expected {stage}")
    return ckpt


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

def training_clips(config, render=True):
    """Clips for ``config.train_seeds``; a seed may be an int or a ``(content, style)`` pair."""
    out = []
    for s in config.train_seeds:
        seed, style = (s, None) if isinstance(s, int) else s
        out.append(synth.make_clip(seed, config.clip_seconds, style_seed=style, render=render))
    return out


@dataclass
class FaceChunks:
    motion: np.ndarray      # (N, L, F)
    audio: np.ndarray       # (N, L, D)
    history: np.ndarray     # (N, H, F)
    reference: np.ndarray   # (N, L_ref, F)
    style: np.ndarray       # (N, 2)
    has_history: np.ndarray  # (N,) bool
    clip_mean: np.ndarray   # (N, n_expr) temporal mean of the clip's expression


def face_chunks(clips, chunk=30, history=10):
    """Consecutive chunks; history is the previous chunk's tail (zeros first), reference the other chunks."""
    rows = {k: [] for k in FaceChunks.__dataclass_fields__}
    for clip in clips:
        arr = clip.face.to_array()
        n = len(clip) // chunk
        if n < 2:
            raise InvalidParamsError("need at least two chunks per clip for references")
        for k in range(n):
            x = arr[k * chunk:(k + 1) * chunk]
            rows["motion"].append(x)
            rows["audio"].append(clip.audio.frames[k * chunk:(k + 1) * chunk])
            rows["history"].append(np.zeros((history, arr.shape[1])) if k == 0
                                   else arr[k * chunk - history:k * chunk])
            ref_k = (k + 1) % n
            rows["reference"].append(arr[ref_k * chunk:(ref_k + 1) * chunk])
            rows["style"].append(style_ranges(MotionChunk.from_array(x, clip.face.n_expr)))
            rows["has_history"].append(k > 0)
            rows["clip_mean"].append(clip.face.expr.mean(axis=0))
    return FaceChunks(**{k: np.asarray(v) for k, v in rows.items()})


def augment_style(data, idx, rng, p, n_expr):
    """Random gain on non-mouth expression deviations, applied consistently to x, history, reference."""
    x = data.motion[idx].copy()
    hist = data.history[idx].copy()
    ref = data.reference[idx].copy()
    style = data.style[idx].copy()
    chans = [c for c in range(n_expr) if c not in mr.MOUTH_CHANNELS]
    for b in range(len(idx)):
        if rng.random() >= p:
            continue
        g = rng.uniform(0.0, 2.0)
        mu = data.clip_mean[idx[b], chans]
        for arr, ok in ((x, True), (ref, True), (hist, data.has_history[idx[b]])):
            if ok:
                arr[b][:, chans] = np.clip(mu + g * (arr[b][:, chans] - mu), 0.0, 1.0)
        style[b] = style_ranges(MotionChunk.from_array(x[b], n_expr))
    return x, hist, ref, style


@dataclass
class BodyChunks:
    motion: np.ndarray       # (N, L, flat)
    face_kp: np.ndarray      # (N, L, 3 N_h)
    audio: np.ndarray        # (N, L, D)
    appearance: np.ndarray   # (N, 3, H, W) source frame of the chunk's clip


def body_chunks(clips, chunk=30):
    rows = {k: [] for k in BodyChunks.__dataclass_fields__}
    for clip in clips:
        flat = clip.body.to_flat()
        kp = clip.head_explicit().reshape(len(clip), -1)
        for k in range(len(clip) // chunk):
            sl = slice(k * chunk, (k + 1) * chunk)
            rows["motion"].append(flat[sl])
            rows["face_kp"].append(kp[sl])
            rows["audio"].append(clip.audio.frames[sl])
            rows["appearance"].append(np.transpose(clip.frames[0], (2, 0, 1)))
    return BodyChunks(**{k: np.asarray(v) for k, v in rows.items()})


@dataclass
class FrameData:
    """Per-frame tensors for generator training, indexed ``[clip, frame]``."""

    frames: torch.Tensor      # (N, T, 3, H, W)
    head: torch.Tensor        # (N, T, N_h, 3) explicit head keypoints with offsets
    delta: torch.Tensor       # (N, T, k, 3)
    scale: torch.Tensor       # (N, T)
    trans: torch.Tensor       # (N, T, 3)
    body2d: torch.Tensor      # (N, T, k, 2) normalized image coordinates of true body keypoints
    hand: Optional[torch.Tensor]       # (N, T, 4, H, W)
    hand_mask: Optional[torch.Tensor]  # (N, T, 1, H, W)


def _f32(x):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def frame_data(clips, mode="body"):
    cfg = clips[0].config
    if mode == "body":
        cam, size = cfg.body_camera(), (cfg.height, cfg.width)
    else:
        cam, size = cfg.head_camera(), (cfg.head_size, cfg.head_size)
    out = {k: [] for k in FrameData.__dataclass_fields__}
    for clip in clips:
        frames = clip.frames if mode == "body" else clip.head_frames()
        out["frames"].append(np.transpose(frames, (0, 3, 1, 2)))
        out["head"].append(clip.head_keypoints())
        out["delta"].append(clip.body.deformation)
        out["scale"].append(clip.body.scale)
        out["trans"].append(clip.body.translation)
        body = clip.body_keypoints()
        out["body2d"].append(cam.to_normalized(body, size[1], size[0])[..., :2])
        if mode == "body":
            hands, masks = [], []
            for i in range(len(clip)):
                ctrl = mr.render_hand_control(clip.body.hands(i), cam, size)
                hands.append(np.concatenate([ctrl.pixels * ctrl.mask[..., None], ctrl.mask[..., None]], -1))
                masks.append(hand_region(ctrl.mask))
            out["hand"].append(np.transpose(np.stack(hands), (0, 3, 1, 2)))
            out["hand_mask"].append(np.stack(masks)[:, None])
    return FrameData(**{k: (_f32(np.stack(v)) if v else None) for k, v in out.items()})


def hand_region(mask, dilate=2):
    from scipy.ndimage import binary_dilation
    m = np.asarray(mask).astype(bool)
    return binary_dilation(m, iterations=dilate).astype(np.float32) if m.any() else m.astype(np.float32)


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: torch.nn.Module
    curve: list
    extra: dict = field(default_factory=dict)


class _Logger:
    def __init__(self, path, every):
        self.path = Path(path) if path else None
        self.every = max(1, int(every))
        self.fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.path, "w")
        self.t0 = time.perf_counter()

    def write(self, step, terms):
        if self.fh and step % self.every == 0:
            rec = {"step": step, "wall_clock": round(time.perf_counter() - self.t0, 4)}
            rec.update(L.scalar_terms(terms))
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _finite_or_abort(value, step, last, ckpt_dir):
    if not np.isfinite(value):
        path = None
        if last is not None and ckpt_dir:
            path = save_checkpoint(last, Path(ckpt_dir) / f"last_finite_{last.step:07d}.ckpt")
        err = NonFiniteError(f"non-finite loss at step {step}", step=step)
        err.last_checkpoint = last
        err.last_checkpoint_path = path
        raise err


def _snapshot(spec, model, step, gen, rng, extra=None):
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(spec, state, step, _capture_rng(gen, rng), dict(extra or {}))


def train(config, clips=None, log_path=None, ckpt_dir=None, model=None, nan_hook=None):
    """Run one stage. Returns a :class:`TrainResult` with the final checkpoint and loss curve.

    ``nan_hook(step, loss)`` may replace the loss value (used to exercise the abort path).
    """
    config.validate()
    spec = model_spec(config.stage, config.model)
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(spec)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if clips is None and config.steps > 0:
        clips = training_clips(config)
    runner = {"a2m_face": _face_loop, "a2m_body": _body_loop, "gen_body": _gen_loop,
              "gen_head": _gen_loop, "gen_face_refine": _refine_loop}[config.stage]
    logger = _Logger(log_path, config.log_every)
    try:
        curve, extra = runner(config, spec, model, clips, gen, rng, logger, ckpt_dir, nan_hook)
    finally:
        logger.close()
    model.eval()
    ckpt = _snapshot(spec, model, config.steps, gen, rng, extra)
    if ckpt_dir:
        save_checkpoint(ckpt, Path(ckpt_dir) / f"{config.stage}_final.ckpt")
    return TrainResult(ckpt, model, curve, extra)


def _step_bookkeeping(config, spec, model, step, value, terms, gen, rng, logger, ckpt_dir, state):
    _finite_or_abort(value, step, state.get("last"), ckpt_dir)
    logger.write(step, terms)
    if (step + 1) % config.checkpoint_every == 0:
        state["last"] = _snapshot(spec, model, step + 1, gen, rng)
        if ckpt_dir:
            save_checkpoint(state["last"], Path(ckpt_dir) / f"{config.stage}_{step + 1:07d}.ckpt")


def lr_factor(config, step):
    """Multiplier on the base learning rate for optimizer step ``step`` (0-based)."""
    if config.lr_schedule == "constant" or step < config.decay_start:
        return 1.0
    span = max(config.steps - config.decay_start, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - config.decay_start) / span))


def _set_lr(config, step, *opts):
    f = lr_factor(config, step)
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = group.setdefault("initial_lr", group["lr"]) * f


def _face_loop(config, spec, model, clips, gen, rng, logger, ckpt_dir, nan_hook):
    if config.steps == 0:
        return [], {}
    cfg = model.config
    data = face_chunks(clips, cfg.chunk, cfg.history)
    model.fit_normalization(data.motion.reshape(-1, cfg.feat_dim), data.style)
    sched = build_schedule()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    curve, state = [], {"last": _snapshot(spec, model, 0, gen, rng)}
    n = data.motion.shape[0]
    for step in range(config.steps):
        idx = rng.integers(0, n, config.batch_size)
        x, hist, ref, style = augment_style(data, idx, rng, config.style_gain_p, cfg.n_expr)
        keep_ref = config.reference_dropout < 1.0 and rng.random() >= config.reference_dropout
        c = ConditionBundle(audio=_f32(data.audio[idx]), history=_f32(hist), style=_f32(style),
                            reference=_f32(ref) if keep_ref else None)
        loss = denoise_loss(model, model.norm(_f32(x)), c, sched, gen)
        value = float(loss.detach()) if nan_hook is None else nan_hook(step, float(loss.detach()))
        _step_bookkeeping(config, spec, model, step, value, {"eps": value}, gen, rng, logger, ckpt_dir, state)
        opt.zero_grad()
        loss.backward()
        _set_lr(config, step, opt)
        opt.step()
        curve.append({"eps": value})
    return curve, {}


def _body_loop(config, spec, model, clips, gen, rng, logger, ckpt_dir, nan_hook):
    if config.steps == 0:
        return [], {}
    data = body_chunks(clips, model.config.chunk)
    model.fit_normalization(data.motion.reshape(-1, model.config.feat_dim),
                            data.face_kp.reshape(-1, data.face_kp.shape[-1]))
    sched = build_schedule()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    curve, state = [], {"last": _snapshot(spec, model, 0, gen, rng)}
    motion, kp, aud, app = (_f32(a) for a in (data.motion, data.face_kp, data.audio, data.appearance))
    n = motion.shape[0]
    for step in range(config.steps):
        idx = torch.as_tensor(rng.integers(0, n, config.batch_size))
        c = ConditionBundle(audio=aud[idx], face_keypoints=kp[idx], appearance=app[idx])
        loss = denoise_loss(model, model.norm(motion[idx]), c, sched, gen)
        value = float(loss.detach()) if nan_hook is None else nan_hook(step, float(loss.detach()))
        _step_bookkeeping(config, spec, model, step, value, {"eps": value}, gen, rng, logger, ckpt_dir, state)
        opt.zero_grad()
        loss.backward()
        _set_lr(config, step, opt)
        opt.step()
        curve.append({"eps": value})
    return curve, {}


class GenLossState:
    """Frozen perceptual features and the discriminator for a generator run."""

    def __init__(self, seed):
        self.features = L.FeatureStack(seed)
        torch.manual_seed(seed + 1)
        self.disc = L.PatchDiscriminator()


def gen_terms(model, batch, feats, disc, rng, weights):
    """All body-mode loss terms for one batch; returns (terms dict, prediction)."""
    src, tgt, head_s, head_d, delta_d, s_d, t_d, body2d_s, body2d_d, hand, hand_mask = batch
    cfg = model.config
    volume = model.extract_appearance(src)
    terms = {}
    if cfg.mode == "body":
        det = model.detect_motion(src)
        pred, _, _ = model(src, head_s, head_d, (delta_d, s_d, t_d), cond=hand, volume=volume, detected=det)
        ns, no = model.nscale[:2], model.noffset[:2]
        src_2d = det.source_keypoints()[..., :2] * ns + no
        drv = s_d[:, None, None] * (det.canonical + delta_d) + t_d[:, None]
        drv_2d = drv[..., :2] * ns + no
        terms["lms"] = 0.5 * (L.landmark_loss(src_2d, body2d_s) + L.landmark_loss(drv_2d, body2d_d))

        def detect2d(img):
            return model.detect_motion(img).source_keypoints()[..., :2] * ns + no

        terms["E"] = L.equivariance_loss(detect2d, src, rng) if weights.get("E", 1.0) > 0 else pred.sum() * 0
        terms["L"], terms["D"] = L.prior_losses(det.canonical, det.deformation)
    else:
        pred, _, _ = model(src, head_s, head_d, volume=volume)
        zero = pred.sum() * 0
        terms.update(lms=zero, E=zero, L=zero, D=zero)
    per, rec, gan, per_hand = L.image_losses(feats, pred, tgt, hand_mask if hand_mask is not None else None,
                                             disc if weights.get("GAN", 1.0) > 0 else None)
    terms.update(Per=per, Recon=rec, GAN=gan, Per_hand=per_hand if hand_mask is not None else pred.sum() * 0)
    return terms, pred


def _gen_batch(data, idx_clip, idx_src, idx_drv, use_hand):
    return (data.frames[idx_clip, idx_src], data.frames[idx_clip, idx_drv],
            data.head[idx_clip, idx_src], data.head[idx_clip, idx_drv],
            data.delta[idx_clip, idx_drv], data.scale[idx_clip, idx_drv], data.trans[idx_clip, idx_drv],
            data.body2d[idx_clip, idx_src], data.body2d[idx_clip, idx_drv],
            data.hand[idx_clip, idx_drv] if use_hand and data.hand is not None else None,
            data.hand_mask[idx_clip, idx_drv] if data.hand_mask is not None else None)


def _gen_loop(config, spec, model, clips, gen, rng, logger, ckpt_dir, nan_hook):
    if config.steps == 0:
        return [], {}
    mode = "body" if config.stage == "gen_body" else "head"
    data = frame_data(clips, mode)
    weights = config.weights()
    ls = GenLossState(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(ls.disc.parameters(), lr=config.learning_rate * config.disc_lr_scale,
                             betas=(0.5, 0.999))
    model.train()
    use_hand = model.config.hand_injection
    curve, state = [], {"last": _snapshot(spec, model, 0, gen, rng)}
    n_clip, n_frame = data.frames.shape[:2]
    loss_mode = "body"
    for step in range(config.steps):
        ic = torch.as_tensor(rng.integers(0, n_clip, config.batch_size))
        isrc = torch.as_tensor(rng.integers(0, n_frame, config.batch_size))
        same = rng.random(config.batch_size) < config.same_frame_p
        idrv = torch.where(torch.as_tensor(same), isrc, torch.as_tensor(rng.integers(0, n_frame, config.batch_size)))
        batch = _gen_batch(data, ic, isrc, idrv, use_hand)
        terms, pred = gen_terms(model, batch, ls.features, ls.disc, rng, weights)
        report = L.total_loss(terms, weights, loss_mode) if all(np.isfinite(list(L.scalar_terms(terms).values()))) \
            else None
        value = float(report.total.detach()) if report is not None else float("nan")
        if nan_hook is not None:
            value = nan_hook(step, value)
        _step_bookkeeping(config, spec, model, step, value, {**L.scalar_terms(terms), "total": value},
                          gen, rng, logger, ckpt_dir, state)
        opt.zero_grad()
        report.total.backward()
        _set_lr(config, step, opt, opt_d)
        opt.step()
        if weights.get("GAN", 1.0) > 0:
            d_loss = L.gan_discriminator_loss(ls.disc, batch[1], pred)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        curve.append({**L.scalar_terms(terms), "total": value})
    return curve, {}


@dataclass
class CropData:
    crops: torch.Tensor      # (N, T, 3, S, S) face crops of each frame
    kp: torch.Tensor         # (N, T, N_h, 3) normalized crop keypoints
    mask: torch.Tensor       # (N, T, 1, S, S) dilated face masks
    boxes: np.ndarray        # (N, T, 2) crop top/left


def crop_data(clips, size=64):
    cfg = clips[0].config
    cam = cfg.body_camera()
    out = {"crops": [], "kp": [], "mask": [], "boxes": []}
    for clip in clips:
        heads = clip.head_keypoints()
        c_list, k_list, m_list, b_list = [], [], [], []
        for i in range(len(clip)):
            box = vg.face_box(heads[i], cam, size, cfg.height, cfg.width)
            crop, kp, mask = vg.crop_inputs(clip.frames[i], heads[i], box, cam)
            c_list.append(np.transpose(crop, (2, 0, 1)))
            k_list.append(kp)
            m_list.append(mask[None].astype(np.float32))
            b_list.append((box.top, box.left))
        out["crops"].append(c_list)
        out["kp"].append(k_list)
        out["mask"].append(m_list)
        out["boxes"].append(b_list)
    return CropData(_f32(np.array(out["crops"])), _f32(np.array(out["kp"])), _f32(np.array(out["mask"])),
                    np.array(out["boxes"]))


def refine_terms(refiner, src, kp_s, kp_d, tgt, mask, feats, disc):
    background = vg.condition_image(tgt, 1.0 - mask)
    pred = refiner.render_crop(src, kp_s, kp_d, background)
    per, rec, gan, per_face = L.image_losses(feats, pred, tgt, mask, disc)
    return {"Per": per, "GAN": gan, "Recon": rec, "Per_face": per_face}, pred


def _refine_loop(config, spec, model, clips, gen, rng, logger, ckpt_dir, nan_hook):
    if config.steps == 0:
        return [], {}
    data = crop_data(clips, model.crop)
    weights = config.weights()
    ls = GenLossState(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(ls.disc.parameters(), lr=config.learning_rate * config.disc_lr_scale,
                             betas=(0.5, 0.999))
    model.train()
    curve, state = [], {"last": _snapshot(spec, model, 0, gen, rng)}
    n_clip, n_frame = data.crops.shape[:2]
    use_disc = weights.get("GAN", 1.0) > 0
    for step in range(config.steps):
        ic = torch.as_tensor(rng.integers(0, n_clip, config.batch_size))
        isrc = torch.as_tensor(rng.integers(0, n_frame, config.batch_size))
        same = rng.random(config.batch_size) < config.same_frame_p
        idrv = torch.where(torch.as_tensor(same), isrc, torch.as_tensor(rng.integers(0, n_frame, config.batch_size)))
        tgt = data.crops[ic, idrv]
        terms, pred = refine_terms(model, data.crops[ic, isrc], data.kp[ic, isrc], data.kp[ic, idrv], tgt,
                                   data.mask[ic, idrv], ls.features, ls.disc if use_disc else None)
        report = L.total_loss(terms, weights, "face")
        value = float(report.total.detach()) if nan_hook is None else nan_hook(step, float(report.total.detach()))
        _step_bookkeeping(config, spec, model, step, value, {**L.scalar_terms(terms), "total": value},
                          gen, rng, logger, ckpt_dir, state)
        opt.zero_grad()
        report.total.backward()
        _set_lr(config, step, opt, opt_d)
        opt.step()
        if use_disc:
            d_loss = L.gan_discriminator_loss(ls.disc, tgt, pred)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        curve.append({**L.scalar_terms(terms), "total": value})
    return curve, {}
