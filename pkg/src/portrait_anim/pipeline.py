"""Streaming inference: chunked audio -> face motion -> body motion -> frames.

Stages run in their own threads and talk through bounded blocking queues, so
a slow consumer stalls its producers instead of dropping work. Every stage is
a pure function of (parameters, inputs, per-chunk seed), which makes the
threaded output identical to :func:`run_sequential`.
"""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import audio2motion as a2m
from . import metrics
from . import motion_repr as mr
from . import video_gen as vg
from .audio import AudioFeatureSeq
from .diffusion import build_schedule
from .errors import CheckpointError, InvalidParamsError, SplitContaminationError
from .records import dump_json, write_ppm
from .sequences import BodyMotionOutput, MotionChunk, StyleControl

MODES = ("upper_body", "head_only")


@dataclass(frozen=True)
class StreamConfig:
    chunk_frames: int = 30
    history_frames: int = 10
    fps_target: int = 30
    queue_capacity: int = 2
    mode: str = "upper_body"
    steps: int = 50
    seed: int = 0
    refine: bool = True
    frame_batch: int = 8            # frames rendered per generator call; bounds peak memory

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParamsError(f"unknown stream mode {self.mode!r}")
        for name in ("chunk_frames", "history_frames", "fps_target", "queue_capacity", "steps", "frame_batch"):
            if getattr(self, name) < 1:
                raise InvalidParamsError(f"{name} must be positive")
        if self.history_frames > self.chunk_frames:
            raise InvalidParamsError("history cannot be longer than a chunk")


@dataclass
class StreamStats:
    frames_emitted: int = 0
    stage_latency_ms: dict = field(default_factory=dict)
    achieved_fps: float = 0.0
    drops: int = 0
    timestamps: list = field(default_factory=list)
    wall_seconds: float = 0.0
    appearance_extractions: int = 0
    history_log: list = field(default_factory=list)

    def summary(self):
        lat = {k: {"mean": float(np.mean(v)), "max": float(np.max(v)),
                   "p50": float(np.percentile(v, 50)), "p95": float(np.percentile(v, 95))}
               for k, v in self.stage_latency_ms.items() if v}
        return {"frames_emitted": self.frames_emitted, "achieved_fps": self.achieved_fps,
                "drops": self.drops, "wall_seconds": self.wall_seconds, "stage_latency_ms": lat,
                "appearance_extractions": self.appearance_extractions}


@dataclass
class ModelBundle:
    """Trained networks for one session. ``head_generator`` serves head-only mode."""

    face: Optional[torch.nn.Module] = None
    body: Optional[torch.nn.Module] = None
    generator: Optional[torch.nn.Module] = None
    refiner: Optional[torch.nn.Module] = None
    head_generator: Optional[torch.nn.Module] = None
    rig: Optional[mr.HeadRig] = None
    sched: object = None

    def check(self, mode):
        need = {"upper_body": ("face", "body", "generator"), "head_only": ("face", "head_generator")}[mode]
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            raise CheckpointError(f"{mode} streaming needs models: {missing}")
        if mode == "upper_body" and self.generator.config.mode != "body":
            raise CheckpointError("upper-body streaming needs a body-mode generator")
        if mode == "head_only" and self.head_generator.config.mode != "head":
            raise CheckpointError("head-only streaming needs a head-mode generator")
        if self.rig is None:
            self.rig = mr.build_head_rig(0, self.face.config.n_expr)
        if self.sched is None:
            self.sched = build_schedule()
        return self


# --------------------------------------------------------------------------
# sinks
# --------------------------------------------------------------------------

class ListSink:
    def __init__(self):
        self.frames = []
        self.timestamps = []
        self.closed = False

    def write(self, index, timestamp, frame):
        self.frames.append(frame)
        self.timestamps.append(timestamp)

    def close(self):
        self.closed = True


class NullSink:
    def __init__(self):
        self.count = 0

    def write(self, index, timestamp, frame):
        self.count += 1

    def close(self):
        pass


class DirectorySink:
    """Numbered PPM files plus a JSON index written on close."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.entries = []

    def write(self, index, timestamp, frame):
        name = f"{index:06d}.ppm"
        write_ppm(self.dir / name, frame)
        self.entries.append({"index": index, "timestamp": timestamp, "file": name})

    def close(self):
        dump_json({"frames": self.entries}, self.dir / "index.json")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def chunk_seed(seed, index, stage):
    return int(np.random.SeedSequence([seed, index, stage]).generate_state(1)[0])


@dataclass
class Session:
    """Per-source state computed once: appearance volume, detection, appearance tokens."""

    source: np.ndarray
    source_head: np.ndarray
    volume: torch.Tensor
    detected: Optional[vg.DetectedMotion]
    app_tokens: Optional[torch.Tensor]
    camera: mr.Camera


def _img(x):
    return torch.tensor(np.asarray(x), dtype=torch.float32).permute(2, 0, 1)[None].contiguous()


@torch.no_grad()
def open_session(models, source, source_head, mode):
    gen = models.generator if mode == "upper_body" else models.head_generator
    src = _img(source)
    volume = gen.extract_appearance(src)
    detected = gen.detect_motion(src) if mode == "upper_body" else None
    tokens = models.body.appearance_tokens(src) if mode == "upper_body" else None
    return Session(np.asarray(source), np.asarray(source_head), volume, detected, tokens, gen.config.camera())


def face_stage(models, cfg, audio_chunk, history, style, index):
    return a2m.generate_face_motion(models.face, audio_chunk, history, style, models.sched, cfg.steps,
                                    seed=chunk_seed(cfg.seed, index, 0))


def body_stage(models, cfg, session, face, audio_chunk, index):
    if cfg.mode == "head_only":
        return None
    return a2m.generate_upper_body(models.body, face, audio_chunk, session.app_tokens, models.sched,
                                   models.rig, cfg.steps, seed=chunk_seed(cfg.seed, index, 1))


@torch.no_grad()
def frame_stage(models, cfg, session, face, body):
    """Render every frame of a chunk; returns ``(L, H, W, 3)`` float32 in [0, 1]."""
    head = mr.project_head_batch(face.expr, face.pose, models.rig)
    if body is not None:
        head = head + body.head_offsets
    out = [_render_frames(models, cfg, session, head, body, sl)
           for sl in (slice(a, a + cfg.frame_batch) for a in range(0, len(face), cfg.frame_batch))]
    return np.concatenate(out, axis=0).astype(np.float32)


def _render_frames(models, cfg, session, head, body, sl):
    head = head[sl]
    n = head.shape[0]
    if cfg.mode == "head_only":
        gen = models.head_generator
        kp_s = torch.tensor(session.source_head, dtype=torch.float32)[None].expand(n, -1, -1)
        kp_d = torch.tensor(head, dtype=torch.float32)
        warp = gen.estimate_warp(kp_s, kp_d, session.volume.expand(n, -1, -1, -1, -1))
        out = gen.generate_frame(session.volume.expand(n, -1, -1, -1, -1), warp)
        return out.permute(0, 2, 3, 1).numpy()
    gen = models.generator
    det = session.detected
    kp_s = torch.cat([torch.tensor(session.source_head, dtype=torch.float32)[None],
                      det.source_keypoints()], dim=1).expand(n, -1, -1)
    delta = torch.tensor(body.deformation[sl], dtype=torch.float32)
    s = torch.tensor(body.scale[sl], dtype=torch.float32)
    t = torch.tensor(body.translation[sl], dtype=torch.float32)
    body_kp = s[:, None, None] * (det.canonical + delta) + t[:, None]
    kp_d = torch.cat([torch.tensor(head, dtype=torch.float32), body_kp], dim=1)
    vol = session.volume.expand(n, -1, -1, -1, -1)
    warp = gen.estimate_warp(kp_s, kp_d, vol)
    cond = None
    if gen.config.hand_injection:
        size = (gen.config.height, gen.config.width)
        idx = range(sl.start, sl.start + n)
        cond = vg.hand_condition([body.hands(i) for i in idx], session.camera, size)
    frames = gen.generate_frame(vol, warp, cond).permute(0, 2, 3, 1).double().numpy()
    if cfg.refine and models.refiner is not None:
        frames = np.stack([vg.refine_face(models.refiner, frames[i], session.source, session.source_head,
                                          head[i], session.camera) for i in range(n)])
    return frames


def audio_chunks(audio, chunk):
    frames = audio.frames if isinstance(audio, AudioFeatureSeq) else np.asarray(audio)
    for start in range(0, frames.shape[0], chunk):
        yield AudioFeatureSeq(frames[start:start + chunk])


def roll_history(history, chunk, h):
    joined = np.concatenate([history.to_array(), chunk.to_array()], axis=0)[-h:]
    return MotionChunk.from_array(joined, history.n_expr)


def _initial_history(models, cfg):
    return MotionChunk.zeros(cfg.history_frames, models.face.config.n_expr)


# --------------------------------------------------------------------------
# orchestrators
# --------------------------------------------------------------------------

def run_sequential(source, source_head, audio, style, models, cfg=None):
    """Single-call reference: the same stages, one after another, no threads."""
    cfg = cfg or StreamConfig()
    models.check(cfg.mode)
    session = open_session(models, source, source_head, cfg.mode)
    history = _initial_history(models, cfg)
    out, histories = [], []
    for n, chunk in enumerate(audio_chunks(audio, cfg.chunk_frames)):
        histories.append(history.to_array())
        face = face_stage(models, cfg, chunk, history, style, n)
        history = roll_history(history, face.clamped(), cfg.history_frames)
        body = body_stage(models, cfg, session, face, chunk, n)
        out.append(frame_stage(models, cfg, session, face, body))
    return np.concatenate(out, axis=0), histories


class _Stop:
    pass


_END = _Stop()


def run_stream(source, source_head, audio, style, models, cfg=None, sink=None):
    """Threaded four-stage pipeline. Returns ``(sink, StreamStats)``; stage errors are re-raised
    after the queues are drained and stats are final."""
    cfg = cfg or StreamConfig()
    models.check(cfg.mode)
    sink = sink if sink is not None else ListSink()
    stats = StreamStats(stage_latency_ms={"chunker": [], "face": [], "body": [], "frames": []})
    t_start = time.perf_counter()
    session = open_session(models, source, source_head, cfg.mode)
    stats.appearance_extractions = 1
    cap = cfg.queue_capacity
    q_audio, q_face, q_body = (queue.Queue(maxsize=cap) for _ in range(3))
    stop = threading.Event()
    errors = []

    def put(q, item):
        while True:
            if stop.is_set() and item is not _END:
                return False
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                if stop.is_set():
                    return False

    def get(q):
        while True:
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if stop.is_set():
                    return _END

    def chunker():
        try:
            for n, chunk in enumerate(audio_chunks(audio, cfg.chunk_frames)):
                t0 = time.perf_counter()
                if not put(q_audio, (n, chunk)):
                    return
                stats.stage_latency_ms["chunker"].append(1e3 * (time.perf_counter() - t0))
        except Exception as exc:      # noqa: BLE001 - forwarded to the caller
            errors.append(exc)
            stop.set()
        finally:
            put(q_audio, _END)

    def face_worker():
        history = _initial_history(models, cfg)
        try:
            while True:
                item = get(q_audio)
                if item is _END:
                    return
                n, chunk = item
                t0 = time.perf_counter()
                stats.history_log.append(history.to_array())
                face = face_stage(models, cfg, chunk, history, style, n)
                history = roll_history(history, face.clamped(), cfg.history_frames)
                stats.stage_latency_ms["face"].append(1e3 * (time.perf_counter() - t0))
                if not put(q_face, (n, chunk, face)):
                    return
        except Exception as exc:      # noqa: BLE001
            errors.append(exc)
            stop.set()
        finally:
            put(q_face, _END)

    def body_worker():
        try:
            while True:
                item = get(q_face)
                if item is _END:
                    return
                n, chunk, face = item
                t0 = time.perf_counter()
                body = body_stage(models, cfg, session, face, chunk, n)
                stats.stage_latency_ms["body"].append(1e3 * (time.perf_counter() - t0))
                if not put(q_body, (n, face, body)):
                    return
        except Exception as exc:      # noqa: BLE001
            errors.append(exc)
            stop.set()
        finally:
            put(q_body, _END)

    threads = [threading.Thread(target=fn, daemon=True) for fn in (chunker, face_worker, body_worker)]
    for th in threads:
        th.start()
    expected = 0
    try:
        while True:
            item = get(q_body)
            if item is _END:
                break
            n, face, body = item
            if n != expected:
                raise RuntimeError(f"chunk {n} arrived out of order (expected {expected})")
            expected += 1
            t0 = time.perf_counter()
            frames = frame_stage(models, cfg, session, face, body)
            stats.stage_latency_ms["frames"].append(1e3 * (time.perf_counter() - t0))
            for frame in frames:
                idx = stats.frames_emitted
                ts = idx / cfg.fps_target
                sink.write(idx, ts, frame)
                stats.timestamps.append(ts)
                stats.frames_emitted += 1
    except Exception as exc:          # noqa: BLE001
        errors.append(exc)
        stop.set()
    finally:
        stop.set()
        for q in (q_audio, q_face, q_body):
            while True:
                try:
                    q.get_nowait()
                except queue.Empty:
                    break
        for th in threads:
            th.join()
        sink.close()
        stats.wall_seconds = time.perf_counter() - t_start
        stats.achieved_fps = stats.frames_emitted / max(stats.wall_seconds, 1e-9)
        if not errors:
            stats.drops = len(audio) - stats.frames_emitted
    if errors:
        raise errors[0]
    return sink, stats


# --------------------------------------------------------------------------
# benchmark and evaluation
# --------------------------------------------------------------------------

def random_models(resolution="desk", mode="upper_body", seed=0, refine=True):
    """Freshly initialized networks; throughput does not depend on parameter values."""
    torch.manual_seed(seed)
    face = a2m.FaceDenoiser().eval()
    bundle = ModelBundle(face=face, rig=mr.build_head_rig(0))
    if mode == "upper_body":
        gcfg = vg.GeneratorConfig() if resolution == "desk" else vg.paper_resolution("body")
        bundle.generator = vg.PortraitGenerator(gcfg).eval()
        bundle.body = a2m.BodyDenoiser().eval()
        bundle.refiner = vg.FaceRefiner(64 if resolution == "desk" else 256).eval() if refine else None
    else:
        gcfg = vg.GeneratorConfig(mode="head", height=128, width=128, hand_injection=False) \
            if resolution == "desk" else vg.paper_resolution("head", hand_injection=False)
        bundle.head_generator = vg.PortraitGenerator(gcfg).eval()
    return bundle


def benchmark(cfg=None, duration_s=10.0, resolution="desk", models=None, seed=0):
    """Stream ``duration_s`` seconds of synthetic audio features through the pipeline and time it."""
    cfg = cfg or StreamConfig()
    if resolution == "paper":
        # a 512x768 chunk of 8 frames does not fit in a few GB of memory
        cfg = replace(cfg, frame_batch=min(cfg.frame_batch, 2))
    models = models or random_models(resolution, cfg.mode, seed, cfg.refine)
    models.check(cfg.mode)
    n = int(round(duration_s * cfg.fps_target))
    feats = np.random.default_rng(seed).standard_normal((n, models.face.config.audio_dim))
    gen = models.generator if cfg.mode == "upper_body" else models.head_generator
    H, W = gen.config.height, gen.config.width
    source = np.full((H, W, 3), 0.5)
    src_head = mr.build_head_rig(0).mean_keypoints
    cam = gen.config.camera()
    _, stats = run_stream(source, src_head, AudioFeatureSeq(feats), StyleControl(0.1, 0.01), models, cfg,
                          NullSink())
    out = stats.summary()
    out.update({"resolution": f"{W}x{H}", "audio_seconds": n / cfg.fps_target, "mode": cfg.mode,
                "camera": list(cam.as_tuple())})
    return out


@torch.no_grad()
def self_reenactment(generator, clip, frame_ids=None, hands=True):
    """Drive frame 0 of ``clip`` with its own ground-truth motion; returns predictions ``(n, H, W, 3)``."""
    cfg = generator.config
    frame_ids = list(range(len(clip))) if frame_ids is None else list(frame_ids)
    heads = clip.head_keypoints()
    src = _img(clip.frames[0])
    volume = generator.extract_appearance(src)
    det = generator.detect_motion(src)
    out = []
    for i in frame_ids:
        body = (torch.as_tensor(clip.body.deformation[i:i + 1], dtype=torch.float32),
                torch.as_tensor(clip.body.scale[i:i + 1], dtype=torch.float32),
                torch.as_tensor(clip.body.translation[i:i + 1], dtype=torch.float32))
        cond = None
        if hands and cfg.hand_injection:
            cond = vg.hand_condition([clip.body.hands(i)], cfg.camera(), (cfg.height, cfg.width))
        pred, _, _ = generator(src, torch.as_tensor(heads[0:1], dtype=torch.float32),
                               torch.as_tensor(heads[i:i + 1], dtype=torch.float32), body, cond,
                               volume=volume, detected=det)
        out.append(pred[0].permute(1, 2, 0).double().numpy())
    return np.stack(out)


def evaluate(clips, models, train_seeds, steps=50, seed=0):
    """Metric report on held-out clips; refuses clips whose seed was used for training."""
    train = {s if isinstance(s, int) else s[0] for s in train_seeds}
    bad = sorted({c.seed for c in clips} & train)
    if bad:
        raise SplitContaminationError(f"evaluation clips overlap the training seeds: {bad}")
    rows = []
    sched = models.sched or build_schedule()
    rig = models.rig or mr.build_head_rig(0)
    for clip in clips:
        row = {"seed": clip.seed}
        if models.generator is not None:
            pred = self_reenactment(models.generator, clip)
            row["psnr"] = metrics.mean_psnr(pred, clip.frames)
            row["ssim"] = metrics.mean_ssim(pred, clip.frames)
        if models.face is not None:
            cfg = models.face.config
            L = cfg.chunk
            truth = clip.face.slice(0, L)
            ref = clip.face.slice(L, 2 * L) if len(clip) >= 2 * L else None
            style = StyleControl.from_chunk(truth, reference=ref)
            gen = a2m.generate_face_motion(models.face, clip.audio.frames[:L], None, style, sched, steps, seed)
            row["style_mae"], row["style_ssim"] = a2m.style_transfer_error(gen, truth)
            row["diversity"] = metrics.diversity(mr.project_head_batch(gen.expr, gen.pose, rig))
        rows.append(row)
    keys = sorted({k for r in rows for k in r if k != "seed"})
    return {"rows": rows, "mean": {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}}
