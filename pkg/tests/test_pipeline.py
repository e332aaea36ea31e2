import threading

import numpy as np
import pytest
import torch

from portrait_anim import audio2motion as a2m
from portrait_anim import motion_repr as mr
from portrait_anim import pipeline, synth
from portrait_anim import video_gen as vg
from portrait_anim.audio import AudioFeatureSeq
from portrait_anim.errors import CheckpointError, InvalidParamsError, SplitContaminationError
from portrait_anim.sequences import MotionChunk, StyleControl

STYLE = StyleControl(0.1, 0.01)


def tiny_models(mode="upper_body", refine=True, seed=0):
    torch.manual_seed(seed)
    face = a2m.FaceDenoiser(a2m.FaceModelConfig(width=32, depth=2, heads=2)).eval()
    bundle = pipeline.ModelBundle(face=face)
    small = dict(feat_channels=8, depth=4, combiner_width=8, dec_channels=(8, 8, 8), hand_hidden=4)
    if mode == "upper_body":
        bundle.body = a2m.BodyDenoiser(a2m.BodyModelConfig(width=32, heads=2, app_tokens=4)).eval()
        bundle.generator = vg.PortraitGenerator(vg.GeneratorConfig(height=96, width=64, **small)).eval()
        bundle.refiner = vg.FaceRefiner(32).eval() if refine else None
    else:
        bundle.head_generator = vg.PortraitGenerator(
            vg.GeneratorConfig(mode="head", height=64, width=64, hand_injection=False, **small)).eval()
    # non-trivial refiner and generator outputs
    with torch.no_grad():
        for m in (bundle.generator, bundle.head_generator, bundle.refiner):
            if m is not None:
                for p in m.parameters():
                    if p.abs().sum() == 0:
                        p.normal_(0, 0.05)
    return bundle


def inputs(seconds=2.0, h=96, w=64):
    rng = np.random.default_rng(0)
    audio = AudioFeatureSeq(rng.standard_normal((int(seconds * 30), 32)))
    source = rng.uniform(size=(h, w, 3))
    return source, mr.build_head_rig(0).mean_keypoints, audio


@pytest.fixture(scope="module")
def body_models():
    return tiny_models()


def cfg(**kw):
    return pipeline.StreamConfig(**{"steps": 2, **kw})


def test_stream_config_validation():
    with pytest.raises(InvalidParamsError):
        pipeline.StreamConfig(mode="full")
    with pytest.raises(InvalidParamsError):
        pipeline.StreamConfig(queue_capacity=0)
    with pytest.raises(InvalidParamsError):
        pipeline.StreamConfig(history_frames=31, chunk_frames=30)
    d = pipeline.StreamConfig()
    assert (d.chunk_frames, d.history_frames, d.fps_target, d.queue_capacity) == (30, 10, 30, 2)


def test_two_seconds_gives_sixty_frames(body_models):
    source, head, audio = inputs()
    sink, stats = pipeline.run_stream(source, head, audio, STYLE, body_models, cfg())
    assert stats.frames_emitted == 60 and len(sink.frames) == 60
    assert stats.drops == 0
    assert np.all(np.diff(stats.timestamps) > 0)
    assert sink.frames[0].shape == (96, 64, 3)
    assert stats.appearance_extractions == 1


def test_partial_last_chunk(body_models):
    source, head, _ = inputs()
    audio = AudioFeatureSeq(np.random.default_rng(1).standard_normal((45, 32)))
    sink, stats = pipeline.run_stream(source, head, audio, STYLE, body_models, cfg())
    assert stats.frames_emitted == 45 and stats.drops == 0


@pytest.mark.parametrize("capacity", [1, 2, 4])
def test_stream_matches_sequential(body_models, capacity):
    source, head, audio = inputs()
    ref, ref_hist = pipeline.run_sequential(source, head, audio, STYLE, body_models, cfg())
    sink, stats = pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(queue_capacity=capacity))
    assert np.array_equal(np.stack(sink.frames), ref)
    assert all(np.array_equal(a, b) for a, b in zip(stats.history_log, ref_hist))


def test_history_continuity(body_models):
    source, head, audio = inputs(3.0)
    c = cfg()
    _, hist = pipeline.run_sequential(source, head, audio, STYLE, body_models, c)
    assert np.array_equal(hist[0], np.zeros_like(hist[0]))
    # recompute stage 2 output chunk by chunk and check the tail hand-off
    for n in range(len(hist) - 1):
        chunk = AudioFeatureSeq(audio.frames[30 * n:30 * (n + 1)])
        face = pipeline.face_stage(body_models, c, chunk, MotionChunk.from_array(hist[n], mr.N_EXPR), STYLE, n)
        assert np.array_equal(hist[n + 1], face.clamped().to_array()[-10:])


def test_head_only_mode_square_frames():
    models = tiny_models("head_only")
    source, head, audio = inputs(1.0, 64, 64)
    sink, stats = pipeline.run_stream(source, head, audio, STYLE, models, cfg(mode="head_only"))
    assert sink.frames[0].shape == (64, 64, 3) and stats.frames_emitted == 30
    ref, _ = pipeline.run_sequential(source, head, audio, STYLE, models, cfg(mode="head_only"))
    assert np.array_equal(np.stack(sink.frames), ref)


def test_body_stage_bypassed_in_head_mode():
    assert pipeline.body_stage(None, cfg(mode="head_only"), None, None, None, 0) is None


def test_mode_consistency_checked(body_models):
    source, head, audio = inputs()
    with pytest.raises(CheckpointError):
        pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(mode="head_only"))
    partial = pipeline.ModelBundle(face=body_models.face, generator=body_models.generator)
    with pytest.raises(CheckpointError):
        partial.check("upper_body")


def test_stage_error_propagates_after_drain(body_models, monkeypatch):
    source, head, audio = inputs(4.0)
    orig = pipeline.face_stage

    def broken(models, c, chunk, history, style, index):
        if index == 2:
            raise ValueError("boom")
        return orig(models, c, chunk, history, style, index)

    monkeypatch.setattr(pipeline, "face_stage", broken)
    before = threading.active_count()
    sink = pipeline.ListSink()
    with pytest.raises(ValueError, match="boom"):
        pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(queue_capacity=1), sink)
    assert sink.closed and len(sink.frames) <= 60
    assert threading.active_count() == before


def test_fixed_seed_reproducible_and_seed_sensitive(body_models):
    source, head, audio = inputs(1.0)
    a, _ = pipeline.run_sequential(source, head, audio, STYLE, body_models, cfg(seed=3))
    b, _ = pipeline.run_sequential(source, head, audio, STYLE, body_models, cfg(seed=3))
    c, _ = pipeline.run_sequential(source, head, audio, STYLE, body_models, cfg(seed=4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_chunk_seed_distinct():
    seeds = {pipeline.chunk_seed(0, n, s) for n in range(50) for s in range(2)}
    assert len(seeds) == 100
    assert pipeline.chunk_seed(1, 0, 0) != pipeline.chunk_seed(0, 0, 0)


def test_directory_sink(tmp_path, body_models):
    source, head, audio = inputs(1.0)
    pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(), pipeline.DirectorySink(tmp_path))
    assert len(list(tmp_path.glob("*.ppm"))) == 30
    assert (tmp_path / "index.json").exists()


def test_benchmark_reports():
    models = tiny_models()
    rep = pipeline.benchmark(cfg(), 1.0, models=models)
    assert rep["audio_seconds"] >= 1.0 and rep["frames_emitted"] == 30 and rep["drops"] == 0
    assert rep["achieved_fps"] > 0 and {"face", "body", "frames"} <= set(rep["stage_latency_ms"])


def test_benchmark_queue_capacity_does_not_change_output(body_models):
    source, head, audio = inputs(2.0)
    s1, _ = pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(queue_capacity=1))
    s4, _ = pipeline.run_stream(source, head, audio, STYLE, body_models, cfg(queue_capacity=4))
    assert np.array_equal(np.stack(s1.frames), np.stack(s4.frames))


def test_larger_resolution_not_faster():
    c = pipeline.StreamConfig(steps=1, refine=False, mode="head_only")
    small = tiny_models("head_only")
    torch.manual_seed(0)
    big = pipeline.ModelBundle(face=small.face, head_generator=vg.PortraitGenerator(vg.GeneratorConfig(
        mode="head", height=256, width=256, hand_injection=False, feat_channels=8, depth=4, combiner_width=8,
        dec_channels=(8, 8, 8))).eval())
    fps_small = min(pipeline.benchmark(c, 1.0, models=small)["achieved_fps"] for _ in range(2))
    fps_big = max(pipeline.benchmark(c, 1.0, models=big)["achieved_fps"] for _ in range(2))
    assert fps_big <= fps_small


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def test_evaluate_refuses_contamination(body_models):
    clip = synth.make_clip(5, 1.0, render=False)
    with pytest.raises(SplitContaminationError):
        pipeline.evaluate([clip], body_models, train_seeds=[1, 5])
    with pytest.raises(SplitContaminationError):
        pipeline.evaluate([clip], body_models, train_seeds=[(5, 9)])


def test_evaluate_report_fields():
    torch.manual_seed(0)
    face = a2m.FaceDenoiser(a2m.FaceModelConfig(width=32, depth=2, heads=2)).eval()
    gen = vg.PortraitGenerator(vg.GeneratorConfig(feat_channels=8, depth=4, combiner_width=8,
                                                  dec_channels=(8, 8, 8), hand_hidden=4)).eval()
    clips = [synth.make_clip(s, 2.0) for s in (100, 101)]
    rep = pipeline.evaluate(clips, pipeline.ModelBundle(face=face, generator=gen), [1, 2], steps=2)
    assert len(rep["rows"]) == 2
    assert {"psnr", "ssim", "style_mae", "style_ssim", "diversity"} <= set(rep["mean"])
    assert all(np.isfinite(v) for v in rep["mean"].values())


def test_self_reenactment_identity_generator_frame0():
    clip = synth.make_clip(100, 1.0)
    gen = vg.PortraitGenerator(vg.GeneratorConfig(feat_channels=8, depth=4, combiner_width=8,
                                                  dec_channels=(8, 8, 8), hand_hidden=4)).eval()
    pred = pipeline.self_reenactment(gen, clip, [0, 3])
    assert pred.shape == (2, 192, 128, 3)
