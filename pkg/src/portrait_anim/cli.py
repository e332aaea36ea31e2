"""Command line entry point: synth, train, infer, benchmark, evaluate.

Exit codes: 0 success, 1 invariant or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline, synth, training
from .audio import AudioFeatureSeq, extract_audio_features, read_wav
from .errors import InvalidParamsError, PortraitAnimError
from .records import dump_json, keypoints_from_record, load_json, read_ppm
from .sequences import StyleControl


def parse_seeds(text):
    """``"1-8"`` or ``"1,3,5"`` or a mix -> list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def load_config(path):
    """Structured-text training config; a ``fingerprint`` field, if present, must match the rest."""
    raw = load_json(path)
    stated = raw.pop("fingerprint", None)
    cfg = training.TrainConfig.from_dict(raw)
    if stated is not None and stated != cfg.fingerprint():
        raise InvalidParamsError(f"{path}: fingerprint does not match the config contents")
    return cfg


def write_config(cfg, path):
    d = cfg.to_dict()
    d["fingerprint"] = cfg.fingerprint()
    dump_json(d, path)


def load_image(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return read_ppm(path).astype(np.float64)


def load_audio(path):
    path = Path(path)
    if path.suffix == ".npy":
        return AudioFeatureSeq(np.load(path))
    wave, rate = read_wav(path)
    return extract_audio_features(wave, rate)


def parse_style(text):
    """``"expr,pose"`` ranges, or a JSON file with ``expr_range``/``pose_range``."""
    if Path(text).is_file():
        d = load_json(text)
        return StyleControl(float(d["expr_range"]), float(d["pose_range"]))
    a, b = (float(v) for v in text.split(","))
    return StyleControl(a, b)


def _model(path, stage):
    return None if path is None else training.load_checkpoint(path, stage=stage).model()


def cmd_synth(args):
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    for seed in seeds:
        clip = synth.make_clip(seed, args.seconds)
        synth.save_clip(clip, out / f"clip_{seed:05d}")
    print(json.dumps({"clips": len(seeds), "out": str(out)}))
    return 0


def cmd_train(args):
    cfg = load_config(args.config) if args.config else training.TrainConfig(stage=args.stage)
    overrides = {"stage": args.stage}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = training.TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    out = Path(args.out)
    with training.deterministic_mode(args.threads):
        res = training.train(cfg, log_path=args.log, ckpt_dir=args.ckpt_dir)
    training.save_checkpoint(res.checkpoint, out)
    write_config(cfg, out.with_suffix(".json"))
    last = res.curve[-1] if res.curve else {}
    print(json.dumps({"stage": cfg.stage, "steps": cfg.steps, "checkpoint": str(out),
                      "fingerprint": res.checkpoint.fingerprint, "final": last}))
    return 0


def cmd_infer(args):
    models = pipeline.ModelBundle(
        face=_model(args.face, "a2m_face"), body=_model(args.body, "a2m_body"),
        generator=_model(args.generator, "gen_body"), refiner=_model(args.refiner, "gen_face_refine"),
        head_generator=_model(args.head_generator, "gen_head"))
    cfg = pipeline.StreamConfig(mode=args.mode, steps=args.steps, seed=args.seed,
                                queue_capacity=args.queue_capacity, refine=args.refiner is not None,
                                frame_batch=args.frame_batch)
    models.check(cfg.mode)
    image = load_image(args.image)
    source_head = models.rig.mean_keypoints
    if args.source_keypoints:
        source_head = keypoints_from_record(load_json(args.source_keypoints)).points
    with training.deterministic_mode(args.threads):
        _, stats = pipeline.run_stream(image, source_head, load_audio(args.audio), parse_style(args.style),
                                       models, cfg, pipeline.DirectorySink(args.out))
    print(json.dumps(stats.summary()))
    return 0 if stats.drops == 0 else 1


def cmd_benchmark(args):
    cfg = pipeline.StreamConfig(mode=args.mode, steps=args.steps, queue_capacity=args.queue_capacity,
                                frame_batch=args.frame_batch)
    resolutions = ("desk", "paper") if args.resolution == "both" else (args.resolution,)
    with training.deterministic_mode(args.threads):
        report = [pipeline.benchmark(cfg, args.duration, r) for r in resolutions]
    print(json.dumps(report, indent=2))
    return 0


def cmd_evaluate(args):
    models = pipeline.ModelBundle(face=_model(args.face, "a2m_face"),
                                  generator=_model(args.generator, "gen_body"))
    clips = [synth.make_clip(s, args.seconds) for s in parse_seeds(args.seeds)]
    with training.deterministic_mode(args.threads):
        report = pipeline.evaluate(clips, models, parse_seeds(args.train_seeds), steps=args.steps)
    print(json.dumps(report, indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="portrait-anim")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic clips")
    s.add_argument("--seeds", default="1-8")
    s.add_argument("--seconds", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", required=True, choices=training.STAGES)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--ckpt-dir")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="animate a source image from audio")
    i.add_argument("--image", required=True)
    i.add_argument("--audio", required=True)
    i.add_argument("--style", default="0.1,0.01")
    i.add_argument("--out", required=True)
    i.add_argument("--face", required=True)
    i.add_argument("--body")
    i.add_argument("--generator")
    i.add_argument("--refiner")
    i.add_argument("--head-generator")
    i.add_argument("--source-keypoints")
    i.add_argument("--mode", default="upper_body", choices=pipeline.MODES)
    i.add_argument("--steps", type=int, default=50)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--queue-capacity", type=int, default=2)
    i.add_argument("--frame-batch", type=int, default=8)
    i.add_argument("--threads", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("benchmark", help="measure streaming throughput")
    b.add_argument("--duration", type=float, default=10.0)
    b.add_argument("--resolution", default="both", choices=("desk", "paper", "both"))
    b.add_argument("--mode", default="upper_body", choices=pipeline.MODES)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--queue-capacity", type=int, default=2)
    b.add_argument("--frame-batch", type=int, default=8)
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("evaluate", help="metrics on held-out clips")
    e.add_argument("--seeds", default="100-104")
    e.add_argument("--train-seeds", default="1-8")
    e.add_argument("--seconds", type=float, default=2.0)
    e.add_argument("--face")
    e.add_argument("--generator")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PortraitAnimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
