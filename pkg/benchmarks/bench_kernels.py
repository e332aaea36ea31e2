"""Numba vs numpy rasterizer timings on real avatar frames and hand control images.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json out.json]
"""
import argparse
import json
from timeit import repeat

import numpy as np

from portrait_anim import kernels, synth
from portrait_anim import motion_repr as mr


def frame_shapes(seed=3, index=10, scale=1):
    clip = synth.make_clip(seed, 1.0, render=False)
    cfg = clip.config
    cam = mr.body_camera(cfg.width * scale, cfg.height * scale)
    shapes = synth.scene_shapes(clip.state(index), cam, clip.look)
    return shapes, (cfg.height * scale, cfg.width * scale), clip, cam


def hand_capsules(clip, index, cam):
    segs = [mr.hand_segments(h) for h in clip.body.hands(index)]
    p0 = np.concatenate([cam.project(s[0]) for s in segs])
    p1 = np.concatenate([cam.project(s[1]) for s in segs])
    radii = np.concatenate([s[2] for s in segs]) * cam.pixel_scale
    colors = np.concatenate([s[3] for s in segs])
    return p0, p1, radii, colors


def best(fn, repeats):
    return min(repeat(fn, number=1, repeat=repeats))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rows = []
    for scale in (1, 4):
        shapes, (h, w), clip, cam = frame_shapes(scale=scale)
        packed = shapes.packed()
        a = kernels.raster_soft_nb(*packed, np.zeros((h, w, 3)))
        b = kernels.raster_soft_np(*packed, np.zeros((h, w, 3)))
        assert np.allclose(a, b, atol=1e-9)
        t_nb = best(lambda: kernels.raster_soft_nb(*packed, np.zeros((h, w, 3))), args.repeats)
        t_np = best(lambda: kernels.raster_soft_np(*packed, np.zeros((h, w, 3))), args.repeats)
        rows.append({"kernel": "raster_soft", "size": f"{w}x{h}", "shapes": len(shapes),
                     "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_nb})

        caps = hand_capsules(clip, 10, cam)
        a = kernels.raster_capsules_nb(*caps, h, w)
        b = kernels.raster_capsules_np(*caps, h, w)
        assert np.array_equal(a[1], b[1])
        t_nb = best(lambda: kernels.raster_capsules_nb(*caps, h, w), args.repeats)
        t_np = best(lambda: kernels.raster_capsules_np(*caps, h, w), args.repeats)
        rows.append({"kernel": "raster_capsules", "size": f"{w}x{h}", "shapes": len(caps[0]),
                     "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_nb})

    for r in rows:
        print(f"{r['kernel']:16s} {r['size']:>8s} {r['shapes']:4d} shapes  numba {r['numba_ms']:8.2f} ms  "
              f"numpy {r['numpy_ms']:8.2f} ms  x{r['speedup']:.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
