import json

import numpy as np
import pytest

from portrait_anim import cli, training

TINY = {
    "a2m_face": {"width": 32, "depth": 2, "heads": 2},
    "a2m_body": {"width": 32, "heads": 2, "app_tokens": 4},
    "gen_body": {"feat_channels": 8, "depth": 4, "combiner_width": 8, "dec_channels": [8, 8, 8], "hand_hidden": 4},
    "gen_face_refine": {"crop": 32},
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


def write_cfg(tmp_path, stage, **kw):
    cfg = training.TrainConfig(stage=stage, steps=kw.pop("steps", 2), batch_size=2, learning_rate=1e-3,
                               model=TINY[stage], train_seeds=[1], clip_seconds=2.0, **kw)
    path = tmp_path / f"{stage}.json"
    cli.write_config(cfg, path)
    return path


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    out = {}
    for stage in ("a2m_face", "a2m_body", "gen_body"):
        cfg = write_cfg(d, stage, steps=1)
        assert cli.main(["train", "--stage", stage, "--config", str(cfg), "--out", str(d / f"{stage}.ckpt")]) == 0
        out[stage] = d / f"{stage}.ckpt"
    rng = np.random.default_rng(0)
    np.save(d / "image.npy", rng.uniform(size=(192, 128, 3)))
    np.save(d / "audio.npy", rng.standard_normal((60, 32)))
    out["image"], out["audio"] = d / "image.npy", d / "audio.npy"
    return out


def test_parse_seeds():
    assert cli.parse_seeds("1-3,7") == [1, 2, 3, 7]
    assert cli.parse_seeds("5") == [5]


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 2


def test_synth_writes_clips(tmp_path, capsys):
    code, out = run(capsys, "synth", "--seeds", "1-2", "--seconds", "1", "--out", tmp_path)
    assert code == 0 and json.loads(out.out)["clips"] == 2
    assert len(list((tmp_path / "clip_00001" / "frames").glob("*.ppm"))) == 30


def test_config_fingerprint_checked(tmp_path, capsys):
    path = write_cfg(tmp_path, "a2m_face")
    d = json.loads(path.read_text())
    d["learning_rate"] = 0.5
    path.write_text(json.dumps(d))
    code, out = run(capsys, "train", "--stage", "a2m_face", "--config", path, "--out", tmp_path / "x.ckpt")
    assert code == 1 and "fingerprint" in out.err


def test_train_is_bit_reproducible(tmp_path, capsys):
    path = write_cfg(tmp_path, "a2m_face", steps=3)
    for name in ("a", "b"):
        code, _ = run(capsys, "train", "--stage", "a2m_face", "--config", path, "--out", tmp_path / f"{name}.ckpt",
                      "--log", tmp_path / f"{name}.jsonl")
        assert code == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_clock"}
                       for l in p.read_text().splitlines()]
    assert strip(tmp_path / "a.jsonl") == strip(tmp_path / "b.jsonl")
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta["fingerprint"] == training.TrainConfig.from_dict(meta).fingerprint()


def test_infer_is_bit_reproducible(tmp_path, capsys, ckpts):
    outs = []
    for name in ("a", "b"):
        code, out = run(capsys, "infer", "--image", ckpts["image"], "--audio", ckpts["audio"], "--style", "0.1,0.01",
                        "--out", tmp_path / name, "--face", ckpts["a2m_face"], "--body", ckpts["a2m_body"],
                        "--generator", ckpts["gen_body"], "--steps", 2, "--seed", 7)
        assert code == 0
        assert json.loads(out.out)["frames_emitted"] == 60
        outs.append(tmp_path / name)
    files = sorted(p.name for p in outs[0].glob("*.ppm"))
    assert len(files) == 60
    assert all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)


def test_infer_rejects_wrong_stage_checkpoint(tmp_path, capsys, ckpts):
    code, out = run(capsys, "infer", "--image", ckpts["image"], "--audio", ckpts["audio"], "--out", tmp_path,
                    "--face", ckpts["gen_body"], "--body", ckpts["a2m_body"], "--generator", ckpts["gen_body"])
    assert code == 1 and "expected a2m_face" in out.err


def test_infer_missing_models_is_error(tmp_path, capsys, ckpts):
    code, out = run(capsys, "infer", "--image", ckpts["image"], "--audio", ckpts["audio"], "--out", tmp_path,
                    "--face", ckpts["a2m_face"])
    assert code == 1


def test_benchmark_command(capsys):
    code, out = run(capsys, "benchmark", "--duration", 1, "--resolution", "desk", "--steps", 1)
    rep = json.loads(out.out)
    assert code == 0 and rep[0]["frames_emitted"] == 30 and rep[0]["achieved_fps"] > 0


def test_evaluate_command(capsys, ckpts):
    code, out = run(capsys, "evaluate", "--seeds", "100", "--train-seeds", "1-8", "--face", ckpts["a2m_face"],
                    "--generator", ckpts["gen_body"], "--steps", 2)
    assert code == 0 and "psnr" in json.loads(out.out)["mean"]
    code, out = run(capsys, "evaluate", "--seeds", "3", "--train-seeds", "1-8", "--face", ckpts["a2m_face"])
    assert code == 1 and "overlap" in out.err
