import json

import numpy as np
import pytest
from sklearn.base import clone

from odesplat.cli import main
from odesplat.config import desk_config, save_config
from odesplat.estimator import DynamicSplatModel
from odesplat.evaluation import evaluate, read_csv, summarize
from odesplat.render import render_particles
from odesplat.scenes import SceneSpec, generate_scene, load_dataset, split_dataset

GEN = ["--n-gaussians", "12", "--n-cameras", "2", "--n-timesteps", "5", "--resolution", "12"]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-scene", "--kind", "rotation", "--seed", "3", "--out", str(root / "data"), *GEN]) == 0
    cfg = desk_config(warmup_steps=4, total_steps=8, densify=False, log_every=0)
    save_config(cfg, root / "cfg.json")
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config", str(root / "cfg.json"), "--seed", "1"]) == 0
    return root


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["generate-scene", "--kind", "translation", "--seed", "7", "--out", str(tmp_path / d), *GEN]) == 0
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train", "--bogus"])
    assert ei.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    missing = tmp_path / "nowhere.ckpt"
    assert main(["evaluate", "--checkpoint", str(missing), "--data", str(tmp_path), "--out", str(tmp_path / "e")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_train_outputs(tiny_run):
    run = tiny_run / "run"
    for name in ("model.ckpt", "train_log.csv", "metrics.csv", "config.json"):
        assert (run / name).exists()
    rows = read_csv(run / "metrics.csv")
    assert {r.split for r in rows} == {"train", "extrapolation"}
    assert len(rows) == 10
    assert json.loads((run / "config.json").read_text())["seed"] == 1


def test_train_is_reproducible(tiny_run):
    args = ["train", "--data", str(tiny_run / "data"), "--out", str(tiny_run / "run2"), "--config", str(tiny_run / "cfg.json"), "--seed", "1"]
    assert main(args) == 0
    assert (tiny_run / "run2" / "metrics.csv").read_bytes() == (tiny_run / "run" / "metrics.csv").read_bytes()


def test_evaluate_render_extrapolate(tiny_run):
    ck = str(tiny_run / "run" / "model.ckpt")
    data = str(tiny_run / "data")
    assert main(["evaluate", "--checkpoint", ck, "--data", data, "--out", str(tiny_run / "ev")]) == 0
    for name in ("metrics.csv", "psnr_vs_t.png", "ssim_vs_t.png", "summary.json"):
        assert (tiny_run / "ev" / name).exists()
    assert (tiny_run / "ev" / "metrics.csv").read_text() == (tiny_run / "run" / "metrics.csv").read_text()
    assert main(["render", "--checkpoint", ck, "--data", data, "--t", "0.9", "--out", str(tiny_run / "f.png")]) == 0
    assert main(["extrapolate", "--checkpoint", ck, "--data", data, "--out", str(tiny_run / "ex")]) == 0
    assert len(list((tiny_run / "ex").glob("*.png"))) == 4
    assert main(["render", "--checkpoint", ck, "--data", data, "--t", "0.5", "--camera", "9", "--out", str(tiny_run / "g.png")]) == 1


def test_ablate_writes_comparison(tiny_run):
    out = tiny_run / "abl"
    args = ["ablate", "--axis", "neural_ode", "--data", str(tiny_run / "data"), "--out", str(out), "--config", str(tiny_run / "cfg.json")]
    assert main(args) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("axis,arm,train_psnr")
    assert [l.split(",")[1] for l in lines[1:]] == ["on", "off"]


def test_ground_truth_evaluates_at_cap(tiny_run):
    ds = load_dataset(tiny_run / "data")
    _, base, traj = generate_scene(SceneSpec(kind="rotation", n_gaussians=12, n_cameras=2, n_timesteps=5, resolution=12), seed=3)
    train, _ = split_dataset(ds)
    rows = evaluate(lambda cam, t: render_particles(traj.particles(base, t), cam), train, "train")
    assert summarize(rows)["train"]["psnr"] == 99.0


def test_black_model_black_data():
    ds, _, _ = generate_scene(SceneSpec(n_gaussians=3, n_cameras=1, n_timesteps=3, resolution=8))
    for fr in ds.frames:
        fr.image = np.zeros_like(fr.image)
    rows = evaluate(lambda cam, t: np.zeros((8, 8, 3)), ds, "all")
    assert all(r.psnr == 99.0 for r in rows)


def test_estimator_api():
    ds, base, _ = generate_scene(SceneSpec(n_gaussians=10, n_cameras=2, n_timesteps=4, resolution=12), seed=0)
    train, extra = split_dataset(ds)
    cfg = desk_config(densify=False, log_every=0)
    est = DynamicSplatModel(config=cfg, seed=2, warmup_steps=3, total_steps=6)
    assert est.get_params()["seed"] == 2
    assert clone(est).get_params()["total_steps"] == 6
    est.fit(train, init_points=base.mu)
    imgs = est.predict([(ds.cameras[0], 0.1), (ds.cameras[1], 0.9)])
    assert imgs.shape == (2, 12, 12, 3)
    assert np.isfinite(est.score(extra))


def test_estimator_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        DynamicSplatModel().predict([])
