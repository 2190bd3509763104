import json

import numpy as np
import pytest

from hdiv import checkpoint
from hdiv.cli import main
from hdiv.data import load_image, save_image, write_procedural_corpus
from hdiv.pyramid import ModelConfig, PyramidModel

from conftest import ihaar_oracle
from test_pyramid import denoise_oracle


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, train_root, **train):
    doc = {
        "seed": 0,
        "model": {"levels": 2, "blocks": 1, "subnet": "RB", "growth": 4},
        "train": {"iterations": 4, "batch_size": 2, "patch_size": 16, "val_every": 2, "val_patches": 2,
                  **train},
        "data": {"train_root": str(train_root), "sigma": 25},
        "run_dir": str(path.parent / "run"),
    }
    path.write_text(json.dumps(doc))
    return doc


@pytest.fixture
def corpus(tmp_path):
    write_procedural_corpus(tmp_path / "data" / "clean", 3, 32, seed=0)
    return tmp_path / "data"


@pytest.fixture
def identity_ckpt(tmp_path):
    path = tmp_path / "identity.ckpt"
    checkpoint.save_model(path, PyramidModel.create(ModelConfig(levels=2, blocks=1, subnet="RB", growth=4)))
    return path


def test_synth_sigma_zero_copies(tmp_path, capsys):
    code, out, _ = run(["synth", "--generate", 3, "--size", 32, "--sigma", 0, "--out", tmp_path / "s"], capsys)
    assert code == 0 and "3 pairs" in out
    for p in (tmp_path / "s" / "clean").iterdir():
        assert p.read_bytes() == (tmp_path / "s" / "noisy" / p.name).read_bytes()


def test_synth_is_reproducible(tmp_path, capsys, corpus):
    for name in ("a", "b"):
        assert run(["synth", corpus / "clean", "--sigma", 25, "--seed", 3, "--out", tmp_path / name], capsys)[0] == 0
    for p in (tmp_path / "a" / "noisy").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "noisy" / p.name).read_bytes()
    assert run(["synth", "--out", tmp_path / "c"], capsys)[0] == 2
    assert run(["synth", tmp_path / "nowhere", "--out", tmp_path / "d"], capsys)[0] == 3


def test_train_smoke(tmp_path, capsys, corpus):
    write_config(tmp_path / "cfg.json", corpus)
    code, out, err = run(["train", "--config", tmp_path / "cfg.json"], capsys)
    assert code == 0, err
    run_dir = tmp_path / "run"
    for name in ("run.json", "history.csv", "last.ckpt", "best.ckpt"):
        assert (run_dir / name).is_file()
    assert json.loads((run_dir / "run.json").read_text())["seed"] == 0
    lines = (run_dir / "history.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,recon,guide,dist,total,val_psnr" and len(lines) == 5
    checkpoint.load_model(run_dir / "best.ckpt")


def test_train_rerun_is_identical(tmp_path, capsys, corpus):
    write_config(tmp_path / "cfg.json", corpus)
    for out in ("r1", "r2"):
        assert run(["train", "--config", tmp_path / "cfg.json", "--out", tmp_path / out], capsys)[0] == 0
    for name in ("history.csv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_train_missing_noisy_dir(tmp_path, capsys, corpus):
    doc = write_config(tmp_path / "cfg.json", corpus)
    doc["data"].pop("sigma")
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    code, _, err = run(["train", "--config", tmp_path / "cfg.json"], capsys)
    assert code == 3 and str(corpus / "noisy") in err


def test_train_invalid_config(tmp_path, capsys, corpus):
    doc = write_config(tmp_path / "cfg.json", corpus)
    doc["train"]["learning_rate"] = 1.0
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    code, _, err = run(["train", "--config", tmp_path / "cfg.json"], capsys)
    assert code == 2 and "learning_rate" in err
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["train", "--config", tmp_path / "bad.json"], capsys)[0] == 2
    doc["train"].pop("learning_rate")
    doc["train"]["patch_size"] = 10
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    assert run(["train", "--config", tmp_path / "cfg.json"], capsys)[0] == 2


def test_train_divergence_exit_code(tmp_path, capsys, corpus, monkeypatch):
    from hdiv import optim
    from hdiv.tensor import NonFiniteError

    def boom(*a, **k):
        raise NonFiniteError("injected")

    monkeypatch.setattr(optim, "compute_losses", boom)
    write_config(tmp_path / "cfg.json", corpus)
    code, _, err = run(["train", "--config", tmp_path / "cfg.json"], capsys)
    assert code == 4 and "diverged" in err
    assert (tmp_path / "run" / "diverged.json").is_file()


def test_denoise_identity_matches_oracle(tmp_path, capsys, corpus, identity_ckpt):
    src = corpus / "clean" / "img_0000.png"
    code, out, _ = run(["denoise", src, "--ckpt", identity_ckpt, "--out", tmp_path / "d.png"], capsys)
    assert code == 0 and "crop" in out
    x = load_image(src, np.float64)
    expect = np.clip(denoise_oracle(x[None], 2, 3, 13)[0], 0, 1)
    got = load_image(tmp_path / "d.png", np.float64)
    assert np.abs(got - expect).max() <= 1 / 255 + 1e-9


def test_denoise_crops_to_multiple(tmp_path, capsys, identity_ckpt):
    save_image(tmp_path / "odd.png", np.random.default_rng(0).random((3, 37, 50)))
    code, out, _ = run(["denoise", tmp_path / "odd.png", "--ckpt", identity_ckpt, "--out", tmp_path / "o.png"],
                       capsys)
    assert code == 0 and "size=36x48" in out
    assert load_image(tmp_path / "o.png").shape == (3, 36, 48)


def test_denoise_errors(tmp_path, capsys, corpus, identity_ckpt):
    bad = tmp_path / "bad.ckpt"
    blob = bytearray(identity_ckpt.read_bytes())
    blob[40] ^= 1
    bad.write_bytes(bytes(blob))
    src = corpus / "clean" / "img_0000.png"
    assert run(["denoise", src, "--ckpt", bad, "--out", tmp_path / "x.png"], capsys)[0] == 2
    (tmp_path / "junk.png").write_bytes(b"junk")
    assert run(["denoise", tmp_path / "junk.png", "--ckpt", identity_ckpt, "--out", tmp_path / "x.png"],
               capsys)[0] == 3


def constant_pairs(root):
    for name, v in (("b.png", 0.6), ("a.png", 0.2)):
        save_image(root / "clean" / name, np.full((3, 16, 16), v))
        save_image(root / "noisy" / name, np.full((3, 16, 16), v))


def test_eval_constant_images(tmp_path, capsys, identity_ckpt):
    constant_pairs(tmp_path / "ev")
    code, out, _ = run(["eval", tmp_path / "ev", "--ckpt", identity_ckpt], capsys)
    lines = [l.split("\t") for l in out.strip().splitlines()]
    assert code == 0
    assert lines[0] == ["name", "psnr", "ssim"]
    assert [l[0] for l in lines[1:]] == ["a.png", "b.png", "mean"]
    assert float(lines[-1][1]) == 100.0
    code, out, _ = run(["eval", tmp_path / "ev", "--ckpt", identity_ckpt, "--blockiness"], capsys)
    assert out.splitlines()[0].split("\t") == ["name", "psnr", "ssim", "psnrb"]


def test_eval_unpaired(tmp_path, capsys, identity_ckpt):
    constant_pairs(tmp_path / "ev")
    (tmp_path / "ev" / "noisy" / "a.png").unlink()
    assert run(["eval", tmp_path / "ev", "--ckpt", identity_ckpt], capsys)[0] == 3


def test_check_fresh(capsys):
    code, out, _ = run(["check", "--fresh"], capsys)
    assert code == 0
    assert all(name in out for name in ("haar_roundtrip", "block_bijectivity", "bijectivity", "gradient"))


def test_check_broken_inverse(capsys):
    code, out, err = run(["check", "--break-inverse"], capsys)
    assert code == 5 and "bijectivity" in err


def test_check_f64(capsys):
    code, out, _ = run(["check", "--dtype", "f64", "--seed", 2], capsys)
    assert code == 0
    err = float(next(l for l in out.splitlines() if l.startswith("bijectivity")).split("max_err=")[1].split()[0])
    assert err <= 1e-10


def test_check_checkpoint(tmp_path, capsys, identity_ckpt):
    assert run(["check", "--ckpt", identity_ckpt], capsys)[0] == 0
    assert run(["check", "--ckpt", tmp_path / "none.ckpt"], capsys)[0] == 2


def test_decompose(tmp_path, capsys, identity_ckpt):
    save_image(tmp_path / "c.png", np.full((3, 32, 32), 0.4))
    code, out, _ = run(["decompose", tmp_path / "c.png", "--ckpt", identity_ckpt, "--out", tmp_path / "dec"],
                       capsys)
    assert code == 0
    rep = json.loads((tmp_path / "dec" / "report.json").read_text())
    assert rep["lf_images"] == ["lf_level1.png", "lf_level2.png"]
    assert rep["latent_channels"] == 33 and rep["noise_channels"] == 13
    assert len(rep["signal"]) == 20 and len(rep["noise"]) == 13
    assert all(abs(c["std"]) < 1e-6 and abs(c["mean"]) < 1e-6 for c in rep["latent"])
    lf1 = load_image(tmp_path / "dec" / "lf_level1.png")
    assert lf1.shape == (3, 16, 16) and np.ptp(lf1) == 0
    assert load_image(tmp_path / "dec" / "lf_level2.png").shape == (3, 8, 8)


def test_module_entry_point():
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "hdiv", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "denoise" in proc.stdout
