"""Command line entry point: ``hdiv {train,denoise,eval,check,decompose,synth}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from unittest import mock

import jsonschema
import numpy as np

from . import _kernels, checkpoint
from . import tensor as T
from .checkpoint import CheckpointError
from . import pyramid
from .coupling import invblock_forward, scale_fn
from .data import (DatasetError, Degradation, PairDataset, center_crop, load_image, save_image,
                   synthesize_pairs, write_procedural_corpus)
from .losses import LossWeights
from .metrics import psnr, psnr_b, ssim
from .optim import TrainConfig, TrainingDiverged, compute_losses, train_loop, write_history
from .pyramid import ModelConfig, PyramidModel
from .wavelet import dwt_haar, idwt_haar

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_INVARIANT = 0, 2, 3, 4, 5

_num = {"type": "number"}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "run_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "dtype": {"enum": ["f32", "f64"]},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 1, "maximum": 3},
                "blocks": {"type": "integer", "minimum": 1},
                "channels": {"enum": [1, 3]},
                "noise_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "subnet": {"enum": ["DB", "RB"]},
                "growth": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "decay_every": {"type": "integer", "minimum": 1},
                "iterations": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 2},
                "augment": {"type": "boolean"},
                "clip_grad": {"type": "boolean"},
                "clip_norm": {"type": "number", "exclusiveMinimum": 0},
                "val_every": {"type": "integer", "minimum": 0},
                "val_patches": {"type": "integer", "minimum": 0},
                "weights": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"recon": {**_num, "minimum": 0}, "guide": {**_num, "minimum": 0},
                                   "dist": {**_num, "minimum": 0}},
                },
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train_root"],
            "properties": {
                "train_root": {"type": "string"},
                "val_root": {"type": ["string", "null"]},
                "sigma": {"type": ["number", "null"], "minimum": 0},
                "poisson_peak": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
    },
}


class ConfigError(Exception):
    pass


def load_run_config(path: str | Path, overrides: dict | None = None) -> dict:
    """Parse, override and validate a run config. Relative paths resolve against the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    base = path.parent
    data = doc["data"]
    data["train_root"] = str((base / data["train_root"]).resolve())
    if data.get("val_root"):
        data["val_root"] = str((base / data["val_root"]).resolve())
    doc["run_dir"] = str((base / doc.get("run_dir", "run")).resolve())
    return doc


def build_train_config(doc: dict) -> TrainConfig:
    model = ModelConfig(**{**doc.get("model", {}), "dtype": doc.get("dtype", "f32")})
    train = dict(doc.get("train", {}))
    weights = LossWeights(**train.pop("weights", {}))
    try:
        return TrainConfig(seed=doc.get("seed", 0), model=model, weights=weights, **train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _degradation(data: dict) -> Degradation | None:
    if data.get("sigma") is None:
        return None
    return Degradation(sigma=data["sigma"] / 255.0, poisson_peak=data.get("poisson_peak"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        doc = load_run_config(args.config, {"seed": args.seed, "dtype": args.dtype})
        if args.out:
            doc["run_dir"] = str(Path(args.out).resolve())
        cfg = build_train_config(doc)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    data = doc["data"]
    try:
        deg = _degradation(data)
        ds = PairDataset.from_root(data["train_root"], deg)
        val = PairDataset.from_root(data["val_root"], deg) if data.get("val_root") else None
        for d in (ds, val) if val else (ds,):
            for i in range(len(d)):
                img = d.clean(i, cfg.model.np_dtype)
                if img.shape[0] != cfg.model.channels:
                    raise DatasetError(f"{d.clean_paths[i]}: {img.shape[0]} channels, model expects "
                                       f"{cfg.model.channels}")
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    run_dir = Path(doc["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    try:
        result = train_loop(cfg, ds, val, dump_dir=run_dir)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (state dumped to {run_dir / 'diverged.json'})", file=sys.stderr)
        return EXIT_DIVERGED
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_history(run_dir / "history.csv", result.history)
    checkpoint.save_model(run_dir / "last.ckpt", result.model)
    checkpoint.save_model(run_dir / "best.ckpt", result.model, result.best_state)
    print(f"trained {cfg.iterations} iterations; best val PSNR {result.best_psnr:.3f} dB "
          f"at iteration {result.best_iter}; outputs in {run_dir}")
    return EXIT_OK


def _load_model(args) -> PyramidModel:
    return checkpoint.load_model(args.ckpt, args.dtype)


def _load_cropped(path, model: PyramidModel) -> tuple[np.ndarray, tuple]:
    img = load_image(path, model.dtype)
    if img.shape[0] != model.config.channels:
        raise DatasetError(f"{path}: {img.shape[0]} channels, model expects {model.config.channels}")
    return center_crop(img, 2 ** model.config.levels)


def _crop_note(path, img_shape, crop) -> str:
    top, left, h, w = crop
    return f"{path}: crop top={top} left={left} size={h}x{w} (input {img_shape[1]}x{img_shape[2]})"


def cmd_denoise(args) -> int:
    try:
        model = _load_model(args)
    except CheckpointError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        orig = load_image(args.input, model.dtype)
        img, crop = _load_cropped(args.input, model)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(_crop_note(args.input, orig.shape, crop))
    with T.no_grad():
        out = model.denoise(img[None]).data[0]
    save_image(args.out, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = _load_model(args)
    except CheckpointError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ds = PairDataset.from_root(args.root)
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    order = sorted(range(len(ds)), key=ds.name)
    cols = ["name", "psnr", "ssim"] + (["psnrb"] if args.blockiness else [])
    print("\t".join(cols))
    rows = []
    for i in order:
        try:
            clean, noisy = ds.pair(i, dtype=model.dtype)
            if clean.shape[0] != model.config.channels:
                raise DatasetError(f"{ds.clean_paths[i]}: {clean.shape[0]} channels, model expects "
                                   f"{model.config.channels}")
        except DatasetError as exc:
            print(f"dataset error: {exc}", file=sys.stderr)
            return EXIT_DATA
        f = 2 ** model.config.levels
        clean, _ = center_crop(clean, f)
        noisy, _ = center_crop(noisy, f)
        with T.no_grad():
            den = model.denoise(noisy[None]).data[0]
        scores = [psnr(den, clean), ssim(den, clean)]
        if args.blockiness:
            scores.append(psnr_b(den, clean))
        rows.append(scores)
        print("\t".join([ds.name(i)] + [f"{s:.4f}" for s in scores]))
    means = np.mean(rows, axis=0)
    print("\t".join(["mean"] + [f"{s:.4f}" for s in means]))
    return EXIT_OK


def _channel_stats(t: np.ndarray) -> list[dict]:
    return [{"channel": c, "min": float(t[:, c].min()), "mean": float(t[:, c].mean()),
             "std": float(t[:, c].std())} for c in range(t.shape[1])]


def cmd_decompose(args) -> int:
    try:
        model = _load_model(args)
    except CheckpointError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        orig = load_image(args.input, model.dtype)
        img, crop = _load_cropped(args.input, model)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(_crop_note(args.input, orig.shape, crop))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        out = model.forward_decompose(img[None])
    files = []
    for l, band in enumerate(out.lf_bands, 1):
        name = f"lf_level{l}.png"
        save_image(out_dir / name, band.data[0])
        files.append(name)
    lat = out.latent.data
    k = model.plan.signal_channels
    report = {
        "input": str(args.input),
        "crop": dict(zip(("top", "left", "height", "width"), crop)),
        "lf_images": files,
        "latent_channels": int(lat.shape[1]),
        "noise_channels": int(model.plan.k_n),
        "latent": _channel_stats(lat),
        "signal": _channel_stats(lat[:, :k]),
        "noise": _channel_stats(lat[:, k:]),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        if args.generate:
            clean_root = Path(args.out) / "_generated"
            write_procedural_corpus(clean_root, args.generate, args.size, args.seed)
        elif args.clean_root:
            clean_root = Path(args.clean_root)
        else:
            print("error: give CLEAN_ROOT or --generate N", file=sys.stderr)
            return EXIT_CONFIG
        n = synthesize_pairs(clean_root, args.out, args.sigma / 255.0, args.seed)
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {n} pairs to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# property suite
# ---------------------------------------------------------------------------

TOLERANCES = {
    "f32": {"haar_roundtrip": 1e-6, "block_bijectivity": 1e-5, "bijectivity": 1e-4, "gradient": 1e-3},
    "f64": {"haar_roundtrip": 1e-12, "block_bijectivity": 1e-10, "bijectivity": 1e-10, "gradient": 1e-3},
}


FD_STEP = 1e-5


def _broken_inverse(p, v1, v2):
    # fault injection: scale applied with the wrong sign
    s = scale_fn(p.rho(v1), p.alpha)
    u2 = T.mul(T.sub(v2, p.eta(v1)), T.exp(s))
    return T.sub(v1, p.phi(u2)), u2


def run_checks(model: PyramidModel, seed: int, break_inverse: bool = False,
               grad_samples: int = 8) -> list[tuple[str, float, float]]:
    """Return (name, max error, tolerance) for every invariant in the suite."""
    dt = model.config.dtype
    tol = TOLERANCES[dt]
    rng = np.random.default_rng(seed)
    c = model.config.channels
    side = 2 ** model.config.levels * 4
    results = []
    patch = mock.patch("hdiv.pyramid.invblock_inverse", _broken_inverse) if break_inverse else nullcontext()
    with T.no_grad(), patch:
        x = T.Tensor(rng.standard_normal((2, c, side, side)).astype(model.dtype))
        back = idwt_haar(dwt_haar(x)).data
        results.append(("haar_roundtrip", float(np.abs(back - x.data).max()), tol["haar_roundtrip"]))

        worst = 0.0
        h, w = side, side
        for l, blocks in enumerate(model.levels):
            h, w = h // 2, w // 2
            for blk in blocks:
                u1 = T.Tensor(rng.standard_normal((2, blk.c_lf, h, w)).astype(model.dtype))
                u2 = T.Tensor(rng.standard_normal((2, blk.c_hf, h, w)).astype(model.dtype))
                r1, r2 = pyramid.invblock_inverse(blk, *invblock_forward(blk, u1, u2))
                scale = max(1.0, float(np.abs(u1.data).max()), float(np.abs(u2.data).max()))
                err = max(np.abs(r1.data - u1.data).max(), np.abs(r2.data - u2.data).max()) / scale
                worst = max(worst, float(err))
        results.append(("block_bijectivity", worst, tol["block_bijectivity"]))

        y = rng.random((2, c, side, side)).astype(model.dtype)
        rec = model.self_reconstruct(y).data
        results.append(("bijectivity", float(np.abs(rec - y).max()), tol["bijectivity"]))

    results.append(("gradient", _gradient_spot_check(model, rng, grad_samples), tol["gradient"]))
    return results


def _gradient_spot_check(model: PyramidModel, rng: np.random.Generator, n: int) -> float:
    cfg = ModelConfig(**{**model.config.to_dict(), "dtype": "f64"})
    m64 = PyramidModel.create(cfg)
    m64.params.load_state({k: v.astype(np.float64) for k, v in model.params.state().items()})
    side = 2 ** cfg.levels * 2
    clean = rng.random((1, cfg.channels, side, side))
    noisy = clean + 0.1 * rng.standard_normal(clean.shape)

    def loss():
        return compute_losses(m64, clean, noisy, LossWeights())["total"]

    worst = 0.0
    # the default model is deep; h = 1e-3 carries ~1e-3 truncation error there
    for a, num in T.gradient_check(loss, m64.params.values(), n, rng, h=FD_STEP):
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


def cmd_check(args) -> int:
    if args.ckpt:
        try:
            model = _load_model(args)
        except CheckpointError as exc:
            print(f"bad checkpoint: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        model = PyramidModel.create(ModelConfig(dtype=args.dtype or "f32"), seed=args.seed)
        model.randomize(args.seed)
    failed = []
    for name, err, tol in run_checks(model, args.seed, args.break_inverse):
        ok = err <= tol
        print(f"{name:18s} max_err={err:.3e} tol={tol:.0e} {'ok' if ok else 'VIOLATED'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"invariant violated: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdiv", description="Invertible hierarchical image denoiser")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--dtype", choices=["f32", "f64"])
    t.add_argument("--out", help="run directory (overrides run_dir)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise one image")
    d.add_argument("input")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--dtype", choices=["f32", "f64"])
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="score a model on <root>/clean + <root>/noisy pairs")
    e.add_argument("root")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--blockiness", action="store_true", help="add a PSNR-B column")
    e.add_argument("--dtype", choices=["f32", "f64"])
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the invertibility / gradient property suite")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--fresh", action="store_true", help="randomly initialised default model (default)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dtype", choices=["f32", "f64"])
    c.add_argument("--break-inverse", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)

    k = sub.add_parser("decompose", help="dump low-frequency bands and latent statistics")
    k.add_argument("input")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--out", required=True, help="output directory")
    k.add_argument("--dtype", choices=["f32", "f64"])
    k.set_defaults(func=cmd_decompose)

    s = sub.add_parser("synth", help="build a noisy/clean pair dataset with AWGN")
    s.add_argument("clean_root", nargs="?")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=25.0, help="noise std in 8-bit levels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--generate", type=int, default=0, metavar="N",
                   help="generate N procedural clean images instead of reading CLEAN_ROOT")
    s.add_argument("--size", type=int, default=128)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("HDIV_THREADS")
    if threads:
        _kernels.set_threads(int(threads))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
