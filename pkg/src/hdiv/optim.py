"""Adam, step-decay learning rate and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import PairDataset, make_guides, sample_batch
from .losses import LossWeights, dist_loss, guide_loss, recon_loss, total_loss
from .metrics import psnr
from .pyramid import ModelConfig, PyramidModel
from .tensor import ParamStore

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "lr", "recon", "guide", "dist", "total", "val_psnr")
VAL_STREAM = 2 ** 40  # rng stream id for the fixed validation patches


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> ParamStore:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        if not np.isfinite(g).all():
            raise T.NonFiniteError(f"{name}: non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(f)
    return norm


@dataclass
class TrainConfig:
    lr: float = 2e-4
    decay_every: int = 5000
    iterations: int = 10000
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(levels=2, blocks=2, subnet="RB"))
    augment: bool = True
    clip_grad: bool = False
    clip_norm: float = 10.0
    val_every: int = 500
    val_patches: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.decay_every <= 0:
            raise ValueError(f"decay_every must be positive, got {self.decay_every}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        f = 2 ** self.model.levels
        if self.patch_size % f:
            raise ValueError(f"patch_size {self.patch_size} not divisible by {f}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, it: int) -> float:
    if it < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr * 0.5 ** (it // cfg.decay_every)


def compute_losses(model: PyramidModel, clean: np.ndarray, noisy: np.ndarray,
                   weights: LossWeights) -> dict[str, T.Tensor]:
    """Forward decomposition, noise-zeroed reconstruction and the three loss terms."""
    guides = make_guides(clean, model.config.levels)
    out = model.forward_decompose(noisy)
    restored = model.inverse_reconstruct(out.lf_bands, model.zero_noise(out.latent))
    parts = {
        "recon": recon_loss(clean, restored),
        "guide": guide_loss(out.lf_bands, guides),
        "dist": dist_loss(out.latent),
    }
    parts["total"] = total_loss(parts["recon"], parts["guide"], parts["dist"], weights)
    return parts


def evaluate_psnr(model: PyramidModel, clean: np.ndarray, noisy: np.ndarray, chunk: int = 8) -> float:
    """Mean per-image PSNR of the denoised batch (clamped) against ``clean``."""
    scores = []
    with T.no_grad():
        for s in range(0, clean.shape[0], chunk):
            den = model.denoise(noisy[s:s + chunk]).data
            scores.extend(psnr(d, c) for d, c in zip(den, clean[s:s + chunk]))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    model: PyramidModel
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_psnr: float
    best_iter: int


def validation_set(cfg: TrainConfig, ds: PairDataset) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, VAL_STREAM])
    return sample_batch(ds, cfg.val_patches, cfg.patch_size, rng, do_augment=False,
                        dtype=cfg.model.np_dtype)


def _diagnostics(model: PyramidModel, it: int, history: list[dict], exc: Exception) -> dict:
    norms = {k: float(np.sqrt(np.sum(p.data.astype(np.float64) ** 2))) for k, p in model.params.items()}
    return {"iteration": it, "error": str(exc), "last_rows": history[-5:],
            "param_norms": norms}


def train_loop(cfg: TrainConfig, dataset: PairDataset, val_dataset: PairDataset | None = None,
               on_row: Callable[[dict], None] | None = None,
               dump_dir: str | Path | None = None) -> TrainResult:
    model = PyramidModel.create(cfg.model, seed=cfg.seed)
    dtype = cfg.model.np_dtype
    state = AdamState()
    history: list[dict] = []
    best_state = model.params.state()
    best_psnr, best_iter = -math.inf, 0
    val = None
    if cfg.iterations and cfg.val_every > 0 and cfg.val_patches > 0:
        val = validation_set(cfg, val_dataset or dataset)

    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        clean, noisy = sample_batch(dataset, cfg.batch_size, cfg.patch_size, rng, cfg.augment, dtype)
        lr = lr_at(cfg, it)
        model.params.zero_grad()
        try:
            parts = compute_losses(model, clean, noisy, cfg.weights)
            T.backward(parts["total"])
            grads = model.params.grads()
            if cfg.clip_grad:
                clip_grad_norm(grads, cfg.clip_norm)
            adam_step(state, model.params, grads, lr)
        except FloatingPointError as exc:
            diag = _diagnostics(model, it, history, exc)
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                (Path(dump_dir) / "diverged.json").write_text(json.dumps(diag, indent=2))
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}", diag) from exc
        row = {"iter": it, "lr": lr, **{k: float(v.data) for k, v in parts.items()}, "val_psnr": None}
        done = it + 1
        if val is not None and (done % cfg.val_every == 0 or done == cfg.iterations):
            row["val_psnr"] = evaluate_psnr(model, *val)
            if row["val_psnr"] > best_psnr:
                best_psnr, best_iter = row["val_psnr"], done
                best_state = model.params.state()
            log.info("iter %d  total %.5f  val_psnr %.3f dB", done, row["total"], row["val_psnr"])
        history.append(row)
        if on_row is not None:
            on_row(row)
    model.params.zero_grad()
    return TrainResult(model, history, best_state, best_psnr, best_iter)


def format_row(row: dict) -> list[str]:
    out = []
    for col in HISTORY_COLUMNS:
        v = row[col]
        if v is None:
            out.append("")
        elif col == "iter":
            out.append(str(v))
        else:
            out.append(repr(float(v)))
    return out


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow(format_row(row))


def read_history(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "iter" else (float(v) if v else None)) for k, v in r.items()})
        return rows
