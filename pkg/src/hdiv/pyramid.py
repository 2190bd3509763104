"""Hierarchical invertible model: L levels of (Haar layer + B coupling blocks).

Level l takes the high-frequency stream h^{l-1} (the image for l = 1), applies
the Haar transform and B blocks, then peels off the first ``channels`` outputs
as that level's low-frequency band. What remains becomes h^l. The final h^L is
the latent whose last ``k_n`` channels are treated as noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .coupling import DEFAULT_GROWTH, InvBlockParams, invblock_forward, invblock_inverse, invblock_log_det
from .tensor import DTYPES, ParamStore, ShapeError, Tensor
from .wavelet import dwt_haar, haar_log_det, idwt_haar


@dataclass
class ModelConfig:
    levels: int = 3
    blocks: int = 8
    channels: int = 3
    noise_fraction: float = 0.4
    subnet: str = "DB"
    growth: int | None = None
    alpha: float = 1.0
    dtype: str = "f32"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if not 0 < self.noise_fraction < 1:
            raise ValueError(f"noise_fraction must lie in (0, 1), got {self.noise_fraction}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.growth is None:
            self.growth = DEFAULT_GROWTH.get(self.subnet, 32)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


def noise_width(c_hf: int, noise_fraction: float) -> int:
    # round half up, not banker's
    return int(np.floor(noise_fraction * c_hf + 0.5))


@dataclass(frozen=True)
class ChannelPlan:
    c_img: int
    c_in: tuple[int, ...]
    c_hf: tuple[int, ...]
    k_n: int

    @classmethod
    def build(cls, c_img: int, levels: int, noise_fraction: float) -> "ChannelPlan":
        c_in, c_hf = [], []
        cur = c_img
        for _ in range(levels):
            c_in.append(cur)
            cur = 4 * cur - c_img
            c_hf.append(cur)
        return cls(c_img, tuple(c_in), tuple(c_hf), noise_width(cur, noise_fraction))

    @property
    def levels(self) -> int:
        return len(self.c_in)

    @property
    def latent_channels(self) -> int:
        return self.c_hf[-1]

    @property
    def signal_channels(self) -> int:
        return self.c_hf[-1] - self.k_n

    def lf_shape(self, level: int, h: int, w: int) -> tuple[int, int, int]:
        f = 2 ** (level + 1)
        return (self.c_img, h // f, w // f)

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = 2 ** self.levels
        return (self.c_hf[-1], h // f, w // f)


@dataclass
class ForwardOutputs:
    lf_bands: list[Tensor]
    latent: Tensor


@dataclass
class LatentSplit:
    signal: Tensor
    noise: Tensor


def disentangle_split(latent: Tensor, plan: ChannelPlan) -> LatentSplit:
    if latent.shape[1] != plan.latent_channels:
        raise ShapeError(f"latent has {latent.shape[1]} channels, plan expects {plan.latent_channels}")
    if plan.k_n <= 0 or plan.k_n >= plan.latent_channels:
        raise ValueError(f"degenerate noise split: k_n={plan.k_n} of {plan.latent_channels} channels")
    signal, noise = T.split_channels(latent, [plan.signal_channels, plan.k_n])
    return LatentSplit(signal, noise)


@dataclass
class PyramidModel:
    config: ModelConfig
    plan: ChannelPlan
    params: ParamStore
    levels: list[list[InvBlockParams]] = field(default_factory=list)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "PyramidModel":
        plan = ChannelPlan.build(config.channels, config.levels, config.noise_fraction)
        if plan.k_n <= 0 or plan.k_n >= plan.latent_channels:
            raise ValueError(f"noise_fraction {config.noise_fraction} gives a degenerate split "
                             f"(k_n={plan.k_n} of {plan.latent_channels})")
        rng = np.random.default_rng(seed)
        params = ParamStore()
        levels = []
        for l in range(config.levels):
            blocks = [
                InvBlockParams.create(config.channels, plan.c_hf[l], config.subnet, config.growth,
                                      config.alpha, params, f"level{l}.block{b}", rng, config.np_dtype)
                for b in range(config.blocks)
            ]
            levels.append(blocks)
        return cls(config, plan, params, levels)

    @property
    def dtype(self):
        return self.config.np_dtype

    def _check_input(self, y: Tensor) -> None:
        if y.ndim != 4 or y.shape[1] != self.config.channels:
            raise ShapeError(f"expected N,{self.config.channels},H,W input, got {y.shape}")
        f = 2 ** self.config.levels
        if y.shape[2] % f or y.shape[3] % f:
            raise ShapeError(f"spatial size {y.shape[2]}x{y.shape[3]} not divisible by {f}")

    def _as_input(self, y) -> Tensor:
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=self.dtype))
        if y.dtype != self.dtype:
            y = Tensor(y.data.astype(self.dtype))
        return y

    def forward_decompose(self, y) -> ForwardOutputs:
        y = self._as_input(y)
        self._check_input(y)
        c = self.config.channels
        h = y
        lf_bands = []
        for l, blocks in enumerate(self.levels):
            u1, u2 = T.split_channels(dwt_haar(h), [c, self.plan.c_hf[l]])
            for blk in blocks:
                u1, u2 = invblock_forward(blk, u1, u2)
            lf_bands.append(u1)
            h = u2
        return ForwardOutputs(lf_bands, h)

    def inverse_reconstruct(self, lf_bands: list[Tensor], latent_hat: Tensor) -> Tensor:
        if len(lf_bands) != self.config.levels:
            raise ShapeError(f"expected {self.config.levels} low-frequency bands, got {len(lf_bands)}")
        h = latent_hat
        for l in reversed(range(self.config.levels)):
            v1 = lf_bands[l]
            if v1.shape[1] != self.config.channels or v1.shape[2:] != h.shape[2:] or v1.shape[0] != h.shape[0]:
                raise ShapeError(f"level {l}: band {v1.shape} incompatible with stream {h.shape}")
            if h.shape[1] != self.plan.c_hf[l]:
                raise ShapeError(f"level {l}: stream has {h.shape[1]} channels, expected {self.plan.c_hf[l]}")
            v2 = h
            for blk in reversed(self.levels[l]):
                v1, v2 = invblock_inverse(blk, v1, v2)
            h = idwt_haar(T.concat_channels([v1, v2]))
        return h

    def zero_noise(self, latent: Tensor) -> Tensor:
        split = disentangle_split(latent, self.plan)
        zeros = Tensor(np.zeros(split.noise.shape, dtype=latent.dtype))
        return T.concat_channels([split.signal, zeros])

    def denoise(self, y) -> Tensor:
        out = self.forward_decompose(y)
        return self.inverse_reconstruct(out.lf_bands, self.zero_noise(out.latent))

    def self_reconstruct(self, y) -> Tensor:
        out = self.forward_decompose(y)
        split = disentangle_split(out.latent, self.plan)
        return self.inverse_reconstruct(out.lf_bands, T.concat_channels([split.signal, split.noise]))

    def log_det(self, y) -> float:
        """log|det J| of the forward map summed over the batch (diagnostic, no graph)."""
        y = self._as_input(y)
        self._check_input(y)
        c = self.config.channels
        n = y.shape[0]
        total = 0.0
        with T.no_grad():
            h = y
            for l, blocks in enumerate(self.levels):
                total += n * haar_log_det(h.shape[1], h.shape[2], h.shape[3])
                u1, u2 = T.split_channels(dwt_haar(h), [c, self.plan.c_hf[l]])
                for blk in blocks:
                    total += invblock_log_det(blk, u1, u2)
                    u1, u2 = invblock_forward(blk, u1, u2)
                h = u2
        return total

    def randomize(self, seed: int, gain: float = 0.5) -> None:
        """Overwrite every parameter, final layers included, with random values.

        Weights get std ``gain / sqrt(fan_in)``, biases std ``0.1 * gain``. Used by
        the bijectivity checks, where identity-initialised blocks would be vacuous.
        """
        rng = np.random.default_rng(seed)
        for p in self.params.values():
            if p.ndim > 1:
                std = gain / np.sqrt(np.prod(p.shape[1:]))
            else:
                std = 0.1 * gain
            p.data = (rng.standard_normal(p.shape) * std).astype(self.dtype)


# free-function spellings of the model operations
def forward_decompose(m: PyramidModel, y) -> ForwardOutputs:
    return m.forward_decompose(y)


def inverse_reconstruct(m: PyramidModel, lf_bands, latent_hat) -> Tensor:
    return m.inverse_reconstruct(lf_bands, latent_hat)


def denoise(m: PyramidModel, y) -> Tensor:
    return m.denoise(y)


def self_reconstruct(m: PyramidModel, y) -> Tensor:
    return m.self_reconstruct(y)
