"""Noise injection, layer statistics and the Gaussian capacity bound.

A bottleneck at layer ``l`` replaces each (patch) token of the residual
stream by ``lam * r + (1 - lam) * eps`` with ``eps ~ N(mu_l, sigma_l^2)``.
Its information cost per element is the KL divergence from that conditional
Gaussian to the prior ``N(mu_l, sigma_l^2)``, in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, StatsError

EPS_STD = 1e-5
ALPHA_INIT = 5.0
MODES = ("iba", "iba_star", "coiba", "coiba_per_layer_beta")
STATS_MODES = ("per-sample", "calibration")
READOUTS = ("capacity", "lambda", "first-layer")


@dataclass
class LayerStats:
    mean: np.ndarray
    std: np.ndarray
    mode: str = "per-sample"

    def __post_init__(self):
        if np.any(~(self.std >= EPS_STD)):
            raise StatsError(f"std below floor {EPS_STD}")


def estimate_stats(activations, mode: str = "per-sample", eps_std: float = EPS_STD) -> LayerStats:
    """Per-channel mean/std (population convention), std floored at ``eps_std``.

    ``per-sample`` expects ``[tokens, d]``; ``calibration`` pools the tokens of
    ``[K, tokens, d]`` (or an iterable of ``[tokens, d]``).
    """
    if mode not in STATS_MODES:
        raise StatsError(f"unknown stats mode {mode!r}")
    if isinstance(activations, Tensor):
        activations = activations.data
    elif not hasattr(activations, "shape"):
        activations = np.stack(list(activations))
    arr = np.asarray(activations, dtype=np.float64)
    if mode == "per-sample":
        if arr.ndim != 2:
            raise DimensionError(f"per-sample stats need [tokens, d], got {arr.shape}")
        if arr.shape[0] < 2:
            raise StatsError("per-sample stats need at least 2 tokens")
    else:
        if arr.ndim != 3:
            raise DimensionError(f"calibration stats need [K, tokens, d], got {arr.shape}")
        arr = arr.reshape(-1, arr.shape[-1])
    mu = arr.mean(axis=0)
    sigma = np.maximum(arr.std(axis=0), eps_std)
    return LayerStats(mu, sigma, mode)


class DampingParams:
    """Trainable logits ``alpha``; ``lam = sigmoid(alpha)``.

    ``alpha`` has shape ``[T, 1]`` (one ratio per token, shared by every
    channel) or ``[T, d]`` for the per-channel ablation. ``neg_log1m`` is
    ``-log(1 - lam)`` evaluated as ``softplus(alpha)``.
    """

    def __init__(self, alpha, requires_grad: bool = False):
        self.alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha, requires_grad=requires_grad)
        if self.alpha.ndim != 2:
            raise DimensionError(f"alpha must be [T, 1] or [T, d], got {self.alpha.shape}")
        self.lam = ad.sigmoid(self.alpha)
        self.neg_log1m = ad.softplus(self.alpha)

    @classmethod
    def init(cls, tokens: int, channels: int = 1, value: float = ALPHA_INIT) -> "DampingParams":
        return cls(np.full((tokens, channels), value), requires_grad=True)

    @classmethod
    def from_lambda(cls, lam) -> "DampingParams":
        """Fixed ratios given directly (endpoints 0 and 1 allowed)."""
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim == 1:
            lam = lam[:, None]
        obj = cls.__new__(cls)
        with np.errstate(divide="ignore"):
            obj.alpha = Tensor(np.log(lam) - np.log1p(-lam))
            obj.neg_log1m = Tensor(-np.log1p(-lam))
        obj.lam = Tensor(lam)
        return obj

    @property
    def tokens(self) -> int:
        return self.lam.shape[0]


def draw_noise(stats: LayerStats, gauss: np.ndarray) -> np.ndarray:
    """``eps = mu + sigma * g`` for standard-normal ``g`` of shape ``[..., T, d]``."""
    return stats.mean + stats.std * gauss


def apply_bottleneck(r_prime, lam, noise, include_cls: bool = False) -> Tensor:
    """Mix tokens with noise: ``Z = lam * R' + (1 - lam) * eps``.

    ``r_prime`` is the residual stream ``[..., 1+P, d]``; the class token (index
    0) passes through unless ``include_cls``. ``lam`` is ``[T, 1]`` or
    ``[T, d]`` and ``noise`` is ``[..., T, d]`` with ``T`` the perturbed token
    count.
    """
    r_prime = ad.as_tensor(r_prime)
    lam = lam.lam if isinstance(lam, DampingParams) else ad.as_tensor(lam)
    if lam.ndim == 1:
        lam = lam.reshape(-1, 1)
    first = 0 if include_cls else 1
    tokens = r_prime[..., first:, :]
    if lam.shape[0] != tokens.shape[-2] or lam.shape[1] not in (1, tokens.shape[-1]):
        raise DimensionError(f"lambda {lam.shape} does not fit tokens {tokens.shape}")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-2:] != tokens.shape[-2:]:
        raise DimensionError(f"noise {noise.shape} does not fit tokens {tokens.shape}")
    z = lam * tokens + ad.sub(1.0, lam) * Tensor(noise)
    if include_cls:
        return z
    return ad.concat([r_prime[..., :1, :], z], axis=-2)


def kl_capacity(r_prime, damping, stats: LayerStats) -> Tensor:
    """Per-element KL[N(lam r + (1-lam) mu, (1-lam)^2 sigma^2) || N(mu, sigma^2)] in nats.

    ``r_prime`` holds only the perturbed tokens, ``[..., T, d]``.
    """
    if not isinstance(damping, DampingParams):
        damping = DampingParams.from_lambda(damping)
    if np.any(~(stats.std >= EPS_STD)):
        raise StatsError(f"std below floor {EPS_STD}")
    r = ad.as_tensor(r_prime)
    lam = damping.lam
    c = (r - stats.mean) * (1.0 / stats.std)
    one_minus = ad.sub(1.0, lam)
    quad = ad.square(one_minus) + ad.square(lam) * ad.square(c)
    return damping.neg_log1m + ad.scale(quad, 0.5) - 0.5


def capacity_numpy(r, lam, mu, sigma) -> np.ndarray:
    """Closed-form capacity on plain arrays; handy for tests and sweeps."""
    r, lam = np.asarray(r, float), np.asarray(lam, float)
    c = (r - mu) / sigma
    return -np.log1p(-lam) + ((1 - lam) ** 2 + lam**2 * c**2) / 2 - 0.5


@dataclass
class BottleneckSpec:
    mode: str = "coiba"
    s: Optional[int] = None
    e: Optional[int] = None
    beta: float = 1.0
    betas: Optional[list] = None
    iterations: int = 10
    lr: float = 1.0
    noise_batch: int = 10
    seed: int = 0
    stats_mode: str = "per-sample"
    per_channel: bool = False
    include_cls: bool = False
    readout: str = "capacity"
    calibration_size: int = 32

    def resolved(self, depth: int) -> "BottleneckSpec":
        """Fill ``s``/``e`` from the model depth (``ceil(depth/3)``..``depth``) and validate."""
        spec = BottleneckSpec(**self.__dict__)
        if spec.s is None:
            spec.s = max(1, math.ceil(depth / 3))
        if spec.e is None:
            spec.e = depth
        spec.validate(depth)
        return spec

    def validate(self, depth: Optional[int] = None) -> "BottleneckSpec":
        errors = []
        if self.mode not in MODES:
            errors.append(f"bottleneck.mode must be one of {MODES}, got {self.mode!r}")
        if self.s is not None and self.e is not None:
            if not 1 <= self.s <= self.e:
                errors.append(f"bottleneck.s={self.s} must satisfy 1 <= s <= e={self.e}")
            if depth is not None and self.e > depth:
                errors.append(f"bottleneck.e={self.e} exceeds model depth {depth}")
        if not self.beta >= 0:
            errors.append("bottleneck.beta must be >= 0")
        if self.betas is not None:
            if self.s is not None and self.e is not None and len(self.betas) != self.e - self.s + 1:
                errors.append("bottleneck.betas needs one entry per hooked layer")
            if any(not b >= 0 for b in self.betas):
                errors.append("bottleneck.betas entries must be >= 0")
        if self.iterations < 0:
            errors.append("bottleneck.iterations must be >= 0")
        if self.noise_batch < 1:
            errors.append("bottleneck.noise_batch must be >= 1")
        if not self.lr > 0:
            errors.append("bottleneck.lr must be > 0")
        if self.stats_mode not in STATS_MODES:
            errors.append(f"bottleneck.stats_mode must be one of {STATS_MODES}")
        if self.readout not in READOUTS:
            errors.append(f"bottleneck.readout must be one of {READOUTS}")
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def layers(self) -> list:
        return list(range(self.s, self.e + 1))

    def layer_betas(self) -> list:
        return list(self.betas) if self.betas is not None else [self.beta] * len(self.layers)


class BottleneckHooks:
    """Injection points handed to :func:`coiba.vit.run_blocks`.

    ``gauss`` maps each layer to standard-normal draws ``[B, T, d]`` (or
    ``[T, d]``); the noise actually injected is ``mu_l + sigma_l * g``.
    """

    def __init__(self, layers: Iterable[int], damping: DampingParams,
                 stats: Dict[int, LayerStats], gauss: Dict[int, np.ndarray],
                 include_cls: bool = False):
        self.layers = list(layers)
        self.damping = damping
        self.stats = stats
        self.gauss = gauss
        self.include_cls = include_cls

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers

    def apply(self, layer: int, x: Tensor, trace) -> Tensor:
        first = 0 if self.include_cls else 1
        eps = draw_noise(self.stats[layer], self.gauss[layer])
        z = apply_bottleneck(x, self.damping, eps, self.include_cls)
        trace.r_prime[layer] = x[..., first:, :]
        trace.z[layer] = z[..., first:, :]
        trace.noise[layer] = eps
        trace.stats[layer] = self.stats[layer]
        return z


def compression_term(trace, spec: BottleneckSpec, damping: DampingParams,
                     stats: Dict[int, LayerStats]) -> Tensor:
    """Information cost being minimised.

    ``coiba``/``iba``: mean capacity of the first hooked layer only.
    ``coiba_per_layer_beta``: ``(1/L) * sum_l beta_l * mean capacity_l``.
    """
    missing = [l for l in spec.layers if l not in trace.r_prime]
    if missing:
        raise ContractError(f"trace lacks hooked layers {missing}")
    if spec.mode == "coiba_per_layer_beta":
        terms = [ad.scale(kl_capacity(trace.r_prime[l], damping, stats[l]).mean(), b)
                 for l, b in zip(spec.layers, spec.layer_betas())]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return ad.scale(total, 1.0 / len(terms))
    return kl_capacity(trace.r_prime[spec.s], damping, stats[spec.s]).mean()
