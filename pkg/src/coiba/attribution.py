"""Fitting damping ratios and turning them into attribution maps."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .bottleneck import (
    BottleneckHooks,
    BottleneckSpec,
    DampingParams,
    LayerStats,
    compression_term,
    estimate_stats,
    kl_capacity,
)
from .errors import ConfigError, DimensionError, OptimizationError

LN2 = math.log(2.0)


@dataclass
class AttributionMap:
    token_scores: np.ndarray
    pixel_map: np.ndarray
    method: str
    layers: tuple
    seed: int
    iterations: int
    beta: float = 1.0
    loss_ce: float = float("nan")
    loss_compression: float = float("nan")
    runtime_ms: float = 0.0
    target: int = -1
    bottleneck_probs: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    layer_scores: Dict[int, np.ndarray] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)

    @property
    def bottleneck_correct(self) -> bool:
        return self.bottleneck_probs is not None and int(np.argmax(self.bottleneck_probs)) == self.target

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "layers": list(self.layers),
            "beta": self.beta,
            "iterations": self.iterations,
            "seed": int(self.seed),
            "target": int(self.target),
            "token_scores": [float(v) for v in self.token_scores],
            "loss_ce": float(self.loss_ce),
            "loss_compression": float(self.loss_compression),
            "runtime_ms": float(self.runtime_ms),
        }


# -- optimiser ----------------------------------------------------------
@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, alpha: np.ndarray, lr: float = 1.0) -> "OptimizerState":
        return cls(np.zeros_like(alpha), np.zeros_like(alpha), 0, lr)


def adam_step(state: OptimizerState, alpha: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns ``(new_alpha, state)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if alpha.shape != grad.shape or state.m.shape != alpha.shape:
        raise DimensionError(f"adam shapes differ: alpha {alpha.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizationError("non-finite gradient", iteration=state.step)
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1**t)
    vhat = v / (1 - state.beta2**t)
    new = alpha - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, OptimizerState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


# -- upsampling ---------------------------------------------------------
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1 - w
    mat[np.arange(n_out), hi] += w
    return mat


def upsample_scores(token_scores, image_size: int, mode: str = "bilinear") -> np.ndarray:
    """Map a row-major sqrt(P) x sqrt(P) token grid onto an image_size^2 pixel grid."""
    scores = np.asarray(token_scores, dtype=np.float64).ravel()
    g = int(round(math.sqrt(scores.size)))
    if g * g != scores.size or g == 0:
        raise ConfigError(f"token count {scores.size} is not a perfect square")
    grid = scores.reshape(g, g)
    if mode == "nearest":
        if image_size % g:
            raise ConfigError("nearest upsampling needs image_size divisible by the grid")
        k = image_size // g
        return np.kron(grid, np.ones((k, k)))
    if mode != "bilinear":
        raise ConfigError(f"unknown upsampling mode {mode!r}")
    mat = _interp_matrix(image_size, g)
    return mat @ grid @ mat.T


# -- the optimisation problem -------------------------------------------
def derive_seed(base_seed: int, index: int) -> int:
    """Per-job seed, a stable hash of ``(base_seed, index)``."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def calibrate_stats(model: vit.ModelCheckpoint, images, layers: Sequence[int]) -> Dict[int, LayerStats]:
    """Layer statistics pooled over the patch tokens of a calibration set."""
    _, trace = vit.forward(model, np.asarray(images), record=True)
    return {l: estimate_stats(trace.block_inputs[l][:, 1:, :], mode="calibration") for l in layers}


class BottleneckProblem:
    """One image, one target: the stochastic objective over ``alpha``.

    The clean forward pass is run once; every evaluation restarts from the
    residual stream entering the first hooked block.
    """

    def __init__(self, model: vit.ModelCheckpoint, image, target: int, spec: BottleneckSpec,
                 stats: Optional[Dict[int, LayerStats]] = None):
        cfg = model.config
        if not 0 <= int(target) < cfg.num_classes:
            raise IndexError(f"target {target} out of range for {cfg.num_classes} classes")
        self.model = model
        self.spec = spec.resolved(cfg.depth)
        self.target = int(target)
        self.params = vit._Params(model)
        arr, _ = vit._as_batch(image, cfg)
        if arr.shape[0] != 1:
            raise DimensionError("attribution expects a single image")
        self.image = arr
        _, clean = vit.forward(model, arr, record=True, params=self.params)
        self.clean_inputs = clean.block_inputs
        if stats is None:
            if self.spec.stats_mode == "calibration":
                raise ConfigError("calibration stats mode needs precomputed stats (see calibrate_stats)")
            stats = {l: estimate_stats(self.clean_inputs[l][0, 1:, :], self.spec.stats_mode)
                     for l in self.spec.layers}
        self.stats = stats
        self.tokens = cfg.num_patches + (1 if self.spec.include_cls else 0)
        self.channels = cfg.embed_dim if self.spec.per_channel else 1
        train_seq, eval_seq = np.random.SeedSequence(self.spec.seed).spawn(2)
        self.train_rng = np.random.default_rng(train_seq)
        self.eval_gauss = self.draw(np.random.default_rng(eval_seq))

    def draw(self, rng: np.random.Generator) -> Dict[int, np.ndarray]:
        shape = (self.spec.noise_batch, self.tokens, self.model.config.embed_dim)
        return {l: rng.standard_normal(shape) for l in self.spec.layers}

    def initial_alpha(self) -> np.ndarray:
        return np.full((self.tokens, self.channels), 5.0)

    def run(self, damping: DampingParams, gauss: Dict[int, np.ndarray]):
        s = self.spec.s
        start = self.clean_inputs[s]
        x = Tensor(np.broadcast_to(start, (self.spec.noise_batch,) + start.shape[1:]))
        hooks = BottleneckHooks(self.spec.layers, damping, self.stats, gauss, self.spec.include_cls)
        return vit.run_blocks(self.model, x, s, hooks, self.params)

    def objective(self, alpha: np.ndarray, gauss: Dict[int, np.ndarray], grad: bool = False):
        """Return ``(loss, ce, compression, d loss / d alpha or None, logits, trace, damping)``."""
        damping = DampingParams(np.asarray(alpha, dtype=np.float64), requires_grad=grad)
        logits, trace = self.run(damping, gauss)
        targets = np.full(logits.shape[0], self.target)
        ce = ad.cross_entropy(logits, targets)
        comp = compression_term(trace, self.spec, damping, self.stats)
        if self.spec.mode == "coiba_per_layer_beta":
            loss = ce + comp
        else:
            loss = ce + ad.scale(comp, self.spec.beta)
        g = None
        if grad:
            loss.backward()
            g = damping.alpha.grad
            if g is None:
                g = np.zeros_like(damping.alpha.data)
        return loss.item(), ce.item(), comp.item(), g, logits, trace, damping

    def fit(self, alpha: Optional[np.ndarray] = None):
        alpha = self.initial_alpha() if alpha is None else np.asarray(alpha, dtype=np.float64)
        state = OptimizerState.like(alpha, self.spec.lr)
        history = []
        for it in range(self.spec.iterations):
            loss, ce, comp, g, *_ = self.objective(alpha, self.draw(self.train_rng), grad=True)
            if not np.isfinite(loss):
                raise OptimizationError("non-finite loss", iteration=it)
            if not np.all(np.isfinite(g)):
                raise OptimizationError("non-finite gradient", iteration=it)
            alpha, state = adam_step(state, alpha, g)
            history.append({"iteration": it, "loss": loss, "ce": ce, "compression": comp})
        return alpha, history

    def readout(self, alpha: np.ndarray):
        """Token scores (bits) at ``alpha`` under the frozen evaluation noise."""
        loss, ce, comp, _, logits, trace, damping = self.objective(alpha, self.eval_gauss)
        probs = ad.softmax(logits, axis=-1).data.mean(axis=0)
        p = self.model.config.num_patches
        layer_scores = {}
        for l in self.spec.layers:
            cap = kl_capacity(trace.r_prime[l], damping, self.stats[l]).data
            per_token = cap.mean(axis=0).sum(axis=-1) / LN2
            layer_scores[l] = per_token[-p:]
        if self.spec.readout == "lambda":
            scores = damping.lam.data.mean(axis=1)[-p:]
        elif self.spec.readout == "first-layer":
            scores = layer_scores[self.spec.s]
        else:
            scores = np.mean([layer_scores[l] for l in self.spec.layers], axis=0)
        return scores, ce, comp, probs, damping.lam.data, layer_scores


def _attribute(model, image, target, spec: BottleneckSpec, method: str,
               stats=None, pixel_mode="bilinear") -> AttributionMap:
    t0 = time.perf_counter()
    problem = BottleneckProblem(model, image, target, spec, stats)
    alpha, history = problem.fit()
    scores, ce, comp, probs, lam, layer_scores = problem.readout(alpha)
    runtime = (time.perf_counter() - t0) * 1000.0
    scores = np.maximum(scores, 0.0)
    sp = problem.spec
    return AttributionMap(
        token_scores=scores,
        pixel_map=upsample_scores(scores, model.config.image_size, pixel_mode),
        method=method,
        layers=(sp.s, sp.e),
        seed=sp.seed,
        iterations=sp.iterations,
        beta=sp.beta,
        loss_ce=ce,
        loss_compression=comp,
        runtime_ms=runtime,
        target=int(target),
        bottleneck_probs=probs,
        lam=lam,
        layer_scores=layer_scores,
        history=history,
    )


def attribute_coiba(model, image, target: int, spec: BottleneckSpec, stats=None) -> AttributionMap:
    """Fit one damping ratio shared by layers ``s..e``; score tokens by capacity."""
    if spec.mode not in ("coiba", "coiba_per_layer_beta"):
        spec = BottleneckSpec(**{**spec.__dict__, "mode": "coiba"})
    return _attribute(model, image, target, spec, spec.mode, stats)


def attribute_iba(model, image, target: int, layer: int, beta: float = 10.0,
                  spec: Optional[BottleneckSpec] = None, per_channel: bool = False,
                  stats=None) -> AttributionMap:
    """Single-layer bottleneck at ``layer`` (the CoIBA loop with ``s == e``)."""
    base = spec or BottleneckSpec()
    spec = BottleneckSpec(**{**base.__dict__, "mode": "coiba", "s": layer, "e": layer,
                             "beta": beta, "betas": None, "per_channel": per_channel})
    out = _attribute(model, image, target, spec, "iba", stats)
    return out


def attribute_iba_star(model, image, target: int, layers: Sequence[int], beta: float = 10.0,
                       weights: Optional[Sequence[float]] = None,
                       spec: Optional[BottleneckSpec] = None, stats=None) -> AttributionMap:
    """Weighted sum of independent per-layer IBA maps."""
    layers = list(layers)
    if weights is None:
        weights = [1.0 / len(layers)] * len(layers)
    weights = np.asarray(weights, dtype=np.float64)
    if (len(weights) != len(layers) or np.any(weights < 0)
            or not math.isclose(weights.sum(), 1.0, rel_tol=0, abs_tol=1e-9)):
        raise ConfigError("IBA* weights must be non-negative, one per layer, summing to 1")
    t0 = time.perf_counter()
    maps = [attribute_iba(model, image, target, l, beta, spec, stats=stats) for l in layers]
    scores = sum(w * m.token_scores for w, m in zip(weights, maps))
    runtime = (time.perf_counter() - t0) * 1000.0
    first = maps[0]
    return AttributionMap(
        token_scores=scores,
        pixel_map=upsample_scores(scores, model.config.image_size),
        method="iba_star",
        layers=(layers[0], layers[-1]),
        seed=first.seed,
        iterations=first.iterations,
        beta=beta,
        loss_ce=float(np.mean([m.loss_ce for m in maps])),
        loss_compression=float(np.mean([m.loss_compression for m in maps])),
        runtime_ms=runtime,
        target=int(target),
        layer_scores={l: m.token_scores for l, m in zip(layers, maps)},
    )


def attribute(model, image, target: int, spec: BottleneckSpec, method: str = "coiba",
              stats=None) -> AttributionMap:
    """Dispatch by method name: ``coiba``, ``iba`` (at layer ``s``) or ``iba-star``."""
    spec = spec.resolved(model.config.depth)
    method = method.replace("-", "_")
    if method == "coiba":
        return attribute_coiba(model, image, target, spec, stats)
    if method == "iba":
        return attribute_iba(model, image, target, spec.s, spec.beta, spec, spec.per_channel, stats)
    if method == "iba_star":
        return attribute_iba_star(model, image, target, spec.layers, spec.beta, spec=spec, stats=stats)
    raise ConfigError(f"unknown attribution method {method!r}")


# -- batches of images --------------------------------------------------
_WORKER_MODEL = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _job(args):
    image, target, spec, method, stats = args
    return attribute(_WORKER_MODEL, image, target, spec, method, stats)


def attribute_many(model, images, targets, spec: BottleneckSpec, method: str = "coiba",
                   jobs: int = 1, base_seed: Optional[int] = None,
                   stats: Optional[Dict[int, LayerStats]] = None) -> List[AttributionMap]:
    """Attribute a list of images; job ``i`` uses seed ``derive_seed(base_seed, i)``.

    Results come back in input order and do not depend on ``jobs``.
    """
    base = spec.seed if base_seed is None else base_seed
    tasks = [
        (np.asarray(img), int(t), BottleneckSpec(**{**spec.__dict__, "seed": derive_seed(base, i)}),
         method, stats)
        for i, (img, t) in enumerate(zip(images, targets))
    ]
    if jobs <= 1 or len(tasks) <= 1:
        return [attribute(model, *task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
        return list(pool.map(_job, tasks))
