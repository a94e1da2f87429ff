"""A small pre-norm Vision Transformer built on :mod:`coiba.autodiff`.

Blocks are numbered from 1 when addressed as bottleneck layers (``s``/``e``)
and from 0 in parameter names and in :func:`randomize_parameters`.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ParseError, TrainingError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CIBT"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    depth: int = 6
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    seed: int = 0

    def validate(self) -> "ModelConfig":
        errors = []
        for name in ("image_size", "patch_size", "channels", "depth", "embed_dim", "heads",
                     "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                errors.append(f"model.{name} must be >= 1")
        if not errors:
            if self.image_size % self.patch_size:
                errors.append("model.image_size must be divisible by model.patch_size")
            if self.embed_dim % self.heads:
                errors.append("model.embed_dim must be divisible by model.heads")
            if self.num_classes < 2:
                errors.append("model.num_classes must be >= 2")
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def block_names(self, index: int) -> list:
        prefix = f"blocks.{index}."
        return [k for k in self.params if k.startswith(prefix)]


@dataclass
class ActivationTrace:
    """Per hooked layer (1-based): perturbed input, bottleneck output, noise."""

    r_prime: Dict[int, Tensor] = field(default_factory=dict)
    z: Dict[int, Tensor] = field(default_factory=dict)
    noise: Dict[int, np.ndarray] = field(default_factory=dict)
    stats: Dict[int, object] = field(default_factory=dict)
    block_inputs: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def layers(self) -> list:
        return sorted(self.r_prime)


# -- parameters ---------------------------------------------------------
def _param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d), p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden), p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d), p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.weight": (d,), "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _init_tensor(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if "norm" in name:
        return np.ones(shape) if leaf == "weight" else np.zeros(shape)
    if leaf == "bias":
        return np.zeros(shape)
    if len(shape) == 2 and leaf == "weight":
        # fan-in scaling; std 0.02 leaves the toy task stuck at chance for many epochs
        return _trunc_normal(rng, shape, std=1.0 / np.sqrt(shape[0]))
    return _trunc_normal(rng, shape)


def init_model(config: ModelConfig) -> ModelCheckpoint:
    """Deterministic init: truncated-normal weights (std 1/sqrt(fan_in); 0.02 for
    class token and positions), unit norm scales, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {name: _init_tensor(name, shape, rng) for name, shape in _param_shapes(config).items()}
    return ModelCheckpoint(config, params)


def randomize_parameters(model: ModelCheckpoint, mode: str, layer_index: int,
                         seed: int = 1234) -> ModelCheckpoint:
    """Re-draw block weights for a parameter-randomization sanity check.

    ``independent`` re-draws block ``layer_index`` only; ``cumulative``
    re-draws every block ``>= layer_index`` plus the final norm and head, so
    ``layer_index == depth`` touches the head alone. Patch embedding, class
    token and positional embedding are never touched.
    """
    depth = model.config.depth
    limit = depth if mode == "cumulative" else depth - 1
    if mode not in ("independent", "cumulative"):
        raise ConfigError(f"unknown randomization mode {mode!r}")
    if not 0 <= layer_index <= limit:
        raise IndexError(f"layer_index {layer_index} out of range [0, {limit}] for {mode}")
    rng = np.random.default_rng([seed, layer_index, 0 if mode == "independent" else 1])
    out = model.copy()
    if mode == "independent":
        names = model.block_names(layer_index)
    else:
        names = [n for i in range(layer_index, depth) for n in model.block_names(i)]
        names += ["norm.weight", "norm.bias", "head.weight", "head.bias"]
    for name in names:
        shape = out.params[name].shape
        if name.endswith("bias") or "norm" in name:
            # identity-initialised tensors would not change; perturb them too
            out.params[name] = rng.standard_normal(shape) * (0.5 if "norm" in name else 0.02)
            if name.endswith("weight"):
                out.params[name] += 1.0
        else:
            out.params[name] = _trunc_normal(rng, shape, std=float(model.params[name].std()) or 0.02)
    return out


# -- forward ------------------------------------------------------------
def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[B, H, W, ch] -> [B, P, patch*patch*ch], row-major over the patch grid."""
    b = images.shape[0]
    g, ps, ch = cfg.grid, cfg.patch_size, cfg.channels
    x = images.reshape(b, g, ps, g, ps, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, ps * ps * ch)


def _as_batch(image, cfg: ModelConfig):
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    single = arr.ndim == 3
    if arr.ndim == 2 and cfg.channels == 1:
        arr, single = arr[..., None], True
    if single:
        arr = arr[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise DimensionError(f"image shape {arr.shape} does not match config {expected}")
    return arr, single


class _Params:
    """Tensor views of checkpoint arrays; tracked only when training."""

    def __init__(self, model: ModelCheckpoint, requires_grad: bool = False):
        self.tensors = {k: Tensor(v, requires_grad=requires_grad) for k, v in model.params.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _frozen_params(model: ModelCheckpoint) -> _Params:
    return _Params(model)


def embed(model: ModelCheckpoint, images: np.ndarray, params: Optional[_Params] = None) -> Tensor:
    """Patch embedding + class token + positional embedding -> [B, 1+P, d]."""
    cfg = model.config
    p = params or _frozen_params(model)
    patches = Tensor(patchify(images, cfg))
    tok = ad.matmul(patches, p["patch_embed.weight"]) + p["patch_embed.bias"]
    cls = ad.broadcast_to(p["cls_token"], (images.shape[0], 1, cfg.embed_dim))
    x = ad.concat([cls, tok], axis=1)
    return x + p["pos_embed"]


def attention(x: Tensor, p: _Params, prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    hd = d // heads
    qkv = ad.matmul(x, p[prefix + "qkv.weight"]) + p[prefix + "qkv.bias"]
    qkv = qkv.reshape(b, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ad.matmul(out, p[prefix + "proj.weight"]) + p[prefix + "proj.bias"]


def block(x: Tensor, p: _Params, index: int, heads: int) -> Tensor:
    pre = f"blocks.{index}."
    h = ad.layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"], LN_EPS)
    x = x + attention(h, p, pre + "attn.", heads)
    h = ad.layer_norm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"], LN_EPS)
    h = ad.gelu(ad.matmul(h, p[pre + "mlp.fc1.weight"]) + p[pre + "mlp.fc1.bias"])
    h = ad.matmul(h, p[pre + "mlp.fc2.weight"]) + p[pre + "mlp.fc2.bias"]
    return x + h


def head(x: Tensor, p: _Params) -> Tensor:
    """Final norm and classifier, reading the class token only."""
    x = ad.layer_norm(x, p["norm.weight"], p["norm.bias"], LN_EPS)
    return ad.matmul(x[:, 0, :], p["head.weight"]) + p["head.bias"]


def run_blocks(model: ModelCheckpoint, x: Tensor, start: int = 1, hooks=None,
               params: Optional[_Params] = None, record: bool = False):
    """Run blocks ``start..depth`` (1-based) on residual stream ``x``.

    When ``hooks`` covers a layer, the residual entering that block's norm1
    is replaced by the hook's bottleneck output.
    """
    cfg = model.config
    p = params or _frozen_params(model)
    trace = ActivationTrace()
    for layer in range(start, cfg.depth + 1):
        if record:
            trace.block_inputs[layer] = x.data
        if hooks is not None and layer in hooks:
            x = hooks.apply(layer, x, trace)
        x = block(x, p, layer - 1, cfg.heads)
    return head(x, p), trace


def forward(model: ModelCheckpoint, image, hooks=None, record: bool = False,
            params: Optional[_Params] = None):
    """Return ``(logits, trace)``; logits are ``[C]`` for one image, ``[B, C]`` for a batch."""
    arr, single = _as_batch(image, model.config)
    x = embed(model, arr, params)
    logits, trace = run_blocks(model, x, 1, hooks, params, record)
    if single:
        logits = logits[0]
    return logits, trace


def predict_proba(model: ModelCheckpoint, images, batch_size: int = 256) -> np.ndarray:
    """Softmax probabilities, ``[B, C]``, computed without gradient tracking."""
    arr, _ = _as_batch(images, model.config)
    out = []
    for i in range(0, len(arr), batch_size):
        logits, _ = forward(model, arr[i:i + batch_size])
        out.append(ad.softmax(logits, axis=-1).data)
    return np.concatenate(out, axis=0)


def as_predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a checkpoint as ``images[B,H,W,ch] -> probs[B,C]``; callables pass through."""
    if isinstance(model, ModelCheckpoint):
        return lambda images: predict_proba(model, images)
    if callable(model):
        return model
    raise TypeError(f"cannot build a predictor from {type(model).__name__}")


# -- training -----------------------------------------------------------
def _adam_update(params, grads, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    for name, g in grads.items():
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1**t)
        vhat = v[name] / (1 - b2**t)
        upd = mhat / (np.sqrt(vhat) + eps)
        if wd and params[name].ndim > 1:
            upd = upd + wd * params[name]
        params[name] = params[name] - lr * upd


def evaluate_accuracy(model: ModelCheckpoint, images: np.ndarray, labels: np.ndarray) -> float:
    probs = predict_proba(model, images)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def train_toy(model: ModelCheckpoint, dataset, epochs: int, lr: float = 1e-3,
              batch_size: int = 32, seed: int = 0, weight_decay: float = 0.01,
              log: Optional[Callable[[dict], None]] = None) -> ModelCheckpoint:
    """Fit ``model`` on ``dataset`` (images, labels) with Adam and a cosine schedule.

    Returns a new checkpoint; the input is not modified. ``epochs=0`` returns
    an unchanged copy.
    """
    images, labels = dataset
    images, _ = _as_batch(images, model.config)
    labels = np.asarray(labels, dtype=np.int64)
    out = model.copy()
    if epochs <= 0:
        return out
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in out.params.items()}
    v = {k: np.zeros_like(vv) for k, vv in out.params.items()}
    steps_per_epoch = int(np.ceil(len(images) / batch_size))
    total = epochs * steps_per_epoch
    warmup = max(1, steps_per_epoch)
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        running, seen = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            t += 1
            cur = lr * min(1.0, t / warmup) * 0.5 * (1 + np.cos(np.pi * t / total))
            p = _Params(out, requires_grad=True)
            logits, _ = forward(out, images[idx], params=p)
            loss = ad.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError("non-finite training loss", epoch=epoch)
            loss.backward()
            grads = {k: tt.grad for k, tt in p.tensors.items() if tt.grad is not None}
            _adam_update(out.params, grads, m, v, t, cur, wd=weight_decay)
            running += loss.item() * len(idx)
            seen += len(idx)
        record = {"epoch": epoch, "loss": running / seen}
        logger.info("epoch %d loss %.4f", epoch, record["loss"])
        if log is not None:
            log(record)
    return out


# -- checkpoint I/O -----------------------------------------------------
def _write_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: ModelCheckpoint) -> bytes:
    """Serialise: magic, u32 version, u32-prefixed JSON config, then tensors.

    Each tensor is ``u32 name_len, name, u32 rank, u32 dims..., <f8 data``.
    All integers are little-endian.
    """
    buf = io.BytesIO()
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model: ModelCheckpoint, path: str) -> None:
    _write_atomic(path, checkpoint_bytes(model))


def _read(data: bytes, pos: int, n: int, what: str):
    if pos + n > len(data):
        raise ParseError(f"truncated checkpoint while reading {what}", offset=pos)
    return data[pos:pos + n], pos + n


def parse_checkpoint(data: bytes) -> ModelCheckpoint:
    raw, pos = _read(data, 0, 4, "magic")
    if raw != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {raw!r}", offset=0)
    raw, pos = _read(data, pos, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=pos - 4)
    raw, pos = _read(data, pos, 4, "header length")
    (hlen,) = struct.unpack("<I", raw)
    raw, pos = _read(data, pos, hlen, "config header")
    try:
        cfg = ModelConfig(**json.loads(raw.decode("utf-8"))).validate()
    except (ValueError, TypeError) as exc:
        raise ParseError(f"invalid config header: {exc}", offset=pos - hlen) from exc
    raw, pos = _read(data, pos, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    params = {}
    for _ in range(count):
        raw, pos = _read(data, pos, 4, "name length")
        (nlen,) = struct.unpack("<I", raw)
        raw, pos = _read(data, pos, nlen, "tensor name")
        name = raw.decode("utf-8")
        if name in params:
            raise ParseError(f"duplicate tensor {name!r}", offset=pos - nlen)
        raw, pos = _read(data, pos, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _read(data, pos, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw)
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        raw, pos = _read(data, pos, nbytes, f"data of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    expected = _param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ParseError(f"tensor set mismatch (missing {missing}, unexpected {extra})", offset=pos)
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ParseError(f"tensor {name} has shape {params[name].shape}, expected {shape}",
                             offset=pos)
    return ModelCheckpoint(cfg, params)


def load_checkpoint(path: str) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
