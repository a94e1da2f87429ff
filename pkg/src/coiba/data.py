"""Synthetic data, netpbm image files and run configuration."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .bottleneck import BottleneckSpec
from .errors import ConfigError, ParseError
from .vit import ModelConfig


# -- synthetic dataset --------------------------------------------------
@dataclass
class SyntheticSample:
    image: np.ndarray  # [H, W, ch] in [0, 1]
    label: int
    gt_mask: np.ndarray  # [H, W] bool
    seed: int
    cell: int = -1


def glyph(label: int, classes: int, size: int, phase: float = 0.0, period: float = 4.0) -> np.ndarray:
    """Binary oriented stripe pattern; orientation ``label * pi / classes``."""
    theta = np.pi * label / classes
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    return (np.cos(2 * np.pi * proj / period + phase) > 0).astype(np.float64)


GLYPH_LEVELS = (0.1, 0.9)  # stripe intensities


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), 1.5, mode="wrap")
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    return 0.5 + 0.08 * tex


def render_sample(label: int, cell: int, rng: np.random.Generator, classes: int = 4,
                  image_size: int = 32, patch_size: int = 8, channels: int = 1,
                  extra: Sequence[tuple] = ()) -> tuple:
    """Draw one image with a glyph of ``label`` in grid ``cell``.

    ``extra`` adds further ``(label, cell)`` glyphs (used for two-object images).
    Returns ``(image[H,W,ch], mask[H,W])`` where the mask covers the first glyph.
    """
    img = _background(rng, image_size)
    grid = image_size // patch_size
    mask = np.zeros((image_size, image_size), dtype=bool)
    for k, (lab, c) in enumerate([(label, cell)] + list(extra)):
        r0, c0 = (c // grid) * patch_size, (c % grid) * patch_size
        pat = glyph(lab, classes, patch_size, phase=rng.uniform(0.0, 2 * np.pi))
        img[r0:r0 + patch_size, c0:c0 + patch_size] = GLYPH_LEVELS[0] + (GLYPH_LEVELS[1] - GLYPH_LEVELS[0]) * pat
        if k == 0:
            mask[r0:r0 + patch_size, c0:c0 + patch_size] = True
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[..., None], channels, axis=-1), mask


def split_seeds(seed: int) -> tuple:
    """Independent seeds for the train and held-out splits."""
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def make_splits(cfg: "DataConfig", model_cfg: ModelConfig):
    """``(train, test)`` sample lists for a data config."""
    tr, te = split_seeds(cfg.seed)
    kw = dict(classes=cfg.classes, image_size=model_cfg.image_size,
              patch_size=model_cfg.patch_size, channels=model_cfg.channels)
    return generate_dataset(cfg.n_train, seed=tr, **kw), generate_dataset(cfg.n_test, seed=te, **kw)


def generate_dataset(n: int, classes: int = 4, image_size: int = 32, seed: int = 0,
                     patch_size: int = 8, channels: int = 1) -> List[SyntheticSample]:
    """Balanced labels; one glyph per image in a uniformly random patch cell."""
    if n < classes:
        raise ConfigError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    cells = rng.integers(0, (image_size // patch_size) ** 2, size=n)
    child = np.random.SeedSequence(seed).spawn(n)
    out = []
    for i in range(n):
        sample_seed = int(child[i].generate_state(1)[0])
        img, mask = render_sample(int(labels[i]), int(cells[i]), np.random.default_rng(sample_seed),
                                  classes, image_size, patch_size, channels)
        out.append(SyntheticSample(img, int(labels[i]), mask, sample_seed, int(cells[i])))
    return out


def two_object_image(label_a: int, label_b: int, cell_a: int, cell_b: int, seed: int = 0,
                     classes: int = 4, image_size: int = 32, patch_size: int = 8,
                     channels: int = 1) -> np.ndarray:
    img, _ = render_sample(label_a, cell_a, np.random.default_rng(seed), classes, image_size,
                           patch_size, channels, extra=[(label_b, cell_b)])
    return img


def stack(samples: Sequence[SyntheticSample]):
    """``(images[N,H,W,ch], labels[N], masks[N,H,W])``."""
    return (np.stack([s.image for s in samples]), np.array([s.label for s in samples]),
            np.stack([s.gt_mask for s in samples]))


# -- netpbm -------------------------------------------------------------
def write_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
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


def write_text_atomic(path: str, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def encode_netpbm(image: np.ndarray, depth: int = 8, comment: Optional[str] = None) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[-1] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {arr.shape} as PGM/PPM")
    if depth not in (8, 16):
        raise ValueError("depth must be 8 or 16")
    maxval = (1 << depth) - 1
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if depth == 16 else "u1").tobytes()
    h, w = arr.shape[:2]
    note = b"" if comment is None else b"\n# " + comment.replace("\n", " ").encode("ascii")
    return magic + note + f"\n{w} {h}\n{maxval}\n".encode("ascii") + raw


def save_pgm(path: str, image: np.ndarray, depth: int = 8, comment: Optional[str] = None) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] != 1:
        raise ValueError("save_pgm expects a single-channel image")
    write_atomic(path, encode_netpbm(arr, depth, comment))


def save_ppm(path: str, image: np.ndarray, depth: int = 8, comment: Optional[str] = None) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError("save_ppm expects an [H, W, 3] image")
    write_atomic(path, encode_netpbm(arr, depth, comment))


def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError("truncated header", offset=pos)
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment in header", offset=pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise ParseError(f"expected an integer, found {tok[:16]!r}", offset=start)
        tokens.append(int(tok))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", offset=pos)
    return tokens, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    """Decode binary P5/P6 to floats in [0, 1], shape ``[H, W, ch]``."""
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ParseError(f"unknown magic {magic!r}; expected P5 or P6", offset=0)
    (width, height, maxval), pos = _header_tokens(data, 3)
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", offset=2)
    if not 1 <= maxval <= 65535:
        raise ParseError(f"maxval {maxval} out of range", offset=pos - 1)
    bpp = 1 if maxval < 256 else 2
    need = width * height * channels * bpp
    if len(data) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(data) - pos}",
                         offset=len(data))
    raw = np.frombuffer(data, dtype=">u2" if bpp == 2 else "u1", count=width * height * channels,
                        offset=pos)
    return raw.reshape(height, width, channels).astype(np.float64) / maxval


def load_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read())


# -- CSV helpers --------------------------------------------------------
def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence],
              comment: Optional[str] = None) -> None:
    """Write a CSV; an optional leading ``# comment`` line carries provenance."""
    buf = io.StringIO()
    if comment is not None:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    write_text_atomic(path, buf.getvalue())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# -- configuration ------------------------------------------------------
TOY_BOTTLENECK = {"s": 1, "stats_mode": "calibration"}


def toy_bottleneck(**overrides) -> BottleneckSpec:
    """Bottleneck defaults of the toy pipeline.

    The toy model's class token already holds the decision after block 1, and
    per-image noise statistics include the glyph token, so the pipeline starts
    at block 1 and draws noise from calibration statistics. The library-level
    :class:`BottleneckSpec` keeps the depth-proportional departure layer.
    """
    return BottleneckSpec(**{**TOY_BOTTLENECK, **overrides})


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 200
    classes: int = 4
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01


@dataclass
class EvalConfig:
    step_fraction: float = 0.035
    road_fractions: List[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    road_sigma: float = 0.01
    blur_kernel: Optional[int] = None
    blur_sigma: Optional[float] = None
    target_mode: str = "ground-truth"
    bin_width: float = 0.2
    sens_n: List[int] = field(default_factory=lambda: [1, 8, 64, 256, 819])
    sens_trials: int = 20
    curves: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bottleneck: BottleneckSpec = field(default_factory=lambda: toy_bottleneck())
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "coiba-out"
    seed: int = 0

    def resolved(self) -> "RunConfig":
        cfg = dataclasses.replace(self, bottleneck=self.bottleneck.resolved(self.model.depth))
        validate_config(cfg)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short hash of every setting except the output location."""
        doc = self.to_dict()
        doc.pop("out_dir")
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "bottleneck": BottleneckSpec, "data": DataConfig,
             "train": TrainConfig, "eval": EvalConfig}
_FACTORIES = {**_SECTIONS, "bottleneck": lambda **kw: toy_bottleneck(**kw)}


def _check_type(name, value, default, errors):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        errors.append(f"{name}: expected {type(default).__name__}, got {type(value).__name__}")
    return ok


def config_from_dict(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig`; unknown keys and bad types are all reported together."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    errors: List[str] = []
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                errors.append(f"{key}: expected an object")
                continue
            cls = _SECTIONS[key]
            defaults = _FACTORIES[key]()
            fields = {f.name for f in dataclasses.fields(cls)}
            sub = {}
            for k, v in value.items():
                if k not in fields:
                    errors.append(f"unknown key {key}.{k}")
                    continue
                d = getattr(defaults, k)
                if v is None or d is None or _check_type(f"{key}.{k}", v, d, errors):
                    sub[k] = float(v) if isinstance(d, float) and v is not None else v
            kwargs[key] = sub
        elif key in ("out_dir", "seed"):
            default = RunConfig.__dataclass_fields__[key].default
            if _check_type(key, value, default, errors):
                kwargs[key] = value
        else:
            errors.append(f"unknown key {key}")
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**{k: (_FACTORIES[k](**v) if k in _SECTIONS else v) for k, v in kwargs.items()})
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    errors: List[str] = []
    for part in (cfg.model, cfg.bottleneck):
        try:
            if part is cfg.bottleneck:
                part.validate(cfg.model.depth)
            else:
                part.validate()
        except ConfigError as exc:
            errors.extend(exc.violations)
    if cfg.data.n_train < cfg.data.classes or cfg.data.n_test < 1:
        errors.append("data.n_train must be >= data.classes and data.n_test >= 1")
    if cfg.data.classes != cfg.model.num_classes:
        errors.append("data.classes must equal model.num_classes")
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1 or not cfg.train.lr > 0:
        errors.append("train: epochs >= 0, batch_size >= 1 and lr > 0 required")
    if not 0 < cfg.eval.step_fraction <= 1:
        errors.append("eval.step_fraction must lie in (0, 1]")
    if any(not 0 < f < 1 for f in cfg.eval.road_fractions):
        errors.append("eval.road_fractions must lie in (0, 1)")
    if cfg.eval.target_mode not in ("ground-truth", "predicted"):
        errors.append("eval.target_mode must be 'ground-truth' or 'predicted'")
    if not 0 < cfg.eval.bin_width <= 1:
        errors.append("eval.bin_width must lie in (0, 1]")
    if cfg.eval.sens_trials < 2:
        errors.append("eval.sens_trials must be >= 2")
    if errors:
        raise ConfigError(errors)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(doc)
