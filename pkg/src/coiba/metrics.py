"""Faithfulness, localization and similarity metrics for attribution maps.

Every perturbation metric ranks pixels with a stable descending sort, so ties
fall back to row-major pixel order and results depend only on the ranking.
Models are passed as checkpoints or as callables mapping ``[N, H, W, ch]``
images to class probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, sparse, stats
from scipy.sparse.linalg import spsolve

from . import vit
from .errors import ConfigError, ContractError, DimensionError, ImputationError

ROAD_FRACTIONS = (0.2, 0.4, 0.6, 0.8)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EHR_GRID = np.arange(1, 101) / 100.0
_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class EvalCurve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float

    def __post_init__(self):
        f = np.asarray(self.fractions)
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise ContractError("curve fractions must increase strictly from 0 to 1")


def _pixel_map(attribution) -> np.ndarray:
    return np.asarray(getattr(attribution, "pixel_map", attribution), dtype=np.float64)


def _check_map(image: np.ndarray, pmap: np.ndarray) -> None:
    if pmap.shape != image.shape[:2]:
        raise DimensionError(f"map {pmap.shape} does not match image {image.shape[:2]}")


def rank_pixels(pmap: np.ndarray) -> np.ndarray:
    """Flat pixel indices, most relevant first; ties keep row-major order."""
    return np.argsort(-np.asarray(pmap, dtype=np.float64).ravel(), kind="stable")


def _confidence(predict, images: np.ndarray, target: int) -> np.ndarray:
    # one image per call: BLAS results can shift by an ulp with batch size
    return np.array([np.asarray(predict(img[None]))[0, target] for img in images])


def curve_fractions(step_fraction: float) -> np.ndarray:
    if not 0.0 < step_fraction <= 1.0:
        raise ConfigError(f"step_fraction must lie in (0, 1], got {step_fraction}")
    n = int(math.ceil(1.0 / step_fraction - 1e-9))
    fr = np.minimum(np.arange(n + 1) * step_fraction, 1.0)
    fr[-1] = 1.0
    return fr


def blur_params(image_size: int) -> tuple:
    """Insertion blur kernel and sigma, scaled linearly from 11 px / 10 at 32 px."""
    kernel = max(3, int(round(11 * image_size / 32)))
    if kernel % 2 == 0:
        kernel += 1
    return kernel, 10.0 * image_size / 32


def blur_baseline(image: np.ndarray, kernel: Optional[int] = None,
                  sigma: Optional[float] = None) -> np.ndarray:
    """Gaussian-blurred copy of ``image`` used as the insertion start point."""
    dk, ds = blur_params(image.shape[0])
    kernel = dk if kernel is None else kernel
    sigma = ds if sigma is None else sigma
    radius = kernel // 2
    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[-1]):
        out[..., ch] = ndimage.gaussian_filter(image[..., ch], sigma, mode="reflect",
                                               radius=radius)
    return out


def _perturbation_stack(image, order, counts, baseline, reveal: bool) -> np.ndarray:
    """Images where the top ``k`` pixels come from ``image`` (reveal) or ``baseline``."""
    h, w, ch = image.shape
    flat_img = image.reshape(-1, ch)
    flat_base = baseline.reshape(-1, ch)
    batch = np.empty((len(counts), h * w, ch))
    for i, k in enumerate(counts):
        src, dst = (flat_img, flat_base) if reveal else (flat_base, flat_img)
        cur = dst.copy()
        cur[order[:k]] = src[order[:k]]
        batch[i] = cur
    return batch.reshape(len(counts), h, w, ch)


def insertion_deletion(model, image, attribution, target: int, step_fraction: float = 0.035,
                       blur_kernel: Optional[int] = None, blur_sigma: Optional[float] = None):
    """Insertion and deletion curves for one image.

    Deletion zeroes the top-ranked pixels of ``image``; insertion copies them
    onto a blurred baseline. Scores are softmax probabilities of ``target``.
    """
    predict = vit.as_predictor(model)
    image = np.asarray(image, dtype=np.float64)
    pmap = _pixel_map(attribution)
    _check_map(image, pmap)
    fr = curve_fractions(step_fraction)
    n = pmap.size
    counts = np.rint(fr * n).astype(int)
    order = rank_pixels(pmap)
    base = blur_baseline(image, blur_kernel, blur_sigma)
    ins_imgs = _perturbation_stack(image, order, counts, base, reveal=True)
    del_imgs = _perturbation_stack(image, order, counts, np.zeros_like(image), reveal=False)
    probs = _confidence(predict, np.concatenate([ins_imgs, del_imgs]), target)
    ins, dele = probs[:len(fr)], probs[len(fr):]
    return (EvalCurve(fr, ins, float(np.trapezoid(ins, fr))),
            EvalCurve(fr, dele, float(np.trapezoid(dele, fr))))


def noisy_linear_impute(image, mask, sigma: float = 0.01,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Replace masked pixels by the mean of their 8 neighbours, solved jointly.

    Each masked pixel equals the uniform average of its in-bounds neighbours,
    known or unknown; zero-mean Gaussian noise of std ``sigma`` is added to the
    solution. A masked region with no known neighbour is singular.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    mask = np.asarray(mask, dtype=bool)
    h, w, ch = image.shape
    if mask.shape != (h, w):
        raise DimensionError(f"mask {mask.shape} does not match image {(h, w)}")
    out = image.copy()
    if not mask.any():
        return out[..., 0] if squeeze else out
    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3)))
    touching = ndimage.binary_dilation(~mask, structure=np.ones((3, 3))) & mask
    if len(np.unique(labels[touching])) < n_comp:
        raise ImputationError("masked region has no known neighbour; imputation system is singular")
    idx = -np.ones((h, w), dtype=np.int64)
    rows, cols = np.nonzero(mask)
    idx[rows, cols] = np.arange(len(rows))
    a_rows, a_cols, a_vals = [], [], []
    deg = np.zeros(len(rows))
    rhs = np.zeros((len(rows), ch))
    for dr, dc in _NEIGHBOURS:
        rr, cc = rows + dr, cols + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        deg += ok
        eq, rr, cc = np.nonzero(ok)[0], rr[ok], cc[ok]
        unknown = mask[rr, cc]
        a_rows.append(eq[unknown])
        a_cols.append(idx[rr[unknown], cc[unknown]])
        a_vals.append(-np.ones(unknown.sum()))
        np.add.at(rhs, eq[~unknown], image[rr[~unknown], cc[~unknown]])
    n = len(rows)
    a = sparse.csc_matrix((np.concatenate(a_vals + [deg]),
                           (np.concatenate(a_rows + [np.arange(n)]),
                            np.concatenate(a_cols + [np.arange(n)]))), shape=(n, n))
    sol = spsolve(a, rhs).reshape(n, ch)
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        sol = sol + rng.normal(0.0, sigma, size=sol.shape)
    out[rows, cols] = sol
    return out[..., 0] if squeeze else out


def road(model, image, attribution, target: int, fractions: Sequence[float] = ROAD_FRACTIONS,
         order: str = "morf", sigma: float = 0.01, seed: int = 0) -> float:
    """Mean target confidence after imputing the most (``morf``) or least (``lerf``) relevant pixels."""
    if order not in ("morf", "lerf"):
        raise ConfigError(f"order must be 'morf' or 'lerf', got {order!r}")
    predict = vit.as_predictor(model)
    image = np.asarray(image, dtype=np.float64)
    pmap = _pixel_map(attribution)
    _check_map(image, pmap)
    ranking = rank_pixels(pmap)
    if order == "lerf":
        ranking = ranking[::-1]
    rng = np.random.default_rng(seed)
    batch = []
    for f in fractions:
        k = int(round(f * pmap.size))
        mask = np.zeros(pmap.size, dtype=bool)
        mask[ranking[:k]] = True
        batch.append(noisy_linear_impute(image, mask.reshape(pmap.shape), sigma, rng))
    return float(np.mean(_confidence(predict, np.stack(batch), target)))


def pearson(x, y) -> Optional[float]:
    """Sample Pearson correlation; ``None`` when either series has zero variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("pearson needs two 1-D series of equal length")
    if len(x) < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx / (len(x) - 1)), np.sqrt(dy @ dy / (len(y) - 1))
    if sx == 0 or sy == 0:
        return None
    return float(np.clip(dx @ dy / (len(x) - 1) / (sx * sy), -1.0, 1.0))


def sensitivity_n(model, image, attribution, target: int, n_values: Sequence[int],
                  trials: int = 20, seed: int = 0) -> Dict[int, Optional[float]]:
    """Correlation between attribution mass of random pixel subsets and the confidence drop."""
    if trials < 2:
        raise ConfigError("sensitivity-n needs at least 2 trials per n")
    predict = vit.as_predictor(model)
    image = np.asarray(image, dtype=np.float64)
    pmap = _pixel_map(attribution)
    _check_map(image, pmap)
    flat_map = pmap.ravel()
    base = _confidence(predict, image[None], target)[0]
    rng = np.random.default_rng(seed)
    out = {}
    for n in n_values:
        if not 1 <= n <= flat_map.size:
            raise ConfigError(f"n={n} outside [1, {flat_map.size}]")
        subsets = [rng.choice(flat_map.size, size=n, replace=False) for _ in range(trials)]
        batch = np.repeat(image[None], trials, axis=0).reshape(trials, -1, image.shape[-1])
        for i, sub in enumerate(subsets):
            batch[i, sub] = 0.0
        drops = base - _confidence(predict, batch.reshape((trials,) + image.shape), target)
        out[int(n)] = pearson([flat_map[s].sum() for s in subsets], drops)
    return out


def normalize_map(pmap) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(pmap, dtype=np.float64)
    span = m.max() - m.min()
    return np.zeros_like(m) if span == 0 else (m - m.min()) / span


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (data range 1)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"ssim needs equal 2-D shapes, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"images smaller than the {SSIM_WINDOW}px window")
    w = _gaussian_window()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def map_ssim(a, b) -> float:
    """SSIM of two attribution maps after min-max normalization."""
    return ssim(normalize_map(_pixel_map(a)), normalize_map(_pixel_map(b)))


def cka_linear(x, y) -> Optional[float]:
    """Linear CKA of two representations with matching rows; ``None`` if either is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"cka needs [n, p] and [n, q], got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ContractError("cka needs at least 2 rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if den == 0:
        return None
    return float(np.linalg.norm(y.T @ x) ** 2 / den)


def ehr_curve(attribution, mask, grid: np.ndarray = EHR_GRID) -> np.ndarray:
    """In-mask fraction of the top-``q`` pixels for each quantile ``q`` in ``grid``."""
    pmap = _pixel_map(attribution)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pmap.shape:
        raise DimensionError(f"mask {mask.shape} does not match map {pmap.shape}")
    if not mask.any():
        raise ContractError("EHR needs a nonempty mask")
    hits = np.cumsum(mask.ravel()[rank_pixels(pmap)])
    k = np.maximum(1, np.rint(grid * pmap.size).astype(int))
    return hits[k - 1] / k


def ehr(attribution, mask, grid: np.ndarray = EHR_GRID) -> float:
    """Trapezoidal area under :func:`ehr_curve`, normalized by the quantile range."""
    curve = ehr_curve(attribution, mask, grid)
    return float(np.trapezoid(curve, grid) / (grid[-1] - grid[0]))


@dataclass
class ConfidenceBinReport:
    edges: np.ndarray
    counts: np.ndarray
    means: Dict[str, List[Optional[float]]] = field(default_factory=dict)

    def rows(self) -> List[dict]:
        out = []
        for i, c in enumerate(self.counts):
            row = {"bin_lo": float(self.edges[i]), "bin_hi": float(self.edges[i + 1]), "count": int(c)}
            row.update({k: v[i] for k, v in self.means.items()})
            out.append(row)
        return out


def confidence_binned_report(confidences, metrics: Dict[str, Sequence[float]],
                             width: float = 0.2) -> ConfidenceBinReport:
    """Group samples by model confidence into equal-width bins; the last bin is closed."""
    conf = np.asarray(confidences, dtype=np.float64)
    if np.any(~((conf >= 0) & (conf <= 1))):
        raise ContractError("confidences must lie in [0, 1]")
    n_bins = int(round(1.0 / width))
    if n_bins < 1 or abs(n_bins * width - 1.0) > 1e-9:
        raise ConfigError(f"bin width {width} must divide 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    means = {}
    for name, vals in metrics.items():
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != conf.shape:
            raise DimensionError(f"metric {name} has {vals.shape}, expected {conf.shape}")
        means[name] = [float(vals[which == b].mean()) if counts[b] else None for b in range(n_bins)]
    return ConfidenceBinReport(edges, counts, means)


def sign_test(a, b) -> dict:
    """One-sided sign test that ``a`` exceeds ``b`` pairwise (ties dropped)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {"wins": wins, "losses": losses, "ties": int(len(d) - wins - losses), "p": float(p)}


def random_map(token_count: int, image_size: int, seed: int) -> np.ndarray:
    """Random attribution baseline at token resolution, upsampled like real maps."""
    from .attribution import upsample_scores
    return upsample_scores(np.random.default_rng(seed).random(token_count), image_size)


def evaluate_sample(model, image, attribution, target: int, mask=None, step_fraction: float = 0.035,
                    road_fractions: Sequence[float] = ROAD_FRACTIONS, road_sigma: float = 0.01,
                    seed: int = 0, blur_kernel: Optional[int] = None,
                    blur_sigma: Optional[float] = None, curves: bool = False) -> dict:
    """One CSV row of faithfulness and localization metrics."""
    predict = vit.as_predictor(model)
    image = np.asarray(image, dtype=np.float64)
    ins, dele = insertion_deletion(predict, image, attribution, target, step_fraction,
                                   blur_kernel, blur_sigma)
    morf = road(predict, image, attribution, target, road_fractions, "morf", road_sigma, seed)
    lerf = road(predict, image, attribution, target, road_fractions, "lerf", road_sigma, seed)
    row = {
        "confidence": float(_confidence(predict, image[None], target)[0]),
        "ins_auc": ins.auc, "del_auc": dele.auc,
        "road_morf": morf, "road_lerf": lerf,
        "ehr": ehr(attribution, mask) if mask is not None and np.any(mask) else None,
    }
    row["d_insdel"] = row["ins_auc"] - row["del_auc"]
    row["d_road"] = row["road_lerf"] - row["road_morf"]
    if curves:
        row["curves"] = (ins, dele)
    return row


def sanity_check(model: vit.ModelCheckpoint, images, targets, spec, mode: str = "cumulative",
                 layer_indices: Sequence[Optional[int]] = (None, 0), method: str = "coiba",
                 seed: int = 1234, calibration=None) -> Dict[Optional[int], float]:
    """Mean map SSIM between the trained model and parameter-randomized copies.

    ``None`` in ``layer_indices`` means no randomization. In calibration stats
    mode, ``calibration`` images are re-run through each randomized model.
    """
    from .attribution import attribute, calibrate_stats

    def run(net):
        st = None
        if spec.stats_mode == "calibration":
            if calibration is None:
                raise ConfigError("calibration stats mode needs calibration images")
            st = calibrate_stats(net, calibration, range(1, net.config.depth + 1))
        return [attribute(net, img, int(t), spec, method, st) for img, t in zip(images, targets)]

    base = run(model)
    table = {}
    for k in layer_indices:
        rnd = model if k is None else vit.randomize_parameters(model, mode, k, seed=seed)
        sims = [map_ssim(b, m) for b, m in zip(base, run(rnd))]
        table[k] = float(np.mean(sims))
    return table


def accuracy_under_bottleneck(maps) -> float:
    """Fraction of maps whose bottlenecked prediction matches the target."""
    maps = list(maps)
    return float(np.mean([m.bottleneck_correct for m in maps])) if maps else float("nan")
