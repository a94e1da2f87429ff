import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from coiba import metrics as M
from coiba import vit
from coiba.errors import ConfigError, ContractError, DimensionError, ImputationError


def constant_model(c=0.37, classes=4):
    probs = np.full(classes, (1 - c) / (classes - 1))
    probs[1] = c
    return lambda images: np.tile(probs, (len(images), 1))


def linear_model(weights):
    """Confidence of class 0 is a fixed linear function of the pixels."""
    w = weights.ravel()

    def predict(images):
        score = images.reshape(len(images), -1) @ w
        return np.stack([score, 1 - score], axis=1)

    return predict


RNG = np.random.default_rng(0)
IMAGE = RNG.random((32, 32, 1))
PMAP = RNG.random((32, 32))


# -- insertion / deletion -----------------------------------------------
def test_constant_model_auc_equals_confidence():
    ins, dele = M.insertion_deletion(constant_model(), IMAGE, PMAP, 1)
    assert abs(ins.auc - 0.37) < 1e-9 and abs(dele.auc - 0.37) < 1e-9


def test_insertion_deletion_endpoints(toy):
    s = toy.test[0]
    predict = vit.as_predictor(toy.model)
    ins, dele = M.insertion_deletion(predict, s.image, PMAP, s.label)
    conf = lambda img: predict(img[None])[0, s.label]
    assert ins.scores[0] == conf(M.blur_baseline(s.image))
    assert ins.scores[-1] == conf(s.image)
    assert dele.scores[0] == conf(s.image)
    assert dele.scores[-1] == conf(np.zeros_like(s.image))


def test_curve_fraction_grid():
    fr = M.curve_fractions(0.035)
    assert fr[0] == 0 and fr[-1] == 1 and np.all(np.diff(fr) > 0)
    assert np.allclose(np.diff(fr)[:-1], 0.035)


@pytest.mark.parametrize("step", [0.0, -0.1, 1.5])
def test_bad_step_fraction(step):
    with pytest.raises(ConfigError):
        M.insertion_deletion(constant_model(), IMAGE, PMAP, 1, step_fraction=step)


def test_map_shape_must_match_image():
    with pytest.raises(DimensionError):
        M.insertion_deletion(constant_model(), IMAGE, np.ones((16, 16)), 1)


def test_blur_scaling():
    assert M.blur_params(32) == (11, 10.0)
    k, s = M.blur_params(64)
    assert k % 2 == 1 and s == 20.0


def test_ranking_ties_follow_row_major_order():
    assert np.array_equal(M.rank_pixels(np.zeros((2, 3))), np.arange(6))


def test_rank_metrics_invariant_to_affine_rescaling(toy):
    s = toy.test[1]
    predict = vit.as_predictor(toy.model)
    a = M.insertion_deletion(predict, s.image, PMAP, s.label)
    b = M.insertion_deletion(predict, s.image, 2 * PMAP + 3, s.label)
    assert a[0].auc == b[0].auc and a[1].auc == b[1].auc
    for order in ("morf", "lerf"):
        assert M.road(predict, s.image, PMAP, s.label, order=order) == \
            M.road(predict, s.image, 2 * PMAP + 3, s.label, order=order)
    assert M.ehr(PMAP, s.gt_mask) == M.ehr(2 * PMAP + 3, s.gt_mask)


# -- ROAD ---------------------------------------------------------------
def test_imputation_of_constant_image():
    img = np.full((12, 12, 1), 0.4)
    mask = RNG.random((12, 12)) < 0.5
    mask[0, 0] = False
    out = M.noisy_linear_impute(img, mask, sigma=0.0)
    assert np.allclose(out, 0.4, atol=1e-12)


def test_single_pixel_imputation():
    img = np.full((5, 5, 1), 0.8)
    img[2, 2] = 0.0
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    assert M.noisy_linear_impute(img, mask, sigma=0.0)[2, 2, 0] == pytest.approx(0.8, abs=1e-12)


def test_fully_masked_image_is_singular():
    with pytest.raises(ImputationError):
        M.noisy_linear_impute(np.ones((4, 4, 1)), np.ones((4, 4), dtype=bool), sigma=0.0)


def test_road_order_validated():
    with pytest.raises(ConfigError):
        M.road(constant_model(), IMAGE, PMAP, 1, order="sideways")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), st.integers(0, 2**31 - 1))
def test_harmonic_imputation_respects_boundary_range(img, seed):
    mask = np.random.default_rng(seed).random((10, 10)) < 0.6
    if mask.all():
        mask[0, 0] = False
    known = img[~mask]
    out = M.noisy_linear_impute(img, mask, sigma=0.0)
    assert np.all(out[mask] >= known.min() - 1e-9) and np.all(out[mask] <= known.max() + 1e-9)
    assert np.array_equal(out[~mask], img[~mask])


# -- sensitivity-n and correlation --------------------------------------
def test_sensitivity_n_linear_model_exact_marginals():
    w = RNG.random((32, 32, 1)) / 1024
    attribution = (w * IMAGE)[..., 0]
    out = M.sensitivity_n(linear_model(w), IMAGE, attribution, 0, [1, 10], trials=20)
    assert out[1] == pytest.approx(1.0, abs=1e-9) and out[10] == pytest.approx(1.0, abs=1e-9)


def test_sensitivity_n_constant_map_is_missing():
    out = M.sensitivity_n(linear_model(np.ones((32, 32, 1)) / 1024), IMAGE, np.ones((32, 32)), 0, [5])
    assert out[5] is None


def test_sensitivity_n_needs_two_trials():
    with pytest.raises(ConfigError):
        M.sensitivity_n(constant_model(), IMAGE, PMAP, 1, [1], trials=1)


def test_pearson_self_and_reference():
    x = RNG.standard_normal(30)
    y = x + RNG.standard_normal(30)
    assert M.pearson(x, x) == pytest.approx(1.0, abs=1e-12)
    assert M.pearson(x, y) == pytest.approx(sps.pearsonr(x, y).statistic, abs=1e-12)
    assert M.pearson(x, np.ones(30)) is None


# -- SSIM / CKA ---------------------------------------------------------
def test_ssim_identity_and_symmetry():
    a, b = RNG.random((32, 32)), RNG.random((32, 32))
    assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(M.ssim(a, b) - M.ssim(b, a)) < 1e-12


def test_ssim_of_inverted_half_image_is_negative():
    x = np.zeros((32, 32))
    x[:, 16:] = 1.0
    assert M.ssim(x, 1 - x) < 0


def _ssim_reference(a, b):
    """Straight-loop SSIM over every valid 11x11 window."""
    ax = np.arange(11) - 5
    g = np.exp(-ax ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + 1e-4) * (2 * cov + 9e-4))
                        / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4)))
    return float(np.mean(vals))


def test_ssim_matches_loop_reference():
    a, b = RNG.random((16, 16)), RNG.random((16, 16))
    assert M.ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-12)


def test_ssim_shape_errors():
    with pytest.raises(DimensionError):
        M.ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(DimensionError):
        M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_cka_properties():
    x = RNG.standard_normal((100, 8))
    q, _ = np.linalg.qr(RNG.standard_normal((8, 8)))
    assert M.cka_linear(x, x) == pytest.approx(1.0, abs=1e-12)
    assert M.cka_linear(x, x @ q) == pytest.approx(1.0, abs=1e-12)
    assert M.cka_linear(x, RNG.standard_normal((100, 8))) < 0.3
    assert M.cka_linear(x, np.ones((100, 3))) is None
    y = RNG.standard_normal((100, 5))
    assert abs(M.cka_linear(x, y) - M.cka_linear(y, x)) < 1e-12


# -- EHR ----------------------------------------------------------------
def test_ehr_map_inside_mask():
    mask = np.zeros((32, 32), dtype=bool)
    mask[:8, :8] = True
    pmap = mask.astype(float)
    curve = M.ehr_curve(pmap, mask)
    assert np.all(curve[M.EHR_GRID * 1024 <= 64] == 1.0)


def test_ehr_uniform_map_near_area_fraction():
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:16, :] = True
    assert M.ehr(np.zeros((32, 32)), mask) == pytest.approx(mask.mean(), abs=0.1)


def test_ehr_empty_mask():
    with pytest.raises(ContractError):
        M.ehr(PMAP, np.zeros((32, 32), dtype=bool))


# -- confidence bins ----------------------------------------------------
def test_bins_single_bin():
    rep = M.confidence_binned_report([0.41, 0.45, 0.5], {"m": [1, 2, 3]})
    assert list(rep.counts) == [0, 0, 3, 0, 0]
    assert rep.means["m"][0] is None


def test_bins_two_samples():
    rep = M.confidence_binned_report([0.1, 0.9], {"m": [0.0, 1.0]})
    assert rep.means["m"][0] == 0.0 and rep.means["m"][4] == 1.0


def test_bins_last_edge_closed_and_range_checked():
    assert M.confidence_binned_report([1.0], {}).counts[-1] == 1
    with pytest.raises(ContractError):
        M.confidence_binned_report([1.2], {})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-5, 5)), min_size=1, max_size=40))
def test_bins_partition_identity(pairs):
    conf, vals = zip(*pairs)
    rep = M.confidence_binned_report(conf, {"m": vals})
    assert rep.counts.sum() == len(conf)
    weighted = sum(c * m for c, m in zip(rep.counts, rep.means["m"]) if c)
    assert weighted / len(conf) == pytest.approx(np.mean(vals), abs=1e-9)


# -- tests and baselines ------------------------------------------------
def test_sign_test_matches_binomial():
    a = np.arange(20.0)
    b = a - np.r_[np.ones(15), -np.ones(3), np.zeros(2)]
    res = M.sign_test(a, b)
    assert (res["wins"], res["losses"], res["ties"]) == (15, 3, 2)
    assert res["p"] == pytest.approx(sps.binomtest(15, 18, 0.5, alternative="greater").pvalue)


def test_random_map_is_seeded_token_resolution():
    a, b = M.random_map(16, 32, 1), M.random_map(16, 32, 1)
    assert np.array_equal(a, b) and a.shape == (32, 32)
    assert not np.array_equal(a, M.random_map(16, 32, 2))


def test_sanity_check_without_randomization_is_one(toy):
    import dataclasses
    spec = dataclasses.replace(toy.spec, iterations=2)
    table = M.sanity_check(toy.model, [s.image for s in toy.test[:2]], [s.label for s in toy.test[:2]],
                           spec, "cumulative", [None], calibration=toy.calib)
    assert table[None] == 1.0


def test_evaluate_sample_row(toy):
    s = toy.test[2]
    row = M.evaluate_sample(toy.model, s.image, PMAP, s.label, mask=s.gt_mask)
    assert row["d_insdel"] == row["ins_auc"] - row["del_auc"]
    assert row["d_road"] == row["road_lerf"] - row["road_morf"]
    assert 0 <= row["ehr"] <= 1
