import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coiba import data, vit
from coiba.errors import ConfigError, ParseError


def test_dataset_is_deterministic():
    a = data.generate_dataset(12, seed=5)
    b = data.generate_dataset(12, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.label == y.label
        assert np.array_equal(x.gt_mask, y.gt_mask)


def test_dataset_balanced_and_masks_cover_cells():
    ds = data.generate_dataset(103, seed=1)
    counts = np.bincount([s.label for s in ds], minlength=4)
    assert counts.max() - counts.min() <= 1
    for s in ds:
        assert s.gt_mask.sum() == 64
        r, c = np.nonzero(s.gt_mask)
        assert (r.min() // 8) * 4 + c.min() // 8 == s.cell
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_dataset_needs_n_at_least_classes():
    with pytest.raises(ConfigError):
        data.generate_dataset(3, classes=4)


def test_glyphs_are_distinct_per_class():
    pats = [data.glyph(k, 4, 8) for k in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(pats[i], pats[j])


def test_splits_use_independent_seeds():
    tr, te = data.split_seeds(0)
    assert tr != te


def test_rgb_dataset_shape():
    s = data.generate_dataset(4, seed=0, channels=3)[0]
    assert s.image.shape == (32, 32, 3)


def test_mask_zeroed_images_are_uninformative(toy):
    x, y, m = data.stack(toy.test)
    assert vit.evaluate_accuracy(toy.model, x, y) >= 0.95
    x = x.copy()
    x[m] = 0.0
    assert vit.evaluate_accuracy(toy.model, x, y) <= 0.25 + 0.10


# -- netpbm -------------------------------------------------------------
@pytest.mark.parametrize("depth", [8, 16])
@pytest.mark.parametrize("channels", [1, 3])
def test_netpbm_round_trip(tmp_path, depth, channels):
    img = np.random.default_rng(depth + channels).random((5, 7, channels))
    path = str(tmp_path / f"x.{'pgm' if channels == 1 else 'ppm'}")
    (data.save_pgm if channels == 1 else data.save_ppm)(path, img, depth=depth, comment="hello")
    back = data.load_image(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / ((1 << depth) - 1) / 2 + 1e-12
    with open(path, "rb") as fh:
        assert fh.read(2) == (b"P5" if channels == 1 else b"P6")


@pytest.mark.parametrize("blob,offset", [(b"P5\n4 4\n255\n" + bytes(10), 21), (b"P7\n1 1\n255\n\x00", 0),
                                         (b"P5\n4", 4), (b"P5\nx 4 255\n", 3)])
def test_malformed_netpbm(blob, offset):
    with pytest.raises(ParseError) as info:
        data.decode_netpbm(blob)
    assert info.value.offset == offset


def test_sixteen_bit_is_big_endian():
    raw = data.encode_netpbm(np.array([[1.0]]), depth=16)
    assert raw.endswith(b"\xff\xff")
    raw = data.encode_netpbm(np.array([[1 / 65535]]), depth=16)
    assert raw.endswith(b"\x00\x01")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)))
def test_netpbm_quantization_bound(img):
    back = data.decode_netpbm(data.encode_netpbm(img, depth=16))[..., 0]
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-12


# -- CSV ----------------------------------------------------------------
def test_csv_round_trip_with_comment(tmp_path):
    path = str(tmp_path / "r.csv")
    data.write_csv(path, ["a", "b"], [[1, 0.1], [2, None]], comment="config=abc")
    assert open(path).readline() == "# config=abc\n"
    rows = data.read_csv(path)
    assert rows == [{"a": "1", "b": "0.1"}, {"a": "2", "b": ""}]


# -- configuration ------------------------------------------------------
def test_empty_config_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = data.load_config(str(path)).resolved()
    b = cfg.bottleneck
    assert (b.beta, b.iterations, b.lr, b.noise_batch) == (1.0, 10, 1.0, 10)
    assert b.e == cfg.model.depth
    assert b.s == data.TOY_BOTTLENECK["s"]


def test_config_s_greater_than_e():
    with pytest.raises(ConfigError):
        data.config_from_dict({"bottleneck": {"s": 4, "e": 2}})


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        data.config_from_dict({"bottleneck": {"betaa": 1.0}})
    assert "betaa" in str(info.value)


def test_all_violations_reported_together():
    with pytest.raises(ConfigError) as info:
        data.config_from_dict({"bottleneck": {"betaa": 1, "beta": "x"}, "nonsense": 1})
    assert len(info.value.violations) == 3


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        data.load_config(str(path))


def test_config_parsing_is_deterministic():
    doc = {"bottleneck": {"beta": 10}, "seed": 3}
    a, b = data.config_from_dict(doc), data.config_from_dict(json.loads(json.dumps(doc)))
    assert a == b and a.digest() == b.digest()
    assert a.bottleneck.beta == 10.0 and isinstance(a.bottleneck.beta, float)


def test_digest_ignores_out_dir():
    a = data.config_from_dict({"out_dir": "x"})
    b = data.config_from_dict({"out_dir": "y"})
    assert a.digest() == b.digest()
    assert a.digest() != data.config_from_dict({"seed": 1}).digest()


def test_atomic_write_leaves_no_temp_files(tmp_path):
    data.write_text_atomic(str(tmp_path / "f.txt"), "x")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
