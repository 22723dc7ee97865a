import numpy as np
import pytest

from mlb_boot import data as D
from mlb_boot.data import Dataset, FormatError, GenConfig
from mlb_boot.metrics import dice


def _disk(H=32, r=8.0):
    yy, xx = np.mgrid[0:H, 0:H]
    return ((yy - H / 2 + 0.5) ** 2 + (xx - H / 2 + 0.5) ** 2 <= r * r).astype(np.uint8)


class TestGenerate:
    def test_deterministic_bytes(self):
        cfg = GenConfig(16, 16, 5)
        assert D.to_bytes(D.generate(cfg, 3)) == D.to_bytes(D.generate(cfg, 3))
        assert D.to_bytes(D.generate(cfg, 3)) != D.to_bytes(D.generate(cfg, 4))

    def test_noise_free_images_are_two_level(self):
        ds = D.generate(GenConfig(16, 16, 20, noise_level=0.0), 1)
        for img, m in zip(ds.images[:, 0], ds.masks):
            levels = np.unique(img)
            assert len(levels) == 2
            np.testing.assert_array_equal(img == levels[1], m.astype(bool))

    def test_foreground_fraction_bounds(self):
        ds = D.generate(GenConfig(16, 16, 1000), 7)
        frac = ds.masks.mean(axis=(1, 2))
        assert frac.min() >= 0.05 and frac.max() <= 0.6

    def test_images_in_unit_range(self):
        ds = D.generate(GenConfig(16, 16, 50, noise_level=0.5), 2)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    @pytest.mark.parametrize("shape_family", ["ellipse", "rect"])
    def test_shape_families(self, shape_family):
        ds = D.generate(GenConfig(16, 16, 10, shape_family, 0.0), 0)
        assert ds.masks.any(axis=(1, 2)).all()

    @pytest.mark.parametrize("kw", [dict(H=15), dict(W=7), dict(H=2), dict(count=0), dict(shape_family="star"),
                                    dict(noise_level=-1.0)])
    def test_invalid_config(self, kw):
        cfg = GenConfig(**{**dict(H=16, W=16, count=2), **kw})
        with pytest.raises(ValueError):
            D.generate(cfg, 0)

    def test_splits_are_disjoint(self):
        sp = D.generate_splits(16, 16, {"clean": 8, "meta": 4, "unlabeled": 20, "eval": 10}, seed=5)
        assert sp["unlabeled"].masks is None
        assert sp["unlabeled_gt"].masks is not None
        seen = set()
        for name in ("clean", "meta", "unlabeled", "eval"):
            for img in sp[name].images:
                key = img.tobytes()
                assert key not in seen
                seen.add(key)
        assert len(seen) == 42


def test_standardize():
    rng = np.random.default_rng(0)
    x = rng.random((3, 1, 8, 8)) * 5 + 2
    z = D.standardize(x)
    np.testing.assert_allclose(z.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(2, 3)), 1.0, rtol=1e-12)
    np.testing.assert_array_equal(D.standardize(np.full((1, 1, 4, 4), 0.3)), 0.0)


class TestCorrupt:
    def test_zero_rates_leave_mask(self):
        m = _disk()
        np.testing.assert_array_equal(D.corrupt_mask(m, rng=np.random.default_rng(0)), m)

    def test_full_flip_rate_flips_the_band(self):
        m = _disk()
        out = D.corrupt_mask(m, flip_rate=1.0, rng=np.random.default_rng(0))
        band = D.boundary_distance(m) <= 2
        np.testing.assert_array_equal(out != m, band)

    def test_dice_decreases_with_dilation(self):
        m = _disk()
        scores = [dice(D.corrupt_mask(m, dilate_r=r), m) for r in range(0, 6)]
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_erosion_shrinks(self):
        m = _disk()
        out = D.corrupt_mask(m, erode_r=2)
        assert out.sum() < m.sum() and not (out & ~m.astype(bool)).any()

    @pytest.mark.parametrize("seed", range(10))
    def test_changes_stay_near_boundary(self, seed):
        rng = np.random.default_rng(seed)
        m = D.generate(GenConfig(32, 32, 1), seed).masks[0]
        d, e = rng.integers(0, 4, size=2)
        out = D.corrupt_mask(m, d, e, rng.uniform(0, 1), rng)
        changed = out != m
        assert np.all(D.boundary_distance(m)[changed] <= max(d, e, 2))

    @pytest.mark.parametrize("kw", [dict(flip_rate=1.5), dict(flip_rate=-0.1), dict(dilate_r=-1)])
    def test_invalid_rates(self, kw):
        with pytest.raises(ValueError):
            D.corrupt_mask(_disk(), **kw)


class TestMseg:
    def test_round_trip(self, tmp_path):
        ds = D.generate(GenConfig(8, 12, 3), 0)
        D.save(ds, tmp_path / "a.mseg")
        back = D.load(tmp_path / "a.mseg")
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.masks, ds.masks)

    def test_unlabeled_round_trip(self):
        ds = D.generate(GenConfig(8, 8, 2), 0).unlabeled()
        back = D.from_bytes(D.to_bytes(ds))
        assert back.masks is None
        assert back.images.tobytes() == ds.images.tobytes()

    def test_file_size(self, tmp_path):
        # 20-byte header: magic + four u32 fields
        K, H, W = 3, 8, 12
        D.save(D.generate(GenConfig(H, W, K), 0), tmp_path / "a.mseg")
        assert (tmp_path / "a.mseg").stat().st_size == 20 + K * (H * W * 4 + H * W + 1)
        assert D.file_size(K, H, W) == 20 + K * (H * W * 4 + H * W + 1)
        assert D.file_size(K, H, W, labeled=False) == 20 + K * (H * W * 4 + 1)

    def test_header_layout(self):
        buf = D.to_bytes(D.generate(GenConfig(4, 6, 2), 0))
        assert buf[:4] == b"MSEG"
        assert np.frombuffer(buf[4:20], "<u4").tolist() == [1, 2, 4, 6]

    def test_bad_magic_names_offset(self):
        buf = bytearray(D.to_bytes(D.generate(GenConfig(4, 4, 1), 0)))
        buf[0:4] = b"MSEX"
        with pytest.raises(FormatError, match="offset 0") as exc:
            D.from_bytes(bytes(buf))
        assert exc.value.offset == 0

    def test_bad_version(self):
        buf = bytearray(D.to_bytes(D.generate(GenConfig(4, 4, 1), 0)))
        buf[4] = 9
        with pytest.raises(FormatError, match="version"):
            D.from_bytes(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 19, 20, 50, -1])
    def test_truncation(self, cut):
        buf = D.to_bytes(D.generate(GenConfig(4, 4, 2), 0))
        with pytest.raises(FormatError, match="truncated"):
            D.from_bytes(buf[:cut])

    def test_trailing_bytes(self):
        buf = D.to_bytes(D.generate(GenConfig(4, 4, 1), 0))
        with pytest.raises(FormatError, match="trailing"):
            D.from_bytes(buf + b"\x00")

    def test_bad_flag(self):
        buf = bytearray(D.to_bytes(D.generate(GenConfig(4, 4, 1), 0)))
        buf[20 + 64] = 7
        with pytest.raises(FormatError, match="flag"):
            D.from_bytes(bytes(buf))

    def test_manifest(self, tmp_path):
        sp = D.generate_splits(8, 8, {"clean": 2, "unlabeled": 3}, seed=0)
        D.write_manifest(sp, tmp_path)
        back = D.read_manifest(tmp_path)
        assert set(back) == set(sp)
        assert back["unlabeled"].masks is None
        np.testing.assert_array_equal(back["clean"].masks, sp["clean"].masks)

    def test_manifest_syntax_error(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("clean clean.mseg\n")
        with pytest.raises(ValueError, match="manifest.txt:1"):
            D.read_manifest(tmp_path)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 8, 8)), np.full((2, 8, 8), 2))
