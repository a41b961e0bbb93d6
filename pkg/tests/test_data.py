import numpy as np
import pytest

from adpfed import data
from adpfed.data import SiteShift


def test_noiseless_single_blob_is_thresholded_disc():
    rng = np.random.default_rng(0)
    shift = SiteShift(noise_level=0.0)
    for _ in range(20):
        s = data.generate_sample(rng, shift, 32)
        # with zero noise the image is the clean field, so the mask is its threshold
        assert np.array_equal(s.mask.astype(bool), s.image > data.MASK_LEVEL)


def test_single_blob_mask_is_disc():
    field = data.blob_field(32, [(16.0, 16.0)], [4.0], 0.6)
    mask = field > data.MASK_LEVEL
    yy, xx = np.mgrid[0:32, 0:32]
    # 0.6 exp(-r^2/32) > 0.3  <=>  r^2 < 32 ln 2
    disc = (yy - 16) ** 2 + (xx - 16) ** 2 < 32 * np.log(2)
    assert np.array_equal(mask, disc)


def test_generate_deterministic():
    a = data.generate_sample(np.random.default_rng(5), SiteShift())
    b = data.generate_sample(np.random.default_rng(5), SiteShift())
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_sample_invariants():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = data.generate_sample(rng, SiteShift())
        assert s.image.shape == s.mask.shape == (32, 32)
        assert 0 < s.foreground_fraction < 0.6
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_foreground_fraction_monte_carlo():
    rng = np.random.default_rng(2)
    fracs = [data.generate_sample(rng, SiteShift()).foreground_fraction for _ in range(1000)]
    assert 0.02 < np.mean(fracs) < 0.5


def test_iid_sites_match():
    shifts = [data.site_shift(np.random.default_rng(k), 0.0) for k in range(3)]
    assert shifts[0] == shifts[1] == shifts[2] == SiteShift()
    means = []
    for k, shift in enumerate(shifts):
        rng = np.random.default_rng(100 + k)
        means.append(np.mean([data.generate_sample(rng, shift).foreground_fraction for _ in range(1000)]))
    assert max(means) - min(means) < 0.05


def test_heterogeneous_sites_differ():
    fed = data.build_federation(0, heterogeneity=1.0)
    assert len({s.shift for s in fed.sites}) == len(fed.sites)


def test_tiny_federation_boundary():
    fed = data.build_federation(0, sizes=[1, 1], test_size=1)
    assert [s.n_train for s in fed.sites] == [1, 1]
    assert [len(s.val) for s in fed.sites] == [0, 0]
    assert len(fed.test) == 1


def test_default_federation_mirrors_ham10k():
    sizes = [2260, 2110, 1940, 1640, 1565]
    assert list(data.DEFAULT_SIZES) == [s // 20 for s in sizes]
    fed = data.build_federation(0)
    assert len(fed.sites) == 5
    assert [s.n_train for s in fed.sites] == [85, 79, 73, 62, 59]
    assert [len(s.val) for s in fed.sites] == [28, 26, 24, 20, 19]
    assert fed.n_total == 85 + 79 + 73 + 62 + 59
    assert len(fed.test) == 25


def test_shards_disjoint_and_deterministic():
    fed = data.build_federation(3)
    ids = [s.sample_id for site in fed.sites for s in site.train + site.val] + [s.sample_id for s in fed.test]
    assert len(ids) == len(set(ids))
    again = data.build_federation(3)
    for a, b in zip(fed.sites, again.sites):
        for x, y in zip(a.train + a.val, b.train + b.val):
            assert x.sample_id == y.sample_id and np.array_equal(x.image, y.image)


@pytest.mark.parametrize(
    "kwargs",
    [dict(sizes=[]), dict(sizes=[0, 3]), dict(sizes=[2.5]), dict(test_size=0), dict(heterogeneity=2.0)],
)
def test_invalid_federation(kwargs):
    with pytest.raises(data.DataConfigError):
        data.build_federation(0, **kwargs)


def test_export_round_trip(tmp_path):
    fed = data.build_federation(0, sizes=[3, 2], test_size=2, image_size=8)
    data.export_federation(fed, str(tmp_path))
    records = data.load_exported(str(tmp_path))
    assert len(records) == 7
    by_id = {int(r["id"]): r for r in records}
    for site in fed.sites:
        for s in site.train:
            r = by_id[s.sample_id]
            assert r["split"] == "train" and int(r["site"]) == site.site_id
            assert np.array_equal(r["image"], s.image) and np.array_equal(r["mask"], s.mask)
    assert sum(r["split"] == "test" for r in records) == 2
