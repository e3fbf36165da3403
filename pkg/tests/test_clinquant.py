import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from umyops import clinquant as cq
from umyops.datapipe import EDEMA, LV, MYO, SCAR, PhantomSpec, generate_phantom


def annulus(size=96, r_in=18, r_out=30, center=None):
    c = center or ((size - 1) / 2, (size - 1) / 2)
    ii, jj = np.indices((size, size))
    r = np.hypot(ii - c[0], jj - c[1])
    return (r >= r_in) & (r < r_out), r < r_in


def wedge(myo, center, sectors, n=cq.N_CHORDS):
    ang = cq.sector_angles(myo.shape, center)
    sec = np.minimum((ang / (2 * np.pi / n)).astype(int), n - 1)
    return myo & np.isin(sec, list(sectors))


def test_size_pct():
    myo, _ = annulus()
    half = myo.copy()
    half[:48] = False
    assert cq.pathology_size_pct(np.zeros_like(myo), myo) == 0.0
    assert cq.pathology_size_pct(half, myo) == pytest.approx(100 * half.sum() / myo.sum())
    with pytest.raises(cq.GeometryError):
        cq.pathology_size_pct(np.zeros_like(myo), np.zeros_like(myo))


def test_size_pct_exactly_half():
    myo = np.zeros((4, 4), bool)
    myo[:, :2] = True
    path = np.zeros_like(myo)
    path[:2, :2] = True
    assert cq.pathology_size_pct(path, myo & ~path) == 50.0


def test_size_pct_rigid_invariance():
    rng = np.random.default_rng(0)
    myo = rng.random((20, 20)) < 0.5
    path = myo & (rng.random((20, 20)) < 0.3)
    a = cq.pathology_size_pct(path, myo)
    assert cq.pathology_size_pct(np.rot90(path), np.rot90(myo)) == a
    assert cq.pathology_size_pct(np.roll(path, 3, 0), np.roll(myo, 3, 0)) == a


def test_annulus_chords_balanced():
    myo, lv = annulus(128, 25, 40)
    ch = cq.build_chords(myo, lv)
    counts = np.array([c.myocardium_pixels for c in ch.chords])
    assert len(ch.chords) == 100 and counts.min() > 0
    assert np.all(np.abs(counts - counts.mean()) <= 0.1 * counts.mean())


def test_open_ring_flags_gap():
    myo, lv = annulus()
    c = ((96 - 1) / 2, (96 - 1) / 2)
    gap = wedge(myo, c, range(10, 20))
    ch = cq.build_chords(myo & ~gap, lv)
    assert [c.sector_index for c in ch.chords if c.empty] == list(range(10, 20))
    filled = cq.transmurality(ch, np.zeros_like(myo))
    assert all(c.transmurality_pct == 0.0 for c in filled.chords)


def test_sector_assignment_matches_pixel_oracle():
    rng = np.random.default_rng(5)
    myo, lv = annulus(64, 12, 20, center=(31.3, 32.8))
    myo &= rng.random(myo.shape) < 0.9
    ch = cq.build_chords(myo, lv)
    cy, cx = ch.center
    for i, j in zip(*np.nonzero(myo)):
        a = math.atan2(j - cx, i - cy) % (2 * math.pi)
        assert ch.sector_of_pixel[i, j] == min(int(a / (2 * math.pi / 100)), 99)
    assert np.all(ch.sector_of_pixel[~myo] == -1)


def test_geometry_errors():
    myo, lv = annulus()
    with pytest.raises(cq.GeometryError):
        cq.build_chords(myo, np.zeros_like(lv))
    with pytest.raises(cq.GeometryError):
        cq.build_chords(myo | lv, lv)


@pytest.mark.parametrize("k", [0, 1, 7, 33, 100])
def test_wedge_gives_k_transmural_chords(k):
    myo, lv = annulus(128, 25, 40)
    ch = cq.build_chords(myo, lv)
    scar = wedge(myo, ch.center, range(k))
    filled = cq.transmurality(ch, scar)
    pct = filled.percentages()
    assert cq.count_transmural(filled) == k
    assert np.all(pct[:k] == 100.0) and np.all(pct[k:] == 0.0)


def test_strict_threshold_and_bins():
    chords = cq.ChordSet([cq.Chord(i, 2, 1, 50.0) for i in range(100)], (0, 0))
    assert cq.count_transmural(chords) == 0
    assert cq.chord_bins(chords)["likely viable"] == 100
    assert [cq.viability_bin(p) for p in (0, 25, 26, 50, 51, 75, 76, 100)] == [0, 0, 1, 1, 2, 2, 3, 3]


def test_random_scar_ratios_and_partition():
    rng = np.random.default_rng(1)
    myo, lv = annulus()
    ch = cq.build_chords(myo, lv)
    scar = rng.random(myo.shape) < 0.3
    filled = cq.transmurality(ch, scar)
    sec = ch.sector_of_pixel
    for c in filled.chords:
        inside = sec == c.sector_index
        assert c.scar_pixels == int((scar & inside).sum())
        assert c.transmurality_pct == pytest.approx(100 * c.scar_pixels / inside.sum())
    assert sum(c.scar_pixels for c in filled.chords) == int((scar & myo).sum())
    assert cq.count_transmural(filled) == int((filled.percentages() > 50).sum())


def test_nsd_recovers_shifted_scar_and_monotone():
    rng = np.random.default_rng(3)
    myo, lv = annulus()
    img = rng.normal(0, 1, myo.shape)
    scar = wedge(myo, ((96 - 1) / 2, (96 - 1) / 2), range(0, 20))
    img[scar] += 5
    remote = myo & ~scar
    one = cq.nsd_segment(img, myo, remote, 1)
    assert (one & scar).sum() >= 0.99 * scar.sum()
    two = cq.nsd_segment(img, myo, remote, 2)
    three = cq.nsd_segment(img, myo, remote, 3)
    assert np.all(three <= two) and np.all(two <= one)
    assert not cq.nsd_segment(img, myo, remote, 1e9).any()
    assert not cq.nsd_segment(np.ones_like(img), myo, remote, 1).any()
    with pytest.raises(cq.UnreliableRemoteError):
        cq.nsd_segment(img, myo, np.zeros_like(myo), 1)


def test_derive_remote_avoids_pathology():
    sl, _ = generate_phantom(PhantomSpec(seed=4, size=64))
    lab = sl.labels["LGE"]
    gold = sl.pathology
    myo = np.isin(lab, (MYO, SCAR, EDEMA))
    remote = cq.derive_remote(myo, lab == LV, gold > 0)
    assert remote.sum() >= 10
    assert not (remote & (gold > 0)).any()
    assert np.all(remote <= myo)


def test_pearson():
    rng = np.random.default_rng(9)
    x = rng.normal(size=30)
    assert cq.pearson_r(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert cq.pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-12)
    y = rng.normal(size=30)
    cov = np.cov(x, y)
    assert cq.pearson_r(x, y) == pytest.approx(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]), abs=1e-12)
    assert math.isnan(cq.pearson_r(np.ones(5), np.arange(5.0)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100), st.floats(-50, 50), st.integers(0, 1000))
def test_pearson_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 12))
    assert cq.pearson_r(a * x + b, y) == pytest.approx(cq.pearson_r(x, y), abs=1e-9)


def test_quantify_and_outputs(tmp_path):
    sl, _ = generate_phantom(PhantomSpec(seed=2, size=64))
    lab = sl.labels["LGE"].copy()
    lab[sl.pathology == EDEMA] = EDEMA
    lab[sl.pathology == SCAR] = SCAR
    rep = cq.quantify(lab)
    no_lv = np.where(lab == LV, 0, lab)
    assert cq.quantify(no_lv).transmural_count == rep.transmural_count
    assert 0 < rep.scar_size_pct <= rep.edema_size_pct <= 100
    assert 0 <= rep.transmural_count <= 100
    assert sum(rep.chord_bins.values()) == sum(not c.empty for c in rep.chords.chords)
    cq.write_quant_csv(tmp_path / "q.csv", {"p1": rep})
    assert (tmp_path / "q.csv").read_text().startswith("# schema=quantreport.v1")
    cq.plot_bullseye(rep.chords, tmp_path / "b.png")
    cq.plot_correlation([1, 2, 3], [1.1, 2.3, 2.9], tmp_path / "c.png")
    assert (tmp_path / "b.png").stat().st_size > 0 and (tmp_path / "c.png").stat().st_size > 0
