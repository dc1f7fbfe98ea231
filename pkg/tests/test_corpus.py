from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainssl.corpus import (
    CorpusConfig, CorpusError, PatchImage, PPMFormatError, SlideRecord, StainClassSpec, build_corpus,
    decode_ppm, default_stain_classes, encode_ppm, gen_slide, load_patches, luma_u8, otsu_threshold,
    read_manifest, read_patch, sample_patches, tile_slide, write_patch,
)
from stainssl.rng import SplitMix


def brute_otsu(hist):
    """Exhaustive search over t in 0..255 with exact Fraction variances; ties keep the smallest t."""
    h = [int(c) for c in hist]
    n = sum(h)
    best, best_t = Fraction(-1), None
    for t in range(256):
        n0, n1 = sum(h[:t + 1]), sum(h[t + 1:])
        if n0 == 0 or n1 == 0:
            var = Fraction(0)
        else:
            m0 = Fraction(sum(i * h[i] for i in range(t + 1)), n0)
            m1 = Fraction(sum(i * h[i] for i in range(t + 1, 256)), n1)
            var = Fraction(n0 * n1, n * n) * (m0 - m1) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


def test_otsu_two_spikes_picks_smallest_tie():
    h = np.zeros(256, dtype=int)
    h[0] = h[255] = 50
    assert otsu_threshold(h) == 0


def test_otsu_constant_is_no_split():
    h = np.zeros(256, dtype=int)
    h[120] = 999
    assert otsu_threshold(h) is None


def test_otsu_errors():
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(10))
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(256))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=256, max_size=256))
def test_otsu_matches_brute_force(hist):
    if sum(hist) == 0:
        return
    got = otsu_threshold(hist)
    if sum(1 for c in hist if c) < 2:
        assert got is None
    else:
        assert got == brute_otsu(hist)


def test_luma_rounds_half_up():
    px = np.array([[[0, 0, 0], [255, 255, 255], [1, 1, 1]]], dtype=np.uint8)
    assert luma_u8(px).tolist() == [[0, 255, 1]]
    # 0.299*R with R=5 is 1.495 -> 1; R=5,G=1 -> 2.082 -> 2
    assert luma_u8(np.array([[[5, 0, 0], [5, 1, 0]]], dtype=np.uint8)).tolist() == [[1, 2]]


def _slide(raster, sid="s0"):
    return SlideRecord(sid, 0, raster, 0)


def test_tile_dark_quadrant_fixture():
    r = np.full((448, 448, 3), (242, 240, 238), dtype=np.uint8)
    r[:224, :224] = 60
    tiles = tile_slide(_slide(r), 112, 0.25)
    assert sorted(t.origin for t in tiles) == [(0, 0), (0, 112), (112, 0), (112, 112)]
    assert all(t.foreground_fraction == 1.0 and t.pixels.shape == (112, 112, 3) for t in tiles)


def test_tile_white_slide_is_empty():
    r = np.full((448, 448, 3), 242, dtype=np.uint8)
    assert tile_slide(_slide(r), 112) == []


def test_tile_grid_bound_and_size_error():
    spec = default_stain_classes(4)[0]
    slide = gen_slide(spec, 3, size=448)
    assert len(tile_slide(slide, 112, 0.0)) == 16
    with pytest.raises(ValueError):
        tile_slide(slide, 500)


def test_gen_slide_deterministic_and_tissue_floor():
    spec = default_stain_classes(4)[1]
    a, b = gen_slide(spec, 11, size=336), gen_slide(spec, 11, size=336)
    assert a.raster.tobytes() == b.raster.tobytes()
    assert a.tissue_fraction >= 0.30
    assert gen_slide(spec, 12, size=336).raster.tobytes() != a.raster.tobytes()


def test_zero_density_gives_up():
    spec = StainClassSpec(0, ((10, 10, 10), (20, 20, 20)), density=0.0)
    with pytest.raises(CorpusError, match="16 attempts"):
        gen_slide(spec, 0, size=224)


def test_background_luma_guard():
    with pytest.raises(ValueError):
        StainClassSpec(0, ((0, 0, 0), (1, 1, 1)), 10.0, background=(100, 100, 100))


def test_sample_patches_cap_rules():
    pats = list(range(25))
    assert sample_patches(pats, 100, SplitMix(0)) == pats
    big = list(range(500))
    pick = sample_patches(big, 100, SplitMix(1))
    assert len(set(pick)) == 100 and pick == sorted(pick)
    assert pick == sample_patches(big, 100, SplitMix(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_ppm_round_trip(h, w, seed):
    px = (SplitMix(seed).random(h * w * 3) * 256).astype(np.uint8).reshape(h, w, 3)
    assert np.array_equal(decode_ppm(encode_ppm(px)), px)


def test_ppm_errors_carry_offsets(tmp_path):
    good = encode_ppm(np.zeros((2, 3, 3), dtype=np.uint8))
    with pytest.raises(PPMFormatError) as e:
        decode_ppm(b"P5" + good[2:])
    assert e.value.offset == 0
    with pytest.raises(PPMFormatError, match="truncated"):
        decode_ppm(good[:-1])
    with pytest.raises(PPMFormatError, match="trailing"):
        decode_ppm(good + b"\0")
    assert decode_ppm(b"P6 # comment\n3 2\n255\n" + bytes(18)).shape == (2, 3, 3)


def test_patch_file_round_trip(tmp_path):
    px = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    path = tmp_path / "c0_s0000" / "c0_s0000-00224-00448.ppm"
    path.parent.mkdir()
    write_patch(path, PatchImage("c0_s0000-00224-00448", "c0_s0000", (224, 448), px))
    p = read_patch(path)
    assert p.origin == (224, 448) and p.slide_id == "c0_s0000" and np.array_equal(p.pixels, px)


SMALL = CorpusConfig(classes=2, slides_per_class=3, slide_size=448, patch_size=112, cap=5)


def test_build_corpus_counts_and_determinism(tmp_path):
    s1 = build_corpus(SMALL, tmp_path / "a", seed=4)
    s2 = build_corpus(SMALL, tmp_path / "b", seed=4)
    m1 = (tmp_path / "a" / "manifest.csv").read_bytes()
    assert m1 == (tmp_path / "b" / "manifest.csv").read_bytes()
    rows = read_manifest(tmp_path / "a" / "manifest.csv")
    files = list((tmp_path / "a").rglob("*.ppm"))
    assert len(rows) == len(files) == s1.n_patches == s2.n_patches
    assert s1.n_patches <= 2 * 3 * 5
    _, px = load_patches(tmp_path / "a")
    assert px.shape == (len(rows), 112, 112, 3) and px.dtype == np.uint8


def test_dense_class_hits_cap(tmp_path):
    specs = [replace(s, density=900.0) for s in default_stain_classes(2)]
    cfg = replace(SMALL, specs=specs, cap=3)
    build_corpus(cfg, tmp_path, seed=0)
    rows = read_manifest(tmp_path / "manifest.csv")
    per_slide = {}
    for r in rows:
        per_slide[r.slide_id] = per_slide.get(r.slide_id, 0) + 1
    assert set(per_slide.values()) == {3}


def test_workers_do_not_change_output(tmp_path):
    build_corpus(SMALL, tmp_path / "a", seed=2, workers=1)
    build_corpus(SMALL, tmp_path / "b", seed=2, workers=2)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for f in (tmp_path / "a").rglob("*.ppm"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(CorpusError):
        load_patches(tmp_path)
