import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqcross import datapipe, imaging, spectrum
from freqcross.datapipe import DatasetManifest, FixtureSpec, ManifestEntry
from freqcross.errors import (
    DuplicatePath,
    EmptyClass,
    EmptySplit,
    IoFailure,
    MalformedRow,
    UnknownLabel,
    UnknownSplit,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_single_entry(tmp_path):
    man = datapipe.load_manifest(write(tmp_path, "m.csv", "path,label,split\na.ppm,1,train\n"))
    assert man.entries == [ManifestEntry("a.ppm", 1, "train")]
    assert man.counts[("train", "synthetic")] == 1
    assert sum(man.counts.values()) == 1
    assert man.resolve(man.entries[0]) == tmp_path / "a.ppm"


def test_jsonl_and_label_names(tmp_path):
    text = '{"path": "a.ppm", "label": "real", "split": "val"}\n\n{"path": "b.ppm", "label": 1, "split": "test"}\n'
    man = datapipe.load_manifest(write(tmp_path, "m.jsonl", text))
    assert [(e.label, e.split) for e in man.entries] == [(0, "val"), (1, "test")]


def test_duplicate_path(tmp_path):
    with pytest.raises(DuplicatePath):
        datapipe.load_manifest(write(tmp_path, "m.csv", "path,label,split\na,0,train\na,1,val\n"))


@pytest.mark.parametrize(
    "text,line",
    [("path,label\na,0\n", 1), ("path,label,split\na,0,train\nb,1\n", 3), ("", 1)],
)
def test_malformed_row_reports_line(tmp_path, text, line):
    with pytest.raises(MalformedRow) as info:
        datapipe.load_manifest(write(tmp_path, "m.csv", text))
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_malformed_jsonl(tmp_path):
    with pytest.raises(MalformedRow) as info:
        datapipe.load_manifest(write(tmp_path, "m.jsonl", '{"path":"a","label":0,"split":"train"}\n{oops\n'))
    assert info.value.line == 2


def test_unknown_label_and_split(tmp_path):
    with pytest.raises(UnknownLabel):
        datapipe.load_manifest(write(tmp_path, "a.csv", "path,label,split\na,2,train\n"))
    with pytest.raises(UnknownSplit):
        datapipe.load_manifest(write(tmp_path, "b.csv", "path,label,split\na,0,holdout\n"))
    with pytest.raises(UnknownSplit):
        DatasetManifest([]).split("holdout")


def test_missing_manifest_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        datapipe.load_manifest(tmp_path / "none.csv")


def test_manifest_roundtrip(tmp_path):
    man = datapipe.make_split([(f"x{i}.ppm", i % 2) for i in range(12)], seed=3)
    datapipe.write_manifest(man, tmp_path / "m.csv")
    assert datapipe.load_manifest(tmp_path / "m.csv").entries == man.entries


# -- splitting ----------------------------------------------------------------


def items(n_real, n_syn):
    return [(f"r{i}", 0) for i in range(n_real)] + [(f"s{i}", 1) for i in range(n_syn)]


def test_split_10_10_largest_remainder():
    man = datapipe.make_split(items(10, 10), (0.7, 0.15, 0.15), seed=0)
    for name in ("real", "synthetic"):
        assert [man.counts[(s, name)] for s in datapipe.SPLITS] == [7, 2, 1]


def test_split_all_train():
    man = datapipe.make_split(items(4, 5), (1, 0, 0))
    assert all(e.split == "train" for e in man.entries)


def test_split_deterministic_and_seed_sensitive():
    a = datapipe.make_split(items(30, 30), seed=1)
    b = datapipe.make_split(items(30, 30), seed=1)
    c = datapipe.make_split(items(30, 30), seed=2)
    assert a.entries == b.entries
    assert a.entries != c.entries


def test_split_empty_class():
    with pytest.raises(EmptyClass):
        datapipe.make_split(items(5, 0))


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.7, 0.2, 0.2)])
def test_split_bad_ratios(ratios):
    with pytest.raises(ValueError):
        datapipe.make_split(items(3, 3), ratios)


def test_split_20000_rows_table_proportions():
    # 70/15/15 of the whole corpus
    man = datapipe.make_split(items(10_000, 10_000), (0.7, 0.15, 0.15), seed=0)
    totals = {s: sum(man.counts[(s, n)] for n in datapipe.LABEL_NAMES) for s in datapipe.SPLITS}
    assert totals == {"train": 14_000, "val": 3_000, "test": 3_000}


@settings(max_examples=40, deadline=None)
@given(
    n_real=st.integers(1, 60),
    n_syn=st.integers(1, 60),
    w=st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10)).filter(lambda t: sum(t) > 0),
    seed=st.integers(0, 1000),
)
def test_split_is_partition_within_one(n_real, n_syn, w, seed):
    ratios = tuple(x / sum(w) for x in w)
    man = datapipe.make_split(items(n_real, n_syn), ratios, seed)
    assert len(man.entries) == n_real + n_syn
    for label, n in ((0, n_real), (1, n_syn)):
        for split, r in zip(datapipe.SPLITS, ratios):
            got = man.counts[(split, datapipe.LABEL_NAMES[label])]
            assert abs(got - r * n) < 1.0 + 1e-9


# -- sample preparation ---------------------------------------------------------


@pytest.fixture
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    return datapipe.make_fixtures(FixtureSpec(count_per_class=5, side=32, seed=4), d)


def test_constant_image_sample(tmp_path):
    (tmp_path / "g.ppm").write_bytes(imaging.encode_ppm(np.full((16, 16, 3), 0.5)))
    s = datapipe.prepare_sample(ManifestEntry("g.ppm", 0, "test"), 16, root=tmp_path)
    assert s.rgb.shape == (3, 16, 16) and s.m_log.shape == (1, 16, 16)
    # the spectrum is a lone DC spike, so z-scoring leaves two levels
    n = 16 * 16
    expected = np.full((16, 16), -1 / np.sqrt(n - 1))
    expected[8, 8] = np.sqrt(n - 1)
    assert np.allclose(s.m_log[0], expected, atol=1e-9)
    assert s.e[0] > 0
    assert np.max(np.abs(s.e[1:])) <= 1e-9 * s.e[0]


def test_black_image_m_log_zero(tmp_path):
    (tmp_path / "k.ppm").write_bytes(imaging.encode_ppm(np.zeros((16, 16, 3))))
    s = datapipe.prepare_sample(ManifestEntry("k.ppm", 0, "test"), 16, root=tmp_path)
    assert np.array_equal(s.m_log, np.zeros((1, 16, 16)))
    assert np.all(s.e == 0)


def test_sample_views_consistent(corpus):
    for entry in corpus.entries[:4]:
        s = datapipe.prepare_sample(entry, 24, imaging.AugmentConfig(), np.random.default_rng(1), 12, root=corpus.root)
        gray = imaging.to_grayscale(s.rgb.transpose(1, 2, 0))
        m_log, prof = spectrum.spectrum_features(gray, 12)
        assert np.max(np.abs(m_log - s.m_log[0])) <= 1e-6
        assert np.max(np.abs(prof.energy - s.e)) <= 1e-6 * max(1.0, np.max(np.abs(s.e)))
        assert 0 <= s.rgb.min() and s.rgb.max() <= 1


def test_prepare_without_augment_is_repeatable(corpus):
    e = corpus.entries[0]
    a = datapipe.prepare_sample(e, 32, root=corpus.root)
    b = datapipe.prepare_sample(e, 32, imaging.AugmentConfig(enabled=False), np.random.default_rng(5), root=corpus.root)
    assert all(np.array_equal(x, y) for x, y in [(a.rgb, b.rgb), (a.m_log, b.m_log), (a.e, b.e)])


def test_prepare_error_names_path(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(Exception, match="bad.ppm"):
        datapipe.prepare_sample(ManifestEntry("bad.ppm", 0, "test"), 16, root=tmp_path)
    with pytest.raises(IoFailure, match="missing.ppm"):
        datapipe.prepare_sample(ManifestEntry("missing.ppm", 0, "test"), 16, root=tmp_path)


# -- batching -------------------------------------------------------------------


@pytest.fixture
def ten(tmp_path_factory):
    d = tmp_path_factory.mktemp("ten")
    return datapipe.make_fixtures(FixtureSpec(count_per_class=5, side=16, seed=2, ratios=(1, 0, 0)), d)


def test_batch_sizes(ten):
    sizes = [len(b) for b in datapipe.make_batches(ten, "train", 4, side=16, radial_bins=6)]
    assert sizes == [4, 4, 2]


def test_each_element_once_per_epoch(ten):
    idx = np.concatenate([b.indices for b in datapipe.make_batches(ten, "train", 3, seed=1, epoch=2, side=16)])
    assert sorted(idx.tolist()) == list(range(10))


def test_shuffle_determinism(ten):
    def order(seed, epoch):
        return [b.indices.tolist() for b in datapipe.make_batches(ten, "train", 4, seed, epoch, side=16)]

    assert order(0, 0) == order(0, 0)
    assert order(0, 0) != order(0, 1)


def test_augmented_batches_repeatable(ten):
    cfg = imaging.AugmentConfig()
    a = next(datapipe.make_batches(ten, "train", 4, 3, 1, side=16, augment_cfg=cfg))
    b = next(datapipe.make_batches(datapipe.SampleSource(ten, 16, workers=3), "train", 4, 3, 1, augment_cfg=cfg))
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.e, b.e)


def test_val_keeps_manifest_order(corpus):
    val = corpus.split("val")
    batches = list(datapipe.make_batches(corpus, "val", 1, seed=9, epoch=3, side=32))
    assert [int(b.indices[0]) for b in batches] == list(range(len(val)))
    assert [int(b.labels[0]) for b in batches] == [e.label for e in val]


def test_non_train_ignores_augmentation(corpus):
    cfg = imaging.AugmentConfig()
    a = next(datapipe.make_batches(corpus, "test", 8, side=32, augment_cfg=cfg))
    b = next(datapipe.make_batches(corpus, "test", 8, side=32))
    assert np.array_equal(a.rgb, b.rgb)


def test_empty_split(ten):
    with pytest.raises(EmptySplit):
        next(datapipe.make_batches(ten, "test", 4, side=16))


def test_bad_batch_size(ten):
    with pytest.raises(ValueError):
        next(datapipe.make_batches(ten, "train", 0, side=16))


# -- fixtures -------------------------------------------------------------------


def digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_fixtures_bitwise_reproducible(tmp_path):
    spec = FixtureSpec(count_per_class=3, side=16, seed=7)
    datapipe.make_fixtures(spec, tmp_path / "a")
    datapipe.make_fixtures(spec, tmp_path / "b")
    da = digest(tmp_path / "a")
    assert da == digest(tmp_path / "b")
    assert len(da) == 7 and "manifest.csv" in da and "synthetic_0002.ppm" in da


def test_fixture_spec_validation():
    with pytest.raises(ValueError):
        FixtureSpec(band=(0.5, 0.2))
    with pytest.raises(ValueError):
        FixtureSpec(band_gain=0)
    with pytest.raises(ValueError):
        FixtureSpec(side=4)


def test_fixture_null_gain_amplitudes_equal():
    spec = FixtureSpec(band_gain=1.0, side=32)
    assert np.array_equal(datapipe.fixture_amplitude(spec, True), datapipe.fixture_amplitude(spec, False))


def test_paired_fixtures_band_energy():
    # same (seed, index) gives the same phase for both classes
    spec = FixtureSpec(side=64)
    edges = np.linspace(0, 1, 31)
    band = (edges[:-1] >= 0.1 - 1e-12) & (edges[1:] <= 0.4 + 1e-12)
    for i in range(3):
        r = spectrum.spectrum_features(imaging.to_grayscale(datapipe.fixture_image(spec, False, i)), 30)[1]
        s = spectrum.spectrum_features(imaging.to_grayscale(datapipe.fixture_image(spec, True, i)), 30)[1]
        assert s.energy[band].mean() > r.energy[band].mean()


def band_stats(manifest, bins=30, band=(0.1, 0.4)):
    real, syn = datapipe.class_profiles(manifest, bins)
    rep = spectrum.class_profile_report(real, syn)
    lo, hi = rep.edges[:-1], rep.edges[1:]
    inside = (lo < band[1]) & (hi > band[0])
    rel = rep.diff / rep.mean_real
    return rel, inside


def test_fixture_classes_differ_only_in_band(tmp_path):
    man = datapipe.make_fixtures(FixtureSpec(count_per_class=20, side=64), tmp_path)
    rel, inside = band_stats(man)
    assert np.max(np.abs(rel[~inside])) < 0.05
    core = np.flatnonzero(inside)[1:-1]  # bins wholly inside the band
    assert np.all(rel[core] > 0.5)
    assert np.all(rel[inside] > 0)
