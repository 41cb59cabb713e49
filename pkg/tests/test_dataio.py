import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtcae.dataio import (
    CLASS_NAMES,
    Channel,
    ChannelManifest,
    Dataset,
    FoldError,
    ManifestError,
    ParseError,
    SynthSpec,
    apply_standardizer,
    channel_view,
    channel_views,
    fit_standardizer,
    is10_manifest,
    load_features_csv,
    load_manifest,
    make_loso_folds,
    save_manifest,
    synth_generate,
    write_features_csv,
)

HEADER = "utterance_id,speaker_id,label,f0,f1,f2,f3\n"


def _write(tmp_path, body, header=HEADER):
    path = tmp_path / "feats.csv"
    path.write_text(header + body, encoding="utf-8")
    return path


# --- CSV --------------------------------------------------------------------


def test_load_toy_csv(tmp_path):
    path = _write(tmp_path, "u1,s1,happy,1,2,3,4\nu2,s2,sad,0.5,-1,2e3,0\nu3,s1,neutral,0,0,0,0\n")
    ds = load_features_csv(path)
    assert (ds.n_samples, ds.n_features) == (3, 4)
    assert ds.labels.tolist() == [0, 2, 3]
    assert ds.speaker_ids.tolist() == ["s1", "s2", "s1"]
    assert ds.features[1, 2] == 2000.0


def test_unknown_label_cites_line(tmp_path):
    rows = "".join(f"u{i},s1,angry,1,2,3,4\n" for i in range(3)) + "u9,s1,bored,1,2,3,4\n"
    with pytest.raises(ParseError, match="line 5"):
        load_features_csv(_write(tmp_path, rows))


@pytest.mark.parametrize("body,match", [
    ("u1,s1,happy,1,2,3\n", "line 2: expected 7 fields"),
    ("u1,s1,happy,1,2,3,4\nu2,s1,sad,1,x,3,4\n", "line 3: non-numeric feature 'x'"),
    ("u1,s1,happy,1,nan,3,4\n", "line 2: non-finite"),
])
def test_parse_errors(tmp_path, body, match):
    with pytest.raises(ParseError, match=match):
        load_features_csv(_write(tmp_path, body))


def test_bad_header(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_features_csv(_write(tmp_path, "", header="id,spk,label,f0\n"))


def test_csv_round_trip(tmp_path):
    ds, _ = synth_generate(SynthSpec(channels=2, dims=3, samples_per_class=5, speakers=3))
    path = tmp_path / "s.csv"
    write_features_csv(ds, path)
    back = load_features_csv(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.speaker_ids, ds.speaker_ids)


def test_label_table():
    assert CLASS_NAMES == ("happy", "angry", "sad", "neutral")


# --- manifest ---------------------------------------------------------------


def _manifest(*cols, n=None):
    chans = tuple(Channel(f"c{i}", tuple(c)) for i, c in enumerate(cols))
    return ChannelManifest(chans, n if n is not None else sum(map(len, cols)))


def test_manifest_partition_checks():
    assert _manifest([0, 1], [2]).widths == [2, 1]
    with pytest.raises(ManifestError, match="column 1"):
        _manifest([0, 1], [1, 2], n=3)
    with pytest.raises(ManifestError, match="column 2"):
        _manifest([0, 1], [3], n=4)
    with pytest.raises(ManifestError, match="empty"):
        _manifest([0, 1], [], n=2)


def test_is10_manifest():
    m = is10_manifest()
    assert len(m) == 38
    assert m.n_features == 1582
    assert sum(m.widths) == 1582
    assert m.names[0] == "pcm_loudness" and m.names[-1] == "shimmer_local"
    bundled = load_manifest("is10_38ch", 1582)
    assert bundled.to_dict() == m.to_dict()


def test_manifest_file_round_trip(tmp_path):
    m = _manifest([3, 0], [1, 2, 4])
    path = tmp_path / "m.json"
    save_manifest(m, path)
    back = load_manifest(path, 5)
    assert back.to_dict() == m.to_dict()
    # one record per line keeps diffs readable
    assert len(path.read_text().strip().splitlines()) >= 2
    json.loads(path.read_text())


def test_manifest_dimension_mismatch(tmp_path):
    path = tmp_path / "m.json"
    save_manifest(_manifest([0], [1]), path)
    with pytest.raises(ManifestError):
        load_manifest(path, 3)


def test_channel_view_order_and_errors():
    x = np.arange(12.0).reshape(3, 4)
    m = _manifest([2, 0], [1, 3])
    assert np.array_equal(channel_view(x, m, 0), x[:, [2, 0]])
    with pytest.raises(IndexError):
        channel_view(x, m, 2)
    with pytest.raises(ManifestError):
        channel_view(np.zeros((3, 5)), m, 0)


@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_channel_views_are_lossless(d, k, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    cuts = np.sort(rng.choice(np.arange(1, d), size=min(k - 1, d - 1), replace=False))
    m = _manifest(*[p.tolist() for p in np.split(perm, cuts)])
    x = rng.normal(size=(4, d))
    views = channel_views(x, m)
    assert sum(v.shape[1] for v in views) == d
    joined = np.concatenate(views, axis=1)
    order = np.concatenate([c.columns for c in m.channels])
    back = np.empty_like(x)
    back[:, order] = joined
    assert np.array_equal(back, x)


# --- standardizer -----------------------------------------------------------


def test_standardizer_examples():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    z = apply_standardizer(fit_standardizer(x), x)
    # oracle: population std of (1,2,3) is sqrt(2/3)
    assert np.allclose(z[:, 0], np.array([-1, 0, 1]) / np.sqrt(2 / 3), atol=1e-15)
    assert np.allclose(z[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
    assert np.array_equal(z[:, 1], np.zeros(3))


@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_standardizer_properties(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5)) * rng.uniform(0.1, 100, 5) + rng.uniform(-50, 50, 5)
    z = apply_standardizer(fit_standardizer(x), x)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
    again = fit_standardizer(z)
    assert np.all(np.abs(again.mean) < 1e-10)
    assert np.all(np.abs(again.std - 1) < 1e-10)


def test_standardizer_uses_only_given_rows():
    train = np.array([[0.0], [2.0]])
    std = fit_standardizer(train)
    assert apply_standardizer(std, np.array([[4.0]]))[0, 0] == 3.0


# --- folds ------------------------------------------------------------------


def test_loso_folds():
    ds, _ = synth_generate(SynthSpec(channels=1, dims=2, samples_per_class=10, speakers=10))
    plan = make_loso_folds(ds.speaker_ids)
    assert len(plan) == 10
    assert sorted(f.test_speaker for f in plan) == ds.speakers()
    all_test = []
    for k, fold in enumerate(plan):
        assert fold.validation_speaker == ds.speakers()[(k + 1) % 10]
        tr, va, te = fold.indices(ds.speaker_ids)
        assert set(ds.speaker_ids[te]) == {fold.test_speaker}
        assert not set(tr) & set(te) and not set(tr) & set(va) and not set(va) & set(te)
        assert len(tr) + len(va) + len(te) == ds.n_samples
        all_test.extend(te.tolist())
    assert sorted(all_test) == list(range(ds.n_samples))


def test_loso_needs_three_speakers():
    with pytest.raises(FoldError):
        make_loso_folds(["a", "b", "a"])


# --- synthetic data ---------------------------------------------------------


def test_synth_counts():
    ds, m = synth_generate(SynthSpec(channels=3, dims=5, samples_per_class=50, speakers=10))
    assert ds.n_samples == 200 and ds.n_features == 15
    assert len(ds.speakers()) == 10
    assert m.widths == [5, 5, 5]
    assert ds.class_counts() == [50] * 4


def test_synth_deterministic():
    a, _ = synth_generate(SynthSpec(channels=2, dims=3, samples_per_class=5, seed=3))
    b, _ = synth_generate(SynthSpec(channels=2, dims=3, samples_per_class=5, seed=3))
    assert np.array_equal(a.features, b.features)


def _nearest_mean_accuracy(train, test):
    means = np.stack([train.features[train.labels == c].mean(0) for c in range(4)])
    d = ((test.features[:, None, :] - means[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


def test_synth_separable_oracle():
    ds, _ = synth_generate(SynthSpec(channels=3, dims=5, samples_per_class=200,
                                     separation=10, noise=1))
    idx = np.arange(ds.n_samples)
    acc = _nearest_mean_accuracy(ds.subset(idx % 2 == 0), ds.subset(idx % 2 == 1))
    assert acc >= 0.99


def test_synth_separation_zero_is_chance():
    ds, _ = synth_generate(SynthSpec(channels=3, dims=5, samples_per_class=500, separation=0))
    idx = np.arange(ds.n_samples)
    acc = _nearest_mean_accuracy(ds.subset(idx % 2 == 0), ds.subset(idx % 2 == 1))
    assert 0.2 < acc < 0.3


def test_dataset_validates():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0, 4], ["a", "b"], ["u", "v"])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0], ["a", "b"], ["u", "v"])
