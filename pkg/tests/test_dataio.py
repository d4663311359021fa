import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfrulstm.dataio import (AnnotationRecord, BadMagicError, BadVersionError, Dataset,
                             FeatureFile, FormatError, SyntheticSpec, TruncatedError,
                             decode_features, decode_store, encode_features, encode_store,
                             fold_frequency, load_model, read_annotations, read_features,
                             sample_window, save_model, synth_generate, window_indices,
                             write_annotations, write_features)
from sfrulstm.model import Model, ModelConfig
from sfrulstm.numerics import ParamStore
from sfrulstm.slowfast import build_clock


def test_feature_round_trip_bit_exact(tmp_path, rng):
    f = FeatureFile(30.0, rng.normal(size=(10, 4)).astype(np.float32))
    write_features(tmp_path / "a.sfft", f)
    g = read_features(tmp_path / "a.sfft")
    assert g.feature_rate == 30.0 and g.data.tobytes() == f.data.tobytes()
    assert encode_features(g) == (tmp_path / "a.sfft").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False)),
       st.floats(0.1, 1000))
def test_feature_round_trip_property(data, rate):
    g = decode_features(encode_features(FeatureFile(rate, data)))
    assert g.feature_rate == rate and g.data.shape == data.shape
    assert g.data.tobytes() == data.tobytes()


def test_empty_feature_file():
    g = decode_features(encode_features(FeatureFile(15.0, np.zeros((0, 3), np.float32))))
    assert g.num_frames == 0 and g.dim == 3


def test_feature_errors_are_distinct(rng):
    buf = encode_features(FeatureFile(30.0, rng.normal(size=(3, 2)).astype(np.float32)))
    with pytest.raises(BadMagicError):
        decode_features(b"XXXX" + buf[4:])
    with pytest.raises(BadVersionError):
        decode_features(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncatedError):
        decode_features(buf[:-1])
    with pytest.raises(TruncatedError):
        decode_features(buf[:10])
    assert len({BadMagicError, BadVersionError, TruncatedError}) == 3


def test_window_forced_arithmetic():
    idx = window_indices(10.0, 0.25, 14, 30.0)
    np.testing.assert_array_equal(idx, np.floor(np.arange(6.5, 10.0, 0.25) * 30).astype(int))
    assert idx[0] == 195 and idx[-1] == 292


def test_window_left_padding():
    f = FeatureFile(30.0, np.arange(60, dtype=np.float32)[:, None])
    w = sample_window(f, 0.5, 0.5, 7)
    assert (w[:5] == 0).all() and (w == 0).all()  # t=6,7 fall at or before 0 too
    with pytest.raises(ValueError):
        sample_window(f, 2.5, 0.5, 7)


@given(st.floats(0.1, 20), st.sampled_from([0.1, 0.125, 0.25, 0.5, 1.0]), st.integers(1, 30))
def test_window_strictly_before_start(start, alpha, T):
    rate = 30.0
    idx = window_indices(start, alpha, T, rate)
    ts = start - alpha * np.arange(T, 0, -1)
    assert np.all(ts < start)
    assert np.all(idx / rate <= np.maximum(ts, 0) + 1e-9)
    assert np.all(np.diff(idx) >= 0)


@given(st.integers(0, 200), st.integers(0, 60))
def test_window_translation_consistent(start_frame, shift):
    rng = np.random.default_rng(start_frame)
    base = rng.normal(size=(400, 2)).astype(np.float32)
    pad = np.repeat(base[:1], shift, axis=0)
    start = (start_frame + 150) / 30.0
    a = sample_window(FeatureFile(30.0, base), start, 0.25, 12)
    b = sample_window(FeatureFile(30.0, np.concatenate([pad, base])), start + shift / 30.0, 0.25, 12)
    np.testing.assert_array_equal(a, b)


def test_annotations_round_trip_and_validation(tmp_path):
    recs = [AnnotationRecord("v1", 1.5, 0), AnnotationRecord("v2", 3.25, 7)]
    write_annotations(tmp_path / "a.csv", recs)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "video_id,start_sec,class_id"
    assert read_annotations(tmp_path / "a.csv", 8) == recs
    with pytest.raises(ValueError):
        read_annotations(tmp_path / "a.csv", 5)
    with pytest.raises(ValueError):
        AnnotationRecord("v", -1.0, 0)


# ---------------------------------------------------------------- synthetic

SMALL = SyntheticSpec(per_class=12, seed=3)


def test_synth_deterministic_and_balanced(tmp_path):
    a, b = synth_generate(SMALL), synth_generate(SMALL)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert np.bincount(a.labels).tolist() == [12] * 8
    c = Dataset.load(tmp_path / "a")
    np.testing.assert_array_equal(c.windows(0.5, 7)["rgb"], a.windows(0.5, 7)["rgb"])


def test_synth_rejects_non_aliasing_pair():
    with pytest.raises(ValueError, match="alias"):
        synth_generate(SyntheticSpec(fast_freqs=(2.5, 3.0)))
    assert fold_frequency(2.5, 2.0) == fold_frequency(3.5, 2.0) == 0.5


def test_synth_window_covers_three_slow_periods():
    data = synth_generate(SMALL)
    assert min(a.start_sec for a in data.annotations) >= 3 / 0.25


def test_fast_pair_aliased_on_slow_grid():
    """Noise-free slow-grid samples of the two fast classes coincide up to phase."""
    spec = SyntheticSpec(per_class=4, sigma=0.0, seed=5)
    data = synth_generate(spec)
    w = data.windows(0.5, 7)["rgb"]
    lab = data.labels
    fast = [c for c in range(8) if spec.is_fast_class(c)]
    p = fast[0] // 2
    coords = slice(2 * p, 2 * p + 2)
    t_rel = np.arange(7)
    for i in np.flatnonzero(lab == fast[0]):
        for j in np.flatnonzero(lab == fast[1]):
            a, b = w[i][:, coords], w[j][:, coords]
            # both are rank-1: a(t) = s_a(t) proto, b(t) = s_b(t) proto
            proto = a[np.argmax(np.abs(a).sum(1))]
            proto = proto / np.linalg.norm(proto)
            sa, sb = a @ proto, b @ proto
            # both must be unit sinusoids at the folded 0.5 Hz (pi/2 per step)
            basis = np.stack([np.sin(np.pi * t_rel / 2), np.cos(np.pi * t_rel / 2)], 1)
            ca = np.linalg.lstsq(basis, sa, rcond=None)[0]
            cb = np.linalg.lstsq(basis, sb, rcond=None)[0]
            np.testing.assert_allclose(basis @ ca, sa, atol=2e-6)
            np.testing.assert_allclose(basis @ cb, sb, atol=2e-6)
            assert abs(np.hypot(*ca) - 1) < 1e-5 and abs(np.hypot(*cb) - 1) < 1e-5


def nearest_template(window, t, spec):
    """Least-squares fit of every class's sinusoid (free phase and direction
    in that pair's two coordinates); returns the best-fitting class."""
    best, best_res = None, np.inf
    for c in range(spec.classes):
        p = c // 2
        f = spec.class_frequency(c)
        basis = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], 1)
        y = window[:, 2 * p:2 * p + 2]
        coef = np.linalg.lstsq(basis, y, rcond=None)[0]
        res = ((y - basis @ coef) ** 2).sum() + (window ** 2).sum() - (y ** 2).sum()
        if res < best_res:
            best, best_res = c, res
    return best


def test_nearest_template_oracle_on_fast_grid():
    spec = SyntheticSpec(per_class=40, sigma=0.1, seed=11)
    data = synth_generate(spec)
    clock = build_clock(0.5, 0.125, 1.5, 2.0)
    w = data.windows(clock.alpha_f, clock.T)["rgb"]
    t = np.arange(clock.T) * clock.alpha_f
    fast = np.array([spec.is_fast_class(c) for c in data.labels])
    pred = np.array([nearest_template(w[i], t, spec) for i in np.flatnonzero(fast)])
    assert (pred == data.labels[fast]).mean() >= 0.95


def test_split_partition():
    data = synth_generate(SMALL)
    parts = data.split(seed=2)
    assert [len(p) for p in parts] == [67, 10, 19]
    ids = [a.video_id for p in parts for a in p.annotations]
    assert sorted(ids) == sorted(a.video_id for a in data.annotations)
    assert [a.video_id for a in data.split(seed=2)[0].annotations] == \
        [a.video_id for a in parts[0].annotations]


# ---------------------------------------------------------------- models

def test_store_round_trip_and_errors(rng):
    s = ParamStore()
    s.add("a.W", rng.normal(size=(3, 2)))
    s.add("b", rng.normal(size=4))
    buf = encode_store(s, {"k": 1})
    t, cfg = decode_store(buf)
    assert cfg == {"k": 1} and list(t) == ["a.W", "b"]
    assert all(t[n].tobytes() == s[n].tobytes() for n in s)
    empty, _ = decode_store(encode_store(ParamStore(), {}))
    assert len(empty) == 0
    with pytest.raises(BadMagicError):
        decode_store(b"SFFT" + buf[4:])
    with pytest.raises(TruncatedError):
        decode_store(buf[:-3])
    s2 = ParamStore()
    s2.add("x", np.zeros(1))
    s2.add("y", np.zeros(1))
    with pytest.raises(FormatError, match="duplicate"):
        decode_store(encode_store(s2, {}).replace(b"y", b"x"))


def test_model_round_trip_identical_logits(tmp_path, rng):
    cfg = ModelConfig(("rgb",), (3,), 4, 5, build_clock(0.5, 0.25, 1.0, 1.0), seed=4)
    m = Model(cfg)
    m.randomize_heads(9)
    save_model(tmp_path / "m.sfru", m)
    m2 = load_model(tmp_path / "m.sfru")
    x = rng.normal(size=(3, cfg.clock.T, 3))
    assert m2.config == cfg
    assert m.forward(x).logits.tobytes() == m2.forward(x).logits.tobytes()
    save_model(tmp_path / "m2.sfru", m2)
    assert (tmp_path / "m.sfru").read_bytes() == (tmp_path / "m2.sfru").read_bytes()
