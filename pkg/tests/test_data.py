import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cassnat.data import SyntheticTaskSpec, families, generate_synthetic, make_prototypes, render_tokens, spec_mask
from cassnat.errors import ConfigError


def test_shapes_and_labels():
    spec = SyntheticTaskSpec()
    for feats, y in generate_synthetic(spec, 50, stream=1):
        assert spec.len_min <= len(y) <= spec.len_max
        assert all(1 <= t <= spec.vocab_size for t in y)
        assert all(a != b for a, b in zip(y, y[1:]))
        assert len(y) * spec.dur_min <= feats.shape[0] <= len(y) * spec.dur_max
        assert feats.shape[1] == spec.feat_dim


def test_streams_are_independent_and_deterministic():
    spec = SyntheticTaskSpec()
    a = generate_synthetic(spec, 5, stream=1)
    b = generate_synthetic(spec, 5, stream=1)
    c = generate_synthetic(spec, 5, stream=2)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert [y for _, y in a] != [y for _, y in c]


def test_frames_follow_prototypes():
    spec = SyntheticTaskSpec(noise=0.0)
    protos = make_prototypes(spec)
    feats, y = generate_synthetic(spec, 1, durations=3)[0]
    np.testing.assert_array_equal(feats, np.repeat(protos[y], 3, axis=0))


def test_families_partition_vocabulary():
    spec = SyntheticTaskSpec()
    protos = make_prototypes(spec)
    fams = families(spec)
    assert sorted(t for f in fams for t in f) == list(range(1, spec.vocab_size + 1))
    dist = np.linalg.norm(protos[1:, None] - protos[None, 1:], axis=-1)
    assert dist[~np.eye(spec.vocab_size, dtype=bool)].min() >= spec.min_distance
    for a, b in fams:
        assert np.linalg.norm(protos[a] - protos[b]) <= 2 * spec.sibling_offset + 1e-12


def test_render_tokens():
    spec = SyntheticTaskSpec()
    x = render_tokens(spec, [1, 2, 3] * 10, seed=4)
    assert 30 * spec.dur_min <= len(x) <= 30 * spec.dur_max
    np.testing.assert_array_equal(x, render_tokens(spec, [1, 2, 3] * 10, seed=4))


@pytest.mark.parametrize("kw", [dict(vocab_size=1), dict(dur_min=0), dict(len_min=5, len_max=3),
                                dict(vocab_size=7, family_size=2)])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(**kw)


@given(st.integers(0, 3), st.integers(0, 10), st.integers(0, 3), st.integers(0, 6), st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_spec_mask_widths(nt, mt, nf, mf, seed):
    x = np.ones((20, 8))
    assert (spec_mask(x, nt, mt, 0, mf, seed) == 0).all(1).sum() <= nt * min(mt, 19)
    assert (spec_mask(x, 0, mt, nf, mf, seed) == 0).all(0).sum() <= nf * min(mf, 7)
    y = spec_mask(x, nt, mt, nf, mf, seed)
    np.testing.assert_array_equal(y, spec_mask(x, nt, mt, nf, mf, seed))
    assert (x == 1).all()


def test_spec_mask_noop():
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(spec_mask(x, 0, 5, 0, 5, 0), x)


def test_masked_fraction_matches_expectation():
    x = np.ones((20, 16))
    t_frac = np.mean([(spec_mask(x, 1, 6, 0, 0, s) == 0).all(1).mean() for s in range(1000)])
    f_frac = np.mean([(spec_mask(x, 0, 0, 1, 4, s) == 0).all(0).mean() for s in range(1000)])
    assert t_frac == pytest.approx(3 / 20, rel=0.1)
    assert f_frac == pytest.approx(2 / 16, rel=0.1)


def test_mask_zeroes_only_the_selected_region(rng):
    x = rng.normal(size=(30, 8)) + 10.0
    y = spec_mask(x, 2, 5, 1, 3, 7)
    zero = y == 0
    np.testing.assert_array_equal(y[~zero], x[~zero])
    assert (zero == (zero.all(1, keepdims=True) | zero.all(0, keepdims=True))).all()


def test_length_is_sum_of_durations():
    spec = SyntheticTaskSpec()
    for feats, y in generate_synthetic(spec, 20, stream=4, durations=9):
        assert len(feats) == 9 * len(y)


def test_nearest_prototype_recovers_frames():
    spec = SyntheticTaskSpec()
    protos = make_prototypes(spec)[1:]
    hits = total = 0
    for feats, y in generate_synthetic(spec, 50, stream=5, durations=10):
        guess = np.argmin(((feats[:, None, :] - protos[None]) ** 2).sum(-1), axis=1) + 1
        hits += int((guess == np.repeat(y, 10)).sum())
        total += len(guess)
    assert hits / total >= 0.95
