import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cassnat.analysis import (
    EmbeddingTable, cosine_neighbors, dump_attention, extract_embeddings, jacobi_eigh, last_layers,
    mutual_top_k, pca_2d, read_attention, write_attention, write_pca,
)
from cassnat.data import SyntheticTaskSpec, generate_synthetic
from cassnat.errors import DegenerateError, UsageError
from cassnat.gradsuite import toy_config
from cassnat.model import CassNat

from oracles import pca_oracle


def test_jacobi_matches_eigh(rng):
    for n in (2, 5, 16):
        a = rng.normal(size=(n, n))
        a = a + a.T
        w, v = jacobi_eigh(a)
        ref = np.linalg.eigvalsh(a)[::-1]
        np.testing.assert_allclose(w, ref, atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-10)
        np.testing.assert_allclose(a @ v, v * w, atol=1e-9)


@pytest.mark.parametrize("scale", [1e-9, 1.0, 1e6])
def test_jacobi_accuracy_is_scale_free(rng, scale):
    a = rng.normal(size=(6, 6))
    a = (a + a.T) * scale
    w, _ = jacobi_eigh(a)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(a)[::-1], atol=1e-10 * scale)


@pytest.mark.parametrize("n,d", [(2, 3), (5, 4), (30, 32), (12, 8)])
def test_pca_matches_oracle(rng, n, d):
    x = rng.normal(size=(n, d)) * np.linspace(3, 0.5, d)
    res = pca_2d(x)
    ref_coords, ref_var = pca_oracle(x)
    for k in range(2 if n > 2 else 1):
        s = np.sign(res.coords[:, k] @ ref_coords[:, k])
        np.testing.assert_allclose(res.coords[:, k], s * ref_coords[:, k], atol=1e-8)
    np.testing.assert_allclose(res.explained, ref_var, atol=1e-8)


@given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)))
@settings(max_examples=60, deadline=None)
def test_pca_properties(x):
    if np.ptp(x, axis=0).max() < 1e-6:
        with pytest.raises(DegenerateError):
            pca_2d(x)
        return
    res = pca_2d(x)
    np.testing.assert_allclose(res.coords.mean(0), 0.0, atol=1e-8)
    assert res.explained[0] >= res.explained[1] >= 0
    np.testing.assert_allclose(np.linalg.norm(res.components, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(res.components[0] @ res.components[1], 0.0, atol=1e-8)


def test_pca_errors():
    with pytest.raises(UsageError):
        pca_2d(np.ones((1, 4)))
    with pytest.raises(DegenerateError):
        pca_2d(np.ones((3, 4)))


def test_write_pca():
    res = pca_2d(np.array([[0.0, 0.0], [2.0, 0.0]]))
    buf = io.StringIO()
    write_pca([4, 7], res, buf)
    assert buf.getvalue().splitlines() == ["4\t-1\t0", "7\t1\t0"]


def test_streaming_mean(rng):
    t = EmbeddingTable()
    vs = rng.normal(size=(50, 3))
    for v in vs:
        t.add(2, v)
    np.testing.assert_allclose(t.means[2], vs.mean(0), atol=1e-12)
    assert t.counts[2] == 50 and 2 in t and len(t) == 1


def test_table_round_trip(rng):
    t = EmbeddingTable()
    for tok in (3, 1, 2):
        t.add(tok, rng.normal(size=4))
    buf = io.StringIO()
    t.write(buf)
    buf.seek(0)
    back = EmbeddingTable.read(buf)
    assert back.tokens() == [1, 2, 3]
    for tok in back.tokens():
        np.testing.assert_array_equal(back.means[tok], t.means[tok])


def table_of(vectors):
    t = EmbeddingTable()
    for tok, v in vectors.items():
        t.add(tok, np.asarray(v, float))
    return t


def test_cosine_neighbors():
    t = table_of({1: [1, 0], 2: [1, 0.1], 3: [0, 1], 4: [-1, 0], 5: [1, -0.1]})
    nb = cosine_neighbors(t, 1, 3)
    assert [k for k, _ in nb] == [2, 5, 3]
    assert nb[0][1] == pytest.approx(1 / np.sqrt(1.01))
    assert mutual_top_k(t, 1, 2, k=2) and not mutual_top_k(t, 1, 4, k=2)


def test_cosine_errors():
    t = table_of({1: [1, 0], 2: [0, 0], 3: [0, 1]})
    with pytest.raises(DegenerateError):
        cosine_neighbors(t, 2, 1)
    with pytest.raises(DegenerateError):
        cosine_neighbors(t, 1, 2)
    with pytest.raises(UsageError):
        cosine_neighbors(t, 9, 1)
    with pytest.raises(UsageError):
        cosine_neighbors(t, 1, 3)


@pytest.fixture
def biased_model():
    m = CassNat(toy_config(vocab=5), seed=1)
    b = np.zeros(5)
    b[1:] = 2.0
    m.params["ctc.final.b"].data = b
    return m


def test_attention_rows_sum_to_one(rng, biased_model):
    x = rng.normal(size=(30, 8))
    dumps = dump_attention(biased_model, x)
    assert {d.layer for d in dumps} == {l.removesuffix(".self") for l in last_layers(biased_model)}
    for d in dumps:
        assert abs(d.weights.sum(-1) - 1.0).max() <= 1e-9
        assert (d.weights >= 0).all()


def test_attention_with_labels_and_round_trip(rng, biased_model):
    dumps = dump_attention(biased_model, rng.normal(size=(30, 8)), ["mad.1.self", "enc.0.self"], [2], [1, 2, 3])
    assert dumps[0].weights.shape == (3, 3)
    assert dumps[1].weights.shape[0] == dumps[1].weights.shape[1]
    buf = io.StringIO()
    write_attention(dumps, buf)
    buf.seek(0)
    back = read_attention(buf)
    assert [(d.layer, d.head) for d in back] == [("mad.1", 2), ("enc.0", 2)]
    for a, b in zip(dumps, back):
        np.testing.assert_allclose(a.weights, b.weights, rtol=1e-7)


def test_attention_errors(rng, biased_model):
    x = rng.normal(size=(30, 8))
    with pytest.raises(UsageError):
        dump_attention(biased_model, x, ["nope"])
    with pytest.raises(UsageError):
        dump_attention(biased_model, x, heads=[3])


def test_extract_embeddings_skips_infeasible():
    spec = SyntheticTaskSpec(vocab_size=4, feat_dim=8, dur_min=4, dur_max=6, len_max=3)
    data = generate_synthetic(spec, 6, stream=3) + [(np.zeros((4, 8)), [1, 2, 3])]
    m = CassNat(toy_config(vocab=5))
    for tap in ("tae", "sad", "mad"):
        t = extract_embeddings(m, data, tap=tap)
        seen = {tok for _, y in data[:-1] for tok in y}
        assert set(t.tokens()) == seen
        assert sum(t.counts.values()) == sum(len(y) for _, y in data[:-1])
    with pytest.raises(UsageError):
        extract_embeddings(m, data, tap="enc")
