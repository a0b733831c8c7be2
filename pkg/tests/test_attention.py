import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cassnat import ops
from cassnat.attention import (
    RelPosTable, init_attention, make_bimask, make_causal_mask, make_trigger_mask, multi_head_attention,
    relpos_index, relpos_logit, scaled_dot_attention,
)
from cassnat.ctc import Segment, expand_segments
from cassnat.errors import ConfigError, MaskError, NoTokenError
from cassnat.gradcheck import grad_check
from cassnat.tensor import Tensor


def loop_attention(q, k, v, mask=None, rel=None, kmax=None):
    """Explicit per-entry reference: softmax over permitted keys of q.k/sqrt(d) (+ relative term)."""
    n_q, d = q.shape
    n_k = k.shape[0]
    out = np.zeros((n_q, v.shape[1]))
    weights = np.zeros((n_q, n_k))
    for i in range(n_q):
        logits = []
        for j in range(n_k):
            s = sum(q[i, c] * k[j, c] for c in range(d))
            if rel is not None:
                r = rel[min(max(j - i, -kmax), kmax) + kmax]
                s += sum(q[i, c] * r[c] for c in range(d))
            logits.append(s / math.sqrt(d))
        allowed = [j for j in range(n_k) if mask is None or mask[i, j]]
        top = max(logits[j] for j in allowed)
        z = sum(math.exp(logits[j] - top) for j in allowed)
        for j in allowed:
            weights[i, j] = math.exp(logits[j] - top) / z
        out[i] = weights[i] @ v
    return out, weights


class TestScaledDot:
    def test_zero_query_averages_values(self, rng):
        v = rng.normal(size=(5, 3))
        out, w = scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(rng.normal(size=(5, 4))), Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v.mean(0), (2, 1)), atol=1e-12)

    def test_delta_mask_copies_value_row(self, rng):
        v = rng.normal(size=(4, 3))
        mask = np.eye(4, dtype=bool)[[2, 0, 3]]
        out, _ = scaled_dot_attention(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(4, 5))),
                                      Tensor(v), mask)
        np.testing.assert_array_equal(out.data, v[[2, 0, 3]])

    def test_loop_oracle(self, rng):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        ref_out, ref_w = loop_attention(q, k, v)
        np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
        np.testing.assert_allclose(w.data, ref_w, atol=1e-12)

    def test_masked_relpos_oracle(self, rng):
        q, k, v = rng.normal(size=(4, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        table = rng.normal(size=(5, 4))
        mask = rng.random((4, 6)) < 0.6
        mask[:, 0] = True
        out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask, RelPosTable(2, Tensor(table)))
        ref_out, ref_w = loop_attention(q, k, v, mask, table, 2)
        np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
        np.testing.assert_array_equal(w.data[~mask], 0.0)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_fully_masked_row_is_reported(self, rng):
        mask = np.ones((3, 4), dtype=bool)
        mask[1] = False
        x = Tensor(rng.normal(size=(3, 4)))
        with pytest.raises(MaskError, match=r"\(1,\)"):
            scaled_dot_attention(x, Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), mask)


class TestRelPos:
    def test_index_map(self, rng):
        rel = RelPosTable(2, Tensor(rng.normal(size=(5, 3))))
        assert rel.index(0) == 2
        q = rng.normal(size=3)
        assert relpos_logit(q, 7, rel) == relpos_logit(q, 2, rel)
        assert relpos_logit(q, -7, rel) == relpos_logit(q, -2, rel)
        assert relpos_logit(q, 0, rel) == pytest.approx(q @ rel.table.data[2] / math.sqrt(3), abs=1e-15)

    def test_table_rows(self):
        with pytest.raises(ConfigError):
            RelPosTable(2, Tensor(np.zeros((4, 3))))

    def test_index_grid(self):
        idx = relpos_index(3, 5, 1)
        np.testing.assert_array_equal(idx[0], [1, 2, 2, 2, 2])
        np.testing.assert_array_equal(idx[2], [0, 0, 1, 2, 2])


def _mha_params(rng, d):
    return {k: Tensor(v) for k, v in init_attention(rng, d).items()}


class TestMultiHead:
    def test_single_identity_head(self, rng):
        d = 4
        p = {"wq": Tensor(np.eye(d)), "wk": Tensor(np.eye(d)), "wv": Tensor(np.eye(d)), "wo": Tensor(np.eye(d))}
        p.update({b: Tensor(np.zeros(d)) for b in ("bq", "bk", "bv", "bo")})
        x, y = rng.normal(size=(3, d)), rng.normal(size=(5, d))
        out, w = multi_head_attention(Tensor(x), Tensor(y), None, p, 1)
        ref, ref_w = scaled_dot_attention(Tensor(x), Tensor(y), Tensor(y))
        np.testing.assert_allclose(out.data, ref.data, atol=1e-14)
        np.testing.assert_allclose(w.data[0], ref_w.data, atol=1e-14)

    def test_per_head_loop_oracle(self, rng):
        d, nh = 8, 2
        p = _mha_params(rng, d)
        table = rng.normal(size=(7, d // nh))
        x = rng.normal(size=(5, d))
        out, w = multi_head_attention(Tensor(x), Tensor(x), None, p, nh, RelPosTable(3, Tensor(table)))
        q, k, v = (x @ p[f"w{c}"].data + p[f"b{c}"].data for c in "qkv")
        heads = []
        for h in range(nh):
            sl = slice(h * d // nh, (h + 1) * d // nh)
            o, wh = loop_attention(q[:, sl], k[:, sl], v[:, sl], rel=table, kmax=3)
            np.testing.assert_allclose(w.data[h], wh, atol=1e-10)
            heads.append(o)
        ref = np.concatenate(heads, 1) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out.data, ref, atol=1e-10)

    def test_uniform_weights_ignore_key_permutation(self, rng):
        d = 4
        p = _mha_params(rng, d)
        p["wq"] = Tensor(np.zeros((d, d)))
        x, kv = rng.normal(size=(2, d)), rng.normal(size=(5, d))
        mask = np.array([[1, 1, 0, 1, 1], [1, 0, 1, 1, 1]], dtype=bool)
        perm = rng.permutation(5)
        a, _ = multi_head_attention(Tensor(x), Tensor(kv), mask, p, 2)
        b, _ = multi_head_attention(Tensor(x), Tensor(kv[perm]), mask[:, perm], p, 2)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigError):
            multi_head_attention(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), None, _mha_params(rng, 6), 4)

    def test_gradient_through_relpos(self, rng):
        d, nh = 4, 2
        p = _mha_params(rng, d)
        names = list(p)
        table = Tensor(rng.normal(size=(5, d // nh)))
        x = Tensor(rng.normal(size=(2, 4, d)))
        mask = np.array([[True] * 4, [True, True, True, False]])[:, None, :].repeat(4, 1)
        r = rng.normal(size=(2, 4, d))

        def f(x_, t_, *ps):
            out, _ = multi_head_attention(x_, x_, mask, dict(zip(names, ps)), nh, RelPosTable(2, t_))
            return ops.sum(ops.mul(out, r))
        rep = grad_check(f, [x, table, *p.values()], probes=50)
        assert rep.passed, rep


class TestMasks:
    def test_trigger_rendering(self):
        segs = [Segment(1, 1, 3), Segment(2, 4, 5)]
        np.testing.assert_array_equal(make_trigger_mask(segs, 5).astype(int), [[1, 1, 1, 0, 0], [0, 0, 0, 1, 1]])
        wide = make_trigger_mask(expand_segments(segs, 1, 5), 5)
        np.testing.assert_array_equal(wide.astype(int), [[1, 1, 1, 1, 0], [0, 0, 1, 1, 1]])
        assert make_trigger_mask([Segment(3, 1, 4)], 4).all()
        with pytest.raises(NoTokenError):
            make_trigger_mask([], 4)

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.integers(0, 3))
    def test_trigger_rows_are_intervals(self, lens, c):
        segs, t = [], 0
        for u, n in enumerate(lens):
            segs.append(Segment(u + 1, t + 1, t + n))
            t += n
        m = make_trigger_mask(expand_segments(segs, c, t), t)
        for row in m:
            on = np.flatnonzero(row)
            assert len(on) and on[-1] - on[0] + 1 == len(on)

    def test_bimask(self):
        assert make_bimask(4, 4).all()
        m = make_bimask(4, 2)
        assert m[:, :2].all() and not m[:, 2:].any()
        causal = make_causal_mask(4)
        np.testing.assert_array_equal((m & causal)[:2, :2], causal[:2, :2])

    def test_causal(self):
        assert make_causal_mask(1).tolist() == [[True]]
        m = make_causal_mask(5)
        assert [int(r.sum()) for r in m] == [1, 2, 3, 4, 5]
        np.testing.assert_array_equal(m.T, ~np.tril(np.ones((5, 5), dtype=bool), -1))


def relpos_clipping_gap(k: int, seed: int = 0) -> float:
    """Max output difference when a distinct token moves from distance k to k+5 among identical tokens."""
    rng = np.random.default_rng(seed)
    d, nh = 8, 2
    p = {n: Tensor(v) for n, v in init_attention(rng, d).items()}
    rel = RelPosTable(k, Tensor(rng.normal(size=(2 * k + 1, d // nh))))
    n = k + 6
    background, special, query = rng.normal(size=(3, d))
    worst = 0.0
    for direction in (1, -1):
        outs = []
        for dist in (k, k + 5):
            x = np.tile(background, (n, 1))
            qpos = 0 if direction == 1 else n - 1
            x[qpos] = query
            x[qpos + direction * dist] = special
            out, _ = multi_head_attention(Tensor(x), Tensor(x), None, p, nh, rel)
            outs.append(out.data[qpos])
        worst = max(worst, float(np.abs(outs[0] - outs[1]).max()))
    return worst


@pytest.mark.parametrize("k", [2, 8, 20])
def test_relpos_clipping_invariance(k):
    assert relpos_clipping_gap(k) <= 1e-12
