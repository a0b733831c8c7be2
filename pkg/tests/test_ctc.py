import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cassnat import ops
from cassnat.ctc import (
    AlignmentPath, LogPosteriorGrid, Segment, alignment_to_segments, beam_align_nbest, best_path_decode,
    collapse, ctc_forced_align, ctc_loss, ctc_loss_batch, ctc_loss_tensor, expand_segments, min_frames,
)
from cassnat.errors import InfeasibleError, NoTokenError, UsageError
from cassnat.gradcheck import grad_check
from cassnat.tensor import Tensor

from oracles import collapse_ref, ctc_by_enumeration, enumerate_paths, random_grid, random_instance

A, B = 1, 2
UNIFORM_3x3 = np.full((3, 3), math.log(1 / 3))


class TestCollapse:
    @pytest.mark.parametrize("path,expected", [
        ([0, 0, 0], []),
        ([A, A, 0, A], [A, A]),
        ([0, A, A, 0, B], [A, B]),
    ])
    def test_examples(self, path, expected):
        assert collapse(path) == expected
        assert collapse(AlignmentPath(tuple(path), 0.0)) == expected

    @given(st.lists(st.integers(0, 3), max_size=12))
    def test_matches_reference(self, path):
        assert collapse(path) == collapse_ref(path)


class TestLoss:
    def test_single_frame_certainty(self):
        assert ctc_loss(LogPosteriorGrid.from_probs([[0.0, 1.0]]), [A]) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_single_label(self):
        assert ctc_loss(UNIFORM_3x3, [A]) == pytest.approx(-math.log(6 / 27), abs=1e-12)
        assert ctc_loss(UNIFORM_3x3, [A]) == pytest.approx(1.5041, abs=1e-4)

    def test_uniform_repeat(self):
        assert ctc_loss(UNIFORM_3x3, [A, A]) == pytest.approx(-math.log(1 / 27), abs=1e-12)
        assert ctc_loss(UNIFORM_3x3, [A, A]) == pytest.approx(3.2958, abs=1e-4)

    def test_infeasible_names_lengths(self):
        with pytest.raises(InfeasibleError, match=r"T'=2.*3"):
            ctc_loss(np.log(np.full((2, 3), 1 / 3)), [A, A])

    def test_blank_or_empty_label(self):
        with pytest.raises(UsageError):
            ctc_loss(UNIFORM_3x3, [0])
        with pytest.raises(UsageError):
            ctc_loss(UNIFORM_3x3, [])

    def test_grid_renormalises(self):
        g = LogPosteriorGrid(np.log([[2.0, 2.0], [1.0, 3.0]]))
        np.testing.assert_allclose(np.exp(g.logp).sum(1), 1.0, atol=1e-12)

    def test_enumeration_oracle(self, rng):
        for _ in range(60):
            lp, y = random_instance(rng, t_max=5)
            ref = ctc_by_enumeration(lp, y)
            assert ctc_loss(lp, y) == pytest.approx(ref[0], abs=1e-9)

    def test_sum_at_least_max(self, rng):
        for _ in range(40):
            lp, y = random_instance(rng)
            assert ctc_loss(lp, y) <= -ctc_forced_align(lp, y).log_prob + 1e-12

    def test_gradient(self, rng):
        y = [1, 2, 2]
        rep = grad_check(lambda x: ctc_loss_tensor(ops.log_softmax(x), y), Tensor(rng.normal(size=(6, 3))))
        assert rep.passed, rep

    def test_batch_matches_single(self, rng):
        lp = np.stack([random_grid(rng, 6, 4), random_grid(rng, 6, 4)])
        out = ctc_loss_batch(Tensor(lp), [6, 4], [[1, 2], [3]]).data
        assert out[0] == pytest.approx(ctc_loss(lp[0], [1, 2]), abs=1e-12)
        assert out[1] == pytest.approx(ctc_loss(lp[1, :4], [3]), abs=1e-12)


class TestForcedAlign:
    def test_worked_example(self):
        probs = np.array([[0.2, 0.7, 0.1], [0.3, 0.6, 0.1], [0.8, 0.1, 0.1]])
        z = ctc_forced_align(LogPosteriorGrid.from_probs(probs), [A])
        assert z.labels == (A, A, 0)
        assert math.exp(z.log_prob) == pytest.approx(0.336, abs=1e-12)

    def test_forced_verbatim_path(self):
        y = [2, 1, 3]
        probs = np.eye(4)[y]
        z = ctc_forced_align(LogPosteriorGrid(np.log(probs + 1e-300)), y)
        assert list(z.labels) == y
        assert z.log_prob == pytest.approx(0.0, abs=1e-12)

    def test_tie_break_emits_early(self):
        z = ctc_forced_align(np.full((3, 2), math.log(0.5)), [A])
        assert z.labels == (A, 0, 0)

    def test_max_matches_enumeration(self, rng):
        for _ in range(60):
            lp, y = random_instance(rng, t_max=5)
            _, top, best = ctc_by_enumeration(lp, y)
            z = ctc_forced_align(lp, y)
            assert z.log_prob == pytest.approx(top, abs=1e-9)
            assert z.labels in best

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_collapse_roundtrip(self, seed):
        lp, y = random_instance(np.random.default_rng(seed), t_max=9, v_max=5, u_max=4)
        z = ctc_forced_align(lp, y)
        assert collapse(z) == y
        assert len(z) == lp.shape[0]


class TestBestPath:
    def test_one_hot(self):
        z = best_path_decode(np.log(np.eye(3)[[1, 0, 2, 2]] + 1e-300))
        assert z.labels == (1, 0, 2, 2)

    def test_uniform_is_all_blank(self):
        assert best_path_decode(UNIFORM_3x3).labels == (0, 0, 0)

    def test_argmax_oracle(self, rng):
        lp = random_grid(rng, 7, 5)
        z = best_path_decode(lp)
        assert list(z.labels) == [int(np.argmax(r)) for r in lp]
        assert z.log_prob == pytest.approx(lp[np.arange(7), list(z.labels)].sum(), abs=1e-12)


class TestNBest:
    def test_beam_one_is_best_path(self, rng):
        lp = random_grid(rng, 6, 4)
        assert beam_align_nbest(lp, 1)[0] == best_path_decode(lp)

    def test_full_enumeration_order(self, rng):
        for t_len, v in [(3, 3), (4, 2), (4, 3)]:
            lp = random_grid(rng, t_len, v)
            ref = sorted(enumerate_paths(lp), key=lambda ps: (-ps[1], ps[0]))
            got = beam_align_nbest(lp, v ** t_len + 5)
            assert [p.labels for p in got] == [p for p, _ in ref]
            np.testing.assert_allclose([p.log_prob for p in got], [s for _, s in ref], atol=1e-12)

    @given(st.integers(0, 1000), st.integers(1, 12))
    def test_sorted_and_distinct(self, seed, beam):
        lp = random_grid(np.random.default_rng(seed), 5, 3)
        paths = beam_align_nbest(lp, beam)
        scores = [p.log_prob for p in paths]
        assert scores == sorted(scores, reverse=True)
        assert len({p.labels for p in paths}) == len(paths) == min(beam, 3 ** 5)

    def test_bad_beam(self):
        with pytest.raises(UsageError):
            beam_align_nbest(UNIFORM_3x3, 0)


class TestSegments:
    @pytest.mark.parametrize("path,expected", [
        ([0, A, A, 0, B], [(A, 1, 3), (B, 4, 5)]),
        ([A, 0, A], [(A, 1, 1), (A, 2, 3)]),
        ([0, A, 0, 0], [(A, 1, 2)]),
    ])
    def test_examples(self, path, expected):
        assert alignment_to_segments(path) == [Segment(*e) for e in expected]

    def test_empty(self):
        with pytest.raises(NoTokenError):
            alignment_to_segments([0, 0])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=15))
    def test_partition_properties(self, path):
        if not collapse(path):
            return
        segs = alignment_to_segments(path)
        assert [s.token for s in segs] == collapse(path)
        assert segs[0].start == 1
        for a, b in zip(segs, segs[1:]):
            assert a.end < b.start and b.start == a.end + 1
        assert all(1 <= s.start <= s.end <= len(path) for s in segs)
        assert all(path[s.end - 1] == s.token for s in segs)

    def test_context_one_boundary(self):
        # token u spans (t_{u-1}, t_u]; with one frame of context it spans [t_{u-1}, t_u + 1]
        segs = alignment_to_segments([0, A, A, 0, 0, B, 0, A, 0])
        assert segs == [Segment(A, 1, 3), Segment(B, 4, 6), Segment(A, 7, 8)]
        wide = expand_segments(segs, 1, 9)
        assert wide == [Segment(A, 1, 4), Segment(B, 3, 7), Segment(A, 6, 9)]
        for s, w in zip(segs[1:], wide[1:]):
            assert (w.start, w.end) == (s.start - 1, s.end + 1)

    def test_identity_and_clip(self):
        segs = [Segment(A, 2, 3), Segment(B, 4, 6)]
        assert expand_segments(segs, 0, 6) == segs
        assert expand_segments([Segment(A, 1, 5)], 3, 5) == [Segment(A, 1, 5)]
        with pytest.raises(UsageError):
            expand_segments(segs, -1, 6)

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=15), st.integers(0, 4))
    def test_expansion_keeps_order(self, path, c):
        if not collapse(path):
            return
        wide = expand_segments(alignment_to_segments(path), c, len(path))
        assert all(1 <= s.start <= s.end <= len(path) for s in wide)
        for a, b in zip(wide, wide[1:]):
            assert a.start <= b.start and a.end <= b.end


def test_min_frames():
    assert min_frames([1, 1, 2]) == 4
    assert min_frames([1, 2, 3]) == 3
