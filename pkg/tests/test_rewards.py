from fractions import Fraction
from itertools import combinations
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_forge.exceptions import InvalidInputError, SegmentationError
from sparse_forge.rewards import (
    LpoConfig,
    Response,
    RolloutGroup,
    alpha_for,
    composite_reward,
    gar_scores,
    group_advantages,
    group_from_dict,
    has_think_marker,
    inconsistent_pairs,
    length_reward,
    lpo_objective,
    lpo_report,
    pass_at_k,
    read_arena,
    read_rollouts,
    score_adjudicator,
    segment_sentences,
    sentence_ratio,
    write_arena,
)


class TestSegmentation:
    def test_single_sentence(self):
        assert segment_sentences("Hello.", ["He", "llo", "."]) == [(0, 3)]

    def test_three_sentences(self):
        assert len(segment_sentences("A. B. C.")) == 3

    def test_mixed_cjk(self):
        text = "先算面积，再求和。Done."
        spans = segment_sentences(text)
        assert [text[a:b] for a, b in spans] == ["先算面积，", "再求和。", "Done."]

    def test_decimal_point_does_not_split(self):
        text = "3.14 is pi. Yes"
        assert [text[a:b] for a, b in segment_sentences(text)] == ["3.14 is pi. ", "Yes"]

    def test_leading_space_tokens(self):
        assert segment_sentences("Hi. Bye.", ["Hi", ".", " Bye", "."]) == [(0, 2), (2, 4)]
        assert segment_sentences("A. B", ["A", ".", " ", "B"]) == [(0, 3), (3, 4)]

    def test_misaligned_tokens(self):
        with pytest.raises(SegmentationError) as err:
            segment_sentences("abc", ["ab", "d"])
        assert err.value.offset == 2
        with pytest.raises(SegmentationError):
            segment_sentences("abc", ["ab"])

    def test_empty_text(self):
        with pytest.raises(InvalidInputError):
            segment_sentences("")

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="ab .,!?。，", min_size=1, max_size=40), st.integers(0, 2**16))
    def test_spans_partition_tokens(self, text, seed):
        rng = np.random.default_rng(seed)
        cuts = sorted(set(rng.integers(1, len(text) + 1, size=5).tolist()) | {len(text)})
        tokens, prev = [], 0
        for c in cuts:
            if c > prev:
                tokens.append(text[prev:c])
                prev = c
        spans = segment_sentences(text, tokens)
        assert spans[0][0] == 0 and spans[-1][1] == len(tokens)
        assert all(a < b for a, b in spans)
        assert all(spans[k][1] == spans[k + 1][0] for k in range(len(spans) - 1))


class TestRatioAndAdvantage:
    def test_identical_policy(self):
        assert sentence_ratio([-1.0, -2.0], [-1.0, -2.0], (0, 2)) == 1.0

    def test_symmetric(self):
        assert sentence_ratio([0.0, 0.0], [0.2, -0.2], (0, 2)) == 1.0

    def test_constant_log_ratio(self):
        assert sentence_ratio([0.0] * 3, [0.1] * 3, (0, 3)) == pytest.approx(math.exp(0.1), rel=1e-15)
        assert math.exp(0.1) == pytest.approx(1.10517, abs=1e-5)

    def test_empty_span(self):
        with pytest.raises(InvalidInputError):
            sentence_ratio([0.0], [0.0], (1, 1))

    def test_advantage_examples(self):
        np.testing.assert_array_equal(group_advantages([1, 0, 1, 0]), [1, -1, 1, -1])
        np.testing.assert_array_equal(group_advantages([3, 1]), [1, -1])
        np.testing.assert_array_equal(group_advantages([2, 2, 2]), [0, 0, 0])

    def test_advantage_needs_two(self):
        with pytest.raises(InvalidInputError):
            group_advantages([1.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=32))
    def test_normalised(self, rewards):
        a = group_advantages(rewards)
        assert abs(a.mean()) < 1e-12
        r = np.array(rewards)
        if np.std(r) > 1e-6:
            assert abs(np.sqrt(np.mean(a**2)) - 1) < 1e-9


def random_group(rng, g=None, per_token=False, one_span=False):
    g = g or int(rng.integers(2, 8))
    responses = []
    for _ in range(g):
        n = int(rng.integers(1, 30))
        old = rng.normal(-2, 1, n)
        new = old + rng.normal(0, 0.1, n)
        if per_token:
            spans = [(t, t + 1) for t in range(n)]
        elif one_span:
            spans = [(0, n)]
        else:
            cuts = sorted(set(rng.integers(1, n + 1, 3).tolist()) | {n})
            spans = list(zip([0] + cuts[:-1], cuts))
        responses.append(Response(old, new, spans, float(rng.normal())))
    return RolloutGroup(responses)


def clipped_term(r, a, eps):
    return min(r * a, min(max(r, 1 - eps), 1 + eps) * a)


class TestLpo:
    def test_equal_policy_equal_lengths_is_zero(self):
        rs = [Response([-1.0] * 4, [-1.0] * 4, [(0, 2), (2, 4)], r) for r in (1.0, 0.0, 0.5)]
        assert lpo_objective(RolloutGroup(rs)) == pytest.approx(0.0, abs=1e-15)

    def test_equal_policy_weighted_mean(self):
        rs = [Response([0.0] * n, [0.0] * n, [(0, n)], r) for n, r in ((2, 1.0), (6, 0.0))]
        adv = group_advantages([1.0, 0.0])
        assert lpo_objective(RolloutGroup(rs)) == pytest.approx((2 * adv[0] + 6 * adv[1]) / 8, abs=1e-15)

    def test_clip_upper(self):
        up = Response([0.0], [math.log(1.1)], [(0, 1)], 1.0)
        down = Response([0.0], [0.0], [(0, 1)], 0.0)
        rep = lpo_report(RolloutGroup([up, down]), LpoConfig(0.03))
        first = rep.per_sentence[0]
        assert first.advantage == 1.0 and first.clipped
        assert first.contribution == pytest.approx(1.03, abs=1e-12)

    def test_lower_side_unclipped(self):
        low = Response([0.0], [math.log(0.9)], [(0, 1)], 1.0)
        other = Response([0.0], [0.0], [(0, 1)], 0.0)
        first = lpo_report(RolloutGroup([low, other])).per_sentence[0]
        assert first.contribution == pytest.approx(0.9, abs=1e-12)
        assert not first.clipped

    def test_degenerate_granularities(self):
        rng = np.random.default_rng(11)
        for trial in range(1000):
            per_token = trial % 2 == 0
            group = random_group(rng, per_token=per_token, one_span=not per_token)
            adv = group_advantages(group.rewards)
            total, n_tok = 0.0, 0
            for resp, a in zip(group.responses, adv):
                lr = np.array(resp.new_logprobs) - np.array(resp.old_logprobs)
                n_tok += len(lr)
                if per_token:
                    total += sum(clipped_term(math.exp(x), a, 0.03) for x in lr)
                else:
                    total += len(lr) * clipped_term(math.exp(lr.mean()), a, 0.03)
            assert abs(lpo_objective(group) - total / n_tok) <= 1e-12

    def test_clip_bounds_and_unclipped_limit(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            group = random_group(rng)
            rep = lpo_report(group)
            for t in rep.per_sentence:
                size = t.span[1] - t.span[0]
                assert abs(t.contribution) <= size * abs(t.advantage) * max(t.ratio, 1.03) + 1e-12
            loose = lpo_report(group, epsilon=1e6)
            plain = math.fsum((t.span[1] - t.span[0]) * t.ratio * t.advantage for t in loose.per_sentence)
            assert loose.objective == pytest.approx(plain / sum(r.n_tokens for r in group.responses), abs=1e-12)

    @pytest.mark.parametrize("eps", [0, 1, -0.1])
    def test_config_range(self, eps):
        with pytest.raises(InvalidInputError):
            LpoConfig(eps)

    def test_response_validation(self):
        with pytest.raises(InvalidInputError):
            Response([0.0, 0.0], [0.0], [(0, 2)], 1.0)
        with pytest.raises(InvalidInputError):
            Response([0.0, 0.0], [0.0, 0.0], [(0, 1)], 1.0)
        with pytest.raises(InvalidInputError):
            Response([0.0, 0.0], [0.0, 0.0], [(0, 1), (0, 2)], 1.0)
        with pytest.raises(InvalidInputError):
            Response([float("nan")], [0.0], [(0, 1)], 1.0)
        with pytest.raises(InvalidInputError):
            RolloutGroup([Response([0.0], [0.0], [(0, 1)], 1.0)])


class TestLengthAndComposite:
    def test_extremes(self):
        assert length_reward([10, 20, 30], 0, 1, 1) == 0.5
        assert -0.5 <= length_reward([10, 20, 30], 2, 1, 1) <= -0.5 + 1e-6
        assert length_reward([10, 20, 30], 0, 0, 1) == 0.0

    def test_affine_decreasing(self):
        lengths = [5, 9, 13, 40]
        p = [length_reward(lengths, i, 1, 1) for i in range(4)]
        assert p[0] > p[1] > p[2] > p[3]
        slope = (p[1] - p[0]) / 4
        assert p[3] == pytest.approx(p[0] + 35 * slope, abs=1e-12)

    def test_equal_lengths(self):
        assert length_reward([7, 7], 1, 1, 2.0) == 1.0

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            length_reward([], 0, 1, 1)
        with pytest.raises(InvalidInputError):
            length_reward([1, 2], 0, 1, 0)

    def test_composite_examples(self):
        b = composite_reward(True, [10, 20], 0, 0.5)
        assert (b.correctness, b.length, b.format, b.total) == (1.0, 0.25, 0.0, 1.25)
        b = composite_reward(False, [10, 20], 1, 0.5, has_marker=True)
        assert b.total == pytest.approx(-0.25 - 0.5, abs=1e-9)
        assert composite_reward(False, [10, 12, 30], 1, 1.0).total == 0.0
        b = composite_reward(True, [10, 20], 0, 1.0, task_rewards=[0.2, -0.1])
        assert b.total == pytest.approx(1.6)

    def test_marker_and_alpha(self):
        assert has_think_marker("ok <think> hmm") and not has_think_marker("plain")
        assert alpha_for("easy", {"easy": 1.0, "hard": 0.2}) == 1.0
        assert alpha_for("other", {}, default=0.3) == 0.3
        with pytest.raises(InvalidInputError):
            alpha_for("other", {})


def all_outcome_matrices(g):
    pairs = [(i, j) for i in range(g) for j in range(g) if i != j]
    return pairs


class TestArena:
    def test_examples(self):
        assert gar_scores({(0, 1): "win", (1, 0): "loss"}, 2) == [2, 0]
        ties = {(i, j): "tie" for i in range(3) for j in range(3) if i != j}
        assert gar_scores(ties, 3) == [2, 2, 2]
        assert gar_scores(score_adjudicator([9, 5, 1]), 3) == [4, 2, 0]

    def test_missing_pair_named(self):
        with pytest.raises(InvalidInputError, match=r"\(1, 0\)"):
            gar_scores({(0, 1): "win"}, 2)

    def test_position_bias_allowed(self):
        biased = {(0, 1): "win", (1, 0): "win"}
        assert gar_scores(biased, 2) == [1, 1]
        assert inconsistent_pairs(biased) == [(0, 1)]

    def test_conservation_exhaustive_small(self):
        rng = np.random.default_rng(5)
        for g in range(2, 9):
            pairs = all_outcome_matrices(g)
            trials = 3 ** len(pairs) if g <= 3 else 300
            for t in range(trials):
                if g <= 3:
                    digits = [(t // 3**k) % 3 for k in range(len(pairs))]
                else:
                    digits = rng.integers(0, 3, len(pairs))
                out = {p: ("win", "tie", "loss")[d] for p, d in zip(pairs, digits)}
                assert sum(gar_scores(out, g)) == g * (g - 1)

    def test_csv_roundtrip(self, tmp_path):
        out = score_adjudicator([1, 3, 3])
        path = tmp_path / "arena.csv"
        write_arena(path, out)
        back, g = read_arena(path)
        assert g == 3 and back == out

    def test_csv_errors(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(InvalidInputError):
            read_arena(path)
        path.write_text("i,j,result\n0,1,draw\n")
        with pytest.raises(InvalidInputError):
            read_arena(path)


def brute_pass_at_k(n, c, k):
    items = [True] * c + [False] * (n - c)
    subsets = list(combinations(range(n), k))
    return Fraction(sum(any(items[i] for i in s) for s in subsets), len(subsets))


class TestPassAtK:
    def test_examples(self):
        assert pass_at_k(4, 1, 1) == 0.25
        assert pass_at_k(5, 5, 3) == 1.0
        assert pass_at_k(5, 0, 3) == 0.0

    def test_brute_force(self):
        for n in range(1, 13):
            for c in range(n + 1):
                prev = -1.0
                for k in range(1, n + 1):
                    got = pass_at_k(n, c, k)
                    assert got == pytest.approx(float(brute_pass_at_k(n, c, k)), abs=1e-12)
                    assert got >= prev
                    prev = got
                if c < n:
                    assert all(pass_at_k(n, c + 1, k) >= pass_at_k(n, c, k) for k in range(1, n + 1))

    def test_large_n_no_overflow(self):
        assert 0 < pass_at_k(10000, 3, 100) < 1

    @pytest.mark.parametrize("args", [(4, 5, 1), (4, 1, 5), (4, 1, 0)])
    def test_invalid(self, args):
        with pytest.raises(InvalidInputError):
            pass_at_k(*args)


class TestRolloutFile:
    def test_text_segmentation(self, tmp_path):
        data = {
            "responses": [
                {"old_logprobs": [0.0] * 4, "new_logprobs": [0.0] * 4, "text": "A. B", "reward": 1, "correct": True},
                {
                    "old_logprobs": [0.0, 0.0],
                    "new_logprobs": [0.1, 0.1],
                    "text": "Hi. Yo.",
                    "tokens": ["Hi.", " Yo."],
                    "reward": 0,
                },
                {"old_logprobs": [0.0] * 3, "new_logprobs": [0.0] * 3, "spans": [[0, 1], [1, 3]], "reward": 0.5},
            ]
        }
        path = tmp_path / "r.json"
        import json

        path.write_text(json.dumps(data), encoding="utf-8")
        group = read_rollouts(path)
        assert group.responses[0].spans == ((0, 3), (3, 4))
        assert group.responses[1].spans == ((0, 1), (1, 2))
        assert group.responses[2].spans == ((0, 1), (1, 3))

    def test_rejects_unknown_and_unalignable(self):
        with pytest.raises(InvalidInputError):
            group_from_dict({"responses": [], "extra": 1})
        with pytest.raises(InvalidInputError):
            group_from_dict({"responses": [{"old_logprobs": [0.0], "new_logprobs": [0.0], "text": "ab", "reward": 0}]})
