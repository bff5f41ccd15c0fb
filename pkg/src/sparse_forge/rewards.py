"""Post-training reward and objective math: sentence-level importance
ratios with clipping, group advantages, length/format rewards, pairwise
arena scoring and pass@k."""
from dataclasses import dataclass
import csv
import json
import math

import numpy as np

from ._validation import check_count, check_positive
from .exceptions import InvalidInputError, SegmentationError

# western marks end a sentence only before whitespace or end of text;
# full-width marks end it immediately
WESTERN_PUNCT = frozenset(".!?;:,…")
CJK_PUNCT = frozenset("。！？；：，、")
THINK_MARKER = "<think>"
FORMAT_PENALTY = -0.5
LENGTH_EPS = 1e-9
STD_GUARD = 1e-8


def _sentence_ends(text, western, cjk):
    """Character offsets one past each sentence end."""
    ends = []
    n = len(text)
    for i, ch in enumerate(text):
        if ch in cjk or (ch in western and (i + 1 == n or text[i + 1].isspace())):
            ends.append(i + 1)
    if not ends or ends[-1] != n:
        ends.append(n)
    return ends


def segment_sentences(text, tokens=None, western=WESTERN_PUNCT, cjk=CJK_PUNCT):
    """Split a response into sentence spans over token indices.

    ``tokens`` are the token strings; their concatenation must reproduce
    ``text`` (default: one token per character). A token belongs to the
    sentence holding its first non-whitespace character; whitespace-only
    tokens stay with the preceding token. Returns ``[(start, end), ...]``
    half-open, contiguous and covering every token.
    """
    if not isinstance(text, str) or not text:
        raise InvalidInputError("text must be a non-empty string")
    if tokens is None:
        tokens = list(text)
    if not tokens:
        raise InvalidInputError("no tokens")
    offsets = []
    pos = 0
    for t in tokens:
        if not text.startswith(t, pos) or not t:
            bad = pos
            while bad < len(text) and bad - pos < len(t) and text[bad] == t[bad - pos]:
                bad += 1
            raise SegmentationError(f"token {t!r} does not align with text at offset {bad}", offset=bad)
        offsets.append(pos)
        pos += len(t)
    if pos != len(text):
        raise SegmentationError(f"tokens cover {pos} of {len(text)} characters", offset=pos)

    ends = _sentence_ends(text, western, cjk)
    sentence_of = []
    for t, start in zip(tokens, offsets):
        stripped = len(t) - len(t.lstrip())
        if stripped == len(t):
            sentence_of.append(sentence_of[-1] if sentence_of else 0)
            continue
        anchor = start + stripped
        sentence_of.append(int(np.searchsorted(ends, anchor, side="right")))
    spans = []
    start = 0
    for i in range(1, len(tokens) + 1):
        if i == len(tokens) or sentence_of[i] != sentence_of[start]:
            spans.append((start, i))
            start = i
    return spans


def sentence_ratio(old_logprobs, new_logprobs, span):
    """Geometric mean of token probability ratios over ``span``."""
    start, end = span
    if end <= start:
        raise InvalidInputError(f"empty span {span}")
    old = np.asarray(old_logprobs, dtype=np.float64)[start:end]
    new = np.asarray(new_logprobs, dtype=np.float64)[start:end]
    if old.size != end - start or new.size != end - start:
        raise InvalidInputError(f"span {span} exceeds the response length")
    if not (np.all(np.isfinite(old)) and np.all(np.isfinite(new))):
        raise InvalidInputError("log-probs must be finite")
    return math.exp(math.fsum(new - old) / (end - start))


def group_advantages(rewards):
    """``(R - mean) / std`` with the population std. A constant group gets
    all-zero advantages; otherwise std is floored at 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidInputError("need at least 2 rewards per group")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("rewards must be finite")
    centred = r - math.fsum(r) / r.size
    # second pass removes the rounding left in the first centring, which
    # the division by a small std would otherwise amplify
    centred -= math.fsum(centred) / r.size
    std = float(np.sqrt(np.mean(centred**2)))
    if std == 0:
        return np.zeros_like(r)
    return centred / max(std, STD_GUARD)


@dataclass(frozen=True)
class Response:
    old_logprobs: tuple
    new_logprobs: tuple
    spans: tuple
    reward: float
    correct: bool = False
    text: str = None

    def __post_init__(self):
        old = tuple(float(x) for x in self.old_logprobs)
        new = tuple(float(x) for x in self.new_logprobs)
        if not old:
            raise InvalidInputError("a response needs at least one token")
        if len(old) != len(new):
            raise InvalidInputError(f"old/new log-prob lengths differ ({len(old)} vs {len(new)})")
        if not all(math.isfinite(x) for x in old + new):
            raise InvalidInputError("log-probs must be finite")
        spans = tuple((int(a), int(b)) for a, b in self.spans)
        pos = 0
        for a, b in spans:
            if a != pos or b <= a:
                raise InvalidInputError(f"spans must be contiguous, non-empty and start at 0; bad span {(a, b)}")
            pos = b
        if pos != len(old):
            raise InvalidInputError(f"spans cover {pos} of {len(old)} tokens")
        if not math.isfinite(self.reward):
            raise InvalidInputError("reward must be finite")
        object.__setattr__(self, "old_logprobs", old)
        object.__setattr__(self, "new_logprobs", new)
        object.__setattr__(self, "spans", spans)

    @property
    def n_tokens(self):
        return len(self.old_logprobs)


@dataclass(frozen=True)
class RolloutGroup:
    responses: tuple

    def __post_init__(self):
        responses = tuple(self.responses)
        if len(responses) < 2:
            raise InvalidInputError("a rollout group needs at least 2 responses")
        object.__setattr__(self, "responses", responses)

    @property
    def rewards(self):
        return [r.reward for r in self.responses]


@dataclass(frozen=True)
class LpoConfig:
    epsilon: float = 0.03

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise InvalidInputError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class SentenceTerm:
    response: int
    span: tuple
    ratio: float
    advantage: float
    clipped: bool  # the clipped surrogate was the smaller one
    contribution: float  # |s| * min(...)


@dataclass(frozen=True)
class LpoReport:
    objective: float
    per_sentence: tuple

    def to_dict(self):
        return {
            "objective": self.objective,
            "per_sentence": [
                {"response": t.response, "span": list(t.span), "ratio": t.ratio, "clipped": t.clipped}
                for t in self.per_sentence
            ],
        }


def lpo_report(group, cfg=LpoConfig(), epsilon=None):
    """Sentence-level clipped surrogate averaged over all tokens.

    ``epsilon`` overrides ``cfg.epsilon`` without range checks so that the
    unclipped limit can be probed.
    """
    eps = cfg.epsilon if epsilon is None else float(epsilon)
    adv = group_advantages(group.rewards)
    terms = []
    for i, (resp, a) in enumerate(zip(group.responses, adv)):
        for span in resp.spans:
            r = sentence_ratio(resp.old_logprobs, resp.new_logprobs, span)
            plain = r * a
            clipped = min(max(r, 1 - eps), 1 + eps) * a
            size = span[1] - span[0]
            terms.append(SentenceTerm(i, span, r, float(a), clipped < plain, size * min(plain, clipped)))
    total_tokens = sum(resp.n_tokens for resp in group.responses)
    return LpoReport(math.fsum(t.contribution for t in terms) / total_tokens, tuple(terms))


def lpo_objective(group, cfg=LpoConfig()):
    return lpo_report(group, cfg).objective


def length_reward(lengths, i, r_acc, alpha):
    """``alpha * p(l_i)`` with ``p(l) = 0.5 - (l - l_min) / (l_max - l_min + 1e-9)``;
    for an incorrect response any positive part is dropped."""
    lengths = [check_count(x, "length", 0) for x in lengths]
    if not lengths:
        raise InvalidInputError("empty group")
    if not 0 <= i < len(lengths):
        raise InvalidInputError(f"index {i} out of range for {len(lengths)} responses")
    alpha = check_positive(alpha, "alpha")
    lo, hi = min(lengths), max(lengths)
    p = 0.5 - (lengths[i] - lo) / (hi - lo + LENGTH_EPS)
    if not r_acc:
        p = min(p, 0.0)
    return alpha * p


def alpha_for(task, schedule, default=None):
    """Look up the length-reward weight for a task in a ``{task: alpha}`` map."""
    if task in schedule:
        return check_positive(schedule[task], f"alpha[{task}]")
    if default is None:
        raise InvalidInputError(f"no length-reward alpha configured for task {task!r}")
    return check_positive(default, "alpha")


@dataclass(frozen=True)
class RewardBreakdown:
    correctness: float
    length: float
    format: float
    task_specific: tuple = ()

    @property
    def total(self):
        return math.fsum((self.correctness, self.length, self.format) + tuple(self.task_specific))


def has_think_marker(text):
    return THINK_MARKER in text


def composite_reward(correct, lengths, i, alpha, has_marker=False, task_rewards=()):
    tasks = tuple(float(x) for x in task_rewards)
    if not all(math.isfinite(x) for x in tasks):
        raise InvalidInputError("task rewards must be finite")
    return RewardBreakdown(
        1.0 if correct else 0.0,
        length_reward(lengths, i, bool(correct), alpha),
        FORMAT_PENALTY if has_marker else 0.0,
        tasks,
    )


# -- group arena -----------------------------------------------------------

RESULT_POINTS = {"win": 1.0, "tie": 0.5, "loss": 0.0}
_INVERSE = {"win": "loss", "loss": "win", "tie": "tie"}


def _result(value):
    if isinstance(value, str) and value.lower() in RESULT_POINTS:
        return value.lower()
    for name, pts in RESULT_POINTS.items():
        if not isinstance(value, str) and value == pts:
            return name
    raise InvalidInputError(f"unknown match result {value!r}")


def gar_scores(outcomes, g):
    """Round-robin totals over both orderings of every pair.

    ``outcomes[(i, j)]`` is the result from ``i``'s point of view when ``i``
    is presented first. Each ordered pair is one match worth one point, so
    the scores sum to ``g * (g - 1)``. The two orderings of a pair may
    disagree (judge position bias); that is allowed.
    """
    g = check_count(g, "group size", 2)
    results = {}
    for (i, j), v in dict(outcomes).items():
        if not (0 <= i < g and 0 <= j < g) or i == j:
            raise InvalidInputError(f"invalid pair ({i}, {j}) for group size {g}")
        results[(int(i), int(j))] = _result(v)
    scores = [0.0] * g
    for i in range(g):
        for j in range(g):
            if i == j:
                continue
            if (i, j) not in results:
                raise InvalidInputError(f"missing arena result for pair ({i}, {j})")
            pts = RESULT_POINTS[results[(i, j)]]
            scores[i] += pts
            scores[j] += 1.0 - pts
    return scores


def inconsistent_pairs(outcomes):
    """Unordered pairs whose two orderings disagree."""
    out = []
    for (i, j), v in outcomes.items():
        if i < j and (j, i) in outcomes and _INVERSE[_result(v)] != _result(outcomes[(j, i)]):
            out.append((i, j))
    return sorted(out)


def score_adjudicator(scores):
    """Stand-in judge: the higher score wins, equal scores tie."""
    out = {}
    for i, a in enumerate(scores):
        for j, b in enumerate(scores):
            if i != j:
                out[(i, j)] = "win" if a > b else "loss" if a < b else "tie"
    return out


def pass_at_k(n, c, k):
    """Unbiased ``1 - C(n-c, k) / C(n, k)`` as a running product."""
    n = check_count(n, "n", 1)
    c = check_count(c, "c", 0)
    k = check_count(k, "k", 1)
    if c > n:
        raise InvalidInputError(f"c={c} exceeds n={n}")
    if k > n:
        raise InvalidInputError(f"k={k} exceeds n={n}")
    if n - c < k:
        return 1.0
    prod = 1.0
    for i in range(n - c + 1, n + 1):
        prod *= 1.0 - k / i
    return 1.0 - prod


# -- file formats ----------------------------------------------------------

RESPONSE_KEYS = {"old_logprobs", "new_logprobs", "text", "reward", "correct", "tokens", "spans"}


def response_from_dict(d):
    unknown = sorted(set(d) - RESPONSE_KEYS)
    if unknown:
        raise InvalidInputError(f"unknown response key(s): {', '.join(unknown)}")
    for key in ("old_logprobs", "new_logprobs", "reward"):
        if key not in d:
            raise InvalidInputError(f"response is missing {key!r}")
    n = len(d["old_logprobs"])
    text = d.get("text")
    if "spans" in d:
        spans = d["spans"]
    elif text is not None:
        tokens = d.get("tokens")
        if tokens is None and len(text) != n:
            raise InvalidInputError("need 'tokens' or 'spans' when the text is not one character per token")
        spans = segment_sentences(text, tokens)
    else:
        raise InvalidInputError("response needs 'text' or 'spans'")
    if d.get("tokens") is not None and len(d["tokens"]) != n:
        raise InvalidInputError(f"{len(d['tokens'])} tokens but {n} log-probs")
    return Response(d["old_logprobs"], d["new_logprobs"], spans, float(d["reward"]), bool(d.get("correct", False)), text)


def group_from_dict(data):
    if not isinstance(data, dict) or set(data) != {"responses"}:
        raise InvalidInputError("rollout file must be an object with exactly one key 'responses'")
    return RolloutGroup([response_from_dict(r) for r in data["responses"]])


def read_rollouts(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return group_from_dict(data)


def read_arena(path):
    """Read ``i,j,result`` rows; returns ``(outcomes, group_size)``."""
    outcomes = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j", "result"]:
            raise InvalidInputError(f"{path}: expected header i,j,result")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InvalidInputError(f"{path}:{lineno}: expected 3 fields")
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: indices must be integers") from None
            if (i, j) in outcomes:
                raise InvalidInputError(f"{path}:{lineno}: duplicate pair ({i}, {j})")
            outcomes[(i, j)] = _result(row[2])
    g = 1 + max((max(k) for k in outcomes), default=-1)
    return outcomes, g


def write_arena(path, outcomes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "result"])
        for (i, j), v in sorted(outcomes.items()):
            w.writerow([i, j, _result(v)])
