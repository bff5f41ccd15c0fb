"""Aux-loss-free MoE routing: biased group top-k selection, centered sign
bias updates, load statistics and FP8-friendly routing-map padding."""
from dataclasses import dataclass, fields
import math

import numpy as np

from ._validation import check_count, check_positive
from .exceptions import CapacityError, InvalidInputError
from .rng import make_rng


@dataclass(frozen=True)
class RouterConfig:
    n_experts: int = 256
    top_k: int = 8
    n_groups: int = 8
    top_groups: int = 4
    gate_scale: float = 2.5
    update_rate: float = 0.001
    alignment: int = 16

    def __post_init__(self):
        check_count(self.n_experts, "n_experts", 1)
        check_count(self.top_k, "top_k", 1)
        check_count(self.n_groups, "n_groups", 1)
        check_count(self.top_groups, "top_groups", 1)
        check_count(self.alignment, "alignment", 1)
        check_positive(self.gate_scale, "gate_scale")
        if not (math.isfinite(self.update_rate) and self.update_rate >= 0):
            raise InvalidInputError("update_rate must be a non-negative real")
        if self.n_experts % self.n_groups:
            raise InvalidInputError(f"n_experts={self.n_experts} not divisible by n_groups={self.n_groups}")
        if self.top_groups > self.n_groups:
            raise InvalidInputError("top_groups exceeds n_groups")
        if self.top_k > self.group_size * self.top_groups:
            raise InvalidInputError("top_k exceeds the experts available in the selected groups")

    @property
    def group_size(self):
        return self.n_experts // self.n_groups

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"unknown router config key(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class BiasState:
    b: np.ndarray

    def __post_init__(self):
        b = np.array(self.b, dtype=np.float64)
        if b.ndim != 1:
            raise InvalidInputError("bias must be a vector")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @classmethod
    def zeros(cls, n_experts):
        return cls(np.zeros(n_experts))


@dataclass(frozen=True)
class RoutingDecision:
    """Per-token expert indices and gate values, both shaped ``(tokens, top_k)``."""

    experts: np.ndarray
    gates: np.ndarray

    @property
    def n_tokens(self):
        return self.experts.shape[0]


@dataclass(frozen=True)
class LoadStats:
    counts: np.ndarray
    violation: np.ndarray
    max_violation_ratio: float

    @property
    def mean_count(self):
        return float(self.counts.mean())

    @property
    def deficit(self):
        """``mean - count``: positive for underloaded experts.

        This is the error the bias update consumes; ``violation`` keeps the
        ``count - mean`` orientation for reporting.
        """
        return -self.violation


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def route_topk(scores, bias, cfg):
    """Select experts per token; never drops a token.

    Groups are ranked by the sum of their best ``min(top_k, group_size)``
    biased scores and only the ``top_groups`` best are eligible. Bias steers
    selection; gates are sigmoid(raw score) renormalised to ``gate_scale``.
    Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None, :]
    b = bias.b if isinstance(bias, BiasState) else np.asarray(bias, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != cfg.n_experts or b.shape != (cfg.n_experts,):
        raise InvalidInputError(f"scores and bias must have {cfg.n_experts} experts")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("bias must be finite")

    biased = scores + b
    t = scores.shape[0]
    if cfg.top_groups < cfg.n_groups:
        grouped = biased.reshape(t, cfg.n_groups, cfg.group_size)
        per_group = min(cfg.top_k, cfg.group_size)
        top_in_group = -np.sort(-grouped, axis=2)[:, :, :per_group]
        group_score = top_in_group.sum(axis=2)
        keep = np.argsort(-group_score, axis=1, kind="stable")[:, : cfg.top_groups]
        mask = np.zeros((t, cfg.n_groups), dtype=bool)
        np.put_along_axis(mask, keep, True, axis=1)
        biased = np.where(np.repeat(mask, cfg.group_size, axis=1), biased, -np.inf)
    experts = np.argsort(-biased, axis=1, kind="stable")[:, : cfg.top_k]
    raw = _sigmoid(np.take_along_axis(scores, experts, axis=1))
    gates = raw / raw.sum(axis=1, keepdims=True) * cfg.gate_scale
    return RoutingDecision(experts, gates)


def load_stats(decisions, n_experts):
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    decisions = list(decisions)
    if not decisions:
        raise InvalidInputError("no routing decisions")
    idx = np.concatenate([d.experts.ravel() for d in decisions])
    if idx.size == 0:
        raise InvalidInputError("no routed tokens")
    counts = np.bincount(idx, minlength=n_experts)
    if counts.size != n_experts:
        raise InvalidInputError("expert index out of range")
    mean = counts.sum() / n_experts
    return LoadStats(counts, counts - mean, float(counts.max() / mean))


def update_bias(bias, stats, u):
    """``b_i += u * (sign(e_i) - mean(sign(e)))``, with sign(0) = 0.

    ``stats`` is either a raw error vector ``e``, used as given, or a
    :class:`LoadStats`, whose :attr:`~LoadStats.deficit` is used so that
    overloaded experts lose bias. The centered update sums to zero; the
    rounding residual is folded back into the largest-magnitude entry so the
    total bias never drifts.
    """
    b = bias.b if isinstance(bias, BiasState) else np.asarray(bias, dtype=np.float64)
    e = stats.deficit if isinstance(stats, LoadStats) else np.asarray(stats, dtype=np.float64)
    if b.shape != e.shape:
        raise InvalidInputError(f"bias has {b.size} entries, violations have {e.size}")
    if not (math.isfinite(u) and u >= 0):
        raise InvalidInputError("update rate must be a non-negative real")
    s = np.sign(e)
    new = b + u * (s - s.mean())
    target = math.fsum(b)
    drift = math.fsum(new) - target
    if drift:
        i = int(np.argmax(np.abs(new)))
        new[i] -= drift
    return BiasState(new)


def pad_routing_map(counts, routing_map, probs, alignment=16):
    """Enable extra zero-probability (token, expert) slots until every
    expert's token count is a multiple of ``alignment``.

    Slots are taken in token order. Entries that were already routed, and
    every positive-probability entry, are left untouched.
    """
    alignment = check_count(alignment, "alignment", 1)
    rmap = np.asarray(routing_map, dtype=bool)
    probs = np.asarray(probs, dtype=np.float64)
    if rmap.ndim != 2 or probs.shape != rmap.shape:
        raise InvalidInputError("routing map and probabilities must be matching token x expert matrices")
    counts = np.asarray(counts)
    if counts.shape != (rmap.shape[1],) or not np.array_equal(counts, rmap.sum(axis=0)):
        raise InvalidInputError("counts disagree with the routing map")
    padded = rmap.copy()
    for expert in range(rmap.shape[1]):
        short = (-int(counts[expert])) % alignment
        if not short:
            continue
        free = np.flatnonzero(~rmap[:, expert] & (probs[:, expert] == 0.0))
        if free.size < short:
            raise CapacityError(
                f"expert {expert} needs {short} zero-probability slots, only {free.size} available",
                expert=expert,
            )
        padded[free[:short], expert] = True
    return padded


def simulate_balance(cfg, steps, tokens_per_step, skew, seed=0):
    """Route synthetic traffic for ``steps`` steps, updating the bias after each.

    Scores are standard normal plus a fixed per-expert offset drawn once as
    ``skew * N(0, 1)``. Returns one :class:`LoadStats` per step, measured
    before that step's bias update.
    """
    steps = check_count(steps, "steps", 1)
    tokens_per_step = check_count(tokens_per_step, "tokens_per_step", 1)
    rng = make_rng(seed)
    offset = skew * rng.standard_normal(cfg.n_experts)
    bias = BiasState.zeros(cfg.n_experts)
    history = []
    for _ in range(steps):
        scores = rng.standard_normal((tokens_per_step, cfg.n_experts)) + offset
        stats = load_stats(route_topk(scores, bias, cfg), cfg.n_experts)
        history.append(stats)
        bias = update_bias(bias, stats, cfg.update_rate)
    return history


BALANCE_HEADER = ["step", "max_violation_ratio", "mean_count", "max_count", "min_count"]


def balance_rows(history):
    for step, s in enumerate(history, start=1):
        yield [step, repr(s.max_violation_ratio), repr(s.mean_count), int(s.counts.max()), int(s.counts.min())]
