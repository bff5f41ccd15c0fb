"""Interleaved 1F1B instruction order and an event-driven schedule simulator.

Time is kept in integer ticks so that makespans compare exactly.
"""
from dataclasses import dataclass
from fractions import Fraction
import enum

from .._validation import check_count
from ..exceptions import InvalidInputError, PlanError


class Phase(str, enum.Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"


@dataclass(frozen=True)
class Instruction:
    phase: Phase
    micro_batch: int
    chunk: int


@dataclass(frozen=True)
class ScheduleEvent:
    rank: int
    start: int  # ticks
    end: int
    micro_batch: int
    chunk: int
    phase: Phase
    stage: int

    def __post_init__(self):
        if self.end < self.start:
            raise InvalidInputError("event ends before it starts")


def _chunk_of(ordinal, p, v, forward):
    chunk = (ordinal // p) % v
    return chunk if forward else v - 1 - chunk


def _micro_batch_of(ordinal, p, v):
    return (ordinal // (p * v)) * p + ordinal % p


def build_instruction_order(p, v, m, rank):
    """Per-rank instruction list for (interleaved) 1F1B.

    Forwards go through chunks in groups of ``p`` micro-batches; backwards
    visit chunks in reverse. After the warmup forwards each forward is
    followed by one backward, and the remaining backwards drain at the end.
    """
    p = check_count(p, "p", 1)
    v = check_count(v, "v", 1)
    m = check_count(m, "m", 1)
    rank = check_count(rank, "rank", 0)
    if rank >= p:
        raise InvalidInputError(f"rank {rank} out of range for p={p}")
    total = m * v
    if v > 1:
        if m % p:
            raise InvalidInputError(f"interleaving needs micro-batches ({m}) divisible by p ({p})")
        warmup = min(total, 2 * (p - rank - 1) + (v - 1) * p)
        fwd = [Instruction(Phase.FORWARD, _micro_batch_of(i, p, v), _chunk_of(i, p, v, True)) for i in range(total)]
        bwd = [Instruction(Phase.BACKWARD, _micro_batch_of(i, p, v), _chunk_of(i, p, v, False)) for i in range(total)]
    else:
        warmup = min(m, p - rank - 1)
        fwd = [Instruction(Phase.FORWARD, i, 0) for i in range(m)]
        bwd = [Instruction(Phase.BACKWARD, i, 0) for i in range(m)]
    order = list(fwd[:warmup])
    nb = 0
    for f in fwd[warmup:]:
        order.append(f)
        order.append(bwd[nb])
        nb += 1
    order.extend(bwd[nb:])
    return order


@dataclass(frozen=True)
class StageCosts:
    """Tick costs per pipeline stage (stage = chunk * p + rank)."""

    fwd: tuple
    bwd: tuple  # includes recompute
    act: tuple  # activation memory (ticks) held from forward to backward


@dataclass
class SimResult:
    p: int
    v: int
    m: int
    resolution: int
    makespan_ticks: int
    busy_ticks: tuple
    peak_memory: tuple
    events: list
    memory_limit: float = None

    @property
    def makespan(self):
        return self.makespan_ticks / self.resolution

    def bubble_fraction(self, rank):
        """Exact idle share of ``rank`` as a :class:`~fractions.Fraction`."""
        if self.makespan_ticks == 0:
            return Fraction(0)
        return 1 - Fraction(self.busy_ticks[rank], self.makespan_ticks)

    @property
    def bubble_ratio(self):
        return tuple(float(self.bubble_fraction(r)) for r in range(self.p))

    @property
    def bubble_max(self):
        return max(self.bubble_ratio)

    @property
    def bubble_mean(self):
        return float(sum(self.bubble_fraction(r) for r in range(self.p)) / self.p)

    @property
    def oom(self):
        if self.memory_limit is None:
            return tuple(False for _ in self.peak_memory)
        return tuple(m > self.memory_limit for m in self.peak_memory)

    def summary(self):
        out = {
            "makespan": self.makespan,
            "bubble_max": self.bubble_max,
            "bubble_mean": self.bubble_mean,
            "bubble_ratio_per_rank": list(self.bubble_ratio),
            "peak_memory_per_rank": list(self.peak_memory),
        }
        if self.memory_limit is not None:
            out["oom_per_rank"] = list(self.oom)
        return out


def _deps(phase, mb, stage, n_stages):
    if phase is Phase.FORWARD:
        return [(Phase.FORWARD, mb, stage - 1)] if stage > 0 else []
    deps = [(Phase.FORWARD, mb, stage)]
    if stage < n_stages - 1:
        deps.append((Phase.BACKWARD, mb, stage + 1))
    return deps


def run_schedule(costs, p, v, m, comm_ticks=0, resolution=1000, memory_limit=None, orders=None):
    """Execute every rank's instruction list with earliest-start semantics.

    An instruction starts once its rank is free and its cross-stage
    dependency has finished (plus ``comm_ticks`` when the dependency lives on
    another rank). ``orders`` replaces the built-in per-rank instruction
    lists. Raises :class:`PlanError` if the orders deadlock.
    """
    if comm_ticks < 0:
        raise InvalidInputError("communication latency must be non-negative")
    n_stages = p * v
    if not (len(costs.fwd) == len(costs.bwd) == len(costs.act) == n_stages):
        raise InvalidInputError(f"expected costs for {n_stages} stages")
    if orders is None:
        orders = [build_instruction_order(p, v, m, r) for r in range(p)]
    elif len(orders) != p:
        raise InvalidInputError(f"need one instruction list per rank ({p})")
    pos = [0] * p
    free = [0] * p
    done = {}
    events = []
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for r in range(p):
            while pos[r] < len(orders[r]):
                ins = orders[r][pos[r]]
                stage = ins.chunk * p + r
                ready = free[r]
                blocked = False
                for key in _deps(ins.phase, ins.micro_batch, stage, n_stages):
                    end = done.get(key)
                    if end is None:
                        blocked = True
                        break
                    ready = max(ready, end + (comm_ticks if key[2] % p != r else 0))
                if blocked:
                    break
                dur = costs.fwd[stage] if ins.phase is Phase.FORWARD else costs.bwd[stage]
                done[(ins.phase, ins.micro_batch, stage)] = ready + dur
                events.append(ScheduleEvent(r, ready, ready + dur, ins.micro_batch, ins.chunk, ins.phase, stage))
                free[r] = ready + dur
                pos[r] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            stuck = {r: orders[r][pos[r]] for r in range(p) if pos[r] < len(orders[r])}
            raise PlanError(f"schedule deadlocked; blocked instructions: {stuck}")

    events.sort(key=lambda e: (e.rank, e.start, e.end))
    busy = [0] * p
    peak = [0] * p
    for r in range(p):
        # allocate at forward start, release at backward end
        deltas = []
        for e in events:
            if e.rank != r:
                continue
            busy[r] += e.end - e.start
            if e.phase is Phase.FORWARD:
                deltas.append((e.start, 1, costs.act[e.stage]))
            else:
                deltas.append((e.end, 0, -costs.act[e.stage]))
        level = 0
        for _, _, d in sorted(deltas, key=lambda t: (t[0], t[1])):
            level += d
            peak[r] = max(peak[r], level)
    makespan = max((e.end for e in events), default=0)
    return SimResult(p, v, m, resolution, makespan, tuple(busy), tuple(x / resolution for x in peak), events, memory_limit)


def validate_events(events, p, v, m, comm_ticks=0):
    """Check a schedule: each (phase, micro-batch, stage) exactly once, no
    per-rank overlap, every dependency respected. Returns a list of problems
    (empty when valid)."""
    problems = []
    n_stages = p * v
    seen = {}
    for e in events:
        key = (Phase(e.phase), e.micro_batch, e.stage)
        if e.stage != e.chunk * p + e.rank:
            problems.append(f"event {key} on rank {e.rank} chunk {e.chunk} has the wrong stage")
        if key in seen:
            problems.append(f"{key} executed twice")
        seen[key] = e
    for phase in Phase:
        for mb in range(m):
            for s in range(n_stages):
                if (phase, mb, s) not in seen:
                    problems.append(f"{(phase, mb, s)} never executed")
    by_rank = {}
    for e in events:
        by_rank.setdefault(e.rank, []).append(e)
    for r, evs in by_rank.items():
        evs = sorted(evs, key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                problems.append(f"rank {r}: overlap between {a} and {b}")
    for key, e in seen.items():
        for dep in _deps(key[0], key[1], key[2], n_stages):
            d = seen.get(dep)
            if d is None:
                continue
            lat = comm_ticks if d.rank != e.rank else 0
            if e.start < d.end + lat:
                problems.append(f"{key} starts before dependency {dep} is available")
    return problems
