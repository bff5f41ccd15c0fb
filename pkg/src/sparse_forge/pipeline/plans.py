"""Partition plans, balancing, simulation entry point and plan comparison."""
from dataclasses import dataclass, field
import csv
import json
import math

from .._validation import check_count
from ..exceptions import InvalidInputError, PlanError
from .layers import RECOMPUTE_MODES, LayerKind, LayerSpec, MTPBlock, recompute_cost, split_mtp
from .schedule import StageCosts, run_schedule, validate_events

DEFAULT_RESOLUTION = 1000
DEFAULT_BOUNDARY_FRACTION = 0.1


def _normalise_recompute(recompute):
    if isinstance(recompute, str):
        if recompute not in RECOMPUTE_MODES:
            raise InvalidInputError(f"unknown recompute mode {recompute!r}")
        return recompute
    out = {}
    for kind, mode in dict(recompute).items():
        if mode not in RECOMPUTE_MODES:
            raise InvalidInputError(f"unknown recompute mode {mode!r} for {kind}")
        out[LayerKind.parse(kind)] = mode
    return out


@dataclass(frozen=True)
class PartitionPlan:
    """``assignment[rank][chunk]`` lists layer indices for pipeline stage
    ``chunk * p + rank``. Stages may be empty.

    ``recompute`` is one mode for every layer or a ``{kind: mode}`` map
    (unlisted kinds are not recomputed). Recomputed layers keep only
    ``boundary_fraction`` of their activations.
    """

    p: int
    v: int
    assignment: tuple
    recompute: object = "none"
    boundary_fraction: float = DEFAULT_BOUNDARY_FRACTION
    name: str = ""

    def __post_init__(self):
        check_count(self.p, "p", 1)
        check_count(self.v, "v", 1)
        a = tuple(tuple(tuple(int(i) for i in stage) for stage in rank) for rank in self.assignment)
        if len(a) != self.p or any(len(rank) != self.v for rank in a):
            raise PlanError(f"assignment must be {self.p} ranks x {self.v} chunks")
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "recompute", _normalise_recompute(self.recompute))
        if not 0 <= self.boundary_fraction <= 1:
            raise InvalidInputError("boundary_fraction must lie in [0, 1]")

    @property
    def n_stages(self):
        return self.p * self.v

    def stage(self, s):
        return self.assignment[s % self.p][s // self.p]

    def stages(self):
        return [self.stage(s) for s in range(self.n_stages)]

    def mode_for(self, layer):
        if isinstance(self.recompute, str):
            return self.recompute
        return self.recompute.get(layer.kind, "none")

    def check(self, n_layers):
        flat = [i for st in self.stages() for i in st]
        if sorted(flat) != list(range(n_layers)):
            missing = sorted(set(range(n_layers)) - set(flat))
            extra = sorted(i for i in set(flat) if flat.count(i) > 1 or not 0 <= i < n_layers)
            raise PlanError(f"every layer must be assigned exactly once (missing {missing}, duplicated/invalid {extra})")
        if flat != list(range(n_layers)):
            raise PlanError("stage order does not preserve model layer order")

    @classmethod
    def from_stages(cls, stages, p, v, **kw):
        """Build from a flat stage list ordered by pipeline stage."""
        stages = list(stages)
        if len(stages) != p * v:
            raise PlanError(f"need {p * v} stages, got {len(stages)}")
        assignment = [[stages[c * p + r] for c in range(v)] for r in range(p)]
        return cls(p, v, assignment, **kw)

    @classmethod
    def from_sizes(cls, sizes, p, v, **kw):
        """Contiguous plan from per-stage layer counts."""
        stages, start = [], 0
        for n in sizes:
            stages.append(list(range(start, start + n)))
            start += n
        return cls.from_stages(stages, p, v, **kw)


def _ticks(x, resolution):
    return int(round(x * resolution))


def layer_ticks(layer, mode, resolution=DEFAULT_RESOLUTION):
    """``(fwd, bwd + recompute)`` of one layer in ticks."""
    return (
        _ticks(layer.fwd_cost, resolution),
        _ticks(layer.bwd_cost, resolution) + _ticks(recompute_cost(layer, mode), resolution),
    )


def stage_costs(plan, layers, resolution=DEFAULT_RESOLUTION):
    layers = _as_layers(layers)
    plan.check(len(layers))
    fwd, bwd, act = [], [], []
    for st in plan.stages():
        f = b = 0
        mem = 0
        for i in st:
            layer = layers[i]
            mode = plan.mode_for(layer)
            lf, lb = layer_ticks(layer, mode, resolution)
            f += lf
            b += lb
            kept = plan.boundary_fraction if recompute_cost(layer, mode) > 0 else 1.0
            mem += _ticks(layer.act_memory * kept, resolution)
        fwd.append(f)
        bwd.append(b)
        act.append(mem)
    return StageCosts(tuple(fwd), tuple(bwd), tuple(act))


def _as_layers(layers):
    out = []
    for layer in layers:
        if isinstance(layer, MTPBlock):
            raise InvalidInputError("split the MTP block with split_mtp before scheduling")
        out.append(layer if isinstance(layer, LayerSpec) else LayerSpec(layer))
    return out


def simulate_schedule(plan, layers, m, comm_latency=0.0, resolution=DEFAULT_RESOLUTION, memory_limit=None):
    """Simulate ``m`` micro-batches of interleaved 1F1B for ``plan``."""
    resolution = check_count(resolution, "resolution", 1)
    if not (math.isfinite(comm_latency) and comm_latency >= 0):
        raise InvalidInputError("comm_latency must be a non-negative number")
    costs = stage_costs(plan, layers, resolution)
    return run_schedule(costs, plan.p, plan.v, m, _ticks(comm_latency, resolution), resolution, memory_limit)


def validate_result(result, comm_latency=0.0):
    return validate_events(result.events, result.p, result.v, result.m, _ticks(comm_latency, result.resolution))


def balanced_partition(layers, p, v, recompute="none", resolution=DEFAULT_RESOLUTION, **kw):
    """Contiguous partition into ``p * v`` stages minimising the largest
    stage cost (forward + backward + recompute). Stages may be empty.

    Among optimal partitions the one with the lexicographically smallest
    prefix of stage sizes is returned.
    """
    layers = _as_layers(layers)
    probe = PartitionPlan(p, v, [[[]] * v] * p, recompute)
    w = [sum(layer_ticks(layer, probe.mode_for(layer), resolution)) for layer in layers]
    n, stages = len(w), p * v
    prefix = [0]
    for x in w:
        prefix.append(prefix[-1] + x)
    INF = float("inf")
    # best[s][i]: min over partitions of layers[i:] into s stages of max cost
    best = [[INF] * (n + 1) for _ in range(stages + 1)]
    best[0][n] = 0
    for s in range(1, stages + 1):
        for i in range(n + 1):
            for j in range(i, n + 1):
                val = max(prefix[j] - prefix[i], best[s - 1][j])
                if val < best[s][i]:
                    best[s][i] = val
    sizes, i = [], 0
    for s in range(stages, 0, -1):
        for j in range(i, n + 1):
            if max(prefix[j] - prefix[i], best[s - 1][j]) == best[s][i]:
                sizes.append(j - i)
                i = j
                break
    return PartitionPlan.from_sizes(sizes, p, v, recompute=recompute, **kw)


@dataclass(frozen=True)
class PlanRanking:
    position: int
    index: int
    name: str
    result: object
    improvement: float  # relative makespan reduction vs the first plan


def compare_plans(plans, layers, m, comm_latency=0.0, resolution=DEFAULT_RESOLUTION):
    """Simulate every plan and rank by makespan, then max bubble, then peak
    memory, then input position."""
    plans = list(plans)
    if not plans:
        raise InvalidInputError("need at least one plan")
    results = [simulate_schedule(pl, layers, m, comm_latency, resolution) for pl in plans]
    base = results[0].makespan_ticks
    order = sorted(
        range(len(plans)),
        key=lambda i: (results[i].makespan_ticks, results[i].bubble_max, max(results[i].peak_memory), i),
    )
    out = []
    for pos, i in enumerate(order, start=1):
        imp = (base - results[i].makespan_ticks) / base if base else 0.0
        out.append(PlanRanking(pos, i, plans[i].name or f"plan{i}", results[i], imp))
    return out


# -- reference instance ----------------------------------------------------


def heterogeneous_instance(p=5, v=2):
    """Embedding, 3 Dense, 15 MoE, one MTP block (k=1) and the LM loss.

    Returns ``(layers, baseline, split)``: the baseline keeps the MTP block
    in the last stage next to a MoE layer and the loss; the split plan
    schedules MTP transformer and MTP loss as separate layers and balances
    stage costs.
    """
    model = (
        [LayerSpec(LayerKind.EMBEDDING)]
        + [LayerSpec(LayerKind.DENSE)] * 3
        + [LayerSpec(LayerKind.MOE)] * 15
        + [MTPBlock(1)]
        + [LayerSpec(LayerKind.LM_LOSS)]
    )
    layers = split_mtp(model)
    # [Emb D D] [D MoE] [MoE MoE] x6 [MoE] [MoE MTP-T MTP-L LMLoss]
    sizes = [3, 2, 2, 2, 2, 2, 2, 2, 1, 4]
    if p * v != len(sizes):
        raise InvalidInputError("the reference instance is defined for p * v = 10")
    baseline = PartitionPlan.from_sizes(sizes, p, v, name="baseline")
    split = balanced_partition(layers, p, v, name="split-mtp")
    return layers, baseline, split


# -- file formats ----------------------------------------------------------

PLAN_KEYS = {"name", "p", "v", "layers", "assignment", "recompute", "costs", "boundary_fraction", "mtp_split"}
COST_KEYS = {"fwd_cost", "bwd_cost", "act_memory"}


def _layer_from_json(item):
    if isinstance(item, str):
        item = {"kind": item}
    if not isinstance(item, dict) or "kind" not in item:
        raise InvalidInputError(f"bad layer entry {item!r}")
    extra = set(item) - {"kind", "k"} - COST_KEYS
    if extra:
        raise InvalidInputError(f"unknown layer key(s): {', '.join(sorted(extra))}")
    if item["kind"] == "MTP":
        return MTPBlock(item.get("k", 1), item.get("fwd_cost", 1.7), item.get("bwd_cost"), item.get("act_memory"))
    return LayerSpec(item["kind"], item.get("fwd_cost"), item.get("bwd_cost"), item.get("act_memory"))


def plan_from_dict(data):
    """Parse a plan document into ``(plan, layers)``.

    ``layers`` entries are kind names or objects with cost fields; a kind of
    ``"MTP"`` is an MTP block that gets split (``mtp_split`` transformer share)
    before ``assignment`` indices are resolved. ``costs`` overrides default
    costs per kind.
    """
    unknown = sorted(set(data) - PLAN_KEYS)
    if unknown:
        raise InvalidInputError(f"unknown plan key(s): {', '.join(unknown)}")
    for key in ("p", "v", "layers", "assignment"):
        if key not in data:
            raise InvalidInputError(f"plan is missing {key!r}")
    overrides = {}
    for kind, vals in dict(data.get("costs", {})).items():
        bad = set(vals) - COST_KEYS
        if bad:
            raise InvalidInputError(f"unknown cost key(s) for {kind}: {', '.join(sorted(bad))}")
        overrides[LayerKind.parse(kind)] = vals
    model = [_layer_from_json(x) for x in data["layers"]]
    layers = split_mtp(model, data.get("mtp_split", 0.7))
    layers = [
        LayerSpec(l.kind, **{**{"fwd_cost": None, "bwd_cost": None, "act_memory": None}, **overrides[l.kind]})
        if l.kind in overrides else l
        for l in layers
    ]
    plan = PartitionPlan(
        data["p"], data["v"], data["assignment"],
        data.get("recompute", "none"),
        data.get("boundary_fraction", DEFAULT_BOUNDARY_FRACTION),
        data.get("name", ""),
    )
    plan.check(len(layers))
    return plan, layers


def plan_to_dict(plan, layers):
    recompute = plan.recompute if isinstance(plan.recompute, str) else {k.value: m for k, m in plan.recompute.items()}
    return {
        "name": plan.name,
        "p": plan.p,
        "v": plan.v,
        "layers": [
            {"kind": l.kind.value, "fwd_cost": l.fwd_cost, "bwd_cost": l.bwd_cost, "act_memory": l.act_memory}
            for l in layers
        ],
        "assignment": [[list(st) for st in rank] for rank in plan.assignment],
        "recompute": recompute,
        "boundary_fraction": plan.boundary_fraction,
    }


def read_plan(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: plan must be a JSON object")
    return plan_from_dict(data)


EVENTS_HEADER = ["rank", "start", "end", "micro_batch", "chunk", "phase"]


def event_rows(result):
    res = result.resolution
    for e in result.events:
        yield [e.rank, repr(e.start / res), repr(e.end / res), e.micro_batch, e.chunk, e.phase.value]


def write_events(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        w.writerows(event_rows(result))
