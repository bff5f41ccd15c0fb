"""Command-line entry point: ``sparse-forge <group> <command> [options]``.

Exit codes: 0 success, 1 invalid input (including bad usage), 2 I/O error.
Diagnostics go to stderr; data goes to ``--output`` or stdout.
"""
import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fp8, ops, pipeline, rewards, router, scaling_laws, wsm
from .exceptions import CapacityError, ConvergenceError, InvalidInputError
from .rng import make_rng

SEED_ENV = "SPARSE_FORGE_SEED"
CORE_KEYS = ("seed", "output", "format")
_NOT_PARAMS = {"config", "handler", "group", "command", "_parser"}


class UsageError(InvalidInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    seed: int = None  # unset: environment, then 0
    output: str = None
    format: str = None  # unset: the command's natural format
    params: dict = field(default_factory=dict)


def _parse_json_text(text, source):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return _parse_json_text(fh.read(), path)


def _check_seed(value, source):
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{source}: seed must be an integer, got {value!r}") from None
    if isinstance(value, float) and value != seed or isinstance(value, bool):
        raise InvalidInputError(f"{source}: seed must be an integer, got {value!r}")
    if not 0 <= seed < 2**64:
        raise InvalidInputError(f"{source}: seed must fit in an unsigned 64-bit integer")
    return seed


def load_config(path, allowed=None):
    """Read a JSON run config. ``seed``, ``output`` and ``format`` are core
    keys; anything else must be one of ``allowed`` (a command's option
    names) and lands in ``params``."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    allowed = set(allowed or ())
    unknown = sorted(k for k in data if k not in CORE_KEYS and k not in allowed)
    if unknown:
        raise InvalidInputError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = _check_seed(data["seed"], path)
    if "output" in data:
        cfg.output = data["output"]
    if "format" in data:
        if data["format"] not in ("json", "csv"):
            raise InvalidInputError(f"{path}: format must be 'json' or 'csv'")
        cfg.format = data["format"]
    cfg.params = {k: v for k, v in data.items() if k not in CORE_KEYS}
    return cfg


# -- output ----------------------------------------------------------------


def _clean(obj):
    """Make values JSON friendly: integral floats print as ints, NaN as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        if x.is_integer() and abs(x) < 2**53:
            return int(x)
        return x
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), separators=(",", ":"), ensure_ascii=False, allow_nan=False) + "\n"


def _emit(args, text):
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _floats(text, name):
    if isinstance(text, (list, tuple)):
        values = text
    else:
        values = [x for x in str(text).split(",") if x.strip()]
    try:
        out = [float(x) for x in values]
    except ValueError:
        raise InvalidInputError(f"--{name} must be a comma separated list of numbers") from None
    if not out:
        raise InvalidInputError(f"--{name} is empty")
    return out


# -- scaling ---------------------------------------------------------------


def _read_power_fit(path):
    d = _read_json(path)
    if not isinstance(d, dict) or not {"coefficient", "exponent"} <= set(d):
        raise InvalidInputError(f"{path}: expected a power-law fit with coefficient and exponent")
    return scaling_laws.PowerLawFit(float(d["coefficient"]), float(d["exponent"]), float(d.get("residual") or 0.0))


def cmd_scaling_fit_power(args):
    _require(args, "input")
    fit = scaling_laws.fit_power_law(scaling_laws.read_power_points(args.input), delta=args.delta)
    _emit(args, dumps(fit.to_dict()))


def cmd_scaling_fit_el(args):
    _require(args, "input")
    params = scaling_laws.fit_el_law(scaling_laws.read_el_points(args.input), args.delta, args.saturation)
    _emit(args, dumps(params.to_dict()))


def cmd_scaling_predict(args):
    _require(args, "compute")
    out = {"compute": args.compute}
    if args.params:
        _require(args, "activation_ratio", "granularity")
        d = _read_json(args.params)
        if not isinstance(d, dict):
            raise InvalidInputError(f"{args.params}: expected an object")
        d = {k: v for k, v in d.items() if k != "residual"}
        p = scaling_laws.ElLawParams(**d)
        arch = scaling_laws.ArchPoint(args.compute, args.activation_ratio, args.granularity)
        out["efficiency_leverage"] = scaling_laws.el_predict(p, arch)
    if args.lr_fit or args.bs_fit:
        _require(args, "lr_fit", "bs_fit")
        lr, bs = scaling_laws.predict_hparams(_read_power_fit(args.lr_fit), _read_power_fit(args.bs_fit), args.compute)
        out["learning_rate"], out["batch_size"] = lr, bs
    if args.m_fit or args.d_fit:
        _require(args, "m_fit", "d_fit")
        a = scaling_laws.predict_allocation(_read_power_fit(args.m_fit), _read_power_fit(args.d_fit), args.compute)
        out.update(flops_per_token=a.flops_per_token, tokens=a.tokens, adjusted=a.adjusted)
    if len(out) == 1:
        raise UsageError("give --params, --lr-fit/--bs-fit or --m-fit/--d-fit")
    _emit(args, dumps(out))


def cmd_scaling_wind_tunnel(args):
    _require(args, "min_flops_per_token", "max_flops_per_token", "lr_fit", "bs_fit", "m_fit")
    plan = scaling_laws.plan_wind_tunnel(
        args.min_flops_per_token,
        args.max_flops_per_token,
        args.n_models,
        _read_power_fit(args.lr_fit),
        _read_power_fit(args.bs_fit),
        _read_power_fit(args.m_fit),
        _read_power_fit(args.d_fit) if args.d_fit else None,
    )
    buf = io.StringIO()
    scaling_laws.write_plan_csv(plan, buf)
    _emit(args, buf.getvalue())


# -- wsm -------------------------------------------------------------------

CONVERT_DIGITS = 12


def _round_sig(x, digits=CONVERT_DIGITS):
    return float(f"{x:.{digits}g}")


def cmd_wsm_convert(args):
    if (args.w is None) == (args.c is None):
        raise UsageError("give exactly one of --w or --c")
    if args.w is not None:
        c = wsm.decay_to_merge_weights(_floats(args.w, "w")).c
        _emit(args, dumps({"c": [_round_sig(x) for x in c]}))
    else:
        w = wsm.merge_to_gradient_weights(_floats(args.c, "c")).w
        _emit(args, dumps({"w": [_round_sig(x) for x in w]}))


def cmd_wsm_merge(args):
    _require(args, "checkpoints", "output")
    if (args.w is None) == (args.c is None):
        raise UsageError("give exactly one of --w or --c")
    vectors = [wsm.read_checkpoint(p) for p in args.checkpoints]
    sizes = {v.size for v in vectors}
    if len(sizes) != 1:
        raise InvalidInputError(f"checkpoints have different sizes: {sorted(sizes)}")
    series = wsm.CheckpointSeries(np.vstack(vectors))
    c = _floats(args.c, "c") if args.c is not None else wsm.decay_to_merge_weights(_floats(args.w, "w"))
    wsm.write_checkpoint(args.output, wsm.merge_checkpoints(series, c))


def cmd_wsm_simulate(args):
    rng = make_rng(args.seed)
    w = _floats(args.w, "w") if args.w is not None else [1.0 - i / args.k for i in range(args.k)]
    k = len(w)
    gradients = rng.standard_normal((k, args.dim))
    theta = rng.standard_normal(args.dim)
    res = wsm.simulate_equivalence(gradients, theta, w)
    _emit(args, dumps({"k": k, "dim": args.dim, "max_abs_diff": res.max_abs_diff}))


# -- router ----------------------------------------------------------------


def _router_config(args):
    return router.RouterConfig(
        n_experts=args.experts,
        top_k=args.top_k,
        n_groups=args.groups,
        top_groups=args.top_groups,
        update_rate=args.update_rate,
        alignment=args.alignment,
    )


def cmd_router_simulate(args):
    cfg = _router_config(args)
    history = router.simulate_balance(cfg, args.steps, args.tokens_per_step, args.skew, args.seed)
    if args.format == "csv":
        _emit(args, _csv_text(router.BALANCE_HEADER, router.balance_rows(history)))
        return
    ratios = [s.max_violation_ratio for s in history]
    _emit(
        args,
        dumps(
            {
                "steps": len(history),
                "initial_ratio": ratios[0],
                "final_ratio": ratios[-1],
                "best_ratio": min(ratios),
                "reduction": 1.0 - min(ratios) / ratios[0],
            }
        ),
    )


def _read_matrix_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise InvalidInputError(f"{path}:{lineno}: non-numeric field") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise InvalidInputError(f"{path}: expected a non-empty rectangular matrix")
    return np.array(rows)


def cmd_router_pad(args):
    _require(args, "probs")
    probs = _read_matrix_csv(args.probs)
    rmap = probs > 0
    padded = router.pad_routing_map(rmap.sum(axis=0), rmap, probs, args.alignment)
    if args.format == "json":
        _emit(args, dumps({"counts_before": rmap.sum(axis=0), "counts_after": padded.sum(axis=0)}))
        return
    header = [f"e{i}" for i in range(padded.shape[1])]
    _emit(args, _csv_text(header, padded.astype(int).tolist()))


# -- fp8 -------------------------------------------------------------------


def cmd_fp8_audit(args):
    _require(args, "input")
    layers = []
    for path in args.input:
        matrix, layout = fp8.read_tensor(path)
        layers.append((Path(path).stem, matrix, args.layout or layout))
    reports = fp8.audit(layers, args.underflow_threshold, args.distortion_threshold)
    if args.format == "json":
        _emit(args, dumps({"layers": [r.__dict__ for r in reports]}))
    else:
        _emit(args, _csv_text(fp8.AUDIT_HEADER, fp8.audit_rows(reports)))
    for r in reports:
        if r.error:
            print(f"warning: {r.layer}: {r.error}", file=sys.stderr)


def cmd_fp8_roundtrip(args):
    _require(args, "input")
    matrix, layout = fp8.read_tensor(args.input)
    layout = fp8.Layout.parse(args.layout) if args.layout else layout
    q = fp8.quantize(matrix, layout)
    recon = fp8.dequantize(q)
    summary = {
        "shape": list(q.shape),
        "layout": layout.name.lower(),
        "underflow_rate": fp8.underflow_rate(matrix, recon),
        "distortion": fp8.distortion(matrix, recon),
        "nan_count": q.nan_count,
    }
    if args.tensor_out:
        fp8.write_tensor(args.tensor_out, recon, layout)
    _emit(args, dumps(summary))


# -- pipeline ---------------------------------------------------------------


def cmd_pipe_simulate(args):
    _require(args, "plan", "micro_batches")
    if len(args.plan) != 1:
        raise UsageError("simulate takes exactly one --plan")
    plan, layers = pipeline.read_plan(args.plan[0])
    res = pipeline.simulate_schedule(plan, layers, args.micro_batches, args.comm_latency, args.resolution, args.memory_limit)
    problems = pipeline.validate_result(res, args.comm_latency)
    if problems:  # should not happen; guards the simulator itself
        raise InvalidInputError("schedule failed validation: " + problems[0])
    if args.events:
        pipeline.write_events(args.events, res)
    _emit(args, dumps(res.summary()))


def cmd_pipe_compare(args):
    _require(args, "plan", "micro_batches")
    loaded = [pipeline.read_plan(p) for p in args.plan]
    layers = loaded[0][1]
    for path, (_, other) in zip(args.plan, loaded):
        if other != layers:
            raise InvalidInputError(f"{path}: plans being compared must describe the same layers")
    plans = []
    for i, (path, (plan, _)) in enumerate(zip(args.plan, loaded)):
        if not plan.name:
            plan = pipeline.PartitionPlan(plan.p, plan.v, plan.assignment, plan.recompute, plan.boundary_fraction, Path(path).stem)
        plans.append(plan)
    ranking = pipeline.compare_plans(plans, layers, args.micro_batches, args.comm_latency, args.resolution)
    _emit(
        args,
        dumps(
            {
                "ranking": [
                    {
                        "position": r.position,
                        "name": r.name,
                        "index": r.index,
                        "makespan": r.result.makespan,
                        "bubble_max": r.result.bubble_max,
                        "peak_memory": max(r.result.peak_memory),
                        "improvement": r.improvement,
                    }
                    for r in ranking
                ]
            }
        ),
    )


def cmd_pipe_preset(args):
    layers, baseline, split = pipeline.heterogeneous_instance()
    plan = baseline if args.which == "baseline" else split
    _emit(args, dumps(pipeline.plan_to_dict(plan, layers)))


# -- ops / rewards ----------------------------------------------------------


def cmd_ops_save_interval(args):
    _require(args, "save_cost", "failures")
    s, e_min = ops.optimal_save_interval(args.save_cost, args.failures)
    out = {"interval_minutes": s, "min_overhead_minutes_per_day": e_min}
    if args.failover_cost is not None:
        out["overhead_minutes_per_day"] = ops.failover_overhead(args.save_cost, args.failures, args.failover_cost, s)
    _emit(args, dumps(out))


def cmd_reward_lpo(args):
    _require(args, "rollouts")
    group = rewards.read_rollouts(args.rollouts)
    report = rewards.lpo_report(group, rewards.LpoConfig(args.epsilon))
    _emit(args, dumps(report.to_dict()))


def cmd_reward_gar(args):
    _require(args, "arena")
    outcomes, g = rewards.read_arena(args.arena)
    g = args.group_size or g
    scores = rewards.gar_scores(outcomes, g)
    _emit(args, dumps({"scores": scores, "inconsistent_pairs": rewards.inconsistent_pairs(outcomes)}))


def cmd_reward_length(args):
    _require(args, "lengths", "index")
    lengths = _floats(args.lengths, "lengths")
    if any(not x.is_integer() for x in lengths):
        raise InvalidInputError("--lengths must be whole token counts")
    tasks = _floats(args.task_rewards, "task-rewards") if args.task_rewards else []
    b = rewards.composite_reward(args.correct, [int(x) for x in lengths], args.index, args.alpha, args.think_marker, tasks)
    _emit(
        args,
        dumps(
            {
                "correctness": b.correctness,
                "length": b.length,
                "format": b.format,
                "task_specific": list(b.task_specific),
                "total": b.total,
            }
        ),
    )


def cmd_reward_pass_at_k(args):
    _require(args, "n", "c", "k")
    _emit(args, dumps({"n": args.n, "c": args.c, "k": args.k, "pass_at_k": rewards.pass_at_k(args.n, args.c, args.k)}))


# -- parser ----------------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config; command-line flags override it")
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--output", "-o", default=None, help="write data here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default=None)
    return p


def build_parser():
    common = _common()
    top = _Parser(prog="sparse-forge", description="MoE training and post-training toolkit")
    groups = top.add_subparsers(dest="group", parser_class=_Parser, metavar="group")

    def add(group_parsers, name, handler, help_text, default_format="json"):
        p = group_parsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler, _format_default=default_format)
        return p

    # scaling
    sg = groups.add_parser("scaling", help="scaling-law fits and planning").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    p = add(sg, "fit-power", cmd_scaling_fit_power, "fit y = a * C^b to a compute,value CSV")
    p.add_argument("--input")
    p.add_argument("--delta", type=float, default=scaling_laws.DEFAULT_DELTA)
    p = add(sg, "fit-el", cmd_scaling_fit_el, "fit the efficiency-leverage law")
    p.add_argument("--input")
    p.add_argument("--delta", type=float, default=scaling_laws.DEFAULT_DELTA)
    p.add_argument("--saturation", type=float, default=scaling_laws.DEFAULT_SATURATION)
    p = add(sg, "predict", cmd_scaling_predict, "predict EL, hyper-parameters or allocation at a compute budget")
    p.add_argument("--compute", type=float)
    p.add_argument("--params", help="EL parameters JSON from fit-el")
    p.add_argument("--activation-ratio", type=float)
    p.add_argument("--granularity", type=float)
    for name in ("lr-fit", "bs-fit", "m-fit", "d-fit"):
        p.add_argument(f"--{name}", help="power-law fit JSON from fit-power")
    p = add(sg, "wind-tunnel", cmd_scaling_wind_tunnel, "plan a geometric ladder of small runs (CSV)", "csv")
    p.add_argument("--min-flops-per-token", type=float)
    p.add_argument("--max-flops-per-token", type=float)
    p.add_argument("--n-models", type=int, default=5)
    for name in ("lr-fit", "bs-fit", "m-fit", "d-fit"):
        p.add_argument(f"--{name}")

    # wsm
    wg = groups.add_parser("wsm", help="checkpoint merging").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    p = add(wg, "convert", cmd_wsm_convert, "convert decay weights w <-> merge weights c")
    p.add_argument("--w", help="comma separated gradient weights")
    p.add_argument("--c", help="comma separated merge weights")
    p = add(wg, "merge", cmd_wsm_merge, "merge WSM1 checkpoints into --output")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--w")
    p.add_argument("--c")
    p = add(wg, "simulate", cmd_wsm_simulate, "check merge/decay equivalence on random updates")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--dim", type=int, default=1000)
    p.add_argument("--w")

    # router
    rg = groups.add_parser("router", help="MoE routing").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    defaults = router.RouterConfig()
    p = add(rg, "simulate", cmd_router_simulate, "simulate bias-based load balancing", "csv")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--tokens-per-step", type=int, default=1024)
    p.add_argument("--skew", type=float, default=2.0)
    p.add_argument("--experts", type=int, default=defaults.n_experts)
    p.add_argument("--top-k", type=int, default=defaults.top_k)
    p.add_argument("--groups", type=int, default=defaults.n_groups)
    p.add_argument("--top-groups", type=int, default=defaults.top_groups)
    p.add_argument("--update-rate", type=float, default=defaults.update_rate)
    p.add_argument("--alignment", type=int, default=defaults.alignment)
    p = add(rg, "pad", cmd_router_pad, "pad a routing map to aligned expert counts", "csv")
    p.add_argument("--probs", help="token x expert probability CSV; positive entries are routed")
    p.add_argument("--alignment", type=int, default=defaults.alignment)

    # fp8
    fg = groups.add_parser("fp8", help="FP8 E4M3 emulation").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    p = add(fg, "audit", cmd_fp8_audit, "quantize FP8T tensors and report underflow/distortion", "csv")
    p.add_argument("--input", nargs="+")
    p.add_argument("--layout", choices=("act_grad", "weight"))
    p.add_argument("--underflow-threshold", type=float, default=0.01)
    p.add_argument("--distortion-threshold", type=float, default=0.999)
    p = add(fg, "roundtrip", cmd_fp8_roundtrip, "quantize and dequantize one FP8T tensor")
    p.add_argument("--input")
    p.add_argument("--layout", choices=("act_grad", "weight"))
    p.add_argument("--tensor-out", help="write the dequantized tensor here")

    # pipeline
    pg = groups.add_parser("pipe", help="pipeline schedule simulation").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    for name, handler, text in (
        ("simulate", cmd_pipe_simulate, "simulate one plan"),
        ("compare", cmd_pipe_compare, "rank several plans"),
    ):
        p = add(pg, name, handler, text)
        p.add_argument("--plan", action="append", help="plan JSON (repeat for compare)")
        p.add_argument("--micro-batches", type=int)
        p.add_argument("--comm-latency", type=float, default=0.0)
        p.add_argument("--resolution", type=int, default=pipeline.plans.DEFAULT_RESOLUTION)
        if name == "simulate":
            p.add_argument("--memory-limit", type=float)
            p.add_argument("--events", help="events CSV path")
    p = add(pg, "preset", cmd_pipe_preset, "emit the reference heterogeneous instance as a plan JSON")
    p.add_argument("--which", choices=("baseline", "split"), default="split")

    # ops
    og = groups.add_parser("ops", help="training operations").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    p = add(og, "save-interval", cmd_ops_save_interval, "optimal checkpoint save interval")
    p.add_argument("--save-cost", type=float, help="minutes per save")
    p.add_argument("--failures", type=float, help="failures per day")
    p.add_argument("--failover-cost", type=float, help="minutes per failover")

    # rewards
    wg2 = groups.add_parser("reward", help="post-training rewards").add_subparsers(
        dest="command", parser_class=_Parser, metavar="command"
    )
    p = add(wg2, "lpo", cmd_reward_lpo, "sentence-level clipped objective for one rollout group")
    p.add_argument("--rollouts")
    p.add_argument("--epsilon", type=float, default=0.03)
    p = add(wg2, "gar", cmd_reward_gar, "round-robin arena scores from an i,j,result CSV")
    p.add_argument("--arena")
    p.add_argument("--group-size", type=int)
    p = add(wg2, "length", cmd_reward_length, "length, format and composite reward for one response")
    p.add_argument("--lengths")
    p.add_argument("--index", type=int)
    p.add_argument("--correct", action="store_true", default=False)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--think-marker", action="store_true", default=False)
    p.add_argument("--task-rewards")
    p = add(wg2, "pass-at-k", cmd_reward_pass_at_k, "unbiased pass@k")
    p.add_argument("--n", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--k", type=int)
    return top


def _leaf(parser, args):
    sub = parser._subparsers._group_actions[0].choices[args.group]
    return sub._subparsers._group_actions[0].choices[args.command]


def _resolve(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.group is None:
        parser.print_usage(sys.stderr)
        raise UsageError("missing command group")
    if getattr(args, "command", None) is None:
        raise UsageError(f"missing {args.group} command")
    leaf = _leaf(parser, args)
    if args.config:
        allowed = {a.dest for a in leaf._actions if a.dest not in _NOT_PARAMS and a.dest != "help"}
        cfg = load_config(args.config, allowed - set(CORE_KEYS))
        overrides = dict(cfg.params)
        if cfg.output is not None:
            overrides["output"] = cfg.output
        if cfg.format is not None:
            overrides["format"] = cfg.format
        if cfg.seed is not None:
            overrides["seed"] = cfg.seed
        leaf.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        args.seed = _check_seed(env, SEED_ENV) if env not in (None, "") else 0
    else:
        args.seed = _check_seed(args.seed, "--seed")
    if args.format is None:
        args.format = args._format_default
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _resolve(argv)
        args.handler(args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0
    except (InvalidInputError, ValueError, CapacityError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
