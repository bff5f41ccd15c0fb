"""Heterogeneous interleaved-1F1B pipeline simulation."""
from .layers import LayerKind, LayerSpec, MTPBlock, recompute_cost, split_mtp
from .plans import (
    PartitionPlan,
    PlanRanking,
    balanced_partition,
    compare_plans,
    heterogeneous_instance,
    plan_from_dict,
    plan_to_dict,
    read_plan,
    simulate_schedule,
    stage_costs,
    validate_result,
    write_events,
)
from .schedule import (
    Instruction,
    Phase,
    ScheduleEvent,
    SimResult,
    StageCosts,
    build_instruction_order,
    run_schedule,
    validate_events,
)
