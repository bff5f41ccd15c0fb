"""Checkpoint save interval versus failover rollback trade-off.

Daily overhead with save cost ``C`` minutes, ``F`` failures per day, ``A``
minutes per failover and save interval ``s`` minutes::

    E(s) = 1440 C / s + F s / 2 + F A

On average half an interval of work is lost per failure.
"""
import math

from ._validation import check_finite_scalar, check_positive
from .exceptions import InvalidInputError

MINUTES_PER_DAY = 1440


def optimal_save_interval(save_cost, failures_per_day):
    """Return ``(s*, E_min)`` with ``s* = sqrt(2880 C / F)`` and
    ``E_min = 2 sqrt(720 C F)``, the overhead without the ``F A`` term."""
    c = check_positive(save_cost, "save_cost")
    f = check_positive(failures_per_day, "failures_per_day")
    return math.sqrt(2 * MINUTES_PER_DAY * c / f), 2.0 * math.sqrt(MINUTES_PER_DAY / 2 * c * f)


def failover_overhead(save_cost, failures_per_day, failover_cost, interval):
    c = check_positive(save_cost, "save_cost")
    f = check_positive(failures_per_day, "failures_per_day")
    s = check_positive(interval, "interval")
    a = check_finite_scalar(failover_cost, "failover_cost")
    if a < 0:
        raise InvalidInputError(f"failover_cost must be >= 0, got {a}")
    return MINUTES_PER_DAY * c / s + f * s / 2 + f * a
