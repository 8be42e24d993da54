"""Slowdown of a design that validates every transaction eagerly at every node.

With ``delta`` the eager-validation time and ``Delta`` the end-to-end time of
the reduced-validation design, the remaining time ``beta = Delta - delta`` is
unaffected, while full replication multiplies the validation time by ``n``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..core import BadInput


@dataclass(frozen=True)
class Slowdown:
    beta: float
    delta_evm: float
    Delta_evm: float
    S: float
    S_limit: float

    def as_dict(self) -> dict:
        return asdict(self)


def slowdown_model(delta_sevm: float, Delta_sevm: float, n: int) -> Slowdown:
    if n < 1:
        raise BadInput("n must be >= 1")
    if delta_sevm < 0:
        raise BadInput("validation time must be non-negative")
    beta = Delta_sevm - delta_sevm
    if beta <= 0:
        raise BadInput("end-to-end time must exceed validation time")
    delta_evm = n * delta_sevm
    Delta_evm = beta + delta_evm
    S = (Delta_evm - Delta_sevm) / Delta_sevm
    return Slowdown(beta, delta_evm, Delta_evm, S, delta_evm / beta)
