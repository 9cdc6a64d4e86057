"""Transfer-learning freeze planning: which parameters stay trainable."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from detbench.errors import InputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FreezeSpec:
    prefixes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prefixes", tuple(self.prefixes))
        for p in self.prefixes:
            if not isinstance(p, str) or not p:
                raise InputError(f"freeze prefixes must be non-empty strings, got {p!r}")


@dataclass(frozen=True)
class FreezePlan:
    trainable: dict[str, bool]
    unmatched_prefixes: tuple[str, ...]

    @property
    def frozen_count(self) -> int:
        return sum(not t for t in self.trainable.values())

    @property
    def trainable_count(self) -> int:
        return sum(self.trainable.values())

    def frozen(self) -> list[str]:
        return [n for n, t in self.trainable.items() if not t]


def freeze_plan(param_names: Sequence[str], spec: FreezeSpec) -> FreezePlan:
    """Mark every parameter whose name starts with a frozen prefix as non-trainable.

    A prefix that matches nothing is logged and reported, not treated as an error.
    """
    if len(set(param_names)) != len(param_names):
        raise InputError("parameter names must be unique")
    trainable = {name: not any(name.startswith(p) for p in spec.prefixes) for name in param_names}
    unmatched = tuple(p for p in spec.prefixes if not any(n.startswith(p) for n in param_names))
    for p in unmatched:
        log.warning("freeze prefix %r matches no parameter", p)
    return FreezePlan(trainable, unmatched)
