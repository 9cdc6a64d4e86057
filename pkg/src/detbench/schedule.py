"""
One-cycle learning-rate schedule and training-recipe documents.

The schedule ramps from ``initial_lr`` to ``max_lr`` along a half cosine over
``round(pct_start * total_steps)`` steps, then anneals to ``final_lr`` along a
second half cosine. Each phase is written as a convex combination of its two
endpoints so that step 0, the ramp end and the last step hit them exactly.

Recipes and config files share a flat ``key = value`` text format: UTF-8, one
pair per line, keys sorted on output, ``#`` comments and blank lines ignored.
Recipe values are JSON literals so strings, numbers and the class list
round-trip without a schema of their own.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from detbench.errors import InputError

DEFAULT_CLASSES = ("with mask", "incorrect mask", "without mask")


@dataclass(frozen=True)
class OneCycleConfig:
    total_steps: int
    max_lr: float = 0.01
    initial_lr: float = 0.001
    final_lr: float = 0.001
    pct_start: float = 0.3
    anneal: str = "cosine"

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 2:
            raise InputError(f"total_steps must be an integer >= 2, got {self.total_steps}")
        if not 0 < self.initial_lr <= self.max_lr:
            raise InputError("need 0 < initial_lr <= max_lr")
        if not 0 < self.final_lr <= self.max_lr:
            raise InputError("need 0 < final_lr <= max_lr")
        if not 0 < self.pct_start < 1:
            raise InputError("pct_start must lie in (0, 1)")
        if self.anneal != "cosine":
            raise InputError(f"only cosine annealing is supported, got {self.anneal!r}")
        if not 1 <= self.ramp_steps < self.total_steps:
            raise InputError(
                f"pct_start {self.pct_start} leaves no room for both phases over {self.total_steps} steps"
            )

    @property
    def ramp_steps(self) -> int:
        return round(self.pct_start * self.total_steps)

    @property
    def anneal_steps(self) -> int:
        return self.total_steps - self.ramp_steps

    def step_bounds(self) -> tuple[float, float]:
        """Largest possible |lr(s+1) - lr(s)| in the ramp and anneal phases."""
        return (
            math.pi * (self.max_lr - self.initial_lr) / (2 * self.ramp_steps),
            math.pi * (self.max_lr - self.final_lr) / (2 * self.anneal_steps),
        )


def _cos_blend(start: float, end: float, t: float) -> float:
    c = math.cos(math.pi * t)
    return start * (1 + c) / 2 + end * (1 - c) / 2


def lr_at(config: OneCycleConfig, step: int) -> float:
    if not 0 <= step <= config.total_steps:
        raise InputError(f"step {step} outside [0, {config.total_steps}]")
    r = config.ramp_steps
    if step <= r:
        lr = _cos_blend(config.initial_lr, config.max_lr, step / r)
    else:
        lr = _cos_blend(config.max_lr, config.final_lr, (step - r) / config.anneal_steps)
    # rounding in the blend can overshoot an endpoint by an ulp
    return min(max(lr, min(config.initial_lr, config.final_lr)), config.max_lr)


def schedule(config: OneCycleConfig) -> np.ndarray:
    """lr for every step 0..total_steps inclusive."""
    return np.array([lr_at(config, s) for s in range(config.total_steps + 1)])


def schedule_csv(config: OneCycleConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr"])
    for s in range(config.total_steps + 1):
        w.writerow([s, repr(lr_at(config, s))])
    return buf.getvalue()


@dataclass(frozen=True)
class TrainingRecipe:
    batch_size: int = 32
    epochs: int = 50
    momentum: float = 0.937
    weight_decay: float = 0.0005
    image_size: int = 320
    lr: OneCycleConfig = field(default_factory=lambda: OneCycleConfig(total_steps=50))
    classification_loss: str = "cross-entropy"
    localization_loss: str = "ciou"
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        for name in ("batch_size", "epochs", "momentum", "weight_decay", "image_size"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not self.classes or any(not c for c in self.classes):
            raise InputError("class list must be non-empty with non-empty names")
        if len(set(self.classes)) != len(self.classes):
            raise InputError("class names must be unique")
        object.__setattr__(self, "classes", tuple(self.classes))


# -- key = value documents ------------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"line {lineno}: empty key")
        if key in out:
            raise InputError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(pairs: dict[str, str], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {pairs[k]}" for k in sorted(pairs)]
    return "\n".join(lines) + "\n"


def emit_recipe(recipe: TrainingRecipe) -> str:
    flat = {}
    for f in fields(recipe):
        value = getattr(recipe, f.name)
        if f.name == "lr":
            for k, v in asdict(value).items():
                flat[f"lr.{k}"] = json.dumps(v)
        elif f.name == "classes":
            flat[f.name] = json.dumps(list(value))
        else:
            flat[f.name] = json.dumps(value)
    return format_kv(flat, "training recipe")


def parse_recipe(text: str) -> TrainingRecipe:
    raw = parse_kv(text)
    values, lr = {}, {}
    known = {f.name for f in fields(TrainingRecipe)}
    lr_known = {f.name for f in fields(OneCycleConfig)}
    for key, text_value in raw.items():
        try:
            value = json.loads(text_value)
        except json.JSONDecodeError:
            raise InputError(f"recipe key {key!r}: value {text_value!r} is not a JSON literal") from None
        if key.startswith("lr."):
            sub = key[3:]
            if sub not in lr_known:
                raise InputError(f"unknown recipe key {key!r}")
            lr[sub] = value
        elif key in known and key != "lr":
            values[key] = tuple(value) if key == "classes" else value
        else:
            raise InputError(f"unknown recipe key {key!r}")
    if lr:
        if "total_steps" not in lr:
            raise InputError("recipe lr section needs lr.total_steps")
        values["lr"] = OneCycleConfig(**lr)
    return TrainingRecipe(**values)


def onecycle_from_kv(pairs: dict[str, str]) -> OneCycleConfig:
    """Build a schedule config from a key = value mapping (plain or ``lr.``-prefixed keys)."""
    kinds = {"total_steps": int, "max_lr": float, "initial_lr": float, "final_lr": float, "pct_start": float, "anneal": str}
    args = {}
    for key, value in pairs.items():
        name = key[3:] if key.startswith("lr.") else key
        if name not in kinds:
            continue
        try:
            args[name] = kinds[name](json.loads(value) if kinds[name] is not str else value.strip('"'))
        except (ValueError, TypeError, json.JSONDecodeError):
            raise InputError(f"config key {key!r}: bad value {value!r}") from None
    if "total_steps" not in args:
        raise InputError("config needs total_steps")
    return OneCycleConfig(**args)
