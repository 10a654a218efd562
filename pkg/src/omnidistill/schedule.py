"""Training length, step learning rate and labeled/generated minibatch mixing.

Random numbers come from numpy's PCG64 bit generator.  Each call to
:meth:`MixSampler.next_batch` seeds a fresh ``Generator(PCG64(SeedSequence([seed, counter])))``
where ``counter`` is the number of slots drawn so far, so a batch is fully
determined by ``(seed, counter)`` and identical across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import SamplerError, ScheduleError

LABELED = "labeled"
GENERATED = "generated"


@dataclass(frozen=True)
class FixedRatio:
    """Each slot is labeled with probability ``labeled_prob``."""

    labeled_prob: float = 0.6

    def __post_init__(self):
        if not 0 < self.labeled_prob <= 1:
            raise ValueError(f"labeled_prob must be in (0, 1], got {self.labeled_prob}")

    @property
    def p_labeled(self) -> float:
        return self.labeled_prob


@dataclass(frozen=True)
class RhoRatio:
    """On average 1:rho labeled to generated examples per minibatch."""

    rho: float

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")

    @property
    def p_labeled(self) -> float:
        return 1.0 / (1.0 + self.rho)


MixMode = Union[FixedRatio, RhoRatio]


@dataclass(frozen=True)
class SchedulePlan:
    total_iters: int
    base_lr: float = 0.02
    milestones: tuple[float, ...] = (0.7, 0.9)
    lr_decay: float = 0.1
    mix_mode: MixMode = field(default_factory=FixedRatio)
    batch_size: int = 2

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        ms = tuple(float(m) for m in self.milestones)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        object.__setattr__(self, "milestones", ms)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def milestone_iters(self) -> list[int]:
        # the small tolerance keeps decimal fractions exact: 0.7 * 360000 is
        # 251999.99999999997 in binary floating point but means 252000
        return [math.floor(m * self.total_iters + 1e-9) for m in self.milestones]

    def with_iters(self, total_iters: int) -> "SchedulePlan":
        return SchedulePlan(total_iters, self.base_lr, self.milestones, self.lr_decay, self.mix_mode, self.batch_size)

    def with_mix(self, mix_mode: MixMode) -> "SchedulePlan":
        return SchedulePlan(self.total_iters, self.base_lr, self.milestones, self.lr_decay, mix_mode, self.batch_size)


def plan_iterations(base_iters: int, mode: MixMode, multiple: Optional[float] = None) -> int:
    """Total iterations for a retraining run.

    ``RhoRatio(rho)`` gives ``round((1 + rho) * base_iters)``.  ``FixedRatio``
    needs an explicit ``multiple`` of the base length.
    """
    if base_iters < 1:
        raise ScheduleError(f"base_iters must be >= 1, got {base_iters}")
    if isinstance(mode, RhoRatio):
        factor = 1.0 + mode.rho
    else:
        if multiple is None:
            raise ScheduleError("FixedRatio mixing needs an explicit iteration multiple")
        factor = multiple
    return int(math.floor(factor * base_iters + 0.5))


def lr_at(iteration: int, plan: SchedulePlan) -> float:
    if not 0 <= iteration < plan.total_iters:
        raise ScheduleError(f"iteration {iteration} outside [0, {plan.total_iters})")
    drops = sum(iteration >= m for m in plan.milestone_iters())
    return plan.base_lr * plan.lr_decay ** drops


class MixSampler:
    """Seeded sampler of ``(image_id, pool)`` pairs.

    Every slot is independently labeled with the mix mode's probability,
    then an image is drawn uniformly with replacement from that pool.
    """

    def __init__(self, labeled_ids: Sequence[int], generated_ids: Sequence[int], mix_mode: MixMode, seed: int = 0):
        self.labeled_ids = list(labeled_ids)
        self.generated_ids = list(generated_ids)
        self.mix_mode = mix_mode
        self.seed = int(seed)
        self.counter = 0
        p = mix_mode.p_labeled
        if p > 0 and not self.labeled_ids:
            raise SamplerError("labeled pool is empty but the mix requires labeled images")
        if p < 1 and not self.generated_ids:
            raise SamplerError("generated pool is empty but the mix requires generated images")

    def next_batch(self, batch_size: int) -> list[tuple[int, str]]:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += batch_size
        p = self.mix_mode.p_labeled
        is_labeled = rng.random(batch_size) < p
        u = rng.random(batch_size)
        out = []
        for lab, r in zip(is_labeled, u):
            pool, tag = (self.labeled_ids, LABELED) if lab else (self.generated_ids, GENERATED)
            out.append((pool[int(r * len(pool))], tag))
        return out
