"""What a trainer does with a protocol: lr schedule, batch mixing, labels, metric."""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .space import ProtocolCandidate, to_fraction

DECAY_RATE = Fraction(1, 10)
REAL, SYNTH = "real", "synth"

_DIGITS = frozenset(string.digits)
_LOWER = frozenset(string.ascii_lowercase)
_UPPER = frozenset(string.ascii_uppercase)
_PUNCT = frozenset(string.punctuation)
_FOLD = str.maketrans(string.ascii_uppercase, string.ascii_lowercase)


@dataclass(frozen=True)
class LRScheduleSpec:
    """Constant or multi-step schedule; multistep decays by ``decay_rate`` at each milestone."""

    kind: str
    initial_lr: Fraction
    total_iterations: int
    milestone_fractions: tuple[Fraction, ...] = ()
    decay_rate: Fraction = DECAY_RATE

    def __post_init__(self):
        object.__setattr__(self, "initial_lr", to_fraction(self.initial_lr))
        object.__setattr__(self, "decay_rate", to_fraction(self.decay_rate))
        fracs = tuple(to_fraction(f) for f in self.milestone_fractions)
        object.__setattr__(self, "milestone_fractions", fracs)
        if self.kind not in ("constant", "multistep"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.initial_lr <= 0 or self.total_iterations <= 0:
            raise ValueError("initial_lr and total_iterations must be positive")
        if self.kind == "constant" and fracs:
            raise ValueError("constant schedule takes no milestones")
        if self.kind == "multistep":
            if not fracs:
                raise ValueError("multistep schedule needs milestones")
            if any(not 0 < f < 1 for f in fracs) or any(a >= b for a, b in zip(fracs, fracs[1:])):
                raise ValueError(f"milestones must be strictly increasing in (0, 1): {fracs}")

    @property
    def milestones(self) -> tuple[int, ...]:
        """Iteration indices at which decay takes effect: floor(fraction * total)."""
        return tuple(math.floor(f * self.total_iterations) for f in self.milestone_fractions)

    @property
    def token(self) -> str:
        if self.kind == "constant":
            return "constant"
        return "ms-" + "-".join(_fmt_fraction(f) for f in self.milestone_fractions)


def _fmt_fraction(f: Fraction) -> str:
    return format(float(f), "g")


def parse_schedule(token: str, initial_lr, total_iterations: int) -> LRScheduleSpec:
    """``constant`` or ``ms-<f1>-<f2>...``, e.g. ``ms-0.6-0.9``."""
    if token == "constant":
        return LRScheduleSpec("constant", initial_lr, total_iterations)
    if not token.startswith("ms-"):
        raise ValueError(f"unknown schedule token {token!r}")
    try:
        fracs = tuple(Fraction(p) for p in token[3:].split("-"))
    except ValueError:
        raise ValueError(f"bad milestone list in {token!r}") from None
    return LRScheduleSpec("multistep", initial_lr, total_iterations, fracs)


def schedule_for(candidate: ProtocolCandidate, total_iterations: int) -> LRScheduleSpec:
    return parse_schedule(candidate.lr_schedule, candidate.learning_rate, total_iterations)


def lr_at(schedule: LRScheduleSpec, iteration: int) -> Fraction:
    if not 0 <= iteration < schedule.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iterations})")
    passed = sum(1 for m in schedule.milestones if m <= iteration)
    return schedule.initial_lr * schedule.decay_rate**passed


def lr_table(schedule: LRScheduleSpec) -> str:
    """CSV ``iteration,lr`` with one row per iteration."""
    lines = ["iteration,lr"]
    for it in range(schedule.total_iterations):
        lines.append(f"{it},{float(lr_at(schedule, it))!r}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SamplerPlan:
    alpha_real: Fraction
    batch_size: int
    n_real_per_batch: int
    n_synth_per_batch: int


def batch_composition(alpha_real, batch_size: int) -> tuple[int, int]:
    """Real/synthetic split of one batch; the real count is rounded half-to-even."""
    alpha = to_fraction(alpha_real)
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha_real {alpha} outside [0, 1]")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    n_real = round(alpha * batch_size)  # Fraction.__round__ rounds half to even
    return n_real, batch_size - n_real


def sampler_plan(alpha_real, batch_size: int) -> SamplerPlan:
    n_real, n_synth = batch_composition(alpha_real, batch_size)
    return SamplerPlan(to_fraction(alpha_real), batch_size, n_real, n_synth)


def draw_batch(plan: SamplerPlan, real_pool_size: int, synth_pool_size: int,
               rng: np.random.Generator) -> list[tuple[str, int]]:
    """Indices for one batch, shuffled. Repeats within a batch only when a pool is too small."""
    batch = []
    for tag, count, pool in ((REAL, plan.n_real_per_batch, real_pool_size),
                             (SYNTH, plan.n_synth_per_batch, synth_pool_size)):
        if count == 0:
            continue
        if pool <= 0:
            raise ValueError(f"{tag} pool is empty but the plan needs {count} samples")
        idx = rng.choice(pool, size=count, replace=pool < count)
        batch.extend((tag, int(i)) for i in idx)
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


@dataclass(frozen=True)
class CharacterSetPolicy:
    uppercase: bool
    punctuation: bool
    digits: bool = True
    lowercase: bool = True

    @classmethod
    def from_token(cls, token: str) -> "CharacterSetPolicy":
        try:
            return CHARSETS[token]
        except KeyError:
            raise ValueError(f"unknown character set {token!r}") from None

    @property
    def token(self) -> str:
        return "DL" + ("U" if self.uppercase else "") + ("P" if self.punctuation else "")

    def alphabet(self) -> frozenset[str]:
        chars = _DIGITS | _LOWER
        if self.uppercase:
            chars |= _UPPER
        if self.punctuation:
            chars |= _PUNCT
        return chars


CHARSETS = {
    "DL": CharacterSetPolicy(uppercase=False, punctuation=False),
    "DLP": CharacterSetPolicy(uppercase=False, punctuation=True),
    "DLU": CharacterSetPolicy(uppercase=True, punctuation=False),
    "DLUP": CharacterSetPolicy(uppercase=True, punctuation=True),
}


def process_label(raw: str, policy: CharacterSetPolicy | str) -> str:
    """Fit a ground-truth label to the decoder alphabet instead of discarding the sample."""
    if isinstance(policy, str):
        policy = CharacterSetPolicy.from_token(policy)
    out = []
    for ch in raw:
        if ch in _DIGITS or ch in _LOWER:
            out.append(ch)
        elif ch in _UPPER:
            out.append(ch if policy.uppercase else ch.lower())
        elif ch in _PUNCT:
            if policy.punctuation:
                out.append(ch)
    return "".join(out)


def normalize_for_eval(text: str) -> str:
    """Case-insensitive alphanumeric form; only ASCII letters are folded."""
    folded = text.translate(_FOLD)
    return "".join(ch for ch in folded if ch in _DIGITS or ch in _LOWER)


def exact_match_accuracy(pairs: Iterable[tuple[str, str]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("accuracy is undefined for an empty set")
    hits = sum(normalize_for_eval(p) == normalize_for_eval(g) for p, g in pairs)
    return hits / len(pairs)


def accuracy_from_sequences(predictions: Sequence[str], ground_truth: Sequence[str]) -> float:
    if len(predictions) != len(ground_truth):
        raise ValueError("prediction and ground-truth lists differ in length")
    return exact_match_accuracy(zip(predictions, ground_truth))
