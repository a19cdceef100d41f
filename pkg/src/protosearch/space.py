"""Training-protocol search space: domains, candidates, enumeration and encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence, Union

import numpy as np

Value = Union[str, bool, Fraction]

FIELD_ORDER = (
    "alpha_real",
    "color_format",
    "keep_aspect_ratio",
    "data_augmentation",
    "character_set",
    "optimizer",
    "learning_rate",
    "lr_schedule",
)

# Short keys used in the canonical string form.
ENCODING_KEYS = {
    "alpha_real": "alpha_real",
    "color_format": "color",
    "keep_aspect_ratio": "keep_ar",
    "data_augmentation": "aug",
    "character_set": "charset",
    "optimizer": "opt",
    "learning_rate": "lr",
    "lr_schedule": "sched",
}
_DECODING_KEYS = {v: k for k, v in ENCODING_KEYS.items()}


class SpaceError(ValueError):
    """Raised for malformed search-space definitions or candidate payloads."""


def to_fraction(x: Any) -> Fraction:
    """Exact rational from an int, Fraction, decimal string or float (via its repr)."""
    if isinstance(x, bool):
        raise SpaceError(f"expected a number, got {x!r}")
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    if isinstance(x, str):
        try:
            return Fraction(x.strip())
        except ValueError as exc:
            raise SpaceError(f"not a number: {x!r}") from exc
    raise SpaceError(f"expected a number, got {x!r}")


def token_of(value: Value) -> str:
    """Render a choice value as its canonical token."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Fraction):
        return f"{float(value):.4f}"
    return str(value)


def _check_unique(name: str, values: Sequence[Value]) -> None:
    tokens = [token_of(v) for v in values]
    if len(set(tokens)) != len(tokens):
        raise SpaceError(f"{name}: duplicate choice tokens {tokens}")
    if not values:
        raise SpaceError(f"{name}: empty domain")


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    kind = "categorical"

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        _check_unique(self.name, self.choices)

    def values(self, assignment: Mapping[str, Value] | None = None) -> tuple:
        return self.choices

    def all_values(self) -> tuple:
        return self.choices

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "choices": list(self.choices)}


@dataclass(frozen=True)
class SteppedRange:
    """Grid ``low, low+step, ..., high`` with both endpoints included."""

    name: str
    low: Fraction
    high: Fraction
    step: Fraction
    choices: tuple = field(init=False, repr=False)

    kind = "stepped-range"

    def __post_init__(self):
        low, high, step = (to_fraction(v) for v in (self.low, self.high, self.step))
        if step <= 0 or high < low:
            raise SpaceError(f"{self.name}: bad range ({low}, {high}, {step})")
        n = (high - low) // step + 1
        grid = tuple(low + i * step for i in range(int(n)))
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "choices", grid)
        _check_unique(self.name, grid)

    def values(self, assignment: Mapping[str, Value] | None = None) -> tuple:
        return self.choices

    def all_values(self) -> tuple:
        return self.choices

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "range": [str(self.low), str(self.high), str(self.step)],
        }


@dataclass(frozen=True)
class Conditional:
    """Domain whose choice list depends on an earlier hyperparameter's value."""

    name: str
    condition: str
    branches: tuple  # ((condition value, (choice, ...)), ...)

    kind = "conditional"

    def __post_init__(self):
        branches = tuple((k, tuple(v)) for k, v in self.branches)
        object.__setattr__(self, "branches", branches)
        for key, choices in branches:
            _check_unique(f"{self.name}[{token_of(key)}]", choices)

    def branch(self, condition_value: Value) -> tuple:
        for key, choices in self.branches:
            if key == condition_value and type(key) is type(condition_value):
                return choices
        raise SpaceError(
            f"{self.name}: no branch for {self.condition}={token_of(condition_value)}"
        )

    def values(self, assignment: Mapping[str, Value] | None = None) -> tuple:
        if assignment is None or self.condition not in assignment:
            raise SpaceError(f"{self.name} needs a value for {self.condition}")
        return self.branch(assignment[self.condition])

    def all_values(self) -> tuple:
        seen: dict[str, Value] = {}
        for _, choices in self.branches:
            for c in choices:
                seen.setdefault(token_of(c), c)
        return tuple(seen.values())

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "condition": self.condition,
            "branches": {token_of(k): list(v) for k, v in self.branches},
        }


Domain = Union[Categorical, SteppedRange, Conditional]


class ProtocolCandidate:
    """One immutable assignment of every hyperparameter in a space.

    Fields are reachable by attribute (``c.optimizer``) or item (``c["optimizer"]``).
    Equality and hashing follow the ordered (name, value) pairs.
    """

    __slots__ = ("_items", "_index")

    def __init__(self, items: Mapping[str, Value] | Sequence[tuple[str, Value]]):
        pairs = tuple(items.items()) if isinstance(items, Mapping) else tuple(items)
        object.__setattr__(self, "_items", pairs)
        object.__setattr__(self, "_index", dict(pairs))

    def __getattr__(self, name: str) -> Value:
        try:
            return self._index[name]
        except KeyError:
            raise AttributeError(name) from None

    def __setattr__(self, name, value):
        raise AttributeError("ProtocolCandidate is immutable")

    def __reduce__(self):
        return (ProtocolCandidate, (self._items,))

    def __getitem__(self, name: str) -> Value:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProtocolCandidate):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def _key(self):
        return tuple((k, type(v).__name__, v) for k, v in self._items)

    def __repr__(self) -> str:
        return f"ProtocolCandidate({canonical_encode(self)!r})"

    def items(self) -> tuple[tuple[str, Value], ...]:
        return self._items

    def as_dict(self) -> dict[str, Value]:
        return dict(self._items)

    def replace(self, **changes: Value) -> "ProtocolCandidate":
        unknown = set(changes) - set(self._index)
        if unknown:
            raise KeyError(f"unknown fields: {sorted(unknown)}")
        return ProtocolCandidate([(k, changes.get(k, v)) for k, v in self._items])


@dataclass(frozen=True)
class SearchSpace:
    domains: tuple

    def __post_init__(self):
        domains = tuple(self.domains)
        object.__setattr__(self, "domains", domains)
        names = [d.name for d in domains]
        if len(set(names)) != len(names):
            raise SpaceError(f"duplicate hyperparameter names: {names}")
        for i, d in enumerate(domains):
            if isinstance(d, Conditional):
                if d.condition not in names[:i]:
                    raise SpaceError(
                        f"{d.name}: condition {d.condition!r} must precede it"
                    )
                cond = domains[names.index(d.condition)]
                if isinstance(cond, Conditional):
                    raise SpaceError(f"{d.name}: nested conditions are not supported")
                for v in cond.all_values():
                    d.branch(v)  # raises if a condition value lacks a branch

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def __getitem__(self, name: str) -> Domain:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def cardinality(self) -> int:
        return sum(1 for _ in _walk(self.domains, {}))

    def to_json(self) -> dict:
        return {"hyperparameters": [d.to_json() for d in self.domains]}


ADADELTA_LRS = ("2", "1.5", "1", "0.5")
ADAM_LRS = ("1e-3", "5e-4", "2e-4", "1e-4")
SCHEDULES = ("constant", "ms-0.6", "ms-0.6-0.9", "ms-0.3-0.6-0.9")


def default_space() -> SearchSpace:
    """The 8-hyperparameter space of 9,216 training protocols."""
    return SearchSpace(
        (
            SteppedRange("alpha_real", Fraction(0), Fraction(1, 2), Fraction(1, 16)),
            Categorical("color_format", ("gray", "rgb")),
            Categorical("keep_aspect_ratio", (True, False)),
            Categorical("data_augmentation", (True, False)),
            Categorical("character_set", ("DL", "DLP", "DLU", "DLUP")),
            Categorical("optimizer", ("adadelta", "adam")),
            Conditional(
                "learning_rate",
                "optimizer",
                (("adadelta", ADADELTA_LRS), ("adam", ADAM_LRS)),
            ),
            Categorical("lr_schedule", SCHEDULES),
        )
    )


def _domain_from_json(obj: Mapping) -> Domain:
    try:
        name, kind = obj["name"], obj["kind"]
    except KeyError as exc:
        raise SpaceError(f"hyperparameter entry missing {exc.args[0]!r}") from None
    if kind == "categorical":
        return Categorical(name, tuple(obj["choices"]))
    if kind == "stepped-range":
        low, high, step = obj["range"]
        return SteppedRange(name, to_fraction(low), to_fraction(high), to_fraction(step))
    if kind == "conditional":
        branches = obj["branches"]
        if isinstance(branches, Mapping):
            branches = list(branches.items())
        return Conditional(name, obj["condition"], tuple((k, tuple(v)) for k, v in branches))
    raise SpaceError(f"{name}: unknown kind {kind!r}")


def space_from_json(obj: Mapping) -> SearchSpace:
    """Build a space from the override document ``{"hyperparameters": [...]}``.

    Conditional branch keys arrive as JSON object keys (strings); they are
    matched back to the condition domain's values through their tokens.
    """
    if "hyperparameters" not in obj:
        raise SpaceError("space file needs a 'hyperparameters' list")
    domains: list[Domain] = []
    for entry in obj["hyperparameters"]:
        d = _domain_from_json(entry)
        if isinstance(d, Conditional):
            prior = {x.name: x for x in domains}
            if d.condition not in prior:
                raise SpaceError(f"{d.name}: condition {d.condition!r} must precede it")
            by_token = {token_of(v): v for v in prior[d.condition].all_values()}
            branches = []
            for key, choices in d.branches:
                k = token_of(key)
                if k not in by_token:
                    raise SpaceError(f"{d.name}: branch {k!r} is not a value of {d.condition}")
                branches.append((by_token[k], choices))
            d = Conditional(d.name, d.condition, tuple(branches))
        domains.append(d)
    return SearchSpace(tuple(domains))


def load_space(path: str | Path | None) -> SearchSpace:
    if path is None:
        return default_space()
    with open(path) as f:
        try:
            return space_from_json(json.load(f))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpaceError):
                raise
            raise SpaceError(f"{path}: {exc}") from exc


def _walk(domains: Sequence[Domain], partial: dict) -> Iterator[dict]:
    if not domains:
        yield dict(partial)
        return
    d, rest = domains[0], domains[1:]
    for v in d.values(partial):
        partial[d.name] = v
        yield from _walk(rest, partial)
    partial.pop(d.name, None)


def enumerate_space(space: SearchSpace) -> list[ProtocolCandidate]:
    """All candidates, lexicographic over field order and each domain's choice order."""
    names = space.names
    return [ProtocolCandidate([(n, a[n]) for n in names]) for a in _walk(space.domains, {})]


def _in(value: Value, choices: Sequence[Value]) -> bool:
    return any(value == c and type(value) is type(c) for c in choices)


def validate(c: ProtocolCandidate, space: SearchSpace) -> list[str]:
    """Return the list of violations; empty means the candidate is valid."""
    problems = []
    extra = [n for n in c if n not in space]
    if extra:
        problems.append(f"unknown fields: {extra}")
    for d in space.domains:
        if d.name not in c:
            problems.append(f"{d.name}: missing")
            continue
        value = c[d.name]
        if isinstance(d, Conditional):
            if d.condition not in c:
                continue
            try:
                choices = d.branch(c[d.condition])
            except SpaceError:
                continue  # reported against the condition field itself
            if not _in(value, choices):
                problems.append(
                    f"{d.name}: {token_of(value)} outside the "
                    f"{d.condition}={token_of(c[d.condition])} branch {[token_of(x) for x in choices]}"
                )
        elif not _in(value, d.choices):
            if isinstance(d, SteppedRange):
                problems.append(
                    f"{d.name}: {value!s} not on the grid "
                    f"[{d.low}, {d.high}] step {d.step}"
                )
            else:
                problems.append(f"{d.name}: {token_of(value)} not in {[token_of(x) for x in d.choices]}")
    return problems


def is_valid(c: ProtocolCandidate, space: SearchSpace) -> bool:
    return not validate(c, space)


def draw_choice(choices: Sequence[Value], rng: np.random.Generator) -> Value:
    return choices[int(rng.integers(len(choices)))]


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> ProtocolCandidate:
    """Draw each hyperparameter uniformly in field order; conditional domains use the drawn branch."""
    assignment: dict[str, Value] = {}
    for d in space.domains:
        assignment[d.name] = draw_choice(d.values(assignment), rng)
    return ProtocolCandidate([(n, assignment[n]) for n in space.names])


def repair(c: ProtocolCandidate, space: SearchSpace, rng: np.random.Generator) -> ProtocolCandidate:
    """Resample any conditional field whose value left its branch."""
    values = c.as_dict()
    changed = False
    for d in space.domains:
        if isinstance(d, Conditional):
            branch = d.branch(values[d.condition])
            if not _in(values[d.name], branch):
                values[d.name] = draw_choice(branch, rng)
                changed = True
    return ProtocolCandidate([(n, values[n]) for n in c]) if changed else c


def canonical_encode(c: ProtocolCandidate) -> str:
    return ";".join(f"{ENCODING_KEYS.get(k, k)}={token_of(v)}" for k, v in c.items())


def canonical_decode(text: str, space: SearchSpace | None = None) -> ProtocolCandidate:
    """Inverse of :func:`canonical_encode`; tokens are resolved against ``space``."""
    space = space or default_space()
    pairs = []
    for part in text.strip().split(";"):
        key, sep, tok = part.partition("=")
        if not sep:
            raise SpaceError(f"malformed field {part!r}")
        name = _DECODING_KEYS.get(key, key)
        if name not in space:
            raise SpaceError(f"unknown field {key!r}")
        lookup = {token_of(v): v for v in space[name].all_values()}
        if tok not in lookup:
            raise SpaceError(f"{name}: unknown token {tok!r}")
        pairs.append((name, lookup[tok]))
    return ProtocolCandidate(pairs)


def numeric_value(value: Value) -> float:
    """Runtime number for a rational or a numeric choice token such as ``"5e-4"``."""
    return float(value)


def candidate_to_json(c: ProtocolCandidate) -> dict[str, Any]:
    """Wire form: rationals and learning-rate tokens become JSON numbers."""
    out: dict[str, Any] = {}
    for k, v in c.items():
        if isinstance(v, Fraction) or k == "learning_rate":
            out[k] = numeric_value(v)
        else:
            out[k] = v
    return out


def candidate_from_json(obj: Mapping[str, Any], space: SearchSpace | None = None) -> ProtocolCandidate:
    """Parse the wire form, matching numbers back to domain choices exactly."""
    space = space or default_space()
    missing = [n for n in space.names if n not in obj]
    if missing:
        raise SpaceError(f"candidate missing fields {missing}")
    pairs = []
    for d in space.domains:
        raw = obj[d.name]
        match = None
        for choice in d.all_values():
            if isinstance(choice, bool) or isinstance(raw, bool):
                if choice is raw:
                    match = choice
            elif isinstance(choice, Fraction) or (
                isinstance(raw, (int, float)) and _is_number_token(choice)
            ):
                try:
                    if to_fraction(raw) == to_fraction(choice):
                        match = choice
                except SpaceError:
                    pass
            elif raw == choice:
                match = choice
            if match is not None:
                break
        if match is None:
            if isinstance(d, SteppedRange) and isinstance(raw, (int, float, str)) and not isinstance(raw, bool):
                match = to_fraction(raw)  # off-grid, left for validate() to report
            else:
                raise SpaceError(f"{d.name}: {raw!r} is not a known choice")
        pairs.append((d.name, match))
    return ProtocolCandidate(pairs)


def _is_number_token(x: Value) -> bool:
    if not isinstance(x, str):
        return False
    try:
        float(x)
    except ValueError:
        return False
    return True


# Reference protocols. The hand-designed baseline samples from the union of real and
# synthetic data (real share about 0.0003); its nearest grid point is 0.
BASELINE = ProtocolCandidate(
    [
        ("alpha_real", Fraction(0)),
        ("color_format", "gray"),
        ("keep_aspect_ratio", False),
        ("data_augmentation", False),
        ("character_set", "DL"),
        ("optimizer", "adadelta"),
        ("learning_rate", "1"),
        ("lr_schedule", "constant"),
    ]
)
SEARCHED = ProtocolCandidate(
    [
        ("alpha_real", Fraction(1, 8)),
        ("color_format", "gray"),
        ("keep_aspect_ratio", False),
        ("data_augmentation", True),
        ("character_set", "DL"),
        ("optimizer", "adam"),
        ("learning_rate", "5e-4"),
        ("lr_schedule", "ms-0.6"),
    ]
)
PRESETS = {"baseline": BASELINE, "searched": SEARCHED}


__all__ = [
    "FIELD_ORDER",
    "Categorical",
    "SteppedRange",
    "Conditional",
    "ProtocolCandidate",
    "SearchSpace",
    "SpaceError",
    "default_space",
    "space_from_json",
    "load_space",
    "enumerate_space",
    "validate",
    "is_valid",
    "sample_uniform",
    "repair",
    "canonical_encode",
    "canonical_decode",
    "candidate_to_json",
    "candidate_from_json",
    "token_of",
    "PRESETS",
    "BASELINE",
    "SEARCHED",
]
