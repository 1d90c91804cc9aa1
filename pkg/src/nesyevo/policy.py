"""Prioritized defeasible rule policies over signed atoms.

A policy is an ordered sequence of rules; position is priority and later
rules override earlier ones.  Every rule concludes the reserved ``head``
atom (positively or negatively) from a conjunction of atom literals, and a
policy decides a context by the highest-priority rule whose body the
context satisfies, abstaining when no rule fires.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

HEAD_NAME = "head"

__all__ = [
    "HEAD_NAME",
    "Decision",
    "Literal",
    "Rule",
    "Policy",
    "PolicyError",
    "PolicyParseError",
    "atom_name",
    "atom_index",
    "parse_policy",
    "render_policy",
    "deduce",
    "deduce_batch",
    "induce",
    "is_homogeneous",
    "enumerate_contexts",
]


class PolicyError(ValueError):
    """A rule or policy violates a structural constraint."""


class PolicyParseError(PolicyError):
    """Policy text rejected by the grammar; carries line/column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class Decision(IntEnum):
    """Outcome of deduction: the concluded head sign, or abstention."""

    POSITIVE = 1
    NEGATIVE = -1
    ABSTAIN = 0


def atom_name(index: int) -> str:
    """Textual name of atom ``index`` (0-based index, 1-based name)."""
    return f"a{index + 1}"


def atom_index(name: str) -> int:
    """Inverse of :func:`atom_name`; raises ``PolicyError`` on bad names."""
    m = re.fullmatch(r"a([1-9][0-9]*)", name)
    if m is None:
        raise PolicyError(f"malformed atom name {name!r}")
    return int(m.group(1)) - 1


@dataclass(frozen=True)
class Literal:
    """A signed atom occurrence, e.g. ``a3`` or ``-a3``."""

    atom: int
    positive: bool

    def __str__(self) -> str:
        prefix = "" if self.positive else "-"
        return prefix + atom_name(self.atom)


@dataclass(frozen=True)
class Rule:
    """A defeasible rule ``lit, ..., lit implies [-]head``."""

    body: tuple[Literal, ...]
    head_positive: bool

    def __post_init__(self):
        if not self.body:
            raise PolicyError("rule body must be nonempty")
        atoms = [lit.atom for lit in self.body]
        if len(set(atoms)) != len(atoms):
            raise PolicyError("atom repeated in rule body")

    @property
    def head(self) -> Decision:
        return Decision.POSITIVE if self.head_positive else Decision.NEGATIVE

    def fires(self, context: Sequence[bool]) -> bool:
        return all(context[lit.atom] == lit.positive for lit in self.body)

    def __str__(self) -> str:
        head = HEAD_NAME if self.head_positive else "-" + HEAD_NAME
        return ", ".join(str(lit) for lit in self.body) + " implies " + head


@dataclass(frozen=True)
class Policy:
    """Ordered rules over atoms ``a1..a<n_atoms>``; later rules win."""

    n_atoms: int
    rules: tuple[Rule, ...] = ()

    def __post_init__(self):
        if self.n_atoms < 1:
            raise PolicyError("n_atoms must be positive")
        for rule in self.rules:
            for lit in rule.body:
                if not 0 <= lit.atom < self.n_atoms:
                    raise PolicyError(
                        f"rule {rule} references {atom_name(lit.atom)} "
                        f"outside a1..{atom_name(self.n_atoms - 1)}"
                    )

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def latest_rule(self) -> Rule | None:
        return self.rules[-1] if self.rules else None

    def to_text(self) -> str:
        return render_policy(self)


_RULE_RE = re.compile(
    r"^\s*(?P<body>\S.*?)\s+implies\s+(?P<head>-?\w+)\s*$"
)


def parse_policy(text: str, n_atoms: int) -> Policy:
    """Parse newline-separated rules, first line = lowest priority.

    Grammar per line: ``lit(, lit)* implies [-]head`` with literals
    ``a<k>`` or ``-a<k>``.  Round-trips exactly with :func:`render_policy`.
    """
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        m = _RULE_RE.match(raw)
        if m is None:
            col = len(raw) - len(raw.lstrip()) + 1
            raise PolicyParseError("expected 'lit(, lit)* implies [-]head'", lineno, col)
        head_tok = m.group("head")
        head_positive = not head_tok.startswith("-")
        head_atom = head_tok.lstrip("-")
        if head_atom != HEAD_NAME:
            raise PolicyParseError(
                f"rule head must be {HEAD_NAME!r} or -{HEAD_NAME!r}, got {head_tok!r}",
                lineno,
                m.start("head") + 1,
            )
        body = []
        seen = set()
        for tok in m.group("body").split(","):
            tok = tok.strip()
            col = raw.find(tok) + 1
            if not tok:
                raise PolicyParseError("empty literal", lineno, col)
            positive = not tok.startswith("-")
            name = tok.lstrip("-")
            try:
                atom = atom_index(name)
            except PolicyError:
                raise PolicyParseError(f"malformed atom name {name!r}", lineno, col) from None
            if atom >= n_atoms:
                raise PolicyParseError(
                    f"unknown atom {name!r} (universe is a1..a{n_atoms})", lineno, col
                )
            if atom in seen:
                raise PolicyParseError(f"atom {name!r} repeated in body", lineno, col)
            seen.add(atom)
            body.append(Literal(atom, positive))
        rules.append(Rule(tuple(body), head_positive))
    return Policy(n_atoms, tuple(rules))


def render_policy(policy: Policy) -> str:
    """Canonical text form; one rule per line, lowest priority first."""
    return "\n".join(str(rule) for rule in policy.rules)


def deduce(policy: Policy, context: Sequence[bool]) -> Decision:
    """Decision of the highest-priority rule fired by ``context``."""
    for rule in reversed(policy.rules):
        if rule.fires(context):
            return rule.head
    return Decision.ABSTAIN


def deduce_batch(policy: Policy, contexts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`deduce` over a (m, n_atoms) boolean matrix.

    Returns an int8 vector of Decision values (+1 / -1 / 0).
    """
    contexts = np.asarray(contexts, dtype=bool)
    m = contexts.shape[0]
    out = np.zeros(m, dtype=np.int8)
    undecided = np.ones(m, dtype=bool)
    for rule in reversed(policy.rules):
        if not undecided.any():
            break
        fired = undecided.copy()
        for lit in rule.body:
            np.logical_and(fired, contexts[:, lit.atom] == lit.positive, out=fired)
        out[fired] = int(rule.head)
        undecided &= ~fired
    return out


def induce(policy: Policy, rule: Rule) -> Policy:
    """New policy with ``rule`` appended at highest priority.

    The input policy is unchanged, so ancestors can be shared freely.
    """
    for lit in rule.body:
        if not 0 <= lit.atom < policy.n_atoms:
            raise PolicyError(f"rule references atom outside the universe: {rule}")
    return Policy(policy.n_atoms, policy.rules + (rule,))


def is_homogeneous(rule: Rule) -> bool:
    """True iff every body literal carries the same sign."""
    first = rule.body[0].positive
    return all(lit.positive == first for lit in rule.body)


def enumerate_contexts(n_atoms: int) -> np.ndarray:
    """All 2**n total contexts as a (2**n, n) boolean matrix.

    Row order: integer order with atom 0 as the most significant bit.
    """
    grids = np.indices((2,) * n_atoms).reshape(n_atoms, -1).T
    return grids.astype(bool)


def context_from_ints(bits: Iterable[int]) -> tuple[bool, ...]:
    """Convenience: build a context tuple from 0/1 values."""
    return tuple(bool(b) for b in bits)
