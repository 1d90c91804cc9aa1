"""Propositional formulas in negation normal form, and abduction.

Abduction turns a policy plus a target decision into a formula over the
atom variables whose satisfying total contexts are exactly those on which
the policy deduces that decision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .policy import Decision, Policy

__all__ = [
    "Formula",
    "Const",
    "Lit",
    "And",
    "Or",
    "TRUE",
    "FALSE",
    "evaluate",
    "abduce",
    "abstain_formula",
]


class Formula:
    """Base class; concrete nodes are Const, Lit, And, Or (NNF only)."""

    __slots__ = ()


@dataclass(frozen=True)
class Const(Formula):
    value: bool

    def __str__(self) -> str:
        return "true" if self.value else "false"


TRUE = Const(True)
FALSE = Const(False)


@dataclass(frozen=True)
class Lit(Formula):
    """Atom variable required positive or negative."""

    var: int
    positive: bool

    def __str__(self) -> str:
        return f"a{self.var + 1}" if self.positive else f"-a{self.var + 1}"


@dataclass(frozen=True)
class And(Formula):
    children: tuple[Formula, ...]

    def __str__(self) -> str:
        return "(" + " & ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True)
class Or(Formula):
    children: tuple[Formula, ...]

    def __str__(self) -> str:
        return "(" + " | ".join(str(c) for c in self.children) + ")"


def evaluate(formula: Formula, context: Sequence[bool]) -> bool:
    """Truth value of ``formula`` under a total assignment."""
    if isinstance(formula, Const):
        return formula.value
    if isinstance(formula, Lit):
        return bool(context[formula.var]) == formula.positive
    if isinstance(formula, And):
        return all(evaluate(c, context) for c in formula.children)
    if isinstance(formula, Or):
        return any(evaluate(c, context) for c in formula.children)
    raise TypeError(f"not a formula node: {formula!r}")


def _body_conj(rule) -> Formula:
    return And(tuple(Lit(lit.atom, lit.positive) for lit in rule.body))


def _body_negation(rule) -> Formula:
    # NNF negation of a conjunction of literals.
    return Or(tuple(Lit(lit.atom, not lit.positive) for lit in rule.body))


def abduce(policy: Policy, label: Decision) -> Formula:
    """Formula satisfied by exactly the contexts deduced as ``label``.

    A context is deduced as ``label`` iff some rule with that head fires
    while no higher-priority rule with the opposite head fires.  The
    returned formula is that condition, one disjunct per candidate rule,
    in negation normal form; FALSE when no rule carries the label.
    """
    if label == Decision.ABSTAIN:
        raise ValueError("abduce requires a non-abstain label")
    disjuncts = []
    for i, rule in enumerate(policy.rules):
        if rule.head != label:
            continue
        blockers = [
            _body_negation(higher)
            for higher in policy.rules[i + 1 :]
            if higher.head != label
        ]
        disjuncts.append(And((_body_conj(rule), *blockers)))
    if not disjuncts:
        return FALSE
    return Or(tuple(disjuncts))


def abstain_formula(policy: Policy) -> Formula:
    """Formula for the contexts on which no rule fires at all."""
    if not policy.rules:
        return TRUE
    return And(tuple(_body_negation(rule) for rule in policy.rules))
