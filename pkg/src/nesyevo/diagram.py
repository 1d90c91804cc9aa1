"""Reduced ordered binary decision diagrams with a fixed variable order.

Formulas compile into canonical diagrams: reduction removes redundant
tests and duplicate nodes, so logically equivalent formulas yield
structurally identical node tables.  Variable order is the natural atom
order a1..an; no reordering is attempted (the universes here are small).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .formula import And, Const, Formula, Lit, Or

__all__ = ["Diagram", "compile_formula", "FALSE_ID", "TRUE_ID"]

FALSE_ID = 0
TRUE_ID = 1


@dataclass(frozen=True)
class Diagram:
    """Canonical diagram: node ids 0/1 are the False/True terminals.

    Decision nodes start at id 2 and are stored in post order (both
    children of a node precede it), so the table doubles as an evaluation
    tape.  The root of a constant function is a terminal id.
    """

    n_vars: int
    nodes: tuple[tuple[int, int, int], ...]  # (var, low, high)
    root: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def evaluate(self, context: Sequence[bool]) -> bool:
        node = self.root
        while node > TRUE_ID:
            var, low, high = self.nodes[node - 2]
            node = high if context[var] else low
        return node == TRUE_ID

    def model_count(self) -> int:
        """Number of satisfying total assignments over all n_vars atoms."""
        level = lambda node: self.n_vars if node <= TRUE_ID else self.nodes[node - 2][0]
        counts = {FALSE_ID: 0, TRUE_ID: 1}
        for idx, (var, low, high) in enumerate(self.nodes):
            below = (
                counts[low] << (level(low) - var - 1)
            ) + (counts[high] << (level(high) - var - 1))
            counts[idx + 2] = below
        return counts[self.root] << level(self.root)

    def dump_lines(self) -> list[str]:
        """Debug dump, one decision node per line: ``id var low high``."""
        return [
            f"{idx + 2} {var} {low} {high}"
            for idx, (var, low, high) in enumerate(self.nodes)
        ]


class _Builder:
    """Hash-consing node store with memoized binary apply."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.vars: list[int] = []
        self.lows: list[int] = []
        self.highs: list[int] = []
        self._unique: dict[tuple[int, int, int], int] = {}
        self._apply_memo: dict[tuple[str, int, int], int] = {}

    def var_of(self, node: int) -> int:
        return self.n_vars if node <= TRUE_ID else self.vars[node - 2]

    def mk(self, var: int, low: int, high: int) -> int:
        if low == high:
            return low
        key = (var, low, high)
        node = self._unique.get(key)
        if node is None:
            node = len(self.vars) + 2
            self._unique[key] = node
            self.vars.append(var)
            self.lows.append(low)
            self.highs.append(high)
        return node

    def literal(self, var: int, positive: bool) -> int:
        if positive:
            return self.mk(var, FALSE_ID, TRUE_ID)
        return self.mk(var, TRUE_ID, FALSE_ID)

    def apply(self, op: str, u: int, v: int) -> int:
        if op == "and":
            if u == FALSE_ID or v == FALSE_ID:
                return FALSE_ID
            if u == TRUE_ID:
                return v
            if v == TRUE_ID:
                return u
        else:
            if u == TRUE_ID or v == TRUE_ID:
                return TRUE_ID
            if u == FALSE_ID:
                return v
            if v == FALSE_ID:
                return u
        if u == v:
            return u
        if u > v:  # ops are commutative; normalize the memo key
            u, v = v, u
        key = (op, u, v)
        result = self._apply_memo.get(key)
        if result is not None:
            return result
        var = min(self.var_of(u), self.var_of(v))
        u_low, u_high = self._cofactors(u, var)
        v_low, v_high = self._cofactors(v, var)
        result = self.mk(
            var,
            self.apply(op, u_low, v_low),
            self.apply(op, u_high, v_high),
        )
        self._apply_memo[key] = result
        return result

    def _cofactors(self, node: int, var: int) -> tuple[int, int]:
        if node <= TRUE_ID or self.vars[node - 2] != var:
            return node, node
        return self.lows[node - 2], self.highs[node - 2]

    def build(self, formula: Formula) -> int:
        if isinstance(formula, Const):
            return TRUE_ID if formula.value else FALSE_ID
        if isinstance(formula, Lit):
            return self.literal(formula.var, formula.positive)
        if isinstance(formula, And):
            node = TRUE_ID
            for child in formula.children:
                node = self.apply("and", node, self.build(child))
                if node == FALSE_ID:
                    break
            return node
        if isinstance(formula, Or):
            node = FALSE_ID
            for child in formula.children:
                node = self.apply("or", node, self.build(child))
                if node == TRUE_ID:
                    break
            return node
        raise TypeError(f"not a formula node: {formula!r}")

    def extract(self, root: int) -> Diagram:
        """Renumber the subgraph under ``root`` into canonical post order."""
        if root <= TRUE_ID:
            return Diagram(self.n_vars, (), root)
        remap = {FALSE_ID: FALSE_ID, TRUE_ID: TRUE_ID}
        nodes: list[tuple[int, int, int]] = []
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node in remap:
                continue
            lo, hi = self.lows[node - 2], self.highs[node - 2]
            if expanded:
                remap[node] = len(nodes) + 2
                nodes.append((self.vars[node - 2], remap[lo], remap[hi]))
            else:
                stack.append((node, True))
                stack.append((hi, False))
                stack.append((lo, False))
        return Diagram(self.n_vars, tuple(nodes), remap[root])


def compile_formula(formula: Formula, n_vars: int) -> Diagram:
    """Compile an NNF formula over atoms a1..a<n_vars> into a Diagram."""
    builder = _Builder(n_vars)
    return builder.extract(builder.build(formula))
