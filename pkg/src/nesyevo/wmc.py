"""Weighted model counting over compiled diagrams, with exact gradients.

Atom ``i`` is positive with probability ``p[i]`` independently of the
others; the weighted model count of a diagram is then the probability mass
of its satisfying assignments.  Because positive and negative weights sum
to one per atom, variables skipped along a diagram path contribute a
factor of one and a single bottom-up pass suffices.  The count is
multilinear in ``p``, so the reverse (adjoint) pass yields exact partial
derivatives.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .diagram import Diagram, FALSE_ID, TRUE_ID, compile_formula
from .formula import abduce
from .policy import Decision, Policy, render_policy

__all__ = [
    "LOG_CLAMP",
    "WmcGraph",
    "semantic_loss",
    "CompilationCache",
    "policy_fingerprint",
]

# Loss clamp for contradictory (zero-count) labels; keeps -log finite.
LOG_CLAMP = 1e-12


class WmcGraph:
    """Evaluation tape over a diagram's nodes, batched over instances.

    The diagram's node table is already in child-before-parent order, so
    forward evaluation walks it once; the backward pass walks it in
    reverse accumulating adjoints.
    """

    def __init__(self, diagram: Diagram):
        self.diagram = diagram
        nodes = diagram.nodes
        self.var = np.fromiter((n[0] for n in nodes), dtype=np.int64, count=len(nodes))
        self.low = np.fromiter((n[1] for n in nodes), dtype=np.int64, count=len(nodes))
        self.high = np.fromiter((n[2] for n in nodes), dtype=np.int64, count=len(nodes))
        self.root = diagram.root
        self.n_vars = diagram.n_vars

    def forward(self, probs: np.ndarray) -> np.ndarray:
        """Weighted model counts for a (batch, n_vars) probability matrix."""
        return self._passes(probs, want_grad=False)[0]

    def forward_backward(self, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Counts and their gradients d(count)/d(probs), batched."""
        return self._passes(probs, want_grad=True)

    def _passes(self, probs: np.ndarray, want_grad: bool):
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        batch = probs.shape[0]
        if probs.shape[1] != self.n_vars:
            raise ValueError(
                f"expected {self.n_vars} atom probabilities, got {probs.shape[1]}"
            )
        k = len(self.var)
        values = np.empty((k + 2, batch))
        values[FALSE_ID] = 0.0
        values[TRUE_ID] = 1.0
        for t in range(k):
            p = probs[:, self.var[t]]
            values[t + 2] = p * values[self.high[t]] + (1.0 - p) * values[self.low[t]]
        wmc = values[self.root].copy()
        if not want_grad:
            return wmc, None
        grad = np.zeros_like(probs)
        if self.root <= TRUE_ID:
            return wmc, grad
        adjoint = np.zeros((k + 2, batch))
        adjoint[self.root] = 1.0
        for t in range(k - 1, -1, -1):
            a = adjoint[t + 2]
            p = probs[:, self.var[t]]
            adjoint[self.high[t]] += a * p
            adjoint[self.low[t]] += a * (1.0 - p)
            grad[:, self.var[t]] += a * (values[self.high[t]] - values[self.low[t]])
        return wmc, grad


def semantic_loss(
    graph: WmcGraph, probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance ``-log(wmc)`` and its gradient w.r.t. the atom probs.

    Counts below ``LOG_CLAMP`` (a label the policy cannot entail) are
    clamped so the loss stays finite; the gradient uses the same clamp.
    """
    wmc, dwmc = graph.forward_backward(probs)
    clamped = np.maximum(wmc, LOG_CLAMP)
    loss = -np.log(clamped)
    grad = -dwmc / clamped[:, None]
    return loss, grad


def policy_fingerprint(policy: Policy) -> int:
    """64-bit content fingerprint of the rendered policy text."""
    digest = hashlib.blake2b(render_policy(policy).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


@dataclass
class CacheStats:
    compilations: int = 0
    hits: int = 0
    instances_evaluated: int = 0


@dataclass
class CompilationCache:
    """Per-organism store of compiled graphs keyed by (policy, label).

    A hit returns the exact graph built on the miss, so cached and fresh
    evaluations are bit-identical.  The rendered policy text is kept with
    each entry and checked on every hit to guard fingerprint collisions.
    """

    _entries: dict = field(default_factory=dict)
    stats: CacheStats = field(default_factory=CacheStats)

    def get_or_compile(self, policy: Policy, label: Decision) -> WmcGraph:
        if label == Decision.ABSTAIN:
            raise ValueError("no abductive graph for the abstain outcome")
        key = (policy_fingerprint(policy), int(label))
        entry = self._entries.get(key)
        text = render_policy(policy)
        if entry is not None:
            cached_text, graph = entry
            if cached_text != text:  # fingerprint collision
                raise RuntimeError("policy fingerprint collision in cache")
            self.stats.hits += 1
            return graph
        graph = WmcGraph(compile_formula(abduce(policy, label), policy.n_atoms))
        self.stats.compilations += 1
        self._entries[key] = (text, graph)
        return graph

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)

    def __getstate__(self):
        # Compiled graphs are cheap to rebuild; do not ship them between
        # processes.  Stats travel so counters survive worker round trips.
        return {"stats": self.stats}

    def __setstate__(self, state):
        self._entries = {}
        self.stats = state["stats"]
