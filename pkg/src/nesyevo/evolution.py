"""Generational search over rule policies with paired neural inheritance.

Each generation the current fittest organism spawns offspring under every
combination of a symbolic mutation (clone the policy, append a rule built
from a random context, or append a copy of the latest rule with one body
literal dropped) and a neural mutation (inherit the parent's weights and
optimizer state, or reinitialize both).  Offspring train on the exemplar
set, are scored point by point against their parent on the validation
split, and one survivor seeds the next generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import ExemplarSet
from .net import EncoderArch
from .organism import (
    EncoderPerception,
    MutationTag,
    Organism,
    PerformanceTriple,
    TrainReport,
    TrainSettings,
)
from .policy import Decision, Literal, Policy, Rule, induce, is_homogeneous

__all__ = [
    "SCORE_MATRIX",
    "STATUS_CORRECT",
    "STATUS_ABSTAIN",
    "STATUS_WRONG",
    "FitnessReport",
    "EvolveSettings",
    "LineageEntry",
    "Lineage",
    "decision_statuses",
    "relative_fitness",
    "select_fittest",
    "spawn_population",
    "evolve",
]

STATUS_CORRECT = 0
STATUS_ABSTAIN = 1
STATUS_WRONG = 2

# Rows: parent status; columns: offspring status (correct, abstain, wrong).
# Rewards movement toward correctness, penalizes movement away from it.
SCORE_MATRIX = np.array(
    [
        [0, -1, -1],
        [1, 0, -1],
        [1, 1, 0],
    ],
    dtype=np.int64,
)

GROUP_BENEFICIAL = "beneficial"
GROUP_NEUTRAL = "neutral"
GROUP_DETRIMENTAL = "detrimental"


@dataclass(frozen=True)
class FitnessReport:
    """Relative fitness of one offspring against its parent."""

    raw_score: int
    normalized: float
    group: str


def decision_statuses(decisions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Map decisions to status codes given the true labels."""
    statuses = np.full(len(decisions), STATUS_WRONG, dtype=np.int64)
    statuses[decisions == labels] = STATUS_CORRECT
    statuses[decisions == 0] = STATUS_ABSTAIN
    return statuses


def relative_fitness(
    parent_decisions: np.ndarray,
    offspring_decisions: np.ndarray,
    labels: np.ndarray,
    threshold: float = 0.0,
) -> FitnessReport:
    """Score-matrix sum over instances, grouped against ``threshold``.

    The threshold scales with the number of instances: a raw score above
    ``threshold * m`` is beneficial, within ``+-threshold * m`` neutral,
    below detrimental.
    """
    if len(parent_decisions) != len(offspring_decisions):
        raise ValueError("decision sequences must have equal length")
    parent_status = decision_statuses(np.asarray(parent_decisions), labels)
    offspring_status = decision_statuses(np.asarray(offspring_decisions), labels)
    raw = int(SCORE_MATRIX[parent_status, offspring_status].sum())
    m = len(labels)
    bound = threshold * m
    if raw > bound:
        group = GROUP_BENEFICIAL
    elif raw >= -bound:
        group = GROUP_NEUTRAL
    else:
        group = GROUP_DETRIMENTAL
    return FitnessReport(raw_score=raw, normalized=raw / m, group=group)


def select_fittest(
    reports: list[FitnessReport], exponent: int, rng: np.random.Generator
) -> int:
    """Pick the surviving offspring index.

    Beneficial offspring are sampled with probability proportional to
    raw_score ** exponent; failing that, a neutral offspring uniformly;
    failing that, the best detrimental one with ties broken at random.
    """
    if not reports:
        raise ValueError("empty population")
    beneficial = [i for i, r in enumerate(reports) if r.group == GROUP_BENEFICIAL]
    if beneficial:
        weights = np.array(
            [float(reports[i].raw_score) ** exponent for i in beneficial]
        )
        probabilities = weights / weights.sum()
        return int(rng.choice(beneficial, p=probabilities))
    neutral = [i for i, r in enumerate(reports) if r.group == GROUP_NEUTRAL]
    if neutral:
        return int(rng.choice(neutral))
    best = max(r.raw_score for r in reports)
    contenders = [i for i, r in enumerate(reports) if r.raw_score == best]
    return int(rng.choice(contenders))


def selection_probabilities(scores: list[int], exponent: int) -> np.ndarray:
    """Fitness-proportionate weights f**k, normalized; for reporting."""
    weights = np.array([float(s) ** exponent for s in scores])
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# population construction


def _symbolic_variants(parent_policy: Policy, rule_additions: int,
                       rng: np.random.Generator):
    """All symbolic mutations of the parent policy, in a fixed order."""
    variants = [("clone", parent_policy)]
    n = parent_policy.n_atoms
    for _ in range(rule_additions):
        signs = rng.integers(0, 2, size=n).astype(bool)
        body = tuple(Literal(i, bool(signs[i])) for i in range(n))
        for head in (True, False):
            variants.append(("add-rule", induce(parent_policy, Rule(body, head))))
    latest = parent_policy.latest_rule
    if latest is not None and len(latest.body) > 1:
        for j in range(len(latest.body)):
            shortened = latest.body[:j] + latest.body[j + 1 :]
            variants.append(
                ("drop-literal", induce(parent_policy, Rule(shortened, latest.head_positive)))
            )
    return variants


def spawn_population(
    parent: Organism,
    rule_additions: int,
    rng: np.random.Generator,
    reinit_seeds: list | None = None,
    first_id: int = 1,
) -> list[Organism]:
    """Offspring for every symbolic x neural mutation combination.

    With L the body length of the parent's latest rule, the population
    holds 2 * (1 + 2*rule_additions + L) organisms, except that dropping
    the only literal of a one-literal rule is skipped (rule bodies must
    stay nonempty).
    """
    variants = _symbolic_variants(parent.policy, rule_additions, rng)
    offspring = []
    reinit_iter = iter(reinit_seeds) if reinit_seeds is not None else None
    for symbolic, policy in variants:
        for neural in ("inherit", "reinit"):
            if neural == "inherit":
                perception = parent.perception.clone()
            else:
                seed = next(reinit_iter) if reinit_iter is not None else rng.integers(2**31)
                perception = parent.perception.reinitialized(seed)
            offspring.append(
                Organism(
                    policy,
                    perception,
                    organism_id=first_id + len(offspring),
                    parent_id=parent.organism_id,
                    mutation=MutationTag(symbolic, neural),
                )
            )
    return offspring


# ---------------------------------------------------------------------------
# the generational loop


@dataclass(frozen=True)
class EvolveSettings:
    max_generations: int = 100
    threshold: float = 0.0          # fitness grouping threshold (t)
    selection_exponent: int = 2     # fitness-proportionate nonlinearity (k)
    rule_additions: int = 5         # random-context rule draws per generation
    early_stop_correct: float = 0.99
    train: TrainSettings = field(default_factory=TrainSettings)
    master_seed: int = 0
    workers: int = 0                # 0 trains in-process
    arch: EncoderArch = field(default_factory=EncoderArch)
    dtype: str = "float64"
    with_decoder: bool = False

    def perception_factory(self):
        dtype = np.dtype(self.dtype)
        with_decoder = self.with_decoder or self.train.reconstruction_ratio > 0.0

        def build(seed):
            return EncoderPerception(
                self.arch, seed=seed, dtype=dtype, with_decoder=with_decoder
            )

        return build


@dataclass
class LineageEntry:
    generation: int
    organism: Organism
    mutation: MutationTag | None
    fitness: FitnessReport | None
    val: PerformanceTriple
    test: PerformanceTriple | None = None
    train_report: TrainReport | None = None
    population_size: int = 0
    homogeneous_rule: bool = False


@dataclass
class Lineage:
    entries: list[LineageEntry] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def final(self) -> LineageEntry:
        return self.entries[-1]

    def parent_chain_consistent(self) -> bool:
        pairs = zip(self.entries, self.entries[1:])
        return all(b.organism.parent_id == a.organism.organism_id for a, b in pairs)


def evolve(
    settings: EvolveSettings,
    splits: dict[str, ExemplarSet],
    perception_factory=None,
) -> Lineage:
    """Run the generational loop and return the lineage of survivors.

    Fully deterministic given ``settings.master_seed`` (independent of
    worker count and scheduling: every random stream derives from the
    master seed, the generation index, and the offspring index).
    """
    from .parallel import train_population  # local import to avoid a cycle

    if perception_factory is None:
        perception_factory = settings.perception_factory()
    n_atoms = splits["train"].n_atoms
    seed_rng = np.random.default_rng([settings.master_seed, 0])
    founder = Organism(
        Policy(n_atoms),
        perception_factory(int(seed_rng.integers(2**31))),
        organism_id=0,
    )
    lineage = Lineage()
    lineage.entries.append(
        LineageEntry(
            generation=0,
            organism=founder,
            mutation=None,
            fitness=None,
            val=founder.evaluate(splits["val"]),
        )
    )
    labels = splits["val"].labels
    next_id = 1
    for generation in range(1, settings.max_generations + 1):
        parent = lineage.final.organism
        gen_rng = np.random.default_rng([settings.master_seed, generation, 1])
        select_rng = np.random.default_rng([settings.master_seed, generation, 2])
        population = spawn_population(
            parent,
            settings.rule_additions,
            gen_rng,
            reinit_seeds=None,
            first_id=next_id,
        )
        next_id += len(population)
        tasks = [
            (organism, [settings.master_seed, generation, 3, index])
            for index, organism in enumerate(population)
        ]
        results = train_population(tasks, splits, settings)
        parent_decisions = parent.decide_instances(splits["val"])
        reports = [
            relative_fitness(parent_decisions, decisions, labels, settings.threshold)
            for _, _, decisions in results
        ]
        chosen = select_fittest(reports, settings.selection_exponent, select_rng)
        organism, train_report, decisions = results[chosen]
        statuses = decision_statuses(decisions, labels)
        correct = float((statuses == STATUS_CORRECT).mean())
        abstain = float((statuses == STATUS_ABSTAIN).mean())
        latest = organism.policy.latest_rule
        lineage.entries.append(
            LineageEntry(
                generation=generation,
                organism=organism,
                mutation=organism.mutation,
                fitness=reports[chosen],
                val=PerformanceTriple(correct, abstain, 1.0 - correct - abstain),
                train_report=train_report,
                population_size=len(population),
                homogeneous_rule=latest is not None and is_homogeneous(latest),
            )
        )
        if correct >= settings.early_stop_correct:
            lineage.stopped_early = True
            break
    for entry in lineage.entries:
        entry.test = entry.organism.evaluate(splits["test"])
    return lineage
