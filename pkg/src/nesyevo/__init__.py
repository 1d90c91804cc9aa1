"""Evolutionary learning of prioritized rule policies with glyph perception.

The package trains neural-symbolic individuals: an ordered defeasible
rule policy (grown by mutation and selection, starting empty) paired with
a convolutional glyph encoder (trained by gradient descent on the
semantic loss derived through abduction and weighted model counting).

High-level entry points: the scikit-learn style estimators in
:mod:`nesyevo.estimators`, the :func:`nesyevo.evolution.evolve` loop, and
the ``nesyevo`` command line (see :mod:`nesyevo.cli`).
"""

from .baseline import BaselineNet, train_baseline
from .config import ConfigError, ExperimentConfig, paper_profile
from .data import (
    ExemplarSet,
    GlyphPool,
    TargetPolicySpec,
    build_exemplar_set,
    generate_target_policy,
    load_dataset,
    load_idx,
    save_dataset,
    synth_glyphs,
)
from .diagram import Diagram, compile_formula
from .estimators import EvolvedRulePolicyClassifier, GlyphSequenceBaseline
from .evolution import (
    EvolveSettings,
    FitnessReport,
    Lineage,
    evolve,
    relative_fitness,
    select_fittest,
    spawn_population,
)
from .formula import abduce, abstain_formula
from .net import AdamState, DecoderNet, EncoderArch, EncoderNet, adam_step, gumbel_softmax
from .organism import (
    CentroidPerception,
    EncoderPerception,
    Organism,
    PerformanceTriple,
    TrainSettings,
)
from .policy import (
    Decision,
    Literal,
    Policy,
    PolicyError,
    PolicyParseError,
    Rule,
    deduce,
    induce,
    is_homogeneous,
    parse_policy,
    render_policy,
)
from .wmc import CompilationCache, WmcGraph, semantic_loss

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BaselineNet",
    "CentroidPerception",
    "CompilationCache",
    "ConfigError",
    "Decision",
    "DecoderNet",
    "Diagram",
    "EncoderArch",
    "EncoderNet",
    "EncoderPerception",
    "EvolveSettings",
    "EvolvedRulePolicyClassifier",
    "ExemplarSet",
    "ExperimentConfig",
    "FitnessReport",
    "GlyphPool",
    "GlyphSequenceBaseline",
    "Lineage",
    "Literal",
    "Organism",
    "PerformanceTriple",
    "Policy",
    "PolicyError",
    "PolicyParseError",
    "Rule",
    "TargetPolicySpec",
    "TrainSettings",
    "WmcGraph",
    "abduce",
    "abstain_formula",
    "adam_step",
    "build_exemplar_set",
    "compile_formula",
    "deduce",
    "evolve",
    "generate_target_policy",
    "gumbel_softmax",
    "induce",
    "is_homogeneous",
    "load_dataset",
    "load_idx",
    "paper_profile",
    "parse_policy",
    "relative_fitness",
    "render_policy",
    "save_dataset",
    "select_fittest",
    "semantic_loss",
    "spawn_population",
    "synth_glyphs",
    "train_baseline",
    "__version__",
]
