"""Rule policy + glyph perception composed into one trainable individual.

Forward path: every glyph in an instance is encoded to a positive-atom
probability, hardened at 0.5 into a symbolic context (ties toward
positive), and the policy decides.  Training never touches the policy; it
descends the semantic loss, the negative log probability mass the policy
assigns to each instance's label under the encoder's read of the images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ExemplarSet
from .diagram import compile_formula
from .formula import abduce
from .net import (
    AdamState,
    DecoderNet,
    EncoderArch,
    EncoderNet,
    TrainingDiverged,
    adam_step,
    gumbel_softmax_backward,
    gumbel_softmax_forward,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    xavier_init,
)
from .policy import (
    Decision,
    Policy,
    deduce,
    deduce_batch,
    is_homogeneous,
    parse_policy,
    render_policy,
)
from .wmc import CacheStats, CompilationCache, WmcGraph, semantic_loss

__all__ = [
    "PerformanceTriple",
    "MutationTag",
    "TrainSettings",
    "TrainReport",
    "StuckReport",
    "EncoderPerception",
    "CentroidPerception",
    "ConstantPerception",
    "Organism",
]

# Pools larger than this skip the shared first-layer im2col cache.
MAX_POOL_COLUMNS = 4096


@dataclass(frozen=True)
class PerformanceTriple:
    """Fractions of correct, abstained, and wrong decisions; sums to one."""

    correct: float
    abstain: float
    wrong: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.correct, self.abstain, self.wrong)


@dataclass(frozen=True)
class MutationTag:
    """How an offspring was derived: symbolic x neural mutation kind."""

    symbolic: str  # "clone" | "add-rule" | "drop-literal"
    neural: str    # "inherit" | "reinit"

    @property
    def label(self) -> str:
        return f"{self.symbolic}+{self.neural}"


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 5
    batch_size: int = 2000
    reconstruction_ratio: float = 0.0
    gumbel_temperature: float = 1.0
    cache_enabled: bool = True


@dataclass
class TrainReport:
    trained: bool
    epochs_run: int = 0
    steps: int = 0
    semantic_loss: float = float("nan")       # mean over the final epoch
    reconstruction_loss: float = float("nan")
    failed: bool = False
    unsat_label: bool = False                 # some label had zero mass
    stats: CacheStats = field(default_factory=CacheStats)


@dataclass(frozen=True)
class StuckReport:
    """Diagnostics for the uniform-prediction local optimum."""

    positive_fraction: float
    uniform_perception: bool
    latest_rule_homogeneous: bool
    uniform_decisions: bool

    @property
    def stuck(self) -> bool:
        return self.uniform_perception and (
            self.latest_rule_homogeneous or self.uniform_decisions
        )


# ---------------------------------------------------------------------------
# perception implementations


class EncoderPerception:
    """Trainable perception: encoder net (+ optional decoder) with Adam."""

    trainable = True
    kind = "encoder"

    def __init__(self, arch: EncoderArch = EncoderArch(), seed=0, dtype=np.float64,
                 with_decoder: bool = False, net=None, adam=None, decoder=None,
                 decoder_adam=None):
        self.arch = arch
        self.net = net if net is not None else EncoderNet(arch, seed=seed, dtype=dtype)
        self.adam = adam if adam is not None else AdamState()
        if with_decoder and decoder is None:
            decoder = DecoderNet(arch, seed=np.random.default_rng(seed).integers(2**31))
        self.decoder = decoder
        self.decoder_adam = decoder_adam if decoder_adam is not None else (
            AdamState() if decoder is not None else None
        )

    def clone(self) -> "EncoderPerception":
        return EncoderPerception(
            arch=self.arch,
            net=self.net.clone(),
            adam=self.adam.clone(),
            decoder=self.decoder.clone() if self.decoder else None,
            decoder_adam=self.decoder_adam.clone() if self.decoder_adam else None,
        )

    def reinitialized(self, seed) -> "EncoderPerception":
        return EncoderPerception(
            arch=self.arch,
            seed=seed,
            dtype=self.net.dtype,
            with_decoder=self.decoder is not None,
        )

    def pool_probabilities(self, dataset: ExemplarSet) -> np.ndarray:
        """Positive-atom probability for every pool image, chunked."""
        pool = dataset.pool
        col1 = self._pool_columns(dataset)
        if col1 is not None:
            return self.net.prob_positive(pool, col1=col1)
        out = np.empty(len(pool))
        for start in range(0, len(pool), 2048):
            out[start : start + 2048] = self.net.prob_positive(pool[start : start + 2048])
        return out

    def _pool_columns(self, dataset: ExemplarSet):
        if len(dataset.pool) > MAX_POOL_COLUMNS:
            return None
        key = ("col1", self.arch.kernel, str(self.net.dtype))
        return dataset.cached(key, lambda: self.net.input_columns(dataset.pool))


class CentroidPerception:
    """Stateless nearest-centroid perception; the perfect-reading stub.

    Classifies each glyph against the two class centroids of a reference
    pool and emits a confident probability either way.
    """

    trainable = False
    kind = "centroid"

    def __init__(self, pool, confidence: float = 0.99):
        self.centroids = np.stack(
            [pool.positive.mean(axis=0), pool.negative.mean(axis=0)]
        ).reshape(2, -1)
        self.confidence = confidence

    def clone(self) -> "CentroidPerception":
        return self

    def reinitialized(self, seed) -> "CentroidPerception":
        return self

    def pool_probabilities(self, dataset: ExemplarSet) -> np.ndarray:
        flat = dataset.pool.reshape(len(dataset.pool), -1)
        d = ((flat[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        positive = d[:, 0] < d[:, 1]
        return np.where(positive, self.confidence, 1.0 - self.confidence)


class ConstantPerception:
    """Emits one fixed probability for every glyph; diagnostics only."""

    trainable = False
    kind = "constant"

    def __init__(self, value: float):
        self.value = value

    def clone(self):
        return self

    def reinitialized(self, seed):
        return self

    def pool_probabilities(self, dataset: ExemplarSet) -> np.ndarray:
        return np.full(len(dataset.pool), self.value)


# ---------------------------------------------------------------------------
# organism


class Organism:
    """A (policy, perception) pair; the unit of evolutionary selection."""

    def __init__(self, policy: Policy, perception, organism_id: int = 0,
                 parent_id: int = -1, mutation: MutationTag | None = None):
        self.policy = policy
        self.perception = perception
        self.cache = CompilationCache()
        self.organism_id = organism_id
        self.parent_id = parent_id
        self.mutation = mutation
        self.train_failed = False

    # -- forward pipeline ---------------------------------------------------

    def atom_probabilities(self, dataset: ExemplarSet) -> np.ndarray:
        """(m, n_atoms) positive probabilities for every instance slot."""
        pool_probs = self.perception.pool_probabilities(dataset)
        return pool_probs[dataset.slot_ids]

    def hardened_contexts(self, dataset: ExemplarSet) -> np.ndarray:
        return self.atom_probabilities(dataset) >= 0.5

    def decide_instances(self, dataset: ExemplarSet) -> np.ndarray:
        """Vector of Decision values (+1/-1/0), one per instance."""
        return deduce_batch(self.policy, self.hardened_contexts(dataset))

    def deduce_instance(self, images: np.ndarray) -> Decision:
        """Decision for a single (n_atoms, 28, 28) image sequence."""
        if isinstance(self.perception, EncoderPerception):
            probs = self.perception.net.prob_positive(np.asarray(images))
        else:
            probe = ExemplarSet(
                split="adhoc",
                n_atoms=len(images),
                pool=np.asarray(images, dtype=np.float32),
                slot_ids=np.arange(len(images), dtype=np.int32)[None, :],
                labels=np.zeros(1, dtype=np.int8),
                contexts=np.zeros((1, len(images)), dtype=bool),
            )
            probs = self.perception.pool_probabilities(probe)
        context = tuple(bool(p >= 0.5) for p in probs)
        return deduce(self.policy, context)

    def evaluate(self, dataset: ExemplarSet) -> PerformanceTriple:
        decisions = self.decide_instances(dataset)
        m = len(dataset)
        correct = float((decisions == dataset.labels).sum()) / m
        abstain = float((decisions == 0).sum()) / m
        return PerformanceTriple(correct, abstain, 1.0 - correct - abstain)

    # -- training -----------------------------------------------------------

    def train(self, dataset: ExemplarSet, settings: TrainSettings,
              rng: np.random.Generator) -> TrainReport:
        """Gradient training of the perception against abductive feedback.

        One Adam step per batch on the mean per-instance loss.  An
        organism whose policy entails neither label (in particular the
        empty policy) takes no steps.  Non-finite losses abort training
        with the organism flagged but still usable at its last weights.
        """
        report = TrainReport(trained=False, stats=self.cache.stats)
        if not self.perception.trainable or not self.policy.rules:
            # In particular the empty policy: both labels abduce to the
            # unsatisfiable formula, so no step could move the weights.
            return report
        report.trained = True
        try:
            self._gradient_loop(dataset, settings, rng, report)
        except TrainingDiverged:
            report.failed = True
            self.train_failed = True
        return report

    def _gradient_loop(self, dataset, settings, rng, report):
        perception = self.perception
        net = perception.net
        m = len(dataset)
        n = dataset.n_atoms
        batch_size = min(settings.batch_size, m)
        pool_col1 = perception._pool_columns(dataset)
        for epoch in range(settings.epochs):
            order = rng.permutation(m)
            epoch_semantic = 0.0
            epoch_recon = 0.0
            for start in range(0, m, batch_size):
                rows = order[start : start + batch_size]
                b = len(rows)
                ids = dataset.slot_ids[rows]
                uids, inverse = np.unique(ids, return_inverse=True)
                inverse = inverse.reshape(-1)
                images = dataset.pool[uids]
                col1 = None
                if pool_col1 is not None:
                    col1 = pool_col1 if len(uids) == len(dataset.pool) else pool_col1[uids]
                probs2, cache = net.forward(images, col1=col1)
                p_slots = probs2[:, 0][inverse].reshape(b, n)
                loss, grad = self._semantic_terms(
                    p_slots, dataset.labels[rows], settings.cache_enabled, report.stats
                )
                if not np.isfinite(loss).all():
                    raise TrainingDiverged("non-finite semantic loss")
                report.unsat_label |= bool((loss >= 27.0).any())  # ~ -log(clamp)
                epoch_semantic += float(loss.sum())
                upstream = grad / b
                per_unique = np.zeros(len(uids))
                np.add.at(per_unique, inverse, upstream.ravel())
                dprobs2 = np.zeros((len(uids), 2))
                dprobs2[:, 0] = per_unique
                dlogits_extra = None
                if settings.reconstruction_ratio > 0.0 and perception.decoder is not None:
                    recon_total, dlogits_extra, decoder_grads = self._reconstruction_terms(
                        perception, cache, images, inverse, b * n,
                        settings, rng,
                    )
                    epoch_recon += recon_total * b
                    adam_step(perception.decoder.params, decoder_grads, perception.decoder_adam)
                grads = net.backward(cache, dprobs2, dlogits_extra)
                adam_step(net.params, grads, perception.adam)
                report.steps += 1
            report.semantic_loss = epoch_semantic / m
            report.reconstruction_loss = (
                epoch_recon / m if settings.reconstruction_ratio > 0.0 else 0.0
            )
            report.epochs_run = epoch + 1

    def _semantic_terms(self, p_slots, labels, cache_enabled, stats):
        b, n = p_slots.shape
        loss = np.zeros(b)
        grad = np.zeros((b, n))
        for label in (Decision.POSITIVE, Decision.NEGATIVE):
            rows = np.flatnonzero(labels == int(label))
            if rows.size == 0:
                continue
            if cache_enabled:
                graph = self.cache.get_or_compile(self.policy, label)
                loss[rows], grad[rows] = semantic_loss(graph, p_slots[rows])
            else:
                # Uncached semantics: recompile for every single instance.
                for r in rows:
                    graph = WmcGraph(
                        compile_formula(abduce(self.policy, label), self.policy.n_atoms)
                    )
                    stats.compilations += 1
                    l_row, g_row = semantic_loss(graph, p_slots[r : r + 1])
                    loss[r] = l_row[0]
                    grad[r] = g_row[0]
            stats.instances_evaluated += int(rows.size)
        return loss, grad

    def _reconstruction_terms(self, perception, cache, images, inverse, total_slots,
                              settings, rng):
        logits = cache[-2]
        multiplicity = np.bincount(inverse, minlength=len(images)).astype(np.float64)
        code, gumbel_cache = gumbel_softmax_forward(
            logits, settings.gumbel_temperature, rng
        )
        recon, decoder_cache = perception.decoder.forward(code)
        per_image, drecon = reconstruction_loss(recon, images)
        weight = settings.reconstruction_ratio * multiplicity / total_slots
        total = float((per_image * multiplicity).sum()) / total_slots
        dcode, decoder_grads = perception.decoder.backward(
            decoder_cache, drecon * weight[:, None, None]
        )
        dlogits = gumbel_softmax_backward(gumbel_cache, dcode)
        return total, dlogits, decoder_grads

    # -- diagnostics ----------------------------------------------------------

    def detect_stuck(self, dataset: ExemplarSet) -> StuckReport:
        probs = self.atom_probabilities(dataset)
        positive_fraction = float((probs >= 0.5).mean())
        uniform = positive_fraction >= 0.99 or positive_fraction <= 0.01
        latest = self.policy.latest_rule
        homogeneous = latest is not None and is_homogeneous(latest)
        decisions = self.decide_instances(dataset)
        uniform_decisions = bool(len(self.policy.rules)) and len(set(decisions.tolist())) == 1
        return StuckReport(
            positive_fraction=positive_fraction,
            uniform_perception=uniform,
            latest_rule_homogeneous=homogeneous,
            uniform_decisions=uniform_decisions,
        )

    # -- persistence ----------------------------------------------------------

    def save_snapshot(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "policy.txt").write_text(
            render_policy(self.policy) + ("\n" if self.policy.rules else ""),
            encoding="utf-8",
        )
        meta = {
            "organism_id": self.organism_id,
            "parent_id": self.parent_id,
            "mutation": self.mutation.label if self.mutation else None,
            "n_atoms": self.policy.n_atoms,
            "perception": self.perception.kind,
            "train_failed": self.train_failed,
        }
        if isinstance(self.perception, EncoderPerception):
            arch = self.perception.arch
            meta["arch"] = {
                "conv_channels": list(arch.conv_channels),
                "fc_dims": list(arch.fc_dims),
                "kernel": arch.kernel,
            }
            save_checkpoint(
                directory / "encoder.bin", self.perception.net.params, arch.describe()
            )
        with open(directory / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_snapshot(cls, directory) -> "Organism":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        policy = parse_policy(
            (directory / "policy.txt").read_text(encoding="utf-8"), meta["n_atoms"]
        )
        if meta["perception"] != "encoder":
            raise ValueError("only encoder-backed snapshots can be reloaded")
        arch = EncoderArch(
            conv_channels=tuple(meta["arch"]["conv_channels"]),
            fc_dims=tuple(meta["arch"]["fc_dims"]),
            kernel=meta["arch"]["kernel"],
        )
        params = load_checkpoint(
            directory / "encoder.bin", arch.param_shapes(), arch.describe()
        )
        perception = EncoderPerception(arch=arch, net=EncoderNet(arch, params=params))
        organism = cls(
            policy,
            perception,
            organism_id=meta["organism_id"],
            parent_id=meta["parent_id"],
        )
        organism.train_failed = meta.get("train_failed", False)
        return organism
