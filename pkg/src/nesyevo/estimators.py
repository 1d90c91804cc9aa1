"""Scikit-learn style estimators wrapping the evolutionary learner.

Both estimators consume instances shaped (m, n_atoms, 28, 28): a sequence
of glyph images per row, with binary labels in {-1, +1}.  They follow the
sklearn conventions (constructor stores hyperparameters verbatim,
``fit`` returns self, fitted attributes carry trailing underscores), so
they compose with model selection and pipeline tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_random_state

from .baseline import BaselineNet, train_baseline
from .data import ExemplarSet
from .evolution import EvolveSettings, evolve
from .net import EncoderArch
from .organism import TrainSettings

__all__ = ["EvolvedRulePolicyClassifier", "GlyphSequenceBaseline"]

IMAGE_HW = 28


def _validate_instances(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[2:] != (IMAGE_HW, IMAGE_HW):
        raise ValueError(
            f"expected instances shaped (m, n_atoms, {IMAGE_HW}, {IMAGE_HW}), got {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValueError("instances contain non-finite pixels")
    return X


def _validate_labels(y, m: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValueError(f"labels must be shaped ({m},), got {y.shape}")
    values = set(np.unique(y).tolist())
    if not values <= {-1, 1}:
        raise ValueError(f"labels must be in {{-1, +1}}, got {sorted(values)}")
    return y.astype(np.int8)


def _as_exemplar_set(split: str, X: np.ndarray, y: np.ndarray) -> ExemplarSet:
    m, n = X.shape[:2]
    flat = X.reshape(m * n, -1)
    pool, inverse = np.unique(flat, axis=0, return_inverse=True)
    return ExemplarSet(
        split=split,
        n_atoms=n,
        pool=pool.reshape(-1, IMAGE_HW, IMAGE_HW),
        slot_ids=inverse.reshape(m, n).astype(np.int32),
        labels=y,
        contexts=np.zeros((m, n), dtype=bool),  # ground truth unknown here
    )


class EvolvedRulePolicyClassifier(ClassifierMixin, BaseEstimator):
    """Learns a prioritized rule policy plus glyph encoder from scratch.

    ``predict`` returns +1/-1 for decided instances and 0 where the
    learned policy abstains; ``score`` counts abstentions as errors.
    """

    def __init__(
        self,
        max_generations: int = 100,
        rule_additions: int = 5,
        threshold: float = 0.0,
        selection_exponent: int = 2,
        early_stop_correct: float = 0.99,
        epochs: int = 5,
        batch_size: int = 2000,
        reconstruction_ratio: float = 0.0,
        conv_channels: tuple[int, int] = (4, 8),
        fc_dims: tuple[int, int] = (48, 24),
        dtype: str = "float32",
        validation_fraction: float = 0.2,
        workers: int = 0,
        random_state=None,
    ):
        self.max_generations = max_generations
        self.rule_additions = rule_additions
        self.threshold = threshold
        self.selection_exponent = selection_exponent
        self.early_stop_correct = early_stop_correct
        self.epochs = epochs
        self.batch_size = batch_size
        self.reconstruction_ratio = reconstruction_ratio
        self.conv_channels = conv_channels
        self.fc_dims = fc_dims
        self.dtype = dtype
        self.validation_fraction = validation_fraction
        self.workers = workers
        self.random_state = random_state

    def _settings(self) -> EvolveSettings:
        seed = check_random_state(self.random_state).randint(2**31)
        return EvolveSettings(
            max_generations=self.max_generations,
            threshold=self.threshold,
            selection_exponent=self.selection_exponent,
            rule_additions=self.rule_additions,
            early_stop_correct=self.early_stop_correct,
            train=TrainSettings(
                epochs=self.epochs,
                batch_size=self.batch_size,
                reconstruction_ratio=self.reconstruction_ratio,
            ),
            master_seed=seed,
            workers=self.workers,
            arch=EncoderArch(
                conv_channels=tuple(self.conv_channels), fc_dims=tuple(self.fc_dims)
            ),
            dtype=self.dtype,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = _validate_instances(X)
        y = _validate_labels(y, len(X))
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        settings = self._settings()
        if X_val is None:
            shuffle = np.random.default_rng(settings.master_seed).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val_rows, train_rows = shuffle[:n_val], shuffle[n_val:]
            X_train, y_train = X[train_rows], y[train_rows]
            X_val, y_val = X[val_rows], y[val_rows]
        else:
            X_train, y_train = X, y
            X_val = _validate_instances(X_val)
            y_val = _validate_labels(y_val, len(X_val))
        splits = {
            "train": _as_exemplar_set("train", X_train, y_train),
            "val": _as_exemplar_set("val", X_val, y_val),
            # evolve() evaluates the lineage on "test"; reuse validation
            # here since fit has no separate held-out set.
            "test": _as_exemplar_set("test", X_val, y_val),
        }
        lineage = evolve(settings, splits)
        self.lineage_ = lineage
        self.organism_ = lineage.final.organism
        self.policy_ = self.organism_.policy
        self.policy_text_ = self.policy_.to_text()
        self.n_atoms_ = X.shape[1]
        self.classes_ = np.array([-1, 1], dtype=np.int8)
        self.validation_performance_ = lineage.final.val
        self.n_generations_ = len(lineage) - 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "organism_")
        X = _validate_instances(X)
        if X.shape[1] != self.n_atoms_:
            raise ValueError(
                f"expected {self.n_atoms_} glyphs per instance, got {X.shape[1]}"
            )
        dataset = _as_exemplar_set(
            "predict", X, np.zeros(len(X), dtype=np.int8)
        )
        return self.organism_.decide_instances(dataset)

    def atom_probabilities(self, X) -> np.ndarray:
        """Per-glyph positive-atom probabilities, shape (m, n_atoms)."""
        check_is_fitted(self, "organism_")
        X = _validate_instances(X)
        dataset = _as_exemplar_set("probe", X, np.zeros(len(X), dtype=np.int8))
        return self.organism_.atom_probabilities(dataset)

    def score(self, X, y, sample_weight=None) -> float:
        predictions = self.predict(X)
        y = _validate_labels(y, len(predictions))
        return float(np.average(predictions == y, weights=sample_weight))


class GlyphSequenceBaseline(ClassifierMixin, BaseEstimator):
    """End-to-end supervised net over glyph sequences; no symbolic part."""

    def __init__(
        self,
        epochs: int = 50,
        batch_size: int = 2000,
        conv_channels: tuple[int, int] = (4, 8),
        fc_dims: tuple[int, int] = (48, 24),
        dtype: str = "float32",
        validation_fraction: float = 0.2,
        random_state=None,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.conv_channels = conv_channels
        self.fc_dims = fc_dims
        self.dtype = dtype
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X = _validate_instances(X)
        y = _validate_labels(y, len(X))
        seed = check_random_state(self.random_state).randint(2**31)
        shuffle = np.random.default_rng(seed).permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        val_rows, train_rows = shuffle[:n_val], shuffle[n_val:]
        splits = {
            "train": _as_exemplar_set("train", X[train_rows], y[train_rows]),
            "val": _as_exemplar_set("val", X[val_rows], y[val_rows]),
            "test": _as_exemplar_set("test", X[val_rows], y[val_rows]),
        }
        arch = EncoderArch(
            conv_channels=tuple(self.conv_channels), fc_dims=tuple(self.fc_dims)
        )
        self.net_ = BaselineNet(arch, X.shape[1], seed=seed, dtype=np.dtype(self.dtype))
        self.curves_ = train_baseline(
            self.net_,
            splits,
            epochs=self.epochs,
            batch_size=self.batch_size,
            rng=np.random.default_rng([seed, 1]),
        )
        self.n_atoms_ = X.shape[1]
        self.classes_ = np.array([-1, 1], dtype=np.int8)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _validate_instances(X)
        dataset = _as_exemplar_set("predict", X, np.zeros(len(X), dtype=np.int8))
        probs = self.net_.predict_proba(dataset)
        # Column order follows classes_: [-1, +1].
        return probs[:, ::-1]

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]
