"""End-to-end supervised baseline: shared glyph encoder + classifier head.

The same encoder reads each glyph of an instance; the per-glyph softmax
outputs are concatenated and fed through one hidden layer to a two-way
softmax trained with cross-entropy on the instance labels.  No symbolic
component; this is the reference point for the cost of interpretability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExemplarSet
from .net import (
    AdamState,
    EncoderArch,
    EncoderNet,
    TrainingDiverged,
    adam_step,
    dense_backward,
    dense_forward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
    xavier_init,
)

__all__ = ["BaselineNet", "BaselineCurves", "train_baseline"]

HIDDEN_UNITS = 64


class BaselineNet:
    """Encoder applied per glyph, then FC 2n -> 64 -> 2 with softmax."""

    def __init__(self, arch: EncoderArch, n_atoms: int, seed=0, dtype=np.float32):
        self.arch = arch
        self.n_atoms = n_atoms
        self.encoder = EncoderNet(arch, seed=seed, dtype=dtype)
        head_seed = np.random.default_rng([seed, 1]).integers(2**31)
        self.head = xavier_init(self.head_shapes(n_atoms), head_seed, np.dtype(dtype))

    @staticmethod
    def head_shapes(n_atoms: int) -> dict[str, tuple[int, ...]]:
        return {
            "hidden_w": (2 * n_atoms, HIDDEN_UNITS),
            "hidden_b": (HIDDEN_UNITS,),
            "out_w": (HIDDEN_UNITS, 2),
            "out_b": (2,),
        }

    @property
    def n_params(self) -> int:
        return self.encoder.n_params + sum(p.size for p in self.head.values())

    def forward_instances(self, dataset: ExemplarSet, rows: np.ndarray,
                          pool_col1=None, want_cache: bool = False):
        """Class probabilities (len(rows), 2) for the selected instances."""
        ids = dataset.slot_ids[rows]
        uids, inverse = np.unique(ids, return_inverse=True)
        inverse = inverse.reshape(-1)
        col1 = None
        if pool_col1 is not None:
            col1 = pool_col1 if len(uids) == len(dataset.pool) else pool_col1[uids]
        probs2, enc_cache = self.encoder.forward(dataset.pool[uids], col1=col1)
        concat = probs2[inverse].reshape(len(rows), 2 * self.n_atoms)
        z1, c_hidden = dense_forward(concat, self.head["hidden_w"], self.head["hidden_b"])
        a1 = relu(z1)
        logits, c_out = dense_forward(a1, self.head["out_w"], self.head["out_b"])
        probs = softmax(logits)
        if not want_cache:
            return probs
        cache = (uids, inverse, enc_cache, c_hidden, z1, c_out, probs)
        return probs, cache

    def backward(self, cache, dprobs: np.ndarray):
        uids, inverse, enc_cache, c_hidden, z1, c_out, probs = cache
        head_grads = {}
        dlogits = softmax_backward(probs, dprobs.astype(self.encoder.dtype))
        da1, head_grads["out_w"], head_grads["out_b"] = dense_backward(
            c_out, self.head["out_w"], dlogits
        )
        dz1 = relu_backward(z1, da1)
        dconcat, head_grads["hidden_w"], head_grads["hidden_b"] = dense_backward(
            c_hidden, self.head["hidden_w"], dz1
        )
        per_slot = dconcat.reshape(-1, 2)
        dprobs2 = np.zeros((len(uids), 2), dtype=np.float64)
        np.add.at(dprobs2, inverse, per_slot.astype(np.float64))
        encoder_grads = self.encoder.backward(enc_cache, dprobs2)
        return encoder_grads, head_grads

    def predict_proba(self, dataset: ExemplarSet, chunk: int = 4096) -> np.ndarray:
        out = np.empty((len(dataset), 2))
        pool_col1 = self._pool_columns(dataset)
        for start in range(0, len(dataset), chunk):
            rows = np.arange(start, min(start + chunk, len(dataset)))
            out[rows] = self.forward_instances(dataset, rows, pool_col1)
        return out

    def predict(self, dataset: ExemplarSet) -> np.ndarray:
        probs = self.predict_proba(dataset)
        return np.where(probs[:, 0] >= probs[:, 1], 1, -1).astype(np.int8)

    def _pool_columns(self, dataset: ExemplarSet):
        if len(dataset.pool) > 4096:
            return None
        key = ("col1", self.arch.kernel, str(self.encoder.dtype))
        return dataset.cached(key, lambda: self.encoder.input_columns(dataset.pool))


@dataclass
class BaselineCurves:
    """Per-epoch accuracy and loss trajectories."""

    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_accuracy)

    def final_test_accuracy(self) -> float:
        return self.test_accuracy[-1] if self.test_accuracy else float("nan")


def _cross_entropy(probs: np.ndarray, labels: np.ndarray):
    index = (labels < 0).astype(np.int64)  # +1 -> column 0, -1 -> column 1
    picked = np.clip(probs[np.arange(len(labels)), index], 1e-12, None)
    loss = float(-np.log(picked).mean())
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), index] = 1.0
    dprobs = -(onehot / np.clip(probs, 1e-12, None)) / len(labels)
    return loss, dprobs


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    predicted = np.where(probs[:, 0] >= probs[:, 1], 1, -1)
    return float((predicted == labels).mean())


def train_baseline(
    net: BaselineNet,
    splits: dict[str, ExemplarSet],
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> BaselineCurves:
    """Supervised cross-entropy training with per-epoch curve recording.

    Divergence (non-finite loss or gradients) flags the curves and stops
    training; the run and its partial curves are kept.
    """
    train = splits["train"]
    curves = BaselineCurves()
    encoder_adam = AdamState()
    head_adam = AdamState()
    pool_col1 = net._pool_columns(train)
    m = len(train)
    batch_size = min(batch_size, m)
    for _ in range(epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        try:
            for start in range(0, m, batch_size):
                rows = order[start : start + batch_size]
                probs, cache = net.forward_instances(
                    train, rows, pool_col1, want_cache=True
                )
                loss, dprobs = _cross_entropy(probs, train.labels[rows])
                if not np.isfinite(loss):
                    raise TrainingDiverged("non-finite cross-entropy")
                epoch_loss += loss * len(rows)
                encoder_grads, head_grads = net.backward(cache, dprobs)
                adam_step(net.encoder.params, encoder_grads, encoder_adam)
                adam_step(net.head, head_grads, head_adam)
        except TrainingDiverged:
            curves.diverged = True
            break
        curves.train_loss.append(epoch_loss / m)
        train_probs = net.predict_proba(train)
        val_probs = net.predict_proba(splits["val"])
        test_probs = net.predict_proba(splits["test"])
        curves.train_accuracy.append(_accuracy(train_probs, train.labels))
        curves.val_accuracy.append(_accuracy(val_probs, splits["val"].labels))
        curves.test_accuracy.append(_accuracy(test_probs, splits["test"].labels))
        curves.val_loss.append(_cross_entropy(val_probs, splits["val"].labels)[0])
    return curves
