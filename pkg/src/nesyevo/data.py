"""Target-policy generation, glyph pools, and exemplar-set construction.

An exemplar set holds image-sequence instances labeled by a hidden target
policy.  Contexts are sampled uniformly from all total assignments,
abstaining contexts are rejected, and each atom is rendered as a glyph:
digit-1 imagery for positive atoms, digit-2 for negative.  Train and
validation draw from one glyph pool, test from a disjoint one.
"""

from __future__ import annotations

import gzip
import json
import struct
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .policy import Decision, Policy, Literal, Rule, deduce_batch, enumerate_contexts

__all__ = [
    "GlyphPool",
    "ExemplarSet",
    "TargetPolicySpec",
    "DataGenerationError",
    "IdxFormatError",
    "generate_target_policy",
    "build_exemplar_set",
    "synth_glyphs",
    "load_idx",
    "save_dataset",
    "load_dataset",
]

IMAGE_HW = 28
MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.bin"
DATASET_FORMAT = "nesyevo-dataset-1"


class DataGenerationError(RuntimeError):
    """Sampling budget exhausted (degenerate target policy or spec)."""


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class GlyphPool:
    """Glyph images for the two atom signs, grayscale in [0, 1]."""

    positive: np.ndarray  # (P1, 28, 28) float32, rendered digit 1
    negative: np.ndarray  # (P2, 28, 28) float32, rendered digit 2
    source: str = "synthetic"

    def __post_init__(self):
        for name in ("positive", "negative"):
            images = getattr(self, name)
            if images.ndim != 3 or images.shape[1:] != (IMAGE_HW, IMAGE_HW):
                raise ValueError(f"{name} glyphs must be (n, 28, 28)")

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.positive), len(self.negative)


@dataclass
class ExemplarSet:
    """Labeled instances; images are stored as ids into a shared pool.

    ``contexts`` keeps the ground-truth assignment behind each instance
    for diagnostics and oracle tests; learners never read it.
    """

    split: str
    n_atoms: int
    pool: np.ndarray       # (P, 28, 28) float32 distinct glyph images
    slot_ids: np.ndarray   # (m, n_atoms) int32 into pool
    labels: np.ndarray     # (m,) int8, +1 / -1
    contexts: np.ndarray   # (m, n_atoms) bool
    uid: str = field(default_factory=lambda: uuid.uuid4().hex)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        """Materialized (m, n_atoms, 28, 28) image tensor."""
        return self.pool[self.slot_ids]

    def instance(self, i: int) -> np.ndarray:
        return self.pool[self.slot_ids[i]]

    def cached(self, key, build):
        value = self._cache.get(key)
        if value is None:
            value = self._cache[key] = build()
        return value

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


# ---------------------------------------------------------------------------
# target policies


@dataclass(frozen=True)
class TargetPolicySpec:
    """Shape and non-degeneracy requirements for hidden target policies."""

    n_atoms: int = 8
    min_rules: int = 3
    max_rules: int = 8
    min_body: int = 1
    max_body: int = 4
    min_label_fraction: float = 0.10
    max_attempts: int = 1000


def generate_target_policy(spec: TargetPolicySpec, rng: np.random.Generator) -> Policy:
    """Rejection-sample a policy that labels both classes often enough.

    Candidates are resampled until each label covers at least
    ``min_label_fraction`` of all total contexts (which also bounds the
    abstain mass away from one).
    """
    contexts = enumerate_contexts(spec.n_atoms)
    minimum = spec.min_label_fraction * len(contexts)
    for _ in range(spec.max_attempts):
        n_rules = int(rng.integers(spec.min_rules, spec.max_rules + 1))
        rules = []
        for _ in range(n_rules):
            size = int(rng.integers(spec.min_body, min(spec.max_body, spec.n_atoms) + 1))
            atoms = np.sort(rng.choice(spec.n_atoms, size=size, replace=False))
            body = tuple(Literal(int(a), bool(rng.integers(2))) for a in atoms)
            rules.append(Rule(body, bool(rng.integers(2))))
        policy = Policy(spec.n_atoms, tuple(rules))
        decisions = deduce_batch(policy, contexts)
        if (decisions == 1).sum() >= minimum and (decisions == -1).sum() >= minimum:
            return policy
    raise DataGenerationError(
        f"no acceptable target policy within {spec.max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# glyphs


def _glyph_templates() -> tuple[np.ndarray, np.ndarray]:
    # Like the handwritten digits they stand in for, the two classes
    # differ strongly in total ink: a thin "1" versus a heavy "2".
    one = np.zeros((IMAGE_HW, IMAGE_HW), dtype=np.float32)
    one[5:23, 13:15] = 1.0          # vertical stroke
    for step in range(4):           # flag
        one[9 - step, 12 - step] = 1.0

    two = np.zeros((IMAGE_HW, IMAGE_HW), dtype=np.float32)
    two[4:8, 7:20] = 1.0            # top bar
    two[6:13, 15:20] = 1.0          # right descender
    for step in range(8):           # diagonal toward lower left
        row = 12 + step
        col = 13 - step
        two[row, col : col + 5] = 1.0
    two[20:24, 6:21] = 1.0          # bottom bar
    return one, two


def synth_glyphs(count: int, noise: float, rng: np.random.Generator) -> GlyphPool:
    """Deterministic stroke-template glyphs with noise and small shifts.

    ``noise`` is the per-pixel uniform amplitude; zero noise disables the
    shifts as well, so all glyphs of a class coincide.
    """
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must be in [0, 0.5)")
    one, two = _glyph_templates()
    pools = []
    for template in (one, two):
        images = np.repeat(template[None, :, :], count, axis=0)
        if noise > 0.0:
            shifts = rng.integers(-1, 2, size=(count, 2))
            for i, (dr, dc) in enumerate(shifts):
                images[i] = np.roll(images[i], (int(dr), int(dc)), axis=(0, 1))
            images = images + rng.uniform(-noise, noise, size=images.shape)
            images = np.clip(images, 0.0, 1.0)
        pools.append(images.astype(np.float32))
    return GlyphPool(positive=pools[0], negative=pools[1], source="synthetic")


def load_idx(images_path, labels_path) -> GlyphPool:
    """Read IDX image/label files, keeping digit-1 and digit-2 glyphs.

    Big-endian headers: images magic 0x803 then count/rows/cols, labels
    magic 0x801 then count.  Pixels scale to [0, 1].  ``.gz`` paths are
    decompressed transparently.
    """
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image/label count mismatch: {len(images)} vs {len(labels)}"
        )
    ones = images[labels == 1]
    twos = images[labels == 2]
    return GlyphPool(positive=ones, negative=twos, source="mnist")


def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_images(path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != 0x00000803:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} for images")
        if (rows, cols) != (IMAGE_HW, IMAGE_HW):
            raise IdxFormatError(f"{path}: expected 28x28 images, got {rows}x{cols}")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(f"{path}: truncated image data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
        return (pixels.astype(np.float32) / 255.0)


def _read_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">II", header)
        if magic != 0x00000801:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} for labels")
        raw = fh.read(count)
        if len(raw) != count:
            raise IdxFormatError(f"{path}: truncated label data")
        return np.frombuffer(raw, dtype=np.uint8)


# ---------------------------------------------------------------------------
# exemplar sets


def _sample_labeled_contexts(target, size, rng, max_chunks=400):
    n = target.n_atoms
    kept_ctx, kept_lab = [], []
    total = 0
    for _ in range(max_chunks):
        chunk = max(64, 2 * (size - total))
        contexts = rng.integers(0, 2, size=(chunk, n)).astype(bool)
        decisions = deduce_batch(target, contexts)
        mask = decisions != int(Decision.ABSTAIN)
        kept_ctx.append(contexts[mask])
        kept_lab.append(decisions[mask])
        total += int(mask.sum())
        if total >= size:
            contexts = np.concatenate(kept_ctx)[:size]
            labels = np.concatenate(kept_lab)[:size]
            return contexts, labels
    raise DataGenerationError(
        f"target policy abstains too often; got {total}/{size} instances"
    )


def _render_split(split, target, size, pool, rng):
    contexts, labels = _sample_labeled_contexts(target, size, rng)
    n_pos, n_neg = pool.counts
    if n_pos == 0 or n_neg == 0:
        raise DataGenerationError("glyph pool is missing a digit class")
    shape = contexts.shape
    pos_draw = rng.integers(0, n_pos, size=shape)
    neg_draw = rng.integers(0, n_neg, size=shape)
    slot_ids = np.where(contexts, pos_draw, n_pos + neg_draw).astype(np.int32)
    images = np.concatenate([pool.positive, pool.negative]).astype(np.float32)
    return ExemplarSet(
        split=split,
        n_atoms=target.n_atoms,
        pool=images,
        slot_ids=slot_ids,
        labels=labels.astype(np.int8),
        contexts=contexts,
    )


def build_exemplar_set(
    target: Policy,
    sizes: tuple[int, int, int],
    train_pool: GlyphPool,
    test_pool: GlyphPool,
    rng: np.random.Generator,
) -> dict[str, ExemplarSet]:
    """Construct train/val/test splits labeled by ``target``.

    Train and validation render from ``train_pool``; the held-out test
    split renders from the disjoint ``test_pool``.
    """
    train_size, val_size, test_size = sizes
    return {
        "train": _render_split("train", target, train_size, train_pool, rng),
        "val": _render_split("val", target, val_size, train_pool, rng),
        "test": _render_split("test", target, test_size, test_pool, rng),
    }


# ---------------------------------------------------------------------------
# persistence: manifest + packed little-endian float32 tensors

SPLIT_ORDER = ("train", "val", "test")


def save_dataset(directory, splits: dict[str, ExemplarSet], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offsets = {}
    cursor = 0
    with open(directory / DATA_NAME, "wb") as fh:
        for name in SPLIT_ORDER:
            es = splits[name]
            sections = {}
            for section, array in (
                ("images", es.images),
                ("labels", es.labels),
                ("contexts", es.contexts),
            ):
                blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
                fh.write(blob)
                sections[section] = {"offset": cursor, "bytes": len(blob)}
                cursor += len(blob)
            offsets[name] = {"count": len(es), "sections": sections}
    manifest = {
        "format": DATASET_FORMAT,
        "n_atoms": splits["train"].n_atoms,
        "splits": offsets,
        **meta,
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> tuple[dict[str, ExemplarSet], dict]:
    directory = Path(directory)
    with open(directory / MANIFEST_NAME, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset format {manifest.get('format')!r}")
    n_atoms = manifest["n_atoms"]
    raw = (directory / DATA_NAME).read_bytes()
    splits = {}
    for name in SPLIT_ORDER:
        entry = manifest["splits"][name]
        m = entry["count"]

        def read(section, shape):
            info = entry["sections"][section]
            flat = np.frombuffer(
                raw, dtype="<f4", count=info["bytes"] // 4, offset=info["offset"]
            )
            return flat.reshape(shape)

        images = read("images", (m, n_atoms, IMAGE_HW, IMAGE_HW)).astype(np.float32)
        labels = read("labels", (m,)).astype(np.int8)
        contexts = read("contexts", (m, n_atoms)).astype(bool)
        flat = images.reshape(m * n_atoms, -1)
        pool, inverse = np.unique(flat, axis=0, return_inverse=True)
        splits[name] = ExemplarSet(
            split=name,
            n_atoms=n_atoms,
            pool=pool.reshape(-1, IMAGE_HW, IMAGE_HW),
            slot_ids=inverse.reshape(m, n_atoms).astype(np.int32),
            labels=labels,
            contexts=contexts,
        )
    return splits, manifest
