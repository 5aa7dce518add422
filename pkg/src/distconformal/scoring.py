"""Positive-unlabeled datasets and learned non-conformity scores.

A score model is a binary classifier trained to separate known nulls
(label 0) from an unlabeled mixture of calibration nulls and test points
(label 1). Its class-1 probability is the non-conformity score: larger
values mean the point looks less like the local null sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Protocol, Sequence

import numpy as np

from . import _kernels
from .errors import InvalidInputError, InvalidSplitError


class Learner(IntEnum):
    FOREST = 1


@dataclass(frozen=True)
class PUDataset:
    """Training nulls plus the unordered calibration/test mixture.

    ``unlabeled_mix`` is stored in canonical (lexicographic) order so that
    anything trained on it cannot depend on how the caller ordered the
    calibration and test points. ``mix_source`` maps each canonical row back
    to its origin: values ``< cal_count`` index ``calibration``, the rest
    index ``tests`` after subtracting ``cal_count``.
    """

    train_nulls: np.ndarray
    calibration: np.ndarray
    tests: np.ndarray
    unlabeled_mix: np.ndarray
    mix_source: np.ndarray

    @property
    def dim(self) -> int:
        return self.train_nulls.shape[1]

    @property
    def cal_count(self) -> int:
        return self.calibration.shape[0]

    @property
    def test_count(self) -> int:
        return self.tests.shape[0]


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Indices that sort rows lexicographically (first column most significant)."""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(points.T[::-1])


def _as_matrix(points, name: str, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, dim if dim is not None else 0)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-d array of points, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise InvalidInputError(f"{name} has dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def pu_from_split(train_nulls, calibration, tests) -> PUDataset:
    """Assemble a PU dataset from an explicit train/calibration split."""
    train = _as_matrix(train_nulls, "train_nulls")
    cal = _as_matrix(calibration, "calibration", train.shape[1])
    tst = _as_matrix(tests, "tests", train.shape[1])
    if train.shape[0] == 0 or cal.shape[0] == 0:
        raise InvalidSplitError(
            f"need at least one training and one calibration null, got k={train.shape[0]}, "
            f"l={cal.shape[0]}"
        )
    mix = np.vstack([cal, tst])
    order = canonical_order(mix)
    return PUDataset(
        train_nulls=train,
        calibration=cal,
        tests=tst,
        unlabeled_mix=mix[order],
        mix_source=order,
    )


def build_pu_dataset(nulls, tests, train_fraction: float = 0.5, seed: int = 0) -> PUDataset:
    """Split ``nulls`` into training and calibration parts and build the PU dataset.

    ``k = floor(train_fraction * n)`` nulls, chosen by a seeded shuffle, go to
    training; the remaining ``n - k`` become calibration points.
    """
    nulls = _as_matrix(nulls, "nulls")
    n = nulls.shape[0]
    if not 0 < train_fraction < 1:
        raise InvalidInputError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    k = math.floor(train_fraction * n)
    if k == 0 or n - k == 0:
        raise InvalidSplitError(f"cannot split {n} nulls with train_fraction={train_fraction}")
    perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
    return pu_from_split(nulls[perm[:k]], nulls[perm[k:]], _as_matrix(tests, "tests", nulls.shape[1]))


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 3
    min_leaf: int = 5
    max_features: int | None = None  # None -> ceil(sqrt(d))

    def features_for(self, dim: int) -> int:
        if self.max_features is None:
            return max(1, math.ceil(math.sqrt(dim)))
        return max(1, min(self.max_features, dim))

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise InvalidInputError(f"invalid forest configuration {self}")


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """A trained forest in flat preorder form.

    ``feature[i] == -1`` marks a leaf. ``params[i]`` is the split threshold of
    an internal node or the class-1 probability of a leaf. ``right[i]`` is the
    tree-local index of the right child (the left child is ``i + 1``).
    """

    dim: int
    feature: np.ndarray
    right: np.ndarray
    params: np.ndarray
    tree_offsets: np.ndarray
    learner: Learner = Learner.FOREST
    train_seed: int | None = None

    @property
    def n_trees(self) -> int:
        return len(self.tree_offsets) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.params)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == _kernels.LEAF

    def same_params(self, other: "ScoreModel") -> bool:
        return (
            self.dim == other.dim
            and np.array_equal(self.feature, other.feature)
            and np.array_equal(self.right, other.right)
            and np.array_equal(self.tree_offsets, other.tree_offsets)
            and self.params.tobytes() == other.params.tobytes()
        )

    def score(self, points) -> np.ndarray:
        """Scores for a batch of points, shape ``(n,)``."""
        X = _as_matrix(points, "points", self.dim)
        return _kernels.predict(X, self.feature, self.right, self.params, self.tree_offsets)


def stump(threshold: float, left_value: float, right_value: float, feature: int = 0, dim: int = 1) -> ScoreModel:
    """A single one-split tree; handy for hand-checked examples."""
    return ScoreModel(
        dim=dim,
        feature=np.array([feature, -1, -1], dtype=np.int32),
        right=np.array([2, -1, -1], dtype=np.int32),
        params=np.array([threshold, left_value, right_value], dtype=np.float64),
        tree_offsets=np.array([0, 3], dtype=np.int64),
    )


def combine_trees(models: Sequence[ScoreModel]) -> ScoreModel:
    """Concatenate the trees of several forests into one forest."""
    if not models:
        raise InvalidInputError("need at least one model")
    dim = models[0].dim
    if any(m.dim != dim for m in models):
        raise InvalidInputError("models disagree on dimension")
    offsets = [0]
    for m in models:
        offsets.extend(offsets[-1] + int(o) for o in m.tree_offsets[1:])
    return ScoreModel(
        dim=dim,
        feature=np.concatenate([m.feature for m in models]),
        right=np.concatenate([m.right for m in models]),
        params=np.concatenate([m.params for m in models]),
        tree_offsets=np.asarray(offsets, dtype=np.int64),
        learner=models[0].learner,
    )


def train_score_model(data: PUDataset, config: ForestConfig = ForestConfig(), seed: int = 0) -> ScoreModel:
    """Fit a random forest separating ``train_nulls`` from ``unlabeled_mix``.

    Training only sees the canonical mix, so the result is invariant to the
    storage order of calibration and test points. Each tree draws its
    bootstrap sample from a Philox stream keyed by ``(seed, tree index)``.
    """
    if data.unlabeled_mix.shape[1] != data.dim:
        raise InvalidInputError("train_nulls and unlabeled_mix disagree on dimension")
    X = np.ascontiguousarray(np.vstack([data.train_nulls, data.unlabeled_mix]))
    y = np.concatenate(
        [np.zeros(len(data.train_nulls), dtype=np.int8), np.ones(len(data.unlabeled_mix), dtype=np.int8)]
    )
    n = len(y)
    mf = config.features_for(data.dim)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    features, rights, params, offsets = [], [], [], [0]
    for t in range(config.n_trees):
        ss = np.random.SeedSequence([seed, t])
        rng = np.random.Generator(np.random.Philox(ss))
        weight = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        tree_key = np.uint64(ss.generate_state(1, dtype=np.uint64)[0])
        f, r, p = _kernels.build_tree(X, y, weight, tree_key, mf, config.max_depth, config.min_leaf)
        features.append(f)
        rights.append(r)
        params.append(p)
        offsets.append(offsets[-1] + len(p))

    return ScoreModel(
        dim=data.dim,
        feature=np.concatenate(features),
        right=np.concatenate(rights),
        params=np.concatenate(params),
        tree_offsets=np.asarray(offsets, dtype=np.int64),
        train_seed=seed,
    )


class Evaluator(Protocol):
    dim: int

    def score(self, points) -> np.ndarray: ...


def evaluate(model: Evaluator, point) -> float:
    """Score of a single point."""
    x = np.asarray(point, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a single point, got shape {x.shape}")
    if x.shape[0] != model.dim:
        raise InvalidInputError(f"point has dimension {x.shape[0]}, model expects {model.dim}")
    return float(model.score(x[None, :])[0])


def composite_scores(local: Evaluator, remotes: Sequence[Evaluator], points) -> np.ndarray:
    """Pointwise maximum of the local score and every remote surrogate score."""
    out = local.score(points)
    for r in remotes:
        if r.dim != local.dim:
            raise InvalidInputError(f"remote model dimension {r.dim} != local {local.dim}")
        np.maximum(out, r.score(points), out=out)
    return out


def composite_score(local: Evaluator, remotes: Sequence[Evaluator], point) -> float:
    x = np.asarray(point, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != local.dim:
        raise InvalidInputError(f"point shape {x.shape} does not match model dimension {local.dim}")
    return float(composite_scores(local, remotes, x[None, :])[0])


@dataclass(frozen=True)
class ScoredBlock:
    calibration_scores: np.ndarray
    test_scores: np.ndarray


def score_block(data: PUDataset, local: Evaluator, remotes: Sequence[Evaluator] = ()) -> ScoredBlock:
    return ScoredBlock(
        calibration_scores=composite_scores(local, remotes, data.calibration),
        test_scores=composite_scores(local, remotes, data.tests),
    )
