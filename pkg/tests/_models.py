"""Random forests with arbitrary topology, for codec and quantizer tests."""

import numpy as np

from distconformal.scoring import ScoreModel


def random_forest(rng, dim=None, n_trees=None, max_depth=4) -> ScoreModel:
    dim = dim or int(rng.integers(1, 40))
    n_trees = n_trees or int(rng.integers(1, 6))
    feature, params, offsets = [], [], [0]
    rights = []

    def grow(depth, base):
        node = len(feature)
        if depth < max_depth and rng.random() < 0.6:
            feature.append(int(rng.integers(0, dim)))
            params.append(float(rng.normal() * 3))
            rights.append(-1)
            grow(depth + 1, base)
            rights[node] = len(feature) - base
            grow(depth + 1, base)
        else:
            feature.append(-1)
            params.append(float(rng.random()))
            rights.append(-1)

    for _ in range(n_trees):
        base = len(feature)
        grow(0, base)
        offsets.append(len(feature))
    return ScoreModel(
        dim=dim,
        feature=np.array(feature, dtype=np.int32),
        right=np.array(rights, dtype=np.int32),
        params=np.array(params),
        tree_offsets=np.array(offsets, dtype=np.int64),
    )
