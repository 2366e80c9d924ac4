"""Subject-level 5-fold cross-validation plans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.model_selection import KFold

from .._torch import derive_seed

N_FOLDS = 5


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    seed: int

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                "folds": [{"index": f.index, "train": list(f.train), "test": list(f.test)}
                          for f in self.folds]}


def make_folds(subject_ids, seed: int = 0) -> FoldPlan:
    """Shuffle subjects deterministically and split them into 5 near-equal test folds.

    Every fold trains on the remaining subjects, so no subject ever appears
    on both sides of a fold.
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if len(ids) < N_FOLDS:
        raise ValueError(f"need at least {N_FOLDS} subjects for {N_FOLDS}-fold cross-validation, got {len(ids)}")
    kf = KFold(n_splits=N_FOLDS, shuffle=True, random_state=derive_seed(seed, "folds"))
    arr = np.asarray(ids, dtype=object)
    folds = tuple(
        Fold(i, tuple(arr[tr].tolist()), tuple(arr[te].tolist()))
        for i, (tr, te) in enumerate(kf.split(arr))
    )
    return FoldPlan(folds, int(seed))
