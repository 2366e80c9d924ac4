"""Phantoms, augmentation, cross-validation folds and experiment orchestration."""

from .augment import AugmentSpec, augment
from .folds import FoldPlan, make_folds
from .phantom import PhantomSpec, gen_phantom

__all__ = ["AugmentSpec", "FoldPlan", "PhantomSpec", "augment", "gen_phantom", "make_folds"]
