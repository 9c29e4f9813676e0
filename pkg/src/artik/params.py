"""Bounded parameter vectors addressed by name into a mechanism."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionMismatch


@dataclass
class ParamEntry:
    """One estimable scalar, e.g. ``"pole.mass"`` or ``"pole.inertia[1]"``."""

    name: str
    lo: float
    hi: float
    ground_truth: Optional[float] = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"{self.name}: lo ({self.lo}) must be < hi ({self.hi})")


@dataclass
class ParamSpec:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def names(self):
        return [e.name for e in self.entries]

    @property
    def lo(self):
        return np.array([e.lo for e in self.entries], dtype=float)

    @property
    def hi(self):
        return np.array([e.hi for e in self.entries], dtype=float)

    @property
    def span(self):
        return self.hi - self.lo

    @property
    def ground_truth(self):
        if any(e.ground_truth is None for e in self.entries):
            return None
        return np.array([e.ground_truth for e in self.entries], dtype=float)

    def contains(self, theta, tol=0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lo - tol) and np.all(theta <= self.hi + tol))

    def normalize(self, theta):
        return (np.asarray(theta, dtype=float) - self.lo) / self.span

    def denormalize(self, u):
        return self.lo + np.asarray(u, dtype=float) * self.span

    def sample(self, rng, n):
        return self.denormalize(rng.uniform(size=(n, len(self))))

    def without_truth(self) -> "ParamSpec":
        return ParamSpec([ParamEntry(e.name, e.lo, e.hi) for e in self.entries])

    def to_json(self):
        return [{"name": e.name, "lo": e.lo, "hi": e.hi, "ground_truth": e.ground_truth}
                for e in self.entries]

    @classmethod
    def from_json(cls, doc):
        return cls([ParamEntry(d["name"], float(d["lo"]), float(d["hi"]), d.get("ground_truth"))
                    for d in doc])


def nmae(theta, theta_true, spec: ParamSpec) -> float:
    """Mean absolute error with each coordinate divided by its allowed range."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    theta_true = np.asarray(theta_true, dtype=float).reshape(-1)
    if theta.shape != theta_true.shape or theta.shape[0] != len(spec):
        raise DimensionMismatch(
            f"nmae: got {theta.shape[0]} estimates, {theta_true.shape[0]} truths, {len(spec)} entries")
    return float(np.mean(np.abs(theta - theta_true) / spec.span))
