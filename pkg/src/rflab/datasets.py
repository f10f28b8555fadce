"""Seeded 2D toy distributions standing in for an image dataset."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .oracle import GaussianMixture

RING_RADIUS = 4.0
RING_STD = 0.2
RING_MODES = 8


class DatasetKind(str, enum.Enum):
    RING8 = "ring8"
    MOONS = "moons"
    CHECKERBOARD = "checkerboard"
    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"


def ring_centers(radius=RING_RADIUS, n=RING_MODES):
    ang = 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass(frozen=True)
class Dataset:
    """A sampler with a fixed seed.

    ``mixture`` is only read for ``MIXTURE``; ``mean``/``std`` only for
    ``GAUSSIAN``. Kinds with a closed-form density expose it through
    :meth:`as_mixture` so the exact oracle fields can be built from them.
    """

    kind: DatasetKind = DatasetKind.RING8
    seed: int = 0
    mean: tuple = (0.0, 0.0)
    std: float = 1.0
    mixture: GaussianMixture | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        if self.kind is DatasetKind.MIXTURE and self.mixture is None:
            raise ValueError("mixture datasets need a GaussianMixture")

    @property
    def dim(self):
        if self.kind is DatasetKind.GAUSSIAN:
            return len(self.mean)
        if self.kind is DatasetKind.MIXTURE:
            return self.mixture.dim
        return 2

    @property
    def n_labels(self):
        return {
            DatasetKind.RING8: RING_MODES,
            DatasetKind.MOONS: 2,
            DatasetKind.MIXTURE: self.mixture.n_labels if self.mixture is not None else 0,
        }.get(self.kind, 0)

    def as_mixture(self) -> GaussianMixture:
        if self.kind is DatasetKind.RING8:
            return GaussianMixture.isotropic(ring_centers(), RING_STD)
        if self.kind is DatasetKind.GAUSSIAN:
            mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
            return GaussianMixture.isotropic(mean, self.std)
        if self.kind is DatasetKind.MIXTURE:
            return self.mixture
        raise ValueError(f"{self.kind.value} has no closed-form mixture density")

    def __call__(self, rng: np.random.Generator, n: int):
        """Draw ``(points, labels)``; ``labels`` is ``None`` for unlabeled kinds."""
        k = self.kind
        if k in (DatasetKind.RING8, DatasetKind.MIXTURE):
            return self.as_mixture().sample(n, rng)
        if k is DatasetKind.GAUSSIAN:
            x, _ = self.as_mixture().sample(n, rng)
            return x, None
        if k is DatasetKind.MOONS:
            labels = rng.integers(0, 2, n)
            ang = rng.uniform(0.0, np.pi, n)
            outer = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            inner = np.stack([1.0 - np.cos(ang), 0.5 - np.sin(ang)], axis=1)
            x = np.where(labels[:, None] == 0, outer, inner)
            x = 2.0 * (x - [0.5, 0.25]) + 0.1 * rng.standard_normal((n, 2))
            return x, labels
        # checkerboard: 4x4 board on [-4, 4]^2, occupied where floor(x)+floor(y) is even
        col = rng.integers(0, 4, n)
        row = 2 * rng.integers(0, 2, n) + (col % 2)
        u = rng.random((n, 2))
        x = np.stack([col + u[:, 0], row + u[:, 1]], axis=1) * 2.0 - 4.0
        return x, None


def sample_dataset(ds: Dataset, n: int, stream: int = 0):
    """``n`` i.i.d. draws from the dataset's own seed.

    ``stream`` picks an independent substream (e.g. 1 for held-out data).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([ds.seed, stream])
    return ds(rng, n)
