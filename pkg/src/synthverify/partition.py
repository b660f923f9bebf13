"""Entity-level random partitioning for sub-sample-and-aggregate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidM, TooManyPartitions


def philox(seed) -> np.random.Generator:
    """Counter-based generator (Philox4x64) from an int, sequence of ints or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class PartitionPlan:
    M: int
    groups: np.ndarray  # per entity code -> partition 0..M-1
    entity_labels: np.ndarray
    seed: object = None

    @property
    def assignment(self) -> dict:
        """Entity label -> partition number in ``1..M``."""
        return {lbl: int(g) + 1 for lbl, g in zip(self.entity_labels, self.groups)}

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.M)

    def rows_of(self, entity_codes: np.ndarray) -> np.ndarray:
        """Partition index (0-based) for each row given its entity codes."""
        return self.groups[entity_codes]


def partition_entities(data, M: int, seed) -> PartitionPlan:
    """Shuffle the entities (seeded Philox permutation) and deal them round-robin into M sets.

    Every row of an entity follows the entity, so partitions are disjoint in
    entities, not merely in entity-years. Sizes differ by at most one.
    """
    if M < 2:
        raise InvalidM(f"M must be at least 2, got {M}")
    n = data.n_entities
    if M > n:
        raise TooManyPartitions(f"M={M} exceeds the number of entities ({n})")
    rng = philox(seed)
    order = rng.permutation(n)
    groups = np.empty(n, dtype=np.int64)
    groups[order] = np.arange(n) % M
    groups.setflags(write=False)
    return PartitionPlan(M=M, groups=groups, entity_labels=data.entity_labels, seed=seed)
