"""Sparse point-set algebra: intersections and IoU between families of index sets."""

from typing import Sequence

import numpy as np
from scipy import sparse


def membership_matrix(index_sets: Sequence[np.ndarray], num_items: int) -> sparse.csr_matrix:
    """Row k marks the members of index_sets[k] (indices must be unique per set)."""
    sizes = np.array([len(s) for s in index_sets], dtype=np.int64)
    if sizes.sum() == 0:
        return sparse.csr_matrix((len(index_sets), num_items), dtype=np.int64)
    rows = np.repeat(np.arange(len(index_sets)), sizes)
    cols = np.concatenate([np.asarray(s, dtype=np.int64) for s in index_sets])
    data = np.ones(cols.size, dtype=np.int64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(len(index_sets), num_items))


def intersection_counts(
    a_sets: Sequence[np.ndarray], b_sets: Sequence[np.ndarray], num_items: int
) -> np.ndarray:
    """Dense |a_sets| x |b_sets| matrix of intersection sizes."""
    if not len(a_sets) or not len(b_sets):
        return np.zeros((len(a_sets), len(b_sets)), dtype=np.int64)
    a = membership_matrix(a_sets, num_items)
    b = membership_matrix(b_sets, num_items)
    return np.asarray((a @ b.T).todense(), dtype=np.int64)


def iou_matrix(
    a_sets: Sequence[np.ndarray], b_sets: Sequence[np.ndarray], num_items: int
) -> np.ndarray:
    """Dense |a_sets| x |b_sets| matrix of intersection-over-union; 0 where both sets are empty."""
    inter = intersection_counts(a_sets, b_sets, num_items)
    a_sizes = np.array([len(s) for s in a_sets], dtype=np.int64)
    b_sizes = np.array([len(s) for s in b_sets], dtype=np.int64)
    union = a_sizes[:, None] + b_sizes[None, :] - inter
    return np.divide(inter, union, out=np.zeros(inter.shape, dtype=np.float64), where=union > 0)


def claim_by_priority(
    index_sets: Sequence[np.ndarray], priority: Sequence[int], num_items: int
) -> list:
    """
    Make sets pairwise disjoint: every contested item goes to the set that comes
    first in `priority` (a permutation of set positions).

    Returns the clipped sets in their original positions.
    """
    owner = np.full(num_items, -1, dtype=np.int64)
    for position in priority:
        members = np.asarray(index_sets[position], dtype=np.int64)
        free = members[owner[members] == -1]
        owner[free] = position
    clipped = []
    for position, members in enumerate(index_sets):
        members = np.asarray(members, dtype=np.int64)
        clipped.append(members[owner[members] == position])
    return clipped


def larger_first(index_sets: Sequence[np.ndarray]) -> list:
    """Priority order by descending size, ties to the earlier position."""
    sizes = np.array([len(s) for s in index_sets], dtype=np.int64)
    return list(np.lexsort((np.arange(sizes.size), -sizes)))
