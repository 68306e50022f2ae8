"""
DBSCAN over a uniform voxel grid and the multi-density cluster ensemble.

Neighbor search bins points into cubic cells of edge eps, so every neighbor
of a point lies in one of the 27 surrounding cells.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple
import logging
import os

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from labelforge.core.types import PointCloud
from labelforge.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = (1.2488, 0.8136, 0.6952, 0.594, 0.4353, 0.3221)
QUERY_CHUNK = 4096
CELL_SLACK = 1e-9


class VoxelGrid:
    """Fixed-radius neighbor queries on a hashed cubic grid."""

    def __init__(self, xyz: np.ndarray, eps: float):
        self.xyz = xyz
        self.eps_squared = eps * eps
        cell = eps * (1.0 + CELL_SLACK)
        # one cell of padding on every side keeps neighbor keys from aliasing
        coords = np.floor((xyz - xyz.min(axis=0)) / cell).astype(np.int64) + 1
        dims = coords.max(axis=0) + 2
        self.keys = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
        self.order = np.argsort(self.keys, kind="stable")
        self.sorted_keys = self.keys[self.order]
        steps = np.array([-1, 0, 1], dtype=np.int64)
        dx, dy, dz = np.meshgrid(steps, steps, steps, indexing="ij")
        self.offsets = ((dx * dims[1] + dy) * dims[2] + dz).reshape(-1)

    def pairs(self, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(i, j) for every point j within eps of query point i; (i, i) included."""
        candidates = self.keys[query][:, None] + self.offsets[None, :]
        lo = np.searchsorted(self.sorted_keys, candidates, side="left").reshape(-1)
        hi = np.searchsorted(self.sorted_keys, candidates, side="right").reshape(-1)
        counts = hi - lo
        owners = np.repeat(np.repeat(query, self.offsets.size), counts)
        steps_in_run = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        others = self.order[np.repeat(lo, counts) + steps_in_run]
        d2 = ((self.xyz[owners] - self.xyz[others]) ** 2).sum(axis=1)
        close = d2 <= self.eps_squared
        return owners[close], others[close]

    def chunked_pairs(self, query: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for start in range(0, query.size, QUERY_CHUNK):
            yield self.pairs(query[start:start + QUERY_CHUNK])


def dbscan(xyz: np.ndarray, eps: float, min_pts: int) -> List[np.ndarray]:
    """
    Euclidean DBSCAN on an M x 3 array.

    A core point has at least `min_pts` points within `eps` (inclusive, itself
    counted). Clusters are the connected components of core points, ranked by
    their smallest core index; a border point joins the best-ranked cluster
    among its core neighbors. Noise is dropped. Returns sorted index arrays,
    ordered by smallest member.
    """
    if not eps > 0:
        raise ConfigError(f"DBSCAN eps must be positive, got {eps}")
    if min_pts < 1:
        raise ConfigError(f"DBSCAN min_pts must be at least 1, got {min_pts}")
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise DataError(f"DBSCAN expects M x 3 coordinates, got shape {xyz.shape}")
    n = xyz.shape[0]
    if n == 0:
        return []

    grid = VoxelGrid(xyz, eps)
    everyone = np.arange(n)

    neighbors = np.zeros(n, dtype=np.int64)
    for owners, _ in grid.chunked_pairs(everyone):
        neighbors += np.bincount(owners, minlength=n)
    core = neighbors >= min_pts
    core_points = np.flatnonzero(core)
    if core_points.size == 0:
        return []

    # union core-core edges chunk by chunk; labels[i] names i's component so far
    labels = np.arange(n)
    for owners, others in grid.chunked_pairs(core_points):
        linked = core[others] & (owners != others)
        if not linked.any():
            continue
        a, b = labels[owners[linked]], labels[others[linked]]
        graph = coo_matrix((np.ones(a.size, dtype=np.int32), (a, b)), shape=(n, n))
        _, components = connected_components(graph, directed=False)
        labels = components[labels]

    core_labels = labels[core_points]
    unique_labels, first = np.unique(core_labels, return_index=True)
    by_smallest_core = unique_labels[np.argsort(core_points[first], kind="stable")]
    rank = np.full(n, -1, dtype=np.int64)
    rank[by_smallest_core] = np.arange(by_smallest_core.size)

    assigned = np.full(n, -1, dtype=np.int64)
    assigned[core_points] = rank[core_labels]

    outside = np.flatnonzero(~core)
    if outside.size:
        unranked = np.iinfo(np.int64).max
        best = np.full(n, unranked, dtype=np.int64)
        for owners, others in grid.chunked_pairs(outside):
            reach = core[others]
            np.minimum.at(best, owners[reach], rank[labels[others[reach]]])
        border = outside[best[outside] != unranked]
        assigned[border] = best[border]

    members = np.flatnonzero(assigned >= 0)
    order = np.argsort(assigned[members], kind="stable")
    _, starts = np.unique(assigned[members][order], return_index=True)
    clusters = np.split(members[order], starts[1:])
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


@dataclass(frozen=True, eq=False)
class ClusterPool:
    """Candidate clusters over one scan from every ensemble member; may overlap."""

    clusters: Tuple[np.ndarray, ...] = field(default=(), repr=False)
    epsilons: Tuple[float, ...] = ()
    min_pts: int = 5

    def __len__(self) -> int:
        return len(self.clusters)


def build_cluster_ensemble(
    cloud: PointCloud,
    ground_mask: np.ndarray,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    min_pts: int = 5,
    workers: Optional[int] = None,
) -> ClusterPool:
    """
    Run DBSCAN once per density threshold on the non-ground points.

    Identical point sets are kept once (first epsilon wins). Clusters that
    lost border points to a better-ranked neighbor and fell below `min_pts`
    are not pooled.
    """
    epsilons = tuple(float(e) for e in epsilons)
    if not epsilons:
        raise ConfigError("The DBSCAN ensemble needs at least one epsilon")
    ground_mask = np.asarray(ground_mask, dtype=bool)
    if ground_mask.shape != (len(cloud),):
        raise DataError(f"Ground mask has {ground_mask.size} entries for a scan of {len(cloud)} points")

    remaining = np.flatnonzero(~ground_mask)
    if remaining.size == 0:
        return ClusterPool((), (), min_pts)
    xyz = cloud.xyz[remaining]

    workers = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=min(workers, len(epsilons))) as executor:
        runs = list(executor.map(lambda eps: dbscan(xyz, eps, min_pts), epsilons))

    seen = set()
    clusters, sources = [], []
    for eps, found in zip(epsilons, runs):
        for cluster in found:
            if cluster.size < min_pts:
                continue
            indices = remaining[cluster]
            fingerprint = indices.tobytes()
            if fingerprint in seen:
                continue
            seen.add(fingerprint)
            indices.setflags(write=False)
            clusters.append(indices)
            sources.append(eps)

    logger.debug(
        f"Scan {cloud.scan_id!r}: {len(clusters)} distinct clusters from {len(epsilons)} densities "
        f"over {remaining.size} non-ground points"
    )
    return ClusterPool(tuple(clusters), tuple(sources), min_pts)
