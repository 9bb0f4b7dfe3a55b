"""Validity (central symmetry, periodicity) and diversity (coverage, repeat) metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .lattice import Lattice, UnitCell


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    eps_sym: float = 0.05
    eps_per: float = 0.05
    eps_cov: float = 0.15
    eps_rep: float = 0.05

    def __post_init__(self):
        for name in ("eps_sym", "eps_per", "eps_cov", "eps_rep"):
            if getattr(self, name) <= 0:
                raise MetricError(f"{name} must be > 0")


def symmetry_score(cell: UnitCell, eps_sym: float = 0.05) -> float:
    """Central-symmetry score in [0, 1].

    A node i is symmetrical iff some node j satisfies
    ||p_i + p_j - 2 p_c|| < eps_sym, with p_c the node centroid (a node
    sitting exactly at the centroid pairs with itself). The per-node symmetry
    degree is (eps_max - s_error_i) / eps_max, clamped to [0, 1], where
    eps_max is the centroid-to-farthest-node distance.
    """
    pts = cell.nodes
    n = pts.shape[0]
    if n < 2:
        raise MetricError("symmetry_score requires at least 2 nodes")
    center = pts.mean(axis=0)
    # err[i, j] = ||p_i + p_j - 2 p_c||
    err = np.linalg.norm(pts[:, None, :] + pts[None, :, :] - 2 * center, axis=2)
    s_error = err.min(axis=1)
    eps_max = np.linalg.norm(pts - center, axis=1).max()
    if eps_max <= 0:
        return 0.0
    n_sym = int(np.count_nonzero(s_error < eps_sym))
    degrees = np.clip((eps_max - s_error) / eps_max, 0.0, 1.0)
    return float(np.clip(n_sym * degrees.sum() / (n * n), 0.0, 1.0))


def symmetry_validity(cells: Sequence[UnitCell], eps_sym: float = 0.05) -> float:
    if not cells:
        raise MetricError("empty structure list")
    return float(np.mean([symmetry_score(c, eps_sym) for c in cells]))


def periodicity_valid(lat: Lattice, eps_per: float = 0.05) -> bool:
    """Tileability check in the fractional frame: for every axis d there must be
    a node pair with p_i + e_d landing on p_j within eps_per (L1)."""
    pts = lat.cell.nodes
    for d in range(3):
        shifted = pts + np.eye(3)[d]
        dists = np.abs(shifted[:, None, :] - pts[None, :, :]).sum(axis=2)
        if not (dists < eps_per).any():
            return False
    return True


def periodicity_validity(lats: Sequence[Lattice], eps_per: float = 0.05) -> float:
    if not lats:
        raise MetricError("empty lattice list")
    return float(np.mean([periodicity_valid(l, eps_per) for l in lats]))


def structure_distance(a: UnitCell, b: UnitCell) -> float:
    """Symmetric Chamfer distance between node sets (halved sum of means)."""
    d = cdist(a.nodes, b.nodes)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def coverage_recall(
    generated: Sequence[UnitCell], test: Sequence[UnitCell], eps_cov: float = 0.15
) -> float:
    """Fraction of test structures with a generated structure within eps_cov."""
    if not test:
        raise MetricError("empty test set")
    if not generated:
        return 0.0
    hits = sum(
        1 for t in test if any(structure_distance(g, t) < eps_cov for g in generated)
    )
    return hits / len(test)


def repeat_ratio(generated: Sequence[UnitCell], eps_rep: float = 0.05) -> float:
    """Greedy match-once duplicate ratio, pairs scanned in ascending (i, j) order."""
    if not generated:
        raise MetricError("empty structure list")
    n = len(generated)
    used = [False] * n
    for i in range(n):
        if used[i]:
            continue
        for j in range(i + 1, n):
            if used[j]:
                continue
            if structure_distance(generated[i], generated[j]) < eps_rep:
                used[i] = used[j] = True
                break
    return sum(used) / n
