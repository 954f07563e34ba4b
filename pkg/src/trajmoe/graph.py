"""Weighted undirected graphs over brain regions and their discrete
differential operators (degree, Laplacian, incidence)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AsymmetryTooLarge,
    DuplicateRegionName,
    NegativeWeight,
    NonSquare,
    NonzeroDiagonal,
)

ASYMMETRY_TOL = 1e-6
DIAGONAL_TOL = 1e-12


@dataclass
class Connectome:
    """Symmetric nonnegative adjacency over n >= 2 named regions.

    Immutable after construction: the adjacency buffer is write-protected.
    """

    region_names: tuple[str, ...]
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        names = tuple(str(s) for s in self.region_names)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NonSquare(f"adjacency must be square, got shape {a.shape}")
        n = a.shape[0]
        if n < 2:
            raise NonSquare(f"need at least 2 regions, got {n}")
        if len(names) != n:
            raise NonSquare(f"{len(names)} region names for {n} rows")
        if len(set(names)) != n:
            dupes = sorted({s for s in names if names.count(s) > 1})
            raise DuplicateRegionName(f"duplicate region names: {dupes}")
        asym = float(np.max(np.abs(a - a.T))) if n else 0.0
        if asym > ASYMMETRY_TOL:
            raise AsymmetryTooLarge(f"max |A - A^T| = {asym:.3g} exceeds {ASYMMETRY_TOL}")
        a = 0.5 * (a + a.T)
        if float(np.max(np.abs(np.diag(a)))) > DIAGONAL_TOL:
            raise NonzeroDiagonal("adjacency diagonal must be zero")
        np.fill_diagonal(a, 0.0)
        if np.any(a < 0):
            raise NegativeWeight("adjacency entries must be >= 0")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "region_names", names)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Nonzero upper-triangular pairs in sorted (u < v) order."""
        iu, iv = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(iu.tolist(), iv.tolist()))

    @property
    def e(self) -> int:
        return len(self.edges)


@dataclass
class GraphOperators:
    """Dense L = D - A plus the signed incidence K with edge weights w,
    satisfying K @ diag(w) @ K.T == L. Edge order is sorted upper-triangular;
    orientation is +1 at u, -1 at v."""

    laplacian: np.ndarray
    degree: np.ndarray
    incidence: np.ndarray
    edge_weights: np.ndarray
    edges: list[tuple[int, int]]
    adjacency: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.laplacian.shape[0]


def build_operators(g: Connectome) -> GraphOperators:
    a = g.adjacency
    n = g.n
    deg = np.diag(a.sum(axis=1))
    lap = deg - a
    edges = g.edges
    k = np.zeros((n, len(edges)))
    w = np.zeros(len(edges))
    for j, (u, v) in enumerate(edges):
        k[u, j] = 1.0
        k[v, j] = -1.0
        w[j] = a[u, v]
    for m in (lap, deg, k, w):
        m.setflags(write=False)
    return GraphOperators(laplacian=lap, degree=deg, incidence=k, edge_weights=w,
                          edges=edges, adjacency=a)


def load_connectome(path) -> Connectome:
    """Read a connectome CSV: header row of region names, then n rows of n
    comma-separated weights. Symmetrizes tiny asymmetry by averaging."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise NonSquare(f"{path}: empty file")
    names = [c.strip() for c in rows[0]]
    n = len(names)
    data = rows[1:]
    if len(data) != n:
        raise NonSquare(f"{path}: {len(data)} data rows for {n} regions")
    a = np.zeros((n, n))
    for i, row in enumerate(data):
        if len(row) != n:
            raise NonSquare(f"{path}: row {i + 1} has {len(row)} values, expected {n}")
        try:
            a[i] = [float(c) for c in row]
        except ValueError as exc:
            raise NonSquare(f"{path}: row {i + 1}: {exc}")
    return Connectome(region_names=tuple(names), adjacency=a)


def write_connectome(path, g: Connectome) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(g.region_names)
        for row in g.adjacency:
            writer.writerow([repr(float(x)) for x in row])
