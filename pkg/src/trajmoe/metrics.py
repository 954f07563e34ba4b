"""Evaluation metrics: SSE, per-observation Pearson averaged across the
cohort, and stage-binned regional error maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .alignment import Placement, Subject
from .errors import InvalidCohort, ShapeMismatch
from .moe import Trajectory, predict_at


def sse(pred: np.ndarray, obs: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs obs {obs.shape}")
    d = pred - obs
    return float(np.sum(d * d))


@dataclass
class PearsonSummary:
    mean_r: float  # nan when no usable observations
    n_used: int
    n_skipped: int


def pearson_summary(pred: np.ndarray, obs: np.ndarray) -> PearsonSummary:
    """Pearson r across regions per observation row, averaged over rows.
    Rows where either vector has zero variance are skipped and counted."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if pred.shape != obs.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs obs {obs.shape}")
    rs = []
    skipped = 0
    for p, o in zip(pred, obs):
        pc = p - p.mean()
        oc = o - o.mean()
        vp = float(pc @ pc)
        vo = float(oc @ oc)
        if vp <= 0.0 or vo <= 0.0:
            skipped += 1
            continue
        rs.append(float(pc @ oc) / np.sqrt(vp * vo))
    if not rs:
        return PearsonSummary(mean_r=float("nan"), n_used=0, n_skipped=skipped)
    return PearsonSummary(mean_r=float(np.mean(rs)), n_used=len(rs), n_skipped=skipped)


def mean_pearson(pred: np.ndarray, obs: np.ndarray) -> float:
    return pearson_summary(pred, obs).mean_r


def collect_pairs(traj: Trajectory, placements: list[Placement],
                  subjects: list[Subject]):
    """Stacks (pred, obs, pseudo_time) rows for every placed scan, in
    placement order then scan order."""
    by_id = {s.id: s for s in subjects}
    preds, obss, taus = [], [], []
    for p in placements:
        s = by_id.get(p.subject_id)
        if s is None:
            raise InvalidCohort(f"placement for unknown subject {p.subject_id!r}")
        for gap, row in zip(s.gaps, s.obs):
            tau = p.t0 + gap
            preds.append(predict_at(traj, tau))
            obss.append(np.asarray(row, dtype=np.float64))
            taus.append(tau)
    n = traj.states.shape[1]
    if not preds:
        return np.empty((0, n)), np.empty((0, n)), np.empty(0)
    return np.stack(preds), np.stack(obss), np.array(taus)


@dataclass
class ErrorMap:
    edges: np.ndarray   # (bins+1,), edges[0]=0, edges[-1]=T
    mse: np.ndarray     # (bins, n); NaN rows where count == 0
    counts: np.ndarray  # (bins,) observations per bin

    @property
    def bins(self) -> int:
        return len(self.counts)


def regional_error_map(traj: Trajectory, placements: list[Placement],
                       subjects: list[Subject], bins: int = 4) -> ErrorMap:
    """Per-region mean squared residual, binned by the pseudo-time of each
    placed observation. Bins are [lo, hi) except the last, closed at T."""
    if bins < 1:
        raise InvalidCohort("error map needs at least one bin")
    t_end = traj.t_horizon
    edges = np.linspace(0.0, t_end, bins + 1)
    n = traj.states.shape[1]
    sq = np.zeros((bins, n))
    counts = np.zeros(bins, dtype=np.int64)
    pred, obs, taus = collect_pairs(traj, placements, subjects)
    for i in range(len(taus)):
        b = min(int(np.searchsorted(edges, taus[i], side="right")) - 1, bins - 1)
        b = max(b, 0)
        sq[b] += (pred[i] - obs[i]) ** 2
        counts[b] += 1
    mse = np.full((bins, n), np.nan)
    nz = counts > 0
    mse[nz] = sq[nz] / counts[nz, None]
    return ErrorMap(edges=edges, mse=mse, counts=counts)


def write_error_map_csv(path, region_names, em: ErrorMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "region", "mse", "count"])
        for b in range(em.bins):
            for j, name in enumerate(region_names):
                val = "" if em.counts[b] == 0 else repr(float(em.mse[b, j]))
                w.writerow([repr(float(em.edges[b])), repr(float(em.edges[b + 1])),
                            name, val, int(em.counts[b])])


def read_error_map_csv(path):
    """Returns (region_names, ErrorMap)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["bin_lo", "bin_hi", "region", "mse", "count"]:
        raise InvalidCohort(f"{path}: expected error-map header")
    seen_edges: list[tuple[float, float]] = []
    names: list[str] = []
    cells: dict[tuple[int, int], float] = {}
    counts: dict[int, int] = {}
    for row in rows[1:]:
        lo, hi, region, val, count = row
        edge = (float(lo), float(hi))
        if edge not in seen_edges:
            seen_edges.append(edge)
        b = seen_edges.index(edge)
        if region not in names:
            names.append(region)
        j = names.index(region)
        cells[(b, j)] = float(val) if val != "" else np.nan
        counts[b] = int(count)
    bins = len(seen_edges)
    n = len(names)
    mse = np.full((bins, n), np.nan)
    for (b, j), v in cells.items():
        mse[b, j] = v
    edges = np.array([seen_edges[0][0]] + [e[1] for e in seen_edges])
    cnt = np.array([counts[b] for b in range(bins)], dtype=np.int64)
    return tuple(names), ErrorMap(edges=edges, mse=mse, counts=cnt)
