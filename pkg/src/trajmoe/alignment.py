"""Per-subject temporal placement against a dense cohort trajectory.

Each subject carries one or more observation vectors at known within-subject
gaps; their absolute position on the cohort time axis is unknown. The
placement of a subject is the onset t0 minimizing

    sse(t0) = sum_i || obs_i - c(t0 + gap_i) ||^2

over the feasible window [0, T - gap_last]. The search is an exhaustive
scan on a half-step grid followed by golden-section refinement around the
best grid point; the returned value never exceeds the best grid value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CohortAlignmentError, InfeasibleWindow, InvalidCohort
from .moe import Trajectory, predict_at

GOLDEN_TOL = 1e-4
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class Subject:
    id: str
    gaps: tuple[float, ...]
    obs: np.ndarray  # (m, n)

    @property
    def m(self) -> int:
        return len(self.gaps)

    @property
    def span(self) -> float:
        return float(self.gaps[-1])


def validate_subject(subject: Subject, n: int) -> None:
    if not subject.id:
        raise InvalidCohort("subject id must be a non-empty string")
    gaps = subject.gaps
    if len(gaps) == 0 or gaps[0] != 0.0:
        raise InvalidCohort(f"subject {subject.id}: first gap must be 0.0")
    if any(b <= a for a, b in zip(gaps, gaps[1:])):
        raise InvalidCohort(f"subject {subject.id}: gaps must be strictly increasing")
    obs = np.asarray(subject.obs, dtype=np.float64)
    if obs.shape != (len(gaps), n):
        raise InvalidCohort(
            f"subject {subject.id}: obs shape {obs.shape} != ({len(gaps)}, {n})")
    if not np.all(np.isfinite(obs)):
        raise InvalidCohort(f"subject {subject.id}: non-finite observation values")


@dataclass
class Placement:
    subject_id: str
    t0: float
    sse: float


def subject_sse(traj: Trajectory, subject: Subject, t0: float) -> float:
    total = 0.0
    for gap, row in zip(subject.gaps, subject.obs):
        r = row - predict_at(traj, t0 + gap)
        total += float(r @ r)
    return total


def align_subject(traj: Trajectory, subject: Subject) -> Placement:
    t_end = traj.t_horizon
    hi = t_end - subject.span
    if hi < 0.0:
        raise InfeasibleWindow(
            f"subject {subject.id}: observation span {subject.span:.6g} exceeds "
            f"horizon {t_end:.6g}")

    def f(t0: float) -> float:
        return subject_sse(traj, subject, t0)

    # exhaustive scan at half the integration step, endpoint included
    spacing = 0.5 * traj.step
    k_max = int(np.floor(hi / spacing + 1e-9))
    candidates = [k * spacing for k in range(k_max + 1)]
    if candidates[-1] < hi - 1e-12:
        candidates.append(hi)
    best_t, best_sse = candidates[0], f(candidates[0])
    for t0 in candidates[1:]:
        v = f(t0)
        if v < best_sse:
            best_t, best_sse = t0, v

    # golden-section refinement on the bracket around the grid winner
    a = max(0.0, best_t - spacing)
    b = min(hi, best_t + spacing)
    if b - a > GOLDEN_TOL:
        c = b - _INVPHI * (b - a)
        d = a + _INVPHI * (b - a)
        fc, fd = f(c), f(d)
        while b - a > GOLDEN_TOL:
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - _INVPHI * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + _INVPHI * (b - a)
                fd = f(d)
        refined = 0.5 * (a + b)
        v = f(refined)
        if v < best_sse:
            best_t, best_sse = refined, v
    return Placement(subject_id=subject.id, t0=float(best_t), sse=float(best_sse))


def align_cohort(traj: Trajectory, subjects: list[Subject]) -> list[Placement]:
    """Placements in input order; individual failures are collected and
    raised together so one bad subject does not hide the rest."""
    placements = []
    failures = []
    for s in subjects:
        try:
            placements.append(align_subject(traj, s))
        except InfeasibleWindow as e:
            failures.append((s.id, e))
    if failures:
        raise CohortAlignmentError(failures)
    return placements


def write_placements(path, placements: list[Placement]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t0", "sse"])
        for p in placements:
            w.writerow([p.subject_id, repr(float(p.t0)), repr(float(p.sse))])


def read_placements(path) -> list[Placement]:
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "t0", "sse"]:
        raise InvalidCohort(f"{path}: expected header id,t0,sse")
    for row in rows[1:]:
        if len(row) != 3:
            raise InvalidCohort(f"{path}: malformed row {row!r}")
        out.append(Placement(subject_id=row[0], t0=float(row[1]), sse=float(row[2])))
    return out
