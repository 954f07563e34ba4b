"""Cohort I/O, normalization, positivity cutoffs, and synthetic cohorts.

Raw cohorts arrive as per-scan CSV rows (subject, ISO date, region values);
modeling works on [0,1]-normalized subjects with within-subject gaps in
years. The synthetic generator integrates a known ground-truth system,
scatters subjects along its time axis, and emits noisy snapshots plus the
ground truth needed to score recovery.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import Subject, validate_subject
from .autodiff import Tape
from .errors import ConfigError, DegenerateRange, InvalidCohort, NonFiniteInput
from .graph import Connectome, GraphOperators, build_operators, load_connectome
from .mechanistic import MechanisticParams, eval_f_M
from .moe import Trajectory, rk4_unrolled, states_at

DAYS_PER_YEAR = 365.25
VARIANCE_FLOOR = 1e-6
GMM_MAX_ITERS = 500
GMM_TOL = 1e-8


# ---------------------------------------------------------------------------
# raw cohort and normalization


@dataclass
class RawSubject:
    id: str
    dates: list[datetime.date]
    values: np.ndarray  # (m, n), unnormalized


@dataclass
class RawCohort:
    region_names: tuple[str, ...]
    subjects: list[RawSubject]


@dataclass
class NormParams:
    lo: float
    hi: float


def load_raw_cohort(path) -> RawCohort:
    import csv as _csv

    with open(path, newline="") as fh:
        rows = list(_csv.reader(fh))
    if not rows or len(rows[0]) < 3 or rows[0][:2] != ["subject_id", "scan_date"]:
        raise InvalidCohort(f"{path}: expected header subject_id,scan_date,region_...")
    region_names = tuple(rows[0][2:])
    if len(set(region_names)) != len(region_names):
        raise InvalidCohort(f"{path}: duplicate region columns")
    order: list[str] = []
    by_id: dict[str, list[tuple[datetime.date, np.ndarray]]] = {}
    for row in rows[1:]:
        if len(row) != 2 + len(region_names):
            raise InvalidCohort(f"{path}: malformed row {row!r}")
        sid = row[0]
        try:
            date = datetime.date.fromisoformat(row[1])
        except ValueError as e:
            raise InvalidCohort(f"{path}: bad scan_date {row[1]!r}: {e}") from None
        vals = np.array([float(v) for v in row[2:]])
        if sid not in by_id:
            by_id[sid] = []
            order.append(sid)
        by_id[sid].append((date, vals))
    subjects = []
    for sid in order:
        scans = by_id[sid]
        dates = [d for d, _ in scans]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise InvalidCohort(f"subject {sid}: scan dates must be strictly increasing")
        subjects.append(RawSubject(id=sid, dates=dates,
                                   values=np.stack([v for _, v in scans])))
    return RawCohort(region_names=region_names, subjects=subjects)


def normalize(raw: RawCohort) -> tuple[list[Subject], NormParams]:
    """Global min-max over all participants and regions; gaps in years."""
    all_vals = np.concatenate([s.values.ravel() for s in raw.subjects])
    if not np.all(np.isfinite(all_vals)):
        raise NonFiniteInput("raw cohort contains non-finite values")
    lo, hi = float(all_vals.min()), float(all_vals.max())
    if hi - lo < 1e-12:
        raise DegenerateRange(f"value range [{lo}, {hi}] too narrow to normalize")
    subjects = []
    for s in raw.subjects:
        d0 = s.dates[0]
        gaps = tuple((d - d0).days / DAYS_PER_YEAR for d in s.dates)
        obs = (s.values - lo) / (hi - lo)
        subjects.append(Subject(id=s.id, gaps=gaps, obs=obs))
    return subjects, NormParams(lo=lo, hi=hi)


def denormalize(values: np.ndarray, params: NormParams) -> np.ndarray:
    return np.asarray(values) * (params.hi - params.lo) + params.lo


# ---------------------------------------------------------------------------
# normalized cohort JSONL


def read_cohort_jsonl(path, n: int | None = None) -> list[Subject]:
    subjects = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidCohort(f"{path}:{lineno}: bad JSON: {e}") from None
            if not isinstance(rec, dict) or set(rec) != {"id", "gaps", "obs"}:
                raise InvalidCohort(f"{path}:{lineno}: expected keys id, gaps, obs")
            s = Subject(id=str(rec["id"]), gaps=tuple(float(g) for g in rec["gaps"]),
                        obs=np.asarray(rec["obs"], dtype=np.float64))
            if s.obs.ndim != 2:
                raise InvalidCohort(f"{path}:{lineno}: obs must be a matrix")
            if n is None:
                n = s.obs.shape[1]
            validate_subject(s, n)
            if s.id in seen:
                raise InvalidCohort(f"{path}:{lineno}: duplicate subject id {s.id!r}")
            seen.add(s.id)
            subjects.append(s)
    if not subjects:
        raise InvalidCohort(f"{path}: empty cohort")
    return subjects


def write_cohort_jsonl(path, subjects: list[Subject]) -> None:
    with open(path, "w") as fh:
        for s in subjects:
            rec = {"id": s.id, "gaps": list(s.gaps),
                   "obs": [[float(v) for v in row] for row in s.obs]}
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# two-component GMM positivity cutoffs


@dataclass
class GmmCutoff:
    mu_neg: float
    sigma_neg: float
    mu_pos: float
    sigma_pos: float
    weight_neg: float
    cutoff: float
    degenerate: bool = False


def _log_normal_pdf(x, mu, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def _single_gaussian_fallback(x: np.ndarray) -> GmmCutoff:
    mu = float(x.mean())
    sigma = float(np.sqrt(max(x.var(), VARIANCE_FLOOR)))
    return GmmCutoff(mu_neg=mu, sigma_neg=sigma, mu_pos=mu, sigma_pos=sigma,
                     weight_neg=1.0, cutoff=mu + sigma, degenerate=True)


def fit_gmm_cutoff(values) -> GmmCutoff:
    """Two-component 1-D Gaussian mixture by EM; cutoff = mu_neg + sigma_neg
    with the lower-mean component labeled negative. Collapsed fits fall back
    to a single Gaussian (cutoff mu + sigma) with ``degenerate`` set."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size < 20:
        raise InvalidCohort(f"gmm cutoff needs >= 20 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("gmm cutoff input contains non-finite values")
    if x.var() < VARIANCE_FLOOR:
        return _single_gaussian_fallback(x)

    # two-means on the sorted sample seeds the mixture
    c0, c1 = float(np.quantile(x, 0.25)), float(np.quantile(x, 0.75))
    for _ in range(50):
        mid = 0.5 * (c0 + c1)
        left, right = x[x <= mid], x[x > mid]
        if left.size == 0 or right.size == 0:
            break
        n0, n1 = float(left.mean()), float(right.mean())
        if n0 == c0 and n1 == c1:
            break
        c0, c1 = n0, n1
    mid = 0.5 * (c0 + c1)
    left, right = x[x <= mid], x[x > mid]
    if left.size == 0 or right.size == 0:
        return _single_gaussian_fallback(x)
    w = left.size / x.size
    mu = np.array([left.mean(), right.mean()])
    var = np.maximum(np.array([left.var(), right.var()]), VARIANCE_FLOOR)

    loglik_prev = -np.inf
    for _ in range(GMM_MAX_ITERS):
        lp0 = np.log(w) + _log_normal_pdf(x, mu[0], var[0])
        lp1 = np.log1p(-w) + _log_normal_pdf(x, mu[1], var[1])
        m = np.maximum(lp0, lp1)
        lse = m + np.log(np.exp(lp0 - m) + np.exp(lp1 - m))
        loglik = float(lse.sum())
        r0 = np.exp(lp0 - lse)
        s0 = float(r0.sum())
        s1 = x.size - s0
        if s0 < 1.0 or s1 < 1.0:
            return _single_gaussian_fallback(x)
        w = s0 / x.size
        mu = np.array([float((r0 * x).sum()) / s0,
                       float(((1.0 - r0) * x).sum()) / s1])
        var = np.array([
            max(float((r0 * (x - mu[0]) ** 2).sum()) / s0, VARIANCE_FLOOR),
            max(float(((1.0 - r0) * (x - mu[1]) ** 2).sum()) / s1, VARIANCE_FLOOR),
        ])
        if abs(loglik - loglik_prev) < GMM_TOL:
            break
        loglik_prev = loglik

    if abs(mu[0] - mu[1]) < 1e-8 or min(w, 1.0 - w) < 1e-3:
        return _single_gaussian_fallback(x)
    neg, pos = (0, 1) if mu[0] < mu[1] else (1, 0)
    w_neg = w if neg == 0 else 1.0 - w
    sig = np.sqrt(var)
    return GmmCutoff(mu_neg=float(mu[neg]), sigma_neg=float(sig[neg]),
                     mu_pos=float(mu[pos]), sigma_pos=float(sig[pos]),
                     weight_neg=float(w_neg),
                     cutoff=float(mu[neg] + sig[neg]), degenerate=False)


def compute_cutoffs(subjects: list[Subject]) -> list[GmmCutoff]:
    stacked = np.concatenate([s.obs for s in subjects], axis=0)
    return [fit_gmm_cutoff(stacked[:, j]) for j in range(stacked.shape[1])]


def write_cutoffs_csv(path, region_names, cutoffs: list[GmmCutoff]) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["region", "mu_neg", "sigma_neg", "mu_pos", "sigma_pos",
                    "weight_neg", "cutoff", "degenerate"])
        for name, c in zip(region_names, cutoffs):
            w.writerow([name, repr(c.mu_neg), repr(c.sigma_neg), repr(c.mu_pos),
                        repr(c.sigma_pos), repr(c.weight_neg), repr(c.cutoff),
                        int(c.degenerate)])


def positivity_summary(subjects: list[Subject], cutoffs: list[GmmCutoff]) -> dict[str, float]:
    """Per subject: fraction of (scan, region) values above the region cutoff."""
    cut = np.array([c.cutoff for c in cutoffs])
    out = {}
    for s in subjects:
        out[s.id] = float(np.mean(s.obs > cut[None, :]))
    return out


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class GenConfig:
    n_regions: int = 8
    graph: str = "ring"            # ring | path | complete | a connectome CSV path
    n_subjects: int = 60
    t_horizon: float = 12.0
    step: float = 0.1
    dynamics: str = "mechanistic"  # mechanistic | two_regime | checkpoint
    k: float = 0.2
    alpha: float = 0.8
    seed_regions: tuple[int, ...] = (0,)
    c0_base: float = 0.05
    c0_seed_value: float = 0.25
    noise_sd: float = 0.01
    gap_lo: float = 0.5
    gap_hi: float = 2.0
    two_scan_prob: float = 0.5
    regime_steepness: float = 2.0
    checkpoint: str = ""

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.dynamics not in ("mechanistic", "two_regime", "checkpoint"):
            raise ConfigError(f"unknown dynamics {self.dynamics!r}")
        if self.dynamics == "checkpoint" and not self.checkpoint:
            raise ConfigError("dynamics=checkpoint requires a checkpoint path")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if not (0.0 < self.gap_lo <= self.gap_hi):
            raise ConfigError("need 0 < gap_lo <= gap_hi")
        if not (0.0 <= self.two_scan_prob <= 1.0):
            raise ConfigError("two_scan_prob must be in [0, 1]")


@dataclass
class GroundTruth:
    dynamics: str
    k: float
    alpha: float
    c0: np.ndarray
    t0: dict[str, float]
    gate_times: np.ndarray   # (G+1,)
    gate_betas: np.ndarray   # (G+1, 3)
    states: np.ndarray       # (G+1, n)


def build_graph(kind: str, n: int) -> Connectome:
    names = tuple(f"region_{i + 1}" for i in range(n))
    a = np.zeros((n, n))
    if kind == "ring":
        for i in range(n):
            j = (i + 1) % n
            a[i, j] = a[j, i] = 1.0
    elif kind == "path":
        for i in range(n - 1):
            a[i, i + 1] = a[i + 1, i] = 1.0
    elif kind == "complete":
        a = np.ones((n, n)) - np.eye(n)
    else:
        return load_connectome(kind)
    return Connectome(region_names=names, adjacency=a)


def true_gate(cfg: GenConfig, t: float) -> np.ndarray:
    """Ground-truth mixture weights for the generator dynamics."""
    if cfg.dynamics == "two_regime":
        w = ad._sigmoid(np.float64(cfg.regime_steepness * (t - 0.5 * cfg.t_horizon)))
        return np.array([0.9 - 0.8 * w, 0.0, 0.1 + 0.8 * w])
    return np.array([1.0, 0.0, 0.0])


def _true_fields(cfg: GenConfig, ops: GraphOperators, c: np.ndarray, t: float):
    """(diffusion+reaction, pure diffusion, pure reaction) component fields."""
    mech = MechanisticParams.from_rates(ops.n, cfg.k, cfg.alpha)
    full = eval_f_M(mech, ops, c, t)
    diff_only = -cfg.k * (ops.laplacian @ c)
    react_only = cfg.alpha * c * (1.0 - c)
    return full, diff_only, react_only


def true_rhs(cfg: GenConfig, ops: GraphOperators, c: np.ndarray, t: float) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if cfg.dynamics == "two_regime":
        _, diff_only, react_only = _true_fields(cfg, ops, c, t)
        beta = true_gate(cfg, t)
        return beta[0] * diff_only + beta[2] * react_only
    full, _, _ = _true_fields(cfg, ops, c, t)
    return full


def _true_c0(cfg: GenConfig, n: int) -> np.ndarray:
    c0 = np.full(n, cfg.c0_base)
    for i in cfg.seed_regions:
        if i < 0 or i >= n:
            raise ConfigError(f"seed region {i} out of range for n={n}")
        c0[i] = cfg.c0_seed_value
    return c0


def true_trajectory(cfg: GenConfig, graph: Connectome) -> tuple[Trajectory, np.ndarray]:
    """Integrates the generator dynamics; returns (trajectory, gate curve)."""
    if cfg.dynamics == "checkpoint":
        from .checkpoint import load_checkpoint
        from .moe import eval_gate, integrate

        model, _ = load_checkpoint(cfg.checkpoint)
        ops = build_operators(graph)
        traj = integrate(model, ops)
        betas = np.stack([eval_gate(model, float(t)) for t in traj.times])
        return traj, betas
    ops = build_operators(graph)
    tape = Tape(grad=False)
    c0_node = tape.constant(_true_c0(cfg, ops.n))

    def rhs(c_node, t):
        return tape.constant(true_rhs(cfg, ops, c_node.value, t)), None

    times, state_nodes, _ = rk4_unrolled(rhs, c0_node, cfg.t_horizon, cfg.step, tape)
    states = np.stack([s.value for s in state_nodes])
    betas = np.stack([true_gate(cfg, float(t)) for t in times])
    return Trajectory(times=times, states=states), betas


def generate_synthetic(cfg: GenConfig, seed: int):
    """Returns (graph, subjects, ground_truth)."""
    graph = build_graph(cfg.graph, cfg.n_regions)
    traj, betas = true_trajectory(cfg, graph)
    rng = np.random.default_rng(seed)
    subjects = []
    t0_map = {}
    width = max(3, len(str(cfg.n_subjects)))
    for i in range(cfg.n_subjects):
        sid = f"subj_{i + 1:0{width}d}"
        two = rng.random() < cfg.two_scan_prob
        if two:
            gap = float(rng.uniform(cfg.gap_lo, min(cfg.gap_hi, cfg.t_horizon)))
            gaps = (0.0, gap)
        else:
            gaps = (0.0,)
        t0 = float(rng.uniform(0.0, cfg.t_horizon - gaps[-1]))
        clean = states_at(traj, [t0 + g for g in gaps])
        if cfg.noise_sd > 0:
            obs = np.clip(clean + rng.normal(0.0, cfg.noise_sd, clean.shape), 0.0, 1.0)
        else:
            obs = clean
        subjects.append(Subject(id=sid, gaps=gaps, obs=obs))
        t0_map[sid] = t0
    truth = GroundTruth(dynamics=cfg.dynamics, k=cfg.k, alpha=cfg.alpha,
                        c0=traj.states[0].copy(), t0=t0_map,
                        gate_times=traj.times.copy(), gate_betas=betas,
                        states=traj.states.copy())
    return graph, subjects, truth


def write_ground_truth(path, truth: GroundTruth) -> None:
    rec = {
        "dynamics": truth.dynamics,
        "k": truth.k,
        "alpha": truth.alpha,
        "c0": [float(v) for v in truth.c0],
        "t0": {k: float(v) for k, v in truth.t0.items()},
        "gate_times": [float(t) for t in truth.gate_times],
        "gate_betas": [[float(b) for b in row] for row in truth.gate_betas],
        "states": [[float(v) for v in row] for row in truth.states],
    }
    with open(path, "w") as fh:
        json.dump(rec, fh, sort_keys=True)
        fh.write("\n")


def read_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        rec = json.load(fh)
    return GroundTruth(
        dynamics=rec["dynamics"], k=float(rec["k"]), alpha=float(rec["alpha"]),
        c0=np.asarray(rec["c0"], dtype=np.float64),
        t0={k: float(v) for k, v in rec["t0"].items()},
        gate_times=np.asarray(rec["gate_times"], dtype=np.float64),
        gate_betas=np.asarray(rec["gate_betas"], dtype=np.float64),
        states=np.asarray(rec["states"], dtype=np.float64),
    )
