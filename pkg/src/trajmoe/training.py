"""Joint trajectory/alignment fitting.

The objective is L = L_traj + lambda1 * L_norm + lambda2 * L_ortho:

  L_traj   squared residuals between placed observations and the trajectory;
  L_norm   Frobenius norms of the two neural experts' outputs along the grid
           (the mechanistic expert is exempt);
  L_ortho  squared dot products between centered expert outputs at the
           placed observation times, both orders counted.

The outer loop alternates inner gradient epochs on the model (placements
fixed) with re-placement of the training subjects on the updated trajectory.
Validation subjects are re-placed after every inner epoch and their
trajectory loss drives model selection; the best-validation snapshot is
returned whether or not the loop converges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import Placement, Subject, align_cohort
from .autodiff import Tape, bind_params
from .errors import ConfigError, Diverged, NonFiniteState
from .graph import Connectome, build_operators
from .metrics import collect_pairs, pearson_summary, regional_error_map, sse
from .moe import (ModelConfig, MoeModel, RhsBuilder, Trajectory, _locate,
                  eval_gate, init_model, integrate)

CONVERGENCE_STREAK = 5


@dataclass
class TrainConfig:
    lambda1: float = 1e-2
    lambda2: float = 1e-3
    learning_rate: float = 1e-3
    inner_epochs: int = 20
    max_outer_iters: int = 50
    convergence_tol: float = 1e-3
    seed: int = 0
    val_size: int = 35
    test_size: int = 35
    ortho_on_grid: bool = False
    error_map_bins: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.inner_epochs < 1 or self.max_outer_iters < 1:
            raise ConfigError("inner_epochs and max_outer_iters must be >= 1")
        if self.val_size < 0 or self.test_size < 0:
            raise ConfigError("val_size and test_size must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1, "lambda2": self.lambda2,
            "learning_rate": self.learning_rate,
            "inner_epochs": self.inner_epochs,
            "max_outer_iters": self.max_outer_iters,
            "convergence_tol": self.convergence_tol,
            "seed": self.seed, "val_size": self.val_size,
            "test_size": self.test_size, "ortho_on_grid": self.ortho_on_grid,
            "error_map_bins": self.error_map_bins,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }


# ---------------------------------------------------------------------------
# loss construction


def _sum_nodes(tape: Tape, nodes: list):
    if not nodes:
        return tape.constant(np.float64(0.0))
    acc = nodes[0]
    for x in nodes[1:]:
        acc = ad.add(acc, x)
    return acc


def _interp_nodes(nodes, times, tau: float):
    j, w = _locate(times, tau)
    if w == 0.0:
        return nodes[j]
    return ad.add(ad.scale(nodes[j], 1.0 - w), ad.scale(nodes[j + 1], w))


def _traj_term(tape, result, placements, by_id):
    terms = []
    taus = []
    for p in placements:
        s = by_id[p.subject_id]
        for gap, row in zip(s.gaps, s.obs):
            tau = p.t0 + gap
            taus.append(tau)
            pred = _interp_nodes(result.state_nodes, result.trajectory.times, tau)
            r = ad.sub(pred, tape.constant(np.asarray(row, dtype=np.float64)))
            terms.append(ad.reduce_sum(ad.hadamard(r, r)))
    return _sum_nodes(tape, terms), taus


def _norm_term(tape, result):
    parts = []
    for idx in (1, 2):
        sq = _sum_nodes(tape, [
            ad.reduce_sum(ad.hadamard(e[idx], e[idx])) for e in result.expert_nodes
        ])
        parts.append(ad.sqrt(sq))
    return ad.add(parts[0], parts[1])


def _ortho_term(tape, result, taus):
    times = result.trajectory.times
    points = [
        [_interp_nodes([e[p] for e in result.expert_nodes], times, tau) for tau in taus]
        for p in range(3)
    ]
    m = len(taus)
    centered = []
    for p in range(3):
        mean = ad.scale(_sum_nodes(tape, points[p]), 1.0 / m)
        centered.append([ad.sub(x, mean) for x in points[p]])
    terms = []
    for i in range(m):
        for p in range(3):
            for q in range(p + 1, 3):
                d = ad.reduce_sum(ad.hadamard(centered[p][i], centered[q][i]))
                terms.append(ad.hadamard(d, d))
    return ad.scale(_sum_nodes(tape, terms), 2.0)


def build_loss(model: MoeModel, ops, placements: list[Placement],
               subjects: list[Subject], tcfg: TrainConfig, tape: Tape):
    """Records the full objective; returns (loss_node, parts, leaves)."""
    by_id = {s.id: s for s in subjects}
    leaves = bind_params(tape, model.params)
    result = integrate(model, ops, tape=tape, leaves=leaves)
    l_traj, taus = _traj_term(tape, result, placements, by_id)
    total = l_traj
    parts = {"traj": float(l_traj.value), "norm": 0.0, "ortho": 0.0}
    regularized = not model.config.physical_only
    if regularized and tcfg.lambda1 > 0:
        l_norm = _norm_term(tape, result)
        parts["norm"] = float(l_norm.value)
        total = ad.add(total, ad.scale(l_norm, tcfg.lambda1))
    if regularized and tcfg.lambda2 > 0:
        pts = [float(t) for t in result.trajectory.times] if (tcfg.ortho_on_grid or not taus) else taus
        l_ortho = _ortho_term(tape, result, pts)
        parts["ortho"] = float(l_ortho.value)
        total = ad.add(total, ad.scale(l_ortho, tcfg.lambda2))
    parts["total"] = float(total.value)
    return total, parts, leaves


# public single-term evaluators (plain values)


def loss_traj(model: MoeModel, ops, placements: list[Placement],
              subjects: list[Subject]) -> float:
    from .alignment import subject_sse

    traj = integrate(model, ops)
    by_id = {s.id: s for s in subjects}
    return float(sum(subject_sse(traj, by_id[p.subject_id], p.t0) for p in placements))


def _grid_expert_values(model: MoeModel, ops, traj: Trajectory) -> np.ndarray:
    """(G+1, 3, n) unweighted expert outputs at the trajectory's grid states."""
    tape = Tape(grad=False)
    builder = RhsBuilder(model, ops, tape)
    out = np.empty((len(traj.times), 3, traj.states.shape[1]))
    for i, t in enumerate(traj.times):
        c = tape.constant(traj.states[i])
        f_m, f_s, f_l = builder.experts(c, float(t))
        out[i, 0], out[i, 1], out[i, 2] = f_m.value, f_s.value, f_l.value
    return out


def loss_norm(model: MoeModel, ops, traj: Trajectory) -> float:
    if model.config.physical_only:
        return 0.0
    f = _grid_expert_values(model, ops, traj)
    return float(np.sqrt((f[:, 1] ** 2).sum()) + np.sqrt((f[:, 2] ** 2).sum()))


def loss_ortho(model: MoeModel, ops, traj: Trajectory, taus=None) -> float:
    """Squared centered-output correlations; evaluation points default to the
    full grid, or follow ``taus`` with outputs linearly interpolated between
    grid evaluations."""
    grid = _grid_expert_values(model, ops, traj)
    if taus is None:
        f = grid
    else:
        f = np.empty((len(taus), 3, grid.shape[2]))
        for i, tau in enumerate(taus):
            j, w = _locate(traj.times, float(tau))
            f[i] = grid[j] if w == 0.0 else (1.0 - w) * grid[j] + w * grid[j + 1]
    centered = f - f.mean(axis=0, keepdims=True)
    total = 0.0
    for p in range(3):
        for q in range(p + 1, 3):
            d = np.einsum("ij,ij->i", centered[:, p], centered[:, q])
            total += float((d * d).sum())
    return 2.0 * total


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# fit report


@dataclass
class FitReport:
    converged: bool
    n_outer: int
    best_val: float
    best_outer: int
    best_epoch: int
    outer: list[dict]
    test_sse: float | None
    test_mean_pearson: float | None
    test_n_used: int
    test_n_skipped: int
    gate_times: np.ndarray
    gate_betas: np.ndarray
    placements: dict[str, list[Placement]]
    error_map_edges: np.ndarray
    error_map_mse: np.ndarray
    error_map_counts: np.ndarray
    region_names: tuple[str, ...]
    model_config: dict
    train_config: dict

    def to_json(self) -> str:
        def places(key):
            return [{"id": p.subject_id, "t0": float(p.t0), "sse": float(p.sse)}
                    for p in self.placements[key]]

        mse_rows = [[None if not np.isfinite(v) else float(v) for v in row]
                    for row in self.error_map_mse]
        doc = {
            "converged": self.converged,
            "n_outer": self.n_outer,
            "best_val": float(self.best_val),
            "best_outer": self.best_outer,
            "best_epoch": self.best_epoch,
            "outer": self.outer,
            "test": {
                "sse": None if self.test_sse is None else float(self.test_sse),
                "mean_pearson": (None if self.test_mean_pearson is None
                                 or not np.isfinite(self.test_mean_pearson)
                                 else float(self.test_mean_pearson)),
                "n_used": self.test_n_used,
                "n_skipped": self.test_n_skipped,
            },
            "gate": {
                "times": [float(t) for t in self.gate_times],
                "betas": [[float(b) for b in row] for row in self.gate_betas],
            },
            "placements": {k: places(k) for k in ("train", "val", "test")},
            "error_map": {
                "edges": [float(e) for e in self.error_map_edges],
                "mse": mse_rows,
                "counts": [int(c) for c in self.error_map_counts],
            },
            "region_names": list(self.region_names),
            "model_config": self.model_config,
            "train_config": self.train_config,
        }
        return json.dumps(doc, sort_keys=True)


# ---------------------------------------------------------------------------
# dual-optimization loop


def split_cohort(subjects: list[Subject], rng: np.random.Generator,
                 val_size: int, test_size: int):
    """Random subject-level split; subsets keep the original cohort order."""
    n = len(subjects)
    if val_size + test_size >= n:
        raise ConfigError(
            f"val_size + test_size = {val_size + test_size} leaves no training "
            f"subjects out of {n}")
    perm = rng.permutation(n)
    val_idx = set(int(i) for i in perm[:val_size])
    test_idx = set(int(i) for i in perm[val_size:val_size + test_size])
    train, val, test = [], [], []
    for i, s in enumerate(subjects):
        (val if i in val_idx else test if i in test_idx else train).append(s)
    return train, val, test


def _mech_prior_model(mcfg: ModelConfig) -> MoeModel:
    prior_cfg = ModelConfig(
        n=mcfg.n, t_horizon=mcfg.t_horizon, step=mcfg.step,
        physical_only=True, learn_v=False,
        mech_k_init=mcfg.mech_k_init, mech_alpha_init=mcfg.mech_alpha_init,
        c0_base=mcfg.c0_base, c0_seed_value=mcfg.c0_seed_value,
        seed_regions=mcfg.seed_regions)
    return init_model(prior_cfg, np.random.default_rng(0))


def _freeze_mask(model: MoeModel) -> np.ndarray | None:
    if not model.config.freeze_mech:
        return None
    mask = np.ones(model.params.size)
    for name, sl in model.params.flat_slices().items():
        if name.startswith("mech."):
            mask[sl] = 0.0
    return mask


def fit(subjects: list[Subject], connectome: Connectome, mcfg: ModelConfig,
        tcfg: TrainConfig) -> tuple[MoeModel, FitReport]:
    if len(subjects) < 3:
        raise ConfigError(f"need at least 3 subjects, got {len(subjects)}")
    if mcfg.n != connectome.n:
        raise ConfigError(f"model n={mcfg.n} != connectome n={connectome.n}")
    ops = build_operators(connectome)
    rng = np.random.default_rng(tcfg.seed)
    train_s, val_s, test_s = split_cohort(subjects, rng, tcfg.val_size, tcfg.test_size)
    model = init_model(mcfg, rng, region_names=connectome.region_names)

    # temporal initialization: place training subjects on the prior trajectory
    try:
        prior_traj = integrate(_mech_prior_model(mcfg), ops)
    except NonFiniteState as e:
        raise Diverged(f"initial placement trajectory diverged: {e}") from e
    placements = align_cohort(prior_traj, train_s)

    adam = Adam(model.params.size, tcfg.learning_rate,
                tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    mask = _freeze_mask(model)
    best_val = np.inf
    best_params = model.params.copy()
    best_outer = best_epoch = 0
    prev_outer_val = None
    streak = 0
    converged = False
    outer_records = []

    def val_metric(traj: Trajectory) -> tuple[float, list[Placement]]:
        if val_s:
            pl = align_cohort(traj, val_s)
            return float(sum(p.sse for p in pl)), pl
        pl = align_cohort(traj, train_s)
        return float(sum(p.sse for p in pl)), pl

    n_outer = 0
    for outer in range(1, tcfg.max_outer_iters + 1):
        n_outer = outer
        rec = {"iteration": outer, "train_total": [], "train_traj": [],
               "train_norm": [], "train_ortho": [], "val_traj": []}
        traj_after = None
        for epoch in range(1, tcfg.inner_epochs + 1):
            tape = Tape(grad=True)
            try:
                loss_node, parts, leaves = build_loss(
                    model, ops, placements, train_s, tcfg, tape)
            except NonFiniteState as e:
                raise Diverged(f"integration diverged during training: {e}") from e
            if not np.isfinite(parts["total"]):
                raise Diverged(f"non-finite training loss {parts['total']!r}")
            tape.backward(loss_node)
            g = ad.grads_flat(model.params, leaves)
            if not np.all(np.isfinite(g)):
                raise Diverged("non-finite gradient")
            if mask is not None:
                g = g * mask
            model.params.set_flat(adam.step(model.params.flat(), g))

            rec["train_total"].append(parts["total"])
            rec["train_traj"].append(parts["traj"])
            rec["train_norm"].append(parts["norm"])
            rec["train_ortho"].append(parts["ortho"])
            try:
                traj_after = integrate(model, ops)
            except NonFiniteState as e:
                raise Diverged(f"integration diverged after update: {e}") from e
            v, _ = val_metric(traj_after)
            rec["val_traj"].append(v)
            if v < best_val:
                best_val = v
                best_params = model.params.copy()
                best_outer, best_epoch = outer, epoch

        # temporal alignment: re-place training subjects on the new trajectory
        placements = align_cohort(traj_after, train_s)
        tape = Tape(grad=False)
        _, parts, _ = build_loss(model, ops, placements, train_s, tcfg, tape)
        rec["train_total_after_realign"] = parts["total"]
        rec["train_traj_after_realign"] = parts["traj"]
        outer_records.append(rec)

        v_outer = rec["val_traj"][-1]
        if prev_outer_val is not None:
            rel = abs(v_outer - prev_outer_val) / max(abs(prev_outer_val), 1e-12)
            streak = streak + 1 if rel < tcfg.convergence_tol else 0
            if streak >= CONVERGENCE_STREAK:
                converged = True
        prev_outer_val = v_outer
        if converged:
            break

    final = MoeModel(config=mcfg, params=best_params,
                     region_names=tuple(connectome.region_names))
    traj = integrate(final, ops)
    train_pl = align_cohort(traj, train_s)
    val_pl = align_cohort(traj, val_s) if val_s else []
    test_pl = align_cohort(traj, test_s) if test_s else []

    if test_pl:
        pred, obs, _ = collect_pairs(traj, test_pl, test_s)
        test_sse = sse(pred, obs)
        psum = pearson_summary(pred, obs)
        test_pearson, n_used, n_skipped = psum.mean_r, psum.n_used, psum.n_skipped
    else:
        test_sse, test_pearson, n_used, n_skipped = None, None, 0, 0

    all_pl = train_pl + val_pl + test_pl
    emap = regional_error_map(traj, all_pl, subjects, bins=tcfg.error_map_bins)
    betas = np.stack([eval_gate(final, float(t)) for t in traj.times])

    report = FitReport(
        converged=converged, n_outer=n_outer, best_val=float(best_val),
        best_outer=best_outer, best_epoch=best_epoch, outer=outer_records,
        test_sse=test_sse, test_mean_pearson=test_pearson,
        test_n_used=n_used, test_n_skipped=n_skipped,
        gate_times=traj.times, gate_betas=betas,
        placements={"train": train_pl, "val": val_pl, "test": test_pl},
        error_map_edges=emap.edges, error_map_mse=emap.mse,
        error_map_counts=emap.counts, region_names=tuple(connectome.region_names),
        model_config=mcfg.to_dict(), train_config=tcfg.to_dict(),
    )
    return final, report
