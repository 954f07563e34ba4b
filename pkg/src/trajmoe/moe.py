"""Stage-aware mixture model and its fixed-step integrator.

The combined right-hand side is

    dc/dt = beta_1(t) f_M + beta_2(t) f_S + beta_3(t) f_L

with beta(t) = softmax of a small network on normalized time (so beta lives
on the probability simplex for every t). Trajectories come from classic RK4
with a fixed step recorded on an autodiff tape, which makes gradients of any
trajectory functional exact for the discrete solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore, Tape, bind_params
from .errors import ConfigError, NonFiniteInput, NonFiniteState, OutOfWindow
from .graph import GraphOperators
from .ignd import IgndBuilder, IgndConfig, init_ignd_params
from .local_expert import LocalExpertConfig, build_f_L, init_local_params
from .mechanistic import DEFAULT_ALPHA, DEFAULT_K, MechanisticParams, rhs_node

N_EXPERTS = 3


@dataclass
class ModelConfig:
    n: int
    t_horizon: float = 12.0
    step: float = 0.1
    ignd: IgndConfig = field(default_factory=IgndConfig)
    local: LocalExpertConfig = field(default_factory=LocalExpertConfig)
    gate_hidden: int = 16
    gate_init_bias: tuple[float, float, float] = (2.0, 0.0, 0.0)
    gate_time_dependent: bool = True
    physical_only: bool = False
    learn_v: bool = False
    freeze_mech: bool = False
    mech_k_init: float = DEFAULT_K
    mech_alpha_init: float = DEFAULT_ALPHA
    c0_base: float = 0.05
    c0_seed_value: float = 0.25
    seed_regions: tuple[int, ...] = ()

    def __post_init__(self):
        if self.t_horizon <= 0 or self.step <= 0:
            raise ConfigError("t_horizon and step must be positive")
        g = round(self.t_horizon / self.step)
        if g < 1 or abs(g * self.step - self.t_horizon) > 1e-9 * max(1.0, self.t_horizon):
            raise ConfigError(f"t_horizon/step = {self.t_horizon}/{self.step} is not an integer")

    @property
    def grid_steps(self) -> int:
        return round(self.t_horizon / self.step)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "t_horizon": self.t_horizon,
            "step": self.step,
            "ignd": {
                "latent_dim": self.ignd.latent_dim,
                "encoder_widths": list(self.ignd.encoder_widths),
                "prop_hidden": self.ignd.prop_hidden,
                "prop_out": self.ignd.prop_out,
                "dec_widths": list(self.ignd.dec_widths),
                "time_encoding": self.ignd.time_encoding,
                "mask_to_support": self.ignd.mask_to_support,
            },
            "local": {
                "hidden_widths": list(self.local.hidden_widths),
                "activation": self.local.activation,
                "time_input": self.local.time_input,
            },
            "gate_hidden": self.gate_hidden,
            "gate_init_bias": list(self.gate_init_bias),
            "gate_time_dependent": self.gate_time_dependent,
            "physical_only": self.physical_only,
            "learn_v": self.learn_v,
            "freeze_mech": self.freeze_mech,
            "mech_k_init": self.mech_k_init,
            "mech_alpha_init": self.mech_alpha_init,
            "c0_base": self.c0_base,
            "c0_seed_value": self.c0_seed_value,
            "seed_regions": list(self.seed_regions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n=int(d["n"]),
            t_horizon=float(d["t_horizon"]),
            step=float(d["step"]),
            ignd=IgndConfig(
                latent_dim=int(d["ignd"]["latent_dim"]),
                encoder_widths=tuple(d["ignd"]["encoder_widths"]),
                prop_hidden=int(d["ignd"]["prop_hidden"]),
                prop_out=int(d["ignd"]["prop_out"]),
                dec_widths=tuple(d["ignd"]["dec_widths"]),
                time_encoding=d["ignd"]["time_encoding"],
                mask_to_support=bool(d["ignd"]["mask_to_support"]),
            ),
            local=LocalExpertConfig(
                hidden_widths=tuple(d["local"]["hidden_widths"]),
                activation=d["local"]["activation"],
                time_input=bool(d["local"]["time_input"]),
            ),
            gate_hidden=int(d["gate_hidden"]),
            gate_init_bias=tuple(d["gate_init_bias"]),
            gate_time_dependent=bool(d["gate_time_dependent"]),
            physical_only=bool(d["physical_only"]),
            learn_v=bool(d["learn_v"]),
            freeze_mech=bool(d["freeze_mech"]),
            mech_k_init=float(d["mech_k_init"]),
            mech_alpha_init=float(d["mech_alpha_init"]),
            c0_base=float(d["c0_base"]),
            c0_seed_value=float(d["c0_seed_value"]),
            seed_regions=tuple(int(i) for i in d["seed_regions"]),
        )


@dataclass
class MoeModel:
    config: ModelConfig
    params: ParamStore
    region_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.config.n

    def mechanistic_view(self) -> MechanisticParams:
        return MechanisticParams(
            n=self.config.n,
            raw_k=float(self.params["mech.raw_k"]),
            raw_alpha=float(self.params["mech.raw_alpha"]),
            raw_v=self.params["mech.raw_v"] if "mech.raw_v" in self.params else None,
        )

    def c0(self) -> np.ndarray:
        return ad._sigmoid(self.params["c0.raw"])

    def copy(self) -> "MoeModel":
        return MoeModel(config=self.config, params=self.params.copy(),
                        region_names=self.region_names)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def init_model(config: ModelConfig, rng: np.random.Generator,
               region_names: tuple[str, ...] | None = None) -> MoeModel:
    n = config.n
    if region_names is None:
        region_names = tuple(f"region_{i + 1}" for i in range(n))
    if any(i < 0 or i >= n for i in config.seed_regions):
        raise ConfigError(f"seed_regions out of range for n={n}")
    store = ParamStore()
    store.add("mech.raw_k", ad.softplus_inverse(config.mech_k_init))
    store.add("mech.raw_alpha", ad.softplus_inverse(config.mech_alpha_init))
    if config.learn_v:
        store.add("mech.raw_v", np.full(n, _logit(np.float64(0.95))))
    c0 = np.full(n, config.c0_base)
    for i in config.seed_regions:
        c0[i] = config.c0_seed_value
    store.add("c0.raw", _logit(c0))
    if not config.physical_only:
        init_ignd_params(config.ignd, n, rng, store)
        init_local_params(config.local, rng, store)
        if config.gate_time_dependent:
            gh = config.gate_hidden
            store.add("gate.W0", rng.normal(0.0, 1.0, (1, gh)))
            store.add("gate.b0", np.zeros(gh))
            store.add("gate.W1", rng.normal(0.0, 1.0 / np.sqrt(gh), (gh, N_EXPERTS)))
        store.add("gate.b_out", np.asarray(config.gate_init_bias, dtype=np.float64))
    return MoeModel(config=config, params=store, region_names=tuple(region_names))


class RhsBuilder:
    """Emits the combined right-hand side onto a tape, reusing gate nodes
    across identical stage times within one forward pass."""

    def __init__(self, model: MoeModel, ops: GraphOperators, tape: Tape,
                 leaves: dict[str, Node] | None = None):
        self.model = model
        self.ops = ops
        self.tape = tape
        self.leaves = bind_params(tape, model.params) if leaves is None else leaves
        self._ignd_builder: IgndBuilder | None = None
        self._gate_cache: dict[float, Node] = {}

    @property
    def ignd_builder(self) -> IgndBuilder:
        if self._ignd_builder is None:
            self._ignd_builder = IgndBuilder(self.model.config.ignd, self.ops)
        return self._ignd_builder

    def beta(self, t: float) -> Node:
        cfg, tape = self.model.config, self.tape
        key = float(t)
        hit = self._gate_cache.get(key)
        if hit is not None:
            return hit
        if cfg.physical_only:
            node = tape.constant(np.array([1.0, 0.0, 0.0]))
        elif cfg.gate_time_dependent:
            tn = key / cfg.t_horizon
            x = tape.constant(np.array([tn]))
            hidden = ad.tanh(ad.add(ad.matmul(x, self.leaves["gate.W0"]), self.leaves["gate.b0"]))
            logits = ad.add(ad.matmul(hidden, self.leaves["gate.W1"]), self.leaves["gate.b_out"])
            node = ad.softmax(logits)
        else:
            node = ad.softmax(self.leaves["gate.b_out"])
        self._gate_cache[key] = node
        return node

    def experts(self, c: Node, t: float) -> tuple[Node, Node, Node]:
        """Unweighted expert fields at (c, t)."""
        cfg, tape = self.model.config, self.tape
        f_m = rhs_node(
            tape, self.ops,
            self.leaves["mech.raw_k"], self.leaves["mech.raw_alpha"],
            self.leaves.get("mech.raw_v"), c, t, cfg.n,
        )
        if cfg.physical_only:
            zero = tape.constant(np.zeros(cfg.n))
            return f_m, zero, zero
        tn = float(t) / cfg.t_horizon
        f_s = self.ignd_builder.build_f_S(self.leaves, tape, c, tn)
        f_l = build_f_L(cfg.local, self.leaves, tape, c, tn)
        return f_m, f_s, f_l

    def build(self, c: Node, t: float):
        """Returns (dcdt, (f_M, f_S, f_L) unweighted, beta)."""
        f_m, f_s, f_l = self.experts(c, t)
        beta = self.beta(t)
        if self.model.config.physical_only:
            return f_m, (f_m, f_s, f_l), beta
        dcdt = ad.matmul(ad.concat_cols(f_m, f_s, f_l), beta)
        return dcdt, (f_m, f_s, f_l), beta


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Dense states on the uniform grid times[0..G], times[i] = i*step."""

    times: np.ndarray                    # (G+1,)
    states: np.ndarray                   # (G+1, n)
    per_expert: np.ndarray | None = None  # (G+1, 3, n), beta_j * f_j
    betas: np.ndarray | None = None      # (G+1, 3)

    @property
    def t_horizon(self) -> float:
        return float(self.times[-1])

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class IntegrationResult:
    """Tape-recorded integration: values plus the nodes the loss needs."""

    trajectory: Trajectory
    state_nodes: list[Node]                               # length G+1
    expert_nodes: list[tuple[Node, Node, Node]] | None    # unweighted, per grid time
    beta_nodes: list[Node] | None


def rk4_unrolled(rhs, c0_node: Node, t_horizon: float, step: float, tape: Tape,
                 record_rhs: bool = False):
    """Classic RK4 with fixed step, recorded on ``tape``.

    ``rhs(c_node, t) -> (dcdt_node, aux)``; aux from the first stage of each
    step (the grid point) is kept when ``record_rhs``, including one extra
    evaluation at the final time. No clamping is applied to states.
    """
    g = round(t_horizon / step)
    if g < 1 or abs(g * step - t_horizon) > 1e-9 * max(1.0, t_horizon):
        raise ConfigError(f"t_horizon/step = {t_horizon}/{step} is not an integer")
    times = np.arange(g + 1) * step
    c = c0_node
    states = [c]
    aux_records = []
    for i in range(g):
        t0, t1 = float(times[i]), float(times[i + 1])
        th = t0 + 0.5 * step
        try:
            k1, aux = rhs(c, t0)
            if record_rhs:
                aux_records.append(aux)
            k2, _ = rhs(ad.add(c, ad.scale(k1, 0.5 * step)), th)
            k3, _ = rhs(ad.add(c, ad.scale(k2, 0.5 * step)), th)
            k4, _ = rhs(ad.add(c, ad.scale(k3, step)), t1)
        except NonFiniteInput:
            # a stage state already overflowed; classify as divergence so
            # callers see one error for "the trajectory blew up"
            raise NonFiniteState(f"integration diverged at step {i + 1} (t = {t1:.6g})",
                                 step=i + 1, t=t1)
        incr = ad.add(ad.add(k1, ad.scale(ad.add(k2, k3), 2.0)), k4)
        c = ad.add(c, ad.scale(incr, step / 6.0))
        if not np.all(np.isfinite(c.value)):
            raise NonFiniteState(f"integration diverged at step {i + 1} (t = {t1:.6g})",
                                 step=i + 1, t=t1)
        states.append(c)
    if record_rhs:
        _, aux = rhs(c, float(times[-1]))
        aux_records.append(aux)
    return times, states, (aux_records if record_rhs else None)


def integrate(model: MoeModel, ops: GraphOperators, tape: Tape | None = None,
              record_experts: bool = False, leaves: dict[str, Node] | None = None):
    """Integrate the mixture ODE from the model's initial state.

    With ``tape=None`` returns a value-only :class:`Trajectory`; with a tape
    returns an :class:`IntegrationResult` whose nodes support backward.
    ``leaves`` lets a caller share one parameter binding across several
    recorded computations on the same tape.
    """
    values_only = tape is None
    if values_only:
        tape = Tape(grad=False)
    builder = RhsBuilder(model, ops, tape, leaves=leaves)
    c0_node = ad.sigmoid(builder.leaves["c0.raw"])
    record = record_experts or not values_only

    def rhs(c_node, t):
        dcdt, experts, beta = builder.build(c_node, t)
        return dcdt, (experts, beta)

    times, state_nodes, aux = rk4_unrolled(
        rhs, c0_node, model.config.t_horizon, model.config.step, tape, record_rhs=record)
    states = np.stack([s.value for s in state_nodes])
    per_expert = betas = None
    expert_nodes = beta_nodes = None
    if record:
        expert_nodes = [a[0] for a in aux]
        beta_nodes = [a[1] for a in aux]
        betas = np.stack([b.value for b in beta_nodes])
        per_expert = np.stack([
            np.stack([b.value[j] * e[j].value for j in range(N_EXPERTS)])
            for e, b in zip(expert_nodes, beta_nodes)
        ])
    traj = Trajectory(times=times, states=states,
                      per_expert=per_expert if record_experts else None,
                      betas=betas if record_experts else None)
    if values_only:
        return traj
    return IntegrationResult(trajectory=traj, state_nodes=state_nodes,
                             expert_nodes=expert_nodes, beta_nodes=beta_nodes)


def eval_gate(model: MoeModel, t: float) -> np.ndarray:
    """Mixture weights at time t (plain values)."""
    tape = Tape(grad=False)
    return RhsBuilder(model, None, tape).beta(float(t)).value


def eval_rhs(model: MoeModel, ops: GraphOperators, c: np.ndarray, t: float):
    """Plain combined field. Returns (dcdt, per_expert) where per_expert
    rows are the three weighted contributions summing to dcdt."""
    tape = Tape(grad=False)
    builder = RhsBuilder(model, ops, tape)
    dcdt, experts, beta = builder.build(tape.constant(np.asarray(c, dtype=np.float64)), float(t))
    per_expert = np.stack([beta.value[j] * experts[j].value for j in range(N_EXPERTS)])
    return dcdt.value, per_expert


def _locate(times: np.ndarray, t: float) -> tuple[int, float]:
    t_end = float(times[-1])
    if t < -1e-9 or t > t_end + 1e-9:
        raise OutOfWindow(f"t = {t:.6g} outside [0, {t_end:.6g}]")
    t = min(max(t, 0.0), t_end)
    j = int(np.searchsorted(times, t, side="right")) - 1
    if j >= len(times) - 1:
        return len(times) - 1, 0.0
    if t == times[j]:
        return j, 0.0
    return j, (t - times[j]) / (times[j + 1] - times[j])


def predict_at(traj: Trajectory, t: float) -> np.ndarray:
    """State at an arbitrary time by linear interpolation; exact on grid
    points."""
    j, w = _locate(traj.times, float(t))
    if w == 0.0:
        return traj.states[j].copy()
    return (1.0 - w) * traj.states[j] + w * traj.states[j + 1]


def states_at(traj: Trajectory, ts) -> np.ndarray:
    """Vectorized predict_at; rows follow the order of ``ts``."""
    ts = np.asarray(ts, dtype=np.float64)
    out = np.empty((ts.size, traj.states.shape[1]))
    for i, t in enumerate(ts.ravel()):
        out[i] = predict_at(traj, float(t))
    return out


# ---------------------------------------------------------------------------
# CSV exports


def write_trajectory_csv(path, region_names, times, states) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + list(region_names))
        for t, row in zip(times, states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_trajectory_csv(path):
    """Returns (region_names, times, states)."""
    import csv

    from .errors import InvalidCohort

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"] or len(rows[0]) < 2:
        raise InvalidCohort(f"{path}: expected header t,region_...")
    names = tuple(rows[0][1:])
    times, states = [], []
    for row in rows[1:]:
        if len(row) != 1 + len(names):
            raise InvalidCohort(f"{path}: malformed row {row!r}")
        times.append(float(row[0]))
        states.append([float(v) for v in row[1:]])
    return names, np.array(times), np.array(states)


def write_gate_csv(path, times, betas) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta1", "beta2", "beta3"])
        for t, row in zip(times, betas):
            w.writerow([repr(float(t))] + [repr(float(b)) for b in row])


def read_gate_csv(path):
    """Returns (times, betas)."""
    import csv

    from .errors import InvalidCohort

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t", "beta1", "beta2", "beta3"]:
        raise InvalidCohort(f"{path}: expected header t,beta1,beta2,beta3")
    times, betas = [], []
    for row in rows[1:]:
        if len(row) != 4:
            raise InvalidCohort(f"{path}: malformed row {row!r}")
        times.append(float(row[0]))
        betas.append([float(v) for v in row[1:]])
    return np.array(times), np.array(betas)
