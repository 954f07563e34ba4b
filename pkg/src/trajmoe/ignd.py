"""Inhomogeneous graph neural diffusion expert.

A graph encoder maps the state c(t) to latent node representations h(t)
(edge messages are gated by the anatomical adjacency); the decoder refines
the adjacency as a_hat = row-normalized sigmoid(h h^T) and emits dc/dt via
one propagation step over a_hat followed by a shared per-node readout. The
rank of h h^T is bounded by the latent width, realizing the low-rank
approximation of a state- and time-dependent edge diffusivity operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore, Tape
from .errors import NonFiniteInput
from .graph import GraphOperators


@dataclass
class IgndConfig:
    latent_dim: int = 16
    encoder_widths: tuple[int, ...] = (32,)
    prop_hidden: int = 16
    prop_out: int = 16
    dec_widths: tuple[int, ...] = (32,)
    time_encoding: str = "scalar-append"  # none | scalar-append
    mask_to_support: bool = False

    def enc_input_dim(self) -> int:
        return 1 + self.prop_out + (1 if self.time_encoding == "scalar-append" else 0)


@dataclass
class LatentState:
    """Per-evaluation latent node matrix and refined row-stochastic adjacency.
    Recomputed fresh at every (c, t); never cached across times."""

    h: np.ndarray       # (n, latent_dim)
    a_hat: np.ndarray   # (n, n), rows sum to 1


def init_ignd_params(cfg: IgndConfig, n: int, rng: np.random.Generator,
                     store: ParamStore, prefix: str = "ignd") -> None:
    def dense(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
        store.add(f"{prefix}.{name}.W", w)
        store.add(f"{prefix}.{name}.b", np.zeros(fan_out))

    dense("prop0", 2, cfg.prop_hidden)
    dense("prop1", cfg.prop_hidden, cfg.prop_out)
    dims = (cfg.enc_input_dim(),) + tuple(cfg.encoder_widths) + (cfg.latent_dim,)
    for i in range(len(dims) - 1):
        dense(f"enc{i}", dims[i], dims[i + 1])
    ddims = (2 * cfg.latent_dim,) + tuple(cfg.dec_widths) + (1,)
    for i in range(len(ddims) - 1):
        # final readout starts as the zero map so the mechanistic expert
        # dominates at epoch 0
        dense(f"dec{i}", ddims[i], ddims[i + 1], zero=(i == len(ddims) - 2))


class IgndBuilder:
    """Caches the n-dependent constant index matrices and emits the expert's
    forward pass onto a tape."""

    def __init__(self, cfg: IgndConfig, ops: GraphOperators, prefix: str = "ignd"):
        self.cfg = cfg
        self.prefix = prefix
        n = ops.n
        self.n = n
        # pair expansion: row u*n+v of (R1 c, R2 c) is (c_u, c_v)
        r1 = np.zeros((n * n, n))
        r2 = np.zeros((n * n, n))
        for u in range(n):
            for v in range(n):
                r1[u * n + v, u] = 1.0
                r2[u * n + v, v] = 1.0
        self.r1, self.r2 = r1, r2
        # aggregation: row u of S sums pair rows (u, *)
        s = np.zeros((n, n * n))
        for u in range(n):
            s[u, u * n:(u + 1) * n] = 1.0
        self.s = s
        self.a_flat = ops.adjacency.reshape(-1)
        if cfg.mask_to_support:
            mask = (ops.adjacency > 0).astype(np.float64)
            np.fill_diagonal(mask, 1.0)
            self.support_mask = mask
        else:
            self.support_mask = None

    def _dense(self, leaves, x: Node, name: str) -> Node:
        p = self.prefix
        return ad.add(ad.matmul(x, leaves[f"{p}.{name}.W"]), leaves[f"{p}.{name}.b"])

    def encode(self, leaves: dict[str, Node], tape: Tape, c: Node, t_norm: float) -> tuple[Node, Node]:
        """Returns (h, a_hat) nodes."""
        cfg, n = self.cfg, self.n
        pairs = ad.concat_cols(ad.matmul(tape.constant(self.r1), c),
                               ad.matmul(tape.constant(self.r2), c))
        msg = ad.tanh(self._dense(leaves, pairs, "prop0"))
        msg = self._dense(leaves, msg, "prop1")
        msg = ad.hadamard(msg, tape.constant(self.a_flat))     # gate by A_uv
        agg = ad.matmul(tape.constant(self.s), msg)            # sum over neighbours
        parts = [c, agg]
        if cfg.time_encoding == "scalar-append":
            parts.append(tape.constant(np.full(n, t_norm)))
        x = ad.concat_cols(*parts)
        n_layers = len(cfg.encoder_widths) + 1
        for i in range(n_layers):
            x = self._dense(leaves, x, f"enc{i}")
            if i < n_layers - 1:
                x = ad.tanh(x)
        h = x
        sim = ad.sigmoid(ad.matmul(h, ad.transpose(h)))
        if self.support_mask is not None:
            sim = ad.hadamard(sim, tape.constant(self.support_mask))
        rowsum = ad.matmul(sim, tape.constant(np.ones(n)))
        a_hat = ad.hadamard(sim, ad.reciprocal(rowsum))        # row-stochastic
        return h, a_hat

    def build_f_S(self, leaves: dict[str, Node], tape: Tape, c: Node, t_norm: float) -> Node:
        h, a_hat = self.encode(leaves, tape, c, t_norm)
        prop = ad.matmul(a_hat, h)
        x = ad.concat_cols(h, prop)
        n_layers = len(self.cfg.dec_widths) + 1
        for i in range(n_layers):
            x = self._dense(leaves, x, f"dec{i}")
            if i < n_layers - 1:
                x = ad.tanh(x)
        return ad.reshape(x, (self.n,))


def _plain_pass(params: ParamStore, cfg: IgndConfig, ops: GraphOperators,
                c: np.ndarray, t: float, t_horizon: float, prefix: str):
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NonFiniteInput("state contains non-finite values")
    tape = Tape(grad=False)
    leaves = {name: tape.constant(value) for name, value in params.items()}
    builder = IgndBuilder(cfg, ops, prefix)
    return builder, leaves, tape, tape.constant(c), float(t) / float(t_horizon)


def encode(params: ParamStore, cfg: IgndConfig, ops: GraphOperators, c: np.ndarray,
           t: float, t_horizon: float = 1.0, prefix: str = "ignd") -> LatentState:
    builder, leaves, tape, c_node, tn = _plain_pass(params, cfg, ops, c, t, t_horizon, prefix)
    h, a_hat = builder.encode(leaves, tape, c_node, tn)
    return LatentState(h=h.value, a_hat=a_hat.value)


def eval_f_S(params: ParamStore, cfg: IgndConfig, ops: GraphOperators, c: np.ndarray,
             t: float, t_horizon: float = 1.0, prefix: str = "ignd") -> np.ndarray:
    builder, leaves, tape, c_node, tn = _plain_pass(params, cfg, ops, c, t, t_horizon, prefix)
    return builder.build_f_S(leaves, tape, c_node, tn).value
