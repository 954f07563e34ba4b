"""Node-local neural reaction expert: one shared MLP applied to each
region's scalar concentration (optionally with normalized time appended),
so the Jacobian w.r.t. the state is diagonal by construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore, Tape
from .errors import NonFiniteInput


@dataclass
class LocalExpertConfig:
    hidden_widths: tuple[int, ...] = (32, 32)
    activation: str = "tanh"  # tanh | softplus
    time_input: bool = False

    def input_dim(self) -> int:
        return 2 if self.time_input else 1


def init_local_params(cfg: LocalExpertConfig, rng: np.random.Generator,
                      store: ParamStore, prefix: str = "local") -> None:
    """Dense stack with zero-initialized final layer (expert starts as the
    zero map)."""
    dims = (cfg.input_dim(),) + tuple(cfg.hidden_widths) + (1,)
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        w = np.zeros((fan_in, fan_out)) if last else rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def _activation(cfg: LocalExpertConfig):
    return ad.tanh if cfg.activation == "tanh" else ad.softplus


def build_f_L(cfg: LocalExpertConfig, leaves: dict[str, Node], tape: Tape,
              c: Node, t_norm: float, prefix: str = "local") -> Node:
    n = c.value.shape[0]
    if cfg.time_input:
        x = ad.concat_cols(c, tape.constant(np.full(n, t_norm)))
    else:
        x = ad.reshape(c, (n, 1))
    act = _activation(cfg)
    n_layers = len(cfg.hidden_widths) + 1
    for i in range(n_layers):
        x = ad.add(ad.matmul(x, leaves[f"{prefix}.W{i}"]), leaves[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = act(x)
    return ad.reshape(x, (n,))


def eval_f_L(params: ParamStore, cfg: LocalExpertConfig, c: np.ndarray, t: float,
             t_horizon: float = 1.0, prefix: str = "local") -> np.ndarray:
    """Plain evaluation; region u's output depends only on c[u] (and t)."""
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NonFiniteInput("state contains non-finite values")
    tape = Tape(grad=False)
    leaves = {name: tape.constant(value) for name, value in params.items()}
    out = build_f_L(cfg, leaves, tape, tape.constant(c), float(t) / float(t_horizon), prefix)
    return out.value
