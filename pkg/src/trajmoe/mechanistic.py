"""Pathophysiological expert: homogeneous graph diffusion plus logistic
local reaction,

    dc/dt = -k (L c) + alpha * c (+) (v - c)

with k, alpha >= 0 via softplus internals and v in (0,1) via sigmoid
internals (or fixed at exactly 1 when not learned)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NonFiniteInput
from .graph import GraphOperators

DEFAULT_K = 0.1
DEFAULT_ALPHA = 0.5


@dataclass
class MechanisticParams:
    """Unconstrained internals; rates are exposed through properties."""

    n: int
    raw_k: float
    raw_alpha: float
    raw_v: np.ndarray | None = None  # None -> v fixed at 1

    @classmethod
    def from_rates(cls, n: int, k: float = DEFAULT_K, alpha: float = DEFAULT_ALPHA,
                   v: np.ndarray | None = None) -> "MechanisticParams":
        raw_v = None
        if v is not None:
            v = np.broadcast_to(np.asarray(v, dtype=np.float64), (n,))
            if np.any(v <= 0.0) or np.any(v >= 1.0):
                raise DimensionMismatch("learnable v must lie strictly inside (0, 1)")
            raw_v = np.log(v / (1.0 - v))
        return cls(n=n, raw_k=float(ad.softplus_inverse(k)), raw_alpha=float(ad.softplus_inverse(alpha)),
                   raw_v=raw_v)

    @property
    def k(self) -> float:
        return float(ad.softplus_value(self.raw_k))

    @property
    def alpha(self) -> float:
        return float(ad.softplus_value(self.raw_alpha))

    @property
    def v(self) -> np.ndarray:
        if self.raw_v is None:
            return np.ones(self.n)
        return ad._sigmoid(np.asarray(self.raw_v, dtype=np.float64))


def _check_state(params: MechanisticParams, ops: GraphOperators, c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (params.n,) or ops.n != params.n:
        raise DimensionMismatch(f"state shape {c.shape} vs n={params.n} (ops n={ops.n})")
    if not np.all(np.isfinite(c)):
        raise NonFiniteInput("state contains non-finite values")
    return c


def eval_f_M(params: MechanisticParams, ops: GraphOperators, c: np.ndarray, t: float) -> np.ndarray:
    """Right-hand side; autonomous (t is accepted for interface uniformity)."""
    c = _check_state(params, ops, c)
    return -params.k * (ops.laplacian @ c) + params.alpha * c * (params.v - c)


def grad_f_M(params: MechanisticParams, ops: GraphOperators, c: np.ndarray, t: float,
             upstream: np.ndarray):
    """Vector-Jacobian products of eval_f_M.

    Returns ``((d_raw_k, d_raw_alpha, d_raw_v), d_c)`` where d_raw_v is None
    when v is fixed. Chain rule through the softplus/sigmoid internals is
    included.
    """
    c = _check_state(params, ops, c)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (params.n,):
        raise DimensionMismatch(f"upstream shape {g.shape} != ({params.n},)")
    k, alpha, v = params.k, params.alpha, params.v
    lc = ops.laplacian @ c
    d_k = float(-g @ lc)
    d_alpha = float(g @ (c * (v - c)))
    d_raw_k = d_k * float(ad._sigmoid(np.float64(params.raw_k)))
    d_raw_alpha = d_alpha * float(ad._sigmoid(np.float64(params.raw_alpha)))
    d_raw_v = None
    if params.raw_v is not None:
        d_raw_v = (alpha * c * g) * (v * (1.0 - v))
    d_c = -k * (ops.laplacian.T @ g) + alpha * (v - 2.0 * c) * g
    return (d_raw_k, d_raw_alpha, d_raw_v), d_c


def rhs_node(tape: ad.Tape, ops: GraphOperators, raw_k: ad.Node, raw_alpha: ad.Node,
             raw_v: ad.Node | None, c: ad.Node, t: float, n: int) -> ad.Node:
    """Record eval_f_M as one fused tape op backed by grad_f_M."""
    params = MechanisticParams(
        n=n,
        raw_k=float(raw_k.value),
        raw_alpha=float(raw_alpha.value),
        raw_v=None if raw_v is None else raw_v.value,
    )
    value = eval_f_M(params, ops, c.value, t)
    parents = [raw_k, raw_alpha, c] if raw_v is None else [raw_k, raw_alpha, raw_v, c]

    def vjp(upstream):
        (d_rk, d_ra, d_rv), d_c = grad_f_M(params, ops, c.value, t, upstream)
        if raw_v is None:
            return [np.asarray(d_rk), np.asarray(d_ra), d_c]
        return [np.asarray(d_rk), np.asarray(d_ra), d_rv, d_c]

    return ad.lift(tape, value, parents, vjp, kind="mechanistic-rhs")
