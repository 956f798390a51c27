"""Simulated federation engine: FedML meta-training, the FedAvg baseline,
and fast adaptation at target nodes.

One training iteration at a node is a meta step
    phi   = theta - alpha * grad L(theta, train)
    theta = theta - beta * (I - alpha * hess L(theta, train)) grad L(phi, test)
applied T0 times between global aggregations theta <- sum_i w_i theta_i.
FedAvg keeps the identical schedule but takes plain gradient steps on the
node's full local dataset.

Per-round node updates are independent; when n_workers > 1 they run on a
thread pool, and the aggregation always reduces in node order so results
are bit-identical regardless of worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Federation, NodeData
from .model import (
    LossSpec,
    Params,
    Sample,
    grad_arrays,
    hvp_arrays,
    loss_arrays,
    loss_grad_arrays,
    stack_batch,
)

__all__ = [
    "FedConfig",
    "RoundLog",
    "DivergenceError",
    "init_params",
    "inner_update",
    "meta_gradient",
    "local_round",
    "aggregate",
    "run_fedml",
    "run_fedavg",
    "fast_adapt",
    "evaluate",
    "global_objective",
]

DIVERGENCE_THRESHOLD = 1e6
INIT_STDEV = 0.01


class DivergenceError(RuntimeError):
    """A node's loss crossed the divergence threshold."""

    def __init__(self, node_id: int, loss_value: float, t: int | None = None):
        self.node_id = node_id
        self.loss_value = loss_value
        self.t = t
        where = f" at t={t}" if t is not None else ""
        super().__init__(f"diverged: node {node_id}{where} (loss={loss_value:.4g})")


@dataclass(frozen=True)
class FedConfig:
    """Training knobs: inner rate alpha, meta rate beta, T total iterations
    in blocks of T0 local steps, K train samples per node, for a seeded run."""

    alpha: float = 0.01
    beta: float = 0.01
    total_steps: int = 100
    local_steps: int = 1
    k_train: int = 5
    seed: int = 0
    first_order: bool = False
    n_workers: int = 1
    weight_mode: str = "full"  # "full" -> |D_i|, "test" -> |D_i^test|

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.total_steps % self.local_steps != 0:
            raise ValueError("total_steps must be a multiple of local_steps")
        if self.weight_mode not in ("full", "test"):
            raise ValueError("weight_mode must be 'full' or 'test'")


@dataclass
class RoundLog:
    """State after one aggregation: objective value and per-node losses."""

    t: int
    comm_round: int
    global_loss: float
    node_losses: np.ndarray
    wall_ms: float = 0.0
    # populated by the robust engine
    clean_loss: float | None = None
    adv_loss: float | None = None
    clean_acc: float | None = None
    adv_acc: float | None = None
    adv_set_size: int | None = None


def init_params(num_classes: int, feature_dim: int, seed: int) -> Params:
    """Seeded Gaussian initialization, stdev 0.01."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
    values = rng.normal(0.0, INIT_STDEV, num_classes * feature_dim + num_classes)
    return Params(values, num_classes, feature_dim)


# -- single-node operations -------------------------------------------------


def inner_update(theta: Params, node: NodeData, alpha: float, spec: LossSpec) -> Params:
    """One inner gradient step on the node's train split: phi = theta - alpha*grad."""
    X, y = node.train_xy
    g = grad_arrays(theta.values, X, y, theta.num_classes, theta.feature_dim, spec.reg_coeff)
    return theta.with_values(theta.values - alpha * g)


def meta_gradient(
    theta: Params,
    node: NodeData,
    alpha: float,
    spec: LossSpec,
    first_order: bool = False,
) -> Params:
    """Gradient of theta -> L(phi(theta), test), via one Hessian-vector product.

    first_order drops the curvature term and returns grad L(phi, test)
    (the classic first-order ablation).
    """
    mg, _ = _meta_grad_arrays(
        theta.values,
        node.train_xy,
        node.test_xy,
        theta.num_classes,
        theta.feature_dim,
        alpha,
        spec.reg_coeff,
        first_order,
    )
    return theta.with_values(mg)


def _meta_grad_arrays(theta, train_xy, test_xy, C, F, alpha, reg, first_order):
    Xtr, ytr = train_xy
    gtr = grad_arrays(theta, Xtr, ytr, C, F, reg)
    phi = theta - alpha * gtr
    Xte, yte = test_xy
    loss_te, gte = loss_grad_arrays(phi, Xte, yte, C, F, reg)
    if first_order:
        return gte, loss_te
    return gte - alpha * hvp_arrays(theta, Xtr, ytr, C, F, reg, gte), loss_te


def local_round(theta_in: Params, node: NodeData, cfg: FedConfig, spec: LossSpec) -> Params:
    """Apply local_steps meta updates theta <- theta - beta * meta_gradient."""
    th = _local_round_arrays(
        theta_in.values,
        node,
        cfg,
        spec,
        theta_in.num_classes,
        theta_in.feature_dim,
    )
    return theta_in.with_values(th)


def _local_round_arrays(theta, node, cfg, spec, C, F, t_base: int = 0):
    th = theta
    for s in range(cfg.local_steps):
        mg, loss_te = _meta_grad_arrays(
            th, node.train_xy, node.test_xy, C, F, cfg.alpha, spec.reg_coeff, cfg.first_order
        )
        if not np.isfinite(loss_te) or loss_te > DIVERGENCE_THRESHOLD:
            raise DivergenceError(node.node_id, loss_te, t_base + s + 1)
        th = th - cfg.beta * mg
    return th


def aggregate(params_list: Sequence[Params], weights) -> Params:
    """Weighted average theta = sum_i w_i theta_i, reduced in list order."""
    w = np.asarray(weights, dtype=np.float64)
    if len(params_list) != len(w):
        raise ValueError("one weight per parameter vector required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    first = params_list[0]
    for p in params_list[1:]:
        if not first.same_layout(p):
            raise ValueError("parameter layouts do not match")
    acc = np.zeros_like(first.values)
    for wi, p in zip(w, params_list):
        acc += wi * p.values
    return first.with_values(acc)


def fast_adapt(
    theta: Params, target: NodeData, alpha: float, steps: int, spec: LossSpec
) -> Params:
    """Adapt at a target node: `steps` gradient steps on its K train samples."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    th = theta.values
    X, y = target.train_xy
    for _ in range(steps):
        g = grad_arrays(th, X, y, theta.num_classes, theta.feature_dim, spec.reg_coeff)
        th = th - alpha * g
    return theta.with_values(th)


def evaluate(theta: Params, samples, spec: LossSpec) -> tuple[float, float]:
    """Mean loss and top-1 accuracy (argmax; ties resolve to the lowest index)."""
    X, y = stack_batch(samples)
    if len(y) == 0:
        raise ValueError("empty dataset")
    value = loss_arrays(theta.values, X, y, theta.num_classes, theta.feature_dim, spec.reg_coeff)
    pred = np.argmax(X @ theta.weights.T + theta.bias, axis=1)
    return value, float((pred == y).mean())


# -- federation runs --------------------------------------------------------


def _weights_for(fed: Federation, cfg: FedConfig) -> np.ndarray:
    if cfg.weight_mode == "test":
        sizes = np.array([len(n.test) for n in fed.sources], dtype=np.float64)
        return sizes / sizes.sum()
    return fed.weights


def global_objective(
    theta: np.ndarray | Params, fed: Federation, cfg: FedConfig, spec: LossSpec
) -> tuple[float, np.ndarray]:
    """Meta objective G(theta) = sum_i w_i L(phi_i(theta), test_i) and the
    per-node values."""
    th = theta.values if isinstance(theta, Params) else theta
    C, F = fed.num_classes, fed.feature_dim
    w = _weights_for(fed, cfg)
    vals = np.empty(len(fed.sources))
    for i, node in enumerate(fed.sources):
        Xtr, ytr = node.train_xy
        gtr = grad_arrays(th, Xtr, ytr, C, F, spec.reg_coeff)
        phi = th - cfg.alpha * gtr
        Xte, yte = node.test_xy
        vals[i] = loss_arrays(phi, Xte, yte, C, F, spec.reg_coeff)
    return float(w @ vals), vals


def _fedavg_objective(theta, fed, cfg, spec) -> tuple[float, np.ndarray]:
    """FedAvg's own objective: weighted plain loss over full local sets."""
    C, F = fed.num_classes, fed.feature_dim
    w = _weights_for(fed, cfg)
    vals = np.empty(len(fed.sources))
    for i, node in enumerate(fed.sources):
        X, y = node.full_xy
        vals[i] = loss_arrays(theta, X, y, C, F, spec.reg_coeff)
    return float(w @ vals), vals


def _fedavg_local_round(theta, node, cfg, spec, C, F, t_base=0):
    th = theta
    X, y = node.full_xy
    for s in range(cfg.local_steps):
        value, g = loss_grad_arrays(th, X, y, C, F, spec.reg_coeff)
        if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            raise DivergenceError(node.node_id, value, t_base + s + 1)
        th = th - cfg.beta * g
    return th


def _run(
    fed: Federation,
    cfg: FedConfig,
    spec: LossSpec,
    node_round: Callable,
    objective: Callable,
) -> tuple[Params, list[RoundLog]]:
    C, F = fed.num_classes, fed.feature_dim
    theta = init_params(C, F, cfg.seed).values
    w = _weights_for(fed, cfg)

    t_start = time.perf_counter()
    g0, node0 = objective(theta, fed, cfg, spec)
    logs = [
        RoundLog(
            t=0,
            comm_round=0,
            global_loss=g0,
            node_losses=node0,
            wall_ms=(time.perf_counter() - t_start) * 1e3,
        )
    ]

    num_rounds = cfg.total_steps // cfg.local_steps
    pool = ThreadPoolExecutor(cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for r in range(num_rounds):
            t_base = r * cfg.local_steps
            job = lambda node: node_round(theta, node, cfg, spec, C, F, t_base)
            if pool is None:
                locals_ = [job(n) for n in fed.sources]
            else:
                locals_ = list(pool.map(job, fed.sources))
            # fixed reduction order keeps the result bit-identical for any
            # worker count
            theta = np.zeros_like(theta)
            for wi, th_i in zip(w, locals_):
                theta += wi * th_i
            g, node_vals = objective(theta, fed, cfg, spec)
            logs.append(
                RoundLog(
                    t=(r + 1) * cfg.local_steps,
                    comm_round=r + 1,
                    global_loss=g,
                    node_losses=node_vals,
                    wall_ms=(time.perf_counter() - t_start) * 1e3,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return Params(theta, C, F), logs


def run_fedml(
    fed: Federation, cfg: FedConfig, spec: LossSpec
) -> tuple[Params, list[RoundLog]]:
    """Meta-train across source nodes; returns final params and per-round logs
    of the meta objective G."""
    return _run(
        fed,
        cfg,
        spec,
        lambda th, n, c, s, C, F, t: _local_round_arrays(th, n, c, s, C, F, t),
        global_objective,
    )


def run_fedavg(
    fed: Federation, cfg: FedConfig, spec: LossSpec
) -> tuple[Params, list[RoundLog]]:
    """FedAvg baseline: same schedule, plain gradient descent on full local sets.

    Logs carry FedAvg's own objective (weighted plain loss), not G.
    """
    return _run(fed, cfg, spec, _fedavg_local_round, _fedavg_objective)
