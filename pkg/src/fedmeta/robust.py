"""Distributionally robust meta-training and FGSM evaluation.

The robust run augments each node's outer loss with a loss on adversarial
samples it constructs itself: anchors drawn from test + previous
adversarial data are pushed uphill on
    l(phi, (x, y)) - lam * ||x - x_anchor||^2
for a fixed number of ascent steps.  The squared-distance penalty is the
label-preserving transport cost (moving a label costs infinity), and lam
sets how far samples may travel: small lam buys robustness, large lam
stays near the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Federation, NodeData
from .federation import (
    DIVERGENCE_THRESHOLD,
    DivergenceError,
    FedConfig,
    RoundLog,
    _weights_for,
    global_objective,
    init_params,
)
from .model import (
    LossSpec,
    Params,
    Sample,
    grad_arrays,
    grad_x_arrays,
    hvp_arrays,
    loss_arrays,
    loss_grad_arrays,
    sample_loss_arrays,
    stack_batch,
)

__all__ = [
    "RobustConfig",
    "transport_cost",
    "adversarial_ascent",
    "generate_adversarial_set",
    "robust_local_round",
    "run_robust_fedml",
    "fgsm_attack",
]


@dataclass(frozen=True)
class RobustConfig:
    """Robust-training knobs: transport penalty lam, ascent rate nu with
    ascent_steps iterations, a generation every gen_interval aggregation
    rounds, at most max_generations times; fgsm_xi is the evaluation attack
    strength.  clip, when set, bounds features after each perturbation step
    (pixel data wants (0, 1))."""

    lam: float = 1.0
    nu: float = 1.0
    ascent_steps: int = 10
    gen_interval: int = 7
    max_generations: int = 2
    fgsm_xi: float = 0.2
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if self.ascent_steps < 0 or self.max_generations < 0:
            raise ValueError("counts must be nonnegative")
        if self.gen_interval < 1:
            raise ValueError("gen_interval must be >= 1")
        if self.fgsm_xi < 0:
            raise ValueError("fgsm_xi must be nonnegative")


def transport_cost(a: Sample, b: Sample) -> float:
    """Squared Euclidean distance between features; +inf if labels differ."""
    if len(a.x) != len(b.x):
        raise ValueError("transport cost needs equal feature dimensions")
    if a.y != b.y:
        return math.inf
    d = a.x - b.x
    return float(d @ d)


def _ascend(phi, anchor_x, y, rc: RobustConfig, spec, C, F) -> np.ndarray:
    x = anchor_x.copy()
    for _ in range(rc.ascent_steps):
        g = grad_x_arrays(phi, x, y, C, F) - 2.0 * rc.lam * (x - anchor_x)
        x = x + rc.nu * g
        if rc.clip is not None:
            np.clip(x, rc.clip[0], rc.clip[1], out=x)
        if not np.all(np.isfinite(x)):
            raise ValueError(
                "ascent diverged: non-finite iterate (consider a larger lam)"
            )
    return x


def adversarial_ascent(
    phi: Params, anchor: Sample, rc: RobustConfig, spec: LossSpec
) -> Sample:
    """Gradient ascent on l(phi, (x, y)) - lam*||x - x_anchor||^2 from the anchor.

    The label never moves (label transport has infinite cost).
    """
    x = _ascend(
        phi.values, anchor.x, anchor.y, rc, spec, phi.num_classes, phi.feature_dim
    )
    return Sample(x, anchor.y)


def generate_adversarial_set(
    phi: Params,
    node: NodeData,
    rc: RobustConfig,
    spec: LossSpec,
    rng: np.random.Generator,
) -> list[Sample]:
    """Perturb |test| anchors sampled uniformly (with replacement) from
    test + adversarial; the caller appends the result to node.adversarial."""
    if not node.test:
        raise ValueError("empty dataset")
    comb = list(node.test) + list(node.adversarial)
    picks = rng.integers(0, len(comb), size=len(node.test))
    out = []
    for j in picks:
        anchor = comb[j]
        out.append(adversarial_ascent(phi, anchor, rc, spec))
    return out


def _robust_meta_grad_arrays(theta, node, C, F, alpha, reg, first_order):
    """Gradient of theta -> L(phi(theta), test) + L(phi(theta), adv).

    With no adversarial data this reduces exactly to the plain meta
    gradient (the second loss term is absent, not zero-averaged).
    """
    Xtr, ytr = node.train_xy
    gtr = grad_arrays(theta, Xtr, ytr, C, F, reg)
    phi = theta - alpha * gtr
    Xte, yte = node.test_xy
    loss_te, g_outer = loss_grad_arrays(phi, Xte, yte, C, F, reg)
    if node.adversarial:
        Xad, yad = node.adversarial_xy
        _, g_adv = loss_grad_arrays(phi, Xad, yad, C, F, reg)
        g_outer = g_outer + g_adv
    if first_order:
        return g_outer, loss_te, phi
    mg = g_outer - alpha * hvp_arrays(theta, Xtr, ytr, C, F, reg, g_outer)
    return mg, loss_te, phi


def robust_local_round(
    theta: Params, node: NodeData, cfg: FedConfig, rc: RobustConfig, spec: LossSpec
) -> Params:
    """local_steps robust meta updates on the combined test + adversarial loss."""
    th, _ = _robust_local_round_arrays(
        theta.values, node, cfg, spec, theta.num_classes, theta.feature_dim
    )
    return theta.with_values(th)


def _robust_local_round_arrays(theta, node, cfg, spec, C, F, t_base: int = 0):
    th = theta
    phi = theta
    for s in range(cfg.local_steps):
        mg, loss_te, phi = _robust_meta_grad_arrays(
            th, node, C, F, cfg.alpha, spec.reg_coeff, cfg.first_order
        )
        if not np.isfinite(loss_te) or loss_te > DIVERGENCE_THRESHOLD:
            raise DivergenceError(node.node_id, loss_te, t_base + s + 1)
        th = th - cfg.beta * mg
    return th, phi


def _gen_rng(seed: int, node_id: int, t: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), 0xADF, int(node_id), int(t)])
    )


def run_robust_fedml(
    fed: Federation, cfg: FedConfig, rc: RobustConfig, spec: LossSpec
) -> tuple[Params, list[RoundLog]]:
    """FedML schedule plus adversarial generation every gen_interval
    aggregations, at most max_generations times per node.

    With max_generations = 0 the trajectory is bit-identical to run_fedml.
    Logs extend the round records with clean/adversarial losses and
    accuracies and the total adversarial set size.
    """
    C, F = fed.num_classes, fed.feature_dim
    theta = init_params(C, F, cfg.seed).values
    w = _weights_for(fed, cfg)
    for node in fed.sources:
        node.clear_adversarial()
    gens_done = {node.node_id: 0 for node in fed.sources}

    def log_at(t, comm_round):
        g, node_vals = global_objective(theta, fed, cfg, spec)
        adv_losses, adv_accs, clean_accs, aw = [], [], [], []
        for wi, node in zip(w, fed.sources):
            Xtr, ytr = node.train_xy
            phi = theta - cfg.alpha * grad_arrays(theta, Xtr, ytr, C, F, spec.reg_coeff)
            Xte, yte = node.test_xy
            Wm = phi[: C * F].reshape(C, F)
            bm = phi[C * F :]
            clean_accs.append(float((np.argmax(Xte @ Wm.T + bm, axis=1) == yte).mean()))
            if node.adversarial:
                Xad, yad = node.adversarial_xy
                adv_losses.append(loss_arrays(phi, Xad, yad, C, F, spec.reg_coeff))
                adv_accs.append(float((np.argmax(Xad @ Wm.T + bm, axis=1) == yad).mean()))
                aw.append(wi)
        adv_size = sum(len(n.adversarial) for n in fed.sources)
        aw_arr = np.array(aw)
        return RoundLog(
            t=t,
            comm_round=comm_round,
            global_loss=g,
            node_losses=node_vals,
            clean_loss=g,
            adv_loss=float(aw_arr @ adv_losses / aw_arr.sum()) if adv_losses else 0.0,
            clean_acc=float(w @ clean_accs),
            adv_acc=float(aw_arr @ adv_accs / aw_arr.sum()) if adv_accs else 0.0,
            adv_set_size=adv_size,
        )

    logs = [log_at(0, 0)]
    num_rounds = cfg.total_steps // cfg.local_steps
    for r in range(num_rounds):
        t_base = r * cfg.local_steps
        t_end = (r + 1) * cfg.local_steps
        locals_ = []
        phis = {}
        for node in fed.sources:
            th_i, phi_i = _robust_local_round_arrays(theta, node, cfg, spec, C, F, t_base)
            locals_.append(th_i)
            phis[node.node_id] = phi_i
        theta = np.zeros_like(theta)
        for wi, th_i in zip(w, locals_):
            theta += wi * th_i

        if t_end % (rc.gen_interval * cfg.local_steps) == 0:
            for node in fed.sources:
                if gens_done[node.node_id] >= rc.max_generations:
                    continue
                phi_param = Params(phis[node.node_id], C, F)
                rng = _gen_rng(cfg.seed, node.node_id, t_end)
                fresh = generate_adversarial_set(phi_param, node, rc, spec, rng)
                node.extend_adversarial(fresh)
                gens_done[node.node_id] += 1

        logs.append(log_at(t_end, r + 1))
    return Params(theta, C, F), logs


def fgsm_attack(
    theta: Params,
    samples: Sequence[Sample],
    xi: float,
    spec: LossSpec,
    clip: tuple[float, float] | None = None,
) -> list[Sample]:
    """Fast gradient sign perturbation x' = x + xi * sign(grad_x l); labels kept."""
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    C, F = theta.num_classes, theta.feature_dim
    out = []
    for s in samples:
        g = grad_x_arrays(theta.values, s.x, s.y, C, F)
        x = s.x + xi * np.sign(g)
        if clip is not None:
            x = np.clip(x, clip[0], clip[1])
        out.append(Sample(x, s.y))
    return out
