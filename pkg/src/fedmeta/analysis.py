"""Empirical estimation of the regularity constants and numerical checks of
the structural convergence results.

The constants (mu, H, rho, B, per-node gradient/Hessian dissimilarities
delta_i, sigma_i) are estimated by sampling parameter pairs in a ball, so
every reported value is ball-restricted, not a global supremum.  From them
the derived quantities

    mu' = mu (1 - alpha H)^2 - alpha rho B
    H'  = H (1 - alpha mu)^2 + alpha rho B
    xi  = 1 - 2 beta mu' (1 - H' beta / 2)
    a'  = beta [delta + alpha C (H delta + B sigma + tau)]
    h(x) = (a'/(beta H')) ((1 + beta H')^x - 1) - a' x

feed the per-round contraction bound

    gap(T) <= xi^T gap(0) + B (1 - alpha mu) / (1 - xi^T0) * h(T0),

which is compared against measured optimality gaps.  The multi-step error
term vanishes at T0 = 1 because h(1) = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Federation, NodeData
from .federation import (
    FedConfig,
    RoundLog,
    fast_adapt,
    global_objective,
    init_params,
    run_fedml,
)
from .model import LossSpec, Params, grad_arrays, hvp_arrays, loss_arrays

__all__ = [
    "Objective",
    "ConstantsReport",
    "estimate_constants",
    "estimate_constants_from_objectives",
    "derive_rates",
    "alpha_cap",
    "beta_cap",
    "h_fn",
    "lemma1_check",
    "Lemma1Result",
    "theorem1_gap",
    "Theorem1Result",
    "theorem2_bound",
    "theorem2_bound_curve",
    "empirical_convergence_gap",
    "GapTrace",
    "adaptation_distance_rank_corr",
    "spearman_rank_corr",
]


@dataclass(frozen=True)
class Objective:
    """A differentiable scalar field over flat parameter vectors."""

    loss: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray], np.ndarray]


def node_objective(node: NodeData, spec: LossSpec, C: int, F: int, split: str) -> Objective:
    X, y = node._xy(split) if split != "full" else node.full_xy
    reg = spec.reg_coeff
    return Objective(
        loss=lambda th: loss_arrays(th, X, y, C, F, reg),
        grad=lambda th: grad_arrays(th, X, y, C, F, reg),
        hvp=lambda th, v: hvp_arrays(th, X, y, C, F, reg, v),
    )


@dataclass
class ConstantsReport:
    """Ball-restricted constants plus the rate-dependent derived quantities.

    The raw fields come from estimate_constants; the derived ones are
    filled in by derive_rates (they need alpha, beta, and the fitted C).
    """

    mu: float
    H: float
    rho: float
    B: float
    delta_i: np.ndarray
    sigma_i: np.ndarray
    delta: float
    sigma: float
    tau: float
    radius: float
    num_probe_pairs: int
    seed: int
    # derived (None until derive_rates)
    alpha: float | None = None
    beta: float | None = None
    C: float | None = None
    mu_prime: float | None = None
    H_prime: float | None = None
    xi: float | None = None
    alpha_prime: float | None = None

    def to_json_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                out[k] = [float(x) for x in v]
            else:
                out[k] = v
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ConstantsReport":
        obj = dict(obj)
        obj["delta_i"] = np.array(obj["delta_i"])
        obj["sigma_i"] = np.array(obj["sigma_i"])
        return cls(**obj)


def _ball_points(
    center: np.ndarray, radius: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n points with uniformly distributed radius around the center (denser
    near the center than uniform volume, by design: the trajectories being
    certified live there).  Points are drawn one at a time so the first k
    points agree for any n, letting different consumers share a probe set
    by seed."""
    d = len(center)
    out = np.empty((n, d))
    for i in range(n):
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        out[i] = center + radius * rng.uniform() * direction
    return out


def _extremal_eig_dirs(
    hvp: Callable, theta: np.ndarray, rng: np.random.Generator, steps: int = 30
) -> tuple[np.ndarray, np.ndarray]:
    """Approximate top and bottom Hessian eigendirections at theta with a
    short Lanczos iteration (full reorthogonalization)."""
    d = len(theta)
    m = min(steps, d)
    V = np.zeros((m, d))
    alphas, betas = [], []
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    for j in range(m):
        V[j] = v
        u = hvp(theta, v)
        a = float(v @ u)
        alphas.append(a)
        u = u - a * v - (betas[-1] * V[j - 1] if j > 0 else 0.0)
        u -= V[: j + 1].T @ (V[: j + 1] @ u)  # reorthogonalize
        b = float(np.linalg.norm(u))
        if b < 1e-12:
            V = V[: j + 1]
            break
        betas.append(b)
        v = u / b
    k = len(V)
    T = np.diag(alphas[:k])
    for j in range(k - 1):
        T[j, j + 1] = T[j + 1, j] = betas[j]
    evals, evecs = np.linalg.eigh(T)
    v_min = V.T @ evecs[:, 0]
    v_max = V.T @ evecs[:, -1]
    return v_max / np.linalg.norm(v_max), v_min / np.linalg.norm(v_min)


def _probe_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xA2A1]))


def estimate_constants_from_objectives(
    objectives: Sequence[Objective],
    weights: Sequence[float],
    dim: int,
    num_probe_pairs: int = 200,
    radius: float = 10.0,
    seed: int = 0,
    center: np.ndarray | None = None,
    pooled: Sequence[Objective] | None = None,
    power_iters: int = 20,
    sigma_points: int = 3,
) -> ConstantsReport:
    """Estimate (mu, H, rho, B) over `pooled` objectives and the per-node
    dissimilarities (delta_i, sigma_i) of `objectives` against their
    weighted average.

    mu is the smallest sampled secant curvature, H the largest secant
    gradient ratio, rho the largest Hessian-difference action on random
    probe vectors, B the largest gradient norm at probe points.  sigma_i
    uses power iteration on the Hessian-difference operator.
    """
    if num_probe_pairs < 1:
        raise ValueError("need at least one probe pair")
    w = np.asarray(weights, dtype=np.float64)
    pooled = list(pooled) if pooled is not None else list(objectives)
    rng = _probe_rng(seed)
    if center is None:
        center = np.zeros(dim)

    pts = _ball_points(center, radius, 2 * num_probe_pairs, rng)
    pick = rng.integers(0, len(pooled), size=num_probe_pairs)

    mus, Hs, rhos, Bs = [], [], [], []

    def secant(obj, a, b):
        d = a - b
        nd = float(np.linalg.norm(d))
        if nd < 1e-12:
            raise ValueError("degenerate probe pair sampled")
        ga, gb = obj.grad(a), obj.grad(b)
        dg = ga - gb
        mus.append(float(dg @ d) / nd**2)
        Hs.append(float(np.linalg.norm(dg)) / nd)
        Bs.append(float(np.linalg.norm(ga)))
        Bs.append(float(np.linalg.norm(gb)))
        return a, b, nd

    for j in range(num_probe_pairs):
        a, b, nd = secant(pooled[pick[j]], pts[2 * j], pts[2 * j + 1])
        obj = pooled[pick[j]]
        for _ in range(2):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            dH = obj.hvp(a, v) - obj.hvp(b, v)
            rhos.append(float(np.linalg.norm(dH)) / nd)

    # random directions alone miss the curvature extremes, so add secant
    # pairs aligned with approximate top/bottom Hessian eigendirections at a
    # few probe points
    eps = 1e-3 * radius
    n_eig = min(4, num_probe_pairs)
    for theta in pts[: 2 * n_eig : 2]:
        for obj in pooled if len(pooled) <= 4 else [
            pooled[k] for k in rng.integers(0, len(pooled), size=4)
        ]:
            v_max, v_min = _extremal_eig_dirs(obj.hvp, theta, rng)
            secant(obj, theta, theta + eps * v_max)
            secant(obj, theta, theta + eps * v_min)

    # dissimilarity probes reuse the pair points plus the seed-stable stream
    probe_pts = pts[: max(2, 2 * min(num_probe_pairs, 50))]
    delta_i = np.zeros(len(objectives))
    for theta in probe_pts:
        grads = np.stack([o.grad(theta) for o in objectives])
        gw = w @ grads
        dev = np.linalg.norm(grads - gw, axis=1)
        delta_i = np.maximum(delta_i, dev)
        Bs.extend(np.linalg.norm(grads, axis=1))

    sigma_i = np.zeros(len(objectives))
    for theta in probe_pts[:sigma_points]:
        for i, obj in enumerate(objectives):
            def op(v, obj=obj, theta=theta):
                hw = np.zeros_like(v)
                for wj, oj in zip(w, objectives):
                    hw += wj * oj.hvp(theta, v)
                return obj.hvp(theta, v) - hw

            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            norm = 0.0
            for _ in range(power_iters):
                u = op(v)
                norm = float(np.linalg.norm(u))
                if norm < 1e-15:
                    break
                v = u / norm
            sigma_i[i] = max(sigma_i[i], norm)

    delta = float(w @ delta_i)
    sigma = float(w @ sigma_i)
    tau = float(w @ (delta_i * sigma_i))
    return ConstantsReport(
        mu=float(min(mus)),
        H=float(max(Hs)),
        rho=float(max(rhos)),
        B=float(max(Bs)),
        delta_i=delta_i,
        sigma_i=sigma_i,
        delta=delta,
        sigma=sigma,
        tau=tau,
        radius=radius,
        num_probe_pairs=num_probe_pairs,
        seed=seed,
    )


def estimate_constants(
    fed: Federation,
    spec: LossSpec,
    num_probe_pairs: int = 200,
    radius: float = 10.0,
    seed: int = 0,
    center: np.ndarray | None = None,
    **kw,
) -> ConstantsReport:
    """Estimate the constants for a federation.

    (mu, H, rho, B) pool both the train- and test-split losses of every
    source node; (delta_i, sigma_i) measure each node's test-split loss
    against the weighted average, matching what the meta objective
    differentiates.
    """
    C, F = fed.num_classes, fed.feature_dim
    test_objs = [node_objective(n, spec, C, F, "test") for n in fed.sources]
    train_objs = [node_objective(n, spec, C, F, "train") for n in fed.sources]
    if center is None:
        center = init_params(C, F, seed).values
    return estimate_constants_from_objectives(
        test_objs,
        fed.weights,
        dim=C * F + C,
        num_probe_pairs=num_probe_pairs,
        radius=radius,
        seed=seed,
        center=center,
        pooled=test_objs + train_objs,
        **kw,
    )


# -- derived quantities ------------------------------------------------------


def alpha_cap(report: ConstantsReport) -> float:
    """Largest inner rate the contraction analysis admits."""
    return min(report.mu / (2 * report.mu * report.H + report.rho * report.B), 1 / report.mu)


def derive_rates(
    report: ConstantsReport, alpha: float, beta: float, C: float = 0.0
) -> ConstantsReport:
    """Fill in the rate-dependent quantities for given (alpha, beta, C)."""
    mu_p = report.mu * (1 - alpha * report.H) ** 2 - alpha * report.rho * report.B
    H_p = report.H * (1 - alpha * report.mu) ** 2 + alpha * report.rho * report.B
    xi = 1 - 2 * beta * mu_p * (1 - H_p * beta / 2)
    a_p = beta * (
        report.delta
        + alpha * C * (report.H * report.delta + report.B * report.sigma + report.tau)
    )
    return replace(
        report,
        alpha=alpha,
        beta=beta,
        C=C,
        mu_prime=mu_p,
        H_prime=H_p,
        xi=xi,
        alpha_prime=a_p,
    )


def beta_cap(report: ConstantsReport) -> float:
    if report.mu_prime is None:
        raise ValueError("derive_rates must run first")
    if report.mu_prime <= 0:
        return 0.0
    return min(1 / (2 * report.mu_prime), 2 / report.H_prime)


def h_fn(x: float, alpha_prime: float, beta: float, H_prime: float) -> float:
    """Multi-local-step divergence penalty; h(1) = 0 identically."""
    if x == 1:
        return 0.0
    c = beta * H_prime
    if c == 0 or alpha_prime == 0:
        return 0.0
    return (alpha_prime / c) * ((1 + c) ** x - 1) - alpha_prime * x


# -- structural checks -------------------------------------------------------


@dataclass
class Lemma1Result:
    passed: bool
    worst_lower_ratio: float  # min ||dG|| / ||dtheta|| observed
    worst_upper_ratio: float  # max ||dG|| / ||dtheta|| observed
    mu_prime: float
    H_prime: float


def lemma1_check(
    node: NodeData,
    spec: LossSpec,
    alpha: float,
    report: ConstantsReport,
    num_pairs: int = 1000,
    seed: int = 0,
    center: np.ndarray | None = None,
    num_classes: int | None = None,
) -> Lemma1Result:
    """Sampled verification that the node's meta objective obeys
    mu'||d|| <= ||grad G_i(a) - grad G_i(b)|| <= H'||d|| inside the ball."""
    cap = alpha_cap(report)
    if alpha > cap:
        raise ValueError(
            f"learning-rate cap violated: alpha={alpha:.6g} > {cap:.6g} "
            f"(mu={report.mu:.4g}, H={report.H:.4g}, rho={report.rho:.4g}, B={report.B:.4g})"
        )
    mu_p = report.mu * (1 - alpha * report.H) ** 2 - alpha * report.rho * report.B
    H_p = report.H * (1 - alpha * report.mu) ** 2 + alpha * report.rho * report.B
    C_, F_ = _layout_of(node)
    if num_classes is not None:
        C_ = num_classes
    d = C_ * F_ + C_
    rng = _probe_rng(seed + 1)
    center = np.zeros(d) if center is None else center
    pts = _ball_points(center, report.radius, 2 * num_pairs, rng)
    reg = spec.reg_coeff
    Xtr, ytr = node.train_xy
    Xte, yte = node.test_xy

    def grad_G(th):
        gtr = grad_arrays(th, Xtr, ytr, C_, F_, reg)
        phi = th - alpha * gtr
        gte = grad_arrays(phi, Xte, yte, C_, F_, reg)
        return gte - alpha * hvp_arrays(th, Xtr, ytr, C_, F_, reg, gte)

    lo, hi = np.inf, 0.0
    for j in range(num_pairs):
        a, b = pts[2 * j], pts[2 * j + 1]
        nd = float(np.linalg.norm(a - b))
        ratio = float(np.linalg.norm(grad_G(a) - grad_G(b))) / nd
        lo = min(lo, ratio)
        hi = max(hi, ratio)
    passed = (lo >= mu_p - 1e-12) and (hi <= H_p + 1e-12)
    return Lemma1Result(passed, lo, hi, mu_p, H_p)


def _layout_of(node: NodeData) -> tuple[int, int]:
    X, y = node.train_xy
    Xte, yte = node.test_xy
    C = int(max(y.max(initial=0), yte.max(initial=0))) + 1
    return max(C, 2), X.shape[1]


@dataclass
class Theorem1Result:
    C: float
    measured: np.ndarray  # per node, worst ||grad G_i - grad G|| over probes
    bound: np.ndarray  # per node, delta_i + alpha C (H delta_i + B sigma_i + tau)
    holds: bool


def theorem1_gap(
    fed: Federation,
    report: ConstantsReport,
    spec: LossSpec,
    alpha: float,
    probes: int = 100,
    seed: int = 0,
    center: np.ndarray | None = None,
    c_value: float | None = None,
) -> Theorem1Result:
    """Measure per-node meta-gradient deviations and fit (or check) the
    dissimilarity constant C.

    With c_value None, C is the smallest constant making the bound hold on
    these probes; pass a fitted C and a fresh seed for a holdout check.
    """
    C_, F_ = fed.num_classes, fed.feature_dim
    reg = spec.reg_coeff
    rng = _probe_rng(seed)
    if center is None:
        center = init_params(C_, F_, report.seed).values
    pts = _ball_points(center, report.radius, probes, rng)
    w = fed.weights

    measured = np.zeros(len(fed.sources))
    for theta in pts:
        metas = []
        for node in fed.sources:
            Xtr, ytr = node.train_xy
            gtr = grad_arrays(theta, Xtr, ytr, C_, F_, reg)
            phi = theta - alpha * gtr
            Xte, yte = node.test_xy
            gte = grad_arrays(phi, Xte, yte, C_, F_, reg)
            metas.append(gte - alpha * hvp_arrays(theta, Xtr, ytr, C_, F_, reg, gte))
        metas = np.stack(metas)
        gG = w @ metas
        measured = np.maximum(measured, np.linalg.norm(metas - gG, axis=1))

    slope = alpha * (report.H * report.delta_i + report.B * report.sigma_i + report.tau)
    if c_value is None:
        if alpha == 0 or np.all(slope == 0):
            c_value = 0.0
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                need = (measured - report.delta_i) / slope
            c_value = float(max(0.0, np.nanmax(need)))
    bound = report.delta_i + c_value * slope
    holds = bool(np.all(measured <= bound + 1e-12))
    return Theorem1Result(C=c_value, measured=measured, bound=bound, holds=holds)


def theorem2_bound(report: ConstantsReport, G0_minus_Gstar: float, cfg: FedConfig) -> float:
    """Endpoint of the contraction bound for the run configuration."""
    return theorem2_bound_curve(report, G0_minus_Gstar, cfg)[-1][1]


def theorem2_bound_curve(
    report: ConstantsReport, G0_minus_Gstar: float, cfg: FedConfig
) -> list[tuple[int, float]]:
    """Bound value at t = 0, T0, 2*T0, ..., T."""
    if report.mu_prime is None:
        raise ValueError("derive_rates must run first")
    if not (0 < report.xi < 1):
        raise ValueError(
            f"contraction factor xi={report.xi:.6g} outside (0, 1); "
            f"requires mu' > 0 and beta < min(1/(2mu'), 2/H') "
            f"(mu'={report.mu_prime:.6g}, H'={report.H_prime:.6g})"
        )
    cap = beta_cap(report)
    if cfg.beta >= cap:
        raise ValueError(f"beta={cfg.beta:.6g} above cap {cap:.6g}")
    T0 = cfg.local_steps
    h = h_fn(T0, report.alpha_prime, report.beta, report.H_prime)
    tail = report.B * (1 - report.alpha * report.mu) / (1 - report.xi**T0) * h
    out = []
    for r in range(cfg.total_steps // T0 + 1):
        t = r * T0
        out.append((t, (report.xi**t) * G0_minus_Gstar + (tail if t > 0 else 0.0)))
    return out


# -- empirical gap trace ------------------------------------------------------


@dataclass
class GapTrace:
    ts: np.ndarray
    gaps: np.ndarray
    g_star: float
    g0: float
    logs: list[RoundLog]
    reference_iters: int
    reference_final_beta: float


def empirical_convergence_gap(
    fed: Federation,
    cfg: FedConfig,
    spec: LossSpec,
    ref_multiplier: int = 10,
    plateau_window: int = 100,
    plateau_rtol: float = 1e-7,
    logs: list[RoundLog] | None = None,
) -> GapTrace:
    """Optimality-gap trajectory of a run against a long reference solve.

    The reference performs single-step (T0 = 1) descent on the meta
    objective from the same initialization for ref_multiplier * T
    iterations, halving beta whenever a window shows no relative progress.
    The best value ever observed (reference or run) stands in for G*.
    """
    if logs is None:
        _, logs = run_fedml(fed, cfg, spec)

    C, F = fed.num_classes, fed.feature_dim
    reg = spec.reg_coeff
    w = fed.weights
    theta = init_params(C, F, cfg.seed).values
    beta = cfg.beta
    best = np.inf
    window_best = np.inf
    iters = ref_multiplier * cfg.total_steps
    for t in range(iters):
        metas = []
        g_val = 0.0
        for node, wi in zip(fed.sources, w):
            Xtr, ytr = node.train_xy
            gtr = grad_arrays(theta, Xtr, ytr, C, F, reg)
            phi = theta - cfg.alpha * gtr
            Xte, yte = node.test_xy
            gte = grad_arrays(phi, Xte, yte, C, F, reg)
            g_val += wi * loss_arrays(phi, Xte, yte, C, F, reg)
            metas.append(gte - cfg.alpha * hvp_arrays(theta, Xtr, ytr, C, F, reg, gte))
        if not np.isfinite(g_val) or g_val > 1e6:
            raise RuntimeError("reference run diverged")
        best = min(best, g_val)
        window_best = min(window_best, g_val)
        mg = np.zeros_like(theta)
        for wi, m in zip(w, metas):
            mg += wi * m
        theta = theta - beta * mg
        if (t + 1) % plateau_window == 0:
            if window_best > best - plateau_rtol * max(abs(best), 1e-12) and t > plateau_window:
                beta *= 0.5
            window_best = np.inf
            if beta < cfg.beta / 2048:
                break

    run_values = np.array([lg.global_loss for lg in logs])
    g_star = float(min(best, run_values.min()))
    ts = np.array([lg.t for lg in logs])
    return GapTrace(
        ts=ts,
        gaps=run_values - g_star,
        g_star=g_star,
        g0=float(run_values[0]),
        logs=logs,
        reference_iters=iters,
        reference_final_beta=beta,
    )


# -- adaptation-vs-similarity (qualitative) -----------------------------------


def spearman_rank_corr(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation via double argsort."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = float(np.sqrt((ra @ ra) * (rb @ rb)))
    if denom == 0:
        return 0.0
    return float(ra @ rb) / denom


def _minimize_gd(obj: Objective, x0: np.ndarray, iters: int = 2000, step: float = 0.5):
    """Plain descent with multiplicative step adaptation; good enough for the
    strongly convex node losses used here."""
    x = x0.copy()
    f = obj.loss(x)
    for _ in range(iters):
        g = obj.grad(x)
        while True:
            x_new = x - step * g
            f_new = obj.loss(x_new)
            if f_new <= f or step < 1e-12:
                break
            step *= 0.5
        x, f = x_new, f_new
        step *= 1.05
    return x


def adaptation_distance_rank_corr(
    fed: Federation,
    theta_c: Params,
    spec: LossSpec,
    alpha: float,
    steps: int = 1,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Rank correlation between each target's adapted test loss and the
    distance from the meta solution to the target's solo-trained optimum.

    A positive correlation is the qualitative content of the adaptation
    bound: closer targets adapt better.
    """
    C, F = fed.num_classes, fed.feature_dim
    losses, dists = [], []
    for node in fed.targets:
        adapted = fast_adapt(theta_c, node, alpha, steps, spec)
        X, y = node.test_xy
        losses.append(loss_arrays(adapted.values, X, y, C, F, spec.reg_coeff))
        solo = _minimize_gd(node_objective(node, spec, C, F, "full"), theta_c.values)
        dists.append(float(np.linalg.norm(solo - theta_c.values)))
    corr = spearman_rank_corr(losses, dists)
    return corr, np.array(losses), np.array(dists)
