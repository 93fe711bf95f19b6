"""Runtime checks for the analysis constants.

Computes the projection norm, the client-objective smoothness constant,
the weight-norm ceiling, the client-sampling variance bound, and the two
error terms of the convergence bound, from measured quantities. The
stochastic constants (sigma^2, G^2) are estimated empirically from probes
and every comparison against them is a consistency check, reported as
such, not a proof.
"""

from __future__ import annotations

import math

import numpy as np

from .objective import HyperParams, ModelSpec, task_loss_and_grad
from .sketch import SketchOperator, adjoint, adjoint_padded, forward, forward_padded


def smoothness_constant(task_smoothness: float, hp: HyperParams, op: SketchOperator) -> float:
    """Client-objective smoothness ``L + lam * gamma * C^2 + mu`` with
    ``C^2 = n_pad / m`` (the exact squared projection norm)."""
    if task_smoothness < 0:
        raise ValueError(f"task smoothness must be >= 0, got {task_smoothness}")
    return task_smoothness + hp.lam * hp.gamma * (op.n_pad / op.m) + hp.mu


def estimate_task_smoothness(spec: ModelSpec, w, batch, rng, iters: int = 30,
                             eps: float = 1e-4) -> float:
    """Largest local Hessian eigenvalue of the task loss, Hessian-free.

    Power iteration where each Hessian-vector product is a central
    difference of gradients; exact for quadratics up to the differencing
    error.
    """
    w = np.asarray(w, dtype=np.float64)
    v = rng.standard_normal(w.size)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        _, gp = task_loss_and_grad(spec, w + eps * v, batch)
        _, gm = task_loss_and_grad(spec, w - eps * v, batch)
        hv = (gp - gm) / (2.0 * eps)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0
        estimate = float(norm)
        v = hv / norm
    return estimate


def estimate_sigma_sq(spec: ModelSpec, w, data, idx, batch_size: int, rng,
                      probes: int = 20) -> float:
    """Mini-batch gradient variance around the full-partition gradient."""
    _, full = task_loss_and_grad(spec, w, (data.x[idx], data.y[idx]))
    devs = np.empty(probes)
    for i in range(probes):
        take = rng.choice(idx, size=batch_size, replace=False)
        _, g = task_loss_and_grad(spec, w, (data.x[take], data.y[take]))
        devs[i] = float(np.sum((g - full) ** 2))
    return float(devs.mean())


def estimate_grad_second_moment(spec: ModelSpec, w, data, idx, batch_size: int, rng,
                                probes: int = 20) -> float:
    """Max probed squared norm of the mini-batch task gradient (G^2 estimate)."""
    worst = 0.0
    for _ in range(probes):
        take = rng.choice(idx, size=batch_size, replace=False)
        _, g = task_loss_and_grad(spec, w, (data.x[take], data.y[take]))
        worst = max(worst, float(g @ g))
    return worst


def _sketch_matrix(sketches) -> np.ndarray:
    rows = [s.values().astype(np.float64) if hasattr(s, "values") else np.asarray(s, dtype=np.float64)
            for s in sketches]
    return np.stack(rows)


def _deviation_sq(values: np.ndarray) -> np.ndarray:
    zbar = values.mean(axis=0)
    dev = ((values - zbar) ** 2).sum(axis=1)
    # entries are signs, so no client can sit further than 2*sqrt(m) from the mean
    assert (dev <= 4.0 * values.shape[1] + 1e-9).all()
    return dev


def sampling_variance_bound(values: np.ndarray, num_sampled: int) -> float:
    """Analytic without-replacement bound on E||mean of S sketches - mean of all||^2."""
    num_clients = values.shape[0]
    if num_clients <= 1 or num_sampled >= num_clients:
        return 0.0
    dev = _deviation_sq(values)
    return float((num_clients - num_sampled)
                 / (num_sampled * num_clients * (num_clients - 1)) * dev.sum())


def sampling_variance_check(sketches, num_sampled: int, trials: int, rng) -> dict:
    """Monte-Carlo check of the sampling variance bound.

    The bound holds with equality under uniform without-replacement
    sampling, so the empirical/bound ratio should sit near 1 within a few
    Monte-Carlo standard errors. Returns measured value, bound, ratio, and
    standard error.
    """
    values = _sketch_matrix(sketches)
    num_clients = values.shape[0]
    if not 1 <= num_sampled <= num_clients:
        raise ValueError(f"cannot sample {num_sampled} of {num_clients} sketches")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    zbar = values.mean(axis=0)
    draws = np.empty(trials)
    for i in range(trials):
        pick = rng.choice(num_clients, size=num_sampled, replace=False)
        draws[i] = float(np.sum((values[pick].mean(axis=0) - zbar) ** 2))
    bound = sampling_variance_bound(values, num_sampled)
    empirical = float(draws.mean())
    stderr = float(draws.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    ratio = empirical / bound if bound > 0 else (0.0 if empirical == 0 else math.inf)
    return {"empirical": empirical, "bound": bound, "ratio": ratio,
            "stderr": stderr, "trials": trials}


def theorem_error_terms(hp: HyperParams, op: SketchOperator, w_hat: float,
                        sketches_per_round):
    """Measured error terms of the convergence bound.

    ``delta_max = 2 * lam * (sqrt(m) * C * w_hat + m)`` with
    ``C = sqrt(n_pad/m)`` and ``w_hat`` the running max of the client
    weight norms. The sampling term averages the per-round variance
    radical ``2 sqrt(m) sqrt((K-S)/(S K (K-1)) * sum_k ||z_k - zbar||^2)``
    over the provided rounds; it vanishes at full participation, and both
    terms vanish at lam = 0 where they enter the bound.
    """
    if w_hat < 0:
        raise ValueError(f"w_hat must be >= 0, got {w_hat}")
    m = op.m
    delta_max = 2.0 * hp.lam * (math.sqrt(m) * op.scale * w_hat + m)
    terms = []
    for round_sketches in sketches_per_round:
        values = _sketch_matrix(round_sketches)
        variance = sampling_variance_bound(values, hp.participants)
        terms.append(2.0 * math.sqrt(m) * math.sqrt(variance))
    sampling_term = float(np.mean(terms)) if terms else 0.0
    return delta_max, sampling_term


def bounded_norm_ceiling(hp: HyperParams, op: SketchOperator,
                         grad_second_moment: float, w0_norm_sq: float) -> float:
    """Weight-norm ceiling W^2 from the contraction recursion.

    Requires mu > 0 and eta < 1/(3 mu); outside that regime there is no
    finite ceiling and inf is returned. ``grad_second_moment`` is the G^2
    estimate.
    """
    if hp.mu <= 0 or hp.eta >= 1.0 / (3.0 * hp.mu):
        return math.inf
    alpha = 1.0 - hp.eta * hp.mu * (1.0 - 3.0 * hp.eta * hp.mu)
    cg = 2.0 * op.scale * math.sqrt(op.m)
    cprime = ((hp.eta / hp.mu + 3.0 * hp.eta**2) * grad_second_moment
              + 3.0 * hp.eta**2 * hp.lam**2 * cg**2)
    steps = max(1, hp.local_steps)
    return max(w0_norm_sq, cprime / ((1.0 - alpha) * (1.0 - alpha**steps)))


def convergence_bound(hp: HyperParams, smoothness: float, sigma_sq: float,
                      psi0: float, f_star: float, rounds: int,
                      delta_max: float, sampling_term: float) -> float:
    """Right-hand side of the stationarity bound, valid for eta <= 1/L_F."""
    c1 = hp.eta * max(1, hp.local_steps) * (1.0 - hp.eta * smoothness / 2.0)
    if c1 <= 0 or rounds < 1:
        return math.inf
    return ((psi0 - f_star) / (c1 * rounds)
            + hp.eta**2 * max(1, hp.local_steps) * smoothness * sigma_sq / (2.0 * c1)
            + delta_max / c1
            + hp.lam * sampling_term / c1)


def projection_norm_check(op: SketchOperator, rng, iters: int = 25) -> dict:
    """Power iteration on the padded-domain Gram operator.

    The Gram matrix is an exact scaled identity, so the Rayleigh quotient
    lands on n_pad/m immediately; the iteration just confirms it.
    """
    v = rng.standard_normal(op.m)
    expected = op.n_pad / op.m
    measured = expected
    for _ in range(iters):
        u = forward_padded(op, adjoint_padded(op, v))
        measured = float(v @ u) / float(v @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            break
        v = u / norm
    return {"measured": measured, "expected": expected,
            "rel_error": abs(measured - expected) / expected}


def adjoint_identity_check(op: SketchOperator, rng, pairs: int = 25) -> float:
    """Worst normalized adjoint defect |<Phi w, v> - <w, Phi^T v>| over random pairs."""
    worst = 0.0
    for _ in range(pairs):
        w = rng.standard_normal(op.n)
        v = rng.standard_normal(op.m)
        fw = forward(op, w)
        lhs = float(fw @ v)
        rhs = float(w @ adjoint(op, v))
        denom = np.linalg.norm(fw) * np.linalg.norm(v)
        if denom == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def aggregation_optimality_check(rng, m: int = 8, instances: int = 20,
                                 clients: int = 5) -> dict:
    """Brute-force check that the majority vote attains the weighted
    sign-disagreement minimum over all of {-1, +1}^m."""
    from .server import aggregate
    from .sketch import quantize

    candidates = ((np.arange(2**m)[:, None] >> np.arange(m)) & 1) * 2.0 - 1.0
    worst_gap = 0.0
    for _ in range(instances):
        sketches = [quantize(rng.standard_normal(m)) for _ in range(clients)]
        weights = rng.random(clients) + 0.1
        objective = np.zeros(candidates.shape[0])
        for sk, p in zip(sketches, weights):
            objective += p * 0.5 * (m - candidates @ sk.values().astype(np.float64))
        best = float(objective.min())
        consensus = aggregate(list(zip(sketches, weights))).as_float()
        resolved = np.where(consensus == 0.0, 1.0, consensus)
        achieved = 0.0
        for sk, p in zip(sketches, weights):
            achieved += p * 0.5 * (m - float(resolved @ sk.values()))
        worst_gap = max(worst_gap, achieved - best)
    return {"worst_gap": worst_gap, "instances": instances, "m": m}


def run_check_suite(seed: int = 0) -> dict:
    """Desk-scale diagnostics over every lemma-backed quantity.

    Builds a small synthetic federation, runs it, and reports
    measured-versus-bound outcomes as a dict keyed by check name; each
    entry carries a boolean ``pass``. Stochastic-constant comparisons are
    empirical-mean checks against estimated constants.
    """
    from . import federation as fed
    from . import rng as rngs
    from .sketch import create_operator

    report = {}
    probe = rngs.stream(seed, rngs.PROBE)

    op = create_operator(seed, n=100, m=12)
    spectral = projection_norm_check(op, probe)
    report["projection_norm"] = dict(spectral, **{"pass": spectral["rel_error"] <= 1e-6})

    adjoint_defect = max(
        adjoint_identity_check(create_operator(seed + i, n=int(n), m=int(m)), probe, pairs=10)
        for i, (n, m) in enumerate([(37, 5), (64, 16), (200, 25), (1000, 100)])
    )
    report["adjoint_identity"] = {"worst_rel_error": adjoint_defect,
                                  "pass": adjoint_defect <= 1e-10}

    agg = aggregation_optimality_check(probe)
    report["aggregation_optimality"] = dict(agg, **{"pass": agg["worst_gap"] <= 1e-9})

    config = fed.FederationConfig(
        algorithm="pfed1bs", model="logistic-regression", dataset="synthetic",
        K=8, S=4, T=40, R=5, eta=0.01, lam=5e-4, mu=1e-3, gamma=1e4,
        m_ratio=0.1, batch_size=32, seed=seed, dim=20, samples_per_client=300,
        heterogeneity=1.0,
    )
    result = fed.run(config)
    hp, op, spec, dataset = result.hp, result.op, result.spec, result.dataset

    state = result.clients[0]
    batch = (dataset.x[state.train_idx], dataset.y[state.train_idx])
    l_hat = estimate_task_smoothness(spec, state.w, batch, probe)
    smooth = smoothness_constant(l_hat, hp, op)
    report["smoothness"] = {"task_estimate": l_hat, "client_objective": smooth,
                            "eta": hp.eta, "eta_below_1_over_LF": hp.eta <= 1.0 / smooth,
                            "pass": smooth >= l_hat}

    g_sq = max(estimate_grad_second_moment(spec, c.w, dataset, c.train_idx,
                                           hp.batch_size, probe, probes=10)
               for c in result.clients)
    ceiling = bounded_norm_ceiling(hp, op, g_sq, float(result.clients[0].w @ result.clients[0].w))
    report["bounded_model_norm"] = {"max_weight_sq": result.max_weight_sq,
                                    "ceiling": ceiling, "g_sq_estimate": g_sq,
                                    "pass": result.max_weight_sq <= ceiling}

    sketches = [fed.client_sketch(op, c) for c in result.clients]
    variance = sampling_variance_check(sketches, config.S, trials=4000, rng=probe)
    report["sampling_variance"] = dict(
        variance, **{"pass": abs(variance["empirical"] - variance["bound"])
                     <= 3.0 * variance["stderr"] + 1e-12})

    sigma_sq = max(estimate_sigma_sq(spec, c.w, dataset, c.train_idx, hp.batch_size,
                                     probe, probes=10) for c in result.clients)
    delta_max = result.metrics[-1].delta_max
    sampling_term = float(np.mean([row.sampling_error_term for row in result.metrics]))
    rhs = convergence_bound(hp, smooth, sigma_sq, result.initial_potential,
                            f_star=-hp.lam * op.m * math.log(2.0) / hp.gamma,
                            rounds=config.T, delta_max=delta_max,
                            sampling_term=sampling_term)
    grad_mean = float(np.mean([row.grad_norm_avg for row in result.metrics]))
    report["convergence_bound"] = {"grad_norm_mean": grad_mean, "rhs": rhs,
                                   "sigma_sq_estimate": sigma_sq,
                                   "delta_max": delta_max,
                                   "sampling_term": sampling_term,
                                   "pass": grad_mean <= rhs}

    psi_final = result.metrics[-1].potential_estimate
    report["potential_descent"] = {"initial": result.initial_potential,
                                   "final": psi_final,
                                   "pass": psi_final < result.initial_potential}
    return report
