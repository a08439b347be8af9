"""Dense SQP solver for the finite-horizon optimal control problems.

Sequential quadratic programming with a damped-BFGS Lagrangian Hessian, an
l1 merit line search and an elastic (slack-penalty) restoration mode. The
convex QP subproblems are delegated to cvxopt; everything above the QP layer
is self-contained.

Inequality rows may carry a finite "soft weight": such rows are handled as
exact l1 penalties (slack variables priced at the weight) instead of hard
constraints, which is how the terminal-set fallback of the leader problem is
realized. Hard rows must end <= feas_tol for an optimal status.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger("cotransport.nlp")

_CVXOPT_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "maxiters": 100,
}


@dataclass
class NlpProblem:
    """Finite-dimensional NLP: min f(x) s.t. ci(x) <= 0, ce(x) = 0."""

    n_vars: int
    eval_single: Callable  # x -> (f, ci, ce)
    n_ineq: int = 0
    n_eq: int = 0
    eval_batch: Callable | None = None  # (B, n) -> (f (B,), ci (B, mi), ce (B, me))
    jacobian: Callable | None = None  # x -> (grad_f, jac_ci, jac_ce)
    soft_weights: np.ndarray | None = None  # per-ineq row; np.inf = hard row
    labels: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.soft_weights is None:
            self.soft_weights = np.full(self.n_ineq, np.inf)
        self.soft_weights = np.asarray(self.soft_weights, dtype=float)

    def evaluate(self, x):
        f, ci, ce = self.eval_single(np.asarray(x, dtype=float))
        return float(f), np.atleast_1d(np.asarray(ci, dtype=float)), np.atleast_1d(
            np.asarray(ce, dtype=float)
        )

    def evaluate_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        if self.eval_batch is not None:
            f, ci, ce = self.eval_batch(xs)
            return np.asarray(f, dtype=float), np.asarray(ci, dtype=float), np.asarray(
                ce, dtype=float
            )
        fs = np.empty(len(xs))
        cis = np.empty((len(xs), self.n_ineq))
        ces = np.empty((len(xs), self.n_eq))
        for i, x in enumerate(xs):
            fs[i], cis[i], ces[i] = self.evaluate(x)
        return fs, cis, ces


@dataclass
class SolverOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iter: int = 60
    fd_step: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 12
    elastic_weight: float = 1e6
    soft_feas_tol: float = 1e-6
    trust_init: float = 50.0
    trust_min: float = 1e-10
    trust_max: float = 1e6
    working_margin: float = 1.0  # rows with ci >= -margin enter the QP


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    kkt: float
    feasibility: float
    step_length: float
    merit_before: float
    merit_after: float
    mode: str


@dataclass
class SolveResult:
    x: np.ndarray
    cost: float
    status: str  # optimal | degraded | max_iterations | infeasible
    kkt_residual: float
    feasibility: float
    iterations: int
    ineq: np.ndarray
    eq: np.ndarray
    multipliers_ineq: np.ndarray
    multipliers_eq: np.ndarray
    soft_violation: float
    diagnostics: list[IterationRecord]

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "degraded")


def _fd_derivatives(problem: NlpProblem, x, f0, ci0, ce0, step):
    n = problem.n_vars
    eps = step * np.maximum(1.0, np.abs(x))
    xs = np.empty((2 * n, n))
    for i in range(n):
        xs[2 * i] = x
        xs[2 * i, i] += eps[i]
        xs[2 * i + 1] = x
        xs[2 * i + 1, i] -= eps[i]
    fs, cis, ces = problem.evaluate_batch(xs)
    denom = 2.0 * eps
    grad = (fs[0::2] - fs[1::2]) / denom
    jac_ci = (cis[0::2] - cis[1::2]) / denom[:, None]
    jac_ce = (ces[0::2] - ces[1::2]) / denom[:, None]
    return grad, jac_ci.T.copy(), jac_ce.T.copy()


def _derivatives(problem: NlpProblem, x, f0, ci0, ce0, options: SolverOptions):
    if problem.jacobian is not None:
        grad, jac_ci, jac_ce = problem.jacobian(x)
        return (
            np.asarray(grad, dtype=float),
            np.asarray(jac_ci, dtype=float).reshape(problem.n_ineq, problem.n_vars),
            np.asarray(jac_ce, dtype=float).reshape(problem.n_eq, problem.n_vars),
        )
    return _fd_derivatives(problem, x, f0, ci0, ce0, options.fd_step)


def _solve_qp_cvxopt(h_mat, grad, jac_eq, ce, jac_in, ci, soft_w):
    """QP step: min .5 d'Hd + g'd (+ soft slack prices) returning (d, lam, mu)."""
    from cvxopt import matrix, solvers

    n = len(grad)
    hard = ~np.isfinite(soft_w)
    soft = np.isfinite(soft_w)
    ns = int(soft.sum())
    nz = n + ns

    p = np.zeros((nz, nz))
    p[:n, :n] = h_mat
    if ns:
        p[n:, n:] = 1e-10 * np.eye(ns)
    q = np.concatenate([grad, soft_w[soft]])

    g_rows = []
    h_rows = []
    if hard.any():
        g_rows.append(np.hstack([jac_in[hard], np.zeros((hard.sum(), ns))]))
        h_rows.append(-ci[hard])
    if ns:
        sel = np.zeros((ns, ns))
        np.fill_diagonal(sel, -1.0)
        g_rows.append(np.hstack([jac_in[soft], sel]))
        h_rows.append(-ci[soft])
        g_rows.append(np.hstack([np.zeros((ns, n)), -np.eye(ns)]))
        h_rows.append(np.zeros(ns))
    if g_rows:
        g_mat = np.vstack(g_rows)
        h_vec = np.concatenate(h_rows)
    else:
        g_mat = np.zeros((0, nz))
        h_vec = np.zeros(0)

    kwargs = {"options": _CVXOPT_OPTIONS}
    if len(ce):
        a_mat = np.hstack([jac_eq, np.zeros((len(ce), ns))])
        kwargs["A"] = matrix(a_mat)
        kwargs["b"] = matrix(-ce)
    if len(h_vec) == 0 and "A" not in kwargs:
        d = np.linalg.solve(h_mat, -grad)
        return d, np.zeros(len(ci)), np.zeros(len(ce)), True
    try:
        sol = solvers.qp(matrix(p), matrix(q), matrix(g_mat), matrix(h_vec), **kwargs)
    except (ValueError, ZeroDivisionError, ArithmeticError):
        # cvxopt raises on some degenerate subproblems instead of reporting
        return None, None, None, False
    if sol["status"] not in ("optimal", "unknown") or sol["x"] is None:
        return None, None, None, False
    z = np.asarray(sol["x"]).ravel()
    d = z[:n]
    zdual = np.asarray(sol["z"]).ravel() if sol["z"] is not None else np.zeros(len(h_vec))
    lam = np.zeros(len(ci))
    row = 0
    if hard.any():
        lam[hard] = zdual[row : row + int(hard.sum())]
        row += int(hard.sum())
    if ns:
        lam[soft] = zdual[row : row + ns]
    mu = (
        np.asarray(sol["y"]).ravel()
        if ("A" in kwargs and sol["y"] is not None)
        else np.zeros(len(ce))
    )
    ok = sol["status"] == "optimal"
    return d, lam, mu, ok


def _qp_step(h_mat, grad, jac_eq, ce, jac_in, ci, soft_w, trust, elastic_weight):
    """Trust-boxed QP step; falls back to the elastic (all-rows-relaxed) problem.

    Returns (d, lam, mu, mode, trust_binding); lam covers the original
    inequality rows only.
    """
    n = len(grad)
    m = len(ci)
    eye = np.eye(n)
    jac_aug = np.vstack([jac_in, eye, -eye]) if m else np.vstack([eye, -eye])
    ci_aug = np.concatenate([ci, np.full(2 * n, -trust)])
    soft_aug = np.concatenate([soft_w, np.full(2 * n, np.inf)])

    out = _solve_qp_cvxopt(h_mat, grad, jac_eq, ce, jac_aug, ci_aug, soft_aug)
    mode = "sqp"
    if out[0] is None or not out[3]:
        # relax every original row (equalities via two-sided slacks); TR stays hard
        soft_el = np.concatenate(
            [np.minimum(soft_w, elastic_weight), np.full(2 * n, np.inf)]
        )
        jac_el, ci_el = jac_aug, ci_aug
        if len(ce):
            jac_el = np.vstack([jac_in, jac_eq, -jac_eq, eye, -eye])
            ci_el = np.concatenate([ci, ce, -ce, np.full(2 * n, -trust)])
            soft_el = np.concatenate(
                [
                    np.minimum(soft_w, elastic_weight),
                    np.full(2 * len(ce), elastic_weight),
                    np.full(2 * n, np.inf),
                ]
            )
        out2 = _solve_qp_cvxopt(
            h_mat, grad, np.zeros((0, n)), np.zeros(0), jac_el, ci_el, soft_el
        )
        if out2[0] is None:
            if out[0] is None:
                return None, None, None, "failed", False
        else:
            lam_all = out2[1]
            mu = (
                lam_all[m : m + len(ce)] - lam_all[m + len(ce) : m + 2 * len(ce)]
                if len(ce)
                else np.zeros(0)
            )
            d = out2[0]
            return d, lam_all[:m], mu, "elastic", bool(np.max(np.abs(d)) >= 0.999 * trust)
    d, lam_all, mu, _ = out
    return d, lam_all[:m], mu, mode, bool(np.max(np.abs(d)) >= 0.999 * trust)


def _damped_bfgs_update(h_mat, s, y):
    """Powell-damped BFGS; keeps the approximation positive definite."""
    hs = h_mat @ s
    shs = float(s @ hs)
    if shs <= 1e-14 or float(s @ s) <= 1e-30:
        return h_mat
    sty = float(s @ y)
    if sty >= 0.2 * shs:
        theta = 1.0
    else:
        theta = 0.8 * shs / (shs - sty)
    y_t = theta * y + (1.0 - theta) * hs
    sty_t = float(s @ y_t)
    if sty_t <= 1e-12 * shs:
        return h_mat
    h_new = h_mat - np.outer(hs, hs) / shs + np.outer(y_t, y_t) / sty_t
    return 0.5 * (h_new + h_new.T)


def _merit(f, ci, ce, nu, soft_w):
    hard = ~np.isfinite(soft_w)
    soft = np.isfinite(soft_w)
    viol_hard = np.sum(np.maximum(ci[hard], 0.0)) + np.sum(np.abs(ce))
    soft_term = float(np.sum(soft_w[soft] * np.maximum(ci[soft], 0.0)))
    return f + nu * viol_hard + soft_term


def _kkt_residuals(grad, jac_in, jac_ce, ci, ce, lam, mu, soft_w):
    """Stationarity and complementarity are scaled by the gradient magnitude
    (standard practice: an absolute tolerance is meaningless when penalty terms
    push the gradient to 1e4-scale); feasibility stays absolute."""
    scale = max(1.0, float(np.max(np.abs(grad), initial=0.0)))
    stat = grad.copy()
    if len(ci):
        stat = stat + jac_in.T @ lam
    if len(ce):
        stat = stat + jac_ce.T @ mu
    stationarity = float(np.max(np.abs(stat))) / scale if len(stat) else 0.0
    hard = ~np.isfinite(soft_w)
    feas = 0.0
    if hard.any():
        feas = max(feas, float(np.max(ci[hard], initial=-np.inf)))
    if len(ce):
        feas = max(feas, float(np.max(np.abs(ce))))
    feas = max(feas, 0.0)
    comp = 0.0
    if len(ci):
        if hard.any():
            comp = float(np.max(np.abs(lam[hard] * ci[hard]), initial=0.0))
        soft = ~hard
        if soft.any():
            # for penalized rows the multiplier saturates at the weight when the
            # row is violated: complementarity holds at either end of [0, w]
            slack_mult = np.minimum(lam[soft], soft_w[soft] - lam[soft])
            comp = max(comp, float(np.max(np.abs(slack_mult * ci[soft]), initial=0.0)))
    return stationarity, feas, comp / scale


def solve_nlp(
    problem: NlpProblem,
    x0,
    options: SolverOptions | None = None,
) -> SolveResult:
    """SQP iteration on `problem` from warm start `x0`."""
    opt = options or SolverOptions()
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (problem.n_vars,):
        raise ValueError(f"warm start has shape {x.shape}, expected ({problem.n_vars},)")

    f, ci, ce = problem.evaluate(x)
    if not np.isfinite(f) or not np.all(np.isfinite(ci)) or not np.all(np.isfinite(ce)):
        raise ValueError("problem callbacks are not finite at the warm start")
    grad, jac_in, jac_ce = _derivatives(problem, x, f, ci, ce, opt)

    h0 = problem.meta.get("hess0")
    if h0 is not None:
        h_mat = np.asarray(h0(x) if callable(h0) else h0, dtype=float).copy()
        first_scale_pending = False
    else:
        h_mat = np.eye(problem.n_vars)
        first_scale_pending = True
    nu = 1.0
    soft_w = problem.soft_weights
    lam = np.zeros(problem.n_ineq)
    mu = np.zeros(problem.n_eq)
    records: list[IterationRecord] = []
    status = "max_iterations"
    accepted = 0
    restoration_streak = 0
    no_progress = 0
    trust = opt.trust_init

    lam_prev = np.zeros(problem.n_ineq)
    for it in range(opt.max_iter + 1):
        # working set: rows near activity or priced in the previous QP
        ws = (
            np.nonzero((ci >= -opt.working_margin) | (lam_prev > 1e-10))[0]
            if problem.n_ineq
            else np.zeros(0, dtype=int)
        )
        d, lam_ws, mu, mode, tr_binding = _qp_step(
            h_mat, grad, jac_ce, ce, jac_in[ws], ci[ws], soft_w[ws], trust, opt.elastic_weight
        )
        if d is None:
            status = "infeasible"
            break
        lam = np.zeros(problem.n_ineq)
        lam[ws] = lam_ws
        lam_prev = lam

        stationarity, feas, comp = _kkt_residuals(grad, jac_in, jac_ce, ci, ce, lam, mu, soft_w)
        kkt = max(stationarity, comp)
        if not tr_binding and kkt <= opt.tol and feas <= opt.feas_tol:
            status = "optimal"
            break
        if it == opt.max_iter:
            break

        nu_cap = np.max(np.abs(lam[~np.isfinite(soft_w)]), initial=0.0) if problem.n_ineq else 0.0
        nu = max(nu, 1.1 * (nu_cap + np.max(np.abs(mu), initial=0.0)) + 0.1)
        merit0 = _merit(f, ci, ce, nu, soft_w)
        hard = ~np.isfinite(soft_w)
        soft = np.isfinite(soft_w)
        viol0 = np.sum(np.maximum(ci[hard], 0.0)) + np.sum(np.abs(ce))
        # soft rows are only reduced as far as the QP found worthwhile: use the
        # linearized change, not the full violation
        soft_dd = 0.0
        if soft.any():
            lin = ci[soft] + jac_in[soft] @ d
            soft_dd = float(
                np.sum(soft_w[soft] * (np.maximum(lin, 0.0) - np.maximum(ci[soft], 0.0)))
            )
        ddir = float(grad @ d) - nu * viol0 + soft_dd
        if ddir > -1e-16:
            ddir = -1e-16

        alpha = 1.0
        accepted_step = False
        f_new = f
        ci_new, ce_new = ci, ce
        for _ in range(opt.max_backtracks):
            x_try = x + alpha * d
            f_try, ci_try, ce_try = problem.evaluate(x_try)
            merit_try = _merit(f_try, ci_try, ce_try, nu, soft_w)
            if np.isfinite(merit_try) and merit_try <= merit0 + opt.armijo * alpha * ddir:
                accepted_step = True
                f_new, ci_new, ce_new = f_try, ci_try, ce_try
                break
            alpha *= opt.backtrack

        if not accepted_step:
            # model mismatch at this radius: shrink the trust box and retry with
            # the same derivatives
            trust = 0.25 * float(np.max(np.abs(d)))
            records.append(IterationRecord(it, f, kkt, feas, 0.0, merit0, merit0, "shrink"))
            if trust < opt.trust_min:
                status = "degraded" if feas <= opt.feas_tol else "infeasible"
                break
            continue

        x_new = x + alpha * d
        grad_new, jac_in_new, jac_ce_new = _derivatives(problem, x_new, f_new, ci_new, ce_new, opt)

        grad_l_old = grad.copy()
        grad_l_new = grad_new.copy()
        if problem.n_ineq:
            grad_l_old = grad_l_old + jac_in.T @ lam
            grad_l_new = grad_l_new + jac_in_new.T @ lam
        if problem.n_eq:
            grad_l_old = grad_l_old + jac_ce.T @ mu
            grad_l_new = grad_l_new + jac_ce_new.T @ mu
        s_vec = alpha * d
        y_vec = grad_l_new - grad_l_old
        if first_scale_pending:
            # Shanno-Phua: rescale the identity to the observed curvature before
            # the first update; critical when penalty terms dominate the gradient
            sty = float(s_vec @ y_vec)
            if sty > 1e-14:
                h_mat = (float(y_vec @ y_vec) / sty) * np.eye(problem.n_vars)
            first_scale_pending = False
        h_mat = _damped_bfgs_update(h_mat, s_vec, y_vec)

        merit_after = _merit(f_new, ci_new, ce_new, nu, soft_w)
        records.append(
            IterationRecord(it, f_new, kkt, feas, alpha, merit0, merit_after, mode)
        )
        logger.debug(
            "iter=%d cost=%.6e kkt=%.3e feas=%.3e step=%.3f trust=%.2e mode=%s",
            it,
            f_new,
            kkt,
            feas,
            alpha,
            trust,
            mode,
        )
        if alpha == 1.0:
            trust = min(trust * 2.0, opt.trust_max)
        elif alpha < 0.1:
            trust = max(float(np.max(np.abs(s_vec))), opt.trust_min * 10)
        progress = merit0 - merit_after
        no_progress = no_progress + 1 if progress <= 1e-14 * max(1.0, abs(merit0)) else 0
        x, f, ci, ce = x_new, f_new, ci_new, ce_new
        grad, jac_in, jac_ce = grad_new, jac_in_new, jac_ce_new
        accepted += 1
        restoration_streak = restoration_streak + 1 if mode == "elastic" else 0
        if restoration_streak > 10:
            status = "infeasible"
            break
        if no_progress >= 5:
            status = "degraded"
            break

    stationarity, feas, comp = _kkt_residuals(grad, jac_in, jac_ce, ci, ce, lam, mu, soft_w)
    kkt = max(stationarity, comp)
    if status == "max_iterations" and kkt <= 100 * opt.tol and feas <= opt.feas_tol:
        status = "degraded"
    soft = np.isfinite(soft_w)
    soft_violation = float(np.max(ci[soft], initial=-np.inf)) if soft.any() else -np.inf
    return SolveResult(
        x=x,
        cost=f,
        status=status,
        kkt_residual=kkt,
        feasibility=feas,
        iterations=accepted,
        ineq=ci,
        eq=ce,
        multipliers_ineq=lam,
        multipliers_eq=mu,
        soft_violation=soft_violation,
        diagnostics=records,
    )
