"""Optimal-transport solvers over discrete measures.

Two solvers share one problem setup: given nonnegative weight vectors that
each sum to one and a square cost matrix, find a transport plan with those
row/column marginals.  ``sinkhorn_solve`` minimizes the entropy-regularized
objective ``sum(P * costs) - epsilon * entropy(P)`` by alternating dual
updates; ``exact_emd_solve`` minimizes the plain linear cost with a
transportation-simplex pivot and returns a sparse vertex plan.

``sinkhorn_unrolled_backward`` replays the recorded dual iteration in
reverse to produce gradients of any scalar function of the plan with
respect to the cost matrix, both weight vectors, and the regularization
strength.  The unroll depth equals the iteration count actually executed,
capped at the configured recording window.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

WEIGHT_FLOOR = 1e-12


class TransportError(Exception):
    """Base class for solver failures."""


class ConvergenceError(TransportError):
    """Solver did not reach the marginal tolerance within its budget."""

    def __init__(self, message, marginal_error, iterations):
        super().__init__(message)
        self.marginal_error = marginal_error
        self.iterations = iterations


@dataclass(frozen=True)
class SinkhornConfig:
    """Settings for the entropy-regularized solver.

    epsilon: regularization strength (> 0).
    tolerance: maximum allowed marginal violation in the infinity norm.
    max_iterations: iteration budget before ConvergenceError.
    log_domain: iterate on dual potentials (stable for small epsilon);
        False uses multiplicative scaling vectors for speed comparison.
    epsilon_scaling: warm-start via a geometric anneal from epsilon = 1
        down to the target; forward-only acceleration for small epsilon.
    record_limit: number of trailing iterations kept for the backward pass.
    """

    epsilon: float = 0.1
    tolerance: float = 1e-9
    max_iterations: int = 1000
    log_domain: bool = True
    epsilon_scaling: bool = False
    record_limit: int = 200

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.tolerance > 0):
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.record_limit < 1:
            raise ValueError(f"record_limit must be >= 1, got {self.record_limit}")


@dataclass
class SinkhornRecord:
    """Recorded tail of the dual iteration, consumed by the backward pass.

    ``steps`` holds ``(g_before, f_after)`` pairs for each recorded
    iteration; ``final_g`` is the column potential that, with the last
    ``f_after``, produced the returned plan.
    """

    steps: deque
    final_g: np.ndarray
    epsilon: float


@dataclass
class SinkhornResult:
    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float
    iterations: int
    total_iterations: int
    marginal_error: float
    record: SinkhornRecord


@dataclass
class SinkhornGradients:
    """Gradients of a scalar downstream loss, via the unrolled iteration."""

    costs: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray
    epsilon: float


@dataclass
class EmdResult:
    plan: np.ndarray
    cost: float
    pivots: int


def normalize_weights(weights):
    """Validate a weight vector and return it floored and renormalized.

    Entries below the floor are clamped to 1e-12 before renormalization so
    that logarithms stay finite; softmax-produced weights never trigger the
    clamp.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError(f"weights must be a nonempty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain NaN or Inf")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if w.sum() <= 0:
        raise ValueError("weights have zero total mass")
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum()


def _check_costs(costs, rows, cols):
    m = np.asarray(costs, dtype=np.float64)
    if m.shape != (rows, cols):
        raise ValueError(f"cost matrix shape {m.shape} does not match marginals ({rows}, {cols})")
    if not np.all(np.isfinite(m)):
        raise ValueError("cost matrix contains NaN or Inf")
    return m


def _logsumexp(a, axis):
    peak = np.max(a, axis=axis, keepdims=True)
    out = peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _marginal_error(plan, row, col):
    return max(
        float(np.max(np.abs(plan.sum(axis=1) - row))),
        float(np.max(np.abs(plan.sum(axis=0) - col))),
    )


def _iterate_log(row, col, costs, epsilon, tolerance, max_iterations, f, g, record):
    """Log-domain dual updates; returns (plan, f, g, iterations, error)."""
    log_row = np.log(row)
    log_col = np.log(col)
    plan = None
    error = np.inf
    for it in range(1, max_iterations + 1):
        g_before = g
        f = epsilon * (log_row - _logsumexp((g[None, :] - costs) / epsilon, axis=1))
        g = epsilon * (log_col - _logsumexp((f[:, None] - costs) / epsilon, axis=0))
        if record is not None:
            record.append((g_before, f))
        plan = np.exp((f[:, None] + g[None, :] - costs) / epsilon)
        error = _marginal_error(plan, row, col)
        if error <= tolerance:
            return plan, f, g, it, error
    return plan, f, g, max_iterations, error


def _iterate_plain(row, col, costs, epsilon, tolerance, max_iterations, f, g, record):
    """Multiplicative scaling updates; logs of the scalings are recorded."""
    kernel = np.exp(-costs / epsilon)
    u = np.exp(f / epsilon)
    v = np.exp(g / epsilon)
    plan = None
    error = np.inf
    for it in range(1, max_iterations + 1):
        g_before = epsilon * np.log(v)
        u = row / (kernel @ v)
        if record is not None:
            record.append((g_before, epsilon * np.log(u)))
        v = col / (kernel.T @ u)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise TransportError(
                "scaling vectors overflowed or underflowed; rerun with log_domain=True"
            )
        plan = u[:, None] * kernel * v[None, :]
        error = _marginal_error(plan, row, col)
        if error <= tolerance:
            break
    f = epsilon * np.log(u)
    g = epsilon * np.log(v)
    return plan, f, g, it, error


def sinkhorn_solve(row_weights, col_weights, costs, config):
    """Solve the entropy-regularized transport problem.

    Returns a SinkhornResult whose plan satisfies both marginals within
    ``config.tolerance``.  Deterministic for fixed inputs.  Raises
    ConvergenceError (carrying the last marginal violation) when the
    iteration budget is exhausted, ValueError on malformed inputs.
    """
    row = normalize_weights(row_weights)
    col = normalize_weights(col_weights)
    m = _check_costs(costs, row.size, col.size)
    iterate = _iterate_log if config.log_domain else _iterate_plain

    f = np.zeros(row.size)
    g = np.zeros(col.size)
    warm_iterations = 0
    if config.epsilon_scaling and config.epsilon < 1.0:
        eps = 1.0
        while eps > config.epsilon * (1 + 1e-9):
            _, f, g, its, _ = iterate(
                row, col, m, eps, max(config.tolerance, 1e-3), 200, f, g, None
            )
            warm_iterations += its
            eps = max(eps * 0.5, config.epsilon)

    record_steps = deque(maxlen=config.record_limit)
    plan, f, g, iterations, error = iterate(
        row,
        col,
        m,
        config.epsilon,
        config.tolerance,
        config.max_iterations,
        f,
        g,
        record_steps,
    )
    if error > config.tolerance:
        raise ConvergenceError(
            f"marginal violation {error:.3e} > tolerance {config.tolerance:.3e} "
            f"after {iterations} iterations",
            marginal_error=error,
            iterations=iterations,
        )
    record = SinkhornRecord(steps=record_steps, final_g=g, epsilon=config.epsilon)
    return SinkhornResult(
        plan=plan,
        row_marginal=row,
        col_marginal=col,
        epsilon=config.epsilon,
        iterations=iterations,
        total_iterations=warm_iterations + iterations,
        marginal_error=error,
        record=record,
    )


def sinkhorn_unrolled_backward(row_weights, col_weights, costs, config, plan_gradient, result=None):
    """Reverse-mode gradients through the recorded dual iteration.

    ``plan_gradient`` is the upstream gradient of a scalar loss with
    respect to every plan entry.  When ``result`` is omitted the forward
    solve is rerun here; a non-convergent forward refuses to produce
    gradients.  Gradients are taken with respect to the raw (pre-clamp,
    pre-normalization) weight vectors so finite differences on them agree.
    """
    if result is None:
        result = sinkhorn_solve(row_weights, col_weights, costs, config)
    row_raw = np.asarray(row_weights, dtype=np.float64)
    col_raw = np.asarray(col_weights, dtype=np.float64)
    row = result.row_marginal
    col = result.col_marginal
    m = _check_costs(costs, row.size, col.size)
    eps = result.epsilon
    upstream = np.asarray(plan_gradient, dtype=np.float64)
    if upstream.shape != m.shape:
        raise ValueError(f"plan gradient shape {upstream.shape} != cost shape {m.shape}")

    record = result.record
    steps = list(record.steps)
    if not steps:
        raise TransportError("forward solve recorded no iterations; cannot differentiate")

    log_row = np.log(row)
    log_col = np.log(col)

    # Plan entries are exp((f + g - costs) / eps) for the last recorded pair.
    f_last = steps[-1][1]
    g_last = record.final_g
    log_plan = (f_last[:, None] + g_last[None, :] - m) / eps
    plan = np.exp(log_plan)
    weighted = upstream * plan

    f_bar = weighted.sum(axis=1) / eps
    g_bar = weighted.sum(axis=0) / eps
    m_bar = -weighted / eps
    eps_bar = -float(np.sum(weighted * log_plan)) / eps
    log_row_bar = np.zeros_like(row)
    log_col_bar = np.zeros_like(col)

    for g_before, f_step in reversed(steps):
        # g = eps * (log_col - logsumexp((f - costs) / eps, rows))
        b = (f_step[:, None] - m) / eps
        lse_b = _logsumexp(b, axis=0)
        soft_b = np.exp(b - lse_b[None, :])
        g_step = eps * (log_col - lse_b)
        log_col_bar += eps * g_bar
        m_bar += soft_b * g_bar[None, :]
        eps_bar += float(np.dot(g_bar, g_step / eps + np.sum(soft_b * b, axis=0)))
        f_bar = f_bar - soft_b @ g_bar

        # f = eps * (log_row - logsumexp((g_before - costs) / eps, cols))
        a = (g_before[None, :] - m) / eps
        lse_a = _logsumexp(a, axis=1)
        soft_a = np.exp(a - lse_a[:, None])
        log_row_bar += eps * f_bar
        m_bar += soft_a * f_bar[:, None]
        eps_bar += float(np.dot(f_bar, f_step / eps + np.sum(soft_a * a, axis=1)))
        g_bar = -soft_a.T @ f_bar
        f_bar = np.zeros_like(f_bar)

    # Through the floor-and-renormalize preprocessing of each weight vector.
    row_grad = _weight_preprocess_vjp(row_raw, row, log_row_bar / row)
    col_grad = _weight_preprocess_vjp(col_raw, col, log_col_bar / col)
    return SinkhornGradients(
        costs=m_bar, row_weights=row_grad, col_weights=col_grad, epsilon=eps_bar
    )


def _weight_preprocess_vjp(raw, normalized, normalized_bar):
    clamped = np.maximum(raw, WEIGHT_FLOOR)
    total = clamped.sum()
    clamped_bar = (normalized_bar - np.dot(normalized_bar, normalized)) / total
    return np.where(raw > WEIGHT_FLOOR, clamped_bar, 0.0)


def transport_cost(plan, costs):
    """Total cost ``sum(plan * costs)`` of a transport plan."""
    p = np.asarray(plan, dtype=np.float64)
    m = np.asarray(costs, dtype=np.float64)
    if p.shape != m.shape:
        raise ValueError(f"plan shape {p.shape} != cost shape {m.shape}")
    return float(np.sum(p * m))


def plan_entropy(plan):
    """Information entropy ``-sum(P * log P)`` with the 0 log 0 = 0 convention."""
    p = np.asarray(plan, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("plan has negative entries")
    positive = p[p > 0]
    return float(-np.sum(positive * np.log(positive)))


def exact_emd_solve(row_weights, col_weights, costs):
    """Minimize the unregularized transport cost with a transportation simplex.

    Northwest-corner initialization; the entering cell is the
    lowest-flat-index cell with negative reduced cost and the leaving cell
    is the lowest-index minimizer on the pivot cycle, so the pivot sequence
    is deterministic and cannot cycle.  The returned vertex plan has at
    most rows + cols - 1 nonzero entries.
    """
    row = normalize_weights(row_weights)
    col = normalize_weights(col_weights)
    m = _check_costs(costs, row.size, col.size)
    n_rows, n_cols = m.shape

    plan = np.zeros_like(m)
    basis = []
    remaining_row = row.copy()
    remaining_col = col.copy()
    i = j = 0
    while True:
        quantity = min(remaining_row[i], remaining_col[j])
        plan[i, j] = quantity
        basis.append((i, j))
        remaining_row[i] -= quantity
        remaining_col[j] -= quantity
        if i == n_rows - 1 and j == n_cols - 1:
            break
        row_done = remaining_row[i] <= 0
        col_done = remaining_col[j] <= 0
        if row_done and i < n_rows - 1:
            # On simultaneous exhaustion, advance the row only; the next
            # cell enters the basis with zero flow (degenerate but valid).
            i += 1
        elif col_done and j < n_cols - 1:
            j += 1
        elif i < n_rows - 1:
            i += 1
        else:
            j += 1

    max_pivots = 100_000
    pivots = 0
    while True:
        duals_row, duals_col = _transportation_duals(m, basis, n_rows, n_cols)
        reduced = m - duals_row[:, None] - duals_col[None, :]
        in_basis = np.zeros_like(m, dtype=bool)
        for cell in basis:
            in_basis[cell] = True
        candidates = np.flatnonzero(~in_basis.ravel() & (reduced.ravel() < -1e-12))
        if candidates.size == 0:
            break
        entering = (int(candidates[0]) // n_cols, int(candidates[0]) % n_cols)

        cycle = _pivot_cycle(basis, entering, n_rows, n_cols)
        minus_cells = cycle[1::2]
        theta = min(plan[cell] for cell in minus_cells)
        leaving = min(
            (cell for cell in minus_cells if plan[cell] <= theta),
            key=lambda cell: cell[0] * n_cols + cell[1],
        )
        for sign, cell in enumerate(cycle):
            plan[cell] += theta if sign % 2 == 0 else -theta
        plan[leaving] = 0.0
        basis[basis.index(leaving)] = entering
        pivots += 1
        if pivots > max_pivots:
            raise TransportError("transportation simplex exceeded its pivot budget")

    np.clip(plan, 0.0, None, out=plan)
    return EmdResult(plan=plan, cost=transport_cost(plan, m), pivots=pivots)


def _transportation_duals(costs, basis, n_rows, n_cols):
    """Solve duals_row[i] + duals_col[j] = costs[i, j] over the basis tree."""
    adjacency = {node: [] for node in range(n_rows + n_cols)}
    for i, j in basis:
        adjacency[i].append(n_rows + j)
        adjacency[n_rows + j].append(i)
    duals = np.full(n_rows + n_cols, np.nan)
    duals[0] = 0.0
    stack = [0]
    while stack:
        node = stack.pop()
        for neighbor in adjacency[node]:
            if np.isnan(duals[neighbor]):
                if node < n_rows:
                    duals[neighbor] = costs[node, neighbor - n_rows] - duals[node]
                else:
                    duals[neighbor] = costs[neighbor, node - n_rows] - duals[node]
                stack.append(neighbor)
    if np.any(np.isnan(duals)):
        raise TransportError("basis does not span the transportation graph")
    return duals[:n_rows], duals[n_rows:]


def _pivot_cycle(basis, entering, n_rows, n_cols):
    """Cycle of cells created by adding ``entering`` to the basis tree.

    Returns cells in cycle order starting at the entering cell, so even
    positions gain flow and odd positions lose flow.
    """
    adjacency = {node: [] for node in range(n_rows + n_cols)}
    for i, j in basis:
        adjacency[i].append(n_rows + j)
        adjacency[n_rows + j].append(i)
    start = entering[0]
    goal = n_rows + entering[1]
    parents = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for neighbor in adjacency[node]:
            if neighbor not in parents:
                parents[neighbor] = node
                stack.append(neighbor)
    if goal not in parents:
        raise TransportError("entering cell is disconnected from the basis tree")
    path = [goal]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    cells = [entering]
    for first, second in zip(path, path[1:]):
        if first < n_rows:
            cells.append((first, second - n_rows))
        else:
            cells.append((second, first - n_rows))
    return cells
