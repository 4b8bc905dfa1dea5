"""Entropic optimal transport between local features and prompts.

Costs follow the graph-matching formulation: a node cost ``C_WD = 1 - cos(Z, W)``,
an edge pseudo-cost built from the intra-domain similarity graphs, and their
convex combination solved with log-domain Sinkhorn scaling inside an outer
loop that re-linearises the edge term around the current plan.

The batched solvers take a stack of independent problems and stop updating a
problem once it has converged, so a problem solved inside a batch gets the
same plan as when it is solved on its own.
"""
import itertools
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from tabulate import tabulate

from dualpt import numerics
from dualpt.errors import (InvalidConfig, InvalidCost, InvalidGraph,
                           InvalidMarginal, InvalidWeight, ShapeMismatch,
                           TooLarge)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.1
DEFAULT_ALPHA = 0.2
MAX_BRUTEFORCE = 8
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = DEFAULT_LAMBDA
    inner_max: int = 100
    outer_max: int = 10
    marginal_tol: float = 1e-6
    plan_tol: float = 1e-6
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfig(f'Entropic regularization must be positive, got {self.lam}')
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidWeight(f'Fused weight alpha must lie in [0, 1], got {self.alpha}')
        if not (self.marginal_tol > 0 and self.plan_tol > 0):
            raise InvalidConfig('Tolerances must be positive')
        if self.inner_max < 1 or self.outer_max < 1:
            raise InvalidConfig('Iteration limits must be at least 1')

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TransportPlan:
    T: np.ndarray
    p: np.ndarray
    q: np.ndarray
    inner_iterations: int = 0
    outer_iterations: int = 0
    converged: bool = True
    # attention plans only fix the row marginals
    column_constrained: bool = True

    def __post_init__(self):
        for name in ('T', 'p', 'q'):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.flags.writeable = False
            object.__setattr__(self, name, array)

    @property
    def shape(self):
        return self.T.shape

    @property
    def row_residual(self) -> float:
        return float(np.max(np.abs(self.T.sum(axis=1) - self.p)))

    @property
    def column_residual(self) -> float:
        return float(np.max(np.abs(self.T.sum(axis=0) - self.q)))

    @property
    def marginal_error(self) -> float:
        if not self.column_constrained:
            return self.row_residual
        return max(self.row_residual, self.column_residual)

    def objective(self, C) -> float:
        """Transport cost <T, C>."""
        C = np.asarray(C, dtype=np.float64)
        if C.shape != self.T.shape:
            raise ShapeMismatch(f'Cost shape {C.shape} does not match plan shape {self.T.shape}')
        return float(np.sum(self.T * C))


@dataclass
class BatchSolve:
    """Plans and bookkeeping for a stack of independent problems."""
    plans: np.ndarray
    p: np.ndarray
    q: np.ndarray
    inner_iterations: np.ndarray
    outer_iterations: np.ndarray
    converged: np.ndarray
    marginal_error: np.ndarray

    def plan(self, index: int) -> TransportPlan:
        return TransportPlan(
            T=self.plans[index], p=self.p, q=self.q,
            inner_iterations=int(self.inner_iterations[index]),
            outer_iterations=int(self.outer_iterations[index]),
            converged=bool(self.converged[index]))

    @property
    def unconverged(self) -> int:
        return int(np.count_nonzero(~self.converged))


# %% costs

def wd_cost(Z, W) -> np.ndarray:
    return np.clip(1.0 - numerics.cosine_matrix(Z, W), 0.0, 2.0)


def _check_graph(C, name: str) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeMismatch(f'{name} must be square, got shape {C.shape}')
    if not np.allclose(C, C.T, rtol=0.0, atol=SYMMETRY_TOL):
        raise InvalidGraph(f'{name} is not symmetric')
    return C


def _cross_domain(C_z, C_w, p, q) -> np.ndarray:
    # C_zw = C_z^2 p 1_M^T + 1_N q^T (C_w^2)^T, squares taken elementwise
    return ((C_z ** 2) @ p)[..., :, None] + ((C_w ** 2) @ q)[..., None, :]


def _edge_cost(C_zw, C_z, T, C_w) -> np.ndarray:
    return C_zw - 2.0 * (C_z @ T @ np.swapaxes(C_w, -1, -2))


def gwd_cost(C_z, C_w, p, q, T) -> np.ndarray:
    C_z = _check_graph(C_z, 'C_z')
    C_w = _check_graph(C_w, 'C_w')
    p, q = numerics.as_weights(p), numerics.as_weights(q)
    T = np.asarray(T, dtype=np.float64)
    N, M = C_z.shape[0], C_w.shape[0]
    if p.size != N or q.size != M or T.shape != (N, M):
        raise ShapeMismatch(
            f'Expected p[{N}], q[{M}], T[{N}x{M}]; got p[{p.size}], q[{q.size}], T{T.shape}')
    return _edge_cost(_cross_domain(C_z, C_w, p, q), C_z, T, C_w)


def fused_cost(C_wd, C_gwd, alpha: float) -> np.ndarray:
    C_wd = np.asarray(C_wd, dtype=np.float64)
    C_gwd = np.asarray(C_gwd, dtype=np.float64)
    if C_wd.shape != C_gwd.shape:
        raise ShapeMismatch(f'Cost shapes differ: {C_wd.shape} vs {C_gwd.shape}')
    if not 0.0 <= alpha <= 1.0:
        raise InvalidWeight(f'Fused weight alpha must lie in [0, 1], got {alpha}')
    # endpoints return the selected matrix untouched
    if alpha == 0.0:
        return C_wd.copy()
    if alpha == 1.0:
        return C_gwd.copy()
    return alpha * C_gwd + (1.0 - alpha) * C_wd


# %% solvers

def _marginals(p, q, N: int, M: int):
    p = numerics.as_weights(p) if p is not None else numerics.ProbVector.uniform(N).weights
    q = numerics.as_weights(q) if q is not None else numerics.ProbVector.uniform(M).weights
    if p.size != N or q.size != M:
        raise ShapeMismatch(f'Marginals of length {p.size}, {q.size} do not fit a {N}x{M} problem')
    if np.any(p <= 0) or np.any(q <= 0):
        raise InvalidMarginal('Sinkhorn requires strictly positive marginals')
    return p, q


def _marginal_error(plans, p, q) -> np.ndarray:
    rows = np.max(np.abs(plans.sum(axis=2) - p), axis=1)
    cols = np.max(np.abs(plans.sum(axis=1) - q), axis=1)
    return np.maximum(rows, cols)


def _sinkhorn_log(C, p, q, cfg: SinkhornConfig):
    """Log-domain Sinkhorn over a (P, N, M) stack of costs."""
    log_k = -C / cfg.lam
    log_p, log_q = np.log(p), np.log(q)
    P, N, M = C.shape
    u = np.zeros((P, N))
    v = np.zeros((P, M))
    iterations = np.zeros(P, dtype=np.int64)
    error = np.full(P, np.inf)
    active = np.arange(P)
    for _ in range(cfg.inner_max):
        if active.size == 0:
            break
        lk = log_k[active]
        u_a = log_p - logsumexp(lk + v[active][:, None, :], axis=2)
        v_a = log_q - logsumexp(lk + u_a[:, :, None], axis=1)
        u[active] = u_a
        v[active] = v_a
        iterations[active] += 1
        err = _marginal_error(np.exp(lk + u_a[:, :, None] + v_a[:, None, :]), p, q)
        error[active] = err
        active = active[err >= cfg.marginal_tol]
    plans = np.exp(log_k + u[:, :, None] + v[:, None, :])
    return plans, iterations, error < cfg.marginal_tol, error


def _check_costs(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 3:
        raise ShapeMismatch(f'Expected a stack of cost matrices, got shape {C.shape}')
    if not np.all(np.isfinite(C)):
        raise InvalidCost('Cost matrix has non-finite entries')
    return C


def sinkhorn_batch(C, p, q, cfg: SinkhornConfig) -> BatchSolve:
    C = _check_costs(C)
    p, q = _marginals(p, q, C.shape[1], C.shape[2])
    plans, iterations, converged, error = _sinkhorn_log(C, p, q, cfg)
    return BatchSolve(plans, p, q, iterations, np.ones_like(iterations), converged, error)


def graph_match_batch(C_wd, C_z, C_w, p, q, cfg: SinkhornConfig) -> BatchSolve:
    """Fused graph matching for stacks C_wd (P,N,M), C_z (P,N,N), C_w (P,M,M)."""
    C_wd = _check_costs(C_wd)
    P, N, M = C_wd.shape
    p, q = _marginals(p, q, N, M)
    if cfg.alpha == 0.0:
        # the node cost does not depend on T, one solve is the fixed point
        plans, iterations, converged, error = _sinkhorn_log(C_wd, p, q, cfg)
        return BatchSolve(plans, p, q, iterations, np.ones_like(iterations), converged, error)

    C_z = np.asarray(C_z, dtype=np.float64)
    C_w = np.asarray(C_w, dtype=np.float64)
    if C_z.shape != (P, N, N) or C_w.shape != (P, M, M):
        raise ShapeMismatch(f'Graph stacks {C_z.shape}, {C_w.shape} do not fit costs {C_wd.shape}')
    C_zw = _cross_domain(C_z, C_w, p, q)
    plans = np.broadcast_to(np.outer(p, q), (P, N, M)).copy()
    inner = np.zeros(P, dtype=np.int64)
    outer = np.zeros(P, dtype=np.int64)
    converged = np.zeros(P, dtype=bool)
    error = np.full(P, np.inf)
    active = np.arange(P)
    for _ in range(cfg.outer_max):
        if active.size == 0:
            break
        C_gwd = _edge_cost(C_zw[active], C_z[active], plans[active], C_w[active])
        cost = fused_cost(C_wd[active], C_gwd, cfg.alpha)
        if not np.all(np.isfinite(cost)):
            raise InvalidCost('Fused cost has non-finite entries')
        new, iterations, ok, err = _sinkhorn_log(cost, p, q, cfg)
        delta = np.max(np.abs(new - plans[active]), axis=(1, 2))
        plans[active] = new
        inner[active] += iterations
        outer[active] += 1
        converged[active] = ok
        error[active] = err
        active = active[delta >= cfg.plan_tol]
    return BatchSolve(plans, p, q, inner, outer, converged, error)


def _report(plan: TransportPlan, what: str) -> TransportPlan:
    if not plan.converged:
        logger.warning('%s did not reach marginal tolerance in %d sweeps (residual %.3g)',
                       what, plan.inner_iterations, plan.marginal_error)
    return plan


def sinkhorn(C, p=None, q=None, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeMismatch(f'Expected a cost matrix, got shape {C.shape}')
    return _report(sinkhorn_batch(C[None], p, q, cfg).plan(0), 'Sinkhorn')


def solve_assignment(Z, W, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Solve the fused node/edge assignment between local features Z and prompts W."""
    Z, W = numerics.as_matrix(Z), numerics.as_matrix(W)
    C_wd = wd_cost(Z, W)
    C_z = numerics.cosine_matrix(Z, Z)
    C_w = numerics.cosine_matrix(W, W)
    result = graph_match_batch(C_wd[None], C_z[None], C_w[None], None, None, cfg)
    plan = result.plan(0)
    logger.debug('assignment %dx%d solved in %d outer / %d inner iterations',
                 Z.shape[0], W.shape[0], plan.outer_iterations, plan.inner_iterations)
    return _report(plan, 'Assignment')


def exact_ot_bruteforce(C):
    """Exact uniform-marginal OT on a square cost by enumerating permutations.

    Permutations are visited in lexicographic order and only a strictly
    smaller value replaces the incumbent, so ties keep the smallest one.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise ShapeMismatch(f'Brute force needs a non-empty square cost, got shape {C.shape}')
    n = C.shape[0]
    if n > MAX_BRUTEFORCE:
        raise TooLarge(f'Brute force is limited to n <= {MAX_BRUTEFORCE}, got {n}')
    rows = np.arange(n)
    best_value, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        value = C[rows, perm].sum() / n
        if value < best_value:
            best_value, best_perm = value, perm
    return float(best_value), tuple(best_perm)


def transport_summary(plan: TransportPlan, C=None, floatfmt: str = '.6f') -> str:
    lines = [tabulate(plan.T, tablefmt='simple', floatfmt=floatfmt)]
    stats = []
    if C is not None:
        stats.append(('objective <T,C>', plan.objective(C)))
    stats += [
        ('row residual', plan.row_residual),
        ('column residual', plan.column_residual),
        ('outer iterations', plan.outer_iterations),
        ('inner iterations', plan.inner_iterations),
        ('converged', plan.converged),
    ]
    lines.append(tabulate(stats, tablefmt='plain', floatfmt='.3g'))
    return '\n\n'.join(lines)
