"""Sparse nonlinear least-squares machinery over factor graphs.

Levenberg-Marquardt on the whitened normal equations J^T J + lambda*diag,
with a dense fast path for small problems (window solves) and a sparse LU
path for batch problems. The linearization structure (row/column layout,
same-kind factor groups, constant Jacobian blocks) is prepared once per
optimize call and only numeric data is refreshed per iteration.

Column ordering is (timestep, kind) lexicographic, which makes the chain
graphs of the simulation pipelines nearly banded; row blocks appear in
factor order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import RankDeficiencyError, SolverDivergedError
from .factors import Key
from .graph import ChainedValues, FactorGraph, Values

_LAMBDA_FLOOR = 1e-12
_DENSE_MAX_ENTRIES = 400_000


@dataclass
class LMConfig:
    """Levenberg-Marquardt settings (defaults follow the reference runs).

    With ``try_gauss_newton`` the solver first attempts the undamped step
    whenever the damping is at or below its initial value, falling back to
    damped steps on rejection; quadratic problems then solve exactly.
    """

    max_iterations: int = 15
    lambda_init: float = 1e-5
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e10
    rel_cost_decrease: float = 1e-9
    grad_inf_tol: float = 1e-10
    try_gauss_newton: bool = True


@dataclass
class OptResult:
    """Outcome of one optimize call; ``values`` holds the optimized keys only."""

    values: Values
    cost: float
    iterations: int
    converged: bool
    diagnostics: list = field(default_factory=list)


def _key_order(key: Key):
    return (key.t, int(key.kind))


class _Structure:
    """Precomputed linearization layout for a fixed factor/variable set."""

    def __init__(self, factors, var_dims, free_keys):
        self.factors = list(factors)
        free = set(free_keys)
        self.cols = sorted(free, key=_key_order)
        self.col_off = {}
        off = 0
        for k in self.cols:
            self.col_off[k] = off
            off += var_dims[k]
        self.ncols = off
        self.var_dims = var_dims

        self.row_off = np.zeros(len(self.factors) + 1, dtype=np.int64)
        for i, f in enumerate(self.factors):
            self.row_off[i + 1] = self.row_off[i] + f.dim
        self.nrows = int(self.row_off[-1])

        # Group same-kind factors for vectorized evaluation.
        groups: dict = {}
        order = []
        for i, f in enumerate(self.factors):
            gk = f.group_key()
            gk = ("__single__", i) if gk is None else gk
            if gk not in groups:
                groups[gk] = []
                order.append(gk)
            groups[gk].append(i)
        self.groups = []
        data_len = 0
        rows_idx = []
        cols_idx = []
        for gk in order:
            idxs = groups[gk]
            facs = [self.factors[i] for i in idxs]
            dim = facs[0].dim
            si = np.stack([f.noise.sqrt_info for f in facs])
            r_dest = np.concatenate(
                [np.arange(self.row_off[i], self.row_off[i] + dim) for i in idxs]
            )
            blocks = []  # per key position: (sel, dest_slice_into_data, dk)
            for p, _ in enumerate(facs[0].keys):
                sel = [b for b, f in enumerate(facs) if f.keys[p] in free]
                if not sel:
                    blocks.append(None)
                    continue
                dk = var_dims[facs[0].keys[p]]
                dest = []
                for b in sel:
                    f = facs[b]
                    fi = idxs[b]
                    r0 = self.row_off[fi]
                    c0 = self.col_off[f.keys[p]]
                    rr = np.repeat(np.arange(r0, r0 + dim), dk)
                    cc = np.tile(np.arange(c0, c0 + dk), dim)
                    rows_idx.append(rr)
                    cols_idx.append(cc)
                    dest.append(np.arange(data_len, data_len + dim * dk))
                    data_len += dim * dk
                blocks.append(
                    (np.asarray(sel), np.concatenate(dest), dk)
                )
            self.groups.append((type(facs[0]), facs, si, r_dest, blocks))
        self.data_len = data_len
        self.rows = np.concatenate(rows_idx) if rows_idx else np.zeros(0, dtype=np.int64)
        self.colsJ = np.concatenate(cols_idx) if cols_idx else np.zeros(0, dtype=np.int64)
        self.data = np.zeros(data_len)
        self._const_filled = False
        self.dense = self.nrows * max(self.ncols, 1) <= _DENSE_MAX_ENTRIES

    def residual(self, values, r=None):
        """Whitened residual vector at ``values`` (factor order)."""
        if r is None:
            r = np.zeros(self.nrows)
        for cls, facs, si, r_dest, _ in self.groups:
            E = cls.batch_error(facs, values)
            r[r_dest] = (E * si).ravel()
        return r

    def fill(self, values, r):
        """Refresh residual and Jacobian data at ``values``."""
        for cls, facs, si, r_dest, blocks in self.groups:
            const = cls.jacobian_is_constant and self._const_filled
            if const:
                E = cls.batch_error(facs, values)
            else:
                E, Js = cls.batch_error_and_jacobians(facs, values)
                for p, blk in enumerate(blocks):
                    if blk is None:
                        continue
                    sel, dest, _ = blk
                    Jw = np.asarray(Js[p]) * si[:, :, None]
                    self.data[dest] = Jw[sel].ravel()
            r[r_dest] = (E * si).ravel()
        self._const_filled = True
        return r

    def jacobian(self):
        if self.dense:
            J = np.zeros(self.nrows * self.ncols)
            J[self.rows * self.ncols + self.colsJ] = self.data
            return J.reshape(self.nrows, self.ncols)
        return scipy.sparse.coo_matrix(
            (self.data, (self.rows, self.colsJ)), shape=(self.nrows, self.ncols)
        ).tocsr()

    def pack(self, values):
        x = np.zeros(self.ncols)
        for k in self.cols:
            o = self.col_off[k]
            x[o : o + self.var_dims[k]] = values[k]
        return x

    def unpack_delta(self, base, dx):
        out = {}
        for k in self.cols:
            o = self.col_off[k]
            out[k] = np.asarray(base[k]) + dx[o : o + self.var_dims[k]]
        return out


def linearize(graph: FactorGraph, values, free_keys=None, factors=None):
    """Whitened sparse system at ``values``: returns (J, r, column offsets).

    ``J`` is dense for small problems and CSR otherwise; rows follow factor
    order, columns follow (timestep, kind) ordering of the free keys.
    """
    factors = graph.factors if factors is None else list(factors)
    if free_keys is None:
        free_keys = {k for f in factors for k in f.keys}
    st = _Structure(factors, graph.var_dims, free_keys)
    r = np.zeros(st.nrows)
    st.fill(values, r)
    return st.jacobian(), r, dict(st.col_off)


def graph_cost(graph: FactorGraph, values, factors=None) -> float:
    """Total cost 0.5 * ||whitened residual||^2 over the given factors."""
    factors = graph.factors if factors is None else list(factors)
    st = _Structure(factors, graph.var_dims, set())
    r = st.residual(values)
    return 0.5 * float(r @ r)


def _solve_damped(A_dense, A_sparse, diag, lam, g):
    """Solve (A + lam*diag) dx = -g; returns None when factorization fails."""
    if A_dense is not None:
        A = A_dense + np.diag(lam * diag)
        try:
            c, low = scipy.linalg.cho_factor(A, check_finite=False)
            return scipy.linalg.cho_solve((c, low), -g, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            return None
    A = (A_sparse + scipy.sparse.diags(lam * diag)).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(A)
        dx = lu.solve(-g)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def optimize_lm(
    graph: FactorGraph,
    values,
    config: LMConfig | None = None,
    free_keys=None,
    factors=None,
    sink=None,
) -> OptResult:
    """Levenberg-Marquardt minimization of the graph cost.

    Only ``free_keys`` are optimized (all keys referenced by the factors by
    default); other variables are read from ``values`` as constants. Returns
    fresh arrays for the optimized keys; the input values are not mutated.
    Accepted steps never increase the cost. Raises SolverDivergedError when
    the damping exceeds ``lambda_max`` without an acceptable step.
    """
    config = config or LMConfig()
    factors = graph.factors if factors is None else list(factors)
    if free_keys is None:
        free_keys = {k for f in factors for k in f.keys}
    free_keys = set(free_keys)
    graph.warn_if_disconnected(factors)

    st = _Structure(factors, graph.var_dims, free_keys)
    cur = Values({k: np.array(values[k], dtype=float) for k in st.cols})
    view = ChainedValues(cur, values)
    r = np.zeros(st.nrows)
    r_trial = np.zeros(st.nrows)

    st.fill(view, r)
    cost = 0.5 * float(r @ r)
    lam = config.lambda_init
    iterations = 0
    converged = False
    diagnostics = []

    def emit(i, c, l, s):
        diagnostics.append((i, c, l, s))
        if sink is not None:
            sink(f"{i}, {c:.12e}, {l:.3e}, {s:.3e}")

    if st.ncols == 0:
        emit(0, cost, lam, 0.0)
        return OptResult(cur, cost, 0, True, diagnostics)

    while iterations < config.max_iterations:
        iterations += 1
        J = st.jacobian()
        if st.dense:
            A_dense, A_sparse = J.T @ J, None
            g = J.T @ r
            diag = np.maximum(np.diag(A_dense), _LAMBDA_FLOOR)
        else:
            A_dense, A_sparse = None, (J.T @ J).tocsr()
            g = J.T @ r
            diag = np.maximum(A_sparse.diagonal(), _LAMBDA_FLOOR)

        if np.linalg.norm(g, np.inf) < config.grad_inf_tol:
            converged = True
            emit(iterations, cost, lam, 0.0)
            break

        accepted = False
        step_norm = 0.0
        rel_drop = 0.0
        gn_pending = config.try_gauss_newton and lam <= config.lambda_init
        while True:
            lam_eff = 0.0 if gn_pending else lam
            dx = _solve_damped(A_dense, A_sparse, diag, lam_eff, g)
            if dx is not None:
                trial = st.unpack_delta(cur, dx)
                trial_view = ChainedValues(trial, values)
                st.residual(trial_view, r_trial)
                new_cost = 0.5 * float(r_trial @ r_trial)
                if np.isfinite(new_cost) and new_cost < cost:
                    step_norm = float(np.linalg.norm(dx))
                    rel_drop = (cost - new_cost) / max(cost, 1e-300)
                    cur.update({k: np.asarray(v) for k, v in trial.items()})
                    cost = new_cost
                    lam = max(lam * config.lambda_down, _LAMBDA_FLOOR)
                    accepted = True
                    break
            if gn_pending:
                gn_pending = False
                continue
            lam *= config.lambda_up
            if lam > config.lambda_max:
                emit(iterations, cost, lam, step_norm)
                raise SolverDivergedError(
                    f"damping exceeded {config.lambda_max:g} without an "
                    f"acceptable step (cost {cost:.3e})"
                )
        emit(iterations, cost, lam, step_norm)
        if accepted:
            st.fill(view, r)
            if rel_drop < config.rel_cost_decrease or cost == 0.0:
                converged = True
                break

    return OptResult(cur, cost, iterations, converged, diagnostics)


def marginal_covariance(graph: FactorGraph, values, keys, free_keys=None, factors=None):
    """Marginal covariance blocks of the requested keys at an optimum.

    Inverts the Gauss-Newton Hessian of the whitened problem; raises
    RankDeficiencyError (listing null directions) when it is singular.
    """
    factors = graph.factors if factors is None else list(factors)
    if free_keys is None:
        free_keys = {k for f in factors for k in f.keys}
    st = _Structure(factors, graph.var_dims, free_keys)
    r = np.zeros(st.nrows)
    st.fill(values, r)
    J = st.jacobian()
    if st.dense:
        A = J.T @ J
    else:
        A = (J.T @ J).toarray() if st.ncols <= 2000 else (J.T @ J).tocsc()
    out = {}
    if isinstance(A, np.ndarray):
        w, V = np.linalg.eigh(A)
        tol = max(st.ncols, 1) * np.finfo(float).eps * (w.max() if w.size else 0.0)
        null = V[:, w <= tol]
        if null.shape[1]:
            raise RankDeficiencyError(
                f"information matrix is rank deficient ({null.shape[1]} null directions)",
                null_directions=null,
            )
        solve = lambda rhs: np.linalg.solve(A, rhs)
    else:
        try:
            lu = scipy.sparse.linalg.splu(A)
        except RuntimeError as exc:
            raise RankDeficiencyError(f"information matrix is singular: {exc}") from exc
        solve = lambda rhs: lu.solve(rhs)
    for k in keys:
        o = st.col_off[k]
        dk = graph.var_dims[k]
        rhs = np.zeros((st.ncols, dk))
        rhs[o : o + dk] = np.eye(dk)
        X = solve(rhs)
        out[k] = np.asarray(X)[o : o + dk, :]
    return out


class FixedLagSmoother:
    """Sliding-window solver: re-optimizes only the last N_w timesteps.

    Variables older than the window stay frozen at their last estimates and
    act as fixed parameters inside factors that straddle the boundary.
    """

    def __init__(self, window: int, config: LMConfig | None = None, sink=None):
        if window < 2:
            raise ValueError("window length must be >= 2")
        self.window = int(window)
        self.config = config or LMConfig()
        self.sink = sink
        self.graph = FactorGraph()
        self.values = Values()
        self._keys_by_t: dict[int, list[Key]] = {}
        self._factor_maxt: list[int] = []
        self._active_start = 0
        self.window_iterations: list[int] = []

    def add_variable(self, key: Key, dim: int, init):
        self.graph.add_variable(key, dim)
        self.values[key] = np.array(init, dtype=float)
        self._keys_by_t.setdefault(key.t, []).append(key)

    def add_factor(self, factor):
        self.graph.add_factor(factor)
        self._factor_maxt.append(max(k.t for k in factor.keys))

    def step(self, t: int) -> OptResult:
        """Solve the window of timesteps (t - N_w, t]; merge the estimates."""
        t_min = t - self.window + 1
        free = [
            k for tt in range(max(t_min, min(self._keys_by_t)), t + 1)
            for k in self._keys_by_t.get(tt, ())
        ]
        while (
            self._active_start < len(self._factor_maxt)
            and self._factor_maxt[self._active_start] < t_min
        ):
            self._active_start += 1
        active = [
            f
            for f, maxt in zip(
                self.graph.factors[self._active_start:],
                self._factor_maxt[self._active_start:],
            )
            if maxt >= t_min
        ]
        result = optimize_lm(
            self.graph, self.values, self.config,
            free_keys=free, factors=active, sink=self.sink,
        )
        self.values.update(result.values)
        self.window_iterations.append(result.iterations)
        return result
