"""Sparse convex QP solver based on operator splitting (ADMM).

Solves

    minimize    0.5 x' P x + q' x
    subject to  lower <= A x <= upper

with the OSQP iteration: Ruiz equilibration, a cached sparse factorization of
``P + sigma I + A' diag(rho) A`` for the x-update, projection onto the box,
over-relaxation, residual-balancing step-size adaptation, infeasibility
certificates and a final active-set polishing step. An optional presolve
removes variables pinned by equality rows (chains of rows with a single
unknown) before the iteration and restores them, with their multipliers,
afterwards.

Infinite bounds are stored internally as ``+/-INF`` (1e30).
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = 1e30
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_RHO_EQ_SCALE = 1e3
_SCALE_MIN, _SCALE_MAX = 1e-4, 1e4


class Status(str, enum.Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


@dataclass
class QpProblem:
    p_mat: sp.csc_matrix
    q_vec: np.ndarray
    a_mat: sp.csc_matrix
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.p_mat = sp.csc_matrix(self.p_mat, dtype=float)
        self.a_mat = sp.csc_matrix(self.a_mat, dtype=float)
        self.q_vec = np.asarray(self.q_vec, dtype=float).ravel()
        self.lower = np.clip(np.asarray(self.lower, dtype=float).ravel(), -INF, INF)
        self.upper = np.clip(np.asarray(self.upper, dtype=float).ravel(), -INF, INF)
        n, m = self.n, self.m
        if self.p_mat.shape != (n, n) or self.a_mat.shape[1] != n:
            raise ValueError("inconsistent QP dimensions")
        if self.lower.shape != (m,) or self.upper.shape != (m,):
            raise ValueError("bounds must have one entry per constraint row")
        for name, arr in (("P", self.p_mat.data), ("q", self.q_vec), ("A", self.a_mat.data),
                          ("lower", self.lower), ("upper", self.upper)):
            if np.any(np.isnan(arr)):
                raise ValueError(f"NaN in {name}")
        if not (np.all(np.isfinite(self.p_mat.data)) and np.all(np.isfinite(self.q_vec))
                and np.all(np.isfinite(self.a_mat.data))):
            raise ValueError("non-finite entries in P, q or A")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        asym = abs(self.p_mat - self.p_mat.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(self.p_mat).max()):
            raise ValueError("P must be symmetric")

    @property
    def n(self) -> int:
        return self.q_vec.size

    @property
    def m(self) -> int:
        return self.a_mat.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.p_mat @ x) + self.q_vec @ x)


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha_relax: float = 1.6
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    eps_prim_inf: float = 1e-4
    eps_dual_inf: float = 1e-4
    max_iter: int = 10000
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    scaling_iters: int = 10
    check_interval: int = 5
    polish: bool = True
    polish_delta: float = 1e-6
    polish_refine_iters: int = 5
    early_polish: bool = False  # try polishing once residuals are within early_polish_factor of the tolerance
    early_polish_factor: float = 100.0
    early_polish_interval: int = 25
    presolve: bool = False


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: Status
    iterations: int
    primal_res: float
    dual_res: float
    objective: float
    polished: bool = False
    rho_updates: int = 0
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _col_inf_norms(mat: sp.csc_matrix) -> np.ndarray:
    out = np.zeros(mat.shape[1])
    if mat.nnz:
        absm = abs(mat).tocsc()
        out = np.asarray(absm.max(axis=0).todense()).ravel()
    return out


def _ruiz(p_mat, q_vec, a_mat, iters):
    """Equilibrate the KKT matrix; returns scaled data and (D, E, c)."""
    n, m = p_mat.shape[0], a_mat.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    p_s, q_s, a_s = p_mat.copy(), q_vec.copy(), a_mat.copy()
    for _ in range(iters):
        norm_cols = np.maximum(_col_inf_norms(p_s), _col_inf_norms(a_s))
        norm_rows = _col_inf_norms(a_s.T.tocsc())
        d_step = 1.0 / np.sqrt(np.clip(np.where(norm_cols < _SCALE_MIN, 1.0, norm_cols), _SCALE_MIN, _SCALE_MAX))
        e_step = 1.0 / np.sqrt(np.clip(np.where(norm_rows < _SCALE_MIN, 1.0, norm_rows), _SCALE_MIN, _SCALE_MAX))
        dm, em = sp.diags(d_step), sp.diags(e_step)
        p_s = (dm @ p_s @ dm).tocsc()
        a_s = (em @ a_s @ dm).tocsc()
        q_s = d_step * q_s
        d *= d_step
        e *= e_step
        # cost scaling
        mean_p = np.mean(_col_inf_norms(p_s)) if n else 1.0
        gamma = max(mean_p, _inf_norm(q_s))
        gamma = np.clip(gamma if gamma >= _SCALE_MIN else 1.0, _SCALE_MIN, _SCALE_MAX)
        p_s = p_s / gamma
        q_s = q_s / gamma
        c /= gamma
    return p_s.tocsc(), q_s, a_s.tocsc(), d, e, c


@dataclass
class Reduction:
    """Variables fixed by equality rows and the smaller problem over the rest."""

    problem: QpProblem
    free: np.ndarray  # indices of remaining variables
    kept_rows: np.ndarray
    x_fixed: np.ndarray  # full-length, zero on free variables
    batches: list  # [(rows, cols)] in fixing order

    @property
    def num_fixed(self) -> int:
        return int(self.x_fixed.size - self.free.size)


def presolve(problem: QpProblem, max_passes: int = 10000) -> Reduction | None:
    """Fix every variable that is the only unknown left in an equality row.

    Passes repeat until no such row remains. Rows left with no unknowns are
    dropped when they hold within a small tolerance and kept otherwise (an
    empty infeasible row then shows up as primal infeasibility). Returns
    ``None`` when nothing can be fixed.
    """
    n, m = problem.n, problem.m
    if m == 0:
        return None
    a_csr = problem.a_mat.tocsr()
    a_csr.eliminate_zeros()
    pattern = a_csr.copy()
    pattern.data = np.ones_like(pattern.data)
    eq = (problem.lower == problem.upper) & (np.abs(problem.lower) < INF)
    fixed = np.zeros(n, dtype=bool)
    x_fixed = np.zeros(n)
    used = np.zeros(m, dtype=bool)
    batches = []
    for _ in range(max_passes):
        n_free = pattern @ (~fixed).astype(float)
        cand = np.flatnonzero(eq & ~used & (n_free == 1))
        if cand.size == 0:
            break
        sub = a_csr[cand]
        free_part = sub.multiply((~fixed)[None, :]).tocsr()
        free_part.eliminate_zeros()
        cols = free_part.indices[free_part.indptr[:-1]]
        coef = free_part.data[free_part.indptr[:-1]]
        _, first = np.unique(cols, return_index=True)
        cand, cols, coef = cand[first], cols[first], coef[first]
        vals = (problem.lower[cand] - a_csr[cand] @ x_fixed) / coef
        fixed[cols] = True
        x_fixed[cols] = vals
        used[cand] = True
        batches.append((cand, cols))
    if not batches:
        return None
    free = np.flatnonzero(~fixed)
    n_free = pattern @ (~fixed).astype(float)
    ax_fixed = a_csr @ x_fixed
    empty = ~used & (n_free == 0)
    tol = 1e-9 * np.maximum(1.0, np.abs(ax_fixed))
    satisfied = empty & (ax_fixed >= problem.lower - tol) & (ax_fixed <= problem.upper + tol)
    kept = np.flatnonzero(~used & ~satisfied)
    a_keep = a_csr[kept]
    shift = a_keep @ x_fixed
    lower = np.where(problem.lower[kept] <= -INF, -INF, problem.lower[kept] - shift)
    upper = np.where(problem.upper[kept] >= INF, INF, problem.upper[kept] - shift)
    p_csc = problem.p_mat.tocsc()
    p_free = p_csc[free][:, free]
    q_free = problem.q_vec[free] + (p_csc @ x_fixed)[free]
    reduced = QpProblem(p_free, q_free, a_keep.tocsc()[:, free], lower, upper)
    return Reduction(reduced, free, kept, x_fixed, batches)


def _postsolve(problem: QpProblem, red: Reduction, x_red, y_red) -> tuple:
    x = red.x_fixed.copy()
    x[red.free] = x_red
    y = np.zeros(problem.m)
    y[red.kept_rows] = y_red
    a_csc = problem.a_mat.tocsc()
    base = problem.p_mat @ x + problem.q_vec
    # multipliers of fixing rows from the stationarity of the variable each fixed, last fixed first
    for rows, cols in reversed(red.batches):
        grad = base[cols] + a_csc[:, cols].T @ y
        coef = np.asarray(a_csc[rows, cols]).ravel()
        y[rows] = -grad / coef
    return x, y


class QpSolver:
    """ADMM workspace for one problem; keeps scaling and factorization between solves.

    Use :meth:`update` to change ``q``/bounds (no refactorization). Changing
    ``P`` or ``A`` means building a new solver.
    """

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.original = problem
        self.reduction = presolve(problem) if self.settings.presolve else None
        if self.reduction is not None:
            problem = self.reduction.problem
        self.problem = problem
        st = self.settings
        pr = problem
        if st.scaling_iters > 0:
            self.p_s, self.q_s, self.a_s, self.d, self.e, self.c = _ruiz(pr.p_mat, pr.q_vec, pr.a_mat, st.scaling_iters)
        else:
            self.p_s, self.q_s, self.a_s = pr.p_mat.copy(), pr.q_vec.copy(), pr.a_mat.copy()
            self.d, self.e, self.c = np.ones(pr.n), np.ones(pr.m), 1.0
        self.a_s_t = self.a_s.T.tocsc()
        self._set_bounds(pr.lower, pr.upper)
        self.rho = st.rho
        self._factor_count = 0
        self._factorize()

    def _set_bounds(self, lower, upper):
        self.l_s = np.where(lower <= -INF, -INF, lower * self.e)
        self.u_s = np.where(upper >= INF, INF, upper * self.e)

    def update(self, q_vec=None, lower=None, upper=None):
        if self.reduction is not None:
            # fixed values depend on q and the bounds; presolve again
            orig = self.original
            self.__init__(QpProblem(orig.p_mat, orig.q_vec if q_vec is None else q_vec, orig.a_mat,
                                    orig.lower if lower is None else lower,
                                    orig.upper if upper is None else upper), self.settings)
            return
        pr = self.problem
        if q_vec is not None:
            pr.q_vec = np.asarray(q_vec, dtype=float)
            self.q_s = self.c * self.d * pr.q_vec
        if lower is not None or upper is not None:
            if lower is not None:
                pr.lower = np.clip(np.asarray(lower, dtype=float), -INF, INF)
            if upper is not None:
                pr.upper = np.clip(np.asarray(upper, dtype=float), -INF, INF)
            self._set_bounds(pr.lower, pr.upper)
            self._factorize()

    def _rho_vector(self, rho):
        vec = np.full(self.problem.m, rho)
        loose = (self.l_s <= -INF) & (self.u_s >= INF)
        eq = np.abs(self.u_s - self.l_s) < 1e-4
        vec[loose] = _RHO_MIN
        vec[eq] = _RHO_EQ_SCALE * rho
        return vec

    def _factorize(self):
        self.rho_vec = self._rho_vector(self.rho)
        n = self.problem.n
        mat = self.p_s + self.settings.sigma * sp.identity(n, format="csc") + self.a_s_t @ sp.diags(self.rho_vec) @ self.a_s
        self._lu = spla.splu(sp.csc_matrix(mat), permc_spec="MMD_AT_PLUS_A")
        self._factor_count += 1

    # -- residuals in unscaled space --------------------------------------
    def _residuals(self, x, z, y, ax):
        einv, dinv = 1.0 / self.e, 1.0 / self.d
        px = self.p_s @ x
        aty = self.a_s_t @ y
        r_prim = _inf_norm(einv * (ax - z))
        r_dual = _inf_norm(dinv * (px + self.q_s + aty)) / self.c
        st = self.settings
        eps_prim = st.eps_abs + st.eps_rel * max(_inf_norm(einv * ax), _inf_norm(einv * z))
        eps_dual = st.eps_abs + st.eps_rel / self.c * max(_inf_norm(dinv * px), _inf_norm(dinv * aty),
                                                          _inf_norm(dinv * self.q_s))
        return r_prim, r_dual, eps_prim, eps_dual, px, aty

    def _primal_infeasible(self, dy) -> bool:
        dy_u = self.e * dy / self.c
        norm = _inf_norm(dy_u)
        if norm < 1e-12:
            return False
        eps = self.settings.eps_prim_inf
        pr = self.problem
        if _inf_norm(pr.a_mat.T @ dy_u) > eps * norm:
            return False
        pos, neg = np.maximum(dy_u, 0.0), np.minimum(dy_u, 0.0)
        if np.any((pr.upper >= INF) & (pos > eps * norm)) or np.any((pr.lower <= -INF) & (neg < -eps * norm)):
            return False
        upper = np.where(pr.upper >= INF, 0.0, pr.upper)
        lower = np.where(pr.lower <= -INF, 0.0, pr.lower)
        return float(upper @ pos + lower @ neg) < -eps * norm

    def _dual_infeasible(self, dx) -> bool:
        dx_u = self.d * dx
        norm = _inf_norm(dx_u)
        if norm < 1e-12:
            return False
        eps = self.settings.eps_dual_inf
        pr = self.problem
        if _inf_norm(pr.p_mat @ dx_u) > eps * norm or pr.q_vec @ dx_u > -eps * norm:
            return False
        adx = pr.a_mat @ dx_u
        tol = eps * norm
        ok_upper = (pr.upper >= INF) | (adx <= tol)
        ok_lower = (pr.lower <= -INF) | (adx >= -tol)
        return bool(np.all(ok_upper & ok_lower))

    def solve(self, warm_start: tuple | None = None) -> QpSolution:
        if self.reduction is None:
            return self._solve(warm_start)
        t0 = time.perf_counter()
        red, orig = self.reduction, self.original
        if warm_start is not None:
            x0, y0 = warm_start
            warm_start = (None if x0 is None else np.asarray(x0)[red.free],
                          None if y0 is None else np.asarray(y0)[red.kept_rows])
        if self.problem.n == 0:
            ok = bool(np.all(self.problem.lower <= 0.0) and np.all(self.problem.upper >= 0.0))
            status = Status.SOLVED if ok else Status.PRIMAL_INFEASIBLE
            sol = QpSolution(np.zeros(0), np.zeros(self.problem.m), status, 0, 0.0, 0.0, 0.0)
        else:
            sol = self._solve(warm_start)
        if sol.status is Status.PRIMAL_INFEASIBLE:
            x, y = np.full(orig.n, np.nan), np.zeros(orig.m)
            y[red.kept_rows] = sol.y
            r_prim = r_dual = float("nan")
        else:
            x, y = _postsolve(orig, red, sol.x, np.nan_to_num(sol.y))
            ax = orig.a_mat @ x
            r_prim = _inf_norm(np.maximum(orig.lower - ax, 0.0) + np.maximum(ax - orig.upper, 0.0))
            r_dual = _inf_norm(orig.p_mat @ x + orig.q_vec + orig.a_mat.T @ y)
        obj = orig.objective(x) if sol.status in (Status.SOLVED, Status.MAX_ITER) else np.nan
        info = dict(sol.info, presolve_fixed=red.num_fixed, reduced_n=self.problem.n, reduced_m=self.problem.m)
        return QpSolution(x, y, sol.status, sol.iterations, r_prim, r_dual, obj, sol.polished, sol.rho_updates,
                          time.perf_counter() - t0, info)

    def _solve(self, warm_start: tuple | None = None) -> QpSolution:
        t0 = time.perf_counter()
        st = self.settings
        pr = self.problem
        n, m = pr.n, pr.m
        alpha, sigma = st.alpha_relax, st.sigma
        if warm_start is not None:
            x0, y0 = warm_start
            x = np.asarray(x0, dtype=float) / self.d if x0 is not None else np.zeros(n)
            y = self.c * np.asarray(y0, dtype=float) / self.e if y0 is not None else np.zeros(m)
        else:
            x, y = np.zeros(n), np.zeros(m)
        ax = self.a_s @ x
        z = np.clip(ax, self.l_s, self.u_s)
        status = Status.MAX_ITER
        r_prim = r_dual = np.inf
        rho_updates = 0
        it = 0
        polished = False
        early = st.polish and st.early_polish and m + n > 0
        last_polish = -st.early_polish_interval
        for it in range(1, st.max_iter + 1):
            x_prev, y_prev = x, y
            rhs = sigma * x - self.q_s + self.a_s_t @ (self.rho_vec * z - y)
            x_tilde = self._lu.solve(rhs)
            z_tilde = self.a_s @ x_tilde
            x = alpha * x_tilde + (1.0 - alpha) * x_prev
            z_relax = alpha * z_tilde + (1.0 - alpha) * z
            z_new = np.clip(z_relax + y / self.rho_vec, self.l_s, self.u_s)
            y = y + self.rho_vec * (z_relax - z_new)
            z = z_new

            check = it % st.check_interval == 0 or it == st.max_iter
            adapt = st.adaptive_rho_interval and it % st.adaptive_rho_interval == 0
            if not (check or adapt):
                continue
            ax = self.a_s @ x
            r_prim, r_dual, eps_prim, eps_dual, px, aty = self._residuals(x, z, y, ax)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = Status.SOLVED
                break
            fac = st.early_polish_factor
            if (early and it - last_polish >= st.early_polish_interval
                    and r_prim <= fac * eps_prim and r_dual <= fac * eps_dual):
                last_polish = it
                accepted = self._accept_polish(x, z, y)
                if accepted is not None:
                    x, y, z, r_prim, r_dual = accepted
                    status = Status.SOLVED
                    polished = True
                    break
            if self._primal_infeasible(y - y_prev):
                status = Status.PRIMAL_INFEASIBLE
                break
            if self._dual_infeasible(x - x_prev):
                status = Status.DUAL_INFEASIBLE
                break
            if adapt:
                prim_scale = max(_inf_norm(ax), _inf_norm(z), 1e-30)
                dual_scale = max(_inf_norm(px), _inf_norm(aty), _inf_norm(self.q_s), 1e-30)
                ratio = (_inf_norm(ax - z) / prim_scale) / max(_inf_norm(px + self.q_s + aty) / dual_scale, 1e-30)
                rho_new = float(np.clip(self.rho * np.sqrt(ratio), _RHO_MIN, _RHO_MAX))
                if rho_new > st.adaptive_rho_tolerance * self.rho or rho_new < self.rho / st.adaptive_rho_tolerance:
                    self.rho = rho_new
                    self._factorize()
                    rho_updates += 1

        if not polished and status in (Status.SOLVED, Status.MAX_ITER) and st.polish and m + n > 0:
            polished_xy = self._polish(x, z, y)
            if polished_xy is not None:
                x_p, y_p, sign_ok = polished_xy
                ax_p = self.a_s @ x_p
                z_p = np.clip(ax_p, self.l_s, self.u_s)
                rp, rd, ep, ed, _, _ = self._residuals(x_p, z_p, y_p, ax_p)
                if sign_ok and rp <= max(r_prim, ep) and rd <= max(r_dual, ed):
                    x, y, z, r_prim, r_dual = x_p, y_p, z_p, rp, rd
                    polished = True
                    if rp <= ep and rd <= ed:
                        status = Status.SOLVED

        x_u = self.d * x
        y_u = self.e * y / self.c
        if status is Status.PRIMAL_INFEASIBLE:
            x_u = np.full(n, np.nan)
        elif status is Status.DUAL_INFEASIBLE:
            y_u = np.full(m, np.nan)
        obj = pr.objective(x_u) if status in (Status.SOLVED, Status.MAX_ITER) else np.nan
        return QpSolution(x_u, y_u, status, it, float(r_prim), float(r_dual), obj, polished, rho_updates,
                          time.perf_counter() - t0, {"factorizations": self._factor_count})

    def _accept_polish(self, x, z, y):
        """Polished iterate if it meets the tolerances with consistent multiplier signs, else None."""
        out = self._polish(x, z, y)
        if out is None:
            return None
        x_p, y_p, sign_ok = out
        if not sign_ok:
            return None
        ax_p = self.a_s @ x_p
        z_p = np.clip(ax_p, self.l_s, self.u_s)
        rp, rd, ep, ed, _, _ = self._residuals(x_p, z_p, y_p, ax_p)
        if rp <= ep and rd <= ed:
            return x_p, y_p, z_p, rp, rd
        return None

    def _polish(self, x, z, y):
        """Solve the equality-constrained QP on the guessed active set.

        Returns ``(x, y, sign_ok)`` where ``sign_ok`` says the multipliers of
        active inequality rows point the right way (non-positive on lower
        bounds, non-negative on upper bounds) up to the absolute tolerance.
        """
        st = self.settings
        lower_act = (z - self.l_s < -y) | (np.abs(self.u_s - self.l_s) < 1e-12)
        upper_act = (self.u_s - z < y) & ~lower_act
        act = np.flatnonzero(lower_act | upper_act)
        bound = np.where(lower_act, self.l_s, self.u_s)[act]
        if np.any(np.abs(bound) >= INF):
            return None
        n = self.problem.n
        a_act = self.a_s[act]
        k = len(act)
        delta = st.polish_delta
        kkt_true = sp.bmat([[self.p_s, a_act.T], [a_act, None]], format="csc") if k else self.p_s.tocsc()
        reg = sp.diags(np.concatenate([np.full(n, delta), np.full(k, -delta)]))
        try:
            lu = spla.splu(sp.csc_matrix(kkt_true + reg), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError:
            return None
        rhs = np.concatenate([-self.q_s, bound])
        sol = lu.solve(rhs)
        for _ in range(st.polish_refine_iters):
            sol = sol + lu.solve(rhs - kkt_true @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        x_p = sol[:n]
        y_p = np.zeros(self.problem.m)
        y_p[act] = sol[n:]
        ineq = np.abs(self.u_s - self.l_s) >= 1e-12
        y_u = self.e * y_p / self.c
        tol = st.eps_abs
        sign_ok = not (np.any(lower_act & ineq & (y_u > tol)) or np.any(upper_act & (y_u < -tol)))
        return x_p, y_p, sign_ok


def solve(problem: QpProblem, settings: QpSettings | None = None, warm_start: tuple | None = None) -> QpSolution:
    return QpSolver(problem, settings).solve(warm_start)


def _fmt(v: float) -> str:
    if v >= INF:
        return "inf"
    if v <= -INF:
        return "-inf"
    return repr(float(v))


def dump_problem(problem: QpProblem, path) -> None:
    """Write the problem as plain-text triplets (0-based indices)."""
    p = problem.p_mat.tocoo()
    a = problem.a_mat.tocoo()
    lines = [f"matsplan-qp 1 {problem.n} {problem.m}"]
    lines += [f"P {i} {j} {_fmt(v)}" for i, j, v in zip(p.row, p.col, p.data)]
    lines += [f"A {i} {j} {_fmt(v)}" for i, j, v in zip(a.row, a.col, a.data)]
    lines += [f"q {i} {_fmt(v)}" for i, v in enumerate(problem.q_vec)]
    lines += [f"l {i} {_fmt(v)}" for i, v in enumerate(problem.lower)]
    lines += [f"u {i} {_fmt(v)}" for i, v in enumerate(problem.upper)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path) -> QpProblem:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["matsplan-qp", "1"]:
            raise ValueError(f"{path}: not a matsplan-qp file")
        n, m = int(header[2]), int(header[3])
        trip = {"P": ([], [], []), "A": ([], [], [])}
        vecs = {"q": np.zeros(n), "l": np.zeros(m), "u": np.zeros(m)}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] in trip:
                rows, cols, vals = trip[parts[0]]
                rows.append(int(parts[1]))
                cols.append(int(parts[2]))
                vals.append(float(parts[3]))
            else:
                vecs[parts[0]][int(parts[1])] = float(parts[2])
    p = sp.csc_matrix((trip["P"][2], (trip["P"][0], trip["P"][1])), shape=(n, n))
    a = sp.csc_matrix((trip["A"][2], (trip["A"][0], trip["A"][1])), shape=(m, n))
    return QpProblem(p, vecs["q"], a, vecs["l"], vecs["u"])
