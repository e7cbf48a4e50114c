"""Shared random-effects joint model for a repeated marker and an event time.

The longitudinal part is a linear mixed model for the log marker with a
random intercept and slope per subject.  The event part is a
proportional-hazards model with a piecewise-constant baseline on unit
intervals, whose log hazard at time t adds the subject's model-implied
log-marker trajectory evaluated at t minus a fixed lag.  The two parts
share the random effects; the marginal likelihood integrates them out
per subject with adaptive Gauss-Hermite quadrature centered at each
subject's conditional posterior mode.

Maximization runs a quasi-Newton search with an analytic gradient on an
unconstrained parameterization (log variance, Cholesky factors of the
random-effects covariance, log baseline rates), alternating with mode
refreshes until the likelihood stabilizes.  Baseline pieces without any
event are pinned to rate zero and carry no parameter.

A standalone mixed-model fit (:func:`fit_lmm`) provides starting values
and is exposed for direct use; it profiles out the fixed effects and
residual variance so only the three covariance-factor parameters are
searched numerically.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .cohort import to_long_format
from .errors import FitError

__all__ = [
    "LmmFit",
    "fit_lmm",
    "JointModelSpec",
    "JointParams",
    "JointFit",
    "jm_loglik",
    "fit_jm",
]

_EXP_CLIP = 500.0
_LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# linear mixed model


@dataclass(frozen=True)
class LmmFit:
    """Random-intercept random-slope fit of a long-format outcome."""

    coef: np.ndarray
    coef_names: tuple[str, ...]
    resid_var: float
    re_cov: np.ndarray
    loglik: float
    n_subjects: int
    n_obs: int
    converged: bool
    at_boundary: bool


def _lmm_suffstats(long, covariate_cols, id_col, time_col, value_col):
    ids = np.asarray(long[id_col])
    uniq, inv = np.unique(ids, return_inverse=True)
    t = np.asarray(long[time_col], dtype=float)
    y = np.asarray(long[value_col], dtype=float)
    covs = [np.asarray(long[c], dtype=float) for c in covariate_cols]
    u = np.column_stack([np.ones_like(t), t] + covs + [y])
    d = u.shape[1]
    gram = np.zeros((uniq.size, d, d))
    np.add.at(gram, inv, u[:, :, None] * u[:, None, :])
    counts = np.bincount(inv, minlength=uniq.size).astype(float)
    return uniq, gram, counts


def _lmm_profile(chol_params, gram, counts):
    """Profile log-likelihood given the scaled covariance factor.

    ``chol_params`` = (log L11, L21, log L22) parameterize
    Psi = L L' = D / sigma^2.  Fixed effects and the residual variance
    have closed-form maximizers and are profiled out.
    """
    c1, c2, c3 = chol_params
    l1 = math.exp(c1)
    l3 = math.exp(c3)
    psi = np.array([[l1 * l1, l1 * c2], [l1 * c2, c2 * c2 + l3 * l3]])
    d = gram.shape[1]
    p = d - 1
    zz = gram[:, :2, :2]
    zx = gram[:, :2, :p]
    zy = gram[:, :2, p]
    xx = gram[:, :p, :p]
    xy = gram[:, :p, p]
    yy = gram[:, p, p]
    m = np.eye(2)[None] + zz @ psi
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    det = np.maximum(det, 1e-300)
    minv = np.empty_like(m)
    minv[:, 0, 0] = m[:, 1, 1] / det
    minv[:, 1, 1] = m[:, 0, 0] / det
    minv[:, 0, 1] = -m[:, 0, 1] / det
    minv[:, 1, 0] = -m[:, 1, 0] / det
    a = np.einsum("ab,nbc->nac", psi, minv)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    ax = np.einsum("nab,nbp->nap", a, zx)
    xvx = xx.sum(0) - np.einsum("nap,naq->pq", zx, ax)
    xvy = xy.sum(0) - np.einsum("nap,na->p", zx, np.einsum("nab,nb->na", a, zy))
    yvy = yy.sum() - np.einsum("na,na->", zy, np.einsum("nab,nb->na", a, zy))
    beta = np.linalg.solve(xvx, xvy)
    rss = yvy - beta @ xvy
    n_total = counts.sum()
    rss = max(rss, 1e-12)
    sigma2 = rss / n_total
    ll = -0.5 * (n_total * (_LOG2PI + math.log(sigma2) + 1.0) + np.log(det).sum())
    return ll, beta, sigma2, psi, xvx


def fit_lmm(long, covariate_cols=("female", "older"), id_col="id", time_col="time",
            value_col="log_marker"):
    """Maximum-likelihood random-intercept random-slope model.

    ``long`` is a long-format table (one measurement per row).  Fixed
    effects are an intercept, the time column, and the listed covariate
    columns, in that order.  Only the three parameters of the scaled
    random-effects Cholesky factor are searched numerically; warns and
    flags the fit when a variance component collapses to the boundary.
    """
    if len(long) == 0:
        raise FitError("mixed model needs at least one observation")
    uniq, gram, counts = _lmm_suffstats(long, covariate_cols, id_col, time_col, value_col)

    def objective(c):
        return -_lmm_profile(c, gram, counts)[0]

    bounds = [(-12.0, 6.0), (-60.0, 60.0), (-12.0, 6.0)]
    best = None
    for start in ((0.0, 0.0, -1.0), (-1.5, 0.0, -3.0), (1.0, 0.0, 0.0)):
        res = minimize(objective, np.asarray(start), method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 200})
        if best is None or res.fun < best.fun - 1e-10:
            best = res
    ll, beta, sigma2, psi, _ = _lmm_profile(best.x, gram, counts)
    # the profile is flat once a factor diagonal is negligible, so the
    # search can stop far from the parameter bound; detect collapse by
    # the likelihood cost of pinning the factor to the boundary instead
    at_boundary = False
    for k in (0, 2):
        pinned = best.x.copy()
        pinned[k] = bounds[k][0]
        if _lmm_profile(pinned, gram, counts)[0] >= ll - 1e-2:
            at_boundary = True
    if at_boundary:
        warnings.warn("a random-effect variance component collapsed to the zero "
                      "boundary", stacklevel=2)
    names = ("const", time_col) + tuple(covariate_cols)
    return LmmFit(
        coef=beta,
        coef_names=names,
        resid_var=float(sigma2),
        re_cov=sigma2 * psi,
        loglik=float(ll),
        n_subjects=int(uniq.size),
        n_obs=int(counts.sum()),
        converged=bool(best.success),
        at_boundary=at_boundary,
    )


# ---------------------------------------------------------------------------
# joint model


@dataclass(frozen=True)
class JointModelSpec:
    """Numerical settings for the joint fit.

    ``lag`` shifts the trajectory feeding the hazard: the hazard at time
    t uses the trajectory value at t - lag.  ``quad_order`` is the
    number of Gauss-Hermite nodes per random-effect dimension;
    ``gl_order`` the number of Gauss-Legendre nodes used for the
    cumulative hazard on each baseline piece.
    """

    lag: int = 1
    quad_order: int = 9
    gl_order: int = 7
    max_iter: int = 500
    max_outer_rounds: int = 30
    rel_tol: float = 1e-8
    grad_tol: float = 1e-5
    se_step: float = 1e-5

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError("lag must be a non-negative integer")
        if self.quad_order < 1 or self.gl_order < 1:
            raise ValueError("quadrature orders must be positive")
        if self.max_iter < 1 or self.max_outer_rounds < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True)
class JointParams:
    """Natural-scale parameters of the joint model.

    ``base_hazard`` holds one rate per unit-interval piece; pieces
    without events are fixed at zero.  ``coef_long`` is ordered
    (const, time, female, older) and ``coef_event`` (female, older).
    """

    coef_long: np.ndarray
    resid_var: float
    re_cov: np.ndarray
    coef_event: np.ndarray
    assoc: float
    base_hazard: np.ndarray


@dataclass(frozen=True)
class JointFit:
    """Converged joint-model fit with natural-scale standard errors.

    ``curvature_scale`` carries the square root of the observed
    information diagonal (search parameterization); passing the fit as
    ``init`` to another :func:`fit_jm` call reuses it to precondition
    the next search.
    """

    params: JointParams
    std_errors: dict[str, float]
    loglik: float
    converged: bool
    n_outer_rounds: int
    n_inner_iterations: int
    grad_norm: float
    n_subjects: int
    n_events: int
    n_obs: int
    active_pieces: tuple[int, ...]
    n_parameters: int
    curvature_scale: np.ndarray | None = None

    @property
    def assoc(self):
        return float(self.params.assoc)

    @property
    def assoc_se(self):
        return float(self.std_errors["assoc"])

    @property
    def df_complete(self):
        """Complete-data degrees of freedom for downstream pooling."""
        return float(self.n_subjects - self.n_parameters)

    def to_frame(self):
        """Flat parameter/standard-error table."""
        import pandas as pd

        names = _natural_names(self.active_pieces)
        values = _natural_values(self.params, self.active_pieces)
        return pd.DataFrame(
            {
                "parameter": names,
                "estimate": values,
                "std_error": [self.std_errors[n] for n in names],
            }
        )


def _natural_names(active_pieces):
    return (
        "long_const", "long_time", "long_female", "long_older", "resid_var",
        "re_var_intercept", "re_cov_intercept_slope", "re_var_slope",
        "event_female", "event_older", "assoc",
    ) + tuple(f"base_hazard_{k}" for k in active_pieces)


def _natural_values(params, active_pieces):
    d = params.re_cov
    return np.concatenate(
        [
            params.coef_long,
            [params.resid_var, d[0, 0], d[0, 1], d[1, 1]],
            params.coef_event,
            [params.assoc],
            params.base_hazard[np.asarray(active_pieces) - 1],
        ]
    )


class _JointLikelihood:
    """Precomputed data views and the adaptive-quadrature objective.

    The cumulative hazard on full unit pieces factorizes: with
    c = assoc * (slope + b), the integrand on piece k is
    exp(c*(k-1-lag)) * exp(c*nu) over local node positions nu shared by
    all subjects, so piece sums and node sums separate into two small
    exponential arrays instead of one subjects x nodes x pieces x
    quadrature-points array.  The piece containing each subject's end of
    follow-up keeps its own scaled node positions.
    """

    def __init__(self, cohort, long, spec):
        self.spec = spec
        self.n = cohort.n_subjects
        self.female = cohort.female.astype(float)
        self.older = cohort.older.astype(float)
        self.delta = cohort.event.astype(float)
        self.t_end = cohort.event_time.astype(float)
        self.n_events = int(cohort.event.sum())
        if self.n_events == 0:
            raise FitError("joint model needs at least one event")

        # longitudinal sufficient statistics per subject, cohort row order
        row_of = {sid: i for i, sid in enumerate(cohort.subject_ids)}
        idx = np.fromiter((row_of[s] for s in long["id"]), dtype=int, count=len(long))
        t = np.asarray(long["time"], dtype=float)
        w = np.asarray(long["log_marker"], dtype=float)
        n_i = np.zeros(self.n)
        np.add.at(n_i, idx, 1.0)
        self.n_i = n_i
        self.s_t = np.zeros(self.n)
        np.add.at(self.s_t, idx, t)
        self.s_tt = np.zeros(self.n)
        np.add.at(self.s_tt, idx, t * t)
        self.s_w = np.zeros(self.n)
        np.add.at(self.s_w, idx, w)
        self.s_wt = np.zeros(self.n)
        np.add.at(self.s_wt, idx, w * t)
        self.s_ww = np.zeros(self.n)
        np.add.at(self.s_ww, idx, w * w)
        self.n_obs = int(len(long))

        # survival layout: unit pieces, last piece truncated at follow-up end
        k_total = int(math.ceil(self.t_end.max()))
        self.n_pieces = k_total
        piece = np.ceil(self.t_end).astype(int)
        self.piece = piece
        self.full_mask = (np.arange(1, k_total + 1)[None, :] < piece[:, None]).astype(float)
        self.k_lag = np.arange(k_total, dtype=float) - float(spec.lag)
        events_per_piece = np.bincount(piece[cohort.event == 1], minlength=k_total + 1)[1:]
        self.active = np.nonzero(events_per_piece > 0)[0]
        self.events_per_piece = events_per_piece
        self.t_lag = self.t_end - float(spec.lag)

        glx, glw = np.polynomial.legendre.leggauss(spec.gl_order)
        self.nu = (glx + 1.0) / 2.0
        self.wq = glw / 2.0
        width = self.t_end - (piece - 1)
        self.sl_part = (piece - 1)[:, None] + self.nu[None, :] * width[:, None] - spec.lag
        self.w_part = self.wq[None, :] * width[:, None]

        ghx, ghw = np.polynomial.hermite.hermgauss(spec.quad_order)
        z1, z2 = np.meshgrid(ghx, ghx, indexing="ij")
        lw = np.log(ghw)
        lw1, lw2 = np.meshgrid(lw, lw, indexing="ij")
        self.z1 = z1.ravel()
        self.z2 = z2.ravel()
        self.log_w = (lw1 + lw2).ravel() + self.z1**2 + self.z2**2 + math.log(2.0)
        self.n_nodes = self.z1.size

        self.modes = np.zeros((self.n, 2))
        self.c11 = np.ones(self.n)
        self.c21 = np.zeros(self.n)
        self.c22 = np.ones(self.n)
        self.n_params = 11 + self.active.size

    # -- parameter packing ---------------------------------------------------

    def pack(self, params):
        d = params.re_cov
        l1 = math.sqrt(max(d[0, 0], 1e-12))
        l2 = d[0, 1] / l1
        l22 = d[1, 1] - l2 * l2
        l3 = math.sqrt(max(l22, 1e-12))
        lam = np.maximum(params.base_hazard[self.active], 1e-12)
        return np.concatenate(
            [
                params.coef_long,
                [math.log(max(params.resid_var, 1e-12)), math.log(l1), l2, math.log(l3)],
                params.coef_event,
                [params.assoc],
                np.log(lam),
            ]
        )

    def unpack(self, theta):
        l1 = math.exp(theta[5])
        l2 = theta[6]
        l3 = math.exp(theta[7])
        d = np.array([[l1 * l1, l1 * l2], [l1 * l2, l2 * l2 + l3 * l3]])
        lam = np.zeros(self.n_pieces)
        lam[self.active] = np.exp(theta[11:])
        return JointParams(
            coef_long=theta[:4].copy(),
            resid_var=math.exp(theta[4]),
            re_cov=d,
            coef_event=theta[8:10].copy(),
            assoc=float(theta[10]),
            base_hazard=lam,
        )

    def bounds(self):
        b = [(None, None)] * 4
        b.append((-20.0, 8.0))
        b.extend([(-12.0, 6.0), (-80.0, 80.0), (-12.0, 6.0)])
        b.extend([(None, None)] * 2)
        b.append((-60.0, 60.0))
        b.extend([(-30.0, 6.0)] * self.active.size)
        return b

    def initial_theta(self, init=None):
        if init is not None:
            return self.pack(init)
        beta, sigma2, d = self._lmm_start()
        person_time = np.minimum(self.t_end[:, None], np.arange(1, self.n_pieces + 1)[None, :])
        person_time = np.maximum(person_time - np.arange(self.n_pieces)[None, :], 0.0).sum(0)
        lam = np.zeros(self.n_pieces)
        lam[self.active] = self.events_per_piece[self.active] / np.maximum(
            person_time[self.active], 1e-12
        )
        return self.pack(
            JointParams(
                coef_long=beta,
                resid_var=sigma2,
                re_cov=d,
                coef_event=np.zeros(2),
                assoc=0.0,
                base_hazard=lam,
            )
        )

    def _lmm_start(self):
        gram = np.zeros((self.n, 5, 5))
        # assemble the per-subject gram matrix of (1, t, female, older, w)
        # from the stored sufficient statistics
        f, o = self.female, self.older
        n_i, st, stt = self.n_i, self.s_t, self.s_tt
        sw, swt, sww = self.s_w, self.s_wt, self.s_ww
        rows = [
            [n_i, st, f * n_i, o * n_i, sw],
            [st, stt, f * st, o * st, swt],
            [f * n_i, f * st, f * f * n_i, f * o * n_i, f * sw],
            [o * n_i, o * st, f * o * n_i, o * o * n_i, o * sw],
            [sw, swt, f * sw, o * sw, sww],
        ]
        for i in range(5):
            for j in range(5):
                gram[:, i, j] = rows[i][j]
        best = None
        for start in ((0.0, 0.0, -1.0), (-1.5, 0.0, -3.0)):
            res = minimize(lambda c: -_lmm_profile(c, gram, n_i)[0], np.asarray(start),
                           method="L-BFGS-B", bounds=[(-12, 6), (-60, 60), (-12, 6)],
                           options={"maxiter": 200})
            if best is None or res.fun < best.fun - 1e-10:
                best = res
        _, beta, sigma2, psi, _ = _lmm_profile(best.x, gram, n_i)
        return beta, sigma2, sigma2 * psi

    # -- node algebra ----------------------------------------------------------

    def _nodes(self):
        sq2 = math.sqrt(2.0)
        v1 = self.modes[:, 0:1] + sq2 * self.c11[:, None] * self.z1[None, :]
        v2 = (
            self.modes[:, 1:2]
            + sq2 * (self.c21[:, None] * self.z1[None, :] + self.c22[:, None] * self.z2[None, :])
        )
        return v1, v2

    @staticmethod
    def _exp(x):
        return np.exp(np.clip(x, -_EXP_CLIP, _EXP_CLIP))

    def _survival_sums(self, theta, v1, v2, need_sq=False):
        """Cumulative-hazard sums per subject/node via piece factorization.

        ``v1``/``v2`` are (n, n_nodes) random-effect values; a 1-d input
        is treated as a single node per subject and the node axis is
        squeezed from the outputs.  Returns (lam_vec, a, t1, t1m, u0,
        u1, part0, part1, big_lambda, big_lambda_s, b_lvl, eta, c,
        lam_pw[, big_lambda_ss]); names follow the factorized
        decomposition in the class docstring.
        """
        squeeze = v1.ndim == 1
        if squeeze:
            v1 = v1[:, None]
            v2 = v2[:, None]
        beta = theta[:4]
        gam = theta[8:10]
        alpha = theta[10]
        lam = np.zeros(self.n_pieces)
        lam[self.active] = np.exp(np.clip(theta[11:], -_EXP_CLIP, _EXP_CLIP))
        beta_i0 = beta[0] + beta[2] * self.female + beta[3] * self.older
        gz = gam[0] * self.female + gam[1] * self.older
        b_lvl = beta_i0[:, None] + v1
        eta = beta[1] + v2
        c = alpha * eta
        a = self._exp(gz[:, None] + alpha * b_lvl)
        pw = self._exp(c[:, :, None] * self.k_lag) * self.full_mask[:, None, :]
        lam_pw = pw * lam
        t1 = lam_pw.sum(-1)
        t1m = (lam_pw * self.k_lag).sum(-1)
        xi = self._exp(c[:, :, None] * self.nu)
        u0 = xi @ self.wq
        u1 = xi @ (self.wq * self.nu)
        sl = self.sl_part[:, None, :]
        wp = self.w_part[:, None, :]
        ep = self._exp(c[:, :, None] * sl) * wp
        lam_p = lam[self.piece - 1][:, None]
        part0 = lam_p * ep.sum(-1)
        part1 = lam_p * (ep * sl).sum(-1)
        big = a * (t1 * u0 + part0)
        big_s = a * (t1m * u0 + t1 * u1 + part1)
        out = [lam, a, t1, t1m, u0, u1, part0, part1, big, big_s, b_lvl, eta, c, lam_pw]
        if need_sq:
            t1mm = (lam_pw * self.k_lag**2).sum(-1)
            u2 = xi @ (self.wq * self.nu**2)
            part2 = lam_p * (ep * sl**2).sum(-1)
            out.append(a * (t1mm * u0 + 2.0 * t1m * u1 + t1 * u2 + part2))
        if squeeze:
            squeezed = [lam] + [x[:, 0] for x in out[1:13]] + [lam_pw]
            if need_sq:
                squeezed.append(out[14][:, 0])
            out = squeezed
        return out

    def _resid_stats(self, theta):
        beta = theta[:4]
        beta_i0 = beta[0] + beta[2] * self.female + beta[3] * self.older
        r1 = self.s_w - self.n_i * beta_i0 - beta[1] * self.s_t
        rt = self.s_wt - beta_i0 * self.s_t - beta[1] * self.s_tt
        r0 = (
            self.s_ww
            - 2.0 * beta_i0 * self.s_w
            - 2.0 * beta[1] * self.s_wt
            + self.n_i * beta_i0**2
            + 2.0 * beta_i0 * beta[1] * self.s_t
            + beta[1] ** 2 * self.s_tt
        )
        return r1, rt, r0

    def _dinv(self, theta):
        l1 = math.exp(theta[5])
        l2 = theta[6]
        l3 = math.exp(theta[7])
        det = (l1 * l3) ** 2
        d11 = l1 * l1
        d12 = l1 * l2
        d22 = l2 * l2 + l3 * l3
        return (
            np.array([[d22 / det, -d12 / det], [-d12 / det, d11 / det]]),
            2.0 * (theta[5] + theta[7]),
            (l1, l2, l3),
        )

    def node_loglik(self, theta, v1, v2, surv=None):
        """Complete-data log density at explicit random-effect values."""
        sigma2 = math.exp(theta[4])
        alpha = theta[10]
        gam = theta[8:10]
        r1, rt, r0 = self._resid_stats(theta)
        if v1.ndim == 2:
            r1, rt, r0 = r1[:, None], rt[:, None], r0[:, None]
            n_i, s_t, s_tt = self.n_i[:, None], self.s_t[:, None], self.s_tt[:, None]
            delta, t_lag = self.delta[:, None], self.t_lag[:, None]
        else:
            n_i, s_t, s_tt = self.n_i, self.s_t, self.s_tt
            delta, t_lag = self.delta, self.t_lag
        ss = r0 - 2.0 * v1 * r1 - 2.0 * v2 * rt + v1**2 * n_i + 2.0 * v1 * v2 * s_t + v2**2 * s_tt
        ll_long = -0.5 * n_i * (_LOG2PI + theta[4]) - ss / (2.0 * sigma2)
        dinv, logdet, _ = self._dinv(theta)
        u1 = dinv[0, 0] * v1 + dinv[0, 1] * v2
        u2 = dinv[0, 1] * v1 + dinv[1, 1] * v2
        ll_prior = -_LOG2PI - 0.5 * logdet - 0.5 * (v1 * u1 + v2 * u2)
        if surv is None:
            surv = self._survival_sums(theta, v1, v2)
        lam, _, _, _, _, _, _, _, big, _, b_lvl, eta, _, _ = surv[:14]
        lam_p = lam[self.piece - 1]
        log_lam = np.where(self.delta == 1.0, np.log(np.maximum(lam_p, 1e-300)), 0.0)
        gz = theta[8] * self.female + theta[9] * self.older
        const = self.delta * (log_lam + gz)
        if v1.ndim == 2:
            const = const[:, None]
        ll_surv = const + delta * alpha * (b_lvl + eta * t_lag) - big
        return ll_long + ll_prior + ll_surv, (ss, u1, u2, surv)

    def loglik(self, theta):
        v1, v2 = self._nodes()
        ll_nodes, _ = self.node_loglik(theta, v1, v2)
        log_norm = self.log_w[None, :] + (np.log(self.c11 * self.c22))[:, None]
        tot = ll_nodes + log_norm
        m = tot.max(axis=1)
        return float(np.sum(m + np.log(np.exp(tot - m[:, None]).sum(axis=1))))

    def loglik_and_grad(self, theta):
        v1, v2 = self._nodes()
        ll_nodes, (ss, pu1, pu2, surv) = self.node_loglik(theta, v1, v2)
        (lam, a, t1, t1m, u0, u1n, part0, part1, big, big_s,
         b_lvl, eta, c, lam_pw) = surv[:14]
        log_norm = self.log_w[None, :] + (np.log(self.c11 * self.c22))[:, None]
        tot = ll_nodes + log_norm
        m = tot.max(axis=1)
        li = m + np.log(np.exp(tot - m[:, None]).sum(axis=1))
        omega = np.exp(tot - li[:, None])
        ll = float(li.sum())

        sigma2 = math.exp(theta[4])
        alpha = theta[10]
        r1, rt, _ = self._resid_stats(theta)
        res1 = r1[:, None] - v1 * self.n_i[:, None] - v2 * self.s_t[:, None]
        rest = rt[:, None] - v1 * self.s_t[:, None] - v2 * self.s_tt[:, None]
        delta = self.delta[:, None]
        t_lag = self.t_lag[:, None]
        d_min_big = delta - big
        g = np.empty(self.n_params)
        f = self.female[:, None]
        o = self.older[:, None]

        g_b0 = res1 / sigma2 + alpha * d_min_big
        g_bt = rest / sigma2 + alpha * (delta * t_lag - big_s)
        g[0] = np.sum(omega * g_b0)
        g[1] = np.sum(omega * g_bt)
        g[2] = np.sum(omega * f * g_b0)
        g[3] = np.sum(omega * o * g_b0)
        g[4] = np.sum(omega * (-0.5 * self.n_i[:, None] + ss / (2.0 * sigma2)))

        dinv, _, (l1, l2, l3) = self._dinv(theta)
        i11, i12, i22 = dinv[0, 0], dinv[0, 1], dinv[1, 1]
        tr1 = 2.0 * l1 * l1 * i11 + 2.0 * l1 * l2 * i12
        tr2 = 2.0 * l1 * i12 + 2.0 * l2 * i22
        tr3 = 2.0 * l3 * l3 * i22
        q1 = 2.0 * l1 * l1 * pu1**2 + 2.0 * l1 * l2 * pu1 * pu2
        q2 = 2.0 * l1 * pu1 * pu2 + 2.0 * l2 * pu2**2
        q3 = 2.0 * l3 * l3 * pu2**2
        g[5] = np.sum(omega * (0.5 * q1 - 0.5 * tr1))
        g[6] = np.sum(omega * (0.5 * q2 - 0.5 * tr2))
        g[7] = np.sum(omega * (0.5 * q3 - 0.5 * tr3))

        g[8] = np.sum(omega * f * d_min_big)
        g[9] = np.sum(omega * o * d_min_big)
        m_end = b_lvl + eta * t_lag
        g[10] = np.sum(omega * (delta * m_end - (b_lvl * big + eta * big_s)))

        # per-piece cumulative-hazard shares for the baseline gradients
        lam_k = a[:, :, None] * lam_pw * u0[:, :, None]
        add = a * part0
        idx = np.arange(self.n)
        lam_k[idx, :, self.piece - 1] += add
        events_in = self.events_per_piece[self.active].astype(float)
        g[11:] = events_in - np.einsum("nq,nqk->k", omega, lam_k[:, :, self.active])
        return ll, g

    # -- posterior modes -------------------------------------------------------

    def update_modes(self, theta, max_iter=60, tol=1e-9):
        """Newton search for each subject's conditional posterior mode.

        The complete-data log density is strictly concave in the random
        effects, so damped Newton converges globally; damping halves the
        step where the density would decrease.
        """
        sigma2 = math.exp(theta[4])
        alpha = theta[10]
        dinv, _, _ = self._dinv(theta)
        r1, rt, _ = self._resid_stats(theta)
        v = self.modes.copy()

        def dens(v1, v2):
            ll, _ = self.node_loglik(theta, v1, v2)
            return ll

        cur = dens(v[:, 0], v[:, 1])
        for _ in range(max_iter):
            v1, v2 = v[:, 0], v[:, 1]
            surv = self._survival_sums(theta, v1, v2, need_sq=True)
            big, big_s = surv[8], surv[9]
            big_ss = surv[14]
            res1 = r1 - v1 * self.n_i - v2 * self.s_t
            rest = rt - v1 * self.s_t - v2 * self.s_tt
            pu1 = dinv[0, 0] * v1 + dinv[0, 1] * v2
            pu2 = dinv[0, 1] * v1 + dinv[1, 1] * v2
            g1 = res1 / sigma2 - pu1 + alpha * (self.delta - big)
            g2 = rest / sigma2 - pu2 + alpha * (self.delta * self.t_lag - big_s)
            h11 = self.n_i / sigma2 + dinv[0, 0] + alpha**2 * big
            h12 = self.s_t / sigma2 + dinv[0, 1] + alpha**2 * big_s
            h22 = self.s_tt / sigma2 + dinv[1, 1] + alpha**2 * big_ss
            if max(np.abs(g1).max(), np.abs(g2).max()) < tol:
                break
            det = np.maximum(h11 * h22 - h12 * h12, 1e-300)
            s1 = (h22 * g1 - h12 * g2) / det
            s2 = (h11 * g2 - h12 * g1) / det
            step = np.ones(self.n)
            for _ in range(40):
                cand = dens(v[:, 0] + step * s1, v[:, 1] + step * s2)
                worse = cand < cur - 1e-12
                if not worse.any():
                    break
                step[worse] *= 0.5
            v[:, 0] += step * s1
            v[:, 1] += step * s2
            cur = dens(v[:, 0], v[:, 1])
        v1, v2 = v[:, 0], v[:, 1]
        surv = self._survival_sums(theta, v1, v2, need_sq=True)
        big, big_s, big_ss = surv[8], surv[9], surv[14]
        h11 = self.n_i / sigma2 + dinv[0, 0] + alpha**2 * big
        h12 = self.s_t / sigma2 + dinv[0, 1] + alpha**2 * big_s
        h22 = self.s_tt / sigma2 + dinv[1, 1] + alpha**2 * big_ss
        det = np.maximum(h11 * h22 - h12 * h12, 1e-300)
        inv11 = h22 / det
        inv12 = -h12 / det
        inv22 = h11 / det
        self.modes = v
        self.c11 = np.sqrt(np.maximum(inv11, 1e-300))
        self.c21 = inv12 / self.c11
        self.c22 = np.sqrt(np.maximum(inv22 - self.c21**2, 1e-300))


def jm_loglik(params, cohort, spec=JointModelSpec()):
    """Adaptive-quadrature marginal log-likelihood at given parameters.

    Modes and scales are refreshed at ``params`` before evaluating, so
    the value is a deterministic function of (params, data, spec).
    """
    long = to_long_format(cohort, drop_post_event=True)
    lik = _JointLikelihood(cohort, long, spec)
    theta = lik.pack(params)
    lik.update_modes(theta)
    return lik.loglik(theta)


def _delta_jacobian(theta, active_count):
    """Jacobian of natural parameters w.r.t. the search parameterization."""
    p = 11 + active_count
    l1 = math.exp(theta[5])
    l2 = theta[6]
    l3 = math.exp(theta[7])
    jac = np.zeros((p, p))
    jac[:4, :4] = np.eye(4)
    jac[4, 4] = math.exp(theta[4])
    jac[5, 5] = 2.0 * l1 * l1
    jac[6, 5] = l1 * l2
    jac[6, 6] = l1
    jac[7, 6] = 2.0 * l2
    jac[7, 7] = 2.0 * l3 * l3
    jac[8, 8] = 1.0
    jac[9, 9] = 1.0
    jac[10, 10] = 1.0
    for i in range(active_count):
        jac[11 + i, 11 + i] = math.exp(theta[11 + i])
    return jac


def _fd_curvature_scale(lik, theta):
    """Square-root diagonal curvature from forward-differenced gradients.

    Used to precondition the quasi-Newton search; the parameters mix
    scales (regression coefficients against log variances and log
    rates) badly enough that unscaled L-BFGS-B needs an order of
    magnitude more iterations.
    """
    _, g0 = lik.loglik_and_grad(theta)
    diag = np.empty_like(theta)
    for j in range(theta.size):
        h = 1e-4 * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        _, gp = lik.loglik_and_grad(tp)
        diag[j] = (gp[j] - g0[j]) / h
    return np.sqrt(np.maximum(np.abs(diag), 1.0))


def fit_jm(cohort, spec=JointModelSpec(), exclude_all_missing=False, init=None,
           compute_se=True):
    """Fit the shared random-effects joint model to a cohort.

    Marker cells dated after the event or censoring time never enter the
    fit.  With ``exclude_all_missing`` the subjects flagged as having no
    observed value during follow-up are dropped first (requires the flag
    to have been derived).  ``init`` warm-starts from a previous
    :class:`JointFit` (reusing its curvature preconditioner) or from
    bare :class:`JointParams`.  Raises :class:`FitError` with
    diagnostics when the likelihood search does not stabilize.
    """
    if exclude_all_missing:
        if cohort.omit is None:
            raise ValueError("exclude_all_missing requires derive_omit to have been applied")
        cohort = cohort.select(cohort.omit == 0)
    long = to_long_format(cohort, drop_post_event=True)
    lik = _JointLikelihood(cohort, long, spec)
    scale = None
    if isinstance(init, JointFit):
        if init.curvature_scale is not None and init.curvature_scale.size == lik.n_params:
            scale = init.curvature_scale
        init = init.params
    theta = lik.initial_theta(init)
    lik.update_modes(theta)
    if scale is None:
        scale = _fd_curvature_scale(lik, theta)

    def negobj(phi):
        ll, g = lik.loglik_and_grad(phi / scale)
        return -ll, -g / scale

    bounds = [
        (None if lo is None else lo * s, None if hi is None else hi * s)
        for (lo, hi), s in zip(lik.bounds(), scale)
    ]
    prev = -math.inf
    total_inner = 0
    rounds = 0
    converged = False
    ll = -math.inf
    for rounds in range(1, spec.max_outer_rounds + 1):
        lik.update_modes(theta)
        res = minimize(
            negobj, theta * scale, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max(spec.max_iter - total_inner, 20),
                     "ftol": 1e-10, "gtol": spec.grad_tol, "maxcor": 30},
        )
        theta = res.x / scale
        total_inner += int(res.nit)
        lik.update_modes(theta)
        ll = lik.loglik(theta)
        if abs(ll - prev) <= spec.rel_tol * (abs(ll) + 1.0):
            converged = True
            break
        prev = ll
        if total_inner >= spec.max_iter:
            break
    _, grad = lik.loglik_and_grad(theta)
    grad_norm = float(np.abs(grad).max())
    if not converged:
        raise FitError(
            "joint model did not stabilize within the iteration budget",
            diagnostics={
                "theta": theta,
                "loglik": ll,
                "grad_norm": grad_norm,
                "outer_rounds": rounds,
                "inner_iterations": total_inner,
            },
        )
    params = lik.unpack(theta)
    names = _natural_names(tuple(int(k) + 1 for k in lik.active))
    if compute_se:
        se, info_diag = _standard_errors(lik, theta, spec, names)
        out_scale = np.sqrt(np.maximum(np.abs(info_diag), 1.0))
    else:
        se = {name: math.nan for name in names}
        out_scale = scale
    return JointFit(
        params=params,
        std_errors=se,
        loglik=float(ll),
        converged=True,
        n_outer_rounds=rounds,
        n_inner_iterations=total_inner,
        grad_norm=grad_norm,
        n_subjects=lik.n,
        n_events=lik.n_events,
        n_obs=lik.n_obs,
        active_pieces=tuple(int(k) + 1 for k in lik.active),
        n_parameters=lik.n_params,
        curvature_scale=out_scale,
    )


def _standard_errors(lik, theta, spec, names):
    """Observed-information standard errors on the natural scale.

    The information matrix comes from central finite differences of the
    analytic gradient with modes frozen at the optimum; the delta method
    maps its inverse to the natural parameterization.
    """
    p = theta.size
    hess = np.zeros((p, p))
    for j in range(p):
        h = spec.se_step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        _, gp = lik.loglik_and_grad(tp)
        tm = theta.copy()
        tm[j] -= h
        _, gm = lik.loglik_and_grad(tm)
        hess[:, j] = (gp - gm) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    info = -hess
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    jac = _delta_jacobian(theta, lik.active.size)
    cov_nat = jac @ cov @ jac.T
    diag = np.diag(cov_nat).copy()
    bad = diag < 0
    if bad.any():
        warnings.warn("negative variance estimates encountered; affected standard "
                      "errors reported as NaN", stacklevel=2)
        diag[bad] = math.nan
    se = np.sqrt(diag)
    return {name: float(s) for name, s in zip(names, se)}, np.diag(info)
