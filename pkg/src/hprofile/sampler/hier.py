"""Metropolis-within-Gibbs sampler for the random-intercept logistic model.

One sweep updates, in this order:

1. each hospital intercept ``beta0[i]`` (adaptive random walk),
2. each slope ``beta1[k]`` (adaptive random walk; see ``BetaUpdate``),
3. ``mu`` (adaptive random walk),
4. a joint translation of ``mu`` and every ``beta0[i]`` (adaptive random walk),
5. ``tau``: conjugate Gibbs draw of the precision under a gamma prior,
   otherwise an adaptive random walk on ``log tau``,
6. a joint rescaling of ``tau`` and the deviations ``beta0[i] - mu``.

Moves 4 and 6 move along the directions in which the centred intercepts are
strongly correlated with ``mu`` and ``tau``. Step sizes adapt in windows during
burn-in toward the target acceptance rate and are frozen afterwards.

All random numbers are drawn up front from per-chain Philox streams laid
out sweep by sweep, so a chain's first ``k`` sweeps do not depend on how many
sweeps are requested.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np
from numba import njit

from ..classical import fit_logistic_mle
from ..errors import InputError, NonFiniteLogPosterior, ProfilingError
from ..hiermodel import HierSpec, PriorKind
from ..registry import COVARIATES, Cohort
from .config import ChainConfig, chain_streams
from .draws import PosteriorDraws

INITIAL_TAU = 0.1


class BetaUpdate(IntEnum):
    # One slope at a time. Dense columns (nonzero in most rows) are moved with the
    # intercepts shifted by -delta * mean(x_k); sparse columns touch only their nonzero rows.
    SCALAR = 0
    # One slope at a time, every column moved with the compensating intercept shift.
    CENTERED = 1
    # All slopes and the intercept level at once, proposal shaped by the MLE covariance.
    JOINT = 2


DENSE_FRACTION = 0.5
JOINT_TARGET = 0.234


_PRIOR_CODE = {
    PriorKind.GAMMA_ON_PRECISION: 0,
    PriorKind.UNIFORM_ON_SD: 1,
    PriorKind.HALF_NORMAL_ON_SD: 2,
    PriorKind.FIXED: 3,
}


@njit(cache=True, nogil=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True)
def _row_ll(y, eta):
    return y * eta - _softplus(eta)


@njit(cache=True, nogil=True)
def _log_prior_tau(tau, kind, pa, pb):
    """Log density of tau (w.r.t. d tau), up to a constant."""
    if tau <= 0:
        return -np.inf
    if kind == 0:
        phi = 1.0 / (tau * tau)
        return (pa - 1.0) * math.log(phi) - pb * phi - 3.0 * math.log(tau)
    if kind == 1:
        if tau < pa or tau > pb:
            return -np.inf
        return 0.0
    return -tau * tau / (2.0 * pa)


@njit(cache=True, nogil=True)
def _re_logdens(beta0, mu, tau):
    s = 0.0
    for i in range(beta0.shape[0]):
        d = (beta0[i] - mu) / tau
        s += -0.5 * d * d
    return s - beta0.shape[0] * math.log(tau)


@njit(cache=True, nogil=True)
def _run_chain(
    X, y, starts, ends, col_ptr, col_idx, col_val, xbar, center, beta_mode, L,
    mu, tau, beta1, beta0,
    mu_var, beta_var, prior_kind, pa, pb, tau_zero,
    n_burn, n_keep, thin, window, target, joint_target,
    Z, U, G, log_scale,
    out_mu, out_tau, out_beta1, out_beta0, acc, prop,
):
    N = X.shape[0]
    P = X.shape[1]
    I = starts.shape[0]
    s_mu = I + P
    s_shift = I + P + 1
    s_tau = I + P + 2
    s_scale = I + P + 3
    s_joint = I + P + 4
    z_joint = I + P + 5
    n_slots = log_scale.shape[0]

    eta = np.empty(N)
    ll = np.empty(N)
    for i in range(I):
        for j in range(starts[i], ends[i]):
            e = beta0[i]
            for k in range(P):
                e += X[j, k] * beta1[k]
            eta[j] = e
            ll[j] = _row_ll(y[j], e)
    new_eta = np.empty(N)
    new_ll = np.empty(N)
    w_acc = np.zeros(n_slots)
    w_prop = np.zeros(n_slots)
    batch = 0
    n_sweeps = n_burn + n_keep * thin
    kept = 0
    delta_i = np.empty(I)

    for sweep in range(n_sweeps):
        burning = sweep < n_burn

        # 1. hospital intercepts
        if not tau_zero:
            for i in range(I):
                cand = beta0[i] + math.exp(log_scale[i]) * Z[sweep, i]
                d = cand - beta0[i]
                diff = 0.0
                for j in range(starts[i], ends[i]):
                    e = eta[j] + d
                    new_eta[j] = e
                    new_ll[j] = _row_ll(y[j], e)
                    diff += new_ll[j] - ll[j]
                a = (beta0[i] - mu) / tau
                b = (cand - mu) / tau
                diff += -0.5 * (b * b - a * a)
                w_prop[i] += 1
                if not burning:
                    prop[i] += 1
                if math.log(U[sweep, i]) < diff:
                    beta0[i] = cand
                    for j in range(starts[i], ends[i]):
                        eta[j] = new_eta[j]
                        ll[j] = new_ll[j]
                    w_acc[i] += 1
                    if not burning:
                        acc[i] += 1

        # 2. slopes
        if beta_mode == 2:
            sc = math.exp(log_scale[s_joint])
            step = np.zeros(P + 1)
            for r in range(P + 1):
                v = 0.0
                for c in range(r + 1):
                    v += L[r, c] * Z[sweep, z_joint + c]
                step[r] = sc * v
            diff = 0.0
            for i in range(I):
                for j in range(starts[i], ends[i]):
                    e = eta[j] + step[0]
                    for k in range(P):
                        e += X[j, k] * step[k + 1]
                    new_eta[j] = e
                    new_ll[j] = _row_ll(y[j], e)
                    diff += new_ll[j] - ll[j]
            for k in range(P):
                nb = beta1[k] + step[k + 1]
                diff += -0.5 * (nb * nb - beta1[k] * beta1[k]) / beta_var
            nm = mu + step[0]
            diff += -0.5 * (nm * nm - mu * mu) / mu_var
            w_prop[s_joint] += 1
            if not burning:
                prop[s_joint] += 1
            if math.log(U[sweep, s_joint]) < diff:
                for k in range(P):
                    beta1[k] += step[k + 1]
                mu = nm
                for i in range(I):
                    beta0[i] += step[0]
                for j in range(N):
                    eta[j] = new_eta[j]
                    ll[j] = new_ll[j]
                w_acc[s_joint] += 1
                if not burning:
                    acc[s_joint] += 1
        else:
            for k in range(P):
                slot = I + k
                d = math.exp(log_scale[slot]) * Z[sweep, slot]
                cand = beta1[k] + d
                diff = -0.5 * (cand * cand - beta1[k] * beta1[k]) / beta_var
                if not center[k]:
                    for t in range(col_ptr[k], col_ptr[k + 1]):
                        j = col_idx[t]
                        e = eta[j] + d * col_val[t]
                        new_eta[j] = e
                        new_ll[j] = _row_ll(y[j], e)
                        diff += new_ll[j] - ll[j]
                else:
                    shift = -d * xbar[k]
                    for j in range(N):
                        e = eta[j] + d * X[j, k] + shift
                        new_eta[j] = e
                        new_ll[j] = _row_ll(y[j], e)
                        diff += new_ll[j] - ll[j]
                    nm = mu + shift
                    diff += -0.5 * (nm * nm - mu * mu) / mu_var
                w_prop[slot] += 1
                if not burning:
                    prop[slot] += 1
                if math.log(U[sweep, slot]) < diff:
                    beta1[k] = cand
                    if not center[k]:
                        for t in range(col_ptr[k], col_ptr[k + 1]):
                            j = col_idx[t]
                            eta[j] = new_eta[j]
                            ll[j] = new_ll[j]
                    else:
                        mu += -d * xbar[k]
                        for i in range(I):
                            beta0[i] += -d * xbar[k]
                        for j in range(N):
                            eta[j] = new_eta[j]
                            ll[j] = new_ll[j]
                    w_acc[slot] += 1
                    if not burning:
                        acc[slot] += 1

        # 3. mu
        cand = mu + math.exp(log_scale[s_mu]) * Z[sweep, s_mu]
        diff = -0.5 * (cand * cand - mu * mu) / mu_var
        if tau_zero:
            d = cand - mu
            for j in range(N):
                e = eta[j] + d
                new_eta[j] = e
                new_ll[j] = _row_ll(y[j], e)
                diff += new_ll[j] - ll[j]
        else:
            diff += _re_logdens(beta0, cand, tau) - _re_logdens(beta0, mu, tau)
        w_prop[s_mu] += 1
        if not burning:
            prop[s_mu] += 1
        if math.log(U[sweep, s_mu]) < diff:
            if tau_zero:
                for i in range(I):
                    beta0[i] = cand
                for j in range(N):
                    eta[j] = new_eta[j]
                    ll[j] = new_ll[j]
            mu = cand
            w_acc[s_mu] += 1
            if not burning:
                acc[s_mu] += 1

        if not tau_zero:
            # 4. translate mu and all intercepts together
            d = math.exp(log_scale[s_shift]) * Z[sweep, s_shift]
            diff = 0.0
            for j in range(N):
                e = eta[j] + d
                new_eta[j] = e
                new_ll[j] = _row_ll(y[j], e)
                diff += new_ll[j] - ll[j]
            nm = mu + d
            diff += -0.5 * (nm * nm - mu * mu) / mu_var
            w_prop[s_shift] += 1
            if not burning:
                prop[s_shift] += 1
            if math.log(U[sweep, s_shift]) < diff:
                mu = nm
                for i in range(I):
                    beta0[i] += d
                for j in range(N):
                    eta[j] = new_eta[j]
                    ll[j] = new_ll[j]
                w_acc[s_shift] += 1
                if not burning:
                    acc[s_shift] += 1

            if prior_kind != 3:
                # 5. tau
                if prior_kind == 0:
                    ss = 0.0
                    for i in range(I):
                        ss += (beta0[i] - mu) ** 2
                    phi = G[sweep] / (pb + 0.5 * ss)
                    if phi > 0:
                        tau = 1.0 / math.sqrt(phi)
                else:
                    lt = math.log(tau) + math.exp(log_scale[s_tau]) * Z[sweep, s_tau]
                    cand = math.exp(lt)
                    diff = (
                        _log_prior_tau(cand, prior_kind, pa, pb) + math.log(cand)
                        + _re_logdens(beta0, mu, cand)
                        - _log_prior_tau(tau, prior_kind, pa, pb) - math.log(tau)
                        - _re_logdens(beta0, mu, tau)
                    )
                    w_prop[s_tau] += 1
                    if not burning:
                        prop[s_tau] += 1
                    if math.log(U[sweep, s_tau]) < diff:
                        tau = cand
                        w_acc[s_tau] += 1
                        if not burning:
                            acc[s_tau] += 1

                # 6. rescale tau and the intercept deviations
                log_lam = math.exp(log_scale[s_scale]) * Z[sweep, s_scale]
                lam = math.exp(log_lam)
                cand = tau * lam
                diff = _log_prior_tau(cand, prior_kind, pa, pb) - _log_prior_tau(tau, prior_kind, pa, pb) + log_lam
                if diff > -np.inf:
                    for i in range(I):
                        delta_i[i] = (lam - 1.0) * (beta0[i] - mu)
                        for j in range(starts[i], ends[i]):
                            e = eta[j] + delta_i[i]
                            new_eta[j] = e
                            new_ll[j] = _row_ll(y[j], e)
                            diff += new_ll[j] - ll[j]
                w_prop[s_scale] += 1
                if not burning:
                    prop[s_scale] += 1
                if math.log(U[sweep, s_scale]) < diff:
                    tau = cand
                    for i in range(I):
                        beta0[i] += delta_i[i]
                    for j in range(N):
                        eta[j] = new_eta[j]
                        ll[j] = new_ll[j]
                    w_acc[s_scale] += 1
                    if not burning:
                        acc[s_scale] += 1

        # adaptation
        if burning and (sweep + 1) % window == 0:
            batch += 1
            gain = 2.0 / math.sqrt(batch)
            for s in range(n_slots):
                if w_prop[s] > 0:
                    goal = joint_target if s == s_joint else target
                    log_scale[s] += gain * (w_acc[s] / w_prop[s] - goal)
                w_acc[s] = 0.0
                w_prop[s] = 0.0

        if not burning and (sweep - n_burn + 1) % thin == 0:
            out_mu[kept] = mu
            out_tau[kept] = tau
            for k in range(P):
                out_beta1[kept, k] = beta1[k]
            for i in range(I):
                out_beta0[kept, i] = beta0[i]
            kept += 1


class _Prepared:
    """Kernel arrays for a cohort whose rows are grouped by hospital."""

    def __init__(self, cohort: Cohort):
        self.X = np.ascontiguousarray(cohort.X, dtype=np.float64)
        self.y = cohort.death.astype(np.float64)
        self.ends = np.cumsum(cohort.volumes()).astype(np.int64)
        self.starts = (self.ends - cohort.volumes()).astype(np.int64)
        ptr, idx, val = [0], [], []
        for k in range(self.X.shape[1]):
            nz = np.flatnonzero(self.X[:, k])
            idx.append(nz)
            val.append(self.X[nz, k])
            ptr.append(ptr[-1] + len(nz))
        self.col_ptr = np.array(ptr, dtype=np.int64)
        self.col_idx = np.concatenate(idx).astype(np.int64)
        self.col_val = np.concatenate(val)
        self.xbar = self.X.mean(axis=0)


def _initial_state(cohort: Cohort, prep: _Prepared, spec: HierSpec):
    """Fixed-effects mode (with the slope priors as a ridge) and shrunken hospital offsets."""
    fit = fit_logistic_mle(cohort, ridge=1.0 / spec.beta_prior_var, check_separation=False)
    mu = fit.intercept
    beta1 = np.clip(fit.slopes, -10, 10)
    se = np.sqrt(np.clip(np.diag(fit.covariance), 1e-8, None))
    tau_fixed = spec.fixed_tau
    tau = INITIAL_TAU if tau_fixed is None else tau_fixed
    eta = mu + prep.X @ beta1
    p = 1.0 / (1.0 + np.exp(-eta))
    beta0 = np.full(len(prep.starts), mu)
    if tau > 0:
        for i, (a, b) in enumerate(zip(prep.starts, prep.ends)):
            n, d, e = b - a, prep.y[a:b].sum(), p[a:b].mean()
            crude = math.log((d + 0.5) / (n - d + 0.5))
            expected = math.log(e / (1 - e))
            info = n * e * (1 - e)
            w = tau**2 / (tau**2 + 1.0 / info)
            beta0[i] = mu + w * (crude - expected)
    return mu, tau, beta1, beta0, fit, se


def sample_hier(
    spec: HierSpec,
    cohort: Cohort,
    cfg: ChainConfig,
    beta_update: BetaUpdate = BetaUpdate.SCALAR,
    threads: int = 1,
    init_jitter: float = 0.5,
) -> PosteriorDraws:
    """Posterior draws for the random-intercept logistic model.

    Returns blocks ``mu``, ``tau2``, ``beta1`` (labelled by covariate) and
    ``beta0`` (labelled by hospital id, in cohort order). Chains are
    reproducible from ``cfg.seed`` and independent of each other; with
    ``threads > 1`` they run concurrently.
    """
    if cohort.n_patients == 0:
        raise InputError("cohort is empty")
    if not np.all(np.isfinite(cohort.X)):
        raise NonFiniteLogPosterior("covariates contain non-finite values")
    # work on a canonical hospital order so results do not depend on input order
    canon, order = cohort.canonical()
    prep = _Prepared(canon)
    I, P = len(prep.starts), prep.X.shape[1]
    mu0, tau0, beta1_0, beta0_0, fit, se = _initial_state(canon, prep, spec)

    prior = spec.tau_prior
    kind = _PRIOR_CODE[prior.kind]
    pa = pb = 0.0
    if prior.kind is PriorKind.GAMMA_ON_PRECISION:
        pa, pb = prior.shape, prior.rate
    elif prior.kind is PriorKind.UNIFORM_ON_SD:
        pa, pb = prior.lo, prior.hi
        if not pa <= tau0 <= pb:
            tau0 = 0.5 * (pa + pb) if pa > 0 else min(INITIAL_TAU, 0.5 * pb)
    elif prior.kind is PriorKind.HALF_NORMAL_ON_SD:
        pa = prior.variance
    tau_zero = prior.is_fixed and prior.tau == 0.0

    L = np.linalg.cholesky(fit.covariance + 1e-10 * np.eye(P + 1))
    n_slots = I + P + 5
    init_scale = np.empty(n_slots)
    init_scale[:I] = 0.1 if tau0 > 0 else 0.01
    init_scale[I : I + P] = 2.4 * se[1:]
    init_scale[I + P] = 0.1  # mu
    init_scale[I + P + 1] = 2.4 * se[0] / 3  # shift
    init_scale[I + P + 2] = 0.5  # log tau
    init_scale[I + P + 3] = 0.3  # rescale
    init_scale[I + P + 4] = 2.4 / math.sqrt(P + 1)  # joint
    init_scale = np.log(init_scale)
    n_normals = n_slots + P + 1
    if beta_update == BetaUpdate.CENTERED:
        center = np.ones(P, dtype=np.bool_)
    else:
        center = np.diff(prep.col_ptr) > DENSE_FRACTION * len(prep.y)
    gamma_shape = pa + 0.5 * I if kind == 0 else 1.0

    def run(c):
        rz, ru, rg, rinit = chain_streams(cfg.seed, c, 4)
        Z = rz.standard_normal((cfg.sweeps, n_normals))
        U = ru.random((cfg.sweeps, n_slots))
        G = rg.standard_gamma(gamma_shape, cfg.sweeps)
        jit = rinit.standard_normal(P + I + 1) * init_jitter
        beta1 = beta1_0 + jit[:P] * se[1:]
        mu = mu0 + jit[P] * se[0]
        beta0 = beta0_0 + (mu - mu0) + (jit[P + 1 :] * tau0 if tau0 > 0 else 0.0)
        if tau_zero:
            beta0 = np.full(I, mu)
        out = (
            np.empty(cfg.keep), np.empty(cfg.keep),
            np.empty((cfg.keep, P)), np.empty((cfg.keep, I)),
            np.zeros(n_slots), np.zeros(n_slots),
        )
        start_lp = _start_logpost(prep, mu, tau0, beta1, beta0, spec, tau_zero)
        if not math.isfinite(start_lp):
            raise NonFiniteLogPosterior(f"chain {c}: log posterior at the initial state is {start_lp}")
        _run_chain(
            prep.X, prep.y, prep.starts, prep.ends, prep.col_ptr, prep.col_idx, prep.col_val,
            prep.xbar, center, int(beta_update), L,
            float(mu), float(tau0), beta1.copy(), beta0.copy(),
            spec.mu_prior_var, spec.beta_prior_var, kind, pa, pb, tau_zero,
            cfg.burn_in, cfg.keep, cfg.thin, cfg.window, cfg.target_accept, JOINT_TARGET,
            Z, U, G, init_scale.copy(),
            *out,
        )
        return out

    if threads > 1 and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(cfg.chains)))
    else:
        results = [run(c) for c in range(cfg.chains)]

    inv = np.empty(I, dtype=np.int64)
    inv[order] = np.arange(I)  # cohort index -> canonical position
    samples = {
        "mu": np.stack([r[0] for r in results], axis=1),
        "tau2": np.stack([r[1] ** 2 for r in results], axis=1),
        "beta1": np.stack([r[2] for r in results], axis=1),
        "beta0": np.stack([r[3][:, inv] for r in results], axis=1),
    }
    acc = np.stack([r[4] for r in results])
    prop = np.stack([r[5] for r in results])
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = acc.sum(0) / prop.sum(0)
    acceptance = {
        "beta0": rates[:I][inv],
        "beta1": rates[I : I + P],
        "mu": rates[I + P],
        "shift": rates[I + P + 1],
        "log_tau": rates[I + P + 2],
        "rescale": rates[I + P + 3],
        "joint": rates[I + P + 4],
    }
    acceptance = {k: np.asarray(v) for k, v in acceptance.items() if np.any(np.isfinite(v))}
    metadata = {
        "model": "random_intercept_logistic",
        "prior": prior.to_json(),
        "prior_label": prior.label(),
        "beta_update": BetaUpdate(beta_update).name.lower(),
        "n_patients": int(cohort.n_patients),
        "n_hospitals": int(I),
    }
    return PosteriorDraws(
        samples,
        {"beta1": tuple(COVARIATES), "beta0": tuple(cohort.hospital_ids)},
        acceptance,
        cfg,
        metadata,
    )


def _start_logpost(prep, mu, tau, beta1, beta0, spec, tau_zero):
    eta = np.repeat(beta0, prep.ends - prep.starts) + prep.X @ beta1
    ll = float(np.sum(prep.y * eta - np.logaddexp(0.0, eta)))
    if not tau_zero and not tau > 0:
        return -math.inf
    return ll - 0.5 * mu**2 / spec.mu_prior_var


__all__ = ["sample_hier", "BetaUpdate", "ProfilingError"]
