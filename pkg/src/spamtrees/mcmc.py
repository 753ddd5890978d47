"""Posterior sampling: colored Gibbs sweeps for w, conjugate beta and tau^2,
robust adaptive Metropolis (RAM) for the covariance parameters.

One sweep draws all of its standard normals up front in node order, so the
draws are a function of the seed only. Worker threads are used for factor
computation, which is deterministic per node.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrs, dtrtrs

from .covariance import (FactorSet, Layout, NotPositiveDefinite, ThetaParams, chol_jitter,
                         compute_factors)
from .data import ModelData
from .precision import integrated_loglik
from .treegraph import TreedDag, color_groups

LOG2PI = np.log(2 * np.pi)


@dataclass
class MCMCConfig:
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    mode: str = "latent"  # or "integrated"
    ram_target: float = 0.234
    ram_decay: float = 2.0 / 3.0
    ram_init_scale: float = 0.1
    update_theta: bool = True
    update_beta: bool = True
    update_tau2: bool = True
    fixed: tuple = ()  # theta coordinate names held at their initial values
    prior_mean: float | np.ndarray = 0.0
    prior_sd: float | np.ndarray = 1.0
    v_beta: float = 100.0
    a_tau: float = 2.0
    b_tau: float = 1.0
    threads: int = 1
    integrated_cap: int = 2000
    keep_w: bool = True
    init_theta: ThetaParams | None = None
    init_tau2: float | np.ndarray = 1.0

    def validate(self):
        if self.iterations < 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("need iterations >= 0, burn_in >= 0, thin >= 1")
        if self.burn_in > self.iterations and self.iterations > 0:
            raise ValueError("burn_in exceeds iterations")
        if self.mode not in ("latent", "integrated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        return self


@dataclass
class RamState:
    S: np.ndarray
    target: float
    decay: float
    step: int = 0
    accepted: int = 0
    proposed: int = 0
    rejected_nonpd: int = 0

    def update(self, eps, accept_prob):
        """S S^T <- S (I + eta (a - a*) e e^T / |e|^2) S^T."""
        self.step += 1
        k = len(eps)
        nrm = eps @ eps
        if k == 0 or nrm == 0:
            return
        eta = min(1.0, k * self.step ** (-self.decay))
        u = eps / np.sqrt(nrm)
        M = self.S @ (np.eye(k) + eta * (accept_prob - self.target) * np.outer(u, u)) @ self.S.T
        try:
            self.S = np.linalg.cholesky(0.5 * (M + M.T))
        except np.linalg.LinAlgError:
            pass


@dataclass
class ChainState:
    w: np.ndarray
    beta: np.ndarray
    tau2: np.ndarray
    theta: ThetaParams
    ram: RamState
    rng: np.random.Generator
    iteration: int = 0


def default_theta(q):
    d = np.ones((q, q)) - np.eye(q)
    return ThetaParams(np.ones(q), np.ones(q), np.ones(q), d, 1.0, 1.0, 1.0)


# ---------------------------------------------------------------------
# stateless pieces
# ---------------------------------------------------------------------

def residuals(w, dag, factors, layout):
    """e_j = w_j - H_j w_[j] for every node."""
    out = []
    for k in range(len(dag)):
        e = w[dag.members[k]].copy()
        if dag.parents[k]:
            e -= factors[k].H @ w[layout.pa_locs[k]]
        out.append(e)
    return out


def log_prior_w(state_or_w, dag: TreedDag, factors: FactorSet, layout=None, resid=None) -> float:
    """sum_j log N(w_j | H_j w_[j], R_j), accumulated level by level."""
    w = state_or_w.w if isinstance(state_or_w, ChainState) else np.asarray(state_or_w)
    layout = layout or Layout(dag)
    if resid is None:
        resid = residuals(w, dag, factors, layout)
    tot = 0.0
    for level_nodes in layout.by_level:
        for k in level_nodes:
            f, e = factors[k], resid[k]
            quad = np.sum(e * e * f.Rinv) if f.R.ndim == 1 else e @ f.Rinv @ e
            tot -= 0.5 * (len(e) * LOG2PI + f.logdet_R + quad)
    return float(tot)


def data_terms(data: ModelData, beta, tau2):
    """Per-entry precision weight z^2/tau^2 and linear term z (y - X beta)/tau^2."""
    obs = data.observed
    t2 = np.asarray(tau2, dtype=float)[data.var]
    omega = np.where(obs, data.z ** 2 / t2, 0.0)
    r = np.where(obs, np.nan_to_num(data.y) - data.mean(beta), 0.0)
    return omega, np.where(obs, data.z * r / t2, 0.0)


def gibbs_beta(state: ChainState, data: ModelData, v_beta=100.0, normals=None):
    """Conjugate draw per outcome: Sigma* = (V^-1 + X^T D^-1 X)^-1."""
    q, p = data.q, data.p
    beta = np.zeros((q, p))
    if p == 0:
        return beta
    eps = state.rng.standard_normal((q, p)) if normals is None else normals.reshape(q, p)
    obs = data.observed
    for j in range(q):
        rows = obs & (data.var == j)
        X = data.X[rows]
        r = data.y[rows] - data.z[rows] * state.w[rows]
        prec = np.eye(p) / v_beta + X.T @ X / state.tau2[j]
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"singular beta precision for outcome {j}") from None
        mu = cho_solve((L, True), X.T @ r / state.tau2[j])
        beta[j] = mu + solve_triangular(L.T, eps[j], lower=False)
    return beta


def tau2_posterior(state: ChainState, data: ModelData, a_tau=2.0, b_tau=1.0):
    obs = data.observed
    E = np.where(obs, np.nan_to_num(data.y) - data.mean(state.beta) - data.z * state.w, 0.0)
    shape = a_tau + 0.5 * data.counts()
    rate = b_tau + 0.5 * np.bincount(data.var, weights=E * E, minlength=data.q)
    return shape, rate


def gibbs_tau2(state: ChainState, data: ModelData, a_tau=2.0, b_tau=1.0, gammas=None):
    """Inverse-Gamma(a + N_j/2, b + E^T E / 2) per outcome."""
    shape, rate = tau2_posterior(state, data, a_tau, b_tau)
    g = state.rng.standard_gamma(shape) if gammas is None else gammas
    return rate / g


# ---------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------

class Sampler:
    """Holds the chain state plus the per-node bookkeeping of one fit."""

    def __init__(self, data: ModelData, dag: TreedDag, config: MCMCConfig | None = None):
        self.config = (config or MCMCConfig()).validate()
        cfg = self.config
        if data.n != dag.n_locations:
            raise ValueError("data rows must match the dag's locations")
        self.data, self.dag = data, dag
        self.layout = Layout(dag)
        self.groups = color_groups(dag)
        q = data.q
        theta = (cfg.init_theta or default_theta(q)).copy().validate()
        names = ThetaParams.names(q)
        unknown = set(cfg.fixed) - set(names)
        if unknown:
            raise ValueError(f"unknown theta names {sorted(unknown)}")
        self.free = np.array([nm not in cfg.fixed for nm in names])
        k = int(self.free.sum())
        self.prior_mean = np.broadcast_to(np.asarray(cfg.prior_mean, dtype=float), (len(names),))
        self.prior_sd = np.broadcast_to(np.asarray(cfg.prior_sd, dtype=float), (len(names),))
        if cfg.mode == "integrated" and data.n > cfg.integrated_cap:
            raise ValueError(f"integrated mode capped at {cfg.integrated_cap} entries")
        rng = np.random.default_rng(cfg.seed)
        self.state = ChainState(
            w=np.zeros(data.n), beta=np.zeros((q, data.p)),
            tau2=np.broadcast_to(np.asarray(cfg.init_tau2, dtype=float), (q,)).copy(),
            theta=theta, ram=RamState(cfg.ram_init_scale * np.eye(k), cfg.ram_target, cfg.ram_decay),
            rng=rng)
        self.factors = compute_factors(theta, dag, self.layout, cfg.threads)
        self.resid = residuals(self.state.w, dag, self.factors, self.layout)
        self._child_cols = [[(c, self.layout.pa_cols[c][i]) for c in dag.children[i]]
                            for i in range(len(dag))]
        self._xi_off = dag.offsets
        self.timings = {"w": 0.0, "beta": 0.0, "tau2": 0.0, "theta": 0.0}
        self.accept_trace = []

    # --- w ------------------------------------------------------------
    def sweep_w(self, normals=None):
        dag, st, fac, lay = self.dag, self.state, self.factors, self.layout
        w, resid = st.w, self.resid
        omega, bdat = data_terms(self.data, st.beta, st.tau2)
        xi = st.rng.standard_normal(dag.n_locations) if normals is None else normals
        off = self._xi_off
        for group in self.groups:
            for k in group:
                mem = dag.members[k]
                f = fac[k]
                z = xi[off[k]:off[k + 1]]
                has_pa = bool(dag.parents[k])
                hw = f.H @ w[lay.pa_locs[k]] if has_pa else 0.0
                if f.R.ndim == 1:
                    prec = omega[mem] + f.Rinv
                    new = (bdat[mem] + f.Rinv * hw) / prec + z / np.sqrt(prec)
                    w[mem] = new
                    resid[k] = new - hw
                    continue
                old = w[mem]
                rhs = bdat[mem] + f.F @ old
                if has_pa:
                    rhs += f.RinvH @ w[lay.pa_locs[k]]
                for c, cols in self._child_cols[k]:
                    rhs += fac[c].RinvH[:, cols].T @ resid[c]
                prec = f.Rinv + f.F
                prec.flat[::len(mem) + 1] += omega[mem]
                L = chol_jitter(prec, dag.node_ids[k])
                mean, _ = dpotrs(L, rhs, lower=1)
                noise, _ = dtrtrs(L, z, lower=1, trans=1)
                new = mean + noise
                d = new - old
                for c, cols in self._child_cols[k]:
                    resid[c] -= fac[c].H[:, cols] @ d
                w[mem] = new
                resid[k] = new - hw

    # --- theta ----------------------------------------------------------
    def log_prior_theta(self, x):
        z = (x - self.prior_mean) / self.prior_sd
        return float(-0.5 * np.sum(z[self.free] ** 2))

    def log_target(self, theta, factors, resid=None):
        if self.config.mode == "integrated":
            return integrated_loglik(factors, self.dag, self.data, self.state.beta,
                                     self.state.tau2, self.layout)
        return log_prior_w(self.state.w, self.dag, factors, self.layout, resid)

    def metropolis_theta(self, eps=None, u=None):
        st = self.state
        ram = st.ram
        k = int(self.free.sum())
        if eps is None:
            eps = st.rng.standard_normal(k)
        if u is None:
            u = st.rng.uniform()
        if k == 0:
            return True
        x = st.theta.to_vector()
        xp = x.copy()
        xp[self.free] = x[self.free] + ram.S @ eps
        ram.proposed += 1
        cur = self.log_target(st.theta, self.factors, self.resid) + self.log_prior_theta(x)
        try:
            tp = ThetaParams.from_vector(st.theta.q, xp)
            fp = compute_factors(tp, self.dag, self.layout, self.config.threads)
            rp = residuals(st.w, self.dag, fp, self.layout)
            prop = self.log_target(tp, fp, rp) + self.log_prior_theta(xp)
        except NotPositiveDefinite:
            ram.rejected_nonpd += 1
            prop = -np.inf
        log_a = prop - cur if np.isfinite(prop) else -np.inf
        acc_prob = float(np.exp(min(0.0, log_a))) if np.isfinite(log_a) else 0.0
        accept = bool(np.log(u) < log_a)
        if accept:
            st.theta, self.factors, self.resid = tp, fp, rp
            ram.accepted += 1
        ram.update(eps, acc_prob)
        return accept

    # --- driver ---------------------------------------------------------
    def step(self):
        """One sweep: w by color, then beta, tau^2 and theta."""
        cfg, st, data = self.config, self.state, self.data
        n_theta = int(self.free.sum())
        # all random numbers of the sweep, in a fixed order
        xi = st.rng.standard_normal(self.dag.n_locations)
        nb = st.rng.standard_normal(data.q * data.p)
        t0 = time.perf_counter()
        self.sweep_w(xi)
        t1 = time.perf_counter()
        if cfg.update_beta:
            st.beta = gibbs_beta(st, data, cfg.v_beta, nb)
        t2 = time.perf_counter()
        sh, rate = tau2_posterior(st, data, cfg.a_tau, cfg.b_tau)
        g = st.rng.standard_gamma(sh)
        if cfg.update_tau2:
            st.tau2 = rate / g
        t3 = time.perf_counter()
        eps = st.rng.standard_normal(n_theta)
        u = st.rng.uniform()
        if cfg.update_theta:
            self.accept_trace.append(self.metropolis_theta(eps, u))
        t4 = time.perf_counter()
        for key, dt in zip(("w", "beta", "tau2", "theta"), (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            self.timings[key] += dt
        st.iteration += 1

    def run(self, callback=None):
        cfg = self.config
        keep = [it for it in range(cfg.iterations)
                if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0]
        nk = len(keep)
        q, p = self.data.q, self.data.p
        out = Samples(
            w=np.empty((nk, self.data.n)) if cfg.keep_w else None,
            beta=np.empty((nk, q * p)), tau2=np.empty((nk, q)),
            theta=np.empty((nk, self.state.theta.n_params)), q=q, p=p)
        keep_set = set(keep)
        j = 0
        sweep_times = []
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            self.step()
            sweep_times.append(time.perf_counter() - t0)
            if it in keep_set:
                st = self.state
                if out.w is not None:
                    out.w[j] = st.w
                out.beta[j] = st.beta.ravel()
                out.tau2[j] = st.tau2
                out.theta[j] = natural_vector(st.theta)
                j += 1
            if callback is not None:
                callback(it, self)
        ram = self.state.ram
        out.diagnostics = {
            "iterations": cfg.iterations, "retained": nk,
            "theta_accept_rate": ram.accepted / ram.proposed if ram.proposed else float("nan"),
            "theta_rejected_nonpd": ram.rejected_nonpd,
            "accept_trace": np.array(self.accept_trace, dtype=bool),
            "phase_seconds": dict(self.timings),
            "sweep_seconds": np.array(sweep_times),
            "ram_scale": ram.S.copy(),
        }
        return out


def natural_vector(theta: ThetaParams):
    q = theta.q
    iu = np.triu_indices(q, 1)
    return np.concatenate([theta.sigma1, theta.sigma2, theta.phi_margin,
                           theta.delta_latent[iu], [theta.alpha, theta.beta, theta.phi]])


def theta_from_natural(q, x):
    x = np.asarray(x, dtype=float)
    k = q * (q - 1) // 2
    d = np.zeros((q, q))
    d[np.triu_indices(q, 1)] = x[3 * q:3 * q + k]
    d = d + d.T
    return ThetaParams(x[:q], x[q:2 * q], x[2 * q:3 * q], d, *x[3 * q + k:])


@dataclass
class Samples:
    w: np.ndarray | None
    beta: np.ndarray
    tau2: np.ndarray
    theta: np.ndarray
    q: int
    p: int
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tau2)

    def theta_at(self, i):
        return theta_from_natural(self.q, self.theta[i])

    def beta_at(self, i):
        return self.beta[i].reshape(self.q, self.p)


def gibbs_w(state: ChainState, dag: TreedDag, factors: FactorSet, data: ModelData):
    """One colored sweep over all nodes; returns the updated w."""
    s = Sampler.__new__(Sampler)
    s.config = MCMCConfig()
    s.data, s.dag, s.state, s.factors = data, dag, state, factors
    s.layout = Layout(dag)
    s.groups = color_groups(dag)
    s.resid = residuals(state.w, dag, factors, s.layout)
    s._child_cols = [[(c, s.layout.pa_cols[c][i]) for c in dag.children[i]]
                     for i in range(len(dag))]
    s._xi_off = dag.offsets
    s.sweep_w()
    return state.w


def run_chain(data: ModelData, dag: TreedDag, config: MCMCConfig | None = None) -> Samples:
    return Sampler(data, dag, config).run()
