"""Posterior predictive draws and scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import cov_matrix, spd_inv
from .data import ModelData
from .treegraph import TreedDag, leaf_parent_set, pick_terminal


@dataclass
class PredictionRequest:
    coords: np.ndarray
    var: np.ndarray
    X: np.ndarray | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.var = np.atleast_1d(np.asarray(self.var, dtype=int))
        n = len(self.var)
        self.X = np.ones((n, 1)) if self.X is None else np.asarray(self.X, float).reshape(n, -1)
        self.z = np.ones(n) if self.z is None else np.asarray(self.z, float).reshape(n)


@dataclass
class Prediction:
    draws: np.ndarray  # n_draws x n_locations
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var: np.ndarray


def _summarize(draws, var):
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    return Prediction(draws, draws.mean(axis=0), lo, hi, var)


def predict_in_model(samples, data: ModelData, rows=None, rng=None) -> Prediction:
    """y = X beta + z w + noise for fitted entries, one draw per retained sample."""
    rng = np.random.default_rng(rng)
    if samples.w is None:
        raise ValueError("latent draws were not retained")
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    var = data.var[rows]
    out = np.empty((len(samples), len(rows)))
    for i in range(len(samples)):
        mu = data.mean(samples.beta_at(i))[rows] + data.z[rows] * samples.w[i, rows]
        out[i] = mu + np.sqrt(samples.tau2[i, var]) * rng.standard_normal(len(rows))
    return _summarize(out, var)


def predict_new(samples, dag: TreedDag, request: PredictionRequest, rng=None,
                noise=True) -> Prediction:
    """Draws at arbitrary locations through the cherry-picked leaf's parents.

    Each location gets w(l) ~ N(H_l w_[l], R_l) under the draw's theta,
    with the parent set of the leaf it would join.
    """
    rng = np.random.default_rng(rng)
    if np.any(request.var >= dag.q) or np.any(request.var < 0):
        raise ValueError("request variable index out of range")
    if samples.w is None:
        raise ValueError("latent draws were not retained")
    terms, _ = pick_terminal(dag, request.coords, request.var)
    groups = {}
    for i, t in enumerate(terms):
        groups.setdefault(leaf_parent_set(dag, int(t)), []).append(i)
    n = len(request.var)
    out = np.empty((len(samples), n))
    for s in range(len(samples)):
        theta = samples.theta_at(s)
        beta = samples.beta_at(s)
        w = samples.w[s]
        for ps, idx in groups.items():
            idx = np.array(idx)
            pl = np.concatenate([dag.members[p] for p in ps])
            Cpi, _ = spd_inv(cov_matrix(theta, dag.coords[pl], dag.var[pl]))
            c, v = request.coords[idx], request.var[idx]
            K = cov_matrix(theta, c, v, dag.coords[pl], dag.var[pl])
            H = K @ Cpi
            R = theta.sigma1[v] ** 2 + theta.sigma2[v] ** 2 - np.einsum("ij,ij->i", H, K)
            R = np.maximum(R, 0.0)
            wl = H @ w[pl] + np.sqrt(R) * rng.standard_normal(len(idx))
            mu = np.einsum("ij,ij->i", request.X[idx], beta[v]) + request.z[idx] * wl
            if noise:
                mu = mu + np.sqrt(samples.tau2[s, v]) * rng.standard_normal(len(idx))
            out[s, idx] = mu
    return _summarize(out, request.var)


def predict(samples, dag: TreedDag, data: ModelData | None = None, request=None, rng=None):
    """In-model prediction when ``request`` is None, new locations otherwise."""
    if request is None:
        if data is None:
            raise ValueError("need data for in-model prediction")
        return predict_in_model(samples, data, rng=rng)
    return predict_new(samples, dag, request, rng=rng)


def score(pred: Prediction, truth, rows=None, q=None) -> dict:
    """coverage95, rmse and mae per outcome; NaN truth entries are skipped."""
    truth = np.asarray(truth, dtype=float)
    mean, lo, hi, var = pred.mean, pred.lower, pred.upper, pred.var
    if rows is not None:
        mean, lo, hi, var, truth = mean[rows], lo[rows], hi[rows], var[rows], truth[rows]
    q = int(var.max()) + 1 if q is None else q
    ok = ~np.isnan(truth)
    out = {}
    for j in range(q):
        m = ok & (var == j)
        if not m.any():
            out[j] = {"coverage95": np.nan, "rmse": np.nan, "mae": np.nan, "n": 0}
            continue
        err = mean[m] - truth[m]
        out[j] = {"coverage95": float(np.mean((truth[m] >= lo[m]) & (truth[m] <= hi[m]))),
                  "rmse": float(np.sqrt(np.mean(err ** 2))),
                  "mae": float(np.mean(np.abs(err))), "n": int(m.sum())}
    err = mean[ok] - truth[ok]
    out["all"] = {"coverage95": float(np.mean((truth[ok] >= lo[ok]) & (truth[ok] <= hi[ok]))),
                  "rmse": float(np.sqrt(np.mean(err ** 2))) if ok.any() else np.nan,
                  "mae": float(np.mean(np.abs(err))) if ok.any() else np.nan,
                  "n": int(ok.sum())}
    return out
