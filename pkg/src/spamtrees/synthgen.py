"""Synthetic bivariate data on a regular grid with random and patchy missingness."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .covariance import ThetaParams, chol_jitter, cov_matrix
from .data import ModelData

MAX_SCALARS = 10_000


def truth_grid():
    """All truth settings of the simulation design (q = 2).

    sigma_i1, sigma_i2 in {1, 2}; phi_1 = phi_2 and phi in {0.1, 1, 10};
    delta_21 = alpha = beta = 1.
    """
    out = []
    for s11, s21, s12, s22 in itertools.product((1.0, 2.0), repeat=4):
        for phi_m, phi in itertools.product((0.1, 1.0, 10.0), repeat=2):
            out.append(ThetaParams([s11, s21], [s12, s22], [phi_m, phi_m],
                                   [[0.0, 1.0], [1.0, 0.0]], 1.0, 1.0, phi))
    return out


@dataclass
class SynthConfig:
    grid_side: int = 30
    theta: ThetaParams | None = None
    tau2: tuple = (0.01, 0.1)
    beta: np.ndarray | None = None  # q x p, p includes the intercept
    n_covariates: int = 0  # extra N(0,1) covariates besides the intercept
    missing_rate: float = 0.8
    patch_count: int = 3
    patch_radius: float = 0.1
    patch_missing: float = 0.99
    seed: int = 0

    def validate(self):
        for r in (self.missing_rate, self.patch_missing):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if self.grid_side < 1 or self.patch_count < 0 or self.patch_radius < 0:
            raise ValueError("invalid grid or patch settings")
        return self


@dataclass
class Truth:
    theta: ThetaParams
    tau2: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    y_full: np.ndarray
    patch_centers: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_json(self):
        t = self.theta
        return json.dumps({
            "theta": {"sigma1": t.sigma1.tolist(), "sigma2": t.sigma2.tolist(),
                      "phi_margin": t.phi_margin.tolist(),
                      "delta_latent": t.delta_latent.tolist(),
                      "alpha": t.alpha, "beta": t.beta, "phi": t.phi},
            "tau2": self.tau2.tolist(), "beta": self.beta.tolist(),
            "w": [repr(float(x)) for x in self.w],
            "y_full": [repr(float(x)) for x in self.y_full],
            "patch_centers": self.patch_centers.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        t = d["theta"]
        theta = ThetaParams(t["sigma1"], t["sigma2"], t["phi_margin"], t["delta_latent"],
                            t["alpha"], t["beta"], t["phi"])
        return cls(theta, np.array(d["tau2"]), np.array(d["beta"]),
                   np.array([float(x) for x in d["w"]]),
                   np.array([float(x) for x in d["y_full"]]),
                   np.array(d["patch_centers"]).reshape(-1, 2))


def grid_locations(side, q):
    g = np.linspace(0.0, 1.0, side)
    xx, yy = np.meshgrid(g, g, indexing="xy")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    coords = np.repeat(pts, q, axis=0)
    var = np.tile(np.arange(q), len(pts))
    return coords, var


def generate(config: SynthConfig) -> tuple:
    """Draw w from the dense base GP, add noise, then mask outcomes."""
    cfg = config.validate()
    theta = (cfg.theta or truth_grid()[0]).validate()
    q = theta.q
    coords, var = grid_locations(cfg.grid_side, q)
    n = len(coords)
    if n > MAX_SCALARS:
        raise ValueError(f"dense generation capped at {MAX_SCALARS} scalars, got {n}")
    rng = np.random.default_rng(cfg.seed)
    C = cov_matrix(theta, coords, var)
    L = chol_jitter(C, "synthetic grid")
    w = L @ rng.standard_normal(n)

    X = np.ones((n, 1 + cfg.n_covariates))
    if cfg.n_covariates:
        X[:, 1:] = rng.standard_normal((n, cfg.n_covariates))
    beta = np.zeros((q, X.shape[1])) if cfg.beta is None else np.asarray(cfg.beta, float).reshape(q, -1)
    tau2 = np.broadcast_to(np.asarray(cfg.tau2, dtype=float), (q,)).copy()
    y_full = np.einsum("ij,ij->i", X, beta[var]) + w + np.sqrt(tau2[var]) * rng.standard_normal(n)

    # independent missingness per margin, then sparse circular patches
    miss = rng.uniform(size=n) < cfg.missing_rate
    centers = rng.uniform(size=(cfg.patch_count, 2))
    patch_u = rng.uniform(size=n)
    for c in centers:
        inside = np.linalg.norm(coords - c, axis=1) <= cfg.patch_radius
        miss |= inside & (patch_u < cfg.patch_missing)
    y = np.where(miss, np.nan, y_full)
    data = ModelData(coords, var, y, X, q=q)
    truth = Truth(theta, tau2, beta, w, y_full, centers)
    return data, truth
