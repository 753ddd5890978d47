"""Model data in expanded-domain layout: one row per (coords, variable) entry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ModelData:
    """Outcomes, covariates and loadings aligned to expanded-domain locations.

    Row ``i`` is latent entry ``w(coords[i], var[i])``; its outcome
    ``y[i]`` is NaN when unobserved. ``z`` is the scalar loading of the
    latent entry on its outcome (the only non-zero of the row of Z).
    """

    coords: np.ndarray
    var: np.ndarray
    y: np.ndarray
    X: np.ndarray
    z: np.ndarray | None = None
    q: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim == 1:
            self.coords = self.coords[:, None]
        n = len(self.coords)
        self.var = np.asarray(self.var, dtype=int).reshape(n)
        self.y = np.asarray(self.y, dtype=float).reshape(n)
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        self.z = np.ones(n) if self.z is None else np.asarray(self.z, dtype=float).reshape(n)
        if self.q is None:
            self.q = int(self.var.max()) + 1 if n else 0
        if n and (self.var.min() < 0 or self.var.max() >= self.q):
            raise ValueError("variable index out of range")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite covariates")

    @property
    def n(self):
        return len(self.coords)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def observed(self):
        return ~np.isnan(self.y)

    def counts(self):
        """Observed outcomes per variable, N_j."""
        return np.bincount(self.var[self.observed], minlength=self.q)

    def mean(self, beta):
        """X(l) beta_{var(l)} for every row; ``beta`` is q x p."""
        beta = np.asarray(beta, dtype=float).reshape(self.q, self.p)
        return np.einsum("ij,ij->i", self.X, beta[self.var])

    def subset(self, rows):
        rows = np.asarray(rows)
        return ModelData(self.coords[rows], self.var[rows], self.y[rows], self.X[rows],
                         self.z[rows], self.q)

    def misalignment(self):
        """Share of observed spatial sites where only some variables are observed."""
        obs = self.observed
        sites = {}
        for c, v in zip(map(tuple, self.coords[obs]), self.var[obs]):
            sites.setdefault(c, set()).add(int(v))
        if not sites:
            return 0.0
        return float(np.mean([len(s) < self.q for s in sites.values()]))
