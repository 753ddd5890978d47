"""Text formats: data CSV, flat key=value configs, model bundles.

Data CSV layout: coordinate columns, then ``var``, then ``y`` (empty cell for
missing), then covariate columns. Floats are written with ``repr`` so every
value survives a round trip exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import ModelData
from .mcmc import Samples

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


def read_csv(path, d=None, q=None) -> ModelData:
    """Parse a data CSV; ``d`` and ``q`` are checked when given."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestError(f"{path}: missing header")
    header = [h.strip() for h in rows[0]]
    if "var" not in header or "y" not in header:
        raise IngestError(f"{path}: header needs 'var' and 'y' columns")
    iv, iy = header.index("var"), header.index("y")
    if iy != iv + 1 or iv == 0:
        raise IngestError(f"{path}: expected coordinates, var, y, covariates")
    if d is not None and iv != d:
        raise IngestError(f"{path}: expected {d} coordinate columns, found {iv}")
    d = iv
    p = len(header) - iy - 1
    coords, var, y, X = [], [], [], []
    seen = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            c = [float(x) for x in row[:d]]
            v = int(row[iv])
            yy = float(row[iy]) if row[iy].strip() else np.nan
            xx = [float(x) for x in row[iy + 1:]]
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(c)) or not all(np.isfinite(xx)) or np.isinf(yy):
            raise IngestError(f"{path}:{lineno}: non-finite value")
        if v < 0 or (q is not None and v >= q):
            raise IngestError(f"{path}:{lineno}: unknown variable index {v}")
        key = (tuple(c), v)
        if key in seen:
            raise IngestError(f"{path}:{lineno}: duplicate location of line {seen[key]}")
        seen[key] = lineno
        coords.append(c), var.append(v), y.append(yy), X.append(xx)
    if not coords:
        log.warning("%s: no data rows", path)
        return ModelData(np.zeros((0, d)), np.zeros(0, int), np.zeros(0), np.zeros((0, p)), q=q or 0)
    data = ModelData(np.array(coords), np.array(var), np.array(y),
                     np.array(X).reshape(len(coords), p), q=q)
    log.info("%s: %d rows, observed per variable %s, misaligned sites %.2f",
             path, data.n, data.counts().tolist(), data.misalignment())
    return data


def write_csv(path, data: ModelData, coord_names=None, cov_names=None):
    d, p = data.coords.shape[1], data.p
    coord_names = coord_names or [f"x{i}" for i in range(d)]
    cov_names = cov_names or [f"cov{i}" for i in range(p)]
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(coord_names) + ["var", "y"] + list(cov_names))
        for i in range(data.n):
            y = "" if np.isnan(data.y[i]) else repr(float(data.y[i]))
            wr.writerow([repr(float(c)) for c in data.coords[i]] + [int(data.var[i]), y]
                        + [repr(float(x)) for x in data.X[i]])


# ---------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------

@dataclass
class RunConfig:
    data: str = ""
    out: str = "spamtrees_out"
    truth: str = ""
    d: int = 2
    q: int = 0  # 0: infer from data
    # tree
    M: int = 3
    delta: int = 0  # 0: full depth
    c: int = 2
    n_s: int = 16
    root_cells: int = 1
    bias_weights: str = ""  # comma separated, one per variable
    tree_seed: int = 0
    # sampler
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    mode: str = "latent"
    ram_target: float = 0.234
    ram_init_scale: float = 0.1
    fixed: str = ""  # comma separated theta names
    prior_sd: float = 1.0
    v_beta: float = 100.0
    a_tau: float = 2.0
    b_tau: float = 1.0
    threads: int = field(default_factory=lambda: int(os.environ.get("SPAMTREES_THREADS", "1")))

    def validate(self):
        if self.iterations < self.burn_in:
            raise ValueError("iterations must be >= burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.delta and not 1 <= self.delta <= self.M:
            raise ValueError("delta must lie in 1..M")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        return self

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise ValueError(f"config line {lineno}: unknown key {k!r}")
        setattr(cfg, k, _coerce(types[k], v))
    return cfg


def _coerce(tp, v):
    tp = tp if isinstance(tp, str) else tp.__name__
    if tp == "int":
        return int(v)
    if tp == "float":
        return float(v)
    return v


# ---------------------------------------------------------------------
# samples and bundles
# ---------------------------------------------------------------------

def _write_matrix(path, header, M):
    with Path(path).open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(M):
            fh.write(",".join("%.17g" % x for x in row) + "\n")


def _read_matrix(path):
    with Path(path).open() as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(x) for x in ln.split(",")] for ln in fh if ln.strip()]
    return header, np.array(rows).reshape(len(rows), len(header))


def write_samples(bundle, samples: Samples, theta_names):
    bundle = Path(bundle)
    bundle.mkdir(parents=True, exist_ok=True)
    q, p = samples.q, samples.p
    if samples.w is not None:
        _write_matrix(bundle / "samples_w.csv", [f"w{i}" for i in range(samples.w.shape[1])],
                      samples.w)
    _write_matrix(bundle / "samples_beta.csv",
                  [f"beta_{j}_{k}" for j in range(q) for k in range(p)], samples.beta)
    _write_matrix(bundle / "samples_tau2.csv", [f"tau2_{j}" for j in range(q)], samples.tau2)
    _write_matrix(bundle / "samples_theta.csv", theta_names, samples.theta)


def read_samples(bundle, q, p) -> Samples:
    bundle = Path(bundle)
    w = None
    if (bundle / "samples_w.csv").exists():
        w = _read_matrix(bundle / "samples_w.csv")[1]
    beta = _read_matrix(bundle / "samples_beta.csv")[1].reshape(-1, q * p)
    tau2 = _read_matrix(bundle / "samples_tau2.csv")[1]
    theta = _read_matrix(bundle / "samples_theta.csv")[1]
    return Samples(w=w, beta=beta, tau2=tau2, theta=theta, q=q, p=p)


def write_diagnostics(path, diag: dict):
    out = {}
    for k, v in diag.items():
        if isinstance(v, np.ndarray):
            if k == "sweep_seconds":
                out["mean_sweep_seconds"] = float(v.mean()) if len(v) else None
                continue
            if k == "accept_trace":
                out["accept_trace_last_1000"] = float(v[-1000:].mean()) if len(v) else None
                continue
            v = v.tolist()
        out[k] = v
    Path(path).write_text(json.dumps(out, indent=1, default=float))
