"""Linear CCA and the deep-CCA correlation loss with its analytic gradient.

Views are stored row-wise: ``h_x`` is ``[m, d_x]`` and ``h_y`` is ``[m, d_y]``
for a batch of ``m`` paired samples.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor_nn import Dense, Dropout, Network, NormalInit, ReLU

EIG_FLOOR = 1e-12
TIE_TOL = 1e-8


class DegenerateCovarianceError(np.linalg.LinAlgError):
    pass


class SingularValueTieWarning(RuntimeWarning):
    pass


@dataclass
class ViewBatch:
    h_x: np.ndarray
    h_y: np.ndarray

    def __post_init__(self):
        self.h_x = np.asarray(self.h_x, dtype=np.float64)
        self.h_y = np.asarray(self.h_y, dtype=np.float64)
        if self.h_x.ndim != 2 or self.h_y.ndim != 2:
            raise ValueError("views must be 2-D [m, d] matrices")
        if self.h_x.shape[0] != self.h_y.shape[0]:
            raise ValueError(f"views disagree on batch size: {self.h_x.shape[0]} vs {self.h_y.shape[0]}")
        if self.m < 2:
            raise ValueError("need at least 2 samples to estimate covariances")
        if not (np.all(np.isfinite(self.h_x)) and np.all(np.isfinite(self.h_y))):
            raise ValueError("views contain non-finite entries")

    @property
    def m(self):
        return self.h_x.shape[0]


@dataclass(frozen=True)
class CcaConfig:
    c: int = 10
    reg: float = 1e-4

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("number of canonical pairs must be positive")
        if self.reg < 0:
            raise ValueError("ridge coefficient must be >= 0")

    def check(self, batch: ViewBatch):
        d = min(batch.h_x.shape[1], batch.h_y.shape[1])
        if self.c > d:
            raise ValueError(f"c={self.c} exceeds min(d_x, d_y)={d}")


@dataclass
class CcaResult:
    correlations: np.ndarray
    proj_x: np.ndarray
    proj_y: np.ndarray

    def to_json(self):
        return json.dumps({
            "correlations": self.correlations.tolist(),
            "proj_x": self.proj_x.tolist(),
            "proj_y": self.proj_y.tolist(),
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("correlations", "proj_x", "proj_y")))


def _views(batch_or_x, h_y=None):
    if isinstance(batch_or_x, ViewBatch):
        return batch_or_x
    return ViewBatch(batch_or_x, h_y)


def centered_covariances(batch, reg=0.0):
    """Sample covariances (1/(m-1) normalization) with ridge ``reg`` on the auto-covariances."""
    batch = _views(batch)
    m = batch.m
    hx = batch.h_x - batch.h_x.mean(axis=0)
    hy = batch.h_y - batch.h_y.mean(axis=0)
    sxx = hx.T @ hx / (m - 1)
    syy = hy.T @ hy / (m - 1)
    sxy = hx.T @ hy / (m - 1)
    # exact symmetry regardless of BLAS summation order
    sxx = 0.5 * (sxx + sxx.T) + reg * np.eye(sxx.shape[0])
    syy = 0.5 * (syy + syy.T) + reg * np.eye(syy.shape[0])
    return sxx, syy, sxy


def inv_sqrt_psd(s, reg=None, view="x"):
    """Symmetric inverse square root via eigendecomposition, eigenvalues floored at 1e-12."""
    evals, evecs = np.linalg.eigh(s)
    if reg == 0 and evals[0] <= EIG_FLOOR * max(1.0, evals[-1]):
        raise DegenerateCovarianceError(
            f"auto-covariance of view {view} is singular (min eigenvalue {evals[0]:.3g}); "
            "use a ridge coefficient reg > 0"
        )
    evals = np.maximum(evals, EIG_FLOOR)
    return (evecs * evals ** -0.5) @ evecs.T


def _whitened_svd(batch, cfg):
    sxx, syy, sxy = centered_covariances(batch, cfg.reg)
    wx = inv_sqrt_psd(sxx, cfg.reg, "x")
    wy = inv_sqrt_psd(syy, cfg.reg, "y")
    t = wx @ sxy @ wy
    u, d, vt = np.linalg.svd(t, full_matrices=False)
    return wx, wy, u, d, vt.T


def fit_cca(batch, cfg: CcaConfig) -> CcaResult:
    batch = _views(batch)
    cfg.check(batch)
    wx, wy, u, d, v = _whitened_svd(batch, cfg)
    c = cfg.c
    a = wx @ u[:, :c]
    b = wy @ v[:, :c]
    # sign convention: first nonzero entry of each a_i is positive
    for i in range(c):
        nz = np.flatnonzero(np.abs(a[:, i]) > 0)
        if nz.size and a[nz[0], i] < 0:
            a[:, i] *= -1
            b[:, i] *= -1
    return CcaResult(d[:c].copy(), a, b)


def dcca_loss(batch, cfg: CcaConfig) -> float:
    """Negated mean of the top-C canonical correlations."""
    return -float(np.sum(fit_cca(batch, cfg).correlations)) / cfg.c


def dcca_loss_grad(batch, cfg: CcaConfig):
    """Loss and gradients ``(loss, dL/dh_x, dL/dh_y, correlations)``.

    With T = Sxx^-1/2 Sxy Syy^-1/2 = U D V^T truncated to C pairs, the
    gradient of the correlation sum is
      dSxy = Sxx^-1/2 U V^T Syy^-1/2
      dSxx = -1/2 Sxx^-1/2 U D U^T Sxx^-1/2   (and likewise for Syy)
    and is pushed through the centered batch matrices.
    """
    batch = _views(batch)
    cfg.check(batch)
    m, c = batch.m, cfg.c
    wx, wy, u, d, v = _whitened_svd(batch, cfg)
    if c < d.size and d[c - 1] - d[c] <= TIE_TOL:
        warnings.warn(
            f"singular values {d[c - 1]:.3g} and {d[c]:.3g} tie at the truncation boundary; "
            "using a subgradient",
            SingularValueTieWarning,
            stacklevel=2,
        )
    uc, vc, dc = u[:, :c], v[:, :c], d[:c]
    g_xy = wx @ uc @ vc.T @ wy
    g_xx = -0.5 * wx @ (uc * dc) @ uc.T @ wx
    g_yy = -0.5 * wy @ (vc * dc) @ vc.T @ wy
    hx = batch.h_x - batch.h_x.mean(axis=0)
    hy = batch.h_y - batch.h_y.mean(axis=0)
    scale = -1.0 / (c * (m - 1))
    gx = scale * (2.0 * hx @ g_xx + hy @ g_xy.T)
    gy = scale * (2.0 * hy @ g_yy + hx @ g_xy)
    # project out the batch mean (the loss is invariant to shifting any column)
    gx -= gx.mean(axis=0)
    gy -= gy.mean(axis=0)
    return -float(dc.sum()) / c, gx, gy, dc.copy()


def build_dcca_branch(d_x, d_y, hidden=1024, depth=3, out=10, c=10, dropout=1e-4,
                      init_std=0.01, weight_decay=1e-5, seed=None):
    """Two independent MLPs: [dense(hidden) + ReLU] x depth -> dropout -> dense(out)."""
    if d_x <= 0 or d_y <= 0:
        raise ValueError("view dimensions must be positive")
    if out < c:
        raise ValueError(f"branch output width {out} is smaller than c={c}")
    seeds = np.random.SeedSequence(seed).spawn(2)

    def branch(d_in, tag, ss):
        init = NormalInit(std=init_std)
        layers = []
        for i in range(depth):
            layers += [Dense(hidden, f"{tag}.dense{i}", weight_decay, init), ReLU(f"{tag}.relu{i}")]
        layers += [Dropout(dropout, f"{tag}.dropout"), Dense(out, f"{tag}.out", weight_decay, init)]
        return Network(layers, (d_in,), seed=np.random.default_rng(ss))

    return branch(d_x, "fx", seeds[0]), branch(d_y, "fy", seeds[1])
