"""Gaussian-process regression of packet delivery time over pair states.

Inputs are aggregated ego+lead state vectors [ego_pos, ego_vel, lead_pos,
lead_vel]; targets are measured delays in seconds. The kernel is a squared
exponential with one length scale per dimension. Posterior queries run
against a windowed cache (see kernel_cache) whose stored matrix already
includes the noise ridge, so no second factorization is ever needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import VehicleState

log = logging.getLogger(__name__)

INPUT_DIM = 4

# negative posterior variance beyond this signals a drifted inverse
VARIANCE_TOL = 1e-9


def aggregate(ego: VehicleState, lead: VehicleState) -> np.ndarray:
    """Concatenate the pair into the regression input vector."""
    x = np.array([ego.position, ego.velocity, lead.position, lead.velocity])
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite aggregated input")
    return x


@dataclass(frozen=True)
class Hyperparameters:
    """RBF signal variance, per-dimension length scales, and noise variance."""

    signal_var: float
    length_scales: np.ndarray
    noise_var: float

    def __post_init__(self):
        object.__setattr__(
            self, "length_scales", np.asarray(self.length_scales, dtype=float)
        )
        if self.signal_var <= 0.0:
            raise ValueError("signal_var must be positive")
        if np.any(self.length_scales <= 0.0):
            raise ValueError("length scales must be positive")
        if self.noise_var < 0.0:
            raise ValueError("noise_var must be nonnegative")


@dataclass
class TrainingSet:
    """Full collected data: r input rows, delay targets, per-row step tags."""

    inputs: np.ndarray  # (r, INPUT_DIM)
    targets: np.ndarray  # (r,)
    step_tags: np.ndarray  # (r,) int

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        self.step_tags = np.asarray(self.step_tags, dtype=int)
        r = self.inputs.shape[0]
        if self.inputs.shape[1] != INPUT_DIM:
            raise ValueError(f"inputs must have {INPUT_DIM} columns")
        if r < 1 or self.targets.shape != (r,) or self.step_tags.shape != (r,):
            raise ValueError("inconsistent training set shapes")
        if np.any(self.targets < 0.0):
            raise ValueError("delay targets must be nonnegative")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    CSV_HEADER = "ego_pos,ego_vel,lead_pos,lead_vel,delay,step_tag"

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.inputs, self.targets, self.step_tags])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",",
                   header=self.CSV_HEADER, comments="")

    @classmethod
    def from_csv(cls, path) -> "TrainingSet":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows[:, :4], rows[:, 4], rows[:, 5].astype(int))


# Covariances between far-apart inputs underflow into denormal floats, and
# a single denormal operand costs a microcode assist in every downstream
# BLAS pass that touches it. They carry no information at 1e-308, so the
# kernel functions flush them to exact zero at the source.
_TINY = np.finfo(float).tiny


def kernel(a: np.ndarray, b: np.ndarray, h: Hyperparameters) -> float:
    """Squared-exponential covariance between two input vectors."""
    d = (np.asarray(a) - np.asarray(b)) / h.length_scales
    v = h.signal_var * float(np.exp(-0.5 * np.dot(d, d)))
    return v if v >= _TINY else 0.0


def kernel_vector(X: np.ndarray, x: np.ndarray, h: Hyperparameters) -> np.ndarray:
    """Covariances k(x_i, x) for every row of X, as one vector."""
    if X.size == 0:
        return np.zeros(0)
    d = (X - x) / h.length_scales
    kv = h.signal_var * np.exp(-0.5 * np.einsum("ij,ij->i", d, d))
    kv[kv < _TINY] = 0.0
    return kv


def gram(X: np.ndarray, h: Hyperparameters) -> np.ndarray:
    """Dense kernel matrix K_ij = k(x_i, x_j) (no noise ridge)."""
    Z = X / h.length_scales
    sq = np.sum(Z * Z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(d2, 0.0, out=d2)
    K = h.signal_var * np.exp(-0.5 * d2)
    K = 0.5 * (K + K.T)
    K[K < _TINY] = 0.0
    return K


def posterior(x_star: np.ndarray, window) -> tuple[float, float]:
    """Posterior (mean, variance) of the delay at a test input.

    `window` is a KernelCache; its stored matrix is K + noise_var*I and the
    cached inverse is used directly. The mean is computed in centered form
    around the window's prior mean (window target mean by default, a fixed
    constant when configured), which reduces to the plain zero-mean GP when
    that constant is 0.
    """
    h = window.hyper
    mu = window.prior_mean_value()
    if len(window) == 0:
        return mu, h.signal_var
    kv = kernel_vector(window.inputs, np.asarray(x_star, dtype=float), h)
    alpha = window.K_inv @ (window.targets - mu)
    mean = mu + float(kv @ alpha)
    var = kernel(x_star, x_star, h) - float(kv @ (window.K_inv @ kv))
    if var < 0.0:
        if var < -VARIANCE_TOL:
            log.warning("posterior variance %.3e below -%.0e; inverse drift?",
                        var, VARIANCE_TOL)
        var = 0.0
    return mean, var


def log_marginal_likelihood(X: np.ndarray, targets: np.ndarray,
                            h: Hyperparameters) -> float:
    """log p(targets | X, h) for the zero-mean GP with noise ridge."""
    r = X.shape[0]
    K = gram(X, h) + h.noise_var * np.eye(r)
    try:
        L = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        K += 1e-8 * h.signal_var * np.eye(r)
        L = cho_factor(K, lower=True)
    alpha = cho_solve(L, targets)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L[0]))))
    return -0.5 * float(targets @ alpha) - 0.5 * logdet - 0.5 * r * np.log(2.0 * np.pi)


def fit_hyperparameters(ts: TrainingSet,
                        grid: list[Hyperparameters]) -> Hyperparameters:
    """Pick the grid candidate with the highest marginal likelihood.

    Ties keep the earliest candidate so the result is deterministic for a
    fixed grid order.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if len(ts) < 5:
        raise ValueError("need at least 5 training points to fit")
    best, best_ll = None, -np.inf
    for h in grid:
        ll = log_marginal_likelihood(ts.inputs, ts.targets, h)
        if ll > best_ll:
            best, best_ll = h, ll
    return best


def hyperparameter_grid(signal_vars, pos_scales, vel_scales,
                        noise_vars) -> list[Hyperparameters]:
    """Cartesian grid sharing one scale across position dims, one across velocity."""
    out = []
    for sv in signal_vars:
        for lp in pos_scales:
            for lv in vel_scales:
                for nv in noise_vars:
                    out.append(Hyperparameters(sv, np.array([lp, lv, lp, lv]), nv))
    return out
