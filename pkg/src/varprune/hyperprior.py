"""Hyper-priors over the Bernoulli prior parameter and the optimal prior choice.

For a unit with posterior keep-probability ``theta`` the prior parameter is
chosen as the constrained minimiser

    J(pi) = (1 - theta) log((1 - theta)/(1 - pi)) + theta log(theta/pi) - log p(pi)
    subject to eps1 <= pi <= 1 - eps2,

which has a closed form for both families implemented here. The quantity
that enters the gate gradient is ``log(theta (1 - pi*) / ((1 - theta) pi*))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar


@dataclass(frozen=True)
class Beta:
    alpha: float = 0.9
    beta: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0 and self.beta > 1.0):
            raise ValueError(f"Beta hyper-prior needs 0 < alpha < 1 < beta, got ({self.alpha}, {self.beta})")


@dataclass(frozen=True)
class Flattening:
    """``p(pi | gamma) = c / (1 + (gamma - 1)(1 - pi))`` with ``c = (gamma - 1)/log(gamma)``."""

    gamma: float = 1e-2
    log_gamma: float = None

    def __post_init__(self):
        if self.log_gamma is None:
            if not self.gamma > 0:
                raise ValueError(f"gamma must be positive, got {self.gamma}")
            object.__setattr__(self, "log_gamma", math.log(self.gamma))
        else:
            # gamma may underflow (log gamma = -1000 is legal); keep the log as the source of truth
            object.__setattr__(self, "gamma", math.exp(self.log_gamma))
        if not self.log_gamma < 0:
            raise ValueError(f"Flattening hyper-prior needs gamma < 1, got log(gamma) = {self.log_gamma}")

    @classmethod
    def from_log(cls, log_gamma):
        return cls(log_gamma=float(log_gamma))


@dataclass(frozen=True)
class ClipBounds:
    """Bounds ``eps1 <= pi* <= 1 - eps2`` on the prior parameter."""

    eps1: float = 1e-4
    eps2: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.eps1 < 1.0 and 0.0 < self.eps2 < 1.0 and self.eps1 + self.eps2 < 1.0):
            raise ValueError(f"invalid clip bounds eps1={self.eps1}, eps2={self.eps2}")

    @classmethod
    def from_theta1(cls, hp, theta1, eps2=1e-4):
        """Pick ``eps1`` so that the lower clipping threshold equals ``theta1``.

        For small gamma the default eps1 = 1e-4 pushes theta1 towards 1 and
        the flat part of the Flattening curve disappears; fixing theta1
        directly keeps it.
        """
        if isinstance(hp, Flattening):
            g = hp.gamma
            eps1 = theta1 * g / (1.0 - theta1 + theta1 * g)
        else:
            a, b = hp.alpha, hp.beta
            if theta1 <= 1.0 - a:
                raise ValueError(f"Beta needs theta1 > 1 - alpha = {1 - a}")
            eps1 = (theta1 - (1.0 - a)) / (b - 1.0 + a)
        return cls(eps1=eps1, eps2=eps2)


def thresholds(hp, cb):
    """Lower and upper clipping thresholds (theta1, theta2)."""
    e1, e2 = cb.eps1, cb.eps2
    if isinstance(hp, Beta):
        a, b = hp.alpha, hp.beta
        return (1 - e1) * (1 - a) + e1 * b, e2 * (1 - a) + (1 - e2) * b
    g = hp.gamma
    return e1 / (e1 + g * (1 - e1)), (1 - e2) / (1 + e2 * (g - 1))


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any((theta < 0) | (theta > 1)):
        raise ValueError("theta must lie in [0, 1]")
    return theta


def pi_star(hp, cb, theta):
    """Closed-form constrained minimiser of J for each theta."""
    theta = _check_theta(theta)
    t1, t2 = thresholds(hp, cb)
    if isinstance(hp, Beta):
        a, b = hp.alpha, hp.beta
        inner = (theta + a - 1.0) / (a + b - 1.0)
    else:
        g = hp.gamma
        inner = g * theta / (1.0 + theta * (g - 1.0))
    out = np.where(theta <= t1, cb.eps1, np.where(theta >= t2, 1.0 - cb.eps2, inner))
    return out if out.ndim else float(out)


def objective(hp, theta, pi):
    """J(pi) up to a theta-only constant (the entropy terms of theta are dropped)."""
    pi = np.asarray(pi, dtype=np.float64)
    return -(1.0 - theta) * np.log1p(-pi) - theta * np.log(pi) - log_pdf(hp, pi)


def objective_grad(hp, theta, pi):
    """dJ/dpi."""
    pi = np.asarray(pi, dtype=np.float64)
    return (1.0 - theta) / (1.0 - pi) - theta / pi - log_pdf_grad(hp, pi)


def pi_star_numeric(hp, cb, theta, grid=100_001):
    """Grid search plus local refinement of J over [eps1, 1 - eps2].

    Independent of the closed form; used as its oracle. Near theta = 1 J is
    almost flat, so the refinement solves dJ/dpi = 0 inside the grid bracket
    and only falls back to bounded Brent on J when there is no sign change.
    """
    theta_arr = np.atleast_1d(_check_theta(theta)).astype(np.float64)
    lo, hi = cb.eps1, 1.0 - cb.eps2
    # log-spaced near both ends, linear in between: the minimiser can sit at 1e-11
    ends = np.logspace(np.log10(lo), np.log10(0.5), grid // 4)
    pis = np.unique(np.concatenate([ends, np.linspace(lo, hi, grid // 2), 1.0 - (ends - lo + cb.eps2)]))
    pis = pis[(pis >= lo) & (pis <= hi)]
    # J is affine in theta on a fixed grid: J = theta * a(pi) + c(pi)
    slope = np.log1p(-pis) - np.log(pis)
    base = -np.log1p(-pis) - log_pdf(hp, pis)
    out = np.empty_like(theta_arr)
    for start in range(0, theta_arr.size, 64):
        chunk = theta_arr[start:start + 64]
        vals = chunk[:, None] * slope[None, :] + base[None, :]
        best = vals.argmin(axis=1)
        for k, (t, i) in enumerate(zip(chunk, best)):
            a, b = pis[max(i - 1, 0)], pis[min(i + 1, pis.size - 1)]
            ga, gb = float(objective_grad(hp, t, a)), float(objective_grad(hp, t, b))
            if ga < 0.0 < gb:
                out[start + k] = brentq(lambda p: float(objective_grad(hp, t, p)), a, b, xtol=1e-16, rtol=1e-15)
                continue
            res = minimize_scalar(lambda p: float(objective(hp, t, p)), bounds=(a, b),
                                  method="bounded", options={"xatol": 1e-14 * max(1.0, b)})
            cands = [(float(objective(hp, t, p)), p) for p in (res.x, pis[i], lo, hi)]
            out[start + k] = min(cands)[1]
    return out if np.ndim(theta) else float(out[0])


def reg_term(hp, cb, theta):
    """``log(theta (1 - pi*) / ((1 - theta) pi*))`` evaluated branch by branch."""
    theta = _check_theta(theta)
    if np.any((theta == 0) | (theta == 1)):
        raise ValueError("the regularisation term is infinite at theta = 0 or 1")
    t1, t2 = thresholds(hp, cb)
    e1, e2 = cb.eps1, cb.eps2
    low = np.log((theta * (1.0 - e1)) / ((1.0 - theta) * e1))
    high = np.log((theta * e2) / ((1.0 - theta) * (1.0 - e2)))
    with np.errstate(invalid="ignore", divide="ignore"):
        if isinstance(hp, Beta):
            a, b = hp.alpha, hp.beta
            mid = np.log(theta) + np.log(b - theta) - np.log1p(-theta) - np.log(theta + a - 1.0)
        else:
            mid = np.full_like(theta, -hp.log_gamma)
    out = np.where(theta <= t1, low, np.where(theta >= t2, high, mid))
    return out if out.ndim else float(out)


def log_pdf(hp, pi):
    pi = np.asarray(pi, dtype=np.float64)
    if isinstance(hp, Beta):
        a, b = hp.alpha, hp.beta
        log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        return log_norm + (a - 1.0) * np.log(pi) + (b - 1.0) * np.log1p(-pi)
    lg = hp.log_gamma
    # log c with c = (gamma - 1)/log(gamma), computed without cancellation
    log_c = math.log(-math.expm1(lg)) - math.log(-lg)
    return log_c - np.log(1.0 + np.expm1(lg) * (1.0 - pi))


def log_pdf_grad(hp, pi):
    """d/dpi of :func:`log_pdf`."""
    pi = np.asarray(pi, dtype=np.float64)
    if isinstance(hp, Beta):
        return (hp.alpha - 1.0) / pi - (hp.beta - 1.0) / (1.0 - pi)
    gm1 = math.expm1(hp.log_gamma)
    return gm1 / (1.0 + gm1 * (1.0 - pi))


def pdf(hp, pi):
    pi = np.asarray(pi, dtype=np.float64)
    if np.any((pi < 0) | (pi > 1)):
        raise ValueError("pi must lie in [0, 1]")
    out = np.exp(log_pdf(hp, pi))
    return out if out.ndim else float(out)


def flattening_pdf(gamma, pi):
    """Density for any gamma > 0 (including gamma >= 1, where it increases)."""
    pi = np.asarray(pi, dtype=np.float64)
    if gamma == 1.0:
        return np.ones_like(pi)
    c = (gamma - 1.0) / math.log(gamma)
    return c / (1.0 + (gamma - 1.0) * (1.0 - pi))


def curve_export(hp, cb, thetas):
    """Rows ``(theta, pi*, reg_term)`` for plotting the regularisation curve."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    return [(float(t), float(p), float(r))
            for t, p, r in zip(thetas, np.atleast_1d(pi_star(hp, cb, thetas)),
                               np.atleast_1d(reg_term(hp, cb, thetas)))]
