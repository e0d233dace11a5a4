"""Noise calibration, weight clipping, gradient perturbation, and a
moments accountant for the subsampled Gaussian mechanism.

The closed form sigma = 2 q sqrt(n_d log(1/delta)) / epsilon picks the
per-step noise scale for a target privacy level; the accountant runs
alongside training and converts the accumulated per-step log-moments
into a cumulative (epsilon, delta) spend via the standard tail bound.
The two views are reported side by side and are not reconciled into a
single claim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

from .autodiff import ParamStore

INF = float("inf")
LAMBDA_MAX = 32
_SIGMA_FLOOR = 1e-5  # quadrature below this is not supported


class IntegrationError(ArithmeticError):
    """The log-moment quadrature failed to converge to tolerance."""


def calibrate_sigma(epsilon: float, delta: float, q: float, n_d: int) -> float:
    """Noise scale for a target privacy level; infinity means no noise."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if n_d < 1:
        raise ValueError("n_d must be >= 1")
    if epsilon == INF:
        return 0.0
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive or infinite")
    return 2.0 * q * math.sqrt(n_d * math.log(1.0 / delta)) / epsilon


@dataclass(frozen=True)
class PrivacySpec:
    """Bundle of the knobs governing the private training path."""

    epsilon: float
    delta: float
    c_p: float
    q: float
    n_d: int
    sigma: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not self.c_p > 0.0:
            raise ValueError("c_p must be positive")
        if not 0.0 < self.q <= 1.0:
            raise ValueError("q must lie in (0, 1]")
        if self.n_d < 1:
            raise ValueError("n_d must be >= 1")
        if self.epsilon == INF:
            if self.sigma != 0.0:
                raise ValueError("epsilon=inf requires sigma=0")
        else:
            if not self.epsilon > 0.0:
                raise ValueError("epsilon must be positive or infinite")
            if self.sigma <= 0.0:
                raise ValueError("finite epsilon requires sigma > 0")
            want = calibrate_sigma(self.epsilon, self.delta, self.q, self.n_d)
            if abs(self.sigma - want) > 1e-9 * max(1.0, want):
                raise ValueError("sigma inconsistent with calibration formula")

    @classmethod
    def calibrated(cls, epsilon: float, delta: float, c_p: float, q: float,
                   n_d: int) -> "PrivacySpec":
        return cls(epsilon=epsilon, delta=delta, c_p=c_p, q=q, n_d=n_d,
                   sigma=calibrate_sigma(epsilon, delta, q, n_d))

    @property
    def private(self) -> bool:
        return self.sigma > 0.0

    def to_text(self) -> str:
        eps = "inf" if self.epsilon == INF else repr(self.epsilon)
        return (f"epsilon={eps}\ndelta={self.delta!r}\nc_p={self.c_p!r}\n"
                f"q={self.q!r}\nn_d={self.n_d}\nsigma={self.sigma!r}")

    @classmethod
    def from_text(cls, text: str) -> "PrivacySpec":
        fields = {}
        for line in text.strip().splitlines():
            key, _, val = line.partition("=")
            fields[key.strip()] = val.strip()
        return cls(epsilon=float(fields["epsilon"]), delta=float(fields["delta"]),
                   c_p=float(fields["c_p"]), q=float(fields["q"]),
                   n_d=int(fields["n_d"]), sigma=float(fields["sigma"]))


def clip_weights(store: ParamStore, c_p: float, names=None) -> None:
    """Project every parameter entry into [-c_p, c_p], in place."""
    if not c_p > 0.0:
        raise ValueError("c_p must be positive")
    for name in (store.names() if names is None else names):
        arr = store.params[name]
        np.clip(arr, -c_p, c_p, out=arr)


def perturb_gradient(store: ParamStore, sigma: float, c_p: float,
                     rng: np.random.Generator, names=None) -> None:
    """Add i.i.d. Gaussian noise of standard deviation sigma * c_p to every
    gradient entry, in place.  sigma = 0 leaves the slots untouched."""
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return
    std = sigma * c_p
    for name in (store.names() if names is None else names):
        g = store.grads[name]
        g += rng.normal(0.0, std, size=g.shape)


# -- log-moments of one noisy step -------------------------------------

def _log_density_terms(x, q: float, sigma: float):
    """Unnormalized log densities of the base Gaussian and the mixture."""
    s2 = 2.0 * sigma * sigma
    l0 = -(x * x) / s2
    l1 = -((x - 1.0) ** 2) / s2
    if q >= 1.0:
        lm = l1
    else:
        lm = np.logaddexp(math.log1p(-q) + l0, math.log(q) + l1)
    return l0, lm


def _log_integrand(x, q: float, sigma: float, lam: int, mixture_num: bool):
    logc = -math.log(sigma * math.sqrt(2.0 * math.pi))
    l0, lm = _log_density_terms(np.asarray(x, dtype=np.float64), q, sigma)
    if mixture_num:
        return logc + (lam + 1.0) * lm - lam * l0
    return logc + (lam + 1.0) * l0 - lam * lm


def _direction_log_moment(q: float, sigma: float, lam: int, mixture_num: bool) -> float:
    # The integrand is a sum of Gaussian bumps of width ~sigma centred at
    # integers in [-(lam+1), lam+2] (exponential tilting of the mixture
    # components), so the domain must scale with lam; the interior break
    # points keep the adaptive rule from stepping over narrow bumps.
    margin = 0.5 + 24.0 * sigma
    lo = -(lam + 1.0) - margin
    hi = (lam + 2.0) + margin
    centers = [float(c) for c in range(-(lam + 1), lam + 3)]

    xs = np.linspace(lo, hi, 4097)
    extra = np.asarray(centers)
    shift = float(np.max(np.concatenate([
        _log_integrand(xs, q, sigma, lam, mixture_num),
        _log_integrand(extra, q, sigma, lam, mixture_num),
    ])))
    if sigma < 0.25:
        # refine the shift near each bump so exp(g - shift) cannot overflow
        local = np.linspace(-8.0 * sigma, 8.0 * sigma, 257)
        for c in centers:
            vals = _log_integrand(c + local, q, sigma, lam, mixture_num)
            shift = max(shift, float(np.max(vals)))

    def f(x: float) -> float:
        v = _log_integrand(x, q, sigma, lam, mixture_num) - shift
        return math.exp(v) if v > -745.0 else 0.0

    result = quad(f, lo, hi, points=centers, limit=4000,
                  epsabs=1e-13, epsrel=1e-11, full_output=1)
    value, abserr = result[0], result[1]
    if value <= 0.0:
        raise IntegrationError("quadrature produced a non-positive moment")
    # QUADPACK may flag roundoff while still meeting our accuracy needs;
    # judge convergence by the achieved error bound, never clamp silently.
    if abserr > 1e-8 * value:
        detail = result[3] if len(result) > 3 else "error bound above tolerance"
        raise IntegrationError(f"quadrature failed: {detail} (abserr={abserr:.3e})")
    return shift + math.log(value)


def step_log_moment(q: float, sigma: float, lam: int) -> float:
    """Log-moment of one subsampled Gaussian step at integer order lam.

    Numerical integration of the privacy-loss moment of the mixture
    (1-q) N(0, sigma^2) + q N(1, sigma^2) against N(0, sigma^2), in both
    directions, keeping the worse one.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    if sigma < _SIGMA_FLOOR:
        raise IntegrationError(f"sigma below supported floor {_SIGMA_FLOOR}")
    if lam < 1:
        raise ValueError("lam must be >= 1")
    a = _direction_log_moment(q, sigma, lam, mixture_num=True)
    b = _direction_log_moment(q, sigma, lam, mixture_num=False)
    return max(a, b, 0.0)


@dataclass(frozen=True)
class AccountantState:
    """Accumulated log-moments of a fixed mechanism after some steps."""

    q: float
    sigma: float
    steps: int
    step_moments: np.ndarray  # alpha(lam) of a single step, lam = 1..lambda_max

    @classmethod
    def create(cls, q: float, sigma: float, lambda_max: int = LAMBDA_MAX) -> "AccountantState":
        moments = np.array([step_log_moment(q, sigma, lam)
                            for lam in range(1, lambda_max + 1)])
        return cls(q=q, sigma=sigma, steps=0, step_moments=moments)

    @property
    def lambda_max(self) -> int:
        return len(self.step_moments)

    @property
    def log_moments(self) -> np.ndarray:
        """alpha(lam) accumulated over all recorded steps."""
        return self.steps * self.step_moments


def accumulate(state: AccountantState, steps: int) -> AccountantState:
    """Record additional noisy steps; moments compose additively."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return replace(state, steps=state.steps + steps)


def spent_epsilon(state: AccountantState, delta: float) -> float:
    """Tail-bound conversion: min over lam of (alpha(lam) + log(1/delta)) / lam.

    With zero steps this floors at log(1/delta) / lambda_max, the
    smallest epsilon the finite moment range can certify.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if state.lambda_max < 1:
        raise ValueError("empty accountant state")
    lams = np.arange(1, state.lambda_max + 1)
    return float(np.min((state.log_moments + math.log(1.0 / delta)) / lams))
