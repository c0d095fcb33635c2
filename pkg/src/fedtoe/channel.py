"""Path-loss and shadowing uplink model.

Power quantities in dB use ``10*log10`` throughout. The channel gain of a
client at distance ``d`` is ``k_db - lambda*dB(d) + psi`` (dB) with
``psi ~ N(0, sigma_db**2)``; a transmission at rate ``r`` fails when the
resulting Shannon capacity does not exceed ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import InfeasibleError, ParameterError, PreconditionError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ChannelParams:
    k_db: float = -31.54
    lam: float = 3.0
    sigma_db: float = 3.65
    n0: float = 10 ** ((-174.0 - 30.0) / 10)  # W/Hz

    def __post_init__(self):
        if self.lam <= 0:
            raise ParameterError("path-loss exponent must be positive")
        if self.n0 <= 0:
            raise ParameterError("noise PSD must be positive")
        if self.sigma_db < 0:
            raise ParameterError("shadowing std must be non-negative")


@dataclass(frozen=True)
class LinkBudget:
    d: float
    p: float
    w: float
    r: float


@dataclass(frozen=True)
class OutageResult:
    rho: float
    q: float


def db(x):
    return 10.0 * np.log10(x)


def from_db(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


def dbm_per_hz_to_w(x_dbm: float) -> float:
    return 10 ** ((x_dbm - 30.0) / 10.0)


def q_function(x):
    """Gaussian tail probability ``P(Z > x)``."""
    out = 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(out) if np.ndim(out) == 0 else out


def q_inverse(p: float, tol: float = 1e-15, max_iter: int = 200) -> float:
    """Inverse of :func:`q_function` by Newton steps guarded with bisection."""
    if not (0.0 < p < 1.0):
        raise ParameterError(f"q_inverse needs p in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    # Q(-40) == 1 and Q(40) ~ 0 in double precision
    lo, hi = -40.0, 40.0
    x = 0.0
    for _ in range(max_iter):
        fx = q_function(x) - p
        if fx > 0:
            lo = x
        else:
            hi = x
        dens = math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        x_new = x + fx / dens if dens > 0 else 0.5 * (lo + hi)
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


def capacity(w, p, gain, n0):
    """Shannon capacity ``w*log2(1 + p*gain/(w*n0))`` in bit/s."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ParameterError("bandwidth must be positive")
    out = w * np.log1p(np.asarray(p) * np.asarray(gain) / (w * n0)) / LN2
    return float(out) if np.ndim(out) == 0 else out


def _check_link(link: LinkBudget):
    if not link.w > 0:
        raise PreconditionError("bandwidth must be positive, otherwise outage is certain")
    if not link.p > 0:
        raise PreconditionError("transmit power must be positive, otherwise outage is certain")
    if not math.isfinite(link.r):
        raise PreconditionError("transmission rate must be finite, otherwise outage is certain")
    if not link.d > 0:
        raise PreconditionError("distance must be positive")
    if link.r < 0:
        raise PreconditionError("transmission rate must be non-negative")


def outage_threshold_db(link: LinkBudget, params: ChannelParams) -> float:
    """Shadowing level (dB) at or below which the link is in outage."""
    _check_link(link)
    spectral = link.r / link.w
    # log10(2**s - 1) without overflow for large s
    if spectral > 50:
        noise_db = 10.0 * (spectral * math.log10(2.0) + math.log10(-math.expm1(-spectral * LN2)))
    elif spectral == 0:
        return -math.inf
    else:
        noise_db = 10.0 * math.log10(math.expm1(spectral * LN2))
    noise_db += float(db(link.w * params.n0))
    return noise_db - float(db(link.p)) - params.k_db + params.lam * float(db(link.d))


def outage_prob(link: LinkBudget, params: ChannelParams) -> OutageResult:
    """Closed-form outage probability ``1 - Q(rho/sigma)``."""
    rho = outage_threshold_db(link, params)
    if params.sigma_db == 0:
        return OutageResult(rho, 1.0 if rho > 0 else 0.0)
    # 1 - Q(x) == Q(-x), evaluated without cancellation
    return OutageResult(rho, q_function(-rho / params.sigma_db))


def median_gain_db(d, params: ChannelParams):
    return params.k_db - params.lam * db(np.asarray(d, dtype=float))


def sample_outage(link: LinkBudget, params: ChannelParams, rng: np.random.Generator, size=None):
    """Draw shadowing and report whether capacity falls to or below the rate."""
    _check_link(link)
    psi = rng.normal(0.0, params.sigma_db, size=size)
    gain = from_db(median_gain_db(link.d, params) + psi)
    cap = link.w * np.log1p(link.p * gain / (link.w * params.n0)) / LN2
    out = cap <= link.r
    return bool(out) if size is None else out


def theta(d, q_max: float, params: ChannelParams):
    """Effective channel gain that yields outage exactly ``q_max`` at rate ``R̄(W)``."""
    if not (0.0 < q_max < 1.0):
        raise ParameterError(f"q_max must lie in (0, 1), got {q_max}")
    shadow = params.sigma_db * q_inverse(1.0 - q_max)
    out = from_db(shadow + median_gain_db(d, params))
    return float(out) if np.ndim(out) == 0 else out


def rate_cap(w, theta_i, p_max, n0):
    """Largest rate that keeps the outage at its target: ``w*log2(1 + theta*p/(w*n0))``."""
    return capacity(w, p_max, theta_i, n0)


def quant_level_for_bandwidth(w, theta_i, p_max, n0, tau_max, m, mu):
    """Real-valued quantization level that exactly fills the delay budget."""
    return (tau_max * rate_cap(w, theta_i, p_max, n0) - mu) / m


def quant_level_slope(w, theta_i, p_max, n0, tau_max, m):
    """Analytic derivative of :func:`quant_level_for_bandwidth` in ``w``."""
    w = np.asarray(w, dtype=float)
    x = theta_i * p_max / n0
    return tau_max / m * (np.log1p(x / w) - x / (w + x)) / LN2


def quant_level_supremum(theta_i, p_max, n0, tau_max, m, mu) -> float:
    """Limit of the quantization level as bandwidth grows without bound."""
    return (tau_max * theta_i * p_max / (n0 * LN2) - mu) / m


def bandwidth_for_level(B, theta_i, p_max, n0, tau_max, m, mu,
                        tol: float = 1e-13, w_ceiling: float = 2e13) -> float:
    """Smallest bandwidth supporting ``B`` bits per parameter at the target outage.

    Bisection on the increasing map ``w -> quant_level_for_bandwidth(w)``.
    The returned point is the upper end of the final bracket, so the level
    it supports is never below ``B``.
    """
    out = bandwidths_for_levels(np.array([B], dtype=float), np.array([theta_i], dtype=float),
                                p_max, n0, tau_max, m, mu, tol=tol, w_ceiling=w_ceiling)
    return float(out[0])


def bandwidths_for_levels(B, theta, p_max, n0, tau_max, m, mu,
                          tol: float = 1e-13, w_ceiling: float = 2e13) -> np.ndarray:
    """Vectorized :func:`bandwidth_for_level` over matching arrays of levels and gains."""
    B = np.asarray(B, dtype=float)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), B.shape)
    if np.any(B < 1):
        raise ParameterError(f"quantization level must be >= 1, got {B.min()}")
    sup = quant_level_supremum(theta, p_max, n0, tau_max, m, mu)
    if np.any(B >= sup):
        i = int(np.argmax(B - sup))
        raise InfeasibleError(
            f"level {B.flat[i]} is unreachable at any bandwidth under the delay budget"
        )

    def level(w):
        return quant_level_for_bandwidth(w, theta, p_max, n0, tau_max, m, mu)

    lo = np.zeros(B.shape)
    hi = np.ones(B.shape)
    short = level(hi) < B
    while np.any(short):
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2.0 * hi, hi)
        if np.any(hi > w_ceiling):
            raise InfeasibleError(f"no bandwidth below {w_ceiling:g} Hz supports the level")
        short = level(hi) < B
    active = hi - lo > tol * hi
    while np.any(active):
        mid = 0.5 * (lo + hi)
        # stop where the bracket cannot shrink any further in floating point
        active &= (mid > lo) & (mid < hi)
        ok = level(mid) >= B
        hi = np.where(active & ok, mid, hi)
        lo = np.where(active & ~ok, mid, lo)
        active &= hi - lo > tol * hi
    return hi


def avg_uplink_delay(selected_links) -> float:
    """Expected per-round uplink delay including retransmissions.

    ``selected_links`` is an iterable of ``(payload_bits, rate, q)``.
    """
    links = list(selected_links)
    if not links:
        raise ParameterError("no links given")
    for _, r, q in links:
        if q >= 1.0:
            raise PreconditionError("outage probability must be < 1 for a finite delay")
        if r <= 0:
            raise PreconditionError("rate must be positive")
    slot = max(b / r for b, r, _ in links)
    all_fail = math.prod(q for _, _, q in links)
    return slot / (1.0 - all_fail)


def simulate_uplink_delays(selected_links, episodes: int, rng: np.random.Generator,
                           cap: int = 10_000) -> np.ndarray:
    """Per-episode delay from explicit retransmission episodes.

    Each attempt draws independent outcomes for every link; an episode ends
    at the first attempt in which at least one link succeeds.
    """
    links = list(selected_links)
    q = np.array([lk[2] for lk in links], dtype=float)
    slot = max(b / r for b, r, _ in links)
    attempts = np.zeros(episodes, dtype=np.int64)
    pending = np.arange(episodes)
    for k in range(1, cap + 1):
        fails = rng.random((pending.size, q.size)) < q
        done = ~fails.all(axis=1)
        attempts[pending[done]] = k
        pending = pending[~done]
        if pending.size == 0:
            break
    if pending.size:
        raise PreconditionError("retransmission cap reached in delay simulation")
    return attempts * slot
