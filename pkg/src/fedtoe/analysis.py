"""Participation statistics under outage and convergence-bound evaluation.

K clients are drawn with replacement from ``p`` each round and each draw
independently survives its uplink with probability ``1 - q_i``. Conditioned
on at least one survivor, the aggregation weight of client ``i`` averages to
``beta_bar[i]``; ``alpha_bar[i]`` is the same weight further divided by the
number of survivors, and ``1/k_bar = sum(alpha_bar)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PreconditionError

ENUM_LIMIT = 10**7


@dataclass(frozen=True)
class ParticipationStats:
    beta_bar: np.ndarray
    alpha_bar: np.ndarray
    k_bar: float
    # standard errors, set by Monte Carlo estimates only
    beta_se: np.ndarray | None = None
    alpha_se: np.ndarray | None = None
    inv_k_se: float | None = None
    trials: int | None = None


@dataclass
class BoundInputs:
    L: float
    sigma_sq: float
    b: int
    D_sq: np.ndarray
    J_sq: np.ndarray  # rounds x clients
    p: np.ndarray
    q: np.ndarray
    K: int
    E: int
    M: int
    F0_minus_Flow: float
    gamma: float | None = None

    def __post_init__(self):
        self.D_sq = np.asarray(self.D_sq, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.J_sq = np.atleast_2d(np.asarray(self.J_sq, dtype=float))
        n = self.p.size
        if self.L <= 0:
            raise ParameterError("smoothness constant must be positive")
        if self.sigma_sq < 0 or self.F0_minus_Flow < 0:
            raise ParameterError("variance and initial gap must be non-negative")
        if min(self.b, self.K, self.E, self.M) < 1:
            raise ParameterError("b, K, E and M must be positive integers")
        if self.D_sq.shape != (n,) or self.q.shape != (n,):
            raise ParameterError("D_sq and q must match p in length")
        if self.J_sq.shape != (self.M, n):
            raise ParameterError(f"J_sq must be {self.M} x {n}, got {self.J_sq.shape}")
        if np.any(self.D_sq < 0) or np.any(self.J_sq < 0):
            raise ParameterError("D_sq and J_sq must be non-negative")
        _check_probs(self.p, self.q)

    @property
    def T(self) -> int:
        return self.M * self.E


@dataclass
class BoundTerms:
    """Right-hand side of the convergence bound, term by term."""

    optimization: float
    sgd_variance: float
    qe: float
    partial_participation: float
    data_variance: float
    outage_bias: float
    outage_variance: float
    k_bar: float
    chi_square: float
    notes: list[str] = field(default_factory=list)

    NAMES = ("optimization", "sgd_variance", "qe", "partial_participation",
             "data_variance", "outage_bias", "outage_variance")

    @property
    def total(self) -> float:
        return float(sum(getattr(self, n) for n in self.NAMES))

    def as_dict(self) -> dict:
        out = {n: getattr(self, n) for n in self.NAMES}
        out["total"] = self.total
        return out


def _check_probs(p, q=None):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ParameterError("p must be a non-negative vector summing to 1")
    if q is not None:
        q = np.asarray(q, dtype=float)
        if q.shape != p.shape:
            raise ParameterError("q must match p in length")
        if np.any(q < 0) or np.any(q >= 1):
            raise ParameterError("outage probabilities must lie in [0, 1)")


def is_uniform(q, atol: float = 1e-12) -> bool:
    """Equal outage probabilities up to round-off (allocations pin q to within ~1e-15)."""
    q = np.asarray(q, dtype=float)
    return bool(np.all(np.abs(q - q.flat[0]) <= atol))


def enumerate_stats(p, q, K: int) -> ParticipationStats:
    """Exact statistics by summing over ordered selections and survivor patterns."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_probs(p, q)
    n = p.size
    if K < 1:
        raise ParameterError("K must be >= 1")
    if n**K * 2**K > ENUM_LIMIT:
        raise ParameterError(
            f"enumeration of {n}^{K} selections x 2^{K} patterns exceeds {ENUM_LIMIT}")
    if not np.any(q):
        # every selected client survives: the sums collapse to p, p/K and K
        return ParticipationStats(p.copy(), p / K, float(K))
    patterns = np.array(list(itertools.product((0, 1), repeat=K))[1:], dtype=float)
    counts = patterns.sum(axis=1)
    beta = np.zeros(n)
    alpha = np.zeros(n)
    chunk = max(1, ENUM_LIMIT // (50 * patterns.shape[0]))
    selections = itertools.product(range(n), repeat=K)
    while True:
        sel = np.array(list(itertools.islice(selections, chunk)), dtype=np.int64)
        if sel.size == 0:
            break
        qs = q[sel]
        w_sel = np.prod(p[sel], axis=1) / (1.0 - np.prod(qs, axis=1))
        # probability of each survivor pattern given the selection
        w_pat = np.prod(np.where(patterns[None, :, :] == 1, 1.0 - qs[:, None, :],
                                 qs[:, None, :]), axis=2)
        weight = w_sel[:, None] * w_pat
        for k in range(K):
            contrib = weight * patterns[None, :, k]
            np.add.at(beta, sel[:, k], (contrib / counts).sum(axis=1))
            np.add.at(alpha, sel[:, k], (contrib / counts**2).sum(axis=1))
    return ParticipationStats(beta, alpha, 1.0 / alpha.sum())


_PATTERN_LIMIT = 1 << 20


def _collapse_patterns(sel, ok, n):
    """Distinct (selection, outcome) rows and their multiplicities."""
    K = sel.shape[1]
    base = 2 * n
    code = np.zeros(sel.shape[0], dtype=np.int64)
    for k in range(K - 1, -1, -1):
        code = code * base + 2 * sel[:, k] + ok[:, k]
    counts = np.bincount(code, minlength=base**K)
    keys = np.flatnonzero(counts)
    digits = np.empty((keys.size, K), dtype=np.int64)
    rest = keys.copy()
    for k in range(K):
        digits[:, k] = rest % base
        rest //= base
    return digits // 2, (digits % 2).astype(bool), counts[keys].astype(float)


def mc_stats(p, q, K: int, trials: int, rng: np.random.Generator,
             chunk: int = 1_000_000) -> ParticipationStats:
    """Monte Carlo estimates with standard errors.

    A round in which every selected client fails redraws the outage
    indicators for the same selection, as a retransmission would; the
    selection itself is never conditioned on success.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_probs(p, q)
    if trials < 10_000:
        raise ParameterError("use at least 10^4 trials")
    n = p.size
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    s_b = np.zeros(n)
    s_b2 = np.zeros(n)
    s_a = np.zeros(n)
    s_a2 = np.zeros(n)
    s_inv = s_inv2 = 0.0
    kept = 0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        done += size
        sel = np.searchsorted(cdf, rng.random((size, K)), side="right")
        sel = np.minimum(sel, n - 1)
        ok = rng.random((size, K)) >= q[sel]
        pending = np.flatnonzero(~ok.any(axis=1))
        while pending.size:
            redraw = rng.random((pending.size, K)) >= q[sel[pending]]
            ok[pending] = redraw
            pending = pending[~redraw.any(axis=1)]
        if (2 * n) ** K <= _PATTERN_LIMIT:
            sel, ok, mult = _collapse_patterns(sel, ok, n)
        else:
            mult = np.ones(sel.shape[0])
        inv = 1.0 / ok.sum(axis=1)
        rows = np.arange(sel.shape[0])
        cnt = np.zeros((sel.shape[0], n))
        for k in range(K):
            # one entry per row for a fixed k, so plain fancy indexing accumulates
            cnt[rows, sel[:, k]] += ok[:, k]
        xb = cnt * inv[:, None]
        xa = xb * inv[:, None]
        s_b += mult @ xb
        s_b2 += mult @ (xb * xb)
        s_a += mult @ xa
        s_a2 += mult @ (xa * xa)
        s_inv += mult @ inv
        s_inv2 += mult @ (inv * inv)
        kept += size

    def mean_se(s, s2):
        mean = s / kept
        var = np.maximum(s2 / kept - mean**2, 0.0) * kept / (kept - 1)
        return mean, np.sqrt(var / kept)

    beta, beta_se = mean_se(s_b, s_b2)
    alpha, alpha_se = mean_se(s_a, s_a2)
    inv_k, inv_se = mean_se(np.array([s_inv]), np.array([s_inv2]))
    return ParticipationStats(beta, alpha, float(1.0 / inv_k[0]), beta_se, alpha_se,
                              float(inv_se[0]), kept)


def kbar_uniform(q: float, K: int) -> float:
    """Effective number of active clients when every client has outage ``q``."""
    if not (0.0 <= q < 1.0):
        raise ParameterError(f"q must lie in [0, 1), got {q}")
    if K < 1:
        raise ParameterError("K must be >= 1")
    if q == 0.0:
        return float(K)
    denom = sum(math.comb(K, v) * (1 - q) ** v * q ** (K - v) / v for v in range(1, K + 1))
    return (1.0 - q**K) / denom


def uniform_stats(p, q: float, K: int) -> ParticipationStats:
    """Closed-form statistics for a common outage probability."""
    p = np.asarray(p, dtype=float)
    _check_probs(p)
    k = kbar_uniform(q, K)
    return ParticipationStats(p.copy(), p / k, k)


def chi_square_divergence(beta_bar, p) -> float:
    beta_bar = np.asarray(beta_bar, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ParameterError("chi-square divergence needs every p_i > 0")
    return float(np.sum((beta_bar - p) ** 2 / p))


def schedule_hyperparams(T: float, k_bar: float, L: float) -> tuple[float, int]:
    """Step size and largest admissible local-step count for ``T`` total SGD steps."""
    _check_horizon(T, k_bar)
    if L <= 0:
        raise ParameterError("L must be positive")
    gamma = math.sqrt(k_bar) / (8.0 * L * math.sqrt(T))
    # the small slack absorbs round-off when the cap is an exact integer
    e_max = int(math.floor(T**0.25 / k_bar**0.75 + 1e-12))
    return gamma, max(e_max, 1)


def _check_horizon(T, k_bar):
    need = max(k_bar**3, 1.0 / k_bar)
    if T < need:
        raise PreconditionError(
            f"T = {T} is below max(k_bar^3, 1/k_bar) = {need:.6g}; the bound does not apply")


def _check_schedule(inputs: BoundInputs, k_bar: float):
    T = inputs.T
    _check_horizon(T, k_bar)
    cap = T**0.25 / k_bar**0.75
    if inputs.E > cap * (1 + 1e-12):
        raise PreconditionError(f"E = {inputs.E} exceeds T^(1/4)/k_bar^(3/4) = {cap:.6g}")
    if inputs.gamma is not None:
        want = math.sqrt(k_bar) / (8.0 * inputs.L * math.sqrt(T))
        if not math.isclose(inputs.gamma, want, rel_tol=1e-9):
            raise PreconditionError(
                f"gamma = {inputs.gamma:.6g} differs from k_bar^(1/2)/(8 L T^(1/2)) = {want:.6g}")


def participation(inputs: BoundInputs) -> ParticipationStats:
    """Statistics for the inputs: closed form for uniform q, enumeration otherwise."""
    if is_uniform(inputs.q):
        return uniform_stats(inputs.p, float(inputs.q[0]), inputs.K)
    return enumerate_stats(inputs.p, inputs.q, inputs.K)


def _common_terms(inputs: BoundInputs, k: float):
    T = inputs.T
    tk = T * k
    opt = 496.0 * inputs.L * inputs.F0_minus_Flow / (11.0 * math.sqrt(tk))
    var = (39.0 / (88.0 * math.sqrt(tk)) + 1.0 / (88.0 * tk**0.75)) * inputs.sigma_sq / inputs.b
    return opt, var


def theorem1_rhs(inputs: BoundInputs, stats: ParticipationStats | None = None) -> BoundTerms:
    """Evaluate every term of the general convergence bound.

    ``stats`` defaults to :func:`participation`; pass Monte Carlo estimates
    when exact enumeration is out of reach.
    """
    stats = participation(inputs) if stats is None else stats
    k = stats.k_bar
    _check_schedule(inputs, k)
    T = inputs.T
    tk = T * k
    p, q, D = inputs.p, inputs.q, inputs.D_sq
    opt, var = _common_terms(inputs, k)
    qe = 31.0 * math.sqrt(k) / (88.0 * T**1.5) * float(np.sum(inputs.J_sq @ stats.alpha_bar))
    part = 31.0 / (22.0 * tk**0.25) * float(stats.alpha_bar @ D)
    data = (4.0 / (11.0 * math.sqrt(tk)) + 1.0 / (22.0 * tk**0.75)) * float(stats.beta_bar @ D)
    chi = chi_square_divergence(stats.beta_bar, p) if np.all(p > 0) else float(
        np.sum(np.divide((stats.beta_bar - p) ** 2, p, out=np.zeros_like(p), where=p > 0)))
    bias = 62.0 / 11.0 * chi * float(p @ D)
    # q_i - q_bar written as a weighted mean of pairwise gaps: exactly 0 for uniform q
    spread = (q[:, None] - q[None, :]) @ p / p.sum()
    q_max = float(q.max())
    K = inputs.K
    mix = sum(q_max ** (K - v) * math.comb(K, v) for v in range(2, K + 1)) / (1.0 - q_max**K)
    to_var = 31.0 / (22.0 * tk**0.25) * mix * float(np.sum(p * spread**2 * D))
    notes = []
    if not is_uniform(q):
        notes.append("non-uniform outage: bias terms are active")
    return BoundTerms(opt, var, qe, part, data, bias, to_var, k, chi, notes)


def corollary1_rhs(inputs: BoundInputs, per_round_qe=None) -> BoundTerms:
    """Convergence bound under a common outage probability.

    ``per_round_qe`` optionally replaces ``sum_i p_i J_ir^2`` by a per-round
    average over the selected set, ``(1/K) sum_{i in S_r} J_ir^2`` (one entry
    per round), for levels that change from round to round.
    """
    if not is_uniform(inputs.q):
        raise ParameterError("the uniform-outage bound needs a common q")
    k = kbar_uniform(float(inputs.q[0]), inputs.K)
    _check_schedule(inputs, k)
    T = inputs.T
    tk = T * k
    opt, var = _common_terms(inputs, k)
    if per_round_qe is None:
        qe_sum = float(np.sum(inputs.J_sq @ inputs.p))
    else:
        per_round_qe = np.asarray(per_round_qe, dtype=float)
        if per_round_qe.shape != (inputs.M,):
            raise ParameterError(f"per_round_qe must have {inputs.M} entries")
        qe_sum = float(per_round_qe.sum())
    qe = 31.0 / (88.0 * T**1.5 * math.sqrt(k)) * qe_sum
    pd = float(inputs.p @ inputs.D_sq)
    data = (4.0 / (11.0 * math.sqrt(tk)) + 1.0 / (22.0 * tk**0.75)) * pd
    part = 31.0 / (22.0 * T**0.25 * k**1.25) * pd
    return BoundTerms(opt, var, qe, part, data, 0.0, 0.0, k, 0.0)
