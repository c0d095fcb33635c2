"""Joint bandwidth and quantization-level allocation.

All clients transmit at full power and at the rate that pins their outage
probability to ``q_max``; what remains is to split the uplink bandwidth.
The relaxed problem minimizes ``sum_i weight_i / (2**B_i(w_i) - 1)**2`` over
``{sum(w) <= w_total, w_i >= Wbar_i(1)}``, which is convex. It is solved by
projected gradient with Armijo backtracking; integer levels are then
obtained by the floor-and-retighten loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .errors import InfeasibleError, ParameterError
from .quantizer import bit_cost

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_ITERS = 500


@dataclass(frozen=True)
class ClientSpec:
    id: int
    d: float
    weight: float = 1.0


@dataclass
class AllocProblem:
    clients: list[ClientSpec]
    w_total: float
    p_max: float
    tau_max: float
    q_max: float
    m: int
    mu: int
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)
    mode: str = "offline"

    def __post_init__(self):
        if self.w_total <= 0:
            raise ParameterError("w_total must be positive")
        if not (0 < self.q_max <= 0.5):
            raise ParameterError("q_max must lie in (0, 0.5]")
        if self.tau_max <= 0:
            raise ParameterError("tau_max must be positive")
        if self.p_max <= 0:
            raise ParameterError("p_max must be positive")
        if not self.clients:
            raise ParameterError("no clients")
        if self.mode not in ("offline", "online"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        self._cache = {}

    @property
    def n(self) -> int:
        return len(self.clients)

    @property
    def distances(self) -> np.ndarray:
        return np.array([c.d for c in self.clients], dtype=float)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clients], dtype=float)

    @property
    def thetas(self) -> np.ndarray:
        if "theta" not in self._cache:
            self._cache["theta"] = np.atleast_1d(ch.theta(self.distances, self.q_max, self.channel))
        return self._cache["theta"]

    @property
    def lower_bounds(self) -> np.ndarray:
        """Bandwidth each client needs for one bit per parameter."""
        if "lower" not in self._cache:
            self._cache["lower"] = self.bandwidths_for(np.ones(self.n))
        return self._cache["lower"]

    def levels(self, w) -> np.ndarray:
        return ch.quant_level_for_bandwidth(
            np.asarray(w, dtype=float), self.thetas, self.p_max, self.channel.n0,
            self.tau_max, self.m, self.mu)

    def rates(self, w) -> np.ndarray:
        return ch.rate_cap(np.asarray(w, dtype=float), self.thetas, self.p_max, self.channel.n0)

    def bandwidth_for(self, i: int, B) -> float:
        try:
            return ch.bandwidth_for_level(B, self.thetas[i], self.p_max, self.channel.n0,
                                          self.tau_max, self.m, self.mu,
                                          w_ceiling=1e6 * self.w_total)
        except InfeasibleError as exc:
            raise InfeasibleError(
                f"delay constraint too tight: client {self.clients[i].id} cannot carry "
                f"{B} bit(s) per parameter ({exc})") from exc

    def bandwidths_for(self, b) -> np.ndarray:
        """Minimum bandwidth per client for the levels ``b`` (one per client)."""
        b = np.asarray(b, dtype=float)
        try:
            return ch.bandwidths_for_levels(b, self.thetas, self.p_max, self.channel.n0,
                                            self.tau_max, self.m, self.mu,
                                            w_ceiling=1e6 * self.w_total)
        except InfeasibleError:
            # locate the offending client for the message
            for i, bi in enumerate(b):
                self.bandwidth_for(i, bi)
            raise

    def subproblem(self, entries, weights=None) -> "AllocProblem":
        """Problem restricted to ``entries`` (indices, duplicates allowed)."""
        clients = []
        for k, i in enumerate(entries):
            c = self.clients[i]
            wt = c.weight if weights is None else weights[k]
            clients.append(ClientSpec(c.id, c.d, wt))
        return AllocProblem(clients, self.w_total, self.p_max, self.tau_max, self.q_max,
                            self.m, self.mu, self.channel, "online")


@dataclass
class AllocationSolution:
    ids: list[int]
    d: np.ndarray
    w: np.ndarray
    p: np.ndarray
    b: np.ndarray  # integer levels
    r: np.ndarray
    q: np.ndarray
    objective: float
    iterations: int
    relaxed_w: np.ndarray | None = None
    relaxed_objective: float | None = None
    relaxed_residual: float | None = None
    history: list[float] = field(default_factory=list)

    @property
    def bandwidth_used(self) -> float:
        return float(np.sum(self.w))

    def payload_bits(self, m: int, mu: int) -> np.ndarray:
        return np.array([bit_cost(m, int(b), mu) for b in self.b])


def _phi(levels) -> np.ndarray:
    with np.errstate(over="ignore"):  # huge levels contribute exactly zero
        return 1.0 / np.expm1(np.asarray(levels, dtype=float) * ch.LN2) ** 2


def _check_domain(w, problem: AllocProblem):
    w = np.asarray(w, dtype=float)
    if w.shape != (problem.n,):
        raise ParameterError(f"expected {problem.n} bandwidths, got shape {w.shape}")
    lv = problem.levels(w)
    if np.any(lv < 1.0 - 1e-9):
        i = int(np.argmin(lv))
        raise ParameterError(
            f"bandwidth {w[i]:.6g} Hz of client {problem.clients[i].id} supports only "
            f"{lv[i]:.4g} bit(s) per parameter")
    return w, lv


def objective(w, problem: AllocProblem) -> float:
    _, lv = _check_domain(w, problem)
    return float(np.sum(problem.weights * _phi(lv)))


def objective_terms(w, problem: AllocProblem) -> np.ndarray:
    _, lv = _check_domain(w, problem)
    return problem.weights * _phi(lv)


def objective_gradient(w, problem: AllocProblem) -> np.ndarray:
    w, lv = _check_domain(w, problem)
    e = np.expm1(lv * ch.LN2)  # 2**B - 1
    slope = ch.quant_level_slope(w, problem.thetas, problem.p_max, problem.channel.n0,
                                 problem.tau_max, problem.m)
    with np.errstate(over="ignore"):
        return -2.0 * problem.weights * (1.0 + 1.0 / e) * ch.LN2 * slope / e**2


def _trim_to_budget(w, w_total, floor=None) -> np.ndarray:
    """Remove floating-point overshoot of ``sum(w)`` above ``w_total``.

    The overshoot (a few ulps) is taken from the entry with the most room
    above ``floor``.
    """
    room = w if floor is None else w - floor
    j = int(np.argmax(room))
    while w.sum() > w_total:
        w[j] = np.nextafter(w[j] - (w.sum() - w_total), -np.inf)
    return w


def project_feasible(w, problem: AllocProblem) -> np.ndarray:
    """Euclidean projection onto ``{sum(w) <= w_total, w >= lower}``."""
    lower = problem.lower_bounds
    budget = problem.w_total - lower.sum()
    if budget < 0:
        raise InfeasibleError(
            f"minimum bandwidth demand exceeds the budget by {-budget:.6g} Hz",
            shortfall=-budget)
    y = np.asarray(w, dtype=float) - lower
    clipped = np.maximum(y, 0.0)
    if clipped.sum() <= budget:
        return clipped + lower
    # project y onto the simplex {x >= 0, sum x = budget}
    order = np.argsort(-y, kind="stable")
    ys = y[order]
    cums = np.cumsum(ys) - budget
    idx = np.arange(1, ys.size + 1)
    active = ys - cums / idx > 0
    k = int(np.nonzero(active)[0][-1]) + 1
    shift = cums[k - 1] / k
    x = np.maximum(y - shift, 0.0)
    return _trim_to_budget(x + lower, problem.w_total, lower)


def initial_point(problem: AllocProblem) -> np.ndarray:
    w0 = np.maximum(problem.lower_bounds, problem.w_total / problem.n)
    return project_feasible(w0, problem)


def projected_residual(w, problem: AllocProblem) -> float:
    """Scale-free stationarity measure, zero exactly at the relaxed optimum.

    Takes a gradient step whose largest component has length ``w_total`` and
    reports the infinity-norm displacement after projection, relative to
    ``w_total``.
    """
    g = objective_gradient(w, problem)
    gmax = np.max(np.abs(g))
    if gmax == 0:
        return 0.0
    step = problem.w_total / gmax
    moved = project_feasible(w - step * g, problem)
    return float(np.max(np.abs(moved - w)) / problem.w_total)


def _armijo_step(w, f, g, problem, t0):
    """One projected-gradient step with halving backtracking."""
    t = t0
    for _ in range(200):
        cand = project_feasible(w - t * g, problem)
        fc = objective(cand, problem)
        if fc <= f + ARMIJO * float(g @ (cand - w)):
            return cand, fc, t
        t *= 0.5
    return w, f, 0.0


def _initial_step(g, problem) -> float:
    return 0.5 * problem.w_total / max(np.max(np.abs(g)), 1e-300)


def solve_relaxed(problem: AllocProblem, max_iters: int = 5000, tol: float = 1e-10,
                  w0=None):
    """Relaxed (real-valued level) optimum by spectral projected gradient.

    Returns ``(w, objective, iterations, residual, history)``.
    """
    w = initial_point(problem) if w0 is None else project_feasible(w0, problem)
    f = objective(w, problem)
    g = objective_gradient(w, problem)
    t = _initial_step(g, problem)
    history = [f]
    it = 0
    calm = 0
    for it in range(1, max_iters + 1):
        w_new, f_new, t_used = _armijo_step(w, f, g, problem, t)
        if t_used == 0.0:
            break
        g_new = objective_gradient(w_new, problem)
        s, yv = w_new - w, g_new - g
        sy = float(s @ yv)
        # Barzilai-Borwein trial step for the next backtracking search
        t = float(s @ s) / sy if sy > 0 else _initial_step(g_new, problem)
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        w, f, g = w_new, f_new, g_new
        history.append(f)
        # BB steps can stall for a few iterations before the next big move;
        # the residual itself bottoms out near 1e-8 from rounding noise
        calm = calm + 1 if rel < tol else 0
        if calm >= 25 or (calm and projected_residual(w, problem) < 1e-10):
            break
    return w, f, it, projected_residual(w, problem), history


def _floor_levels(problem: AllocProblem, w) -> np.ndarray:
    return np.floor(problem.levels(w)).astype(np.int64)


def _retighten(problem: AllocProblem, b, w_cap=None) -> np.ndarray:
    w = problem.bandwidths_for(b)
    if w_cap is not None:
        # bisection tolerance may leave the root a hair above the capped point
        w = np.minimum(w, w_cap)
    return w


def _integer_objective(problem, b) -> float:
    return float(np.sum(problem.weights * _phi(b)))


def _finalize(problem: AllocProblem, w, b, obj, iters, relaxed, history):
    r = problem.rates(w)
    q = np.array([
        ch.outage_prob(ch.LinkBudget(c.d, problem.p_max, wi, ri), problem.channel).q
        for c, wi, ri in zip(problem.clients, w, r)
    ])
    rw, rf, _, rres, _ = relaxed
    return AllocationSolution(
        ids=[c.id for c in problem.clients], d=problem.distances, w=np.asarray(w, float),
        p=np.full(problem.n, problem.p_max), b=np.asarray(b, dtype=np.int64), r=r, q=q,
        objective=obj, iterations=iters, relaxed_w=rw, relaxed_objective=rf,
        relaxed_residual=rres, history=history)


def _slack_step(w, g, problem) -> float:
    """Step length that spends exactly the unassigned bandwidth along ``-g``."""
    slack = problem.w_total - float(np.sum(w))
    push = float(np.sum(-g))
    if slack <= 0 or push <= 0:
        return _initial_step(g, problem)
    return min(slack / push, _initial_step(g, problem))


def _round_from(problem: AllocProblem, w, max_iters: int, tol: float):
    """Run the floor-and-retighten loop from the feasible point ``w``.

    Returns the best ``(objective, levels, bandwidths)`` seen, including the
    floored start, or ``None`` when no visited point carries a bit per
    parameter everywhere, together with the iteration count and history.
    """
    best = None
    b = _floor_levels(problem, w)
    if np.all(b >= 1):
        best = (_integer_objective(problem, b), b, _retighten(problem, b, w))
    b = f_int = None
    history = []
    iters = 0
    for iters in range(1, max_iters + 1):
        f = objective(w, problem)
        g = objective_gradient(w, problem)
        t0 = _initial_step(g, problem) if b is None else _slack_step(w, g, problem)
        w_step, _, t_used = _armijo_step(w, f, g, problem, t0)
        if t_used == 0.0:
            break
        b_new = _floor_levels(problem, w_step)
        if np.any(b_new < 1):
            break
        if b is not None and np.array_equal(b_new, b):
            break
        f_new = _integer_objective(problem, b_new)
        if f_int is not None and f_new > f_int:
            break
        change = math.inf if f_int is None else (f_int - f_new) / max(f_int, 1e-300)
        b, f_int = b_new, f_new
        w = _retighten(problem, b, w_step)
        history.append(f_int)
        if change < tol:
            break
    if f_int is not None and (best is None or f_int <= best[0]):
        best = (f_int, b, w)
    return best, iters, history


def _envelope(w, order) -> np.ndarray:
    """Running maximum of ``w`` along ``order`` (last axis), mapped back in place."""
    out = np.empty_like(w)
    out[..., order] = np.maximum.accumulate(w[..., order], axis=-1)
    return out


def _distance_order(problem: AllocProblem) -> np.ndarray:
    return np.lexsort((np.arange(problem.n), problem.distances))


def _spend_leftover(problem: AllocProblem, b, w, monotone: bool = True):
    """Greedily buy one-level upgrades with unassigned bandwidth.

    Each pass picks the upgrade with the largest objective decrease per Hz
    among those that still fit in the budget. Clients that are exact copies
    of each other move as one. With ``monotone`` the price of an upgrade is
    the growth of the distance-monotone envelope of ``w``, so that envelope
    stays affordable.
    """
    b = np.asarray(b, dtype=np.int64).copy()
    w = np.asarray(w, dtype=float).copy()
    order = _distance_order(problem)
    sup = ch.quant_level_supremum(problem.thetas, problem.p_max, problem.channel.n0,
                                  problem.tau_max, problem.m, problem.mu)
    wts = problem.weights

    def upgraded(idx):
        nxt = b[idx] + 1.0
        reach = nxt < sup[idx]
        need = np.full(idx.size, np.inf)
        if np.any(reach):
            need[reach] = ch.bandwidths_for_levels(
                nxt[reach], problem.thetas[idx][reach], problem.p_max, problem.channel.n0,
                problem.tau_max, problem.m, problem.mu, w_ceiling=1e6 * problem.w_total)
        return np.maximum(need, w[idx])

    target = upgraded(np.arange(problem.n))
    while True:
        finite = np.isfinite(target)
        # identical clients are upgraded together so symmetric problems stay symmetric
        twins = ((problem.thetas[:, None] == problem.thetas[None, :])
                 & (wts[:, None] == wts[None, :])
                 & (b[:, None] == b[None, :]) & (w[:, None] == w[None, :]))
        raised = np.where(twins, np.where(finite, target, 0.0)[None, :], w[None, :])
        if monotone:
            base = _envelope(w, order).sum()
            cost = _envelope(raised, order).sum(axis=1) - base
            slack = problem.w_total - base
        else:
            cost = raised.sum(axis=1) - w.sum()
            slack = problem.w_total - w.sum()
        gain = twins.sum(axis=1) * wts * (_phi(b) - _phi(b + 1))
        ok = finite & (cost <= slack) & (gain > 0)
        if not np.any(ok):
            break
        ratio = np.where(ok, gain / np.maximum(cost, 1e-300), -np.inf)
        group = twins[int(np.argmax(ratio))]
        w[group] = target[group]
        b[group] += 1
        target[group] = upgraded(np.nonzero(group)[0])
    return b, w


def _monotone_fill(problem: AllocProblem, w) -> np.ndarray:
    """Hand out the unused band without breaking distance monotonicity.

    Bandwidths are first raised to their running maximum in distance order
    (when affordable) and the remainder is split equally. Extra bandwidth
    beyond ``Wbar_i(b_i)`` leaves the level and the outage probability
    unchanged and only shortens the delay.
    """
    filled = _envelope(w, _distance_order(problem))
    if filled.sum() > problem.w_total:
        filled = np.asarray(w, dtype=float).copy()
    rest = problem.w_total - filled.sum()
    if rest > 0:
        filled = _trim_to_budget(filled + rest / problem.n, problem.w_total)
    return filled


def solve_offline(problem: AllocProblem, max_iters: int = MAX_ITERS, tol: float = 1e-10,
                  relaxed_iters: int = 5000, greedy: bool = True,
                  fill: bool = True) -> AllocationSolution:
    """Floor-and-retighten projected gradient over integer quantization levels.

    Each iteration takes one backtracking gradient step on the relaxed
    objective, floors the supported levels and shrinks every bandwidth back
    to the minimum that carries the floored level. The first step starts
    from an unrounded feasible point. Later steps start from a retightened
    point that sits exactly on its level thresholds, so their trial length
    is capped at the one spending the freed bandwidth: any larger step makes
    the projection shave every client below its threshold.

    The loop stops at a fixpoint of the integer levels, when the rounded
    objective would increase or barely changes, or after ``max_iters``. It
    is run from the symmetric initial point and from the relaxed optimum,
    and with ``greedy`` the bandwidth it leaves unused then buys level
    upgrades; the best rounded point seen (floored starts included) is
    returned. With ``fill`` the remaining band is handed out so that
    bandwidth never decreases with distance, when the budget allows.
    """
    relaxed = solve_relaxed(problem, max_iters=relaxed_iters, tol=tol)
    best, iters, history = None, 0, []
    for start in (initial_point(problem), relaxed[0]):
        cand, it, hist = _round_from(problem, start, max_iters, tol)
        iters += it
        if cand is None:
            continue
        b, w = cand[1], cand[2]
        if greedy:
            affordable = _envelope(w, _distance_order(problem)).sum() <= problem.w_total
            b, w = _spend_leftover(problem, b, w, fill and affordable)
        f_int = _integer_objective(problem, b)
        if f_int < cand[0]:
            hist = hist + [f_int]
        if best is None or f_int < best[0]:
            best, history = (f_int, b, w), hist
    if best is None:
        raise InfeasibleError("delay constraint too tight: a client cannot carry 1 bit")
    f_int, b, w = best
    if fill:
        w = _monotone_fill(problem, w)
    return _finalize(problem, w, b, f_int, iters, relaxed, history)


def solve_online(problem: AllocProblem, selected, weights=None, **kw) -> AllocationSolution:
    """Allocate the whole band among the selected draws only.

    ``selected`` holds client indices into ``problem.clients``; repeated
    indices are separate transmissions and receive separate slices.
    ``weights`` default to each client's weight divided by ``len(selected)``.
    """
    selected = list(selected)
    if weights is None:
        weights = [problem.clients[i].weight / len(selected) for i in selected]
    return solve_offline(problem.subproblem(selected, weights), **kw)


def uniform_bandwidth_levels(problem: AllocProblem, share: int | None = None):
    """Levels supported by an equal bandwidth split (the uniform-bandwidth benchmark).

    Returns ``(w, b, objective)``; ``objective`` is ``inf`` when some client
    cannot carry a single bit.
    """
    share = problem.n if share is None else share
    w = np.full(problem.n, problem.w_total / share)
    b = _floor_levels(problem, w)
    if np.any(b < 1):
        return w, b, math.inf
    return w, b, _integer_objective(problem, b)


@dataclass
class ConvexityReport:
    ok: bool
    min_second_difference: float
    points: int


def check_convexity(problem: AllocProblem, grid_size: int = 200, b_max: float = 12.0
                    ) -> ConvexityReport:
    """Second finite differences of each client's objective term on a level grid.

    The grid spans bandwidths from ``Wbar_i(1)`` up to ``Wbar_i(b_max)`` (or
    ``w_total`` when that is reachable first). End points use one-sided
    differences.
    """
    worst = math.inf
    points = 0
    for i, c in enumerate(problem.clients):
        lo = problem.lower_bounds[i]
        sup = ch.quant_level_supremum(problem.thetas[i], problem.p_max, problem.channel.n0,
                                      problem.tau_max, problem.m, problem.mu)
        top = min(b_max, 0.999 * sup)
        hi = problem.bandwidth_for(i, top) if top > 1 else lo * 1.01
        hi = min(hi, max(problem.w_total, lo * 1.01))
        grid = np.linspace(lo, hi, grid_size)

        def phi(x, i=i):
            lv = ch.quant_level_for_bandwidth(x, problem.thetas[i], problem.p_max,
                                              problem.channel.n0, problem.tau_max,
                                              problem.m, problem.mu)
            return c.weight * _phi(lv)

        vals = phi(grid)
        second = np.empty(grid_size)
        second[1:-1] = vals[2:] - 2 * vals[1:-1] + vals[:-2]
        second[0] = vals[2] - 2 * vals[1] + vals[0]
        second[-1] = vals[-1] - 2 * vals[-2] + vals[-3]
        scale = np.maximum(np.abs(vals[1:-1]).max(), 1e-300)
        rel = second / scale
        worst = min(worst, float(rel.min()))
        points += grid_size
    return ConvexityReport(worst >= -1e-8, worst, points)


@dataclass
class OptimalityReport:
    full_power: bool
    relaxed_delay_tight: bool
    rounded_delay_ok: bool
    uniform_outage: bool
    stationary: bool
    max_relaxed_delay_error: float
    max_outage_error: float
    residual: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_optimality(solution: AllocationSolution, problem: AllocProblem,
                      tol: float = 1e-6) -> OptimalityReport:
    """Check the optimality conditions an allocation must meet."""
    violations = []
    full_power = bool(np.allclose(solution.p, problem.p_max, rtol=0, atol=0))
    if not full_power:
        violations.append("transmit power differs from p_max")

    relaxed_err = math.nan
    residual = math.nan
    tight = True
    stationary = True
    if solution.relaxed_w is not None:
        rw = solution.relaxed_w
        lv = problem.levels(rw)
        rr = problem.rates(rw)
        delay = (problem.m * lv + problem.mu) / rr
        relaxed_err = float(np.max(np.abs(delay - problem.tau_max)) / problem.tau_max)
        tight = relaxed_err <= 1e-9
        if not tight:
            violations.append(f"relaxed delay deviates from tau_max by {relaxed_err:.3g}")
        residual = projected_residual(rw, problem)
        stationary = residual <= tol
        if not stationary:
            violations.append(f"projected-gradient residual {residual:.3g} exceeds {tol:g}")

    rounded_delay = np.array([bit_cost(problem.m, int(b), problem.mu) for b in solution.b]) / solution.r
    rounded_ok = bool(np.all(rounded_delay <= problem.tau_max * (1 + 1e-12)))
    if not rounded_ok:
        violations.append("rounded allocation exceeds the delay budget")

    q = np.array([
        ch.outage_prob(ch.LinkBudget(d, p, w, r), problem.channel).q
        for d, p, w, r in zip(solution.d, solution.p, solution.w, solution.r)
    ])
    q_err = float(max(np.max(np.abs(q - problem.q_max)),
                      np.max(np.abs(np.asarray(solution.q) - problem.q_max))))
    uniform = q_err <= 1e-8
    if not uniform:
        violations.append(f"outage deviates from q_max by {q_err:.3g}")
    return OptimalityReport(full_power, tight, rounded_ok, uniform, stationary,
                            relaxed_err, q_err, residual, violations)
