"""Federated learning over an outage-prone, quantized uplink.

Each round samples ``K`` clients with replacement, runs ``E`` local SGD
steps per draw, quantizes the accumulated gradient, sends it through the
channel (resending until at least one upload survives) and aggregates the
survivors. Randomness comes from four independent streams (sampling, sgd,
quantizer, channel) derived per round and per draw from one seed, so
results do not depend on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import allocator as al
from . import channel as ch
from .errors import InfeasibleError, ParameterError, PreconditionError, RetransmissionCapError
from .quantizer import bit_cost, compute_ranges, experiment_overhead, qe_bound, quantize_update

STREAMS = {"sampling": 0, "sgd": 1, "quantizer": 2, "channel": 3}
SCHEMES = ("fedtoe-offline", "fedtoe-online", "baseline1", "baseline2", "baseline3", "ideal")


@dataclass(frozen=True)
class Scheme:
    kind: str
    bits: int | None = None  # fixed level for baselines 1 and 2

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        name, _, arg = text.strip().lower().partition(":")
        if name == "fedtoe":
            name = "fedtoe-offline"
        if name not in SCHEMES:
            raise ParameterError(f"unknown scheme {text!r}; expected one of {SCHEMES}")
        fixed = name in ("baseline1", "baseline2")
        if fixed != bool(arg):
            raise ParameterError(f"{name} {'needs' if fixed else 'takes no'} a level, e.g. baseline1:5")
        bits = int(arg) if arg else None
        if bits is not None and bits < 1:
            raise ParameterError("fixed level must be >= 1")
        return cls(name, bits)

    def __str__(self) -> str:
        return self.kind if self.bits is None else f"{self.kind}:{self.bits}"


@dataclass(frozen=True)
class Radio:
    """Uplink resources shared by all clients."""

    w_total: float = 20e6
    p_max: float = 1.0
    tau_max: float = 0.05
    q_max: float = 0.1
    m: int = 23860  # payload parameters used for bit accounting
    n_groups: int = 4
    range_bits: int = 64
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)

    @property
    def mu(self) -> int:
        return experiment_overhead(self.m, self.n_groups, self.range_bits)

    def payload(self, B: int) -> int:
        return bit_cost(self.m, int(B), self.mu)

    def problem(self, distances, weights) -> al.AllocProblem:
        clients = [al.ClientSpec(i, float(d), float(wt))
                   for i, (d, wt) in enumerate(zip(distances, weights))]
        return al.AllocProblem(clients, self.w_total, self.p_max, self.tau_max, self.q_max,
                               self.m, self.mu, self.channel)


@dataclass
class SimConfig:
    K: int
    E: int
    M: int
    gamma: float
    b: int
    scheme: Scheme | str = "fedtoe-offline"
    seed: int = 0
    scheduling: str = "offline"  # baselines 1 and 3: W/N offline, W/K online
    participation: str = "partial"  # "full" transmits every client once per round
    p_hat: np.ndarray | None = None  # baseline 2 selection probabilities
    channel_mode: str = "bernoulli"  # or "shadowing"
    retransmit: str = "resend"  # or "requantize"
    retransmit_cap: int = 10_000
    lossless: bool = False  # bypass the quantizer

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = Scheme.parse(self.scheme)
        if self.K < 1 or self.E < 1 or self.M < 1 or self.b < 1:
            raise ParameterError("K, E, M and b must be >= 1")
        if not self.gamma > 0:
            raise ParameterError("gamma must be positive")
        if self.scheduling not in ("offline", "online"):
            raise ParameterError("scheduling must be offline or online")
        if self.participation not in ("partial", "full"):
            raise ParameterError("participation must be partial or full")
        if self.channel_mode not in ("bernoulli", "shadowing"):
            raise ParameterError("channel_mode must be bernoulli or shadowing")
        if self.retransmit not in ("resend", "requantize"):
            raise ParameterError("retransmit must be resend or requantize")
        if self.retransmit_cap < 1:
            raise ParameterError("retransmit_cap must be >= 1")

    def stream(self, name: str, r: int, k: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, STREAMS[name], r, k]))


@dataclass
class Links:
    """Per-transmission resources: bandwidth, level, rate, outage and distance."""

    w: np.ndarray
    B: np.ndarray
    r: np.ndarray
    q: np.ndarray
    d: np.ndarray
    payload: np.ndarray  # bits

    def take(self, idx) -> "Links":
        idx = np.asarray(idx, dtype=np.int64)
        return Links(*(getattr(self, f)[idx] for f in ("w", "B", "r", "q", "d", "payload")))


@dataclass
class RoundRecord:
    round: int
    loss: float
    grad_sq: float
    grad_sq_start: float  # at the model the round started from
    active: int
    attempts: int
    retransmissions: int
    delay: float
    bits: int
    selected: list
    indicators: list
    qe_bound_mean: float  # (1/K) sum over draws of the quantization-error bound
    qe_bound_max: float
    metric: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransmitResult:
    history: list
    indicators: np.ndarray
    attempts: int
    delay: float

    @property
    def retransmissions(self) -> int:
        return self.attempts - 1


@dataclass
class RunResult:
    records: list
    links: Links | None
    w: np.ndarray


def sample_clients(p, K: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` independent draws from ``p`` by inverse CDF; duplicates are kept."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ParameterError("p must be a probability vector")
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, rng.random(K), side="right"), p.size - 1)


def group_sizes(dim: int, n_groups: int) -> list[int]:
    n = max(1, min(n_groups, dim))
    return [len(a) for a in np.array_split(np.arange(dim), n)]


def local_train(task, client: int, w_global, E: int, gamma: float, b: int,
                rng: np.random.Generator, n_groups: int = 4):
    """``E`` SGD steps; returns the summed gradients and their quantization ranges."""
    if E < 1:
        raise ParameterError("E must be >= 1")
    w = np.array(w_global, dtype=float)
    delta = np.zeros_like(w)
    for _ in range(E):
        g = task.sample_grad(client, w, b, rng)
        delta += g
        w -= gamma * g
    return delta, compute_ranges(delta, group_sizes(delta.size, n_groups))


def _draw_failures(links: Links, radio: Radio, mode: str, rng) -> np.ndarray:
    if mode == "bernoulli":
        return rng.random(links.q.size) < links.q
    psi = rng.normal(0.0, radio.channel.sigma_db, links.q.size)
    gain = ch.from_db(ch.median_gain_db(links.d, radio.channel) + psi)
    cap = ch.capacity(links.w, radio.p_max, gain, radio.channel.n0)
    return np.atleast_1d(cap <= links.r)


def transmit_round(links: Links, radio: Radio, rng: np.random.Generator,
                   retransmit_cap: int = 10_000, mode: str = "bernoulli") -> TransmitResult:
    """Attempt uploads until at least one succeeds.

    Every attempt redraws all outcomes; the delay of an attempt is the
    slowest selected upload.
    """
    if np.any(links.r <= 0):
        raise PreconditionError("every selected client needs a positive rate")
    slot = float(np.max(links.payload / links.r))
    history = []
    for attempt in range(1, retransmit_cap + 1):
        ok = ~_draw_failures(links, radio, mode, rng)
        history.append(ok)
        if ok.any():
            return TransmitResult(history, ok, attempt, attempt * slot)
    raise RetransmissionCapError(
        f"no upload succeeded in {retransmit_cap} attempts (outage probabilities {links.q})")


def aggregate_fedtoe(w_prev, gamma: float, updates, indicators) -> np.ndarray:
    """Average the surviving updates and take one step."""
    ind = np.asarray(indicators, dtype=bool)
    if not ind.any():
        raise PreconditionError("aggregation needs at least one surviving update")
    total = np.zeros_like(np.asarray(w_prev, dtype=float))
    for u, keep in zip(updates, ind):
        if keep:
            total = total + u
    return w_prev - gamma * (total / int(ind.sum()))


def aggregate_baseline2(w_prev, gamma: float, K: int | None, updates, indicators, p, p_hat, q
                        ) -> np.ndarray:
    """Inverse-propensity weighted step.

    ``p``, ``p_hat`` and ``q`` are given per update. ``K=None`` marks full
    participation, where no ``1/K`` factor applies.
    """
    p, p_hat, q = (np.asarray(a, dtype=float) for a in (p, p_hat, q))
    if np.any(p_hat <= 0):
        raise ParameterError("selection probabilities must be positive")
    if np.any(q >= 1):
        raise ParameterError("outage probabilities must be < 1")
    coef = p / (p_hat * (1.0 - q))
    total = np.zeros_like(np.asarray(w_prev, dtype=float))
    for u, keep, c in zip(updates, indicators, coef):
        if keep:
            total = total + c * u
    scale = 1.0 if K is None else 1.0 / K
    return w_prev - gamma * scale * total


def _outages(radio: Radio, d, w, r) -> np.ndarray:
    return np.array([ch.outage_prob(ch.LinkBudget(di, radio.p_max, wi, ri), radio.channel).q
                     for di, wi, ri in zip(d, w, r)])


def fixed_level_links(radio: Radio, d, B: int, share: int) -> Links:
    """Uniform bandwidth ``w_total/share``, level ``B`` and rate ``payload/tau_max``."""
    d = np.asarray(d, dtype=float)
    n = d.size
    w = np.full(n, radio.w_total / share)
    payload = np.full(n, radio.payload(B), dtype=np.int64)
    r = payload / radio.tau_max
    return Links(w, np.full(n, B, dtype=np.int64), r, _outages(radio, d, w, r), d, payload)


def uniform_bandwidth_links(radio: Radio, d, weights, share: int) -> Links:
    problem = radio.problem(d, weights)
    w, B, obj = al.uniform_bandwidth_levels(problem, share)
    if not math.isfinite(obj):
        raise InfeasibleError("delay constraint too tight: an equal bandwidth share cannot "
                              "carry 1 bit per parameter for every client")
    return _solution_links(radio, problem, w, B)


def _solution_links(radio, problem, w, B) -> Links:
    r = problem.rates(w)
    payload = np.array([radio.payload(b) for b in B], dtype=np.int64)
    d = problem.distances
    return Links(np.asarray(w, float), np.asarray(B, np.int64), r, _outages(radio, d, w, r),
                 d, payload)


def allocation_links(radio: Radio, d, weights) -> Links:
    problem = radio.problem(d, weights)
    sol = al.solve_offline(problem)
    return _solution_links(radio, problem, sol.w, sol.b)


def plan_links(cfg: SimConfig, radio: Radio, d, p) -> Links | None:
    """Per-client resources for schemes whose allocation is fixed over the run."""
    kind = cfg.scheme.kind
    n = len(d)
    share = n if cfg.scheduling == "offline" else cfg.K
    if kind == "fedtoe-offline":
        return allocation_links(radio, d, p)
    if kind in ("baseline1", "baseline2"):
        return fixed_level_links(radio, d, cfg.scheme.bits, share)
    if kind == "baseline3":
        return uniform_bandwidth_links(radio, d, p, share)
    return None


def _selection(cfg: SimConfig, p, p_sel, r) -> np.ndarray:
    if cfg.participation == "full":
        return np.arange(len(p))
    return sample_clients(p_sel, cfg.K, cfg.stream("sampling", r))


def run(cfg: SimConfig, task, distances, radio: Radio | None = None,
        links: Links | None = None, metric=None, w0=None) -> RunResult:
    """Execute ``cfg.M`` rounds; ``links`` overrides the planned allocation."""
    radio = Radio() if radio is None else radio
    d = np.asarray(distances, dtype=float)
    p = np.asarray(task.p, dtype=float)
    if d.size != p.size:
        raise ParameterError(f"{d.size} distances for {p.size} clients")
    kind = cfg.scheme.kind
    if links is None:
        links = plan_links(cfg, radio, d, p)
    p_hat = None
    p_sel = p
    if kind == "baseline2":
        if cfg.participation == "full":
            p_hat = np.ones(p.size) if cfg.p_hat is None else np.asarray(cfg.p_hat, float)
        else:
            p_hat = p if cfg.p_hat is None else np.asarray(cfg.p_hat, float)
            p_sel = p_hat
    w = np.array(task.initial_point() if w0 is None else w0, dtype=float)
    records = []
    for r in range(1, cfg.M + 1):
        sel = _selection(cfg, p, p_sel, r)
        grad_start = task.global_grad(w)
        updates = []
        ranges = []
        for k, i in enumerate(sel):
            delta, groups = local_train(task, int(i), w, cfg.E, cfg.gamma, cfg.b,
                                        cfg.stream("sgd", r, k), radio.n_groups)
            updates.append(delta)
            ranges.append(groups)
        if kind == "ideal":
            ind = np.ones(len(sel), dtype=bool)
            res = TransmitResult([ind], ind, 1, 0.0)
            bits, qe = 0, (0.0, 0.0)
            w = aggregate_fedtoe(w, cfg.gamma, updates, ind)
        else:
            if kind == "fedtoe-online":
                problem = radio.problem(d, p)
                sol = al.solve_online(problem, sel)
                cur = _solution_links(radio, problem.subproblem(sel), sol.w, sol.b)
            else:
                cur = links.take(sel)
            res = transmit_round(cur, radio, cfg.stream("channel", r), cfg.retransmit_cap,
                                 cfg.channel_mode)
            recv, qe = _receive(cfg, updates, ranges, cur, res.attempts, r)
            bits = int(np.sum(cur.payload)) * res.attempts
            if kind == "baseline2":
                K = None if cfg.participation == "full" else cfg.K
                w = aggregate_baseline2(w, cfg.gamma, K, recv, res.indicators, p[sel],
                                        p_hat[sel], cur.q)
            else:
                w = aggregate_fedtoe(w, cfg.gamma, recv, res.indicators)
        g = task.global_grad(w)
        records.append(RoundRecord(
            round=r, loss=task.global_loss(w), grad_sq=float(g @ g),
            grad_sq_start=float(grad_start @ grad_start), active=int(res.indicators.sum()),
            attempts=res.attempts, retransmissions=res.retransmissions, delay=res.delay,
            bits=bits, selected=[int(i) for i in sel],
            indicators=[bool(x) for x in res.indicators], qe_bound_mean=qe[0], qe_bound_max=qe[1],
            metric=None if metric is None else float(metric(w))))
    return RunResult(records, links, w)


def _receive(cfg: SimConfig, updates, ranges, cur: Links, attempts: int, r: int):
    """Reconstructed updates as the server decodes them, and the mean and max QE bound."""
    if cfg.lossless:
        return list(updates), (0.0, 0.0)
    out = []
    qe = []
    for k, (u, groups) in enumerate(zip(updates, ranges)):
        B = int(cur.B[k])
        rng = cfg.stream("quantizer", r, k)
        copies = attempts if cfg.retransmit == "requantize" else 1
        for _ in range(copies):
            qu = quantize_update(u, groups, B, rng)
        out.append(qu.dequantize())
        qe.append(qe_bound(groups, B).bound)
    return out, (float(np.mean(qe)), float(np.max(qe)))
