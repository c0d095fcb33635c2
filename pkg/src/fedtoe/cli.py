"""Command-line entry point: allocate, simulate, bound, verify and sweep."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import allocator as al
from . import analysis as an
from . import channel as ch
from . import config as cf
from . import engine as en
from . import quantizer as qz
from . import scenario as sc
from .errors import FedToeError, InfeasibleError, ParameterError, RetransmissionCapError

EXIT_FAIL = 1
EXIT_ERROR = 2


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------- building blocks

def build_scenario(cfg: cf.ExperimentConfig):
    s = cfg.scenario
    rng = np.random.default_rng(s.seed)
    d = sc.place_clients(s.N, s.radius, rng)
    if s.task == "quadratic":
        task = sc.make_quadratic(s.N, s.dim, s.heterogeneity, s.noise_std, rng,
                                 hessian_spread=s.hessian_spread)
    elif s.task == "logistic":
        cpc = s.classes if s.partition == "iid" else s.classes_per_client
        task = sc.make_logistic_noniid(s.N, cpc, s.samples_per_client, rng, classes=s.classes,
                                       features=s.features)
    else:
        raise ParameterError(f"unknown task {s.task!r}")
    return d, task


def build_radio(cfg: cf.ExperimentConfig, tau_max: float | None = None) -> en.Radio:
    a, c = cfg.allocator, cfg.channel
    params = ch.ChannelParams(k_db=c.k_db, lam=c.lam, sigma_db=c.sigma_db, n0=c.n0)
    return en.Radio(w_total=a.w_total, p_max=a.p_max,
                    tau_max=a.tau_max if tau_max is None else tau_max, q_max=a.q_max, m=a.m,
                    n_groups=a.n_groups, range_bits=a.range_bits, channel=params)


def sim_config(cfg: cf.ExperimentConfig, scheme: str, **over) -> en.SimConfig:
    s = cfg.sim
    kw = dict(K=s.K, E=s.E, M=s.M, gamma=s.gamma, b=s.b, scheme=scheme, seed=s.seed,
              scheduling=s.scheduling, participation=s.participation,
              channel_mode=s.channel_mode, retransmit=s.retransmit,
              retransmit_cap=s.retransmit_cap)
    kw.update(over)
    return en.SimConfig(**kw)


def selected_schemes(cfg, only):
    schemes = [str(en.Scheme.parse(s)) for s in cfg.sim.schemes]
    if only:
        wanted = {str(en.Scheme.parse(s)) for s in only}
        schemes = [s for s in schemes if s in wanted] or sorted(wanted)
    return schemes


def _metric(task):
    return task.accuracy if hasattr(task, "accuracy") else None


# ---------------------------------------------------------------- allocate

def cmd_allocate(cfg, args, out):
    """Solve the bandwidth and level allocation and write allocation.csv."""
    d, task = build_scenario(cfg)
    radio = build_radio(cfg)
    problem = radio.problem(d, task.p)
    try:
        sol = al.solve_offline(problem)
    except InfeasibleError as exc:
        need = _min_band(problem)
        print(f"infeasible: {exc}", file=sys.stderr)
        print(f"sum of one-bit bandwidths = {fmt(need)} Hz, W_total = {fmt(problem.w_total)} Hz",
              file=sys.stderr)
        return EXIT_ERROR
    write_csv(os.path.join(out, "allocation.csv"),
              ["client_id", "d_m", "W_hz", "B_bits", "R_bps", "q"],
              zip(sol.ids, sol.d, sol.w, sol.b, sol.r, sol.q))
    _, b3, obj3 = al.uniform_bandwidth_levels(problem)
    print(f"clients {problem.n}  objective {fmt(sol.objective)}  iterations {sol.iterations}  "
          f"uniform-bandwidth objective {fmt(obj3)}")
    print(f"bandwidth used {fmt(sol.bandwidth_used)} of {fmt(problem.w_total)} Hz  "
          f"levels {int(sol.b.min())}..{int(sol.b.max())}")
    return 0


def _min_band(problem) -> float:
    total = 0.0
    for i in range(problem.n):
        try:
            total += problem.bandwidth_for(i, 1)
        except InfeasibleError:
            return math.inf
    return total


# ---------------------------------------------------------------- simulate

SUMMARY_HEADER = ["scheme", "rounds", "final_loss", "final_grad_sq", "min_grad_sq",
                  "mean_active", "retransmissions", "total_delay_s", "total_bits", "final_metric"]


def summarize(scheme, records):
    last = records[-1]
    return [scheme, len(records), last.loss, last.grad_sq, min(r.grad_sq for r in records),
            float(np.mean([r.active for r in records])),
            sum(r.retransmissions for r in records), sum(r.delay for r in records),
            sum(r.bits for r in records), "" if last.metric is None else last.metric]


def cmd_simulate(cfg, args, out):
    """Run every scheme; write rounds.jsonl, summary.csv and curves.svg."""
    d, task = build_scenario(cfg)
    radio = build_radio(cfg)
    curves = {}
    rows = []
    with open(os.path.join(out, "rounds.jsonl"), "w", encoding="utf-8") as fh:
        for scheme in selected_schemes(cfg, args.scheme):
            res = en.run(sim_config(cfg, scheme), task, d, radio, metric=_metric(task))
            for r in res.records:
                fh.write(json.dumps({"scheme": scheme, **r.to_dict()}, sort_keys=True) + "\n")
            rows.append(summarize(scheme, res.records))
            curves[scheme] = res.records
    write_csv(os.path.join(out, "summary.csv"), SUMMARY_HEADER, rows)
    if cfg.output.svg:
        with open(os.path.join(out, "curves.svg"), "w", encoding="utf-8") as fh:
            fh.write(render_svg(curves))
    return 0


COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def render_svg(curves: dict) -> str:
    """Two panels (loss and log10 squared gradient norm) with one polyline per scheme."""
    width, height, pad = 420, 300, 45
    panels = [("loss", lambda r: r.loss), ("log10 grad_sq", lambda r: math.log10(max(r.grad_sq, 1e-300)))]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * width}" '
             f'height="{height + 20 * len(curves) + 20}" font-family="sans-serif" font-size="11">']
    for k, (title, key) in enumerate(panels):
        x0 = k * width
        series = {s: [key(r) for r in recs] for s, recs in curves.items()}
        vals = [v for ys in series.values() for v in ys]
        lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        if hi == lo:
            hi = lo + 1.0
        n = max((len(ys) for ys in series.values()), default=1)
        pw, ph = width - 2 * pad, height - 2 * pad
        parts.append(f'<text x="{x0 + width / 2:.1f}" y="{pad - 15}" text-anchor="middle">{title}</text>')
        parts.append(f'<line x1="{x0 + pad}" y1="{pad + ph}" x2="{x0 + pad + pw}" y2="{pad + ph}" stroke="black"/>')
        parts.append(f'<line x1="{x0 + pad}" y1="{pad}" x2="{x0 + pad}" y2="{pad + ph}" stroke="black"/>')
        parts.append(f'<text x="{x0 + pad - 4}" y="{pad + 4}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{x0 + pad - 4}" y="{pad + ph}" text-anchor="end">{lo:.3g}</text>')
        parts.append(f'<text x="{x0 + pad + pw}" y="{pad + ph + 15}" text-anchor="end">round {n}</text>')
        for j, (scheme, ys) in enumerate(series.items()):
            pts = " ".join(
                f"{x0 + pad + pw * (i / max(n - 1, 1)):.2f},{pad + ph * (1 - (y - lo) / (hi - lo)):.2f}"
                for i, y in enumerate(ys))
            parts.append(f'<polyline fill="none" stroke="{COLORS[j % len(COLORS)]}" '
                         f'stroke-width="1.2" points="{pts}"><title>{scheme}</title></polyline>')
    for j, scheme in enumerate(curves):
        y = height + 15 + 20 * j
        parts.append(f'<line x1="{pad}" y1="{y - 4}" x2="{pad + 25}" y2="{y - 4}" '
                     f'stroke="{COLORS[j % len(COLORS)]}" stroke-width="2"/>')
        parts.append(f'<text x="{pad + 32}" y="{y}">{scheme}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- bound

def cmd_bound(cfg, args, out):
    """Evaluate the convergence bound term by term; write bound_terms.csv."""
    d, task = build_scenario(cfg)
    if not isinstance(task, sc.QuadraticTask):
        print("the bound needs the quadratic task (closed-form constants)", file=sys.stderr)
        return EXIT_ERROR
    radio = build_radio(cfg)
    scheme = selected_schemes(cfg, args.scheme)[0]
    s = cfg.sim
    probe = sim_config(cfg, scheme)
    links = en.plan_links(probe, radio, d, task.p)
    q = np.zeros(task.n_clients) if links is None else np.asarray(links.q, dtype=float)
    notes = []
    if scheme.startswith("baseline2"):
        notes.append("baseline2 reweights updates; the bound describes plain averaging")
    if scheme == "fedtoe-online":
        q = np.full(task.n_clients, radio.q_max)
    stats = _participation(task.p, q, s.K, cfg.bound.mc_trials, s.seed, notes)
    T = s.M * s.E
    gamma, e_max = an.schedule_hyperparams(T, stats.k_bar, task.L)
    res = en.run(sim_config(cfg, scheme, gamma=gamma), task, d, radio, links=links)
    J = np.array([r.qe_bound_max for r in res.records])
    w0 = task.initial_point()
    D = sc.heterogeneity_D(task, w0, radius=cfg.bound.radius).ball
    inputs = an.BoundInputs(L=task.L, sigma_sq=task.sigma_sq, b=s.b, D_sq=D,
                            J_sq=np.repeat(J[:, None], task.n_clients, axis=1), p=task.p, q=q,
                            K=s.K, E=s.E, M=s.M, F0_minus_Flow=task.global_loss(w0) - task.F_low,
                            gamma=gamma)
    terms = an.theorem1_rhs(inputs, stats)
    lhs = float(np.mean([r.grad_sq_start for r in res.records]))
    rows = [(name, value) for name, value in terms.as_dict().items()]
    rows += [("k_bar", terms.k_bar), ("chi_square", terms.chi_square), ("empirical_lhs", lhs),
             ("gamma", gamma), ("E", s.E), ("E_max", e_max), ("M", s.M), ("L", task.L),
             ("sigma_sq", task.sigma_sq)]
    write_csv(os.path.join(out, "bound_terms.csv"), ["term", "value"], rows)
    print(f"scheme {scheme}: empirical {fmt(lhs)} <= bound {fmt(terms.total)}"
          if lhs <= terms.total else f"scheme {scheme}: empirical {fmt(lhs)} exceeds bound {fmt(terms.total)}")
    for n in notes + terms.notes:
        print(f"note: {n}")
    return 0


def _participation(p, q, K, trials, seed, notes):
    if an.is_uniform(q):
        return an.uniform_stats(p, float(q[0]), K)
    try:
        return an.enumerate_stats(p, q, K)
    except ParameterError:
        notes.append(f"participation statistics from {trials} Monte Carlo trials")
        return an.mc_stats(p, q, K, trials, np.random.default_rng(seed))


# ---------------------------------------------------------------- verify

@dataclasses.dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: measured {fmt(self.measured)} tolerance {fmt(self.tolerance)}"


def _check(name, measured, tolerance, passed=None):
    passed = measured <= tolerance if passed is None else passed
    return Check(name, float(measured), float(tolerance), bool(passed))


def run_checks(cfg, inject: str | None = None) -> list[Check]:
    rng = np.random.default_rng(cfg.sim.seed)
    d, task = build_scenario(cfg)
    radio = build_radio(cfg)
    checks = []

    # quantizer: unbiasedness (max |z|) and mean error against its bound
    v = rng.normal(size=40)
    groups = qz.compute_ranges(v, en.group_sizes(40, radio.n_groups))
    for B in (1, 3):
        draws = np.array([qz.quantize_update(v, groups, B, rng).dequantize() for _ in range(20_000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
        # endpoint values are exact; floor se at round-off scale
        z = np.max(np.abs(draws.mean(axis=0) - v) / np.maximum(se, 1e-12 * (1.0 + np.abs(v))))
        checks.append(_check(f"quantizer unbiased B={B} (max |z|)", z, 5.0))
        mse = float(np.mean(np.sum((draws - v) ** 2, axis=1)))
        bound = qz.qe_bound(groups, B).bound
        checks.append(_check(f"quantizer error below bound B={B}", mse, bound))

    # outage: shadowing frequency at the rate that should pin q_max
    sign = -1.0 if inject == "wrong-theta" else 1.0
    n = 200_000
    for di in (d[0], d[len(d) // 2], d[-1]):
        shadow = sign * radio.channel.sigma_db * ch.q_inverse(1.0 - radio.q_max)
        th = float(ch.from_db(shadow + ch.median_gain_db(di, radio.channel)))
        w = radio.w_total / len(d)
        link = ch.LinkBudget(float(di), radio.p_max, w, ch.rate_cap(w, th, radio.p_max, radio.channel.n0))
        freq = float(np.mean(ch.sample_outage(link, radio.channel, rng, size=n)))
        se = math.sqrt(radio.q_max * (1 - radio.q_max) / n)
        checks.append(_check(f"outage at d={di:.1f} m matches q_max (|z|)",
                             abs(freq - radio.q_max) / se, 4.0))

    # participation statistics: enumeration against Monte Carlo
    p = rng.dirichlet(np.ones(3))
    qv = rng.uniform(0.05, 0.6, 3)
    ex = an.enumerate_stats(p, qv, 2)
    mc = an.mc_stats(p, qv, 2, 1_000_000, rng)
    z = max(np.max(np.abs(mc.beta_bar - ex.beta_bar) / mc.beta_se),
            np.max(np.abs(mc.alpha_bar - ex.alpha_bar) / mc.alpha_se),
            abs(1 / mc.k_bar - 1 / ex.k_bar) / mc.inv_k_se)
    checks.append(_check("k_bar enumeration vs Monte Carlo (max |z|)", z, 4.0))

    # delay with retransmissions
    lk = [(1000, 500.0, 0.6), (2000, 800.0, 0.4)]
    sim = ch.simulate_uplink_delays(lk, 100_000, rng).mean()
    checks.append(_check("mean delay vs closed form (rel)",
                         abs(sim / ch.avg_uplink_delay(lk) - 1), 0.01))

    # allocator: convexity, gradients, optimality and a two-client grid search
    problem = radio.problem(d, task.p)
    conv = al.check_convexity(problem, grid_size=100)
    checks.append(_check("objective convexity (min second difference)",
                         conv.min_second_difference, -1e-8, conv.ok))
    w0 = al.initial_point(problem)
    g = al.objective_gradient(w0, problem)
    h = 1e-6 * w0
    idx = np.arange(min(problem.n, 20))
    fd = np.array([(al.objective(w0 + h[i] * _e(problem.n, i), problem)
                    - al.objective(w0 - h[i] * _e(problem.n, i), problem)) / (2 * h[i]) for i in idx])
    checks.append(_check("allocator gradient vs finite differences (rel)",
                         float(np.max(np.abs(fd - g[idx]) / np.abs(g[idx]))), 1e-5))
    wq = rng.normal(size=task.dim)
    fdq = np.array([(task.loss(0, wq + 1e-6 * _e(task.dim, j)) - task.loss(0, wq - 1e-6 * _e(task.dim, j)))
                    / 2e-6 for j in range(task.dim)])
    gq = task.grad(0, wq)
    checks.append(_check("task gradient vs finite differences (rel)",
                         float(np.linalg.norm(fdq - gq) / max(np.linalg.norm(gq), 1e-300)), 1e-6))
    try:
        sol = al.solve_offline(problem)
        rep = al.verify_optimality(sol, problem)
        checks.append(_check("allocation outage deviation from q_max", rep.max_outage_error, 1e-8))
        checks.append(_check("allocation optimality conditions", len(rep.violations), 0))
        order = np.argsort(sol.d, kind="stable")
        drops = float(np.max(np.maximum(-np.diff(sol.w[order]), 0.0), initial=0.0))
        checks.append(_check("bandwidth never decreases with distance (max drop, Hz)", drops, 0.0))
    except InfeasibleError as exc:
        checks.append(Check(f"allocation feasible ({exc})", math.inf, 0.0, False))
    pair = problem.subproblem([0, problem.n - 1], [0.5, 0.5])
    try:
        relaxed = al.solve_relaxed(pair)
        lo = pair.lower_bounds
        grid = np.linspace(lo[0], pair.w_total - lo[1], 100_001)
        vals = [al.objective(np.array([x, pair.w_total - x]), pair) for x in grid]
        best = grid[int(np.argmin(vals))]
        gap = abs(relaxed[0][0] - best) / pair.w_total
        checks.append(_check("two-client relaxed optimum vs grid search (fraction of W)", gap, 1e-3))
    except InfeasibleError as exc:
        checks.append(Check(f"two-client problem feasible ({exc})", math.inf, 0.0, False))
    return checks


def _e(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def cmd_verify(cfg, args, out):
    """Run the built-in numerical checks; write verify_report.txt."""
    checks = run_checks(cfg, args.inject)
    lines = [c.line() for c in checks]
    ok = all(c.passed for c in checks)
    lines.append(f"{'ALL PASS' if ok else 'FAILED'}: {sum(c.passed for c in checks)}/{len(checks)}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "verify_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0 if ok else EXIT_FAIL


# ---------------------------------------------------------------- sweep

def cmd_sweep(cfg, args, out):
    """Repeat the simulation over tau_max at a fixed total uplink time; write sweep.csv."""
    d, task = build_scenario(cfg)
    rows = []
    for tau in cfg.sweep.tau_max:
        radio = build_radio(cfg, tau_max=tau)
        M = max(1, int(round(cfg.sweep.total_time / tau)))
        for scheme in selected_schemes(cfg, args.scheme):
            try:
                res = en.run(sim_config(cfg, scheme, M=M), task, d, radio, metric=_metric(task))
            except InfeasibleError:
                rows.append([tau, "infeasible"] + summarize_blank(scheme, M))
                continue
            except RetransmissionCapError:
                rows.append([tau, "outage"] + summarize_blank(scheme, M))
                continue
            rows.append([tau, "ok"] + summarize(scheme, res.records))
    write_csv(os.path.join(out, "sweep.csv"), ["tau_max_s", "status"] + SUMMARY_HEADER, rows)
    return 0


def summarize_blank(scheme, M):
    return [scheme, M] + [""] * (len(SUMMARY_HEADER) - 2)


# ---------------------------------------------------------------- entry point

COMMANDS = {"allocate": cmd_allocate, "simulate": cmd_simulate, "bound": cmd_bound,
            "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedtoe", description="Federated learning over outage-prone quantized uplinks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="INI configuration file (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides [output] directory)")
        p.add_argument("--seed", type=int, help="overrides the scenario and simulation seeds")
        p.add_argument("--scheme", action="append",
                       help="restrict to this scheme; may be repeated")
        if name == "verify":
            p.add_argument("--inject", choices=["wrong-theta"],
                           help="deliberately break one model component (negative test)")
    return parser


def load_config(args) -> cf.ExperimentConfig:
    cfg = cf.load(args.config) if args.config else cf.ExperimentConfig()
    if args.seed is not None:
        cfg.scenario.seed = args.seed
        cfg.sim.seed = args.seed
    if args.out:
        cfg.output.directory = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = cfg.output.directory
        os.makedirs(out, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except FedToeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
