"""End-to-end acceptance checks; each test carries the criterion it covers."""

import time

import numpy as np
import pytest
from scipy.stats import norm

from fedtoe import allocator as al
from fedtoe import analysis as an
from fedtoe import channel as ch
from fedtoe import cli
from fedtoe import engine as en
from fedtoe import quantizer as qz
from fedtoe import scenario as sc

RADIO = en.Radio()


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "quantizer unbiasedness and error bound")
def test_quantizer_unbiased_and_bounded(record_property):
    rng = np.random.default_rng(0)
    m, draws, chunk = 200, 100_000, 10_000
    start = time.perf_counter()
    worst_z = worst_ratio = 0.0
    for _ in range(20):
        v = rng.normal(size=m) * rng.uniform(0.1, 3.0)
        groups = qz.compute_ranges(v, [50, 50, 50, 50])
        mag = np.abs(v)
        for B in range(1, 9):
            lower, spacing = qz.knob_values(groups, B)
            s1 = np.zeros(m, dtype=np.int64)
            s2 = np.zeros(m, dtype=np.int64)
            for _ in range(draws // chunk):
                lv = qz.sample_levels(v, groups, B, rng, chunk)
                s1 += lv.sum(axis=0)
                s2 += np.einsum("ij,ij->j", lv, lv)
            mean_level = s1 / draws
            gap = lower - mag
            # |Q(v)| - |v| = gap + spacing * level, and the sign is exact
            mean_err = gap + spacing * mean_level
            t = (mag - lower) / spacing
            up = t - np.floor(t)  # probability of rounding up
            se = spacing * np.sqrt(up * (1 - up) / draws)
            z = np.abs(mean_err) / np.maximum(se, 1e-12 * (1 + mag))
            mse = float(np.sum(gap**2 + 2 * gap * spacing * mean_level + spacing**2 * s2 / draws))
            width = np.array([g.upper - g.lower for g in groups])
            bound = 0.25 * float(np.sum(50 * width**2)) / (2**B - 1) ** 2
            worst_z = max(worst_z, float(z.max()))
            worst_ratio = max(worst_ratio, mse / bound)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |z| {worst_z:.2f}, max error/bound {worst_ratio:.3f}, "
                              f"{elapsed:.0f} s")
    assert worst_z <= 5.0
    assert worst_ratio <= 1.0
    assert elapsed < 60.0


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "outage closed form against shadowing Monte Carlo")
def test_outage_closed_form(record_property):
    rng = np.random.default_rng(0)
    n = 1_000_000
    start = time.perf_counter()
    worst = 0.0
    cells = 0
    for B in (2, 5, 10):
        rate = RADIO.payload(B) / RADIO.tau_max
        for d in (100.0, 200.0, 300.0, 450.0, 600.0):
            for w in (100e3, 150e3, 200e3, 300e3, 500e3):
                link = ch.LinkBudget(d, RADIO.p_max, w, rate)
                res = ch.outage_prob(link, RADIO.channel)
                # the closed form is the normal CDF of the threshold in shadowing units
                assert res.q == pytest.approx(norm.cdf(res.rho / RADIO.channel.sigma_db),
                                              rel=1e-12, abs=1e-300)
                freq = float(np.mean(ch.sample_outage(link, RADIO.channel, rng, size=n)))
                se = np.sqrt(res.q * (1 - res.q) / n)
                z = abs(freq - res.q) / se if se > 0 else (0.0 if freq == res.q else np.inf)
                worst = max(worst, z)
                cells += 1
    elapsed = time.perf_counter() - start
    record_property("detail", f"{cells} cells, max |z| {worst:.2f}, {elapsed:.0f} s")
    assert cells == 75
    assert worst <= 3.0
    assert elapsed < 120.0


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "participation statistics: enumeration against Monte Carlo")
def test_enumeration_matches_monte_carlo(record_property):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for n in (2, 3, 4):
        for K in (2, 3):
            for _ in range(10):
                p = rng.dirichlet(np.ones(n))
                q = rng.uniform(0.0, 0.9, n)
                ex = an.enumerate_stats(p, q, K)
                mc = an.mc_stats(p, q, K, 10_000_000, rng)
                z = max(np.max(np.abs(mc.beta_bar - ex.beta_bar) / mc.beta_se),
                        np.max(np.abs(mc.alpha_bar - ex.alpha_bar) / mc.alpha_se),
                        abs(1 / mc.k_bar - 1 / ex.k_bar) / mc.inv_k_se)
                worst = max(worst, float(z))
    elapsed = time.perf_counter() - start
    record_property("detail", f"60 instances, max |z| {worst:.2f}, {elapsed:.0f} s")
    assert worst <= 3.0
    assert elapsed < 300.0


@pytest.mark.criterion(3, "participation statistics: enumeration against Monte Carlo")
def test_enumeration_uniform_and_lossless():
    rng = np.random.default_rng(1)
    for n in (2, 3, 4):
        for K in (2, 3):
            p = rng.dirichlet(np.ones(n))
            qu = rng.uniform(0.05, 0.9)
            st = an.enumerate_stats(p, np.full(n, qu), K)
            np.testing.assert_allclose(st.beta_bar, p, rtol=0, atol=1e-12)
            assert abs(st.k_bar - an.kbar_uniform(qu, K)) <= 1e-12
            assert an.enumerate_stats(p, np.zeros(n), K).k_bar == K
            assert an.kbar_uniform(0.0, K) == K


# ---------------------------------------------------------------- 4

def _random_links(rng, K, q_max):
    payload = rng.integers(20_000, 200_000, K)
    rate = rng.uniform(1e5, 5e6, K)
    q = rng.uniform(0.0, q_max, K)
    q[0] = q_max
    return payload, rate, q


@pytest.mark.criterion(4, "mean uplink delay with retransmission")
def test_delay_formula(record_property):
    rng = np.random.default_rng(0)
    episodes = 100_000
    start = time.perf_counter()
    worst = 0.0
    for K in (1, 2, 5):
        for q_max in (0.0, 0.5, 0.9):
            payload, rate, q = _random_links(rng, K, q_max)
            links = list(zip(payload, rate, q))
            closed = ch.avg_uplink_delay(links)
            sim = ch.simulate_uplink_delays(links, episodes, rng).mean()
            worst = max(worst, abs(sim - closed) / closed)
        # the same episodes driven through the simulator's transmission step
        payload, rate, q = _random_links(rng, K, 0.9)
        lk = en.Links(np.full(K, 1e5), np.full(K, 4), rate, q, np.full(K, 100.0), payload)
        delays = [en.transmit_round(lk, RADIO, rng).delay for _ in range(episodes)]
        closed = ch.avg_uplink_delay(list(zip(payload, rate, q)))
        worst = max(worst, abs(np.mean(delays) - closed) / closed)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max relative error {worst:.4f}, {elapsed:.0f} s")
    assert worst <= 0.01
    assert elapsed < 60.0


# ---------------------------------------------------------------- 5

def _phi_oracle(x, d, weight, radio):
    """Client objective term evaluated from the channel model alone."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.inf)
    pos = x > 0
    th = ch.theta(d, radio.q_max, radio.channel)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lv = ch.quant_level_for_bandwidth(x[pos], th, radio.p_max, radio.channel.n0,
                                          radio.tau_max, radio.m, radio.mu)
        val = weight / np.expm1(lv * np.log(2.0)) ** 2
    out[pos] = np.where(lv >= 1.0, val, np.inf)
    return out


def _default_instances():
    out = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        tau = 0.05 if seed % 2 == 0 else 0.1
        radio = en.Radio(tau_max=tau)
        d = sc.place_clients(100, 600.0, rng)
        p = rng.dirichlet(np.ones(100))
        out.append((radio, d, p))
    return out


@pytest.fixture(scope="module")
def default_solutions():
    sols = []
    for radio, d, p in _default_instances():
        problem = radio.problem(d, p)
        sols.append((radio, problem, al.solve_offline(problem)))
    return sols


CRIT5 = "allocator correctness"


@pytest.mark.criterion(5, CRIT5)
def test_allocator_flat_outage(default_solutions, record_property):
    worst = 0.0
    for radio, problem, sol in default_solutions:
        worst = max(worst, float(np.max(np.abs(sol.q - radio.q_max))))
        for i in range(problem.n):
            link = ch.LinkBudget(problem.distances[i], radio.p_max, sol.w[i], sol.r[i])
            worst = max(worst, abs(ch.outage_prob(link, radio.channel).q - radio.q_max))
    record_property("detail", f"(a) max |q - q_max| {worst:.1e}")
    assert worst <= 1e-8


def _small_instance(rng, n):
    while True:
        radio = en.Radio(w_total=n * 200e3)
        d = rng.uniform(50.0, 500.0, n)
        p = rng.dirichlet(np.ones(n))
        problem = radio.problem(d, p)
        if problem.lower_bounds.sum() < 0.9 * radio.w_total:
            return radio, d, p, problem


@pytest.mark.criterion(5, CRIT5)
def test_allocator_matches_grid_search(record_property):
    rng = np.random.default_rng(5)
    steps = 1000
    worst = 0.0
    for n in (2, 3):
        for _ in range(5):
            radio, d, p, problem = _small_instance(rng, n)
            h = radio.w_total / steps
            x = h * np.arange(steps + 1)
            phi = np.array([_phi_oracle(x, d[i], p[i], radio) for i in range(n)])
            if n == 2:
                total = phi[0] + phi[1][::-1]
                k = int(np.argmin(total))
                grid = np.array([x[k], radio.w_total - x[k]])
            else:
                i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
                rest = steps - i - j
                total = np.where(rest >= 0, phi[0][i] + phi[1][j] + phi[2][np.maximum(rest, 0)],
                                 np.inf)
                a, b = np.unravel_index(int(np.argmin(total)), total.shape)
                grid = np.array([x[a], x[b], radio.w_total - x[a] - x[b]])
            relaxed = al.solve_relaxed(problem)[0]
            worst = max(worst, float(np.max(np.abs(relaxed - grid))) / radio.w_total)
    record_property("detail", f"(b) max grid gap {worst:.1e} W_total")
    assert worst <= 1e-3


@pytest.mark.criterion(5, CRIT5)
def test_allocator_objective_convex(default_solutions, record_property):
    rng = np.random.default_rng(6)
    worst = np.inf
    instances = [_small_instance(rng, 3)[:3] for _ in range(5)]
    instances += [(radio, problem.distances, problem.weights)
                  for radio, problem, _ in default_solutions[:4]]
    for radio, d, p in instances:
        problem = radio.problem(d, p)
        for i in range(problem.n):
            lo = problem.lower_bounds[i]
            hi = max(min(radio.w_total, problem.bandwidth_for(i, 12)), 1.01 * lo)
            vals = _phi_oracle(np.linspace(lo, hi, 400), d[i], p[i], radio)
            second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
            worst = min(worst, float(second.min() / np.max(vals)))
        assert al.check_convexity(problem).ok
    record_property("detail", f"(c) min relative second difference {worst:.1e}")
    assert worst >= -1e-8


@pytest.mark.criterion(5, CRIT5)
def test_allocator_beats_uniform_bandwidth(default_solutions, record_property):
    gains = []
    for radio, problem, sol in default_solutions:
        _, _, base = al.uniform_bandwidth_levels(problem)
        assert sol.objective <= base
        if radio.tau_max == 0.05:
            assert sol.objective < base
            gains.append(base / sol.objective)
    record_property("detail", f"(d) baseline/FedTOE objective at 50 ms: min {min(gains):.2f}")


@pytest.mark.criterion(5, CRIT5)
def test_allocator_monotone_bandwidth():
    # equal data sizes, so distance alone orders the clients
    for radio, d, _ in _default_instances():
        sol = al.solve_offline(radio.problem(d, np.full(d.size, 1.0 / d.size)))
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(sol.w[order]) >= 0.0)


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "bound structure under uniform and non-uniform outage")
def test_bound_structure(record_property):
    rng = np.random.default_rng(0)
    smallest = np.inf
    for _ in range(50):
        n = int(rng.integers(2, 6))
        K = int(rng.integers(2, 5))
        M = 400
        p = rng.dirichlet(np.ones(n))
        D = rng.uniform(0.1, 5.0, n)
        J = rng.uniform(0.0, 1.0, (M, n))
        common = dict(L=float(rng.uniform(0.5, 2.0)), sigma_sq=float(rng.uniform(0.1, 3.0)),
                      b=16, D_sq=D, J_sq=J, p=p, K=K, E=1, M=M,
                      F0_minus_Flow=float(rng.uniform(0.5, 5.0)))
        uni = an.BoundInputs(q=np.full(n, float(rng.uniform(0.0, 0.6))), **common)
        t = an.theorem1_rhs(uni)
        assert t.outage_bias == 0.0 and t.outage_variance == 0.0
        c = an.corollary1_rhs(uni)
        assert c.total == pytest.approx(t.total, rel=1e-12)
        for name in an.BoundTerms.NAMES:
            assert getattr(c, name) == pytest.approx(getattr(t, name), rel=1e-12, abs=1e-300)
        q = rng.uniform(0.0, 0.6, n)
        t = an.theorem1_rhs(an.BoundInputs(q=q, **common))
        assert t.outage_bias > 0.0 and t.outage_variance > 0.0
        smallest = min(smallest, t.outage_bias, t.outage_variance)
    record_property("detail", f"50 instances, smallest non-uniform bias term {smallest:.1e}")


# ---------------------------------------------------------------- 7

def _schedule(M, k_bar, L):
    """Largest admissible E for M rounds and the matching step size."""
    E = 1
    while E + 1 <= an.schedule_hyperparams(M * (E + 1), k_bar, L)[1]:
        E += 1
    return an.schedule_hyperparams(M * E, k_bar, L)[0], E


@pytest.mark.criterion(7, "bound dominates the simulated gradient norm")
def test_bound_dominance(record_property):
    K, b, n = 4, 16, 10
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = sc.place_clients(n, 600.0, rng)
        task = sc.make_quadratic(n, 5, 1.0, 0.5, rng, samples=rng.integers(20, 200, n))
        links = en.allocation_links(RADIO, d, task.p)
        q = np.asarray(links.q)
        assert an.is_uniform(q)
        stats = an.uniform_stats(task.p, float(q[0]), K)
        w0 = task.initial_point()
        D = sc.heterogeneity_D(task, w0).ball
        for M in (125, 250, 500):
            gamma, E = _schedule(M, stats.k_bar, task.L)
            cfg = en.SimConfig(K=K, E=E, M=M, gamma=gamma, b=b, scheme="fedtoe", seed=seed)
            res = en.run(cfg, task, d, RADIO, links=links)
            J = np.array([r.qe_bound_max for r in res.records])
            inputs = an.BoundInputs(L=task.L, sigma_sq=task.sigma_sq, b=b, D_sq=D,
                                    J_sq=np.repeat(J[:, None], n, axis=1), p=task.p, q=q, K=K,
                                    E=E, M=M, F0_minus_Flow=task.global_loss(w0) - task.F_low,
                                    gamma=gamma)
            rhs = an.theorem1_rhs(inputs, stats).total
            lhs = float(np.mean([r.grad_sq_start for r in res.records]))
            worst = max(worst, lhs / rhs)
    elapsed = time.perf_counter() - start
    record_property("detail", f"20 seeds x 3 horizons, max empirical/bound {worst:.3f}, "
                              f"{elapsed:.0f} s")
    assert worst <= 1.0
    assert elapsed < 600.0


# ---------------------------------------------------------------- 8

def _bias_runs(heterogeneity, seeds=range(10), M=1500, gamma=0.01):
    radio = en.Radio(w_total=2e6)
    d = np.linspace(100.0, 600.0, 10)
    B = 4
    problem = radio.problem(d, np.ones(10))
    flat = en._solution_links(radio, problem, problem.bandwidths_for(np.full(10, B)),
                              np.full(10, B))
    skew = en.fixed_level_links(radio, d, B, 10)
    assert np.all(np.abs(flat.q - radio.q_max) <= 1e-8)
    assert skew.q.max() - skew.q.min() > 0.3
    assert flat.w.sum() <= radio.w_total
    ratios, bits = [], []
    for seed in seeds:
        task = sc.make_quadratic(10, 5, heterogeneity, 0.5, np.random.default_rng(100 + seed),
                                 curvature=(0.5, 1.0))
        out = {}
        for name, lk in (("flat", flat), ("skew", skew)):
            cfg = en.SimConfig(K=10, E=1, M=M, gamma=gamma, b=32, scheme="fedtoe", seed=seed,
                               participation="full")
            recs = en.run(cfg, task, d, radio, links=lk).records
            tail = np.mean([r.grad_sq for r in recs[-M // 5:]])
            out[name] = (tail, sum(r.bits for r in recs))
        ratios.append(out["skew"][0] / out["flat"][0])
        bits.append(out["skew"][1] / out["flat"][1])
    return np.array(ratios), np.array(bits)


@pytest.mark.criterion(8, "outage bias under non-iid data, none under iid")
def test_bias_phenomenon(record_property):
    start = time.perf_counter()
    noniid, bits_a = _bias_runs(3.0)
    iid, bits_b = _bias_runs(0.0)
    elapsed = time.perf_counter() - start
    record_property("detail", f"non-iid ratio min {noniid.min():.1f}, iid ratio max "
                              f"{iid.max():.2f}, {elapsed:.0f} s")
    assert np.all(np.abs(np.concatenate([bits_a, bits_b]) - 1.0) <= 0.01)
    assert np.all(noniid >= 10.0)
    assert np.all(iid < 2.0)
    assert elapsed < 600.0


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9, "no outage and lossless uploads reproduce the ideal scheme")
def test_degenerate_equivalence():
    rng = np.random.default_rng(0)
    n = 8
    task = sc.make_quadratic(n, 6, 1.0, 0.5, rng, samples=rng.integers(10, 100, n))
    d = sc.place_clients(n, 600.0, rng)
    lk = en.Links(np.full(n, 1e5), np.full(n, 3), np.full(n, 1e6), np.zeros(n), d,
                  np.full(n, 50_000))
    for K, E, part in ((3, 1, "partial"), (5, 3, "partial"), (n, 2, "full")):
        base = dict(K=K, E=E, M=40, gamma=0.1, b=8, seed=11, participation=part)
        a = en.run(en.SimConfig(scheme="fedtoe", lossless=True, **base), task, d, RADIO,
                   links=lk)
        b = en.run(en.SimConfig(scheme="ideal", **base), task, d, RADIO)
        assert a.w.tobytes() == b.w.tobytes()
        for ra, rb in zip(a.records, b.records):
            assert (ra.loss, ra.grad_sq, ra.selected) == (rb.loss, rb.grad_sq, rb.selected)


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10, "verify and simulate outputs are bit-identical across runs")
def test_cli_reproducible(tmp_path):
    for command, files in (("verify", ["verify_report.txt"]),
                           ("simulate", ["rounds.jsonl", "summary.csv", "curves.svg"])):
        for run in ("a", "b"):
            assert cli.main([command, "--out", str(tmp_path / command / run)]) == 0
        for name in files:
            first = (tmp_path / command / "a" / name).read_bytes()
            assert first and first == (tmp_path / command / "b" / name).read_bytes()
