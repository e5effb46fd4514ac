"""One test per acceptance criterion; each records a PASS/FAIL line.

The lines are printed in the terminal summary of every pytest run (see
``conftest.py``) and on stdout when run with ``-s``.
"""

import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from unlearnlab.harness import ExperimentConfig, load_config, run_sweep
from unlearnlab.masks import (
    AggSpec, GradientPair, agg, agree_prob, agree_prob_histogram, focus_vector, mask_and, mask_prob,
    regime_counts, update_direction,
)
from unlearnlab.nn_core import LOSS_KINDS, Batch, ModelSpec, grad, init_params, loss
from unlearnlab.unlearn import constraint_grad, constraint_value, make_method, objective_grad, objective_value

from conftest import ACCEPTANCE_LINES, random_net

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(n, title, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_01_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    h = 1e-5
    worst, bad = 0.0, 0
    for case in range(50):
        kind = LOSS_KINDS[case % len(LOSS_KINDS)]
        spec, theta, batch = random_net(rng)
        # a generic point: zero-initialised biases can put ReLU inputs exactly on the kink
        theta = theta + 0.1 * rng.normal(size=theta.shape)
        ref = theta + 0.5 * rng.normal(size=theta.shape)
        g = grad(spec, theta, batch, kind, reference=ref)
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd = (loss(spec, tp, batch, kind, ref) - loss(spec, tm, batch, kind, ref)) / (2 * h)
            tol = max(1e-6, 1e-4 * abs(g[i]))
            worst = max(worst, abs(fd - g[i]) / tol)
            bad += abs(fd - g[i]) > tol
    elapsed = time.perf_counter() - t0
    verdict(1, "analytic gradients match central differences", bad == 0 and elapsed < 30,
            f"50 cases, {bad} violations, worst error/tolerance {worst:.1e}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 2

def test_02_kkt_product_nonpositive():
    """Quadratic U, linear C <= 0, projected gradient descent to convergence."""
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(200):
        a = rng.normal(size=2) * 3
        c = rng.normal(size=2)
        d = rng.normal()
        theta = np.zeros(2)
        for _ in range(5000):
            theta = theta - 0.1 * (theta - a)
            viol = c @ theta - d
            if viol > 0:
                theta = theta - viol * c / (c @ c)
        g_u, g_c = theta - a, c
        worst = max(worst, float(np.max(g_u * g_c)))
    # masked descent stalls only where no component agrees in sign
    g_u, g_c = np.array([1.0, -2.0, 0.0]), np.array([-3.0, 1.0, 5.0])
    stalled = mask_and(g_u, g_c).n_selected == 0 and np.all(g_u * g_c <= 0)
    verdict(2, "KKT product grad U * grad C <= 1e-6 at the constrained optimum", worst <= 1e-6 and stalled,
            f"200 problems, max product {worst:.2e}")


# ---------------------------------------------------------------- 3

def test_03_and_step_is_feasible():
    rng = np.random.default_rng(11)
    method = make_method("NGPlus")
    failures, halvings_used, strict = 0, 0, 0
    for _ in range(20):
        spec, theta, _ = random_net(rng)
        n = 24
        forget = Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, size=n))
        retain = Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, size=n))
        g_u = objective_grad(spec, theta, method, forget, theta)
        g_c = constraint_grad(spec, theta, method, retain, theta)
        d = update_direction(mask_and(g_u, g_c), AggSpec(), g_u, g_c)
        u0 = objective_value(spec, theta, method, forget, theta)
        eta, ok = 1e-6, False
        for k in range(5):
            new = theta + eta * d
            du = objective_value(spec, new, method, forget, theta) - u0
            c = constraint_value(spec, method, new, theta, retain)
            if du <= 1e-12 and c <= 1e-12:
                ok, halvings_used = True, max(halvings_used, k)
                strict += du < 0
                break
            eta /= 2
        failures += not ok
    verdict(3, "AND step lowers U and keeps C <= 1e-12", failures == 0,
            f"20 nets, {failures} failures, max halvings {halvings_used}, strict U decrease in {strict}/20")


# ---------------------------------------------------------------- 4

def test_04_vicinity_bound():
    rng = np.random.default_rng(5)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        g_u = rng.normal(size=n) * 10 ** rng.uniform(-4, 4)
        g_c = rng.normal(size=n) * 10 ** rng.uniform(-4, 4)
        eta = Fraction(float(10 ** rng.uniform(-8, 0)))
        m = mask_and(g_u, g_c)
        k = m.n_selected
        gc_inf = Fraction(float(np.max(np.abs(g_c))))
        for spec in (AggSpec(), AggSpec("abs_min")):
            delta = [Fraction(float(v)) for v in update_direction(m, spec, g_u, g_c)]
            d_inf = max(abs(v) for v in delta)
            for q in (1, 2, 4):
                # compare q-th powers exactly: |eta D|_q^q <= eta^q |m|_0 |D|_inf^q
                lhs = sum(abs(eta * v) ** q for v in delta)
                violations += lhs > eta**q * k * d_inf**q
                if spec.kind == "abs_min":
                    violations += lhs > eta**q * k * gc_inf**q
    verdict(4, "vicinity bound for q in {1, 2, 4}, both aggregations", violations == 0,
            f"1000 draws in exact rational arithmetic, {violations} violations")


# ---------------------------------------------------------------- 5

def test_05_agree_prob_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    n = 10**6
    misses, worst = 0, 0.0
    for _ in range(100):
        s_u, s_c = rng.uniform(0.1, 3.0, size=2)
        g_u, g_c = rng.uniform(-3, 3, size=2) * np.array([s_u, s_c])
        f = agree_prob(GradientPair(np.array([g_u]), np.array([g_c]), np.array([s_u**2]), np.array([s_c**2])),
                       eps=0.0)[0]
        tu = g_u - s_u * rng.standard_normal(n)
        tc = g_c - s_c * rng.standard_normal(n)
        mc = np.count_nonzero(tu * tc > 0) / n
        sd = np.sqrt(f * (1 - f) / n)
        z = abs(mc - f) / sd
        worst = max(worst, z)
        misses += z > 3
    elapsed = time.perf_counter() - t0
    verdict(5, "agreement probability matches Monte Carlo within 3 binomial sd", misses == 0 and elapsed < 120,
            f"100 configs x 1e6 draws, {misses} outside 3 sd, max |z| {worst:.2f}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 6

def test_06_prob_mask_equivalences():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(500):
        n = 50
        g_u = rng.normal(size=n) * 10 ** rng.uniform(-6, 3, size=n)
        g_c = rng.normal(size=n) * 10 ** rng.uniform(-6, 3, size=n)
        g_u[rng.random(n) < 0.1] = 0.0
        s_u, s_c = 10 ** rng.uniform(-8, 4, size=n), 10 ** rng.uniform(-8, 4, size=n)
        nz = (g_u != 0) & (g_c != 0)
        and_w = mask_and(g_u, g_c).weights
        half = mask_prob(GradientPair(g_u, g_c, s_u, s_c), 0.5).weights
        mismatches += int(np.count_nonzero(half[nz] != and_w[nz]))
        zero = np.zeros(n)
        for p in (0.1, 0.3, 0.7, 0.9):
            w = mask_prob(GradientPair(g_u, g_c, zero, zero), p, eps=1e-30).weights
            mismatches += int(np.count_nonzero(w[nz] != and_w[nz]))
    verdict(6, "PROB(p=1/2) equals AND; noiseless PROB equals AND for p in {0.1, 0.3, 0.7, 0.9}", mismatches == 0,
            f"500 x 50 components, {mismatches} mismatches")


# ---------------------------------------------------------------- 7

def test_07_focus_feasible_in_expectation():
    rng = np.random.default_rng(8)
    draws, n = 10**5, 8
    alpha, beta = 0.3, 0.7
    s_u = rng.uniform(0.2, 2.0, size=(draws, n))
    s_c = rng.uniform(0.2, 2.0, size=(draws, n))
    # independent zero-mean measurements, so E<g_hat_U, g_hat_C> = 0
    gh_u = rng.normal(size=(draws, n)) * rng.uniform(0.1, 3.0, size=(draws, 1))
    gh_c = rng.normal(size=(draws, n)) * rng.uniform(0.1, 3.0, size=(draws, 1))
    # true gradients from the Gaussian noise model g = g_hat - N
    g_u = gh_u - s_u * rng.standard_normal((draws, n))
    g_c = gh_c - s_c * rng.standard_normal((draws, n))
    f = agree_prob(GradientPair(gh_u.ravel(), gh_c.ravel(), (s_u**2).ravel(), (s_c**2).ravel())).reshape(draws, n)
    delta = -f * agg(AggSpec("linear", alpha, beta), gh_u, gh_c)
    ok, parts = True, []
    for name, g in (("U", g_u), ("C", g_c)):
        ip = np.sum(delta * g, axis=1)
        mean, se = ip.mean(), ip.std(ddof=1) / np.sqrt(draws)
        ok &= mean <= 3 * se
        parts.append(f"<D_F, g_{name}> mean {mean:.4f} (3 se {3 * se:.4f})")
    verdict(7, "focus update feasible in expectation", bool(ok), "1e5 draws, " + ", ".join(parts))


# ---------------------------------------------------------------- 8

def test_08_focus_limits():
    rng = np.random.default_rng(9)
    g_u, g_c = rng.normal(size=10**4), rng.normal(size=10**4)
    tiny, huge = np.full(10**4, 1e-24), np.full(10**4, 1e24)
    lo = focus_vector(GradientPair(g_u, g_c, tiny, tiny), eps=1e-30).weights
    hi = focus_vector(GradientPair(g_u, g_c, huge, huge)).weights
    e_lo = float(np.max(np.abs(lo - mask_and(g_u, g_c).weights)))
    e_hi = float(np.max(np.abs(hi - 0.5)))
    verdict(8, "focus -> AND at sigma^2=1e-24 and -> 1/2 at sigma^2=1e24", e_lo <= 1e-9 and e_hi <= 1e-6,
            f"max deviations {e_lo:.1e} and {e_hi:.1e}")


# ---------------------------------------------------------------- 9 and 12

@pytest.fixture(scope="module")
def srl_sweep(tmp_path_factory):
    cfg = replace(load_config(CONFIGS / "default.cfg"), output_dir=str(tmp_path_factory.mktemp("srl")))
    t0 = time.perf_counter()
    records = run_sweep(cfg)
    return cfg, records, time.perf_counter() - t0


def test_09_srl_focus_ordering(srl_sweep):
    cfg, records, elapsed = srl_sweep
    assert cfg.methods == ["SRL"] and cfg.addons == ["none", "focus"] and len(cfg.seeds) == 5
    assert cfg.unlearn_epochs == 10 and cfg.fraction == 0.1 and cfg.model.num_classes == 4
    stats = {}
    for addon in cfg.addons:
        final = [r.reports[-1] for r in records if r.addon == addon and r.status == "ok"]
        assert len(final) == 5 and all(f.epoch == 10 for f in final)
        stats[addon] = (np.mean([abs(f.rua) for f in final]), np.mean([f.mia["entropy"] for f in final]))
    (rua_n, mia_n), (rua_f, mia_f) = stats["none"], stats["focus"]
    ok = rua_f < rua_n and mia_f < mia_n and elapsed < 15 * 60
    verdict(9, "SRL-F beats SRL on |rUA| and MIA-entropy", ok,
            f"|rUA| {rua_f:.2f} vs {rua_n:.2f}, MIA {mia_f:.3f} vs {mia_n:.3f}, 5 seeds, {elapsed:.0f} s")


def test_12_agree_prob_histogram(srl_sweep, tmp_path):
    from unlearnlab.harness import emit_figures
    cfg, records, _ = srl_sweep
    out = emit_figures(records, tmp_path)
    n_params = cfg.model.num_params
    partition = all(sum(r.agree_hist) == n_params and sum(r.regimes.values()) == n_params for r in records)
    rows = [l.split(",") for l in out["paths"]["agree_prob_hist"].read_text().splitlines()[1:]]
    focus_mass = sum(float(r[2]) for r in rows if r[1] == "SRL-focus")
    regimes = out["regimes"]["SRL-focus"]
    all_three = all(v > 0 for v in regimes.values())
    verdict(12, "mid-run agreement histogram partitions the parameters", partition and
            focus_mass == n_params and all_three,
            f"{n_params} parameters, regimes <0.35 / [0.35,0.65] / >0.65 = "
            f"{regimes['disagree']:.0f} / {regimes['uncertain']:.0f} / {regimes['agree']:.0f}")


# ---------------------------------------------------------------- 10

def test_10_ngplus_and_collapse(tmp_path):
    cfg = replace(load_config(CONFIGS / "ngplus_classwise.cfg"), output_dir=str(tmp_path))
    assert cfg.scenario == "class_fraction"
    records = run_sweep(cfg)
    ra = {a: np.mean([[x.ra for x in r.reports] for r in records if r.addon == a], axis=0) for a in cfg.addons}
    gap = np.minimum(ra["prob"], ra["focus"]) - ra["and"]
    epochs = [int(e) for e in np.flatnonzero(gap > 5)]
    verdict(10, "NGPlus-AND loses > 5 RA points to both NGPlus-PROB and NGPlus-F", len(epochs) > 0,
            f"class-wise, 5 seeds, gap by epoch {np.round(gap, 1).tolist()}, > 5 at epochs {epochs}")


# ---------------------------------------------------------------- 11

def test_11_bit_identical_rerun(tmp_path):
    base = dict(
        model=ModelSpec(4, (8,), 3),
        dataset={"name": "blobs", "per_class": 30, "test_per_class": 10, "dim": 4, "separation": 4.0},
        train_epochs=5, unlearn_epochs=2, unlearn_lr=0.3, batch_size=16, seeds=[0, 1],
    )
    combos = [(["FT", "GA"], ["none", "salun"]),
              (["NGPlus", "SRL", "L1Sparse", "SCRUB"], ["none", "salun", "and", "prob", "bernoulli", "focus"])]
    identical, total = 0, 0
    for timing in ("off", "wallclock"):
        for methods, addons in combos:
            cfg = ExperimentConfig(**base, methods=methods, addons=addons, timing=timing)
            a = run_sweep(replace(cfg, output_dir=str(tmp_path / timing / "a")))
            b = run_sweep(replace(cfg, output_dir=str(tmp_path / timing / "b")))
            for ra, rb in zip(a, b):
                total += 1
                fa = (tmp_path / timing / "a" / "runs" / ra.run_id / "metrics.csv").read_text()
                fb = (tmp_path / timing / "b" / "runs" / rb.run_id / "metrics.csv").read_text()
                if timing == "wallclock":
                    # wall-clock seconds are the one column a rerun cannot reproduce
                    fa = "\n".join(l.rsplit(",", 1)[0] for l in fa.splitlines())
                    fb = "\n".join(l.rsplit(",", 1)[0] for l in fb.splitlines())
                identical += ra.run_id == rb.run_id and ra.status == "ok" and fa == fb
    verdict(11, "re-running a manifest reproduces its metrics CSV", identical == total,
            f"{identical}/{total} runs identical (bytes with timing off, all but rte_seconds with wall clock)")
