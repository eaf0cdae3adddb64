"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line each (run with `pytest -s tests/test_acceptance.py`).

The end-to-end reproduction (criterion 8) trains all three controller
variants on the RC plant for three seeds; with the certification run it
dominates the suite's runtime (tens of minutes on a desktop).
"""

import json

import numpy as np
import pytest

from tubedpc import certification as ct
from tubedpc import cli
from tubedpc import closedloop as cl
from tubedpc import diffengine as de
from tubedpc import harness as hz
from tubedpc import models as md
from tubedpc import plant as pl
from tubedpc import training as tr
from tubedpc import tube


def _line(num, ok, text):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {text}")
    assert ok, f"criterion {num}: {text}"


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(20260808)
    h = 1e-6
    worst = 0.0

    def check(loss_and_grad, named):
        nonlocal worst
        loss, grads = loss_and_grad(None)
        v = {k: rng.normal(size=a.shape) for k, a in named.items()}
        norm = np.sqrt(sum(float(np.sum(x * x)) for x in v.values()))
        v = {k: x / norm for k, x in v.items()}
        analytic = sum(float(np.sum(grads[k] * v[k])) for k in named)
        fplus = loss_and_grad(({k: a + h * v[k] for k, a in named.items()}))[0]
        fminus = loss_and_grad(({k: a - h * v[k] for k, a in named.items()}))[0]
        fd = (fplus - fminus) / (2 * h)
        err = abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-10)
        worst = max(worst, err)
        assert err < 1e-4, (err, analytic, fd)

    # policy network, 100 random small instances
    for i in range(100):
        params = md.init_policy(i, input_dim=int(rng.integers(4, 9)),
                                hidden=(int(rng.integers(4, 9)),), output_dim=2)
        named = md.policy_arrays(params)
        state = rng.normal(size=params.input_dim - 2)
        prices = rng.normal(size=2)
        target = rng.normal(size=2)

        def policy_loss(override, params=params, named=named, state=state,
                        prices=prices, target=target):
            saved = {k: v.copy() for k, v in named.items()}
            if override:
                for k in named:
                    named[k][...] = override[k]
            tape = de.Tape()
            binding = md.bind(named, tape)
            out = md.policy_forward(md.PolicyInput(state, prices), params,
                                    tape=tape, binding=binding)
            loss = de.reduce_sum(de.square(de.sub(out, target.reshape(1, -1))))
            grads = tape.backward(loss)
            res = float(loss.value), {k: grads[binding[k].node_id] for k in named}
            for k in named:
                named[k][...] = saved[k]
            return res

        check(policy_loss, named)

    # dynamics network, 100 random small instances
    for i in range(100):
        params = md.init_dynamics(1000 + i, n_x=2, n_u=1, n_d=1, d_model=4,
                                  n_blocks=1, n_heads=2, d_ff=6)
        named = md.dynamics_arrays(params)
        x = rng.normal(size=(1, 2))
        u = rng.normal(size=(1, 1))
        d = rng.normal(size=(1, 1))
        target = rng.normal(size=(1, 3))

        def dyn_loss(override, params=params, named=named, x=x, u=u, d=d, target=target):
            saved = {k: v.copy() for k, v in named.items()}
            if override:
                for k in named:
                    named[k][...] = override[k]
            tape = de.Tape()
            binding = md.bind(named, tape)
            out = md.dynamics_forward(x, u, d, params, tape=tape, binding=binding)
            loss = de.reduce_sum(de.square(de.sub(out, target)))
            grads = tape.backward(loss)
            res = float(loss.value), {k: grads[binding[k].node_id] for k in named}
            for k in named:
                named[k][...] = saved[k]
            return res

        check(dyn_loss, named)

    # full N=8 rollout composite loss, 100 random small instances
    box = cl.ConstraintBox([19.0, 19.0], [24.0, 24.0], [16.0], [26.0])
    for i in range(100):
        dyn = md.init_dynamics(2000 + i, n_x=2, n_u=1, n_d=1, d_model=4,
                               n_blocks=1, n_heads=2, d_ff=6,
                               out_bias=np.array([20.0, 20.0, 0.5]))
        pol = md.init_policy(3000 + i, input_dim=3 + 8, hidden=(5,), output_dim=1,
                             out_bias=np.array([21.0]))
        named = {}
        for k, v in md.dynamics_arrays(dyn).items():
            named[f"d.{k}"] = v
        for k, v in md.policy_arrays(pol).items():
            named[f"p.{k}"] = v
        x0 = rng.uniform(19.5, 23.5, size=(1, 2))
        d0 = rng.uniform(0.2, 1.0, size=(1, 1))
        prices = rng.uniform(0.2, 0.6, size=(1, 15))

        def rollout_loss(override, dyn=dyn, pol=pol, named=named, x0=x0, d0=d0,
                         prices=prices):
            saved = {k: v.copy() for k, v in named.items()}
            if override:
                for k in named:
                    named[k][...] = override[k]
            tape = de.Tape()
            traj = cl.rollout(x0, d0, prices, dyn, pol, n_steps=8, tape=tape)
            loss = cl.composite_loss(0.0, cl.constraint_loss(traj, box),
                                     cl.objective_loss(traj), 0.1, 10.0, 0.075)
            grads = tape.backward(loss)
            by_id = {id(arr): k for k, arr in named.items()}
            out = {}
            for nid, node in enumerate(tape.nodes):
                if node.op == "leaf" and id(node.value) in by_id:
                    out[by_id[id(node.value)]] = grads[nid]
            res = float(loss.value), out
            for k in named:
                named[k][...] = saved[k]
            return res

        check(rollout_loss, named)

    _line(1, worst < 1e-4,
          f"reverse-mode vs central differences over 300 instances, "
          f"worst relative error {worst:.2e} < 1e-4")


# ---------------------------------------------------------------------------
# 2. DARE
# ---------------------------------------------------------------------------

def test_criterion_2_dare():
    p = tube.solve_dare([[0.9]], [[1.0]], [[10.0]], [[1.0]])
    k = tube.feedback_gain([[0.9]], [[1.0]], p, [[1.0]])
    rho = tube.contraction_rate(p, k, [[10.0]], [[1.0]])
    ok = (abs(p[0, 0] - 10.74101) < 1e-5 and abs(k[0, 0] + 0.823346) < 1e-6
          and abs(rho - 0.005876) < 1e-6)
    # closed-form root sharpens the reference value to full precision
    p_exact = (9.81 + np.sqrt(9.81 ** 2 + 40.0)) / 2.0
    ok = ok and abs(p[0, 0] - p_exact) < 1e-6

    rng = np.random.default_rng(2)
    worst_res = 0.0
    for _ in range(50):
        n_x = int(rng.integers(1, 9))
        n_u = int(rng.integers(1, n_x + 1))
        a = rng.normal(size=(n_x, n_x))
        a *= rng.uniform(0.3, 0.95) / max(np.abs(np.linalg.eigvals(a)))
        b = rng.normal(size=(n_x, n_u))
        q, r = 10.0 * np.eye(n_x), np.eye(n_u)
        sol = tube.solve_dare(a, b, q, r)
        worst_res = max(worst_res, tube.dare_residual(a, b, q, r, sol))
    ok = ok and worst_res <= 1e-8
    _line(2, ok, f"scalar case P/K/rho exact; max fixed-point residual "
                 f"{worst_res:.2e} <= 1e-8 over 50 random systems")


# ---------------------------------------------------------------------------
# 3. contraction certificate
# ---------------------------------------------------------------------------

def test_criterion_3_contraction_certificate():
    rng = np.random.default_rng(3)
    box = cl.comfort_box()
    worst_ratio_slack = -np.inf
    worst_margin = -np.inf
    n_accepted = 0
    while n_accepted < 20:
        n_x = int(rng.integers(2, 9))
        n_u = int(rng.integers(1, 5))
        a = rng.normal(size=(n_x, n_x))
        a *= rng.uniform(0.3, 0.95) / max(np.abs(np.linalg.eigvals(a)))
        b = rng.normal(size=(n_x, n_u))
        q, r = 10.0 * np.eye(n_x), np.eye(n_u)
        small_box = cl.ConstraintBox(np.full(n_x, 19.0), np.full(n_x, 24.0),
                                     np.full(n_u, 16.0), np.full(n_u, 26.0))
        try:
            cert, _ = tube.build_certificate(a, b, q, r, eps=0.08, box=small_box,
                                             w_bound=0.1, n_steps=8)
        except (tube.DareError, tube.CertificateError):
            continue
        n_accepted += 1
        errs = rng.normal(size=(1000, n_x))
        errs /= np.linalg.norm(errs, axis=1, keepdims=True)
        ratio = tube.verify_contraction(a, b, cert.K, cert.P, cert.rho, errs, tol=1e-9)
        worst_ratio_slack = max(worst_ratio_slack, ratio - cert.rho)
        worst_margin = max(worst_margin, tube.lyapunov_margin(a, b, cert.K, cert.P, q, r))
        # quadratic sandwich on the Lyapunov value and the Lipschitz bound
        # on the auxiliary feedback, in the norm matching k_max
        for e in errs[:100]:
            v = e @ cert.P @ e
            assert cert.c_lower - 1e-9 <= v <= cert.c_upper + 1e-9
            assert np.max(np.abs(cert.K @ e)) <= cert.k_max * np.max(np.abs(e)) + 1e-12
    ok = worst_ratio_slack <= 1e-9 and worst_margin <= 1e-8
    _line(3, ok, f"20 accepted certificates, 1000 sampled errors each: "
                 f"max V-ratio slack {worst_ratio_slack:.2e} <= 1e-9, "
                 f"max Riccati-inequality eigenvalue {worst_margin:.2e} <= 1e-8; "
                 "quadratic bounds and Lipschitz condition hold on samples")


# ---------------------------------------------------------------------------
# 4. tightening schedule
# ---------------------------------------------------------------------------

def test_criterion_4_tightening_schedule():
    sched = tube.tightening_schedule(0.08, 0.25, 4)
    ok = np.allclose(sched.values, [0.0, 0.08, 0.12, 0.14], atol=1e-12)
    ok = ok and sched.values[0] == 0.0

    rng = np.random.default_rng(4)
    box = cl.comfort_box()
    for _ in range(200):
        rho = rng.uniform(0.01, 0.95)
        eps = rng.uniform(0.05, 0.9) * (1.0 - np.sqrt(rho))
        s = tube.tightening_schedule(eps, rho, 12)
        root = np.sqrt(rho)
        closed = eps * (1.0 - root ** np.arange(12)) / (1.0 - root)
        ok = ok and np.max(np.abs(s.values - closed)) <= 1e-12
        ok = ok and s.values[0] == 0.0 and np.all(np.diff(s.values) >= 0)
        ok = ok and np.all(s.values < eps / (1.0 - root))
        bounds = tube.tightened_sets(box, s)
        boxes = bounds.step_boxes()
        for j, bx in enumerate(boxes):
            ok = ok and np.all(bx.x_low >= box.x_low) and np.all(bx.x_high <= box.x_high)
            if j:
                ok = ok and np.all(bx.x_low >= boxes[j - 1].x_low - 1e-15)
                ok = ok and np.all(bx.x_high <= boxes[j - 1].x_high + 1e-15)
    _line(4, ok, "closed form to 1e-12, zero start, monotone, bounded, nested boxes")


# ---------------------------------------------------------------------------
# 5. PCGrad
# ---------------------------------------------------------------------------

def test_criterion_5_pcgrad():
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        g_dpc = rng.normal(size=n)
        g_id = rng.normal(size=n)
        g = tr.pcgrad_project(g_dpc, g_id)
        ok = ok and g @ g_id >= -1e-9
        ok = ok and np.allclose(tr.pcgrad_project(g, g_id), g, atol=1e-9)
    ok = ok and np.array_equal(tr.pcgrad_project(np.array([1.0, 1.0]),
                                                 np.array([1.0, -1.0])), [1.0, 1.0])
    ok = ok and np.allclose(tr.pcgrad_project(np.array([1.0, 0.0]),
                                              np.array([-1.0, 0.0])), 0.0, atol=1e-9)
    _line(5, ok, "10^4 random pairs: non-conflict >= -1e-9, orthogonal unchanged, "
                 "antiparallel annihilated, idempotent")


# ---------------------------------------------------------------------------
# 6. Hoeffding algebra
# ---------------------------------------------------------------------------

def test_criterion_6_hoeffding():
    v = ct.hoeffding_bound(0.99, 8000, 0.05)
    ok = abs(v - 0.976317) <= 1e-6
    ok = ok and ct.hoeffding_bound(0.42, 100, 1.0) == 0.42
    gap1 = 0.9 - ct.hoeffding_bound(0.9, 500, 0.05)
    gap4 = 0.9 - ct.hoeffding_bound(0.9, 2000, 0.05)
    ok = ok and abs(gap1 - 2 * gap4) < 1e-12
    _line(6, ok, f"mu_wc(0.99, 8000, 0.05) = {v:.6f}; delta=1 identity; "
                 "quadrupling m_val halves the gap")


# ---------------------------------------------------------------------------
# 7. small-instance certification oracle
# ---------------------------------------------------------------------------

def test_criterion_7_certify_grid_oracle():
    dyn = md.init_dynamics(7, n_x=2, n_u=1, n_d=1, d_model=4, n_blocks=1,
                           n_heads=2, d_ff=6, out_bias=np.array([21.0, 21.0, 0.4]))
    pol = md.init_policy(8, input_dim=3 + 3, hidden=(4,), output_dim=1,
                         out_bias=np.array([21.0]))
    box = cl.ConstraintBox([19.0, 19.0], [24.0, 24.0], [16.0], [26.0])
    tariff = pl.TOUTariff()
    n_steps = 3
    g = np.linspace(19.2, 23.8, 4)
    x0 = np.array([[a, b] for a in g for b in g])
    d0 = np.full((16, 1), 0.4)
    report = ct.certify(pol, dyn, ct.CertConfig(m_val=16, delta=0.05, mu_bound=0.5),
                        box, n_steps, tariff.window_from_step,
                        np.random.default_rng(9), x0=x0, d0=d0)

    rng2 = np.random.default_rng(9)
    starts = rng2.integers(0, 96, size=16)
    hits = 0
    for i in range(16):
        prices = tariff.window_from_step(int(starts[i]), 2 * n_steps - 1)
        x, d = x0[i].copy(), d0[i].copy()
        good = True
        for k in range(n_steps):
            win = prices[np.minimum(np.arange(k, k + n_steps), prices.size - 1)]
            u = md.policy_forward(md.PolicyInput(np.concatenate([x, d]), win), pol)
            if not (np.all(x >= box.x_low) and np.all(x <= box.x_high)
                    and np.all(u >= box.u_low) and np.all(u <= box.u_high)):
                good = False
            out = md.dynamics_forward(x, u, d, dyn)
            x, d = out[:2], out[2:]
        hits += good
    ok = report.mu_tilde == hits / 16.0
    _line(7, ok, f"mu_tilde {report.mu_tilde} equals brute-force fraction {hits}/16 exactly")


# ---------------------------------------------------------------------------
# 8 & 9. end-to-end reproduction and certification pipeline
# ---------------------------------------------------------------------------

SEEDS = (101, 102, 103)


def acceptance_train_config(epochs):
    return tr.TrainConfig(batch_size=64, policy_hidden=(32, 32), horizon=8,
                          joint_epochs=epochs, batches_per_epoch=6,
                          warm_start_max_epochs=40, warm_start_patience=5,
                          warm_start_tol=0.01, warm_start_lr=2e-3,
                          policy_out_bias=19.8)


@pytest.fixture(scope="module")
def trained_fleet():
    """Train all variants for all seeds once; reused by criteria 8 and 9."""
    pcfg = pl.RCPlantConfig()
    dataset = pl.generate_dataset(pcfg, steps=4000, seed=1000)
    tariff = pl.TOUTariff()
    fleet = {}
    for seed in SEEDS:
        fleet[seed] = {}
        for variant in ("dpc-c", "e2e", "e2e-g"):
            cfg = acceptance_train_config(60)
            fleet[seed][variant] = tr.train_variant(variant, dataset, cfg,
                                                    seed=seed, tariff=tariff)
    return {"plant": pcfg, "tariff": tariff, "fleet": fleet}


def test_criterion_8_end_to_end_ordering(trained_fleet):
    pcfg = trained_fleet["plant"]
    tariff = trained_fleet["tariff"]
    outcomes = {"a": [], "b": [], "c": []}
    details = []
    for seed in SEEDS:
        run = hz.RunConfig(days=3, seed=seed + 7)
        metrics = {}
        for variant in ("dpc-c", "e2e", "e2e-g"):
            art = trained_fleet["fleet"][seed][variant]
            plant_i = pl.RCPlant(pcfg, seed=run.seed)
            m, _ = hz.deploy(art["policy"], plant_i, run, tariff, horizon=8,
                             schedule=art["schedule"] if variant == "e2e-g" else None)
            metrics[variant] = m
        viol_g = metrics["e2e-g"].temperature_violation_degc_step
        viol_e = metrics["e2e"].temperature_violation_degc_step
        bill_c = metrics["dpc-c"].electricity_bill_eur
        bill_e = metrics["e2e"].electricity_bill_eur
        bill_g = metrics["e2e-g"].electricity_bill_eur
        outcomes["a"].append(viol_g <= 0.1 * viol_e)
        outcomes["b"].append(bill_e <= bill_c)
        outcomes["c"].append(bill_g <= 1.25 * bill_e)
        details.append(f"seed {seed}: viol G/E2E {viol_g:.1f}/{viol_e:.1f}, "
                       f"bills C/E2E/G {bill_c:.1f}/{bill_e:.1f}/{bill_g:.1f}")
    ok_a = sum(outcomes["a"]) >= 2
    ok_b = sum(outcomes["b"]) >= 2
    ok_c = sum(outcomes["c"]) >= 2
    print()
    for d in details:
        print("  " + d)
    _line("8", ok_a and ok_b and ok_c,
          f"majority over seeds {SEEDS}: "
          f"(a) viol(G) <= 10% viol(E2E) {outcomes['a']}; "
          f"(b) bill(E2E) <= bill(DPC-C) {outcomes['b']}; "
          f"(c) bill(G) <= 1.25 bill(E2E) {outcomes['c']}")


def test_criterion_9_certification_pipeline(trained_fleet):
    tariff = trained_fleet["tariff"]
    art = trained_fleet["fleet"][SEEDS[0]]["e2e-g"]
    cfg = acceptance_train_config(60)
    ccfg = ct.CertConfig(m_val=8000, delta=0.05, mu_bound=0.9)
    report = ct.certify(art["policy"], art["dynamics"], ccfg, cfg.box(8, 4),
                        cfg.horizon, tariff.window_from_step,
                        np.random.default_rng(SEEDS[0] + 9),
                        tightening=art["schedule"],
                        aux_low=cfg.aux_low, aux_high=cfg.aux_high)
    recomputed = ct.hoeffding_bound(ct.empirical_rate(report.indicators),
                                    report.m_val, report.delta)
    ok = (report.mu_wc >= 0.9 and report.passed
          and report.passed == (recomputed >= ccfg.mu_bound)
          and recomputed == report.mu_wc)
    _line(9, ok, f"trained guaranteed policy: mu_tilde={report.mu_tilde:.4f}, "
                 f"mu_wc={report.mu_wc:.4f} >= 0.9; pass flag matches "
                 "independent recomputation")


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({
        "plant": {"n_zones": 2},
        "training": {"batch_size": 16, "policy_hidden": [8], "d_model": 8,
                     "n_blocks": 1, "n_heads": 2, "d_ff": 12, "horizon": 4,
                     "joint_epochs": 2, "batches_per_epoch": 2,
                     "warm_start_max_epochs": 3, "warm_start_patience": 2},
        "certification": {"m_val": 128, "delta": 0.05, "mu_bound": 0.0},
        "run": {"days": 1},
        "dataset_steps": 400,
    }))

    def run_all(tag):
        ck = tmp_path / f"ck_{tag}.tdpc"
        rep = tmp_path / f"rep_{tag}.json"
        out = tmp_path / f"out_{tag}"
        assert cli.main(["train", "--variant", "e2e-g", "--config", str(cfg_path),
                         "--seed", "11", "--out", str(ck)]) == 0
        assert cli.main(["certify", "--config", str(cfg_path), "--checkpoint",
                         str(ck), "--seed", "12", "--report", str(rep)]) == 0
        assert cli.main(["run", "--config", str(cfg_path), "--checkpoint", str(ck),
                         "--seed", "13", "--out-dir", str(out)]) == 0
        return (ck.read_bytes(), rep.read_bytes(),
                (out / "trace.json").read_bytes(), (out / "summary.json").read_bytes())

    first = run_all("a")
    second = run_all("b")
    ok = all(x == y for x, y in zip(first, second))
    _line(10, ok, "train/certify/run twice with identical seeds: checkpoints, "
                  "reports and traces are byte-identical")
