"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The learning experiment (criterion 6) is the slow part: 16 pretraining runs
of 30 epochs each on a single CPU.
"""

import math
import time

import numpy as np
import pytest

from viewforge import autodiff as ad
from viewforge import cli
from viewforge import losses
from viewforge import training as tr
from viewforge.autodiff import Tensor
from viewforge.data import decode_tensor, encode_tensor, stack_bands
from viewforge.networks import EncoderNet, GeneratorNet, encoder_forward, generator_forward
from viewforge.views import PerturbationDelta, make_view, project_l1

import oracles
from fd import numerical_grad, rel_error
from gradcases import OP_CASES, check_case
from report import record


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- 1: gradient suite --------------------------------------------------------

def _loss_grad_error(loss_fn, arrays):
    ts = [t64(a.copy(), grad=True) for a in arrays]
    ad.backward(loss_fn(*ts))
    numeric = numerical_grad(lambda *arrs: loss_fn(*[t64(a) for a in arrs]).item(), arrays)
    return max(rel_error(t.grad, n) for t, n in zip(ts, numeric))


def _reversal_error(rng):
    # the reversed op's gradient must match the finite difference of the negated identity
    x = rng.standard_normal((3, 4))
    proj = rng.standard_normal((3, 4))
    t = t64(x.copy(), grad=True)
    ad.backward(ad.sum(ad.mul(ad.gradient_reversal(t), t64(proj))))
    (num,) = numerical_grad(lambda a: -float(np.sum(a * proj)), [x])
    return rel_error(t.grad, num)


def _adversarial_error(rng):
    """Generator gradient of the full viewmaker graph against FD of the negated encoder loss."""
    gen = GeneratorNet(2, width=3, blocks=1, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    enc = EncoderNet(2, embed_dim=8, widths=(4, 8, 8, 8), seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    xs = np.tile(rng.uniform(-0.5, 0.5, (2, 2, 16, 16)), (2, 1, 1, 1))
    noise = int(rng.integers(2 ** 31))
    name = "entry.weight"
    w0 = gen.params[name].data.copy()

    def views(w):
        gen.params[name].data = w
        return make_view(Tensor(xs), project_l1(PerturbationDelta(generator_forward(gen, xs, noise), 0.05)))

    v = views(w0.copy())
    ad.backward(losses.ntxent_loss(encoder_forward(enc, ad.gradient_reversal(v)), 0.5))
    analytic = gen.params[name].grad.copy()

    def objective(w):
        return losses.viewmaker_generator_loss(losses.ntxent_loss(encoder_forward(enc, views(w.copy())), 0.5)).item()

    (num,) = numerical_grad(objective, [w0.copy()], step=1e-6)
    gen.params[name].data = w0
    return rel_error(analytic, num)


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(2024)
    start = time.process_time()
    op_errors = {name: max(check_case(*case(rng), rng) for _ in range(20)) for name, case in OP_CASES.items()}
    op_errors["gradient_reversal"] = max(_reversal_error(rng) for _ in range(20))

    def divmaker_k(k):
        def run():
            B, D = int(rng.integers(1, 5)), int(rng.integers(2, 6))
            arrays = [rng.standard_normal((B, D)) for _ in range(k + 1)]
            return _loss_grad_error(lambda a, *vs: losses.divmaker_loss(a, list(vs), 0.3), arrays)
        return run

    def ntxent():
        B, D = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        return _loss_grad_error(lambda z: losses.ntxent_loss(z, 0.3), [rng.standard_normal((2 * B, D))])

    loss_errors = {
        "divmaker_k2": max(divmaker_k(2)() for _ in range(20)),
        "divmaker_k3": max(divmaker_k(3)() for _ in range(20)),
        "ntxent": max(ntxent() for _ in range(20)),
        "adversarial": max(_adversarial_error(rng) for _ in range(20)),
    }
    cpu = time.process_time() - start
    worst_op = max(op_errors, key=op_errors.get)
    worst_loss = max(loss_errors, key=loss_errors.get)
    ok = max(op_errors.values()) < 1e-4 and max(loss_errors.values()) < 1e-3 and cpu < 120
    record("1", ok, f"{len(op_errors)} ops, worst {worst_op} {op_errors[worst_op]:.1e}; "
                    f"{len(loss_errors)} losses, worst {worst_loss} {loss_errors[worst_loss]:.1e}; cpu {cpu:.0f}s")
    assert ok, (op_errors, loss_errors, cpu)


# -- 2: loss oracles ----------------------------------------------------------

def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(7)
    worst, cases = 0.0, 0
    for D in (4, 64):
        for B in range(1, 9):
            for K in (2, 3):
                for _ in range(3):
                    tau = float(rng.uniform(0.05, 1.0))
                    anchor = rng.standard_normal((B, D))
                    views = [rng.standard_normal((B, D)) for _ in range(K)]
                    got = losses.divmaker_loss(t64(anchor), [t64(v) for v in views], tau).item()
                    want = oracles.divmaker(anchor.tolist(), [v.tolist() for v in views], tau)
                    worst, cases = max(worst, abs(got - want)), cases + 1
            if B >= 2:
                for _ in range(3):
                    tau = float(rng.uniform(0.05, 1.0))
                    z = rng.standard_normal((2 * B, D))
                    got = losses.ntxent_loss(t64(z), tau).item()
                    worst, cases = max(worst, abs(got - oracles.ntxent(z.tolist(), tau))), cases + 1
    z = t64(np.tile([[0.4, -1.1, 2.0, 0.3]], (5, 1)))
    two_ln_two = losses.divmaker_loss(z, [z, z], 0.07).item()
    gap = abs(two_ln_two - 2 * math.log(2))
    ok = worst <= 1e-6 and gap <= 1e-9
    record("2", ok, f"{cases} batches, max |loss - oracle| {worst:.1e}; identical K=2 gap {gap:.1e}")
    assert ok


# -- 3: view invariants -------------------------------------------------------

def test_criterion_3_view_invariants():
    rng = np.random.default_rng(3)
    total, bad = 0, 0
    worst_ratio = 0.0
    for C in (3, 8, 10, 13):
        for _ in range(25):
            gen = GeneratorNet(C, width=8, seed=int(rng.integers(2 ** 31)))
            size = int(rng.choice([16, 32]))
            eps = float(rng.uniform(0.001, 0.5))
            # inputs well outside [-1, 1] exercise the clamp
            x = (rng.standard_normal((10, C, size, size)) * rng.uniform(0.5, 3.0)).astype(np.float32)
            delta = project_l1(PerturbationDelta(generator_forward(gen, x, int(rng.integers(2 ** 31))), eps))
            view = make_view(Tensor(x), delta).data
            mean_abs = delta.per_sample_mean_abs()
            in_range = np.all((view >= -1) & (view <= 1), axis=(1, 2, 3))
            within = mean_abs <= eps * (1 + 1e-5)
            bad += int(np.sum(~(in_range & within)))
            total += len(x)
            worst_ratio = max(worst_ratio, float(mean_abs.max() / eps))
    ok = total >= 1000 and bad == 0
    record("3", ok, f"{total - bad}/{total} outputs valid; max mean|delta|/eps {worst_ratio:.6f}")
    assert ok


# -- 4: divmaker objective separation -----------------------------------------

def test_criterion_4_divmaker_separation():
    config = tr.ExperimentConfig(method="divmaker", epochs=5, seed=4, budget=0.2,
                                 dataset=dict(num_classes=4, channels=8, resolution=32, samples_per_class=40,
                                              noise=0.3, seed=4))
    snaps = []

    def hook(stage, phase, t):
        snaps.append((stage, phase, t.encoder.params.tobytes(), t.generator.params.tobytes()))

    tr.pretrain(config, hook=hook)
    violations, steps = 0, 0
    for i in range(0, len(snaps), 4):
        (s0, _, e0, g0), (s1, _, e1, g1), (s2, _, e2, g2), (s3, _, e3, g3) = snaps[i:i + 4]
        assert (s0, s1, s2, s3) == ("generator", "generator", "encoder", "encoder")
        violations += (e0 != e1) + (g2 != g3) + (g0 == g1) + (e2 == e3)
        steps += 1
    ok = steps > 0 and violations == 0 and len(snaps) % 4 == 0
    record("4", ok, f"{steps} steps over 5 epochs, {violations} cross-updates or no-op updates")
    assert ok


# -- 5: adversarial contract --------------------------------------------------

def _viewmaker_grads(gen, enc, xs, noise, reverse):
    gen.params.zero_grad()
    enc.params.zero_grad()
    views = make_view(Tensor(xs), project_l1(PerturbationDelta(generator_forward(gen, xs, noise), 0.05)))
    if reverse:
        views = ad.gradient_reversal(views)
    ad.backward(losses.ntxent_loss(encoder_forward(enc, views), 0.07))
    return ({k: p.grad.copy() for k, p in gen.params.items()},
            {k: p.grad.copy() for k, p in enc.params.items()})


def test_criterion_5_adversarial_contract():
    rng = np.random.default_rng(5)
    worst_gen, worst_enc = 0.0, 0.0
    for trial in range(5):
        gen = GeneratorNet(3, width=4, seed=trial, dtype=np.float64)
        enc = EncoderNet(3, embed_dim=8, widths=(4, 8, 8, 8), seed=100 + trial, dtype=np.float64)
        xs = np.tile(rng.standard_normal((4, 3, 16, 16)), (2, 1, 1, 1))
        noise = int(rng.integers(2 ** 31))
        g_plain, e_plain = _viewmaker_grads(gen, enc, xs, noise, False)
        g_rev, e_rev = _viewmaker_grads(gen, enc, xs, noise, True)
        for k in g_plain:
            worst_gen = max(worst_gen, float(np.max(np.abs(g_rev[k] + g_plain[k]))))
        for k in e_plain:
            worst_enc = max(worst_enc, float(np.max(np.abs(e_rev[k] - e_plain[k]))))
    ok = worst_gen <= 1e-12 and worst_enc <= 1e-12
    record("5", ok, f"max |g_rev + g| {worst_gen:.1e}, max |e_rev - e| {worst_enc:.1e} over 5 float64 graphs")
    assert ok


# -- 6: desk-scale learning experiment ----------------------------------------

DESK = dict(num_classes=8, channels=8, resolution=32, samples_per_class=200, noise=0.3)
SEEDS = (0, 1, 2, 3)
METHODS = ("viewmaker", "divmaker", "expert_basic", "expert_full")
# budget and temperature per generator method, picked on the validation split
TUNED = {"viewmaker": dict(budget=0.05, temperature=0.2), "divmaker": dict(budget=0.5)}


@pytest.fixture(scope="module")
def desk_runs():
    baseline, runs = {}, {}
    for seed in SEEDS:
        base = tr.ExperimentConfig(method="expert_basic", dataset=dict(DESK, seed=seed), epochs=30, seed=seed)
        data = tr.prepare_data(base)
        untrained, _ = tr.build_networks(base, data.train.chw[0])
        baseline[seed] = tr.linear_probe(untrained, data.train, data.test, base).test_score
        for method in METHODS:
            config = base.replace(method=method, **TUNED.get(method, {}))
            start = time.process_time()
            result = tr.pretrain(config, data)
            cpu = time.process_time() - start
            score = tr.linear_probe(result.encoder, data.train, data.test, config).test_score
            runs[method, seed] = dict(score=score, cpu=cpu, history=result.history)
    return baseline, runs


def test_criterion_6a_beats_untrained_baseline(desk_runs):
    baseline, runs = desk_runs
    base = float(np.mean(list(baseline.values())))
    gains = {m: float(np.mean([runs[m, s]["score"] for s in SEEDS])) - base for m in METHODS}
    ok = all(g >= 0.15 for g in gains.values())
    record("6a", ok, f"untrained {base:.3f}; gains " + ", ".join(f"{m} {g:+.3f}" for m, g in gains.items()))
    assert ok, gains


def test_criterion_6b_generator_runs_under_ten_minutes(desk_runs):
    _, runs = desk_runs
    times = {f"{m}/{s}": runs[m, s]["cpu"] for m in ("viewmaker", "divmaker") for s in SEEDS}
    slowest = max(times, key=times.get)
    ok = all(t < 600 for t in times.values())
    record("6b", ok, f"slowest {slowest} {times[slowest]:.0f}s cpu")
    assert ok


def test_criterion_6c_divmaker_diversifies_views(desk_runs):
    _, runs = desk_runs
    first = float(np.mean([runs["divmaker", s]["history"][0].view_view_cos for s in SEEDS]))
    last = float(np.mean([runs["divmaker", s]["history"][-1].view_view_cos for s in SEEDS]))
    ok = last < first
    record("6c", ok, f"view-view cosine epoch 0 {first:.4f}, final {last:.4f}")
    assert ok


# -- 7: budget sweep ----------------------------------------------------------

SWEEP_BUDGETS = (0.005, 0.02, 0.05, 0.1, 0.2)


def test_criterion_7_budget_sweep(tmp_path):
    # shorter pretraining than criterion 6; the comparison is against a control on the same footing
    config = tr.ExperimentConfig(method="viewmaker", dataset=dict(DESK, seed=0), epochs=5, seed=0)
    data = tr.prepare_data(config)
    rows = tr.budget_sweep(config, SWEEP_BUDGETS, data=data)
    (tmp_path / "sweep.csv").write_text(tr.sweep_to_csv(rows))
    reread = tr.sweep_from_csv((tmp_path / "sweep.csv").read_text())

    control_cfg = config.replace(method="none")
    control = tr.linear_probe(tr.pretrain(control_cfg, data).encoder, data.train, data.test, control_cfg).test_score
    small = {r.method: r.score for r in reread if r.budget == min(SWEEP_BUDGETS)}
    complete = (len(reread) == 10 and all(r.status == "ok" and r.score is not None for r in reread)
                and {(r.budget, r.method) for r in reread} == {(b, m) for b in SWEEP_BUDGETS for m in tr.GENERATOR_METHODS})
    close = all(abs(s - control) <= 0.03 for s in small.values())
    ok = complete and close
    scores = ", ".join(f"{r.method}@{r.budget:g} {r.score:.3f}" for r in reread)
    record("7", ok, f"{len(reread)} rows; control {control:.3f}; {scores}")
    assert ok


# -- 8: band stacking ---------------------------------------------------------

def test_criterion_8_band_stack_fidelity():
    rng = np.random.default_rng(8)
    sizes = [20] * 2 + [60] * 6 + [120] * 4
    bands = [rng.uniform(0, 10000, (s, s)) for s in sizes]
    out = stack_bands(bands, (120, 120))
    worst = max(float(np.max(np.abs(out[i] - oracles.bilinear(b, 120, 120)))) for i, b in enumerate(bands))
    ok = out.shape == (12, 120, 120) and worst <= 1e-6
    record("8", ok, f"shape {out.shape}, max deviation from oracle {worst:.1e}")
    assert ok


# -- 9: determinism and IO ----------------------------------------------------

def _run_cli(tmp_path, name, data_dir, config_path):
    run = tmp_path / name
    assert cli.main(["pretrain", "--config", str(config_path), "--out", str(run)]) == 0
    assert cli.main(["visualize", "--checkpoint", str(run / cli.CHECKPOINT_NAME), "--data", str(data_dir),
                     "--n", "2", "--out", str(run / "vis")]) == 0
    files = {"metrics.csv": (run / "metrics.csv").read_bytes(),
             cli.CHECKPOINT_NAME: (run / cli.CHECKPOINT_NAME).read_bytes()}
    files.update({p.name: p.read_bytes() for p in sorted((run / "vis").glob("*.pgm"))})
    return files


def _mstf_cases(rng):
    special = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45, 5e-324, 3.4e38])
    for dtype in (np.float32, np.float64):
        for ndim in (1, 2, 3, 4):
            for _ in range(5):
                shape = tuple(int(n) for n in rng.integers(1, 6, ndim))
                a = rng.standard_normal(shape).astype(dtype)
                flat = a.reshape(-1)
                flat[:min(len(flat), len(special))] = special[:len(flat)].astype(dtype)
                yield a


def test_criterion_9_determinism_and_io(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text('{"num_classes": 3, "channels": 4, "resolution": 16, "samples_per_class": 12, "seed": 9}')
    assert cli.main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    mismatched = []
    for method in ("viewmaker", "divmaker"):
        cfg = tmp_path / f"{method}.json"
        cfg.write_text(f'{{"method": "{method}", "dataset": "data", "epochs": 2, "batch_size": 8, "seed": 3}}')
        a = _run_cli(tmp_path, f"{method}_a", tmp_path / "data", cfg)
        b = _run_cli(tmp_path, f"{method}_b", tmp_path / "data", cfg)
        assert set(a) == set(b) and len(a) == 2 + 2 * 4 * 3
        mismatched += [f"{method}/{k}" for k in a if a[k] != b[k]]

    rng = np.random.default_rng(9)
    arrays = list(_mstf_cases(rng))
    roundtrip_bad = 0
    for a in arrays:
        back, end = decode_tensor(encode_tensor(a))
        roundtrip_bad += not (back.dtype == a.dtype and back.shape == a.shape and back.tobytes() == a.tobytes())
    ok = not mismatched and roundtrip_bad == 0
    record("9", ok, f"reruns differ in {mismatched or 'no files'}; MSTF {len(arrays) - roundtrip_bad}/{len(arrays)} "
                    "f32/f64 tensors of rank 1-4 bit-exact")
    assert ok
