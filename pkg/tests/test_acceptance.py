"""The ten acceptance criteria, one test each, with a pass/fail line per criterion."""

import contextlib
import csv
import io
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from certmon.cone import calibrate_bloat, unroll
from certmon.dynamics import make_spec, simulate
from certmon.geometry import DELTA, Box
from certmon.harness import (
    VIOLATION, make_controller, read_config, run_experiment,
    sample_initial_states,
)
from certmon.monitor import MonitorConfig, monitor_init, monitor_next, relu_plugins, schematic_next
from certmon.network import (
    ActivationPattern, activation_pattern, forward, forward_batch, masked_affine, preactivations, random_network,
)
from certmon.synthetic import affine_cbf, make_synthetic_cbf
from certmon.verifier import ROBUST, VALID, VerifierConfig, make_cube, verify_linear
from conftest import ACCEPTANCE, CONFIGS, ROOT, integrator_spec

HORIZONS = [40, 80, 120, 160, 200]


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    info = {}
    try:
        yield info
    except BaseException as exc:
        line = f"criterion {n:2d} FAIL  {title}: {exc!s}".splitlines()[0]
        ACCEPTANCE[n] = line
        print(line)
        raise
    detail = f" ({info['detail']})" if "detail" in info else ""
    line = f"criterion {n:2d} PASS  {title}{detail} [{time.perf_counter() - t0:.1f} s]"
    ACCEPTANCE[n] = line
    print(line)


@pytest.fixture(scope="module")
def sandbox_run():
    cfg = read_config(CONFIGS / "experiment_sandbox.json")
    cfg.output = None
    return run_experiment(cfg, write=False)


def test_c1_masked_affine_equivalence():
    with criterion(1, "masked-affine equivalence") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(10):
            depth = int(rng.integers(1, 5))
            widths = [int(w) for w in rng.integers(1, 17, depth)]
            dim = int(rng.integers(1, 7))
            net = random_network(widths, dim, rng)
            X = rng.uniform(-3, 3, (1000, dim))
            ref = forward_batch(net, X)
            for x, f in zip(X, ref):
                m = masked_affine(net, activation_pattern(net, x)).value(x)
                worst = max(worst, abs(f - m) / (1 + abs(f)))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"worst relative gap {worst:.1e}, {elapsed:.2f} s"
        assert worst <= 1e-9, f"worst relative gap {worst}"
        assert elapsed < 5.0, f"took {elapsed:.1f} s"


def _grid_oracle(net, spec, n=401, band=1e-3, face=1e-3, h=1e-6):
    """Worst-case flow value per activation key, from finite differences on grid points in the band."""
    g = np.linspace(spec.state_bounds.lower[0], spec.state_bounds.upper[0], n)
    X = np.array(list(itertools.product(g, g)))
    B = forward_batch(net, X)
    X = X[np.abs(B) <= band]
    grads = np.stack([(forward_batch(net, X + h * e) - forward_batch(net, X - h * e)) / (2 * h) for e in np.eye(2)], 1)
    lo, hi = spec.control_box.lower, spec.control_box.upper
    q = np.sum(np.minimum(grads * lo, grads * hi), axis=1)  # pure integrator: flow is u
    out = {}
    for x, val in zip(X, q):
        z = np.hstack(preactivations(net, x))
        if np.min(np.abs(z)) <= face:  # too close to a face for a one-sided difference
            continue
        key = activation_pattern(net, x).key
        out[key] = min(out.get(key, np.inf), val)
    return out


def test_c2_verify_linear_grid_oracle():
    with criterion(2, "verify_linear vs 401x401 grid oracle") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(202)
        compared = disagree = valid = 0
        for trial in range(6):
            net = random_network([4], 2, rng)
            lo = rng.uniform(-1.0, 0.3, 2)
            hi = lo + rng.uniform(0.1, 1.0, 2)
            spec = integrator_spec(dim=2, u=1.0, bound=2.0)
            spec = make_spec(spec.system, spec.state_bounds, spec.initial_set, [], Box(lo, hi), spec.dt)
            oracle = _grid_oracle(net, spec)
            for bits in itertools.product([False, True], repeat=4):
                p = ActivationPattern([4], bits)
                if p.key not in oracle:
                    continue
                out = verify_linear(make_cube(net, p, spec), spec, VerifierConfig(ROBUST))
                o = oracle[p.key]
                if abs(o) <= 1e-5 + DELTA:  # the delta-margin band
                    continue
                compared += 1
                disagree += (out.status == VALID) != (o > 0)
                valid += out.status == VALID
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{compared} cubes compared ({valid} valid), {disagree} disagreements, {elapsed:.1f} s"
        assert compared >= 20, f"only {compared} cubes compared"
        assert 0 < valid < compared, "oracle comparison saw only one outcome"
        assert disagree == 0, f"{disagree} disagreements"
        assert elapsed < 30.0, f"took {elapsed:.1f} s"


def test_c3_cone_containment_cwh(cwh_spec):
    with criterion(3, "cone containment on CWH") as info:
        t0 = time.perf_counter()
        spec = cwh_spec
        h = 50
        bloat = calibrate_bloat(spec, 1_000_000, seed=3)
        K = np.hstack([0.01 * np.eye(3), 0.5 * np.eye(3)])
        ctrl = make_controller({"type": "proportional", "K": K.tolist()}, spec)
        x0s = sample_initial_states(spec, 100, 33)
        escapes = checks = 0
        for x0 in x0s:
            tr = simulate(spec, ctrl, x0, 2 * h)
            for k in range(h + 1):
                cone = unroll(spec, tr.states[k], h, bloat)
                fut = tr.states[k:k + h + 1]
                inside = np.all((fut >= cone.lowers[:len(fut)]) & (fut <= cone.uppers[:len(fut)]), axis=1)
                escapes += int(np.sum(~inside))
                checks += len(fut)
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{checks} samples, {escapes} escapes, bloat {bloat:.2e}, {elapsed:.1f} s"
        assert escapes == 0
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


def test_c4_end_to_end_detection(breach_spec):
    with criterion(4, "end-to-end detection with an adversarial controller") as info:
        spec = breach_spec
        net = make_synthetic_cbf("invalid_flipped", dim=2)
        bloat = calibrate_bloat(spec, 1_000_000)
        ctrl = make_controller({"type": "constant", "u": [0.3, 0.0]}, spec)
        cfg = MonitorConfig(40, spec.dt, bloat)
        x0s = sample_initial_states(spec, 50, 44, net)
        detected, early, entered, steps = 0, 0, 0, []
        for x0 in x0s:
            tr = simulate(spec, ctrl, x0, 120)
            st = monitor_init(spec, net, cfg)
            first = None
            for k, x in enumerate(tr.states):
                st, v = monitor_next(st, x)
                if v.value == 0:
                    first = k
                    break
            in_unsafe = [k for k, x in enumerate(tr.states) if spec.in_unsafe(x)]
            entered += bool(in_unsafe)
            if first is None:
                continue
            detected += 1
            steps.append(first)
            x = tr.states[first]
            if forward(net, x) >= 0 and (not in_unsafe or first < in_unsafe[0]):
                early += 1
        info["detail"] = (f"{detected}/50 detected, {early} before exit with B >= 0, "
                          f"{entered} traces reach the unsafe set, first warning at steps {min(steps)}-{max(steps)}")
        assert detected == 50 and early == 50


def test_c5_no_false_alarms(sandbox_run):
    with criterion(5, "no false alarms for valid_box") as info:
        runs = [r for (net, h), rs in sandbox_run.runs.items() if net == "valid_box" for r in rs]
        zeros = sum(v == 0 for r in runs for v in r.verdicts)
        n = {h: len(sandbox_run.runs[("valid_box", h)]) for h in HORIZONS}
        info["detail"] = f"{len(runs)} monitored traces over horizons {HORIZONS}, {zeros} zero verdicts"
        assert all(v == 50 for v in n.values())
        assert zeros == 0


def test_c6_monotone_violation_growth(sandbox_run):
    with criterion(6, "violation count non-decreasing in horizon") as info:
        counts = [sum(r.n_traces for r in sandbox_run.rows
                      if r.net == "invalid_flipped" and r.horizon == h and r.outcome == VIOLATION) for h in HORIZONS]
        info["detail"] = "violations " + " -> ".join(map(str, counts))
        assert all(a <= b for a, b in zip(counts, counts[1:])), counts
        assert counts[-1] > counts[0], f"no growth: {counts}"


def test_c7_verdict_latching():
    with criterion(7, "verdict latching over 10^4 random sequences") as info:
        spec = integrator_spec(dim=1, u=1.0, unsafe_rows=[[[-1.0, -0.5]]])
        net = affine_cbf([1.0])
        cfg = MonitorConfig(3, spec.dt)
        rng = np.random.default_rng(707)
        shared = monitor_init(spec, net, cfg).cache
        zeros = 0
        for _ in range(10_000):
            st = monitor_init(spec, net, cfg)
            st.cache = shared
            seq = []
            for x in rng.uniform(-0.1, 1.5, int(rng.integers(1, 9))):
                st, v = monitor_next(st, [x])
                seq.append(v.value)
            assert all(a >= b for a, b in zip(seq, seq[1:])), seq
            if 0 in seq:
                zeros += 1
                assert all(s == 0 for s in seq[seq.index(0):])
        info["detail"] = f"{zeros} sequences reached 0"
        assert 0 < zeros < 10_000


OVERHEAD_LOG = ROOT / "results" / "acceptance_overhead.csv"


def test_c8_overhead_trend():
    with criterion(8, "overhead non-decreasing in horizon (8x16 net)") as info:
        cfg = read_config(CONFIGS / "experiment_large.json")
        cfg.nets = [n for n in cfg.nets if n.id == "invalid_flipped_8x16"]
        cfg.n_traces = 30
        cfg.output = None
        res = run_experiment(cfg, write=False)
        means = []
        for h in HORIZONS:
            ms = np.concatenate([r.step_ms for r in res.runs[("invalid_flipped_8x16", h)]])
            means.append(float(ms.mean()))
        prev = None
        if OVERHEAD_LOG.exists():
            rows = list(csv.reader(OVERHEAD_LOG.open()))
            if len(rows) > 1:
                prev = [float(v) for v in rows[-1][1:]]
        OVERHEAD_LOG.parent.mkdir(exist_ok=True)
        new = not OVERHEAD_LOG.exists()
        with OVERHEAD_LOG.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["timestamp"] + [f"mean_ms_h{h}" for h in HORIZONS])
            w.writerow([time.strftime("%Y-%m-%dT%H:%M:%S")] + [f"{m:.4f}" for m in means])
        cmp = "" if prev is None else "; previous run " + " ".join(f"{m:.2f}" for m in prev)
        info["detail"] = "mean ms " + " ".join(f"{m:.2f}" for m in means) + cmp
        # timing noise: a later horizon may dip by at most 10% or 0.05 ms below the previous one
        for a, b in zip(means, means[1:]):
            assert b >= 0.9 * a - 0.05, f"mean dropped from {a:.3f} to {b:.3f} ms"
        assert means[-1] >= means[0]
        assert means[-1] <= 100.0, f"soft target missed: {means[-1]:.1f} ms at horizon 200"


def test_c9_determinism(tmp_path):
    with criterion(9, "byte-identical CSV across runs (timing excluded)") as info:
        cfg = read_config(CONFIGS / "experiment_sandbox.json")
        cfg.n_traces = 10
        outs = []
        for i in range(2):
            cfg.output = str(tmp_path / f"run{i}.csv")
            run_experiment(cfg)
            text = Path(cfg.output).read_text()
            rows = list(csv.reader(io.StringIO(text)))
            outs.append("\n".join(",".join(r[:4] + r[6:]) for r in rows).encode())
        info["detail"] = f"{len(outs[0])} bytes compared"
        assert outs[0] == outs[1]


def test_c10_schematic_equivalence(sandbox_spec):
    with criterion(10, "schematic_next equals monitor_next") as info:
        spec = sandbox_spec
        net = make_synthetic_cbf("invalid_flipped", dim=2)
        bloat = calibrate_bloat(spec, 1_000_000)
        cfg = MonitorConfig(160, spec.dt, bloat)
        ctrl = make_controller({"type": "proportional", "K": -0.5}, spec)
        x0s = sample_initial_states(spec, 50, 1010, net)
        steps = zeros = 0
        for x0 in x0s:
            tr = simulate(spec, ctrl, x0, 30)
            a = monitor_init(spec, net, cfg)
            b = monitor_init(spec, net, cfg)
            A, V = relu_plugins(b)
            for x in tr.states:
                a, va = monitor_next(a, x)
                b, vb = schematic_next(A, V, b, x)
                assert va.same_as(vb), (va, vb)
                steps += 1
                zeros += va.value == 0
        info["detail"] = f"{steps} steps over 50 traces, {zeros} zero verdicts, all equal"
        assert zeros > 0
