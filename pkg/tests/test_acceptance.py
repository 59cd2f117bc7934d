"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 9 drive the full desk pipeline through the command line and
take roughly twenty minutes each on one core; they carry the ``slow`` marker.
"""

import csv
import hashlib
import os
import subprocess
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

import amdl.model

from amdl.checkpoint import dumps, loads
from amdl.cli import main
from amdl.data import dataset_bytes, generate_synthetic, parse_dataset, prepare_domain
from amdl.errors import ChecksumError
from amdl.exit_policy import load_table2, select_exit
from amdl.model import (
    NetworkConfig,
    attach_domain,
    build_base,
    count_params,
    forward_multi_exit,
    freeze_base,
    init_from_base,
    scope_of,
)
from amdl.tensor import (
    Tensor,
    add,
    backward,
    batchnorm,
    conv2d,
    global_avg_pool,
    grad_check,
    linear,
    mul,
    relu,
    softmax_cross_entropy,
    tsum,
)
from amdl.training import TrainConfig, multi_exit_loss, train_domain

GRAD_TOL = 1e-4
T = 3.5
BEST_ROW = [60.32, 50.62, 81.01, 87.72, 49.53, 97.00, 70.24, 87.13, 95.35, 49.04]


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def probe_sum(rng):
    """Scalar readout with random weights so that no gradient is trivially uniform."""
    cache = {}

    def f(y):
        if y.shape not in cache:
            cache[y.shape] = Tensor(rng.standard_normal(y.shape))
        return tsum(y * cache[y.shape])

    return f


# ---------------------------------------------------------------------------
# 1


def operator_errors() -> dict[str, float]:
    rng = np.random.default_rng(11)
    ws = probe_sum(rng)
    x = t64(rng, 2, 3, 6, 6)
    w3 = t64(rng, 4, 3, 3, 3, scale=0.3)
    b = t64(rng, 4)
    a = t64(rng, 4, 3, 1, 1, scale=0.3)
    ab = t64(rng, 4)
    gamma, beta = t64(rng, 4), t64(rng, 4)
    xs = Tensor(rng.standard_normal((2, 4, 5, 5)) + 0.1, requires_grad=True)
    wl, bl = t64(rng, 7, 5), t64(rng, 5)
    xl = t64(rng, 3, 7)
    z = t64(rng, 3, 5)
    u, v = t64(rng, 3, 4), t64(rng, 1, 4)
    rm, rv = rng.normal(0, 0.2, 4), rng.uniform(0.5, 1.5, 4)

    def bn(training):
        return lambda x_, g_, b_: ws(batchnorm(x_, g_, b_, rm.copy(), rv.copy(), training))

    checks = {
        "conv2d s1 p1": (lambda x_, w_, b_: ws(conv2d(x_, w_, b_, 1, 1)), [x, w3, b]),
        "conv2d s2 p1": (lambda x_, w_: ws(conv2d(x_, w_, None, 2, 1)), [x, w3]),
        "conv2d s1 p0": (lambda x_, w_: ws(conv2d(x_, w_, None, 1, 0)), [x, w3]),
        "conv2d + adapter": (lambda x_, w_, a_, ab_: ws(conv2d(x_, w_, None, 2, 1, a_, ab_)), [x, w3, a, ab]),
        "batchnorm train": (bn(True), [xs, gamma, beta]),
        "batchnorm eval": (bn(False), [xs, gamma, beta]),
        "relu": (lambda x_: ws(relu(x_)), [xs]),
        "linear": (lambda x_, w_, b_: ws(linear(x_, w_, b_)), [xl, wl, bl]),
        "global avg pool": (lambda x_: ws(global_avg_pool(x_)), [xs]),
        "softmax cross-entropy": (lambda z_: softmax_cross_entropy(z_, [1, 0, 4]), [z]),
        "add/mul broadcast": (lambda u_, v_: ws(mul(add(u_, v_), v_)), [u, v]),
    }
    return {name: grad_check(fn, inputs) for name, (fn, inputs) in checks.items()}


class ReluSigns:
    """Wraps the model's ReLU to record which units are active on each call."""

    def __init__(self, monkeypatch):
        self.masks: list[np.ndarray] = []
        inner = amdl.model.relu

        def recording(x):
            self.masks.append(x.data > 0)
            return inner(x)

        monkeypatch.setattr(amdl.model, "relu", recording)

    def run(self, fn) -> tuple[float, list[np.ndarray]]:
        self.masks = []
        value = float(fn().data)
        return value, self.masks


def network_errors(monkeypatch, probes: int = 4, h: float = 1e-5) -> dict:
    """Central-difference check of every domain tensor of the tiny adapted network.

    A probe whose +h and -h evaluations switch any ReLU is straddling a kink,
    where central differences do not estimate the derivative; such probes are
    counted and skipped. In train mode a bias feeding batch norm has an exactly
    zero gradient (the batch mean removes it); those tensors must show a
    vanishing numeric gradient instead of a relative match.
    """
    base = build_base(NetworkConfig.tiny(8), 3, seed=2, dtype=np.float64)
    freeze_base(base)
    ad = attach_domain(base, 3, "mlp4", seed=3)
    # fresh heads see exact zeros after a ReLU with beta=0 and unit statistics;
    # move to a generic point
    rng = np.random.default_rng(5)
    for name, buf in ad.buffers.items():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else rng.normal(0, 0.3, buf.shape)
    for name, p in ad.params.items():
        if name.endswith(("gamma", "beta")):
            p.data[...] = rng.normal(1.0 if name.endswith("gamma") else 0.0, 0.3, p.shape)
    x = Tensor(np.random.default_rng(4).standard_normal((3, 3, 8, 8)))
    labels = [0, 1, 2]
    signs = ReluSigns(monkeypatch)
    out = {"tensors": len(ad.params), "kinks": 0, "probes": 0}
    for mode in ("eval", "train"):

        def fn(mode=mode):
            return multi_exit_loss(forward_multi_exit(base, ad, x, mode), labels)

        for p in ad.parameters():
            p.grad = None
        backward(fn())
        worst = vanish = 0.0
        vanishing = []
        for name, p in ad.params.items():
            analytic = p.grad.copy()
            zero = np.abs(analytic).max() < 1e-12
            if zero:
                vanishing.append(name)
            idx = np.random.default_rng(len(name)).choice(p.data.size, size=min(probes, p.data.size), replace=False)
            for flat in idx:
                pos = np.unravel_index(flat, p.shape)
                orig = p.data[pos]
                p.data[pos] = orig + h
                fp, up = signs.run(fn)
                p.data[pos] = orig - h
                fm, down = signs.run(fn)
                p.data[pos] = orig
                num = (fp - fm) / (2 * h)
                out["probes"] += 1
                if zero:
                    vanish = max(vanish, abs(num))
                elif any((u != d).any() for u, d in zip(up, down)):
                    out["kinks"] += 1
                else:
                    a = float(analytic[pos])
                    worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        for p in ad.parameters():
            p.grad = None
        out[mode], out[f"{mode}_vanishing"], out[f"{mode}_vanishing_numeric"] = worst, vanishing, vanish
    return out


def test_criterion_1_gradient_correctness(verdict, monkeypatch):
    t0 = time.perf_counter()
    errs = operator_errors()
    net = network_errors(monkeypatch)
    elapsed = time.perf_counter() - t0
    worst_op = max(errs, key=errs.get)
    ok = (
        max(errs.values()) < GRAD_TOL
        and net["eval"] < GRAD_TOL
        and net["train"] < GRAD_TOL
        and not net["eval_vanishing"]
        and net["train_vanishing_numeric"] < 1e-9
        and elapsed < 60
    )
    verdict(
        1,
        ok,
        f"max rel err: operators {errs[worst_op]:.2e} ({worst_op}), tiny network over {net['tensors']} tensors "
        f"eval {net['eval']:.2e} / train {net['train']:.2e}, tol {GRAD_TOL:.0e}; "
        f"{net['probes']} probes, {net['kinks']} skipped at ReLU kinks; "
        f"{len(net['train_vanishing'])} pre-BN bias tensors with zero train-mode gradient, "
        f"max |numeric| {net['train_vanishing_numeric']:.1e}; {elapsed:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_criterion_2_zero_adapter_equivalence(verdict):
    base = build_base(NetworkConfig.tiny(), 10, seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    # non-trivial statistics and affine terms so that copying them matters
    for name, buf in base.buffers.items():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else rng.normal(0, 0.3, buf.shape)
    for name, p in base.params.items():
        if name.endswith(("gamma", "beta")):
            p.data[...] = rng.normal(1.0 if name.endswith("gamma") else 0.0, 0.2, p.shape)
    freeze_base(base)
    ad = attach_domain(base, 10, "mlp128", seed=9)
    for n in ad.adapter_names():
        ad.params[n].data[...] = 0.0
    init_from_base(base, ad)
    x = Tensor(rng.standard_normal((100, 3, 32, 32)))
    ref = base.forward(x, "eval").data
    (zk,) = forward_multi_exit(base, ad, x, "eval", exits=[3])
    diff = float(np.abs(zk.data - ref).max())
    ok = diff <= 1e-5
    verdict(2, ok, f"max |exit-3 logits - base logits| = {diff:.2e} on 100 inputs, tol 1e-05")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_criterion_3_frozen_base_invariance(verdict):
    base = build_base(NetworkConfig.tiny(16), 2, seed=0)
    freeze_base(base)
    data = prepare_domain(generate_synthetic("easy", (64, 32, 32), seed=0, size=16))
    before = hashlib.sha256(dumps(base)).hexdigest()
    after = {}
    for strategy in ("joint", "blockwise", "exits_only"):
        ad = attach_domain(base, 2, "mlp16", adapt=strategy != "exits_only", seed=1)
        train_domain(base, ad, data, TrainConfig(epochs=2, milestones=(1,), strategy=strategy))
        after[strategy] = hashlib.sha256(dumps(base)).hexdigest()
    ok = all(h == before for h in after.values())
    verdict(3, ok, f"base checkpoint sha256 {before[:12]} unchanged after {', '.join(after)} training: {ok}")
    assert ok


# ---------------------------------------------------------------------------
# 4


def test_criterion_4_multi_exit_gradient_topology(verdict):
    base = build_base(NetworkConfig.tiny(8), 3, seed=1, dtype=np.float64)
    freeze_base(base)
    ad = attach_domain(base, 3, "mlp4", seed=2)
    for n in ad.adapter_names():  # away from zero so every adapter is live
        ad.params[n].data[...] = np.random.default_rng(6).normal(0, 0.1, ad.params[n].shape)
    x = Tensor(np.random.default_rng(3).standard_normal((4, 3, 8, 8)))
    labels = [0, 1, 2, 1]
    names = ad.adapter_names()

    def grads(exits):
        for p in ad.parameters():
            p.grad = None
        outs = forward_multi_exit(base, ad, x, "eval")
        backward(multi_exit_loss([outs[e - 1] for e in exits], labels))
        return {n: np.zeros(ad.params[n].shape) if ad.params[n].grad is None else ad.params[n].grad.copy() for n in names}

    total = grads([1, 2, 3])
    per_exit = {e: grads([e]) for e in (1, 2, 3)}
    worst_sum = worst_leak = 0.0
    for n in names:
        k = scope_of(n)[1]
        expect = sum(per_exit[e][n] for e in (1, 2, 3) if e >= k)
        worst_sum = max(worst_sum, float(np.abs(total[n] - expect).max()))
        for e in range(1, k):
            worst_leak = max(worst_leak, float(np.abs(per_exit[e][n]).max()))
    ok = worst_sum <= 1e-6 and worst_leak == 0.0
    verdict(
        4,
        ok,
        f"{len(names)} adapter tensors: max |summed - sum of per-exit| = {worst_sum:.2e} (tol 1e-06), "
        f"max gradient from exits before the block = {worst_leak:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5


def test_criterion_5_parameter_accounting(verdict):
    c = 3
    unit_ok = {}
    for I in (8, 16, 64):
        cfg = NetworkConfig(input_shape=(8, 8, 3), num_blocks=1, units_per_block=1, block_channels=(I,), stem_channels=I)
        base = build_base(cfg, 2)
        freeze_base(base)
        led = count_params(base, attach_domain(base, 2))
        got = (led.base_units["block1.unit0"], led.adapter_units["block1.unit0"])
        unit_ok[I] = got == (2 * (c * c * I * I + I), 2 * (I * I + 3 * I))
        if I == 64:
            i64 = got
    base = build_base(NetworkConfig.resnet26(), 10)
    freeze_base(base)
    f1, f2, _ = count_params(base, attach_domain(base, 10)).fractions
    ok = all(unit_ok.values()) and i64 == (73_856, 8_576) and abs(f1 * 100 - 4.7) <= 1.0 and abs(f2 * 100 - 23.8) <= 1.0
    verdict(
        5,
        ok,
        f"closed forms exact for I=8,16,64: {all(unit_ok.values())} (I=64: {i64[0]:,}/{i64[1]:,}); "
        f"ResNet-26 cumulative fractions {f1:.2%}/{f2:.2%} vs 4.7%/23.8% +-1.0pt",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6


def test_criterion_6_table2_replay(verdict, capsys):
    t0 = time.perf_counter()
    code = main(["select", "--fixture", "table2", "--T", str(T)])
    elapsed = time.perf_counter() - t0
    lines = capsys.readouterr().out.splitlines()
    rows = [ln.split() for ln in lines[1:-1]]
    accs = [float(r[r.index("acc") + 1]) for r in rows]
    mean = float(lines[-1].split()[1])
    table = load_table2()
    monotone = True
    for d in table.domains():
        costs = [select_exit(table, d, t).cost for t in (0, 1, 3.5, 10, 100)]
        monotone &= all(b <= a for a, b in zip(costs, costs[1:]))
    ok = code == 0 and accs == BEST_ROW and abs(mean - 72.79) <= 0.01 and monotone and elapsed < 1.0
    verdict(
        6,
        ok,
        f"Best-row accuracies match: {accs == BEST_ROW}; mean {mean:.3f} vs 72.79 +-0.01; "
        f"monotone over T in {{0,1,3.5,10,100}}: {monotone}; {elapsed:.2f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8


def test_criterion_8_format_round_trips(verdict):
    base = build_base(NetworkConfig.tiny(16), 4, seed=5)
    freeze_base(base)
    bundle = attach_domain(base, 4, "mlp16", seed=6, domain="medium")
    raw_base, raw_bundle = dumps(base), dumps(bundle)
    trips = {
        "checkpoint": dumps(loads(raw_base)) == raw_base,
        "adapter bundle": dumps(loads(raw_bundle, base=base)) == raw_bundle,
    }
    ds = generate_synthetic("medium", (30, 10, 10), seed=2, size=16)[0]
    raw_ds = dataset_bytes(ds)
    trips["AMDS dataset"] = dataset_bytes(parse_dataset(raw_ds)) == raw_ds

    def crc_caught(raw, parse):
        bad = bytearray(raw)
        bad[len(bad) // 2] ^= 0x01
        try:
            parse(bytes(bad))
        except ChecksumError:
            return True
        return False

    caught = {
        "checkpoint": crc_caught(raw_base, loads),
        "adapter bundle": crc_caught(raw_bundle, loads),
        "AMDS dataset": crc_caught(raw_ds, parse_dataset),
    }
    ok = all(trips.values()) and all(caught.values())
    verdict(
        8,
        ok,
        "byte-identical round trip: " + ", ".join(f"{k} {v}" for k, v in trips.items())
        + "; corrupted CRC detected: " + ", ".join(f"{k} {v}" for k, v in caught.items()),
    )
    assert ok


# ---------------------------------------------------------------------------
# 7 and 9: desk pipeline through the command line

DESK_CONFIG = """\
# desk-scale behavioural run
preset = tiny
epochs = 30
seed = 1
threshold = 3.5
domains = easy:mlp128, medium:mlp128, hard:mlp128
"""
DOMAINS = ("easy", "medium", "hard")
DESK_BUDGET = 30 * 60


def run_pipeline(root: Path, threads: str | None) -> float:
    """Run the whole pipeline in ``root``; return wall-clock seconds."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "desk.cfg").write_text(DESK_CONFIG)
    env = dict(os.environ)
    env.pop("AMDL_THREADS", None)
    if threads is not None:
        env["AMDL_THREADS"] = threads

    def amdl(*args):
        cmd = [sys.executable, "-m", "amdl.cli", *args, "--config", "desk.cfg"]
        proc = subprocess.run(cmd, cwd=root, env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            raise AssertionError(f"{' '.join(args)} exited {proc.returncode}: {proc.stderr}")
        return proc.stdout

    t0 = time.perf_counter()
    for kind in DOMAINS:
        amdl("gen-data", "--kind", kind, "--n", "2000,500,500", "--out", "data")
    amdl("train-base", "--data", "data/hard", "--out", "ck/base.amdl")
    for kind in DOMAINS:
        amdl("train-domain", "--base", "ck/base.amdl", "--data", f"data/{kind}", "--out", f"ck/{kind}.amdl")
        amdl("evaluate", "--base", "ck/base.amdl", "--bundle", f"ck/{kind}.amdl", "--data", f"data/{kind}",
             "--split", "test", "--results", "results.csv")
    amdl("report", "--results", "results.csv", "--base", "ck/base.amdl", "--csv", "report.csv", "--json", "report.json")
    return time.perf_counter() - t0


def outputs(root: Path) -> dict[str, bytes]:
    names = ["report.csv", "report.json", "results.csv"] + sorted(
        str(p.relative_to(root)) for p in (root / "ck").glob("*.history.csv")
    )
    return {n: (root / n).read_bytes() for n in names}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "run1"
    return root, run_pipeline(root, threads=None)


@pytest.mark.slow
def test_criterion_7_desk_experiment(desk_run, verdict):
    root, elapsed = desk_run
    with open(root / "results.csv", newline="") as fh:
        acc = {(r["domain"], int(r["exit"])): float(r["accuracy"]) for r in csv.DictReader(fh)}
    with open(root / "report.csv", newline="") as fh:
        chosen = {r["domain"]: int(r["exit"]) for r in csv.DictReader(fh)}
    easy_gap = acc["easy", 3] - acc["easy", 1]
    hard_gap = acc["hard", 3] - acc["hard", 1]
    ok = easy_gap <= T and chosen["easy"] == 1 and hard_gap > T and chosen["hard"] in (2, 3) and elapsed < DESK_BUDGET
    summary = ", ".join(f"{d} {[round(acc[d, k], 1) for k in (1, 2, 3)]}" for d in DOMAINS)
    verdict(
        7,
        ok,
        f"test accuracy per exit: {summary}; easy exit3-exit1 {easy_gap:.1f} <= {T} (selected exit "
        f"{chosen['easy']}), hard exit3-exit1 {hard_gap:.1f} > {T} (selected exit {chosen['hard']}); "
        f"{elapsed / 60:.1f} min",
    )
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(desk_run, tmp_path, verdict):
    root, _ = desk_run
    rerun = tmp_path / "run2"
    run_pipeline(rerun, threads="1")
    first, second = outputs(root), outputs(rerun)
    differ = [n for n in first if first[n] != second.get(n)]
    ok = not differ and set(first) == set(second)
    crc = zlib.crc32(b"".join(first[n] for n in sorted(first)))
    verdict(
        9,
        ok,
        f"rerun with AMDL_THREADS=1: {len(first)} report/history files "
        + ("byte-identical" if ok else f"differ: {differ}")
        + f" (combined crc32 {crc:08x})",
    )
    assert ok
