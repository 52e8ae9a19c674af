"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (or as a script) to
see the lines inline; under a normal run they are collected into the
"acceptance" section of the terminal summary.
"""
import math
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

import oracles
from collapse_lab import augment as aug
from collapse_lab import data as dm
from collapse_lab import harness
from collapse_lab import metrics as mt
from collapse_lab import numerics as nx
from collapse_lab.cli import main as cli_main
from collapse_lab.config import load_config
from collapse_lab.network import Model, ModelSpec
from collapse_lab.numerics import Rng, Tensor

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(5)
RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


# ----------------------------------------------------------------------------
# gradients


def _grad_cases():
    rng = np.random.default_rng(0)

    def p(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    soft = nx.softmax(rng.standard_normal((3, 4)))
    a, b, bias = p(3, 5), p(5, 4), p(4)
    yield "matmul+bias", lambda: nx.softmax_xent(nx.add_bias(nx.matmul(a, b), bias), soft), [a, b, bias]
    r = p(3, 4)
    yield "relu", lambda: nx.softmax_xent(nx.relu(r), soft), [r]
    z, perm = p(3, 4), np.array([2, 0, 1])
    yield "mix+take_rows", lambda: nx.softmax_xent(nx.mix(z, nx.take_rows(z, perm), 0.35), soft), [z]
    u, v = p(3, 4), p(3, 4)
    yield "add+scale", lambda: nx.softmax_xent(nx.add(nx.scale(u, 0.7), v), soft), [u, v]
    x, k, cb = p(2, 2, 4, 4), p(3, 2, 3, 3), p(3)
    t2 = nx.softmax(rng.standard_normal((2, 12)))
    yield "conv2d+bias+relu+maxpool2+flatten", lambda: nx.softmax_xent(
        nx.flatten(nx.maxpool2(nx.relu(nx.add_channel_bias(nx.conv2d(x, k), cb)))), t2), [x, k, cb]
    mlp = Model(ModelSpec("mlp", (2, 8, 6, 2), num_classes=3), Rng(1))
    xm = Tensor(rng.standard_normal((6, 2)))
    ym = nx.one_hot([0, 1, 2, 0, 1, 2], 3)
    yield "mlp+softmax_xent", lambda: nx.softmax_xent(mlp(xm), ym), mlp.params
    yield "mlp+am_mixup objective", lambda: aug.compute_batch_loss(
        mlp, aug.AMMixup(), xm, [0, 1, 2, 0, 1, 2], Rng(2), 0.7).loss, mlp.params
    yield "mlp+manifold_mixup objective", lambda: aug.compute_batch_loss(
        mlp, aug.ManifoldMixup(1.0, (1,)), xm, [0, 1, 2, 0, 1, 2], Rng(3)).loss, mlp.params
    cnn = Model(ModelSpec("cnn_vis2d", in_shape=(2, 8, 8), channels=(3, 3, 3), num_classes=3), Rng(4))
    xc = Tensor(rng.standard_normal((2, 2, 8, 8)))
    yield "cnn_vis2d+softmax_xent", lambda: nx.softmax_xent(cnn(xc), nx.one_hot([0, 2], 3)), cnn.params


def test_gradient_correctness():
    t0 = time.process_time()
    worst = {}
    for name, fn, params in _grad_cases():
        worst[name] = nx.gradcheck(fn, params, eps=1e-5)
    elapsed = time.process_time() - t0
    top = max(worst, key=worst.get)
    report("gradient correctness", max(worst.values()) < 1e-4 and elapsed < 30,
           f"max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s CPU")


# ----------------------------------------------------------------------------
# metrics


def _random_table(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 11))
    d = int(rng.integers(2, 9))
    m = int(rng.integers(c, 201))
    labels = np.concatenate([np.arange(c), rng.integers(0, c, m - c)])
    rng.shuffle(labels)
    return mt.FeatureTable(rng.standard_normal((m, d)) * rng.uniform(0.1, 4) + rng.standard_normal(d),
                           labels, tuple(range(c)))


def test_metric_oracles():
    mismatches = 0
    for seed in range(100):
        ft = _random_table(seed)
        f, y, cls = ft.features.tolist(), ft.labels.tolist(), ft.classes
        cent, ocent = mt.sphere_centroids(ft), oracles.centroids(f, y, cls)
        same = (mt.alignment(ft) == oracles.alignment(f, y, cls)
                and mt.uniformity(cent) == oracles.uniformity(ocent)
                and all(mt.neighborhood_uniformity(cent, k) == oracles.neighborhood_uniformity(ocent, k)
                        for k in range(1, min(len(cls), 4))))
        mismatches += not same
    tri = [[math.cos(a), math.sin(a)] for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]
    hand = (mt.uniformity([[1.0, 0.0], [-1.0, 0.0]]) == 2.0
            and abs(mt.uniformity(tri) - math.sqrt(3)) <= 1e-12
            and abs(mt.alignment(mt.FeatureTable([[0.0, 0.0], [2.0, 0.0]], [0, 0])) - 1.0) <= 1e-12)
    report("metric oracles", mismatches == 0 and hand,
           f"{100 - mismatches}/100 tables bit-identical, hand cases {'ok' if hand else 'wrong'}")


# ----------------------------------------------------------------------------
# loss identity, scheduler, long-tail counts


def test_loss_identity():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n, c = int(rng.integers(1, 9)), int(rng.integers(2, 11))
        o = Tensor(rng.standard_normal((n, c)) * rng.uniform(0.1, 10))
        yi, yj = nx.one_hot(rng.integers(0, c, n), c), nx.one_hot(rng.integers(0, c, n), c)
        lam = float(rng.random())
        a = aug.mixup_loss(o, yi, yj, lam).item()
        b = nx.softmax_xent(o, lam * yi + (1 - lam) * yj).item()
        worst = max(worst, abs(a - b))
    report("loss identity", worst < 1e-12, f"max |difference| {worst:.2e} over 1000 draws")


def test_scheduler():
    start = aug.am_lambda(0.0, 0.67)
    end = aug.am_lambda(1.0, 0.67)
    grid = [aug.am_lambda(i / 100, 0.67) for i in range(101)]
    mono = all(b < a for a, b in zip(grid, grid[1:]))
    ok = start == 1.0 and abs(end - 0.51171) <= 1e-5 and mono
    report("scheduler", ok, f"lam(0)={start!r} lam(1)={end:.6f} strictly decreasing={mono}")


def test_longtail_counts():
    counts = dm.longtail_counts(4, 5000, 200)
    report("long-tail counts", counts == [5000, 854, 146, 25], str(counts))


# ----------------------------------------------------------------------------
# desk-scale trends


def lt_config(kind: str, seed: int, **strategy):
    cfg = load_config(CONFIGS / "toy_lt.txt")
    return cfg.with_overrides(strategy={"kind": kind, **strategy},
                              run={"seed": seed}, data={"seed": seed}).validate()


@lru_cache(maxsize=None)
def lt_runs(kind: str, rate_mode: str = "scheduled"):
    """(reports, CPU seconds) for one strategy over the seed set."""
    t0 = time.process_time()
    extra = {"rate_mode": rate_mode} if kind == "am_mixup" else {}
    reps = [harness.run_imbalanced(lt_config(kind, s, **extra)).report for s in SEEDS]
    return reps, time.process_time() - t0


def _fmt(vals):
    return "[" + " ".join(f"{v:.3f}" for v in vals) + "]"


def test_imbalanced_trend():
    (ce, t1), (mx, t2), (am, t3) = lt_runs("none"), lt_runs("mixup"), lt_runs("am_mixup")
    cpu = t1 + t2 + t3
    a = sum(x.acc_all > y.acc_all > z.acc_all for x, y, z in zip(am, mx, ce))
    b = sum(x.neighborhood_uniformity[1] > z.neighborhood_uniformity[1] for x, z in zip(am, ce))
    c = sum(x.acc_few > y.acc_few for x, y in zip(am, mx))
    detail = (f"(a) All AM>mixup>CE {a}/5, (b) U1 AM>CE {b}/5, (c) Few AM>mixup {c}/5, {cpu:.0f}s CPU; "
              f"All CE {_fmt(r.acc_all for r in ce)} mixup {_fmt(r.acc_all for r in mx)} "
              f"AM {_fmt(r.acc_all for r in am)}")
    report("imbalanced trend", a >= 4 and b >= 4 and c >= 4 and cpu <= 300, detail)


def test_ablation_direction():
    (am, _), (beta, t) = lt_runs("am_mixup"), lt_runs("am_mixup", "fixed_beta")
    wins = sum(x.acc_few > y.acc_few for x, y in zip(am, beta))
    report("ablation direction", wins >= 4,
           f"Few (lam_am,OL,LL) > (Beta,OL,LL) in {wins}/5; "
           f"lam_am {_fmt(r.acc_few for r in am)} Beta {_fmt(r.acc_few for r in beta)}")


def coarse_configs(kind: str, seed: int):
    pre = load_config(CONFIGS / "toy_coarse_pretrain.txt")
    fin = load_config(CONFIGS / "toy_coarse_finetune.txt")
    pre = pre.with_overrides(strategy={"kind": kind}, run={"seed": seed}, data={"seed": seed}).validate()
    fin = fin.with_overrides(run={"seed": seed}, data={"seed": seed}).validate()
    return pre, fin


def test_coarse_to_fine_trend():
    t0 = time.process_time()
    res = {k: [harness.run_coarse_to_fine(*coarse_configs(k, s)).report for s in SEEDS]
           for k in ("none", "mixup", "am_mixup")}
    cpu = time.process_time() - t0
    ce, mx, am = res["none"], res["mixup"], res["am_mixup"]
    order = sum(x.alignment > y.alignment > z.alignment for x, y, z in zip(ce, am, mx))
    fine = sum(y.acc_all > z.acc_all for y, z in zip(am, mx))
    detail = (f"A(CE)>A(AM)>A(mixup) {order}/5, fine acc AM>mixup {fine}/5, {cpu:.0f}s CPU; "
              f"A CE {_fmt(r.alignment for r in ce)} AM {_fmt(r.alignment for r in am)} "
              f"mixup {_fmt(r.alignment for r in mx)}; fine AM {_fmt(r.acc_all for r in am)} "
              f"mixup {_fmt(r.acc_all for r in mx)}")
    report("coarse-to-fine trend", order >= 4 and fine >= 4 and cpu <= 300, detail)


# ----------------------------------------------------------------------------
# determinism and CLI


def test_determinism(tmp_path):
    text = (CONFIGS / "toy_lt.txt").read_text() + "run.epochs = 5\ndata.per_class_n = 500\n"
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text(text.replace("run.epochs = 100\n", "").replace("data.per_class_n = 2500\n", ""))
    blobs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        rc = cli_main(["--quiet", "--out-dir", str(out), "train", "--config", str(cfg_path)])
        blobs.append((rc, (out / "history.csv").read_bytes(), (out / "checkpoint.bin").read_bytes()))
    same = blobs[0] == blobs[1] and blobs[0][0] == 0
    report("determinism", same, "history.csv and checkpoint.bin byte-identical across repeats"
           if same else "outputs differ")


def test_cli_contract(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("run.epochs = 3\noptim.momentun = 0.9\n")
    rc_cfg = cli_main(["train", "--config", str(bad)])
    err = capsys.readouterr().err
    nan = tmp_path / "nan.txt"
    nan.write_text("optim.lr = 1e6\nrun.epochs = 3\ndata.per_class_n = 100\n")
    rc_nan = cli_main(["--quiet", "--out-dir", str(tmp_path / "o"), "train", "--config", str(nan)])
    ok = rc_cfg == 2 and "optim.momentun" in err and rc_nan == 3
    report("CLI contract", ok, f"malformed config -> {rc_cfg} ({err.strip()!r}), lr=1e6 -> {rc_nan}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
