"""Acceptance suite: one test per criterion, each printing a PASS/FAIL/SKIP line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected into an "acceptance criteria" section of the terminal summary.
The ETTh1 checks look for ``$ETTH1_CSV`` or ``data/ETTh1.csv`` and skip
when neither exists.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from aptforecast import apt, data
from aptforecast import tensor as tn
from aptforecast.apt import AffineParams
from aptforecast.cli import RESULTS_COLUMNS, main
from aptforecast.config import ExperimentConfig
from aptforecast.normalization import denormalize, normalize
from aptforecast.tensor import Tensor
from aptforecast.trainer import Batcher, Pipeline, predict, pretrain_apt, prototype_usage, run_seeded

from conftest import central_diff, rel_err

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (1, 2, 3)


def etth1_path():
    for cand in (os.environ.get("ETTH1_CSV"), ROOT / "data" / "ETTh1.csv"):
        if cand and Path(cand).is_file():
            return Path(cand)
    return None


def analytic_and_numeric(build, values):
    leaves = [Tensor(v.copy(), requires_grad=True) for v in values]
    with tn.recording():
        tn.backward(build(*leaves))

    def f():
        with tn.no_grad():
            return build(*[Tensor(v) for v in values]).item()

    return max(rel_err(l.grad, n) for l, n in zip(leaves, central_diff(f, values, h=1e-4)))


# 1 -------------------------------------------------------------------------------

def _op_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    return [
        (lambda x, y: tn.sum_(tn.square(tn.matmul(x, tn.transpose(y, (1, 0))))), [a, b]),
        (lambda x, y: tn.sum_(tn.square(x + y)), [a, b]),
        (lambda x, y: tn.sum_(tn.square(x - y)), [a, b]),
        (lambda x, y: tn.sum_(x * y * x), [a, b]),
        (lambda x, y: tn.sum_(x / y), [a, pos]),
        (lambda x: tn.sum_(tn.square(tn.relu(x))), [a + 0.05 * np.sign(a)]),
        (lambda x, y: tn.sum_(tn.softmax(x) * y), [a, b]),
        (lambda x: tn.square(tn.mean(x * x)), [a]),
        (lambda x: tn.sum_(tn.sqrt(x)), [pos]),
        (lambda x: tn.l2norm(x), [a]),
        (lambda x: tn.sum_(tn.square(x[1:, ::2])), [a]),
        (lambda x, y: tn.sum_(tn.square(tn.concat([x, y], axis=0))), [a, b]),
        (lambda x, y: tn.sum_(tn.broadcast_to(x, (3, 4)) * y), [a[:1].copy(), b]),
        (lambda e: apt.loss_orth(e), [rng.normal(size=(4, 8))]),
        (lambda w: apt.loss_balance(w), [rng.uniform(0.1, 1, size=(5, 3))]),
        (lambda g, bt: apt.loss_affine_reg(g, bt), [rng.normal(size=6), rng.normal(size=6)]),
    ]


def _pipeline_error(seed):
    """Full MSE pipeline at L=8, H=4, C=2, D=4, N=3, k=2."""
    ds = data.synthesize(3, "hourly", channels=2, seed=seed)
    cfg = ExperimentConfig(L=8, H=4, embed_dim=4, hidden=5, prototypes=3, top_k=2, seed=seed)
    pipe = Pipeline(cfg, 2)
    batcher = Batcher(ds, 8, 4)
    idx = np.random.default_rng(seed).choice(batcher.starts("train"), size=4, replace=False)
    x, y, hist, fut = batcher.batch(idx)
    params = list(pipe.parameters().values())

    def loss():
        pred, *_ = pipe.forward(x, hist, fut)
        return tn.mean(tn.square(pred - Tensor(y)))

    with tn.recording():
        tn.backward(loss())

    def f():
        with tn.no_grad():
            return loss().item()

    numeric = central_diff(f, [p.data for p in params], h=1e-4)
    return max(rel_err(p.grad, n) for p, n in zip(params, numeric))


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for build, values in _op_cases(rng):
            worst = max(worst, analytic_and_numeric(build, values))
        worst = max(worst, _pipeline_error(seed))
    elapsed = time.perf_counter() - start
    criterion(1, "gradient suite", worst < 1e-4 and elapsed < 10.0,
              f"max rel err {worst:.2e} (< 1e-4), 10 seeds in {elapsed:.2f}s (< 10s)")


# 2 -------------------------------------------------------------------------------

def test_criterion_2_loss_identities(criterion):
    T = lambda v: Tensor(np.asarray(v, dtype=float))
    h = np.sqrt(0.5)
    got = {
        "orth 3 orthonormal rows": (apt.loss_orth(T(np.eye(3))).item(), 0.0, 1e-12),
        "orth two identical unit rows": (apt.loss_orth(T([[1.0, 0.0], [1.0, 0.0]])).item(), 2.0, 1e-12),
        "orth single norm-2 row": (apt.loss_orth(T([[2.0, 0.0]])).item(), 9.0, 1e-12),
        "balance uniform": (apt.loss_balance(T(np.full((3, 4), 0.25))).item(), 0.0, 1e-12),
        "balance B=1 one-hot": (apt.loss_balance(T([[1.0, 0.0]])).item(), 0.5, 1e-12),
        "reg (sqrt.5, -sqrt.5)": (apt.loss_affine_reg(T([h, -h]), None).item(), 0.0, 1e-12),
        "reg (0, 0)": (apt.loss_affine_reg(T([0.0, 0.0]), None).item(), 0.5, 1e-12),
        "reg (1, 1)": (apt.loss_affine_reg(T([1.0, 1.0]), None).item(), 2.0858, 1e-4),
    }
    bad = [f"{k}={v:.6g}" for k, (v, want, tol) in got.items() if abs(v - want) > tol]
    criterion(2, "loss identities", not bad, "all 8 identities hold" if not bad else "; ".join(bad))


# 3 -------------------------------------------------------------------------------

def test_criterion_3_inversions(criterion):
    rng = np.random.default_rng(0)
    norm_err = inv_err = 0.0
    for _ in range(300):
        x = rng.normal(size=(2, 16, 3)) * rng.uniform(0.1, 100) + rng.uniform(-50, 50)
        xn, state = normalize(x, "revin")
        norm_err = max(norm_err, float(np.max(np.abs(denormalize(xn, state, "revin").data - x))))
        gamma = rng.uniform(1e-3, 10, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3))
        p = AffineParams(Tensor(gamma), Tensor(rng.normal(size=(2, 3)) * 5))
        back = apt.invert_apt(apt.apply_apt(Tensor(xn.data), p), p).data
        inv_err = max(inv_err, float(np.max(np.abs(back - xn.data))))

    ds = data.synthesize(140, "hourly", channels=2, seed=1)
    batcher = Batcher(ds, 96, 24)
    starts = batcher.starts("test")
    plain = predict(Pipeline(ExperimentConfig(apt=False), 2), batcher, starts)[0]
    neutral = predict(Pipeline(ExperimentConfig(neutral_init=True), 2), batcher, starts)[0]
    same = np.array_equal(plain, neutral)
    ok = norm_err < 1e-9 and inv_err < 1e-9 and same
    criterion(3, "inversion properties", ok,
              f"denorm(norm) err {norm_err:.1e}, invert(apply) err {inv_err:.1e} (< 1e-9); "
              f"bias-only heads bit-identical to APT-free: {same}")


# 4 -------------------------------------------------------------------------------

def _cli_train(tmp_path, name, *flags, data_path, extra_cfg=""):
    out = tmp_path / name
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(f"data = {data_path}\nfrequency = hourly\nL = 96\nH = 24\n{extra_cfg}")
    assert main(["train", "--config", str(cfg), "--out", str(out), *flags]) == 0
    return out


def _test_mse(run_root):
    (metrics,) = list(run_root.glob("*/metrics.json"))
    return json.loads(metrics.read_text())["mse"]["test"]


def test_criterion_4_neutral_ablation(criterion, tmp_path):
    csv_path = tmp_path / "synth.csv"
    data.write_csv(data.synthesize(140, "hourly", channels=2, seed=1), csv_path)
    off = _test_mse(_cli_train(tmp_path, "off", "--apt", "off", data_path=csv_path))
    neutral = _test_mse(_cli_train(tmp_path, "neutral", "--apt", "on", "--wo-gamma", "--wo-beta",
                                   "--wo-deapt", data_path=csv_path))
    criterion(4, "neutral-ablation equivalence", abs(off - neutral) <= 1e-9,
              f"test MSE off={off!r} neutral={neutral!r} |diff|={abs(off - neutral):.1e} (<= 1e-9)")


# 5 -------------------------------------------------------------------------------

def test_criterion_5_synthetic_shift_benchmark(criterion):
    start = time.perf_counter()
    with_apt, without = [], []
    for seed in SEEDS:
        ds = data.synthesize(140, "hourly", channels=2, seed=seed)
        cfg = ExperimentConfig(L=96, H=24, backbone="linear", norm="revin", seed=seed)
        without.append(run_seeded(cfg.replace(apt=False), ds)[0].mse["test"])
        with_apt.append(run_seeded(cfg, ds)[0].mse["test"])
    elapsed = time.perf_counter() - start
    med_on, med_off = float(np.median(with_apt)), float(np.median(without))
    reduction = 1 - med_on / med_off
    ok = reduction >= 0.10 and elapsed < 180
    criterion(5, "synthetic shift benchmark", ok,
              f"median test MSE {med_on:.4f} with APT vs {med_off:.4f} without "
              f"({reduction:.1%} lower, need >= 10%); per-seed on={np.round(with_apt, 4).tolist()} "
              f"off={np.round(without, 4).tolist()}; {elapsed:.0f}s (< 180s)")


# 6 -------------------------------------------------------------------------------

def test_criterion_6_etth1_spot_check(criterion):
    path = etth1_path()
    if path is None:
        criterion(6, "ETTh1 SparseTSF spot check", False, "ETTh1.csv not found ($ETTH1_CSV or data/ETTh1.csv)",
                  skip=True)
    start = time.perf_counter()
    ds = data.load_csv(path, "hourly", "6:2:2")
    base = ExperimentConfig(data=str(path), split="6:2:2", L=336, H=96, backbone="sparsetsf", period=24,
                            norm="revin")
    off, on = [], []
    for seed in SEEDS:
        off.append(run_seeded(base.replace(apt=False, seed=seed), ds)[0].mae["test"])
        on.append(run_seeded(base.replace(seed=seed), ds)[0].mae["test"])
    elapsed = time.perf_counter() - start
    m_off, m_on = float(np.mean(off)), float(np.mean(on))
    ok = abs(m_off - 0.391) <= 0.0391 and m_on <= m_off + 0.002 and elapsed < 900
    criterion(6, "ETTh1 SparseTSF spot check", ok,
              f"MAE without APT {m_off:.4f} (0.391 +/- 10%), with APT {m_on:.4f} (<= without + 0.002); "
              f"{elapsed:.0f}s")


# 7 -------------------------------------------------------------------------------

def _max_share_after_pretraining(seed, **changes):
    ds = data.synthesize(140, "hourly", channels=2, seed=seed)
    cfg = ExperimentConfig(seed=seed, prototypes=30, top_k=3, pretrain_epochs=5, lr_apt=5e-3, **changes)
    pipe = Pipeline(cfg, 2)
    batcher = Batcher(ds, cfg.L, cfg.H)
    pretrain_apt(pipe, batcher)
    return float(prototype_usage(pipe, batcher, "train").max() * 30)


def test_criterion_7_prototype_balance(criterion):
    balanced = [_max_share_after_pretraining(s) for s in SEEDS]
    ablated = [_max_share_after_pretraining(s, wo_balance=True) for s in SEEDS]
    ok = max(balanced) <= 3.0 and np.mean(ablated) > np.mean(balanced)
    criterion(7, "prototype-usage balance", ok,
              f"max share x N with balance loss {np.round(balanced, 2).tolist()} (<= 3), "
              f"without {np.round(ablated, 2).tolist()}")


# 8 -------------------------------------------------------------------------------

def test_criterion_8a_js_divergence(criterion):
    js = data.js_divergence_report(data.synthesize(140, "hourly", channels=2, seed=1), "diw", 32)
    criterion("8a", "diagnostics: JS divergence on synthetic data", js.within_mean < js.cross_mean,
              f"within-label {js.within_mean:.4f} < cross-label {js.cross_mean:.4f}")


def test_criterion_8b_etth1_missing_rate(criterion):
    path = etth1_path()
    if path is None:
        criterion("8b", "diagnostics: ETTh1 previous-value-fill rate", False,
                  "ETTh1.csv not found ($ETTH1_CSV or data/ETTh1.csv)", skip=True)
    rep = data.missing_rate_report(data.load_csv(path, "hourly", "6:2:2"))
    criterion("8b", "diagnostics: ETTh1 previous-value-fill rate", abs(rep.overall_prev * 100 - 6.38) <= 0.1,
              f"overall prev-fill {rep.overall_prev:.4%} (6.38% +/- 0.1pp)")


# 9 -------------------------------------------------------------------------------

def _run_everything(root, csv_path):
    cfg = root / "run.cfg"
    cfg.write_text(f"data = {csv_path}\nfrequency = hourly\nL = 48\nH = 24\nepochs = 5\n")
    out = root / "results"
    assert main(["synth", "--days", "30", "--channels", "2", "--seed", "5", "--out", str(root / "s.csv")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out), "--apt", "off"]) == 0
    src = out / "synth_linear_revin_apt_H24_seed1" / "checkpoint.txt"
    assert main(["transfer", "--from", str(src), "--config", str(cfg), "--out", str(out),
                 "--backbone", "sparsetsf"]) == 0
    assert main(["report", "js", "--data", str(csv_path), "--out", str(root / "js.csv")]) == 0
    assert main(["report", "missing", "--data", str(csv_path), "--out", str(root / "missing.csv")]) == 0
    return out


def test_criterion_9_determinism(criterion, tmp_path):
    csv_path = tmp_path / "synth.csv"
    data.write_csv(data.synthesize(30, "hourly", channels=2, seed=2), csv_path)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    out_a, out_b = _run_everything(a, csv_path), _run_everything(b, csv_path)

    runtime = RESULTS_COLUMNS.index("runtime_s")
    rows_a = [line.split(",") for line in (out_a / "results.csv").read_text().splitlines()]
    rows_b = [line.split(",") for line in (out_b / "results.csv").read_text().splitlines()]
    masked = lambda rows: [r[:runtime] + r[runtime + 1:] for r in rows]
    rows_same = masked(rows_a) == masked(rows_b) and len(rows_a) == 4

    files = [p.relative_to(a) for p in sorted(a.rglob("*")) if p.is_file() and p.name != "manifest.json"
             and p.name != "results.csv"]
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ckpts = [f for f in files if f.name.endswith(".txt") and "checkpoint" in f.name or "apt_pretrained" in f.name]
    ok = rows_same and not differing and len(ckpts) >= 3
    criterion(9, "determinism", ok,
              f"{len(rows_a) - 1} results rows identical apart from the wall-clock runtime_s column: {rows_same}; "
              f"{len(files)} artifacts incl. {len(ckpts)} checkpoints byte-identical"
              + (f"; differing: {differing}" if differing else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
