"""Acceptance suite: one test per acceptance criterion, each at its stated tolerance.

A PASS/FAIL line per criterion, with the measured values, is printed in the
pytest terminal summary (see ``conftest.py``). The end-to-end experiment
(criterion 7) trains six models; finished run directories under
``$SSCPGAN_ACCEPTANCE_DIR`` (default ``<repo>/runs/acceptance``) are reused,
so only the first invocation pays for training.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sscpgan import numerics as nx
from sscpgan import pseudolabel as pl
from sscpgan.compositing import composite
from sscpgan.data import synth_sample
from sscpgan.losses import discriminator_loss, iou, lambda_schedule, self_supervised_loss
from sscpgan.metrics import FeatureStats, frechet_distance, matrix_sqrt_psd, miou
from sscpgan.networks import ArchConfig, init_network, loads_archive
from sscpgan.numerics import Tensor
from sscpgan.trainer import TrainConfig, metrics_digest, read_metrics, train

ROOT = Path(os.environ.get("SSCPGAN_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))

# end-to-end experiment: synthetic seed 11, 2000 images, 48x48, 5000 steps, batch 16
EXPERIMENT = dict(dataset="synthetic://11/2000", resolution=48, batch_size=16, total_steps=5000,
                  eval_every=500, checkpoint_every=500, eval_size=None, gen_width=8, disc_width=8,
                  cache_dir=str(ROOT / "cache"), runs_dir=str(ROOT / "runs"))
EXPERIMENT_SEEDS = (1, 2, 3)


def record(request, **values):
    for k, v in values.items():
        request.node.user_properties.append((k, v))


# ------------------------------------------------------------------------ 1

def test_criterion_1_gradient_integrity(request):
    rng = np.random.default_rng(0)

    def r(*shape):
        return rng.standard_normal(shape)

    # fixed random projections turn each op into a scalar function
    w = {k: r(*s) for k, s in {"c1": (2, 4, 8, 8), "c2": (2, 4, 4, 4), "act": (3, 5), "pool": (2, 3, 2, 3),
                              "up": (2, 3, 8, 12), "gap": (2, 3, 1, 1), "bn": (4, 3, 2, 2), "cat": (2, 4, 3, 3),
                              "comp": (2, 3, 4, 4)}.items()}
    tgt = rng.random((2, 4))
    ops = {
        "conv2d s1": (lambda x, k, b: nx.mean(nx.conv2d(x, k, b, 1, 1) * w["c1"]), [r(2, 3, 8, 8), r(4, 3, 3, 3), r(4)]),
        "conv2d s2": (lambda x, k: nx.mean(nx.conv2d(x, k, None, 2, 1) * w["c2"]), [r(2, 3, 8, 8), r(4, 3, 3, 3)]),
        "sigmoid": (lambda x: nx.mean(nx.sigmoid(x) * w["act"]), [r(3, 5)]),
        "leaky_relu": (lambda x: nx.mean(nx.leaky_relu(x, 0.2) * w["act"]), [r(3, 5) + 0.01]),
        "relu": (lambda x: nx.mean(nx.relu(x) * w["act"]), [r(3, 5) + 0.01]),
        "avg_pool2": (lambda x: nx.mean(nx.avg_pool2(x) * w["pool"]), [r(2, 3, 4, 6)]),
        "upsample2": (lambda x: nx.mean(nx.upsample2(x) * w["up"]), [r(2, 3, 4, 6)]),
        "global_avg_pool": (lambda x: nx.mean(nx.global_avg_pool(x) * w["gap"]), [r(2, 3, 4, 4)]),
        "batch_norm": (lambda x, g, b: nx.mean(nx.batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * w["bn"]),
                       [r(4, 3, 2, 2), r(3) + 1, r(3)]),
        "concat/mul/add": (lambda a, b: nx.mean(nx.concat([a * b, a + b], 1) * w["cat"]), [r(2, 2, 3, 3), r(2, 2, 3, 3)]),
        "bce": (lambda p: nx.binary_cross_entropy(p, tgt), [rng.uniform(0.05, 0.95, (2, 4))]),
        "bce_with_logits": (lambda z: nx.bce_with_logits(z, 1.0), [r(6)]),
        "composite": (lambda f, b, m: nx.mean(composite(f, b, m) * w["comp"]),
                      [r(2, 3, 4, 4), r(2, 3, 4, 4), rng.random((2, 1, 4, 4))]),
    }
    errs = {}
    for name, (fn, inputs) in ops.items():
        errs[name], _ = nx.gradient_check(fn, inputs, eps=1e-5, max_coords=150)

    # full discriminator loss: L_D + lambda * L_ss through the U-Net, w.r.t. first-layer weights and input
    disc = init_network("discriminator", ArchConfig(32, base_width=4, depth=2), 0)
    disc.as_dtype(np.float64)
    real, fake = rng.random((2, 3, 32, 32)), rng.random((2, 3, 32, 32))
    pseudo = (rng.random((2, 1, 32, 32)) > 0.5).astype(float)

    def d_loss(w, x):
        disc.params["enc0.w"] = w
        rl, _ = disc(Tensor(real), decode=False)
        fl, pix = disc(x)
        return discriminator_loss(rl, fl) + self_supervised_loss(pix, pseudo) * 0.5

    full, _ = nx.gradient_check(d_loss, [disc.params["enc0.w"].data.copy(), fake], eps=1e-5, max_coords=150)
    worst = max(errs, key=errs.get)
    record(request, worst_op=worst, worst_op_err=f"{errs[worst]:.2e}", full_D_err=f"{full:.2e}")
    assert all(e < 1e-4 for e in errs.values()), errs
    assert full < 1e-3


# ------------------------------------------------------------------------ 2

def test_criterion_2_composite_exactness(request):
    rng = np.random.default_rng(1)
    f, b, m = rng.random((3, 3, 16, 16)), rng.random((3, 3, 16, 16)), rng.random((3, 1, 16, 16))
    assert np.array_equal(composite(f, b, np.ones_like(m)), f)
    assert np.array_equal(composite(f, b, np.zeros_like(m)), b)
    self_err = np.abs(composite(f, f, m) - f).max()
    assert self_err <= 4 * np.finfo(float).eps

    mt = Tensor(m, requires_grad=True)
    out = composite(Tensor(f), Tensor(b), mt)
    out.backward(np.ones_like(f))
    analytic = (f - b).sum(axis=1, keepdims=True)
    assert np.allclose(mt.grad, analytic, rtol=0, atol=1e-15)
    eps = 1e-6
    numeric = (composite(f, b, m + eps) - composite(f, b, m - eps)) / (2 * eps)
    fd_err = np.abs(numeric - (f - b)).max()
    record(request, self_blend_err=f"{self_err:.1e}", dIC_dm_fd_err=f"{fd_err:.1e}")
    assert fd_err < 1e-8


# ------------------------------------------------------------------------ 3

def test_criterion_3_lambda_schedule(request):
    assert (lambda_schedule(0.1), lambda_schedule(0.5), lambda_schedule(0.9)) == (0.5, 0.1, 0.0)
    sweep = np.random.default_rng(2).random(10_000)
    image = {lambda_schedule(float(v)) for v in sweep}
    for v in sweep:
        want = 0.5 if v < 0.2 else (0.0 if v > 0.8 else 0.1)
        assert lambda_schedule(float(v)) == want
    record(request, image=sorted(image))
    assert image == {0.0, 0.1, 0.5}


# ------------------------------------------------------------------------ 4

def _exhaustive_min(g):
    h, w = g.shape
    n = h * w
    labels = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    cost = labels @ g.sink_cap.ravel() + (~labels) @ g.source_cap.ravel()
    idx = np.arange(n).reshape(h, w)
    for cap, (dy, dx, _) in zip(g.pairwise, pl.NEIGHBOUR_OFFSETS):
        a, b = pl._pair_slices(h, w, dy, dx)
        cost = cost + (labels[:, idx[a].ravel()] != labels[:, idx[b].ravel()]) @ cap.ravel()
    return cost.min()


def test_criterion_4_oracle_equivalence(request):
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a = rng.random((1, 1, 8, 8)) < rng.random()
        g = rng.random((1, 1, 8, 8)) < rng.random()
        af, gf = a.ravel().tolist(), g.ravel().tolist()

        def count(p, q):
            i = sum(x and y for x, y in zip(p, q))
            u = sum(x or y for x, y in zip(p, q))
            return 1.0 if u == 0 else i / u

        fg = count(af, gf)
        bg = count([not x for x in af], [not x for x in gf])
        assert iou(a.astype(float), g.astype(float)) == fg
        assert miou(a.astype(float), g.astype(float)).miou == (fg + bg) / 2

    graphs = 0
    for h, w in [(1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4), (4, 4)]:
        for _ in range(5):
            ints = lambda s: rng.integers(0, 20, s).astype(float)
            g = pl.SegGraph(ints((h, w)), ints((h, w)),
                            [ints((h, w - 1)), ints((h - 1, w)), ints((h - 1, w - 1)), ints((h - 1, w - 1))])
            mask, flow = pl.maxflow_mincut(g)
            best = _exhaustive_min(g)
            assert flow == best and pl.cut_cost(g, mask) == best
            graphs += 1

    def st(mu, sig):
        return FeatureStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sig, float)), 10)

    fid_err = 0.0
    for _ in range(50):
        m1, m2, v1, v2 = rng.standard_normal(), rng.standard_normal(), rng.random() + 0.1, rng.random() + 0.1
        want = (m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2
        fid_err = max(fid_err, abs(frechet_distance(st(m1, v1), st(m2, v2)) - want))
        d = 8
        mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
        s1, s2 = rng.random(d) + 0.1, rng.random(d) + 0.1
        want = np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(s1) - np.sqrt(s2)) ** 2)
        fid_err = max(fid_err, abs(frechet_distance(st(mu1, np.diag(s1)), st(mu2, np.diag(s2))) - want))

    sqrt_err = 0.0
    for d in (2, 8, 32, 128):
        a = rng.standard_normal((d, 2 * d))
        s = a @ a.T
        root = matrix_sqrt_psd(s)
        sqrt_err = max(sqrt_err, np.linalg.norm(root @ root - s) / np.linalg.norm(s))
    record(request, mincut_graphs=graphs, fid_err=f"{fid_err:.1e}", sqrt_rel_err=f"{sqrt_err:.1e}")
    assert fid_err < 1e-6
    assert sqrt_err < 1e-8


# ------------------------------------------------------------------------ 5

def test_criterion_5_grabcut_sanity(request):
    t0 = time.perf_counter()
    ious, monotone = [], True
    for i in range(50):
        s = synth_sample(11, i, 64)
        lab = pl.grabcut(s.fg, iters=5, seed=0)
        ious.append(iou(lab.mask, s.gt_mask))
        e = lab.energies
        monotone &= all(b <= a + 1e-9 * abs(a) for a, b in zip(e, e[1:]))
    elapsed = time.perf_counter() - t0
    record(request, mean_iou=f"{np.mean(ious):.4f}", min_iou=f"{np.min(ious):.4f}",
           monotone=monotone, seconds=f"{elapsed:.1f}")
    assert np.mean(ious) >= 0.90
    assert np.min(ious) >= 0.80
    assert monotone
    assert elapsed < 180


# ------------------------------------------------------------------------ 6

def test_criterion_6_lambda_zero_equivalence(request, tmp_path):
    common = dict(dataset="synthetic://7/64", resolution=32, batch_size=8, total_steps=50, eval_every=25,
                  checkpoint_every=50, eval_size=32, seed=7, gen_width=8, disc_width=8,
                  cache_dir=str(ROOT / "cache"), runs_dir=str(tmp_path))
    base = train(TrainConfig(mode="cpgan-baseline", name="baseline", **common))
    forced = train(TrainConfig(mode="ss-cpgan", lambda_override=0.0, name="ss_lambda0", **common))
    da, db = metrics_digest(base / "metrics.csv"), metrics_digest(forced / "metrics.csv")
    record(request, sha256_baseline=da[:16], sha256_forced=db[:16])
    assert da == db
    assert len(read_metrics(base / "metrics.csv")) == 50


# ------------------------------------------------------------------------ 7

def _experiment(mode, seed):
    name = f"{'ss' if mode == 'ss-cpgan' else 'base'}_seed{seed}"
    run = train(TrainConfig(mode=mode, seed=seed, name=name, **EXPERIMENT))
    rows = read_metrics(run / "metrics.csv")
    assert len(rows) == EXPERIMENT["total_steps"]
    by_step = {int(r["step"]): r for r in rows}
    last = by_step[EXPERIMENT["total_steps"]]
    return {"miou": float(last["miou"]), "degenerate": float(last["degenerate_frac"]),
            "fid500": float(by_step[500]["proxy_fid"]), "fid_end": float(last["proxy_fid"])}


@pytest.mark.slow
def test_criterion_7_desk_scale_end_to_end(request):
    ss = [_experiment("ss-cpgan", s) for s in EXPERIMENT_SEEDS]
    base = [_experiment("cpgan-baseline", s) for s in EXPERIMENT_SEEDS]
    ss_miou = float(np.mean([r["miou"] for r in ss]))
    base_miou = float(np.mean([r["miou"] for r in base]))
    ss_deg = float(np.mean([r["degenerate"] for r in ss]))
    fid_down = [r["fid_end"] < r["fid500"] for r in ss]
    checks = {"a_ss_ge_baseline": ss_miou >= base_miou, "b_ss_miou_ge_0.60": ss_miou >= 0.60,
              "c_degenerate_lt_5pct": ss_deg < 0.05, "d_fid_decreases": all(fid_down)}
    record(request, ss_miou=f"{ss_miou:.4f}", baseline_miou=f"{base_miou:.4f}",
           ss_per_seed=[round(r["miou"], 4) for r in ss], base_per_seed=[round(r["miou"], 4) for r in base],
           ss_degenerate=f"{ss_deg:.4f}",
           ss_fid_500_to_end=[(round(r["fid500"], 4), round(r["fid_end"], 4)) for r in ss],
           **checks)
    assert all(checks.values()), checks


# ------------------------------------------------------------------------ 8

def test_criterion_8_determinism_and_resume(request, tmp_path):
    common = dict(EXPERIMENT, total_steps=200, eval_every=100, checkpoint_every=100, eval_size=200,
                  seed=5, runs_dir=str(tmp_path))
    a = train(TrainConfig(name="a", **common))
    b = train(TrainConfig(name="b", **common))
    part = train(TrainConfig(name="resumed", **dict(common, total_steps=100)))
    part = train(TrainConfig(name="resumed", **common))
    da, db, dr = (metrics_digest(p / "metrics.csv") for p in (a, b, part))
    arr_a, meta_a = loads_archive((a / "checkpoints/step_200.ckpt").read_bytes())
    arr_r, meta_r = loads_archive((part / "checkpoints/step_200.ckpt").read_bytes())
    # the archives differ only in the echoed run name
    same_ckpt = (arr_a.keys() == arr_r.keys() and all(np.array_equal(arr_a[k], arr_r[k]) for k in arr_a)
                 and {k: v for k, v in meta_a.items() if k != "config"} == {k: v for k, v in meta_r.items() if k != "config"})
    record(request, sha256_a=da[:16], sha256_b=db[:16], sha256_resumed=dr[:16], final_checkpoint_identical=same_ckpt)
    assert da == db == dr
    assert same_ckpt
