"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the terminal summary (see conftest.py). Criterion 8
needs the CIFAR-100 binary files; criterion 9 is the long full-scale run and
only executes when NDREG_FULL_REPLICATION=1.
"""

import os
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from conftest import cifar_dir, criterion, note, skip_criterion
from oracles import brute_force_cca, central_difference, grad_rel_error
from test_tensor_nn import gradcheck, layer_cases

from ndreg import tensor_nn as nn
from ndreg.cca import CcaConfig, ViewBatch, dcca_loss, dcca_loss_grad, fit_cca
from ndreg.data import (
    CIFAR100_FINE_TO_COARSE,
    FINE_LABEL_NAMES,
    build_pseudo_population,
    load_cifar100,
    load_pseudo_population,
    make_synthetic_corpus,
    make_synthetic_split,
)
from ndreg.evaluation import evaluate, fgsm_attack, input_gradient, robustness_sweep, score
from ndreg.training import ExperimentConfig, init_state, neural_pairs, run_experiment, train_epoch

SHAPE32 = (32, 32, 3)


# ---------------------------------------------------------------------------
# 1-5: CCA and layer numerics


def test_criterion_01_cca_oracle_equivalence():
    with criterion(1, "CCA matches brute-force oracle on 50 instances within 1e-6") as d:
        rng = np.random.default_rng(2024)
        start, worst = time.perf_counter(), 0.0
        for _ in range(50):
            m = int(rng.integers(12, 51))
            dx, dy = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            z = rng.normal(size=(m, 2))
            x = rng.normal(size=(m, dx)) + z @ rng.normal(size=(2, dx))
            y = rng.normal(size=(m, dy)) + z @ rng.normal(size=(2, dy))
            c = min(dx, dy)
            ours = fit_cca(ViewBatch(x, y), CcaConfig(c, 0.0)).correlations
            worst = max(worst, float(np.max(np.abs(ours - brute_force_cca(x, y, c)))))
        elapsed = time.perf_counter() - start
        d["text"] = f"max diff {worst:.2e}, {elapsed:.0f} s"
        assert worst < 1e-6
        assert elapsed < 60


def test_criterion_02_self_cca():
    with criterion(2, "fit_cca(X, X) gives ten correlations of 1 within 1e-8") as d:
        x = np.random.default_rng(7).normal(size=(50, 10))
        rho = fit_cca(ViewBatch(x, x), CcaConfig(10, 0.0)).correlations
        d["text"] = f"max |rho - 1| {np.max(np.abs(rho - 1)):.1e}"
        assert rho.shape == (10,) and np.all(np.abs(rho - 1) < 1e-8)


def test_criterion_03_dcca_gradient():
    with criterion(3, "DCCA gradient matches finite differences on 50 instances") as d:
        rng = np.random.default_rng(3)
        cfg = CcaConfig(3, 1e-4)
        start, worst = time.perf_counter(), 0.0
        for _ in range(50):
            b = ViewBatch(rng.normal(size=(20, 6)), rng.normal(size=(20, 5)))
            _, gx, gy, _ = dcca_loss_grad(b, cfg)
            nx = central_difference(lambda: dcca_loss(b, cfg), b.h_x, 1e-6)
            ny = central_difference(lambda: dcca_loss(b, cfg), b.h_y, 1e-6)
            worst = max(worst, grad_rel_error(gx, nx), grad_rel_error(gy, ny))
        elapsed = time.perf_counter() - start
        d["text"] = f"max rel err {worst:.1e}, {elapsed:.1f} s"
        assert worst < 1e-4 and elapsed < 60


def test_criterion_04_layer_gradients():
    with criterion(4, "every layer kind passes 100 finite-difference trials") as d:
        errs = {}
        for kind, make in sorted(layer_cases().items()):
            rng = np.random.default_rng(zlib.crc32(b"acceptance-" + kind.encode()))
            worst = 0.0
            for _ in range(100):
                net, sample, drop_seed = make(rng)
                x = sample((int(rng.integers(1, 4)),) + net.input_shape)
                worst = max(worst, gradcheck(net, x, drop_seed))
            errs[kind] = worst
        assert set(errs) == set(nn.LAYER_KINDS)
        d["text"] = ", ".join(f"{k} {v:.0e}" for k, v in errs.items())
        assert max(errs.values()) < 1e-4


def test_criterion_05_affine_invariance():
    with criterion(5, "correlations invariant under 20 invertible transforms per view") as d:
        rng = np.random.default_rng(5)
        m, dx, dy = 50, 5, 4
        z = rng.normal(size=(m, 3))
        x = rng.normal(size=(m, dx)) + z @ rng.normal(size=(3, dx))
        y = rng.normal(size=(m, dy)) + z @ rng.normal(size=(3, dy))
        cfg = CcaConfig(4, 0.0)
        ref = fit_cca(ViewBatch(x, y), cfg).correlations
        worst = 0.0
        for _ in range(20):
            ax = rng.normal(size=(dx, dx)) + 2 * np.eye(dx)
            ay = rng.normal(size=(dy, dy)) + 2 * np.eye(dy)
            assert abs(np.linalg.det(ax)) > 1e-3 and abs(np.linalg.det(ay)) > 1e-3
            for b in (ViewBatch(x @ ax, y), ViewBatch(x, y @ ay)):
                worst = max(worst, float(np.max(np.abs(fit_cca(b, cfg).correlations - ref))))
        d["text"] = f"max change {worst:.1e}"
        assert worst < 1e-8


# ---------------------------------------------------------------------------
# 6: lambda boundaries


def _small_training_data():
    shape = (16, 16, 3)
    train, test = make_synthetic_split(16, 4, n_classes=4, seed=6, image_shape=shape)
    corpus = make_synthetic_corpus(45, 2, 12, 4, 0.9, seed=6, image_shape=shape)
    pairs = neural_pairs(corpus.images, build_pseudo_population(corpus.sessions, 6), shape)
    cfg = ExperimentConfig(c=4, channels=(4, 8, 8, 8), batch_cifar=16, batch_dcca=10, epochs=2,
                           neural_cycles_per_epoch=2, dcca_hidden=32, dcca_out=6, dcca_init_std=0.2, seed=1)
    return train, test, pairs, cfg


def test_criterion_06_lambda_boundaries():
    with criterion(6, "lambda=0 equals a DCCA-free run; lambda=1 freezes post-V1 layers") as d:
        train, test, pairs, cfg = _small_training_data()
        cfg0 = cfg.replace(lam=0.0)
        hist_a, a = run_experiment(cfg0, train, test, pairs)
        hist_b, b = run_experiment(cfg0, train, test, None)
        assert a.cnn.fingerprint() == b.cnn.fingerprint() and hist_a == hist_b

        cfg1 = cfg.replace(lam=1.0)
        state = init_state(cfg1, train.num_classes, train.images.shape[1:], pairs.responses.shape[1])
        tap = state.cnn.taps["V1"]
        before = [{k: v.copy() for k, v in layer.params.items()} for layer in state.cnn.layers]
        for _ in range(2):
            train_epoch(state, cfg1, train, pairs)
        frozen = all(np.array_equal(layer.params[k], before[i][k])
                     for i, layer in enumerate(state.cnn.layers) if i > tap for k in layer.params)
        v1_moved = not np.array_equal(state.cnn.layers[0].params["W"], before[0]["W"])
        d["text"] = f"{state.neural_steps} DCCA steps, V1 updated: {v1_moved}"
        assert frozen and v1_moved


# ---------------------------------------------------------------------------
# 7: FGSM


def test_criterion_07_fgsm_contracts():
    with criterion(7, "FGSM identity at 0, |delta| <= eps, [0,1] range, zero-gradient pixels kept") as d:
        train, test = make_synthetic_split(8, 10, n_classes=5, seed=7)
        net = nn.build_cornetz(5, SHAPE32, (4, 8, 8, 8), seed=7)
        x, y = test.images, test.fine_labels
        assert np.array_equal(fgsm_attack(net, x, y, 0.0), x)
        g = input_gradient(net, x, y)
        for eps in (0.001, 0.01, 0.1, 0.5, 1.0):
            adv = fgsm_attack(net, x, y, eps)
            assert np.all(np.abs(adv - x) <= eps) and adv.min() >= 0 and adv.max() <= 1
            assert np.array_equal(adv[g == 0], x[g == 0])
        # a model blind to half its input has exact zero gradients there
        blind = nn.Network([nn.Flatten(), nn.Dense(3)], (4, 4, 1), seed=0)
        blind.layers[1].params["W"].reshape(4, 4, 3)[2:] = 0.0
        xb = np.random.default_rng(0).uniform(0.1, 0.9, size=(6, 4, 4, 1))
        adv = fgsm_attack(blind, xb, np.arange(6) % 3, 0.05)
        assert np.array_equal(adv[:, 2:], xb[:, 2:]) and np.all(adv[:, :2] != xb[:, :2])
        d["text"] = f"{int(np.sum(g == 0))} zero-gradient pixels in the CORnet-Z check"


# ---------------------------------------------------------------------------
# 8: desk-scale regularization effect


DESK_CONFIG = dict(epochs=20, channels=(8, 16, 32, 64), neural_cycles_per_epoch=4, dcca_hidden=1024)
DESK_SEEDS = (0, 1, 2)


def desk_protocol(train, test):
    """lambda 0 vs 0.5 over three seeds on a 10-class set with the s = 0.9 synthetic corpus."""
    corpus = make_synthetic_corpus(500, 10, 100, 20, 0.9, seed=8)
    pairs = neural_pairs(corpus.images, build_pseudo_population(corpus.sessions, 80), train.images.shape[1:])
    results = {}
    for lam in (0.0, 0.5):
        for seed in DESK_SEEDS:
            cfg = ExperimentConfig(lam=lam, seed=seed, **DESK_CONFIG)
            hist, _ = run_experiment(cfg, train, test, pairs)
            results[(lam, seed)] = hist[-1]
    acc0 = np.mean([results[(0.0, s)]["val_acc"] for s in DESK_SEEDS])
    acc5 = np.mean([results[(0.5, s)]["val_acc"] for s in DESK_SEEDS])
    corr = np.mean([results[(0.5, s)]["mean_cca_corr"] for s in DESK_SEEDS])
    return acc0, acc5, corr


@pytest.mark.slow
def test_criterion_08_desk_scale_effect():
    title = "desk scale: lambda=0.5 beats lambda=0 on a 10-class CIFAR-100 subset, final CCA corr > 0.5"
    with criterion(8, title) as d:
        path = cifar_dir()
        if path is None:
            raise FileNotFoundError(
                "CIFAR-100 binary files not found (set CIFAR100_DIR or NDREG_DATA_ROOT); "
                "this criterion is defined on real CIFAR-100 images and cannot be evaluated")
        train, test = load_cifar100(path)
        classes = np.arange(10)
        train, test = train.subset(classes), test.subset(classes)
        assert len(train) == 5000
        start = time.perf_counter()
        acc0, acc5, corr = desk_protocol(train, test)
        d["text"] = (f"acc lambda=0 {acc0:.4f}, lambda=0.5 {acc5:.4f}, corr {corr:.3f}, "
                     f"{(time.perf_counter() - start) / 60:.0f} min")
        assert acc5 - acc0 > 0 and corr > 0.5


@pytest.mark.slow
def test_desk_protocol_on_synthetic_stand_in():
    """Same protocol with synthetic labelled images in place of CIFAR-100 (informative, not a criterion).

    The stand-in's classes are unrelated to the synthetic neural latents, so no
    accuracy gain is expected; the run documents the pipeline's behaviour and
    the DCCA correlation reached at this scale.
    """
    if cifar_dir() is not None:
        pytest.skip("real CIFAR-100 present; criterion 8 runs on it")
    train, test = make_synthetic_split(500, 100, n_classes=10, seed=80)
    start = time.perf_counter()
    acc0, acc5, corr = desk_protocol(train, test)
    note(f"desk protocol on synthetic stand-in: acc lambda=0 {acc0:.4f}, lambda=0.5 {acc5:.4f}, final CCA corr {corr:.3f}, "
          f"{(time.perf_counter() - start) / 60:.1f} min")
    assert corr > 0.5


# ---------------------------------------------------------------------------
# 9: full replication (opt-in)


FULL_TARGETS = {0.0: (0.474, 0.59), 0.5: (0.523, 0.645)}
FULL_EPSILONS = (0.0, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)


def test_criterion_09_full_replication():
    title = "full CIFAR-100, 100 epochs, 5 seeds: accuracy targets within 2 points, robustness ordering"
    if os.environ.get("NDREG_FULL_REPLICATION") != "1":
        skip_criterion(9, title, "optional; set NDREG_FULL_REPLICATION=1 with real data to run")
        pytest.skip("full replication is opt-in")
    with criterion(9, title) as d:
        path = cifar_dir()
        prepared = Path(os.environ.get("NDREG_DATA_ROOT", ".")) / "prepared" / "population.ndpp"
        if path is None or not prepared.exists():
            raise FileNotFoundError("needs CIFAR-100 and a prepared real pseudo-population under $NDREG_DATA_ROOT")
        train, test = load_cifar100(path)
        pop = load_pseudo_population(prepared)
        pairs = neural_pairs(np.load(prepared.parent / "stimuli.npy"), pop, SHAPE32)
        out = {}
        for lam in FULL_TARGETS:
            finals, curves = [], []
            for seed in range(5):
                hist, state = run_experiment(ExperimentConfig(lam=lam, seed=seed), train, test, pairs)
                finals.append((hist[-1]["val_acc"], hist[-1]["val_superclass_acc"]))
                curves.append([a for _, a in robustness_sweep(state.cnn, test, FULL_EPSILONS)])
            out[lam] = (np.mean(finals, axis=0), np.mean(curves, axis=0))
        d["text"] = "; ".join(f"lambda={k}: exact {v[0][0]:.3f}, super {v[0][1]:.3f}" for k, v in out.items())
        for lam, (exact, sup) in FULL_TARGETS.items():
            assert abs(out[lam][0][0] - exact) <= 0.02 and abs(out[lam][0][1] - sup) <= 0.02
        low = slice(1, 5)  # 0.002 .. 0.02
        assert np.all(out[0.5][1][low] > out[0.0][1][low])


# ---------------------------------------------------------------------------
# 10-11: preprocessing shape and super-class metric


def test_criterion_10_pseudo_population_shape():
    with criterion(10, "10 sessions x 956 images x 20 repeats -> 956 x 800, blocks uncorrelated") as d:
        sessions = []
        for s in range(10):
            corpus = make_synthetic_corpus(956, 1, 95 + s, 20, 0.9, seed=100 + s, image_shape=(8, 8, 3))
            sess = corpus.sessions[0]
            sess.session_id = f"session{s:02d}"
            sessions.append(sess)
        pop = build_pseudo_population(sessions, 80)
        worst = 0.0
        for s in range(10):
            cov = np.cov(pop.block(s), rowvar=False)
            worst = max(worst, float(np.max(np.abs(cov - np.diag(np.diag(cov))))))
        d["text"] = f"shape {pop.responses.shape}, max off-diagonal {worst:.1e}"
        assert pop.responses.shape == (956, 800) and worst < 1e-8


def test_criterion_11_super_class_metric():
    with criterion(11, "within-super-class errors give super_acc 1 and exact_acc < 1; super >= exact") as d:
        fine = np.repeat(np.arange(100), 100)
        coarse = CIFAR100_FINE_TO_COARSE[fine]
        pred = fine.copy()
        mouse, hamster = FINE_LABEL_NAMES.index("mouse"), FINE_LABEL_NAMES.index("hamster")
        pred[fine == mouse] = hamster
        rng = np.random.default_rng(11)
        for k in rng.choice(100, 20, replace=False):
            members = np.flatnonzero(CIFAR100_FINE_TO_COARSE == CIFAR100_FINE_TO_COARSE[k])
            rows = np.flatnonzero(fine == k)[:30]
            pred[rows] = rng.choice(members, rows.size)
        rep = score(pred, fine, coarse, CIFAR100_FINE_TO_COARSE, 100)
        assert rep.super_acc == 1.0 and rep.exact_acc < 1.0
        reports = [rep]
        for _ in range(200):
            noisy = np.where(rng.random(fine.size) < rng.random(), rng.integers(0, 100, fine.size), fine)
            reports.append(score(noisy, fine, coarse, CIFAR100_FINE_TO_COARSE, 100))
        _, test = make_synthetic_split(1, 20, n_classes=10, seed=11)
        for seed in range(5):
            reports.append(evaluate(nn.build_cornetz(10, SHAPE32, (4, 4, 4, 4), seed=seed), test))
        assert all(r.super_acc >= r.exact_acc for r in reports)
        d["text"] = f"constructed set exact {rep.exact_acc:.4f}, super {rep.super_acc:.1f}; {len(reports)} reports"
