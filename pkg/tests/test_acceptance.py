"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The scenario matrix (5 seeds, every default method, all six ordered clinic
pairs) is trained once per session and shared by criteria 5, 6, 8 and 9.
Set KDDA_WORKERS to run matrix cells in parallel.
"""
import os
import time

import numpy as np
import pytest
from scipy import stats

from kdda import evalharness as eh
from kdda import losses as L
from kdda import pipelines as pl
from kdda import synthdata as sd
from kdda.models import DiscriminatorConfig, SegNetConfig, forward_disc, forward_seg, init_params
from kdda.tensor import Tensor

SEEDS = (1, 2, 3, 4, 5)
WORKERS = int(os.environ.get("KDDA_WORKERS", os.cpu_count() or 1))
MATRIX_BUDGET_S = 15 * 60


@pytest.fixture
def verdict(request):
    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance.append(line)
        print(line)
        assert ok, line

    return report


@pytest.fixture(scope="module")
def matrix():
    start = time.perf_counter()
    run = eh.run_matrix(sd.default_clinics(), eh.DEFAULT_METHODS, SEEDS, pl.desk_config(), workers=WORKERS)
    return run, time.perf_counter() - start


def pair_means(run, method):
    return {(r.train_clinic, r.test_clinic): r.mean for r in run.results if r.method == method}


def short(pair):
    return f"{pair[0][:3]}->{pair[1][:3]}"


# -- 1. gradient fidelity -------------------------------------------------------------------

def relative_errors(f, t, coords, h=1e-5, floor=1e-6):
    """(errors, kinks): |analytic - central difference| / max(|analytic|, |numeric|).

    ReLU and max-pool switch points make the difference quotient wrong when
    one lies within the step; such coordinates are detected by comparing the
    quotients at ``h`` and ``h / 10`` and returned as kinks instead of being
    scored. Coordinates where both gradients are below ``floor`` are
    compared absolutely.
    """
    t.zero_grad()
    f().backward()
    analytic = t.grad.reshape(-1).copy()
    flat = t.data.reshape(-1)

    def quotient(i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        return (up - down) / (2 * step)

    errs, kinks = [], 0
    for i in coords:
        num, fine = quotient(i, h), quotient(i, h / 10)
        if abs(num - fine) > 1e-5 * max(abs(fine), floor):
            kinks += 1
            continue
        scale = max(abs(num), abs(analytic[i]))
        errs.append(abs(num - analytic[i]) / (scale if scale >= floor else 1.0))
    return errs, kinks


def _instances(n=20):
    for seed in range(n):
        rng = np.random.default_rng(seed)
        seg = init_params(SegNetConfig(), seed)
        disc = init_params(DiscriminatorConfig(conv_widths=(8, 16, 32), image_size=(8, 8)), 100 + seed)
        x = rng.standard_normal((2, 1, 8, 8))
        onehot = np.moveaxis(np.eye(2)[rng.integers(0, 2, (2, 8, 8))], -1, 1)
        teacher_logits = forward_seg(init_params(SegNetConfig(), 1000 + seed), x).data
        yield rng, seg, disc, x, onehot, teacher_logits


def test_criterion_1_gradient_fidelity(verdict):
    start = time.perf_counter()
    worst = {"segmentation CE": 0.0, "distillation T=2": 0.0, "discriminator": 0.0, "confusion": 0.0}
    checked = kinked = 0
    for rng, seg, disc, x, onehot, zt in _instances():
        def maps():
            return L.softmax(forward_seg(seg, x), axis=1)

        checks = {
            "segmentation CE": (lambda: L.cross_entropy(onehot, maps(), axis=1).scalar, seg),
            "distillation T=2": (lambda: L.distillation_loss(zt, forward_seg(seg, x), 2.0, axis=1).scalar, seg),
            "discriminator": (lambda: L.adversarial_losses(forward_disc(disc, maps()), [0, 1])[0].scalar, disc),
            "confusion": (lambda: L.adversarial_losses(forward_disc(disc, maps()), [0, 1])[1].scalar, seg),
        }
        for name, (f, params) in checks.items():
            for _, t in params.items():
                coords = rng.choice(t.size, min(4, t.size), replace=False)
                errs, kinks = relative_errors(f, t, coords)
                worst[name] = max([worst[name], *errs])
                checked += len(errs)
                kinked += kinks
            seg.zero_grad()
            disc.zero_grad()
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max relative error over 20 instances: {detail}; {checked} coordinates scored, "
                   f"{kinked} skipped at activation switch points; {elapsed:.0f}s")


# -- 2. loss identities -----------------------------------------------------------------------

def test_criterion_2_loss_identities(verdict):
    rng = np.random.default_rng(2)
    temps = (0.5, 1.0, 2.0, 4.0, 8.0)
    worst_norm = worst_ce = worst_bound = 0.0
    argmax_ok = entropy_ok = bound_ok = True
    for _ in range(100):
        z = rng.standard_normal(5) * 3
        probs = [L.softmax(Tensor(z), T).data for T in temps]
        worst_norm = max(worst_norm, *(abs(p.sum() - 1.0) for p in probs))
        argmax_ok &= all(p.argmax() == z.argmax() for p in probs)
        h = [L.entropy(p) for p in probs]
        entropy_ok &= all(b >= a - 1e-12 for a, b in zip(h, h[1:]))
        p = probs[1]
        worst_ce = max(worst_ce, abs(L.cross_entropy(p, Tensor(p)).value - L.entropy(p)))
        target = probs[2]
        attained = L.distillation_loss(Tensor(z), Tensor(np.log(target)), 2.0).value
        worst_bound = max(worst_bound, abs(attained - L.entropy(target)))
        other = rng.standard_normal(5) * 3
        bound_ok &= L.distillation_loss(Tensor(z), Tensor(other), 2.0).value >= L.entropy(target) - 1e-12
    ok = (worst_norm <= 1e-12 and argmax_ok and entropy_ok and worst_ce <= 1e-12
          and worst_bound <= 1e-12 and bound_ok)
    verdict(2, ok, f"|sum-1| {worst_norm:.1e}, |CE(p,p)-H| {worst_ce:.1e}, bound gap {worst_bound:.1e}, "
                   f"argmax {argmax_ok}, entropy monotone {entropy_ok}, lower bound {bound_ok}")


# -- 3. dice oracle ------------------------------------------------------------------------------

def test_criterion_3_dice_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 33, 2))
        a = rng.random(shape) < rng.random() * 0.5
        b = rng.random(shape) < rng.random() * 0.5
        inter = size_a = size_b = 0
        for i, j in np.ndindex(*shape):
            inter += int(a[i, j] and b[i, j])
            size_a += int(a[i, j])
            size_b += int(b[i, j])
        want = 1.0 if size_a + size_b == 0 else 2.0 * inter / (size_a + size_b)
        mismatches += eh.dice(a, b) != want
    empty = eh.dice(np.zeros((4, 4)), np.zeros((4, 4)))
    verdict(3, mismatches == 0 and empty == 1.0, f"{mismatches} mismatches in 1000 pairs, empty/empty -> {empty}")


# -- 4. statistics -----------------------------------------------------------------------------

def test_criterion_4_paired_t_test(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        a = rng.random(n)
        b = np.clip(a + rng.normal(rng.normal(0, 0.05), 0.1, n), 0, 1)
        worst = max(worst, abs(eh.paired_t_test(a, b).p_value - stats.ttest_rel(a, b).pvalue))
    same = eh.paired_t_test([0.3, 0.5, 0.9], [0.3, 0.5, 0.9]).p_value == 1.0
    try:
        eh.paired_t_test([1.0] * 4, [0.0] * 4)
        constant_raises = False
    except eh.DegenerateTestError:
        constant_raises = True
    verdict(4, worst < 1e-9 and same and constant_raises,
            f"max |p - reference| {worst:.1e}; a == b gives p = 1: {same}; constant d raises: {constant_raises}")


# -- 5. to 9. scenario matrix -------------------------------------------------------------------

def test_criterion_5_kd_ordering(verdict, matrix):
    run, elapsed = matrix
    kd, lb = pair_means(run, eh.KD), pair_means(run, eh.L_BOUND)
    within = all(kd[p] >= lb[p] - 0.01 for p in kd)
    strict = sum(kd[p] > lb[p] for p in kd)
    ok = within and strict >= 4 and elapsed < MATRIX_BUDGET_S
    per_pair = " ".join(f"{short(p)} {kd[p]:.3f}/{lb[p]:.3f}" for p in sorted(kd))
    verdict(5, ok, f"KD/L-bound {per_pair}; within 0.01 on all: {within}; strictly greater on {strict}/6; "
                   f"matrix {elapsed / 60:.1f} min with {WORKERS} worker(s)")


def test_criterion_6_bound_ordering(verdict, matrix):
    run, _ = matrix
    ub, kd, ada = pair_means(run, eh.U_BOUND), pair_means(run, eh.KD), pair_means(run, eh.ADA)
    wins = sum(ub[p] >= kd[p] and ub[p] >= ada[p] for p in ub)
    verdict(6, wins >= 5, f"U-bound >= KD and ADA on {wins}/6 pairs")


def test_criterion_7_ada_removes_domain_signal(verdict):
    """Probe a fresh discriminator on frozen softmax maps before and after ADA.

    Seed 1, fold 0 of each pair (the same models the matrix trains). The
    probe trains on 300 fresh subjects per domain and scores 100 more.
    """
    cfg = pl.desk_config(seed=1)
    lines, ok = [], True
    for train, test in eh.ordered_pairs(sd.default_clinics()):
        source, target = eh.cell_data(train, test, 1)
        adapt_idx, _ = eh.fold_split(len(target), 0)
        teacher = pl.train_teacher(source, cfg)
        ada = pl.train_ada(source, target.subset(adapt_idx, sd.TARGET_UNLABELED), cfg)
        xs = sd.generate_domain(train, 400, 7001).images()
        xt = sd.generate_domain(test, 400, 7001, role=sd.TARGET_UNLABELED).images()
        split = ((xs[:300], xt[:300]), (xs[300:], xt[300:]))
        pre = pl.domain_probe(teacher.params, *split, cfg, epochs=15)
        post = pl.domain_probe(ada.params, *split, cfg, epochs=15)
        ok &= pre > 0.8 and post < 0.65
        lines.append(f"{train.domain_id[:3]}->{test.domain_id[:3]} {pre:.2f}->{post:.2f}")
    verdict(7, ok, "probe accuracy pre->post: " + " ".join(lines))


def test_criterion_8_on_the_fly_parity(verdict, matrix):
    run, _ = matrix
    fly, kd = pair_means(run, eh.FLY_KD), pair_means(run, eh.KD)
    gaps = {p: abs(fly[p] - kd[p]) for p in kd}
    verdict(8, max(gaps.values()) <= 0.05,
            "|on-the-fly KD - KD|: " + " ".join(f"{short(p)} {g:.3f}" for p, g in sorted(gaps.items())))


def test_criterion_9_teacher_swap(verdict, matrix):
    run, _ = matrix
    kd, ada, swap = pair_means(run, eh.KD), pair_means(run, eh.ADA), pair_means(run, eh.KD_ON_ADA)
    pair = max(kd, key=lambda p: ada[p] - kd[p])
    verdict(9, swap[pair] >= kd[pair],
            f"pair {short(pair)} (ADA {ada[pair]:.3f} vs KD {kd[pair]:.3f}): KD-on-ADA {swap[pair]:.3f}")


# -- 10. determinism -----------------------------------------------------------------------------

def test_criterion_10_rerun_is_byte_identical(verdict, matrix, tmp_path):
    run, _ = matrix
    again = eh.run_matrix(sd.default_clinics(), eh.DEFAULT_METHODS, SEEDS, pl.desk_config(), workers=WORKERS)
    first, second = eh.write_outputs(run, tmp_path / "a")[0], eh.write_outputs(again, tmp_path / "b")[0]
    a, b = open(first, "rb").read(), open(second, "rb").read()
    verdict(10, a == b, f"results.csv {len(a)} bytes, identical: {a == b}")
