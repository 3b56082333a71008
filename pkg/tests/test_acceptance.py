"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Expected values come from independent computations (finite differences,
direct linear solves, brute-force pairwise counts, closed-form posteriors).
"""
import os
import time

import numpy as np
import pytest

from rue_audit.audit import (
    build_audit_context,
    laplace_ensemble,
    laplace_score_closed,
    resampled_covariance_variance,
    rue_ensemble,
    rue_kernel_matrix,
    rue_parameters,
    rue_score,
    rue_score_approx,
)
from rue_audit.data import (
    DatasetMatrix,
    load_manifest_entry,
    parse_split_spec,
    read_manifest,
    simulate_extrapolation_task,
    standardize,
)
from rue_audit.evaluation import auc, auc_pairwise, benchmark_run, gaussian_interval, make_predictive
from rue_audit.linalg import multinomial_sample
from rue_audit.model import (
    MlpArchitecture,
    hessian_vector_product,
    loss_gradient_matrix,
    objective_gradient,
    predict,
    prediction_gradients,
)
from rue_audit.train import TrainConfig, train

from conftest import central_difference, random_instance, ridge_problem, scaled_error


def test_c1_derivatives_match_finite_differences(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = {"loss": 0.0, "pred": 0.0, "hvp": 0.0}
    for _ in range(50):
        arch, theta, X, y = random_instance(rng)

        def per_sample_loss(t):
            return 0.5 * (y - predict(arch, t, X)) ** 2

        worst["loss"] = max(worst["loss"], scaled_error(
            loss_gradient_matrix(arch, theta, X, y).T, central_difference(per_sample_loss, theta)))
        worst["pred"] = max(worst["pred"], scaled_error(
            prediction_gradients(arch, theta, X), central_difference(lambda t: predict(arch, t, X), theta)))
        v = rng.normal(size=arch.n_params)
        eps = 1e-5
        fd = (objective_gradient(arch, theta + eps * v, X, y, 1.0)
              - objective_gradient(arch, theta - eps * v, X, y, 1.0)) / (2 * eps)
        worst["hvp"] = max(worst["hvp"], scaled_error(hessian_vector_product(arch, theta, X, y, 1.0, v), fd))
    elapsed = time.perf_counter() - start
    ok = worst["loss"] <= 1e-6 and worst["pred"] <= 1e-6 and worst["hvp"] <= 1e-5 and elapsed < 10
    verdict("C1 derivative correctness", ok,
            "max rel err loss-grad %.2e, pred-grad %.2e, HVP %.2e; %.2fs"
            % (worst["loss"], worst["pred"], worst["hvp"], elapsed))


def test_c2_newton_step_matches_reweighted_ridge(verdict):
    # Expected to fail: the reweighted minimizer is not affine in the weights.
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    arch, X, y, Xb, theta = ridge_problem(rng, n=40, p=3, alpha=1.0)
    ctx = build_audit_context((arch, theta, 1.0, True), X, y)
    W = multinomial_sample(ctx.n, rng, size=100)
    newton = rue_parameters(ctx, W)
    dev = 0.0
    for w, t_newton in zip(W, newton):
        exact = np.linalg.solve(Xb.T @ (w[:, None] * Xb) + np.eye(Xb.shape[1]), Xb.T @ (w * y))
        dev = max(dev, float(np.abs(t_newton - exact).max()))
    elapsed = time.perf_counter() - start
    verdict("C2 quadratic exactness of the resampling step", dev <= 1e-8 and elapsed < 5,
            "max deviation %.3e (required <= 1e-8); %.2fs" % (dev, elapsed))


def test_c3_sandwich_identity_and_monte_carlo(verdict):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    ident = 0.0
    for _ in range(10):
        arch, theta, X, y = random_instance(rng)
        ctx = build_audit_context((arch, theta, 1.0, True), X, y)
        Z = rng.normal(size=(15, arch.input_dim))
        G = prediction_gradients(arch, theta, Z)
        Hinv = np.linalg.inv(ctx.damped_hessian)
        L = loss_gradient_matrix(arch, theta, X, y)
        sandwich = np.einsum("md,de,ek,fk,fg,mg->m", G, Hinv, L, L, Hinv, G)
        ident = max(ident, scaled_error(rue_score_approx(ctx, Z), sandwich, floor=1e-300))

    arch, theta, X, y = random_instance(rng, p=3, h=6, n=25)
    ctx = build_audit_context((arch, theta, 1.0, True), X, y)
    Z = rng.normal(size=(20, 3))
    G = prediction_gradients(arch, theta, Z)
    b = 10_000
    W = multinomial_sample(ctx.n, rng, size=b)
    lin = (rue_parameters(ctx, W) - theta) @ G.T
    n = ctx.n
    expected = resampled_covariance_variance(ctx, Z, np.eye(n) - np.ones((n, n)) / n)
    dev = lin - lin.mean(0)
    mc = (dev**2).sum(0) / (b - 1)
    se = (dev**2).std(0, ddof=1) / np.sqrt(b)
    z = np.abs(mc - expected) / se
    elapsed = time.perf_counter() - start
    ok = ident <= 1e-10 and bool(np.all(z <= 3)) and elapsed < 60
    verdict("C3 sandwich identity and Monte Carlo variance", ok,
            "identity rel err %.2e; max |MC - analytic| = %.2f SE over 20 points; %.2fs"
            % (ident, z.max(), elapsed))


def test_c4_kernel_gram_matrices(verdict):
    rng = np.random.default_rng(404)
    symmetric, min_eig = True, np.inf
    for _ in range(100):
        arch, theta, X, y = random_instance(rng)
        ctx = build_audit_context((arch, theta, 1.0, True), X, y)
        K = rue_kernel_matrix(ctx, rng.normal(size=(10, arch.input_dim)))
        symmetric &= bool(np.array_equal(K, K.T))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(K).min()))
    verdict("C4 kernel Gram matrices", symmetric and min_eig >= -1e-8,
            "exactly symmetric: %s; min eigenvalue %.3e" % (symmetric, min_eig))


def test_c5_damped_hessian_floor(verdict):
    rng = np.random.default_rng(505)
    worst, damped = np.inf, 0
    for k in range(20):
        p, n = int(rng.integers(1, 4)), int(rng.integers(15, 40))
        X = rng.normal(size=(n, p))
        y = np.sin(X.sum(1)) + 0.3 * rng.normal(size=n)
        model = train(MlpArchitecture(p, int(rng.integers(3, 12))), X, y,
                      TrainConfig(epochs=30, batch_size=16, learning_rate=0.01, seed=k))
        ctx = build_audit_context(model, X, y)
        damped += ctx.damping > 0
        worst = min(worst, float(np.linalg.eigvalsh(ctx.damped_hessian).min()))
    verdict("C5 damping floor", worst >= 1 - 1e-8,
            "min eigenvalue of damped Hessian %.12f over 20 models (%d needed damping)" % (worst, damped))


def test_c6_auc_matches_pairwise(verdict):
    rng = np.random.default_rng(606)
    mismatches = 0
    for _ in range(200):
        m = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=m)
        if labels.all() or not labels.any():
            labels[0], labels[-1] = 0, 1
        scores = rng.integers(0, int(rng.integers(2, 30)), size=m).astype(float)
        mismatches += auc(scores, labels) != auc_pairwise(scores, labels)
    verdict("C6 rank AUC equals pairwise count", mismatches == 0,
            "%d mismatches over 200 tied instances" % mismatches)


def test_c7_laplace_closed_form(verdict):
    rng = np.random.default_rng(707)
    arch, X, y, Xb, theta = ridge_problem(rng, n=50, p=3, alpha=1.0, noise=1.0)
    ctx = build_audit_context((arch, theta, 1.0, True), X, y)
    Z = rng.normal(size=(20, 3))
    Zb = np.hstack([Z, np.ones((20, 1))])
    # unit-noise Gaussian likelihood with a standard normal prior
    post_cov = np.linalg.inv(Xb.T @ Xb + np.eye(4))
    analytic = np.einsum("md,de,me->m", Zb, post_cov, Zb)
    closed_err = float(np.abs(laplace_score_closed(ctx, Z) - analytic).max())
    b = 10_000
    vals = laplace_ensemble(ctx, Z, b=b, rng=rng).values
    dev = vals - vals.mean(0)
    z = np.abs((dev**2).sum(0) / (b - 1) - analytic) / ((dev**2).std(0, ddof=1) / np.sqrt(b))
    verdict("C7 Laplace closed form and ensemble", closed_err <= 1e-8 and bool(np.all(z <= 3)),
            "closed-form max err %.2e; ensemble max %.2f SE" % (closed_err, z.max()))


def test_c8_extrapolation_detection(verdict):
    start = time.perf_counter()
    report = benchmark_run(
        lambda s: (lambda t: (t.train, t.test))(simulate_extrapolation_task(s, n_train=200, n_test=400)),
        n_splits=20, config=TrainConfig(epochs=200), methods=["rue", "null"],
        hidden_width=50, ensemble_size=100, seed=0, name="extrapolation",
    )
    elapsed = time.perf_counter() - start
    summ = report.summary()
    rue, null = summ["rue"]["auc_at_median"]["mean"], summ["null"]["auc_at_median"]["mean"]
    failed = sum(s.error is not None for s in report.splits)
    ok = failed == 0 and rue > 0.65 and rue > null and elapsed < 600
    verdict("C8 extrapolation detection", ok,
            "AUC at median tolerance: RUE %.3f, null %.3f; %d failed splits; %.1fs"
            % (rue, null, failed, elapsed))


def test_c9_predictive_interval_coverage(verdict):
    rng = np.random.default_rng(909)
    p, n_train, n_test, noise = 4, 300, 4000, 0.5
    beta = rng.normal(size=p)
    X = rng.normal(size=(n_train + n_test, p))
    y = X @ beta + 1.0 + noise * rng.normal(size=n_train + n_test)
    raw_tr = DatasetMatrix(X[:n_train], y[:n_train])
    raw_te = DatasetMatrix(X[n_train:], y[n_train:])
    tr, te, stats = standardize(raw_tr, raw_te)
    model = train(MlpArchitecture(p, linear=True), tr.inputs, tr.targets,
                  TrainConfig(batch_size=32, seed=0), stats)
    ctx = build_audit_context(model, tr.inputs, tr.targets)
    s2 = rue_score(rue_ensemble(ctx, te.inputs, b=100, rng=rng))
    lo, hi = gaussian_interval(make_predictive(model, te.inputs, s2), 0.9)
    coverage = float(np.mean((raw_te.targets >= lo) & (raw_te.targets <= hi)))
    verdict("C9 90% interval coverage", 0.85 <= coverage <= 0.95,
            "empirical coverage %.4f on %d test points" % (coverage, n_test))


UCI_MANIFEST = os.environ.get("RUE_AUDIT_UCI_MANIFEST")


@pytest.mark.slow
def test_c10_uci_benchmark(verdict):
    label = "C10 UCI benchmark reproduction"
    if not UCI_MANIFEST:
        verdict.skip(label, "set RUE_AUDIT_UCI_MANIFEST to a dataset manifest to run")
    entries = read_manifest(UCI_MANIFEST)
    missing = {"housing", "power"} - set(entries)
    if missing:
        verdict.skip(label, "manifest lacks %s" % ", ".join(sorted(missing)))
    methods = ["rue", "laplace", "kde", "bootstrap-sgd"]
    notes, ok = [], True

    def run(name, n_splits, spec=None):
        e = entries[name]
        spec = spec if spec is not None else (parse_split_spec(e.train) if e.train else 0.9)
        return benchmark_run(load_manifest_entry(e), n_splits=n_splits, train_spec=spec,
                             methods=methods, seed=0, name=name)

    def rises(report):
        c = np.nanmean([s.auc_by_method["rue"] for s in report.splits if s.error is None], axis=0)
        third = max(1, len(c) // 3)
        return np.nanmean(c[-third:]) > np.nanmean(c[:third])

    start = time.perf_counter()
    housing = run("housing", 20)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1800
    notes.append("housing %.0fs" % elapsed)
    good = [s for s in housing.splits if s.error is None]
    wins = sum(s.mean_nll["rue"] <= s.mean_nll["laplace"] for s in good)
    ok &= wins >= 12
    notes.append("RUE NLL <= Laplace on %d/20 splits" % wins)

    power = run("power", 20, spec=600)
    top = max(np.nanmax(v) for s in power.splits if s.error is None for v in s.auc_by_method.values())
    ok &= top < 0.60
    notes.append("power max AUC %.3f" % top)

    shapes = [rises(housing)]
    for name in sorted(set(entries) - {"housing", "power"}):
        shapes.append(rises(run(name, 1)))
    ok &= sum(shapes) > len(shapes) / 2
    notes.append("AUC rises with tolerance on %d/%d datasets" % (sum(shapes), len(shapes)))
    verdict(label, bool(ok), "; ".join(notes))
