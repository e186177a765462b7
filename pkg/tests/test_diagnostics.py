import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from illidvae.diagnostics import (METRICS_HEADER, MetricsRecord, active_units, active_units_from_means,
                                  assignment_accuracy, clustering_accuracy, evaluate, fisher_and_bound,
                                  fisher_vs_bound, gaussian_kl, iw_log_likelihood, kl_posterior_prior,
                                  mutual_information, read_metrics_csv, relative_fisher,
                                  theorem1_bound, theorem2_bias_variance, theorem2_bound,
                                  write_metrics_csv)
from illidvae.icnn import BrenierMap
from illidvae.models import ModelConfig, NetSpec, build_model
from illidvae.verifier import gaussian_fisher_1d, linear_model, random_model


def vae(l=1, t=1, seed=0, **kw):
    return build_model(ModelConfig(latent_dim=l, data_dim=t, **kw), np.random.default_rng(seed))


def linear_encoder(model, weight, bias):
    """Replace the encoder with an affine map ``x -> x @ weight + bias``."""
    enc = model.encoder
    enc.mlp.weights = enc.mlp.weights[-1:]
    W, b = enc.mlp.weights[0]
    W.data = np.array(weight, dtype=float).reshape(model.data_dim, -1)
    b.data = np.array(bias, dtype=float)


def test_constant_decoder_has_zero_fisher():
    m = vae(2, 2)
    m.decoder.first = BrenierMap.linear(2, 0.0, [1.0, -1.0])
    est = relative_fisher(m, np.random.default_rng(0).normal(size=(5, 2)), 256, 1)
    assert est.value == 0.0 and est.stderr == 0.0


@pytest.mark.parametrize("L", [1.0, 1.5])
def test_linear_gaussian_fisher_and_bound(L):
    m = linear_model(1, L)
    fisher, bound = fisher_and_bound(m, [[0.0]], 4096, 3)
    assert abs(fisher.value - L ** 4) < 4 * fisher.stderr
    # equality case: identical integrands on the shared draw
    assert fisher.value == pytest.approx(bound.value, rel=1e-6)


def test_two_gaussian_fisher_closed_form():
    assert gaussian_fisher_1d(0.0, 1.0, 2.0, 1.0) == pytest.approx(4.0)
    z = np.random.default_rng(0).normal(size=100_000)
    diff = (-z) - (-(z - 2.0))
    assert np.mean(diff ** 2) == pytest.approx(4.0, abs=1e-12)


def test_zero_constant_bound_vanishes():
    m = random_model(2, 0.0, 1)
    assert theorem1_bound(m, [[1.0, 2.0]], L=0.0, n_z=128, rng=0).value == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_fisher_dominates_bound_on_random_models(seed):
    m = random_model(2, 1.5, seed)
    pts = np.random.default_rng(seed).normal(0, 3, (8, 2))
    pw = fisher_vs_bound(m, pts, n_z=512, rng=seed)
    assert np.all(pw.fisher >= pw.bound - 3 * pw.combined_se())


def test_theorem2_single_point_reduces_to_theorem1():
    m = random_model(2, 0.5, 4)
    x = np.array([[0.3, -1.0]])
    lhs, rhs = theorem2_bound(m, x, 256, 7)
    f, b = fisher_and_bound(m, x, 256, 7)
    assert lhs.value == pytest.approx(f.value, rel=1e-12)
    assert rhs.value == pytest.approx(b.value, rel=1e-12)


def test_theorem2_on_random_models():
    for seed in range(3):
        m = random_model(2, 1.5, 10 + seed)
        lhs, rhs = theorem2_bound(m, np.random.default_rng(seed).normal(0, 2, (16, 2)), 512, seed)
        assert lhs.value >= rhs.value - 3 * math.hypot(lhs.stderr, rhs.stderr)


def test_bias_variance_split():
    m = random_model(2, 1.5, 5)
    xs = np.random.default_rng(1).normal(0, 2, (10, 2))
    _, rhs = theorem2_bound(m, xs, 4096, 2)
    var, bias = theorem2_bias_variance(m, xs, 4096, 2)
    # on the identical draw the split is an algebraic identity
    assert var + bias == pytest.approx(rhs.value, rel=1e-10)


def test_kl_closed_forms():
    assert gaussian_kl([0.0, 0.0], [1.0, 1.0]) == 0.0
    assert gaussian_kl([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.5)
    q = stats.norm(0, 0.5)
    quad, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - stats.norm.logpdf(z)), -10, 10)
    assert gaussian_kl([0.0], [0.25]) == pytest.approx(quad, rel=1e-8)
    assert quad == pytest.approx(0.5 * (0.25 - 1 - math.log(0.25)), rel=1e-8)


def test_model_kl_matches_encoder_output():
    m = vae(2, 2)
    linear_encoder(m, np.zeros((2, 4)), [1.0, 0.0, 0.0, 0.0])
    assert kl_posterior_prior(m, np.ones((3, 2))) == pytest.approx(0.5)
    linear_encoder(m, np.zeros((2, 4)), [0.0, 0.0, 0.0, 0.0])
    assert kl_posterior_prior(m, np.ones((3, 2))) == 0.0


def test_iw_single_sample_matches_elbo_in_expectation():
    m = vae(1, 1, seed=2)
    x = np.full((10_000, 1), 0.7)
    iw = iw_log_likelihood(m, x, 1, np.random.default_rng(0))
    el = m.elbo_rows(x, np.random.default_rng(1)).data
    se = math.sqrt(iw.var() / len(iw) + el.var() / len(el))
    assert abs(iw.mean() - el.mean()) < 4 * se


def test_iw_recovers_conjugate_marginal():
    L, sigma = 1.5, 0.8
    m = linear_model(1, L, sigma)
    linear_encoder(m, [[0.2, 0.0]], [0.1, 0.3])  # deliberately imperfect proposal
    x = np.array([[1.2]])
    reps = np.array([iw_log_likelihood(m, x, 10_000, np.random.default_rng(s))[0] for s in range(10)])
    truth = stats.norm.logpdf(1.2, 0.0, math.sqrt(L ** 2 + sigma ** 2))
    assert abs(reps.mean() - truth) < 4 * reps.std(ddof=1) / math.sqrt(len(reps)) + 1e-9


def test_iw_monotone_in_K():
    m = vae(2, 2, seed=3)
    x = np.tile([[0.5, -0.5]], (200, 1))
    k1 = iw_log_likelihood(m, x, 1, np.random.default_rng(0))
    k100 = iw_log_likelihood(m, x, 100, np.random.default_rng(1))
    assert k100.mean() >= k1.mean() - k1.std(ddof=1) / math.sqrt(len(k1))


def test_mi_zero_for_constant_encoder():
    m = vae(2, 2)
    linear_encoder(m, np.zeros((2, 4)), [0.3, -0.2, -1.0, 0.5])
    mi = mutual_information(m, np.random.default_rng(0).normal(size=(20, 2)), 2000, 1)
    assert abs(mi) < 1e-12


def test_mi_bounds_and_separated_pair():
    m = vae(1, 1)
    linear_encoder(m, [[10.0, 0.0]], [0.0, math.log(0.01)])
    xs = np.array([[-1.0], [1.0]])
    mi = mutual_information(m, xs, 4000, 2)
    assert mi == pytest.approx(math.log(2), rel=0.05)
    m2 = vae(2, 2, seed=5)
    xs2 = np.random.default_rng(3).normal(size=(30, 2))
    mi2 = mutual_information(m2, xs2, 3000, 4)
    assert -0.05 <= mi2 <= math.log(30) + 0.05


def test_active_units():
    assert active_units_from_means(np.tile([1.0, 2.0], (10, 1))) == 0.0
    rng = np.random.default_rng(0)
    means = np.column_stack([rng.normal(0, 1, 1000), rng.normal(0, 1, 1000)])
    means = (means - means.mean(0)) / means.std(0) * np.sqrt([0.02, 0.005])
    assert active_units_from_means(means, 0.01) == 0.5
    m = vae(2, 2, seed=1)
    assert active_units(m, rng.normal(size=(20, 2)), threshold=0.0) == 1.0


def test_assignment_accuracy_relabeling():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert assignment_accuracy(np.array([2, 2, 0, 0, 1, 1]), labels, 3) == 1.0


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred, labels = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
        brute = max(np.mean(np.array(p)[pred] == labels) for p in itertools.permutations(range(3)))
        assert assignment_accuracy(pred, labels, 3) == pytest.approx(brute)


def test_uniform_responsibilities_give_chance():
    m = build_model(ModelConfig(kind="il-lidmvae"), np.random.default_rng(0))
    W, b = m.y_encoder.weights[-1]
    W.data[:] = 0.0
    b.data[:] = 0.0
    labels = np.repeat([0, 1], 50)
    assert clustering_accuracy(m, np.random.default_rng(1).normal(size=(100, 2)), labels) == 0.5


def test_metrics_record_rejects_bad_values():
    good = dict(nll=1.0, kl=0.1, fisher=0.2, fisher_se=0.01, theorem1_bound=0.1, theorem1_se=0.01,
                mi=0.1, au=0.5, accuracy=0.9, emp_inv_lip=1.0, n_mc=100, seed=0)
    MetricsRecord(**good)
    for key, bad in (("nll", float("nan")), ("fisher", -1.0), ("au", 1.5)):
        with pytest.raises(ValueError):
            MetricsRecord(**dict(good, **{key: bad}))


def test_evaluate_deterministic_and_csv_round_trip(tmp_path):
    m = build_model(ModelConfig(kind="il-lidmvae", icnn=NetSpec(1, 4), encoder=NetSpec(1, 4)),
                    np.random.default_rng(0))
    xs = np.random.default_rng(1).normal(0, 3, (50, 2))
    labels = np.repeat([0, 1], 25)
    a = evaluate(m, xs, labels, 128, 20, seed=5)
    b = evaluate(m, xs[::-1][::-1], labels, 128, 20, seed=5)
    assert a == b
    row = a.row("r", 3, 0.5, 0.5)
    path = write_metrics_csv(tmp_path / "m.csv", [row])
    (back,) = read_metrics_csv(path)
    assert list(back) == METRICS_HEADER
    assert float(back["fisher"]) == a.fisher and float(back["nll"]) == a.nll


def test_kl_invariant_to_permutation():
    m = build_model(ModelConfig(kind="il-lidmvae"), np.random.default_rng(2))
    xs = np.random.default_rng(3).normal(size=(20, 2))
    assert kl_posterior_prior(m, xs) == pytest.approx(kl_posterior_prior(m, xs[::-1]), rel=1e-12)
