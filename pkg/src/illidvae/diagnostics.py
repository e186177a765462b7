"""Posterior-collapse measurements.

Every Monte-Carlo estimator returns an :class:`Estimate` (value and standard
error).  Models are accessed through their numpy mixture view
(``prior_params`` / ``posterior_params``), so the same code serves the plain
and the mixture model.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .icnn import fd_jacobian_batch, inverse_lipschitz_ratio
from .models import _diag_gauss_logpdf

METRICS_HEADER = ["run_id", "step", "L1", "L2", "nll", "kl", "fisher", "fisher_se",
                  "t1_bound", "t1_se", "mi", "au", "accuracy", "emp_inv_lip", "seed"]

# x-chunk size for the (n_x, n_z, t) score tensors
_CHUNK_ELEMS = 4_000_000


class Estimate(NamedTuple):
    value: float
    stderr: float


def _mc(samples: np.ndarray) -> Estimate:
    samples = np.asarray(samples, dtype=np.float64)
    se = float(np.std(samples, ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else 0.0
    return Estimate(float(np.mean(samples)), se)


class _LatentDraw(NamedTuple):
    z: np.ndarray       # (n_z, l)
    mean_stat: np.ndarray  # grad A(f(z)), (n_z, t)
    jac: np.ndarray     # d xi / d z, (n_z, t, l)
    jac_outer: Optional[np.ndarray]  # (J2 B^T)^T rows for the composed bound, (n_z, t, l)


def _draw(model, n_z: int, rng: np.random.Generator) -> _LatentDraw:
    if n_z < 100:
        raise ValueError("n_z must be >= 100")
    z, _ = model.sample_prior(n_z, rng)
    dec = model.decoder
    xi = dec.numpy(z)
    jac = dec.jacobian(z)
    outer = None
    if dec.second is not None:
        u = dec.first.numpy(z) @ dec.B
        J2 = fd_jacobian_batch(dec.second.numpy, u, symmetrize=True)
        outer = J2 @ dec.B.T[None]  # (n_z, t, l) = J2 B^T
    return _LatentDraw(z, model.likelihood.grad_A(xi), jac, outer)


def _per_point_integrands(model, xs: np.ndarray, draw: _LatentDraw, L: float):
    """Pointwise Fisher and bound integrands, both ``(n_x, n_z)``."""
    T = model.likelihood.T(np.asarray(xs, dtype=np.float64))
    n_x, n_z = len(T), len(draw.z)
    t = T.shape[1]
    step = max(1, _CHUNK_ELEMS // max(1, n_z * t))
    fisher = np.empty((n_x, n_z))
    bound = np.empty((n_x, n_z))
    for s in range(0, n_x, step):
        resid = T[s:s + step, None, :] - draw.mean_stat[None]   # (b, n_z, t)
        score = np.einsum("ztl,bzt->bzl", draw.jac, resid)
        fisher[s:s + step] = np.sum(score ** 2, axis=-1)
        if draw.jac_outer is None:
            bound[s:s + step] = L ** 2 * np.sum(resid ** 2, axis=-1)
        else:
            proj = np.einsum("ztl,bzt->bzl", draw.jac_outer, resid)
            bound[s:s + step] = L ** 2 * np.sum(proj ** 2, axis=-1)
    return fisher, bound


def _bound_constant(model, L: Optional[float]) -> float:
    return model.L1 if L is None else float(L)


def relative_fisher(model, xs, n_z: int = 1024, rng=None) -> Estimate:
    """``F(p(z) || p(z|x))`` averaged over ``xs``, computed as
    ``E_{z~p(z)} |J(z)^T (T(x) - grad A(f(z)))|^2`` with FD Jacobians.

    The same latent draw is shared across ``xs``; the standard error is over
    the per-``z`` averages.
    """
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    draw = _draw(model, n_z, rng)
    fisher, _ = _per_point_integrands(model, xs, draw, 0.0)
    return _mc(fisher.mean(axis=0))


def theorem1_bound(model, x, L: Optional[float] = None, n_z: int = 1024, rng=None) -> Estimate:
    """``L^2 E_z |T(x) - grad A(f(z))|^2`` averaged over the rows of ``x``.

    For a composed decoder (``l < t``) the integrand is the projected form
    ``L1^2 |(T(x) - grad A)^T J2 B^T|^2``.
    """
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    draw = _draw(model, n_z, rng)
    _, bound = _per_point_integrands(model, xs, draw, _bound_constant(model, L))
    return _mc(bound.mean(axis=0))


def fisher_and_bound(model, xs, n_z: int = 1024, rng=None, L: Optional[float] = None):
    """``(relative_fisher, theorem1_bound)`` estimated on one shared latent draw."""
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    draw = _draw(model, n_z, rng)
    fisher, bound = _per_point_integrands(model, xs, draw, _bound_constant(model, L))
    return _mc(fisher.mean(axis=0)), _mc(bound.mean(axis=0))


@dataclass
class PointwiseBound:
    fisher: np.ndarray
    fisher_se: np.ndarray
    bound: np.ndarray
    bound_se: np.ndarray
    diff_se: np.ndarray

    def combined_se(self) -> np.ndarray:
        return np.sqrt(self.fisher_se ** 2 + self.bound_se ** 2)


def fisher_vs_bound(model, xs, L: Optional[float] = None, n_z: int = 1024, rng=None) -> PointwiseBound:
    """Per-point Fisher divergence and lower bound on a shared latent draw."""
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    draw = _draw(model, n_z, rng)
    fisher, bound = _per_point_integrands(model, xs, draw, _bound_constant(model, L))
    sq = math.sqrt(n_z)
    return PointwiseBound(fisher.mean(1), fisher.std(1, ddof=1) / sq,
                          bound.mean(1), bound.std(1, ddof=1) / sq,
                          (fisher - bound).std(1, ddof=1) / sq)


def theorem2_bound(model, xs, n_z: int = 1024, rng=None, L: Optional[float] = None):
    """Empirical-Fisher form: returns ``(lhs, rhs)`` estimates.

    ``lhs = E_z |mean_i grad_z log p(x_i|z)|^2`` (per-point scores from the score identity),
    ``rhs = L^2 E_z |T_bar - grad A(f(z))|^2``.
    """
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(xs) < 1:
        raise ValueError("need at least one data point")
    draw = _draw(model, n_z, rng)
    t_bar = model.likelihood.T(xs).mean(axis=0, keepdims=True)
    # the mean of per-point scores equals the score at T_bar (linear in T)
    resid = t_bar - draw.mean_stat
    score = np.einsum("ztl,zt->zl", draw.jac, resid)
    lhs = np.sum(score ** 2, axis=-1)
    Lc = _bound_constant(model, L)
    rhs = Lc ** 2 * np.sum(resid ** 2, axis=-1)
    return _mc(lhs), _mc(rhs)


def theorem2_bias_variance(model, xs, n_z: int = 1024, rng=None, L: Optional[float] = None):
    """Two-pass split of the averaged bound's right-hand side.

    Returns ``(variance_term, bias_term)`` with
    ``variance = L^2 tr Cov_z[grad A(f(z))]`` and
    ``bias = L^2 |T_bar - E_z grad A(f(z))|^2``.
    """
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    draw = _draw(model, n_z, rng)
    Lc = _bound_constant(model, L)
    m = draw.mean_stat
    centre = m.mean(axis=0)
    variance = float(np.mean(np.sum((m - centre) ** 2, axis=1)))
    bias = float(np.sum((model.likelihood.T(xs).mean(axis=0) - centre) ** 2))
    return Lc ** 2 * variance, Lc ** 2 * bias


def gaussian_kl(mu_q, var_q, mu_p=0.0, var_p=1.0) -> np.ndarray:
    """KL between diagonal Gaussians, summed over the last axis."""
    mu_q, var_q = np.asarray(mu_q, float), np.asarray(var_q, float)
    return 0.5 * np.sum(np.log(var_p) - np.log(var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0,
                        axis=-1)


def kl_posterior_prior(model, xs) -> float:
    """Mean closed-form ``KL(q(z|x) || p(z))``; the mixture form adds the
    categorical term and pairs each ``q(z|x,y)`` with its prior component."""
    w, mu, logvar = model.posterior_params(np.atleast_2d(xs))
    _, pmu, plogvar = model.prior_params()
    per_comp = gaussian_kl(mu, np.exp(logvar), pmu[None], np.exp(plogvar)[None])  # (n, c)
    c = w.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cat = np.where(w > 0, w * (np.log(w) + np.log(c)), 0.0).sum(axis=1)
    return float(np.mean(np.sum(w * per_comp, axis=1) + cat))


def iw_log_likelihood(model, x, K: int = 100, rng=None) -> np.ndarray:
    """Importance-weighted ``log p(x)`` estimate per row of ``x``.

    Proposal ``q(y|x) q(z|x,y)``; weights ``p(x|z) p(z|y) p(y) / q``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    params = model.posterior_params(xs)
    w, mu, logvar = params
    pw, pmu, plogvar = model.prior_params()
    z, y, j = model.sample_posterior(params, rng, per_point=K)
    xi = model.decoder.numpy(z)
    log_lik = model.likelihood.log_density(xs[j], xi)
    log_prior = _diag_gauss_logpdf(z, pmu[y], plogvar[y]) + np.log(pw[y])
    with np.errstate(divide="ignore"):
        log_q = _diag_gauss_logpdf(z, mu[j, y], logvar[j, y]) + np.log(w[j, y])
    log_w = (log_lik + log_prior - log_q).reshape(len(xs), K)
    return logsumexp(log_w, axis=1) - math.log(K)


def mutual_information(model, xs, n_mc: int = 1024, rng=None) -> float:
    """Hoffman-Johnson ``E_x KL(q(z|x)||p) - KL(q_bar||p)`` by Monte Carlo.

    Samples ``z ~ q(z|x_i)`` are scored against every ``q(z|x_j)`` to form the
    aggregate posterior ``q_bar``.
    """
    if n_mc < 100:
        raise ValueError("n_mc must be >= 100")
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n = len(xs)
    per_point = max(1, -(-n_mc // n))
    params = model.posterior_params(xs)
    z, _, j = model.sample_posterior(params, rng, per_point=per_point)
    log_q_all = model.log_posterior(z, params)                      # (m, n)
    log_q_own = log_q_all[np.arange(len(z)), j]
    log_q_bar = logsumexp(log_q_all, axis=1) - math.log(n)
    log_p = model.log_prior(z)
    kl_each = np.mean(log_q_own - log_p)
    kl_agg = np.mean(log_q_bar - log_p)
    return float(kl_each - kl_agg)


def active_units_from_means(means: np.ndarray, threshold: float = 0.01) -> float:
    means = np.asarray(means, dtype=np.float64)
    if len(means) < 2:
        raise ValueError("need at least two data points")
    return float(np.mean(np.var(means, axis=0) > threshold))


def active_units(model, xs, threshold: float = 0.01) -> float:
    """Fraction of latent dims whose posterior mean varies across ``xs`` by more than ``threshold``."""
    w, mu, _ = model.posterior_params(np.atleast_2d(xs))
    return active_units_from_means(np.einsum("nc,ncl->nl", w, mu), threshold)


def assignment_accuracy(pred: np.ndarray, labels: np.ndarray, c: int) -> float:
    """Best accuracy over relabelings of ``pred`` (Hungarian assignment)."""
    pred, labels = np.asarray(pred, int), np.asarray(labels, int)
    k = max(c, int(pred.max()) + 1, int(labels.max()) + 1)
    confusion = np.zeros((k, k))
    np.add.at(confusion, (pred, labels), 1.0)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum() / len(labels))


def clustering_accuracy(model, xs, labels) -> float:
    resp = model.responsibilities(np.atleast_2d(xs))
    labels = np.asarray(labels, int)
    if labels.min() < 0 or labels.max() >= resp.shape[1]:
        raise ValueError(f"labels must lie in 0..{resp.shape[1] - 1}")
    return assignment_accuracy(resp.argmax(axis=1), labels, resp.shape[1])


def decoder_inverse_lipschitz(model, n_pairs: int = 1000, rng=None) -> float:
    """Empirical inverse-Lipschitz constant of the first decoder map on prior pairs."""
    rng = np.random.default_rng(rng)
    za, _ = model.sample_prior(n_pairs, rng)
    zb, _ = model.sample_prior(n_pairs, rng)
    f = model.decoder.first.numpy
    return inverse_lipschitz_ratio(za, zb, f(za), f(zb))


@dataclass
class MetricsRecord:
    nll: float
    kl: float
    fisher: float
    fisher_se: float
    theorem1_bound: float
    theorem1_se: float
    mi: float
    au: float
    accuracy: Optional[float]
    emp_inv_lip: float
    n_mc: int
    seed: int
    split: str = "test"
    nll_estimator: str = "iw-k100"

    def __post_init__(self):
        for name in ("nll", "kl", "fisher", "theorem1_bound", "mi", "au", "emp_inv_lip"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"metric {name} is not finite")
        # MC noise can push tiny values below zero; the definitions cannot
        if self.fisher < 0 or self.kl < -1e-12 or not 0.0 <= self.au <= 1.0:
            raise ValueError("metric out of range")

    def row(self, run_id: str, step: int, L1: float, L2: float) -> dict:
        return {"run_id": run_id, "step": step, "L1": L1, "L2": L2, "nll": self.nll,
                "kl": self.kl, "fisher": self.fisher, "fisher_se": self.fisher_se,
                "t1_bound": self.theorem1_bound, "t1_se": self.theorem1_se, "mi": self.mi,
                "au": self.au, "accuracy": "" if self.accuracy is None else self.accuracy,
                "emp_inv_lip": self.emp_inv_lip, "seed": self.seed}

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, xs, labels=None, n_mc: int = 1024, n_eval_points: int = 256,
             seed: int = 0, K: int = 100, split: str = "test") -> MetricsRecord:
    """Full metrics bundle on (a deterministic subset of) ``xs``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
    if len(xs) > n_eval_points:
        idx = np.sort(streams[0].choice(len(xs), n_eval_points, replace=False))
    else:
        idx = np.arange(len(xs))
    sub = xs[idx]
    fisher, bound = fisher_and_bound(model, sub, n_mc, streams[1])
    acc = None
    if labels is not None and hasattr(model, "responsibilities"):
        acc = clustering_accuracy(model, xs, np.asarray(labels))
    return MetricsRecord(
        nll=float(-np.mean(iw_log_likelihood(model, sub, K, streams[2]))),
        kl=kl_posterior_prior(model, sub),
        fisher=fisher.value, fisher_se=fisher.stderr,
        theorem1_bound=bound.value, theorem1_se=bound.stderr,
        mi=mutual_information(model, sub, max(100, n_mc), streams[3]),
        au=active_units(model, sub),
        accuracy=acc,
        emp_inv_lip=decoder_inverse_lipschitz(model, 1000, streams[4]),
        n_mc=n_mc, seed=seed, split=split, nll_estimator=f"iw-k{K}",
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: Iterable[dict], append: bool = False) -> Path:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in METRICS_HEADER])
    return path


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
