"""Numerical checks of the Fisher-divergence lower bounds and supporting lemmas.

Each check returns one or more :class:`VerifyReport`.  Identities compare
closed forms at absolute tolerance; inequalities are one-sided with a
3-standard-error slack, and report ``inconclusive`` (rather than ``fail``)
when the shortfall is within 6 standard errors, i.e. more samples could
settle it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import integrate

from .diagnostics import _mc, fisher_vs_bound, theorem2_bound
from .expfam import ExpFamily
from .icnn import BrenierMap, IcnnParams, brenier_jacobian_batch, injection
from .models import ModelConfig, NetSpec, IlLidVaeModel

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
SLACK = 3.0
INCONCLUSIVE_SLACK = 6.0


@dataclass
class VerifyReport:
    check: str
    instance: str
    lhs: float
    rhs: float
    lhs_se: float = 0.0
    rhs_se: float = 0.0
    verdict: str = PASS
    seed: Optional[int] = None
    kind: str = "inequality"
    tol: float = 0.0
    combined_se: Optional[float] = None

    def as_row(self) -> dict:
        return asdict(self)


def _combined(lhs_se: float, rhs_se: float) -> float:
    return math.sqrt(lhs_se ** 2 + rhs_se ** 2)


def inequality_report(check, instance, lhs, rhs, lhs_se=0.0, rhs_se=0.0, seed=None,
                      combined_se=None) -> VerifyReport:
    """``lhs >= rhs`` with a ``SLACK``-standard-error band."""
    se = _combined(lhs_se, rhs_se) if combined_se is None else combined_se
    margin = lhs - rhs
    if margin >= -SLACK * se:
        verdict = PASS
    elif se > 0 and margin >= -INCONCLUSIVE_SLACK * se:
        verdict = INCONCLUSIVE
    else:
        verdict = FAIL
    return VerifyReport(check, instance, float(lhs), float(rhs), float(lhs_se), float(rhs_se),
                        verdict, seed, "inequality", 0.0, float(se))


def identity_report(check, instance, lhs, rhs, tol, seed=None, lhs_se=0.0, rhs_se=0.0) -> VerifyReport:
    verdict = PASS if abs(lhs - rhs) <= tol else FAIL
    return VerifyReport(check, instance, float(lhs), float(rhs), float(lhs_se), float(rhs_se),
                        verdict, seed, "identity", float(tol))


# conjugate score identity ----------------------------------------------------

def conjugate_scores(W: np.ndarray, x: np.ndarray, z: np.ndarray):
    """Both sides of the score identity for ``z ~ N(0, I)``, ``x | z ~ N(W z, I)``.

    Returns ``(|grad log p(z|x) - grad log p(z)|, |grad log p(x|z)|)`` per row,
    the left side from the closed-form Gaussian posterior.
    """
    W = np.atleast_2d(W)
    l = W.shape[1]
    prec = np.eye(l) + W.T @ W
    post_mean = np.linalg.solve(prec, W.T @ x.T).T
    post_score = -(z - post_mean) @ prec.T
    prior_score = -z
    lhs = np.linalg.norm(post_score - prior_score, axis=1)
    rhs = np.linalg.norm((x - z @ W.T) @ W, axis=1)
    return lhs, rhs


def check_lemma1(W, xs, zs, seed=None) -> VerifyReport:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    lhs, rhs = conjugate_scores(W, xs, zs)
    worst = int(np.argmax(np.abs(lhs - rhs)))
    return identity_report("lemma1", f"conjugate linear-Gaussian W{W.shape}, {len(xs)} points",
                           lhs[worst], rhs[worst], 1e-9, seed)


# exponential-family moments --------------------------------------------------

def check_lemma2(ef: ExpFamily, n_xi: int = 20, n_samples: int = 100_000, seed: int = 0) -> List[VerifyReport]:
    """MC mean of ``T(x)`` against ``grad A(xi)``, 4-standard-error band per coordinate."""
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(n_xi):
        xi = rng.normal(0.0, 1.5, ef.dim)
        x = ef.sample(np.broadcast_to(xi, (n_samples, ef.dim)), rng)
        T = ef.T(x)
        mean, se = T.mean(axis=0), T.std(axis=0, ddof=1) / math.sqrt(n_samples)
        target = ef.grad_A(xi)
        z = np.max(np.abs(mean - target) / np.maximum(se, 1e-300))
        worst = int(np.argmax(np.abs(mean - target) / np.maximum(se, 1e-300)))
        rep = VerifyReport("lemma2", f"{ef.kind} dim={ef.dim} xi#{k}", float(mean[worst]),
                           float(target[worst]), float(se[worst]), 0.0,
                           PASS if z <= 4.0 else FAIL, seed, "identity", float(4.0 * se[worst]))
        reports.append(rep)
    return reports


# Hessian lower bound ---------------------------------------------------------

def check_lemma3(m: BrenierMap, points, seed=None) -> VerifyReport:
    J = brenier_jacobian_batch(m, np.atleast_2d(points))
    min_eig = float(np.min(np.linalg.eigvalsh(J)))
    return inequality_report("lemma3", f"BrenierMap l={m.dim} L={m.L}, {len(J)} points",
                             min_eig, m.L - 1e-3, seed=seed)


# Fisher divergence lower bounds ----------------------------------------------

def random_model(l: int, L: float, seed: int, width: int = 10, layers: int = 2,
                 sigma: float = 1.0) -> IlLidVaeModel:
    cfg = ModelConfig(kind="il-lidvae", latent_dim=l, data_dim=l, L1=L, L2=L,
                      icnn=NetSpec(layers, width), encoder=NetSpec(1, 4), sigma_dec=sigma)
    return IlLidVaeModel(cfg, np.random.default_rng(seed))


def linear_model(l: int, L: float, sigma: float = 1.0) -> IlLidVaeModel:
    """Model whose decoder is exactly ``f(z) = L z``."""
    model = random_model(l, L, 0, sigma=sigma)
    model.decoder.first = BrenierMap.linear(l, L)
    return model


def _with_L(model: IlLidVaeModel, L: float) -> IlLidVaeModel:
    """Same ICNN weights, different strong-convexity constant."""
    clone = random_model(model.latent_dim, L, 0, sigma=model.likelihood.sigma)
    clone.decoder.first = BrenierMap(IcnnParams(model.latent_dim, model.decoder.first.icnn.layers, L))
    return clone


def check_theorem1(models: Sequence, xs_per_model: Sequence[np.ndarray], n_z: int = 1024,
                   seed: int = 0) -> List[VerifyReport]:
    """Per-point ``fisher >= bound`` reports, one per (model, x)."""
    reports = []
    for k, (model, xs) in enumerate(zip(models, xs_per_model)):
        rng = np.random.default_rng([seed, k])
        pb = fisher_vs_bound(model, xs, None, n_z, rng)
        comb = pb.combined_se()
        for i in range(len(pb.fisher)):
            reports.append(inequality_report(
                "theorem1", f"model#{k} L={model.L1} x#{i}", pb.fisher[i], pb.bound[i],
                pb.fisher_se[i], pb.bound_se[i], seed, comb[i]))
    return reports


def check_theorem2(models: Sequence, xs_per_model: Sequence[np.ndarray], n_z: int = 1024,
                   seed: int = 0) -> List[VerifyReport]:
    reports = []
    for k, (model, xs) in enumerate(zip(models, xs_per_model)):
        lhs, rhs = theorem2_bound(model, xs, n_z, np.random.default_rng([seed, k, 2]))
        reports.append(inequality_report("theorem2", f"model#{k} L={model.L1} n={len(xs)}",
                                         lhs.value, rhs.value, lhs.stderr, rhs.stderr, seed))
    return reports


def check_corollary1(base: IlLidVaeModel, L_grid: Sequence[float], x: np.ndarray,
                     n_z: int = 1024, seed: int = 0) -> List[VerifyReport]:
    """Bound at each ``L`` (shared weights and latent draw) is non-decreasing in ``L``."""
    Ls = sorted(L_grid)
    bounds = []
    for L in Ls:
        pb = fisher_vs_bound(_with_L(base, L), x, None, n_z, np.random.default_rng(seed))
        bounds.append((float(pb.bound.mean()), float(np.sqrt(np.mean(pb.bound_se ** 2)))))
    reports = []
    for (La, (ba, sa)), (Lb, (bb, sb)) in zip(zip(Ls, bounds), zip(Ls[1:], bounds[1:])):
        reports.append(inequality_report("corollary1", f"bound(L={Lb}) >= bound(L={La})",
                                         bb, ba, sb, sa, seed))
    return reports


def check_linear_equality(L: float = 1.0, n_z: int = 1024, seed: int = 0) -> VerifyReport:
    """``f(z) = L z``, unit Gaussian likelihood, ``l = 1``, ``x = 0``: both sides ``L^4``."""
    model = linear_model(1, L)
    pb = fisher_vs_bound(model, np.zeros((1, 1)), None, n_z, np.random.default_rng(seed))
    se = 2.0 * _combined(pb.fisher_se[0], pb.bound_se[0])
    return identity_report("theorem1_linear_equality", f"f(z)={L}z, x=0", pb.fisher[0], pb.bound[0],
                           se, seed, pb.fisher_se[0], pb.bound_se[0])


# composed decoder bound ------------------------------------------------------

def theorem3_sides(f1: BrenierMap, B: np.ndarray, f2: BrenierMap, xs: np.ndarray,
                   ef: ExpFamily, n_z: int, rng: np.random.Generator):
    """Per-point integrands ``(lhs, rhs)`` of shape ``(n_x, n_z)``.

    ``lhs = |J^T (T(x) - grad A)|^2`` with ``J = J2 B^T J1`` (FD Jacobians),
    ``rhs = L1^2 |(T(x) - grad A)^T J2 B^T|^2``.
    """
    l = f1.dim
    z = rng.standard_normal((n_z, l))
    u = f1.numpy(z) @ B
    xi = f2.numpy(u)
    J1 = brenier_jacobian_batch(f1, z)
    J2 = brenier_jacobian_batch(f2, u)
    outer = J2 @ B.T[None]                      # (n_z, t, l)
    J = outer @ J1                              # (n_z, t, l)
    resid = ef.T(xs)[:, None, :] - ef.grad_A(xi)[None]
    lhs = np.sum(np.einsum("ztl,xzt->xzl", J, resid) ** 2, axis=-1)
    rhs = f1.L ** 2 * np.sum(np.einsum("ztl,xzt->xzl", outer, resid) ** 2, axis=-1)
    return lhs, rhs


def check_theorem3(f1: BrenierMap, B, f2: BrenierMap, xs, n_z: int = 1024, seed: int = 0,
                   ef: Optional[ExpFamily] = None, label: str = "") -> List[VerifyReport]:
    B = np.asarray(B, dtype=np.float64)
    if not f1.dim < f2.dim:
        raise ValueError("composed-decoder check needs l < t")
    ef = ef or ExpFamily.gaussian(f2.dim)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    lhs, rhs = theorem3_sides(f1, B, f2, xs, ef, n_z, np.random.default_rng(seed))
    reports = []
    for i in range(len(xs)):
        a, b = _mc(lhs[i]), _mc(rhs[i])
        reports.append(inequality_report("theorem3", f"{label} l={f1.dim} t={f2.dim} L1={f1.L} x#{i}",
                                         a.value, b.value, a.stderr, b.stderr, seed))
    return reports


# Gaussian smoothing bound ----------------------------------------------------

def gaussian_kl_1d(mp, vp, mq, vq) -> float:
    return 0.5 * (math.log(vq / vp) + (vp + (mp - mq) ** 2) / vq - 1.0)


def gaussian_fisher_1d(mp, vp, mq, vq) -> float:
    """``E_p (d/dx log p - d/dx log q)^2`` for 1-D Gaussians."""
    return vp * (1.0 / vq - 1.0 / vp) ** 2 + (mp - mq) ** 2 / vq ** 2


def check_prop1(p, q, delta: float, n_grid: int = 1000, seed=None) -> VerifyReport:
    """``D(p||q) >= delta * eps / 2`` with ``eps = min_t F(p_t||q_t)`` on a t-grid.

    ``p`` and ``q`` are ``(mean, variance)``; smoothing by ``N(0, t)`` adds ``t``
    to both variances.
    """
    (mp, vp), (mq, vq) = p, q
    kl = gaussian_kl_1d(mp, vp, mq, vq)
    ts = np.linspace(0.0, delta, n_grid)
    eps = min(gaussian_fisher_1d(mp, vp + t, mq, vq + t) for t in ts)
    return inequality_report("prop1", f"p=N({mp:.3g},{vp:.3g}) q=N({mq:.3g},{vq:.3g}) delta={delta:.3g}",
                             kl, 0.5 * delta * eps, seed=seed)


def check_debruijn(p, q, delta: float, seed=None) -> VerifyReport:
    """``D(p||q) - D(p_delta||q_delta) = 1/2 int_0^delta F(p_t||q_t) dt`` by quadrature."""
    (mp, vp), (mq, vq) = p, q
    drop = gaussian_kl_1d(mp, vp, mq, vq) - gaussian_kl_1d(mp, vp + delta, mq, vq + delta)
    integral, _ = integrate.quad(lambda t: gaussian_fisher_1d(mp, vp + t, mq, vq + t), 0.0, delta,
                                 epsabs=1e-13, epsrel=1e-12)
    return identity_report("prop1_debruijn", f"delta={delta:.3g}", drop, 0.5 * integral, 1e-9, seed)


# suites -------------------------------------------------------------------

THEOREM_L_GRID = (0.5, 1.5, 5.0)


def theorem12_instances(n_models: int = 20, n_points: int = 32, seed: int = 0):
    """Random models spanning the L grid and dims {1, 2, 3}, plus points drawn from each."""
    models, points = [], []
    for k in range(n_models):
        L = THEOREM_L_GRID[k % len(THEOREM_L_GRID)]
        l = 1 + k % 3
        model = random_model(l, L, seed * 1000 + k)
        xs, _ = model.generate(n_points, np.random.default_rng([seed, k, 7]))
        models.append(model)
        points.append(xs)
    return models, points


def theorem3_instances(n_random: int = 10, seed: int = 0):
    """The linear ``l=1, t=2`` fixture followed by random nonlinear instances."""
    out = []
    f1, f2 = BrenierMap.linear(1, 1.5), BrenierMap.linear(2, 2.0)
    xs = np.random.default_rng([seed, 99]).normal(0.0, 2.0, (4, 2))
    out.append(("linear", f1, injection(1, 2), f2, xs))
    for k in range(n_random):
        rng = np.random.default_rng([seed, k, 3])
        l = 1 + k % 2
        t = l + 1 + k % 2
        L1 = THEOREM_L_GRID[k % 3]
        f1 = BrenierMap(IcnnParams.init(l, [10, 10], L1, rng))
        f2 = BrenierMap(IcnnParams.init(t, [10, 10], 1.0, rng))
        xs = rng.normal(0.0, 3.0, (8, t))
        out.append((f"random#{k}", f1, injection(l, t), f2, xs))
    return out


def run_all(seed: int = 0, n_z: int = 1024) -> List[VerifyReport]:
    """The default verification suite; expected to produce no failures."""
    rng = np.random.default_rng(seed)
    reports: List[VerifyReport] = []

    # conjugate score identity
    reports.append(check_lemma1(np.zeros((1, 1)), [[1.3]], [[0.4]], seed))
    reports.append(check_lemma1(np.eye(1), [[1.0]], [[0.0]], seed))
    for m, l in ((3, 2), (5, 5), (4, 1)):
        W = rng.normal(size=(m, l))
        reports.append(check_lemma1(W, rng.normal(0, 2, (100, m)), rng.normal(size=(100, l)), seed))

    # exponential-family moments
    reports += check_lemma2(ExpFamily.gaussian(3, 1.0), 20, 100_000, seed)
    reports += check_lemma2(ExpFamily.gaussian(2, 2.5), 5, 100_000, seed + 1)
    reports += check_lemma2(ExpFamily.bernoulli(4), 20, 100_000, seed + 2)

    # Hessian lower bound
    for k, L in enumerate(THEOREM_L_GRID):
        for l in (2, 8):
            m = BrenierMap(IcnnParams.init(l, [16, 16], L, np.random.default_rng([seed, k, l])))
            reports.append(check_lemma3(m, rng.uniform(-5, 5, (100, l)), seed))
    reports.append(check_lemma3(BrenierMap.linear(3, 2.0, [1.0, -1.0, 0.5]), rng.normal(size=(10, 3)), seed))

    # Fisher divergence bounds, pointwise, averaged and monotone in L
    models, points = theorem12_instances(20, 32, seed)
    reports += check_theorem1(models, points, n_z, seed)
    reports += check_theorem2(models, points, n_z, seed)
    reports.append(check_linear_equality(1.0, n_z, seed))
    reports.append(check_linear_equality(1.5, n_z, seed))
    for k in range(3):
        base = random_model(2, 1.0, seed * 100 + k)
        reports += check_corollary1(base, THEOREM_L_GRID, rng.normal(0, 3, (8, 2)), n_z, seed)

    # composed decoder
    for label, f1, B, f2, xs in theorem3_instances(10, seed):
        reports += check_theorem3(f1, B, f2, xs, n_z, seed, label=label)

    # Gaussian smoothing
    reports.append(check_prop1((0.0, 1.0), (2.0, 1.0), 1.0, seed=seed))
    reports.append(check_prop1((0.0, 1.0), (0.0, 1.0), 1.0, seed=seed))
    for _ in range(50):
        p = (rng.normal(0, 2), rng.uniform(0.1, 4))
        q = (rng.normal(0, 2), rng.uniform(0.1, 4))
        delta = rng.uniform(1e-3, 3)
        reports.append(check_prop1(p, q, delta, seed=seed))
        reports.append(check_debruijn(p, q, delta, seed=seed))
    return reports


def summarize(reports: Sequence[VerifyReport]) -> Dict[str, int]:
    out = {PASS: 0, FAIL: 0, INCONCLUSIVE: 0}
    for r in reports:
        out[r.verdict] += 1
    return out


REPORT_FIELDS = ["check", "instance", "lhs", "rhs", "lhs_se", "rhs_se", "combined_se", "kind",
                 "tol", "verdict", "seed"]


def write_report_csv(reports: Sequence[VerifyReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            row = r.as_row()
            w.writerow({k: ("" if row[k] is None else row[k]) for k in REPORT_FIELDS})
    return path


def format_table(reports: Sequence[VerifyReport]) -> str:
    lines = [f"{'check':<26} {'verdict':<12} {'lhs':>14} {'rhs':>14} {'se':>10}  instance"]
    for r in reports:
        se = r.combined_se if r.combined_se is not None else 0.0
        lines.append(f"{r.check:<26} {r.verdict:<12} {r.lhs:>14.6g} {r.rhs:>14.6g} {se:>10.3g}  {r.instance}")
    counts = summarize(reports)
    lines.append(f"{len(reports)} checks: {counts[PASS]} pass, {counts[INCONCLUSIVE]} inconclusive, "
                 f"{counts[FAIL]} fail")
    return "\n".join(lines)
