"""Shared gradient-vs-finite-difference cases.

Each case builder takes a Generator and returns ``(loss_fn, leaves)``: a
function mapping the leaf tensors to a scalar Tensor, and the leaves
themselves (with ``requires_grad=True``).  ``check_case`` compares the
reverse-mode gradient with central differences leaf by leaf.
"""
import numpy as np

from illidvae import autodiff as ad
from illidvae.icnn import BrenierMap, IcnnParams, brenier_forward, icnn_eval
from illidvae.models import ModelConfig, NetSpec, build_model, elbo

RTOL = 1e-4


def leaf(arr, name=""):
    return ad.Tensor(arr, requires_grad=True, name=name)


def reverse_grads(loss_fn, leaves):
    with ad.Tape():
        loss = loss_fn(*leaves)
        grads = ad.backward(loss, wrt=leaves)
    return [grads[t].data for t in leaves]


def fd_grads(loss_fn, leaves):
    out = []
    for t in leaves:
        saved = t.data.copy()

        def f(x, t=t):
            t.data = x
            return loss_fn(*leaves).item()

        out.append(ad.finite_difference_grad(f, saved.copy()))
        t.data = saved
    return out


def max_rel_error(loss_fn, leaves):
    """Worst per-entry error, relative to ``max(|fd|, 1e-2 * max|fd|)`` of its leaf."""
    worst = 0.0
    for g, f in zip(reverse_grads(loss_fn, leaves), fd_grads(loss_fn, leaves)):
        scale = np.maximum(np.abs(f), 1e-2 * np.abs(f).max() + 1e-12)
        worst = max(worst, float(np.max(np.abs(g - f) / scale)))
    return worst


# ad-core --------------------------------------------------------------

def case_matmul(rng):
    return (lambda a, b: ad.sum(ad.matmul(a, b)),
            [leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))])


def case_elementwise(rng):
    def loss(a, b):
        u = ad.mul(ad.softplus(a), ad.exp(ad.mul(0.3, b)))
        v = ad.sub(ad.log(ad.add(ad.square(a), 1.0)), ad.negate(ad.tanh(b)))
        return ad.sum(ad.add(u, ad.mul(v, ad.sigmoid(a))))
    return loss, [leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(4, 3)))]


def case_reductions(rng):
    def loss(a):
        return ad.add(ad.mean(ad.square(a)), ad.mul(0.5, ad.sq_norm(ad.sum_axis(a, 1))))
    return loss, [leaf(rng.normal(size=(5, 3)))]


def case_rows(rng):
    def loss(a, w, b):
        h = ad.add_bias(ad.matmul(a, ad.transpose(w)), b)
        both = ad.concat_cols([ad.log_softmax_rows(h), ad.take_cols(h, 1, 3)])
        return ad.add(ad.sum(ad.mul(both, both)), ad.sum(ad.logsumexp_rows(h)))
    return loss, [leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 3))),
                  leaf(rng.normal(size=3))]


def case_softplus_dot(rng):
    z = rng.normal(size=(5, 1))
    return (lambda w: ad.sum(ad.softplus(ad.matmul(ad.transpose(w), ad.Tensor(z))))),\
        [leaf(rng.normal(size=(5, 1)))]


# icnn ------------------------------------------------------------------

def _small_icnn(rng, l=2, L=None):
    L = rng.choice([0.0, 0.5, 1.5]) if L is None else L
    return IcnnParams.init(l, [4, 3], float(L), rng)


def case_icnn_params(rng):
    p = _small_icnn(rng)
    z = ad.Tensor(rng.normal(size=(3, p.input_dim)))
    return (lambda *_: ad.sum(icnn_eval(p, z))), p.parameters()


def case_brenier_params(rng):
    p = _small_icnn(rng)
    m = BrenierMap(p)
    z = leaf(rng.normal(size=(3, p.input_dim)))
    target = rng.normal(size=(3, p.input_dim))
    return (lambda *_: ad.sq_norm(ad.sub(brenier_forward(m, z), target))), p.parameters() + [z]


# ELBO ------------------------------------------------------------------

def _elbo_case(rng, kind, latent, data_dim):
    cfg = ModelConfig(kind=kind, latent_dim=latent, data_dim=data_dim, c=2,
                      L1=float(rng.choice([0.0, 0.5, 1.5])), L2=1.0,
                      icnn=NetSpec(1, 3), encoder=NetSpec(1, 3), sigma_dec=1.5)
    model = build_model(cfg, rng)
    x = rng.normal(0, 2, (3, data_dim))
    shape = (2, 3, latent) if kind == "il-lidmvae" else (3, latent)
    eps = rng.standard_normal(shape)
    return (lambda *_: elbo(model, x, eps=eps)), model.parameters()


def case_elbo_vae(rng):
    return _elbo_case(rng, "il-lidvae", 2, 2)


def case_elbo_mixture(rng):
    return _elbo_case(rng, "il-lidmvae", 2, 2)


def case_elbo_composed(rng):
    return _elbo_case(rng, "il-lidvae", 1, 2)


AD_CORE_CASES = [case_matmul, case_elementwise, case_reductions, case_rows, case_softplus_dot]
ICNN_CASES = [case_icnn_params, case_brenier_params]
ELBO_CASES = [case_elbo_vae, case_elbo_mixture, case_elbo_composed]
ALL_CASES = AD_CORE_CASES + ICNN_CASES + ELBO_CASES
