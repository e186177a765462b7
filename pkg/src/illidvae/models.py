"""IL-LIDVAE and IL-LIDMVAE: amortized Gaussian encoders over Brenier-map decoders.

Both models expose a common numpy view of their prior and approximate
posterior as diagonal-Gaussian mixtures (``prior_params`` /
``posterior_params``); the plain VAE is the one-component case.  The
diagnostics module only talks to that view.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .expfam import LOG_2PI, ExpFamily
from .icnn import BrenierMap, IcnnParams, composed_decoder, fd_jacobian_batch, injection

CHECKPOINT_MAGIC = b"ILVAE1"


class TrainingError(FloatingPointError):
    """A non-finite value appeared in a named ELBO term."""

    def __init__(self, term: str):
        super().__init__(f"non-finite value in ELBO term {term!r}")
        self.term = term


def _finite(t: Tensor, term: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise TrainingError(term)
    return t


@dataclass
class NetSpec:
    layers: int = 2
    width: int = 10


@dataclass
class ModelConfig:
    kind: str = "il-lidvae"
    latent_dim: int = 2
    data_dim: int = 2
    c: int = 2
    L1: float = 1.0
    L2: float = 1.0
    icnn: NetSpec = field(default_factory=NetSpec)
    encoder: NetSpec = field(default_factory=NetSpec)
    sigma_dec: float = 1.0
    likelihood: str = "gaussian"

    def __post_init__(self):
        if isinstance(self.icnn, dict):
            self.icnn = NetSpec(**self.icnn)
        if isinstance(self.encoder, dict):
            self.encoder = NetSpec(**self.encoder)
        if self.kind not in ("il-lidvae", "il-lidmvae"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.latent_dim > self.data_dim:
            raise ValueError("latent_dim must not exceed data_dim")
        if self.L1 < 0 or self.L2 < 0:
            raise ValueError("inverse Lipschitz constants must be non-negative")
        if self.kind == "il-lidmvae" and self.c < 1:
            raise ValueError("mixture models need c >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Mlp:
    """tanh MLP; weights stored ``(fan_in, fan_out)``."""

    def __init__(self, sizes: List[int], rng: np.random.Generator, prefix: str = "mlp"):
        self.weights = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            W = Tensor(rng.uniform(-bound, bound, (a, b)), requires_grad=True, name=f"{prefix}{i}.W")
            bias = Tensor(np.zeros(b), requires_grad=True, name=f"{prefix}{i}.b")
            self.weights.append((W, bias))

    def parameters(self) -> List[Tensor]:
        return [p for pair in self.weights for p in pair]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(self.weights):
            h = ad.add_bias(h @ W, b)
            if i < last:
                h = ad.tanh(h)
        return h


class GaussianEncoder:
    """``x -> (mu(x), log sigma^2(x))``."""

    def __init__(self, in_dim: int, latent_dim: int, spec: NetSpec, rng, prefix="enc"):
        self.latent_dim = latent_dim
        self.mlp = Mlp([in_dim] + [spec.width] * spec.layers + [2 * latent_dim], rng, prefix)

    def parameters(self) -> List[Tensor]:
        return self.mlp.parameters()

    def __call__(self, x) -> Tuple[Tensor, Tensor]:
        out = self.mlp(x)
        l = self.latent_dim
        return ad.take_cols(out, 0, l), ad.take_cols(out, l, 2 * l)


class Decoder:
    """Either a single Brenier map (``l == t``) or ``f2(B^T f1(z))``.

    ``capture`` (if set) receives ``(z, f1(z))`` numpy arrays on every tracked
    call; the annealing monitor recycles them.
    """

    def __init__(self, latent_dim: int, out_dim: int, L1: float, L2: float,
                 spec: NetSpec, rng):
        hidden = [spec.width] * spec.layers
        self.first = BrenierMap(IcnnParams.init(latent_dim, hidden, L1, rng))
        self.second: Optional[BrenierMap] = None
        self.B = None
        if out_dim != latent_dim:
            self.second = BrenierMap(IcnnParams.init(out_dim, hidden, L2, rng))
            self.B = injection(latent_dim, out_dim)
        self.latent_dim, self.out_dim = latent_dim, out_dim
        self.capture: Optional[Callable[[np.ndarray, np.ndarray], None]] = None

    @property
    def maps(self) -> List[BrenierMap]:
        return [self.first] if self.second is None else [self.first, self.second]

    def parameters(self) -> List[Tensor]:
        return [p for m in self.maps for p in m.parameters()]

    def __call__(self, z) -> Tensor:
        z = ad.as_tensor(z)
        f1 = self.first(z)
        if self.capture is not None:
            self.capture(z.data, f1.data)
        if self.second is None:
            return f1
        return self.second(ad.matmul(f1, Tensor(self.B)))

    def numpy(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.second is None:
            return self.first.numpy(z)
        return composed_decoder(self.first, self.B, self.second, Tensor(z)).data

    def jacobian(self, Z: np.ndarray) -> np.ndarray:
        """FD Jacobian ``d xi / d z`` per row, shape ``(n, t, l)``."""
        return fd_jacobian_batch(self.numpy, Z, symmetrize=self.second is None)


def _diag_gauss_logpdf(z, mu, logvar):
    """Log N(z; mu, diag exp(logvar)) summed over the last axis, broadcasting."""
    return -0.5 * np.sum(LOG_2PI + logvar + (z - mu) ** 2 / np.exp(logvar), axis=-1)


def gaussian_kl_t(mu_q: Tensor, logvar_q: Tensor, mu_p=None, logvar_p=None) -> Tensor:
    """Row-wise KL(N(mu_q, var_q) || N(mu_p, var_p)) for diagonal Gaussians."""
    if mu_p is None:
        inner = ad.exp(logvar_q) + ad.square(mu_q) - 1.0 - logvar_q
    else:
        inv_var_p = ad.exp(ad.negate(logvar_p))
        inner = (logvar_p - logvar_q
                 + ad.mul(ad.exp(logvar_q) + ad.square(mu_q - mu_p), inv_var_p) - 1.0)
    return ad.mul(0.5, ad.sum_axis(inner, 1))


class _BaseModel:
    config: ModelConfig
    decoder: Decoder
    likelihood: ExpFamily

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def data_dim(self) -> int:
        return self.config.data_dim

    @property
    def L1(self) -> float:
        return self.decoder.first.L

    @property
    def L2(self) -> float:
        return self.decoder.second.L if self.decoder.second is not None else self.decoder.first.L

    def resolved_config(self) -> dict:
        """Config with the live (possibly annealed) constants."""
        cfg = self.config.to_dict()
        cfg["L1"], cfg["L2"] = self.L1, self.L2
        return cfg

    # numpy views ---------------------------------------------------------
    def log_prior(self, z: np.ndarray) -> np.ndarray:
        w, mu, logvar = self.prior_params()
        comp = _diag_gauss_logpdf(z[:, None, :], mu[None], logvar[None])
        return logsumexp(comp + np.log(w)[None], axis=1)

    def sample_prior(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        w, mu, logvar = self.prior_params()
        y = rng.choice(len(w), size=n, p=w) if len(w) > 1 else np.zeros(n, dtype=int)
        eps = rng.standard_normal((n, self.latent_dim))
        return mu[y] + np.exp(0.5 * logvar[y]) * eps, y

    def log_posterior(self, z: np.ndarray, params) -> np.ndarray:
        """``log q(z_i | x_j)`` for all ``i, j``: returns ``(len(z), n_x)``."""
        w, mu, logvar = params
        comp = _diag_gauss_logpdf(z[:, None, None, :], mu[None], logvar[None])
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        return logsumexp(comp + logw[None], axis=2)

    def sample_posterior(self, params, rng: np.random.Generator, per_point: int = 1):
        """Draw ``per_point`` latents from ``q(z|x_j)`` for each ``j``; returns (z, y, j)."""
        w, mu, logvar = params
        n, c, l = mu.shape
        j = np.repeat(np.arange(n), per_point)
        if c > 1:
            u = rng.random(len(j))
            y = (u[:, None] > np.cumsum(w[j], axis=1)).sum(axis=1)
            y = np.minimum(y, c - 1)
        else:
            y = np.zeros(len(j), dtype=int)
        eps = rng.standard_normal((len(j), l))
        z = mu[j, y] + np.exp(0.5 * logvar[j, y]) * eps
        return z, y, j

    def generate(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("n must be >= 1")
        z, y = self.sample_prior(n, rng)
        x = self.likelihood.sample(self.decoder.numpy(z), rng)
        return x, y

    def state(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: List[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {a.shape}")
            p.data = np.array(a, dtype=np.float64)


class IlLidVaeModel(_BaseModel):
    """Single-Gaussian-prior model ``z ~ N(0, I)``, ``x ~ EF(x | f(z))``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 likelihood: Optional[ExpFamily] = None):
        self.config = config
        self.encoder = GaussianEncoder(config.data_dim, config.latent_dim, config.encoder, rng)
        self.decoder = Decoder(config.latent_dim, config.data_dim, config.L1, config.L2,
                               config.icnn, rng)
        self.likelihood = likelihood or _likelihood(config)

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def prior_params(self):
        l = self.latent_dim
        return np.ones(1), np.zeros((1, l)), np.zeros((1, l))

    def posterior_params(self, xs: np.ndarray):
        mu, logvar = self.encoder(Tensor(xs))
        n = len(xs)
        return np.ones((n, 1)), mu.data[:, None, :], logvar.data[:, None, :]

    def elbo_rows(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                  eps: Optional[np.ndarray] = None) -> Tensor:
        x = _batch(x, self.data_dim)
        mu, logvar = self.encoder(Tensor(x))
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        z = mu + ad.mul(ad.exp(ad.mul(0.5, logvar)), Tensor(eps))
        xi = _finite(self.decoder(z), "decoder")
        rec = _finite(self.likelihood.log_density_t(x, xi), "log_likelihood")
        kl = _finite(gaussian_kl_t(mu, logvar), "kl")
        return rec - kl


class IlLidMVaeModel(_BaseModel):
    """Mixture prior ``y ~ Cat(1/c)``, ``z ~ N(m_y, diag v_y)``, ``x ~ EF(x | f(z))``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 likelihood: Optional[ExpFamily] = None):
        self.config = config
        c, l = config.c, config.latent_dim
        self.c = c
        self.y_encoder = Mlp([config.data_dim] + [config.encoder.width] * config.encoder.layers + [c],
                             rng, "qy")
        self.z_encoder = GaussianEncoder(config.data_dim + c, l, config.encoder, rng, "qz")
        self.decoder = Decoder(l, config.data_dim, config.L1, config.L2, config.icnn, rng)
        # one-hot embeddings B1^T y
        self.prior_mu = Tensor(np.eye(c, l), requires_grad=True, name="prior.mu")
        self.prior_logvar = Tensor(np.zeros((c, l)), requires_grad=True, name="prior.logvar")
        self.likelihood = likelihood or _likelihood(config)

    def parameters(self) -> List[Tensor]:
        return (self.y_encoder.parameters() + self.z_encoder.parameters()
                + self.decoder.parameters() + [self.prior_mu, self.prior_logvar])

    def prior_params(self):
        return np.full(self.c, 1.0 / self.c), self.prior_mu.data.copy(), self.prior_logvar.data.copy()

    def responsibilities(self, xs: np.ndarray) -> np.ndarray:
        logq = ad.log_softmax_rows(self.y_encoder(Tensor(_batch(xs, self.data_dim))))
        return np.exp(logq.data)

    def posterior_params(self, xs: np.ndarray):
        xs = _batch(xs, self.data_dim)
        n, c = len(xs), self.c
        w = self.responsibilities(xs)
        mus, logvars = [], []
        for y in range(c):
            onehot = np.zeros((n, c))
            onehot[:, y] = 1.0
            mu, logvar = self.z_encoder(Tensor(np.concatenate([xs, onehot], axis=1)))
            mus.append(mu.data)
            logvars.append(logvar.data)
        return w, np.stack(mus, axis=1), np.stack(logvars, axis=1)

    def elbo_rows(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                  eps: Optional[np.ndarray] = None) -> Tensor:
        """Exact enumeration over ``y``; one reparameterized ``z`` per component.

        ``eps`` (if given) has shape ``(c, batch, l)``.
        """
        x = _batch(x, self.data_dim)
        n, c, l = len(x), self.c, self.latent_dim
        if eps is None:
            eps = rng.standard_normal((c, n, l))
        log_qy = _finite(ad.log_softmax_rows(self.y_encoder(Tensor(x))), "q(y|x)")
        qy = ad.exp(log_qy)
        terms = []
        for y in range(c):
            onehot = np.zeros((n, c))
            onehot[:, y] = 1.0
            Y = Tensor(onehot)
            mu, logvar = self.z_encoder(ad.concat_cols([Tensor(x), Y]))
            z = mu + ad.mul(ad.exp(ad.mul(0.5, logvar)), Tensor(eps[y]))
            xi = _finite(self.decoder(z), "decoder")
            rec = self.likelihood.log_density_t(x, xi)
            kl = gaussian_kl_t(mu, logvar, Y @ self.prior_mu, Y @ self.prior_logvar)
            terms.append(ad.reshape(_finite(rec - kl, f"component {y}"), (n, 1)))
        per_y = ad.concat_cols(terms)
        expected = ad.sum_axis(ad.mul(qy, per_y), 1)
        cat_kl = ad.sum_axis(ad.mul(qy, log_qy + float(np.log(c))), 1)
        return expected - cat_kl


def _batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != dim:
        raise DimensionError(f"expected data of dimension {dim}, got shape {x.shape}")
    return x


def _likelihood(config: ModelConfig) -> ExpFamily:
    if config.likelihood == "bernoulli":
        return ExpFamily.bernoulli(config.data_dim)
    return ExpFamily.gaussian(config.data_dim, config.sigma_dec)


def build_model(config: ModelConfig, rng: np.random.Generator):
    if config.kind == "il-lidmvae":
        return IlLidMVaeModel(config, rng)
    return IlLidVaeModel(config, rng)


def elbo(model, x, rng=None, eps=None) -> Tensor:
    """Mean ELBO over the rows of ``x`` (a single vector is a batch of one)."""
    return ad.mean(model.elbo_rows(x, rng, eps))


def elbo_mixture(model: IlLidMVaeModel, x, rng=None, eps=None) -> Tensor:
    if model.c < 1:
        raise ValueError("mixture ELBO needs c >= 1")
    return elbo(model, x, rng, eps)


def posterior_responsibilities(model: IlLidMVaeModel, x) -> np.ndarray:
    return model.responsibilities(x)


def generate(model, n: int, rng: np.random.Generator):
    return model.generate(n, rng)


# checkpoints -------------------------------------------------------------

def save_checkpoint(model, path) -> Path:
    """``ILVAE1`` | u64 LE json length | json config | f64 LE params in order."""
    path = Path(path)
    blob = json.dumps(model.resolved_config(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ILVAE1 checkpoint")
    (n,) = struct.unpack_from("<Q", raw, 6)
    cfg = json.loads(raw[14:14 + n].decode())
    model = build_model(ModelConfig(**cfg), np.random.default_rng(0))
    offset = 14 + n
    arrays = []
    for p in model.parameters():
        count = p.size
        chunk = raw[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated at byte {offset}")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(p.shape).copy())
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    model.load_state(arrays)
    return model
