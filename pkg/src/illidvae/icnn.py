"""Strongly convex input-convex networks and their gradient (Brenier) maps.

``G(z) = y_k + (L/2)|z|^2`` with the fully connected ICNN recursion

    y_1     = softplus(z Wz_0 + b_0)
    y_{i+1} = g_i(y_i softplus(Wy_raw_i) + z Wz_i + b_i)

where ``g_i`` is softplus on hidden layers and the identity on the scalar
output layer.  ``f = grad G`` is then ``L``-inverse Lipschitz.

Arrays are batch-major: ``z`` has shape ``(batch, l)``; weights are stored
``(fan_in, fan_out)`` so layers are ``x @ W``.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _softplus_np(x):
    return ad._softplus(np.asarray(x, dtype=np.float64))


class IcnnParams:
    """Layer parameters of a scalar ICNN plus the strong-convexity constant."""

    def __init__(self, input_dim: int, layers: List[dict], L: float = 0.0):
        if L < 0:
            raise ValueError(f"strong convexity constant must be >= 0, got {L}")
        if not layers:
            raise ValueError("an ICNN needs at least one layer")
        if layers[-1]["Wz"].shape[1] != 1:
            raise DimensionError("final ICNN layer must have output width 1")
        self.input_dim = input_dim
        self.layers = layers
        self.L = float(L)

    @classmethod
    def init(cls, input_dim: int, hidden: Sequence[int], L: float,
             rng: np.random.Generator) -> "IcnnParams":
        widths = list(hidden) + [1]
        layers = []
        prev = None
        for i, w in enumerate(widths):
            fan_in = input_dim + (prev or 0)
            bound = 1.0 / np.sqrt(fan_in)
            layer = {
                "Wz": Tensor(rng.uniform(-bound, bound, (input_dim, w)), requires_grad=True, name=f"icnn{i}.Wz"),
                "b": Tensor(rng.uniform(-bound, bound, (w,)), requires_grad=True, name=f"icnn{i}.b"),
            }
            if prev is not None:
                layer["Wy_raw"] = Tensor(np.full((prev, w), softplus_inverse(1.0 / prev)),
                                         requires_grad=True, name=f"icnn{i}.Wy_raw")
            layers.append(layer)
            prev = w
        return cls(input_dim, layers, L)

    @classmethod
    def zeros(cls, input_dim: int, hidden: Sequence[int], L: float,
              final_weight: Optional[np.ndarray] = None) -> "IcnnParams":
        """All weights zero (``Wy_raw`` very negative so effective ``Wy`` ~ 0).

        With no hidden layers, ``G(z) = final_weight . z + (L/2)|z|^2``.
        """
        widths = list(hidden) + [1]
        layers, prev = [], None
        for i, w in enumerate(widths):
            layer = {"Wz": Tensor(np.zeros((input_dim, w)), requires_grad=True, name=f"icnn{i}.Wz"),
                     "b": Tensor(np.zeros(w), requires_grad=True, name=f"icnn{i}.b")}
            if prev is not None:
                layer["Wy_raw"] = Tensor(np.full((prev, w), -50.0), requires_grad=True,
                                         name=f"icnn{i}.Wy_raw")
            layers.append(layer)
            prev = w
        if final_weight is not None:
            layers[-1]["Wz"].data[:, 0] = np.asarray(final_weight, dtype=np.float64)
        return cls(input_dim, layers, L)

    def parameters(self) -> List[Tensor]:
        out = []
        for layer in self.layers:
            for key in ("Wy_raw", "Wz", "b"):
                if key in layer:
                    out.append(layer[key])
        return out

    def effective_wy(self, i: int) -> np.ndarray:
        return _softplus_np(self.layers[i]["Wy_raw"].data)

    def _check(self, z: Tensor) -> None:
        if z.data.ndim != 2 or z.shape[1] != self.input_dim:
            raise DimensionError(f"ICNN expects inputs of shape (batch, {self.input_dim}), got {z.shape}")

    def forward(self, z) -> Tuple[Tensor, List[Tensor]]:
        """Returns ``(y_k, pre-activations)`` for a batch of inputs."""
        z = _as_batch(z)
        self._check(z)
        pre = []
        y = None
        k = len(self.layers)
        for i, layer in enumerate(self.layers):
            a = z @ layer["Wz"]
            if y is not None:
                a = a + y @ ad.softplus(layer["Wy_raw"])
            a = ad.add_bias(a, layer["b"])
            pre.append(a)
            y = ad.softplus(a) if i < k - 1 else a
        return y, pre


def _as_batch(z) -> Tensor:
    z = ad.as_tensor(z)
    if z.data.ndim == 1:
        return ad.reshape(z, (1, -1))
    return z


def icnn_eval(p: IcnnParams, z) -> Tensor:
    """``G(z)`` for each row of ``z``; returns shape ``(batch,)``."""
    z = _as_batch(z)
    y, _ = p.forward(z)
    quad = ad.sum_axis(ad.square(z), 1)
    return ad.reshape(y, (-1,)) + ad.mul(0.5 * p.L, quad) if p.L != 0 else ad.reshape(y, (-1,))


class BrenierMap:
    """``f(z) = grad_z G(z)`` for a strongly convex ICNN ``G``."""

    def __init__(self, icnn: IcnnParams):
        self.icnn = icnn

    @classmethod
    def linear(cls, dim: int, L: float, offset=None) -> "BrenierMap":
        """The affine map ``f(z) = offset + L z``."""
        return cls(IcnnParams.zeros(dim, [], L, final_weight=offset))

    @property
    def dim(self) -> int:
        return self.icnn.input_dim

    @property
    def L(self) -> float:
        return self.icnn.L

    @L.setter
    def L(self, value: float) -> None:
        if value < 0:
            raise ValueError(f"strong convexity constant must be >= 0, got {value}")
        self.icnn.L = float(value)

    def parameters(self) -> List[Tensor]:
        return self.icnn.parameters()

    def __call__(self, z) -> Tensor:
        return brenier_forward(self, z)

    def numpy(self, z: np.ndarray) -> np.ndarray:
        """Untracked evaluation; ``z`` of shape ``(batch, l)`` or ``(l,)``."""
        z = np.asarray(z, dtype=np.float64)
        out = brenier_forward(self, Tensor(z.reshape(-1, self.dim))).data
        return out.reshape(z.shape)


def brenier_forward(m: BrenierMap, z) -> Tensor:
    """``grad G`` by the adjoint layer recursion, expressed in autodiff ops.

    Starting from the scalar output (identity activation, derivative 1), each
    layer contributes ``u_i Wz_i^T`` to the gradient, where
    ``u_i = (u_{i+1} Wy_{i+1}^T) * softplus'(a_i)``.  Parameter gradients flow
    through this recursion during training.
    """
    z = _as_batch(z)
    p = m.icnn
    _, pre = p.forward(z)
    k = len(p.layers)
    u = None
    grad = None
    for i in range(k - 1, -1, -1):
        layer = p.layers[i]
        if i == k - 1:
            # dG/da_{k-1} = 1 for every row
            contrib = ad.matmul(Tensor(np.ones((z.shape[0], 1))), ad.transpose(layer["Wz"]))
            u = Tensor(np.ones((z.shape[0], 1)))
        else:
            u = ad.mul(u, ad.sigmoid(pre[i]))
            contrib = u @ ad.transpose(layer["Wz"])
        grad = contrib if grad is None else grad + contrib
        if i > 0:
            u = u @ ad.transpose(ad.softplus(layer["Wy_raw"]))
    if p.L != 0:
        grad = grad + ad.mul(p.L, z)
    return grad


def brenier_forward_recursion(m: BrenierMap, z: np.ndarray) -> np.ndarray:
    """Forward-mode Jacobian recursion for a single point (numpy only).

    ``J_1 = diag(g'(a_0)) Wz_0``, ``J_{i+1} = diag(g'(a_i)) (Wy_i J_i + Wz_i)``,
    ``f = J_k^T + L z``.  Independent of :func:`brenier_forward`; used as a
    cross-check.
    """
    p = m.icnn
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    k = len(p.layers)
    y = None
    J = None
    for i, layer in enumerate(p.layers):
        Wz = layer["Wz"].data.T  # (out, l)
        a = Wz @ z + layer["b"].data
        if y is not None:
            Wy = p.effective_wy(i).T  # (out, in)
            a = a + Wy @ y
            lin = Wy @ J + Wz
        else:
            lin = Wz
        gprime = ad._sigmoid(a) if i < k - 1 else np.ones_like(a)
        J = gprime[:, None] * lin
        y = _softplus_np(a) if i < k - 1 else a
    return J[0] + p.L * z


def brenier_jacobian(m: BrenierMap, z, h: Optional[float] = None,
                     symmetrize: bool = True) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at a single point ``z``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if h is None:
        h = 1e-4 * (1.0 + np.max(np.abs(z)))
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    J = brenier_jacobian_batch(m, z[None, :], h=np.array([h]), symmetrize=symmetrize)
    return J[0]


def brenier_jacobian_batch(m: BrenierMap, Z: np.ndarray, h=None,
                           symmetrize: bool = True) -> np.ndarray:
    """FD Jacobians for a batch of points; returns ``(batch, l, l)``.

    ``J[b, i, j] = d f_i / d z_j``.  Step per row defaults to
    ``1e-4 * (1 + |z|_inf)``.
    """
    return fd_jacobian_batch(m.numpy, Z, h=h, symmetrize=symmetrize)


def fd_jacobian_batch(fn, Z: np.ndarray, h=None, symmetrize: bool = False) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    n, l = Z.shape
    if h is None:
        h = 1e-4 * (1.0 + np.max(np.abs(Z), axis=1))
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,))
    # all 2l perturbations in one batched call
    eye = np.eye(l)
    plus = Z[:, None, :] + h[:, None, None] * eye[None]
    minus = Z[:, None, :] - h[:, None, None] * eye[None]
    stacked = np.concatenate([plus.reshape(n * l, l), minus.reshape(n * l, l)], axis=0)
    out = np.asarray(fn(stacked))
    t = out.shape[1]
    fp = out[: n * l].reshape(n, l, t)
    fm = out[n * l:].reshape(n, l, t)
    # cols[b, j, :] = d f / d z_j
    cols = (fp - fm) / (2.0 * h[:, None, None])
    J = np.transpose(cols, (0, 2, 1))
    if symmetrize:
        J = 0.5 * (J + np.transpose(J, (0, 2, 1)))
    return J


def inverse_lipschitz_ratio(inputs_a, inputs_b, outputs_a, outputs_b,
                            min_sep: float = 1e-12) -> float:
    """Min of ``|out_a - out_b| / |in_a - in_b|`` over rows; skips near-equal inputs."""
    da = np.linalg.norm(np.asarray(inputs_a) - np.asarray(inputs_b), axis=-1)
    do = np.linalg.norm(np.asarray(outputs_a) - np.asarray(outputs_b), axis=-1)
    keep = da >= min_sep
    if not np.any(keep):
        raise ValueError("no usable pairs (all input pairs closer than 1e-12)")
    return float(np.min(do[keep] / da[keep]))


def empirical_inverse_lipschitz(m, pairs) -> float:
    """Min over ``(x, y)`` pairs of ``|f(x) - f(y)| / |x - y|``.

    ``m`` is anything callable on a ``(batch, l)`` numpy array (a
    :class:`BrenierMap` uses its untracked path).  ``pairs`` is a sequence of
    ``(x, y)`` or a pair of stacked arrays.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        xs, ys = (np.asarray(p, dtype=np.float64) for p in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty pair list")
        xs = np.array([p[0] for p in pairs], dtype=np.float64)
        ys = np.array([p[1] for p in pairs], dtype=np.float64)
    fn = m.numpy if isinstance(m, BrenierMap) else m
    return inverse_lipschitz_ratio(xs, ys, fn(xs), fn(ys))


def injection(l: int, t: int) -> np.ndarray:
    """The ``l x t`` matrix with unit diagonal; ``z @ B`` zero-pads to width ``t``."""
    if l > t:
        raise DimensionError(f"injection needs l <= t, got l={l}, t={t}")
    return np.eye(l, t)


def composed_decoder(f1: BrenierMap, B, f2: BrenierMap, z) -> Tensor:
    """``f2(B^T f1(z))`` for a batch of latents (row form: ``f2(f1(z) @ B)``)."""
    B = np.asarray(B.data if isinstance(B, Tensor) else B, dtype=np.float64)
    if B.shape != (f1.dim, f2.dim):
        raise DimensionError(f"B must be {f1.dim}x{f2.dim}, got {B.shape}")
    return f2(ad.matmul(f1(z), Tensor(B)))
