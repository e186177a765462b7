"""Minibatch Adam training with periodic evaluation and inverse-Lipschitz annealing."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .diagnostics import MetricsRecord, evaluate
from .icnn import inverse_lipschitz_ratio
from .models import TrainingError, elbo, save_checkpoint

log = logging.getLogger(__name__)

RECYCLE_CAPACITY = 4096
MIN_ANNEAL_PAIRS = 32


@dataclass
class AnnealConfig:
    decay: float = 0.85
    trigger_ratio: float = 1.1
    min_L: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("anneal decay must lie in (0, 1)")
        if self.trigger_ratio < 1.0:
            raise ValueError("anneal trigger_ratio must be >= 1")
        if self.min_L < 0:
            raise ValueError("anneal min_L must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 10
    seed: int = 0
    anneal: Optional[AnnealConfig] = None

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealConfig(**self.anneal)
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalConfig:
    n_mc: int = 1024
    n_eval_points: int = 256

    def __post_init__(self):
        if self.n_mc < 100:
            raise ValueError("n_mc must be >= 100")
        if self.n_eval_points < 1:
            raise ValueError("n_eval_points must be >= 1")


class Adam:
    """Adam with bias correction; ``step`` applies one update in place."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[p].data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class AnnealState:
    current_L: float
    initial_L: float
    min_L: float = 0.0
    recycled_pairs: Deque[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=lambda: deque(maxlen=RECYCLE_CAPACITY))
    events: List[Tuple[int, float, float, float]] = field(default_factory=list)
    last_emp_L: float = float("nan")

    def capture(self, z: np.ndarray, fz: np.ndarray) -> None:
        """Pair consecutive rows of one forward pass (same parameters)."""
        if len(z) < 2:
            return
        for a in range(len(z) - 1):
            self.recycled_pairs.append((z[a], z[a + 1], fz[a], fz[a + 1]))


def anneal_step(state: AnnealState, maps, epoch: int, cfg: Optional[AnnealConfig] = None) -> AnnealState:
    """Shrink the first map's constant when its empirical constant nears the bound.

    ``maps`` is a decoder (its ``first`` map is annealed) or a
    :class:`~illidvae.icnn.BrenierMap`.
    """
    cfg = cfg or AnnealConfig(min_L=state.min_L)
    target = getattr(maps, "first", maps)
    pairs = list(state.recycled_pairs)
    state.recycled_pairs.clear()
    if len(pairs) < MIN_ANNEAL_PAIRS:
        log.warning("anneal: only %d recycled pairs at epoch %d, skipping", len(pairs), epoch)
        return state
    za, zb, fa, fb = (np.array(col) for col in zip(*pairs))
    try:
        emp = inverse_lipschitz_ratio(za, zb, fa, fb)
    except ValueError:
        log.warning("anneal: no usable pairs at epoch %d, skipping", epoch)
        return state
    state.last_emp_L = emp
    if emp <= cfg.trigger_ratio * state.current_L:
        old = state.current_L
        new = max(cfg.min_L, cfg.decay * old)
        if new < old:
            state.current_L = new
            target.L = new
            state.events.append((epoch, old, new, emp))
            log.info("anneal: epoch=%d L %.6g -> %.6g (emp_L=%.6g)", epoch, old, new, emp)
    return state


def seed_streams(seed: int):
    """(shuffle rng, noise rng, evaluation seed) derived from one run seed."""
    shuffle_seq, noise_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(shuffle_seq), np.random.default_rng(noise_seq),
            int(eval_seq.generate_state(1)[0]))


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, term: str, checkpoint: Optional[Path], state=None):
        super().__init__(f"non-finite loss at epoch {epoch} ({term}); last good checkpoint: {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint
        self.state = state


@dataclass
class TrainResult:
    model: object
    history: List[Tuple[int, MetricsRecord]]
    epoch_elbo: List[float]
    anneal: Optional[AnnealState] = None


def train(model, data: np.ndarray, cfg: TrainConfig, eval_data: Optional[np.ndarray] = None,
          eval_labels: Optional[np.ndarray] = None, eval_cfg: Optional[EvalConfig] = None,
          out_dir=None) -> TrainResult:
    """Maximize the mean ELBO over ``data`` with minibatch Adam.

    Deterministic in ``cfg.seed``.  Metrics are recorded every
    ``cfg.eval_every`` epochs and after the final epoch.
    """
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("training data is empty")
    eval_cfg = eval_cfg or EvalConfig()
    eval_data = data if eval_data is None else eval_data
    shuffle_rng, noise_rng, eval_seed = seed_streams(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = None
    good_state = model.state()

    state = None
    if cfg.anneal is not None:
        L0 = model.decoder.first.L
        state = AnnealState(current_L=L0, initial_L=L0, min_L=cfg.anneal.min_L)

    history: List[Tuple[int, MetricsRecord]] = []
    epoch_elbo: List[float] = []

    def run_eval(step: int) -> None:
        rec = evaluate(model, eval_data, eval_labels, eval_cfg.n_mc, eval_cfg.n_eval_points,
                       seed=eval_seed)
        history.append((step, rec))

    if cfg.epochs == 0:
        run_eval(0)
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        if state is not None:
            model.decoder.capture = state.capture
        try:
            for start in range(0, n, cfg.batch_size):
                batch = data[order[start:start + cfg.batch_size]]
                with ad.Tape():
                    loss = ad.negate(elbo(model, batch, noise_rng))
                    if not math.isfinite(loss.item()):
                        raise TrainingError("loss")
                    grads = ad.backward(loss, wrt=params)
                opt.step(grads)
                total += -loss.item() * len(batch)
                count += len(batch)
        except (TrainingError, FloatingPointError) as exc:
            model.load_state(good_state)
            term = getattr(exc, "term", "loss")
            raise TrainingAborted(epoch, term, last_good, model) from exc
        finally:
            model.decoder.capture = None
        good_state = model.state()
        if out_dir is not None:
            last_good = save_checkpoint(model, out_dir / "last_good.ckpt")
        epoch_elbo.append(total / count)
        emp = float("nan")
        if state is not None:
            anneal_step(state, model.decoder, epoch, cfg.anneal)
            emp = state.last_emp_L
        log.info("epoch=%d elbo=%.6f L=%.17g emp_L=%.17g", epoch, epoch_elbo[-1],
                 model.decoder.first.L, emp)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            run_eval(epoch)
    return TrainResult(model, history, epoch_elbo, state)
