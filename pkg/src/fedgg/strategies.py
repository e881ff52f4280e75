"""Client-side local training for FedAvg, FedProx, SCAFFOLD and FedGG.

All four variants share one mini-batch loop (:func:`_run_local`). They differ
only in the extra gradient term added to the supervised gradient at each local
iteration:

* FedProx adds ``prox_mu * (w - w_global)``.
* SCAFFOLD adds the control-variate correction ``c - c_i``.
* FedGG adds ``lam * grad(model_cosine_loss)`` once the guidance direction
  exists, i.e. from the second local iteration of every round after the first.

When an extra term is zero it is skipped rather than added, which makes the
reductions (FedProx with ``prox_mu=0``, FedGG with ``mu=0``) bit-identical to
FedAvg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedgg.model import MlpSpec, ModelState, loss_and_grad_sup, sgd_momentum_step
from fedgg.params import ZERO_NORM, ZeroNormError, cosine_similarity, dot, norm, sub

VARIANTS = ("fedavg", "fedprox", "scaffold", "fedgg")
WEIGHT_MODES = ("adaptive", "fixed")


class EmptyClientError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    local_epochs: int = 5
    variant: str = "fedavg"
    prox_mu: float = 0.01
    weight_mode: str = "adaptive"
    mu: float = 0.01
    lam: float = 5e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")
        if self.prox_mu < 0 or self.mu < 0 or self.lam < 0:
            raise ValueError("prox_mu, mu and lam must be >= 0")

    def num_steps(self, num_samples: int) -> int:
        return math.ceil(num_samples * self.local_epochs / self.batch_size)


@dataclass
class ClientState:
    id: int
    indices: np.ndarray
    seed: int = 0
    last_received_global: np.ndarray | None = None
    control_variate: np.ndarray | None = None

    def rng(self, round_idx: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.id, round_idx])


@dataclass(frozen=True)
class GlobalContext:
    round: int
    w_curr: np.ndarray
    w_prev: np.ndarray | None = None
    c: np.ndarray | None = None


@dataclass
class TrainStats:
    """Per-call counters. Picklable so worker processes can send them back."""

    steps: int = 0
    loss_sum: float = 0.0
    cos_evals: int = 0
    cos_evals_round0: int = 0
    cos_evals_first_iter: int = 0
    guard_skips: int = 0
    lambda_sum: float = 0.0
    lambda_min: float = math.inf
    lambda_max: float = -math.inf
    applied_lambdas: set[float] = field(default_factory=set)
    cos_loss_min: float = math.inf
    cos_loss_max: float = -math.inf
    direction_norm: float | None = None

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.steps if self.steps else 0.0

    @property
    def mean_lambda(self) -> float:
        return self.lambda_sum / self.steps if self.steps else 0.0


@dataclass
class LocalResult:
    params: np.ndarray
    stats: TrainStats
    control_variate: np.ndarray | None = None
    delta_c: np.ndarray | None = None


def model_cosine_loss(w_local, w_global, w_global_prev) -> float:
    """One minus the cosine between the last global update and the local drift."""
    a = sub(w_global, w_global_prev)
    b = sub(w_local, w_global)
    return 1.0 - cosine_similarity(a, b)


def model_cosine_grad(w_local, w_global, w_global_prev) -> np.ndarray:
    """Gradient of :func:`model_cosine_loss` with respect to ``w_local``.

    With ``a = w_global - w_global_prev`` and ``b = w_local - w_global``::

        grad = -(1/|b|) * (a/|a| - cos * b/|b|)
    """
    a = sub(w_global, w_global_prev)
    b = sub(w_local, w_global)
    na, nb = norm(a), norm(b)
    if na <= ZERO_NORM or nb <= ZERO_NORM:
        raise ZeroNormError("model-cosine gradient needs non-zero update directions")
    cos = dot(a, b) / (na * nb)
    return -(a / na - cos * (b / nb)) / nb


def adaptive_lambda(w_local_curr, w_local_prev_iter, w_global, mu: float) -> float:
    """``mu * |w_local - w_global| * |w_local - w_local_prev_iter|``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return mu * norm(sub(w_local_curr, w_global)) * norm(sub(w_local_curr, w_local_prev_iter))


def batch_schedule(num_samples: int, cfg: TrainerConfig, rng: np.random.Generator):
    """Yield index arrays (positions into the client's data) for each local step.

    The stream is ``local_epochs`` independent permutations laid end to end,
    chopped into ``batch_size`` chunks; the final chunk may be short.
    """
    order = np.concatenate([rng.permutation(num_samples) for _ in range(cfg.local_epochs)])
    for start in range(0, order.size, cfg.batch_size):
        yield order[start:start + cfg.batch_size]


def _run_local(client: ClientState, ctx: GlobalContext, cfg: TrainerConfig, spec: MlpSpec,
               dataset, extra_grad=None, stats: TrainStats | None = None, loss_fn=None):
    """Shared mini-batch loop.

    ``extra_grad(m, w, w_before, stats)`` sees the 1-based iteration index, the
    current iterate ``w(m-1)`` and the one before it ``w(m-2)`` (both equal to
    the global model at ``m == 1``), and returns an additive gradient term or
    None. ``loss_fn(params, x, y) -> (loss, grad)`` replaces the MLP loss.
    """
    if client.indices.size == 0:
        raise EmptyClientError(f"client {client.id} holds no samples")
    stats = stats if stats is not None else TrainStats()
    x_all = dataset.features[client.indices]
    y_all = dataset.labels[client.indices]
    w = np.array(ctx.w_curr, dtype=np.float64)
    w_before = w
    v = np.zeros_like(w)
    if loss_fn is None:
        def loss_fn(params, x, y):
            return loss_and_grad_sup(ModelState(spec, params), x, y)
    for m, batch in enumerate(batch_schedule(client.indices.size, cfg, client.rng(ctx.round)), start=1):
        loss, g = loss_fn(w, x_all[batch], y_all[batch])
        stats.steps += 1
        stats.loss_sum += loss
        if extra_grad is not None:
            extra = extra_grad(m, w, w_before, stats)
            if extra is not None:
                g = g + extra
        w_before = w
        w, v = sgd_momentum_step(w, g, v, cfg.lr, cfg.momentum)
    return w, stats


def local_train_fedavg(client, ctx, cfg, spec, dataset, loss_fn=None) -> LocalResult:
    w, stats = _run_local(client, ctx, cfg, spec, dataset, loss_fn=loss_fn)
    return LocalResult(w, stats)


def local_train_fedprox(client, ctx, cfg, spec, dataset) -> LocalResult:
    anchor = ctx.w_curr
    mu = cfg.prox_mu

    def prox(m, w, w_before, stats):
        if mu == 0:
            return None
        return mu * (w - anchor)

    w, stats = _run_local(client, ctx, cfg, spec, dataset, prox)
    return LocalResult(w, stats)


def scaffold_step_size(cfg: TrainerConfig) -> float:
    """Step size used to turn the local drift back into an average gradient.

    Heavy-ball momentum multiplies the steady-state step by ``1/(1-momentum)``;
    dividing by the bare ``lr`` would overstate the gradient by that factor
    and make the control variates diverge. Equals ``lr`` when momentum is 0.
    """
    return cfg.lr / (1.0 - cfg.momentum)


def local_train_scaffold(client, ctx, cfg, spec, dataset) -> LocalResult:
    dim = ctx.w_curr.size
    c = ctx.c if ctx.c is not None else np.zeros(dim)
    c_i = client.control_variate if client.control_variate is not None else np.zeros(dim)
    correction = c - c_i
    if not np.any(correction):
        correction = None

    def corrected(m, w, w_before, stats):
        return correction

    w, stats = _run_local(client, ctx, cfg, spec, dataset, corrected)
    tau = stats.steps
    if cfg.lr > 0:
        c_new = c_i - c + (ctx.w_curr - w) / (tau * scaffold_step_size(cfg))
    else:
        c_new = c_i.copy()
    return LocalResult(w, stats, control_variate=c_new, delta_c=c_new - c_i)


def local_train_fedgg(client, ctx, cfg, spec, dataset, cos_grad=model_cosine_grad,
                      loss_fn=None) -> LocalResult:
    """Local SGD on ``sup_loss + lam * model_cosine_loss`` with ``lam`` held constant.

    ``ctx.w_prev`` is the global model this client received before the
    current one; the guidance direction is ``ctx.w_curr - ctx.w_prev``. The
    cosine term is switched off in round 0, at the first local iteration, and
    whenever either direction has (near) zero norm.
    """
    w_global = ctx.w_curr
    w_prev = ctx.w_prev
    direction = None if w_prev is None else sub(w_global, w_prev)

    def guided(m, w, w_before, stats):
        if ctx.round == 0 or m == 1 or direction is None:
            return None
        if norm(direction) <= ZERO_NORM or norm(sub(w, w_global)) <= ZERO_NORM:
            stats.guard_skips += 1
            return None
        if cfg.weight_mode == "adaptive":
            # w_before is the iterate from step m-2; at m == 2 it is w_global.
            lam = adaptive_lambda(w, w_before, w_global, cfg.mu)
        else:
            lam = cfg.lam
        cos_loss = model_cosine_loss(w, w_global, w_prev)
        stats.cos_evals += 1
        if ctx.round == 0:
            stats.cos_evals_round0 += 1
        if m == 1:
            stats.cos_evals_first_iter += 1
        stats.cos_loss_min = min(stats.cos_loss_min, cos_loss)
        stats.cos_loss_max = max(stats.cos_loss_max, cos_loss)
        stats.lambda_sum += lam
        stats.lambda_min = min(stats.lambda_min, lam)
        stats.lambda_max = max(stats.lambda_max, lam)
        stats.applied_lambdas.add(lam)
        if lam == 0:
            return None
        return lam * cos_grad(w, w_global, w_prev)

    stats = TrainStats()
    if direction is not None:
        stats.direction_norm = norm(direction)
    w, stats = _run_local(client, ctx, cfg, spec, dataset, guided, stats, loss_fn)
    return LocalResult(w, stats)


TRAINERS = {
    "fedavg": local_train_fedavg,
    "fedprox": local_train_fedprox,
    "scaffold": local_train_scaffold,
    "fedgg": local_train_fedgg,
}


def local_train(client, ctx, cfg, spec, dataset) -> LocalResult:
    return TRAINERS[cfg.variant](client, ctx, cfg, spec, dataset)
