"""Finite-difference checks for every analytic gradient in the package.

The oracles here deliberately share no code with the paths they check. The
loss functions are re-implemented in extended precision so that the central
difference is limited by truncation (``eps**2``) rather than by float64
cancellation, which would otherwise swamp gradient entries near 1e-7.

* MLP and FedGG/FedProx objectives: a separate forward pass in ``np.longdouble``.
* Model-cosine loss: 50-digit mpmath. A coordinate perturbation changes
  ``<a, b>`` by ``h*a_k`` and ``|b|^2`` by ``2*h*b_k + h**2``, so each
  perturbed loss is O(1) once the base sums are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np

from fedgg.model import MlpSpec, ModelState, init_params, loss_and_grad_sup
from fedgg.strategies import adaptive_lambda, model_cosine_grad

SMALL = 1e-8
MLP_SPECS = ((2, 4, 2), (4, 8, 8, 3), (10, 32, 5))


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    cases: int
    max_rel_err: float
    max_abs_err_small: float
    tol: float
    worst_case: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol and self.max_abs_err_small < SMALL

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}  {self.name:<22} cases={self.cases:<4} max_rel_err={self.max_rel_err:.3e} "
                f"(tol {self.tol:.0e})  max_abs_err[|fd|<1e-8]={self.max_abs_err_small:.1e}  "
                f"worst_case={self.worst_case}")


def compare(analytic, numeric) -> tuple[float, float]:
    """Max relative error over entries with ``|numeric| >= 1e-8``, and max
    absolute error over the rest."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    big = np.abs(numeric) >= SMALL
    rel = float((diff[big] / np.abs(numeric[big])).max(initial=0.0))
    small = float(diff[~big].max(initial=0.0))
    return rel, small


# --- oracles ------------------------------------------------------------------

def mlp_loss_ld(spec: MlpSpec, params, x, y) -> np.longdouble:
    """Mean softmax cross-entropy evaluated in extended precision."""
    p = np.asarray(params, dtype=np.longdouble)
    h = np.asarray(x, dtype=np.longdouble)
    pos = 0
    dims = spec.layer_dims
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        w = p[pos:pos + i * o].reshape(i, o)
        pos += i * o
        b = p[pos:pos + o]
        pos += o
        h = h @ w + b
        if k < len(dims) - 2:
            h = np.where(h > 0, h, np.longdouble(0))
    z = h - h.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return (lse - z[np.arange(len(y)), y]).mean()


def cosine_loss_ld(w_local, w_global, w_prev) -> np.longdouble:
    a = np.asarray(w_global, dtype=np.longdouble) - np.asarray(w_prev, dtype=np.longdouble)
    b = np.asarray(w_local, dtype=np.longdouble) - np.asarray(w_global, dtype=np.longdouble)
    return 1 - (a @ b) / (np.sqrt(a @ a) * np.sqrt(b @ b))


def central_difference(f, x, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` at float64 point ``x``.

    The perturbed points are built in extended precision, so the step is
    exactly ``eps`` rather than its float64 rounding.
    """
    x = np.asarray(x, dtype=np.longdouble)
    h = np.longdouble(eps)
    out = np.empty(x.size, dtype=np.float64)
    for k in range(x.size):
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        out[k] = float((f(xp) - f(xm)) / (2 * h))
    return out


def cosine_fd_oracle(w_local, w_global, w_prev, eps: float = 1e-6, dps: int = 50) -> np.ndarray:
    """Central differences of ``1 - cos(w_global - w_prev, w_local - w_global)`` in mpmath."""
    with mpmath.workdps(dps):
        mpf = mpmath.mpf
        a = [mpf(float(g)) - mpf(float(p)) for g, p in zip(w_global, w_prev)]
        b = [mpf(float(l_)) - mpf(float(g)) for l_, g in zip(w_local, w_global)]
        ab = mpmath.fsum(x * y for x, y in zip(a, b))
        na = mpmath.sqrt(mpmath.fsum(x * x for x in a))
        bb = mpmath.fsum(x * x for x in b)
        h = mpf(eps)

        def loss(k, step):
            return 1 - (ab + step * a[k]) / (na * mpmath.sqrt(bb + 2 * step * b[k] + step * step))

        return np.array([float((loss(k, h) - loss(k, -h)) / (2 * h)) for k in range(len(a))])


# --- suites -------------------------------------------------------------------

KINK_MARGIN = 1e-3


def kink_distance(spec: MlpSpec, params, x) -> float:
    """Smallest |pre-activation| over the hidden ReLUs; inf for a linear model."""
    h = np.asarray(x, dtype=np.float64)
    pos = 0
    dims = spec.layer_dims
    closest = np.inf
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        w = params[pos:pos + i * o].reshape(i, o)
        pos += i * o
        h = h @ w + params[pos:pos + o]
        pos += o
        if k < len(dims) - 2:
            closest = min(closest, float(np.abs(h).min()))
            h = np.maximum(h, 0.0)
    return closest


def _random_mlp_case(rng, dims):
    """A random (spec, params, x, y); redrawn while a ReLU sits near its kink,
    where central differences are meaningless."""
    spec = MlpSpec(dims)
    while True:
        params = init_params(spec, rng).params
        # Non-zero biases so every code path carries gradient.
        params = params + 0.1 * rng.standard_normal(params.size)
        x = rng.standard_normal((8, spec.input_dim))
        y = rng.integers(0, spec.num_classes, size=8)
        if kink_distance(spec, params, x) > KINK_MARGIN:
            return spec, params, x, y


def check_mlp(cases: int = 100, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    rng = np.random.default_rng([seed, 11])
    worst, worst_small, worst_case = 0.0, 0.0, -1
    for case in range(cases):
        spec, params, x, y = _random_mlp_case(rng, MLP_SPECS[case % len(MLP_SPECS)])
        _, grad = loss_and_grad_sup(ModelState(spec, params), x, y)
        fd = central_difference(lambda p: mlp_loss_ld(spec, p, x, y), params, eps)
        rel, small = compare(grad, fd)
        worst_small = max(worst_small, small)
        if rel > worst:
            worst, worst_case = rel, case
    return GradCheckResult("mlp_cross_entropy", cases, worst, worst_small, tol, worst_case)


def _cosine_configuration(rng, dim):
    w_global = rng.standard_normal(dim)
    w_prev = w_global - rng.uniform(0.01, 1.0) * rng.standard_normal(dim)
    w_local = w_global + rng.uniform(0.01, 1.0) * rng.standard_normal(dim)
    return w_local, w_global, w_prev


def check_cosine(cases: int = 100, seed: int = 0, dims=(10, 1000), eps: float = 1e-6,
                 tol: float = 1e-5, grad_fn=model_cosine_grad) -> GradCheckResult:
    rng = np.random.default_rng([seed, 12])
    worst, worst_small, worst_case = 0.0, 0.0, -1
    for case in range(cases):
        dim = int(rng.integers(dims[0], dims[1] + 1))
        w_local, w_global, w_prev = _cosine_configuration(rng, dim)
        rel, small = compare(grad_fn(w_local, w_global, w_prev),
                             cosine_fd_oracle(w_local, w_global, w_prev, eps))
        worst_small = max(worst_small, small)
        if rel > worst:
            worst, worst_case = rel, case
    return GradCheckResult("model_cosine", cases, worst, worst_small, tol, worst_case)


def check_fedgg_objective(cases: int = 50, seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
                          grad_fn=model_cosine_grad) -> GradCheckResult:
    """Gradient of ``sup_loss + lam * cos_loss`` with ``lam`` frozen at its adaptive value."""
    rng = np.random.default_rng([seed, 13])
    worst, worst_small, worst_case = 0.0, 0.0, -1
    for case in range(cases):
        spec, w_global, x, y = _random_mlp_case(rng, MLP_SPECS[case % 2])
        n = w_global.size
        w_prev = w_global - 0.05 * rng.standard_normal(n)
        while True:
            w_before = w_global + 0.02 * rng.standard_normal(n)
            w_local = w_before + 0.02 * rng.standard_normal(n)
            if kink_distance(spec, w_local, x) > KINK_MARGIN:
                break
        # A large mu keeps the cosine term comparable to the supervised one.
        lam = adaptive_lambda(w_local, w_before, w_global, mu=float(rng.uniform(1.0, 50.0)))
        _, g_sup = loss_and_grad_sup(ModelState(spec, w_local), x, y)
        analytic = g_sup + lam * grad_fn(w_local, w_global, w_prev)
        lam_ld = np.longdouble(lam)
        fd = central_difference(
            lambda p: mlp_loss_ld(spec, p, x, y) + lam_ld * cosine_loss_ld(p, w_global, w_prev),
            w_local, eps)
        rel, small = compare(analytic, fd)
        worst_small = max(worst_small, small)
        if rel > worst:
            worst, worst_case = rel, case
    return GradCheckResult("fedgg_objective", cases, worst, worst_small, tol, worst_case)


def check_fedprox_objective(cases: int = 30, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                            prox_mu: float = 0.01) -> GradCheckResult:
    """Gradient of ``sup_loss + prox_mu/2 * |w - w_global|^2`` on 2-4-2 nets."""
    rng = np.random.default_rng([seed, 14])
    worst, worst_small, worst_case = 0.0, 0.0, -1
    for case in range(cases):
        spec, w_global, x, y = _random_mlp_case(rng, (2, 4, 2))
        w = w_global + 0.3 * rng.standard_normal(w_global.size)
        while kink_distance(spec, w, x) <= KINK_MARGIN:
            w = w_global + 0.3 * rng.standard_normal(w_global.size)
        _, g_sup = loss_and_grad_sup(ModelState(spec, w), x, y)
        analytic = g_sup + prox_mu * (w - w_global)
        anchor = np.asarray(w_global, dtype=np.longdouble)
        mu_ld = np.longdouble(prox_mu)
        fd = central_difference(
            lambda p: mlp_loss_ld(spec, p, x, y) + mu_ld / 2 * ((p - anchor) @ (p - anchor)), w, eps)
        rel, small = compare(analytic, fd)
        worst_small = max(worst_small, small)
        if rel > worst:
            worst, worst_case = rel, case
    return GradCheckResult("fedprox_objective", cases, worst, worst_small, tol, worst_case)


def flipped_cosine_grad(w_local, w_global, w_prev):
    """The cosine gradient with the sign of its ``cos * b/|b|`` term flipped (mutation hook)."""
    a = np.asarray(w_global) - np.asarray(w_prev)
    b = np.asarray(w_local) - np.asarray(w_global)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = a @ b / (na * nb)
    return -(a / na + cos * b / nb) / nb


def run_all(seed: int = 0, grad_fn=model_cosine_grad) -> list[GradCheckResult]:
    return [
        check_mlp(seed=seed),
        check_cosine(seed=seed, grad_fn=grad_fn),
        check_fedgg_objective(seed=seed, grad_fn=grad_fn),
        check_fedprox_objective(seed=seed),
    ]
