"""Adam, backtracking minimization and plateau learning-rate decay.

Parameters are dictionaries of named numpy arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteObjective


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def direction(self, grads: dict):
        """Bias-corrected Adam direction and the moment state it would commit."""
        t = self.t + 1
        m_new, v_new, step = {}, {}, {}
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            m_new[k], v_new[k] = m, v
            step[k] = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return step, (m_new, v_new, t)

    def commit(self, state) -> None:
        self.m, self.v, self.t = state

    def step(self, params: dict, grads: dict) -> None:
        """Plain in-place update, used by the network trainer."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = self.lr / (1.0 - b1**self.t)
        c2 = 1.0 / np.sqrt(1.0 - b2**self.t)
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            d = np.sqrt(v)
            d *= c2
            d += self.eps
            np.divide(m, d, out=d)
            d *= c1
            params[k] -= d


@dataclass
class MinimizeConfig:
    max_iters: int = 500
    lr: float = 0.02
    tol: float = 1e-10  # relative objective decrease over ``window`` accepted steps
    window: int = 20
    atol: float = 1e-14  # objective considered optimal below this (objectives are non-negative)
    gtol: float = 1e-12  # gradient norm considered zero below this
    min_lr: float = 1e-8
    regrow: float = 1.0  # step-size multiplier after an accepted step, capped at ``lr``
    decay: float = 1.0  # step-size ceiling falls geometrically to ``lr * decay`` at ``max_iters``
    lr_scale: dict = field(default_factory=dict)


@dataclass
class MinimizeResult:
    params: dict
    value: float
    trace: list  # objective at the start and after every accepted step
    n_accepted: int
    n_iters: int
    converged: bool


def minimize_batched(objective: Callable, params: dict, cfg: MinimizeConfig | None = None,
                     keys=None) -> list:
    """Independent Adam-with-step-rejection runs over a leading batch axis.

    Every array in ``params`` has a leading axis of size B. The objective is
    called as ``objective(x, idx) -> (values, grads)`` where ``x`` holds the
    rows ``idx`` of every parameter and ``values`` has shape ``(len(idx),)``.
    Each row keeps its own Adam moments, step size and stopping state, so
    the result equals B separate single-problem runs.
    """
    cfg = cfg or MinimizeConfig()
    x = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    keys = list(x) if keys is None else list(keys)
    B = len(next(iter(x.values())))
    everyone = np.arange(B)
    f, g = objective(x, everyone)
    f = np.asarray(f, dtype=float)
    g = {k: np.array(g[k], dtype=float) for k in keys}
    bad = ~_finite_rows(f, g)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteObjective(f"objective is not finite at the starting point (row {i})",
                                 {k: v[i] for k, v in x.items()}, None)
    # hist[n, i] is row i's objective after n accepted steps
    hist = np.empty((cfg.max_iters + 1, B))
    hist[0] = f
    m = {k: np.zeros_like(x[k]) for k in keys}
    v2 = {k: np.zeros_like(x[k]) for k in keys}
    t = np.zeros(B, dtype=np.int64)
    lr = np.full(B, float(cfg.lr))
    accepted = np.zeros(B, dtype=np.int64)
    iters = np.full(B, cfg.max_iters, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    active = np.ones(B, dtype=bool)
    b1, b2, eps = 0.9, 0.999, 1e-8

    for it in range(cfg.max_iters):
        # stopping tests on the current state
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        gnorm = np.sqrt(sum(np.sum(g[k][idx].reshape(len(idx), -1) ** 2, axis=1) for k in keys))
        stop = (f[idx] <= cfg.atol) | (gnorm <= cfg.gtol)
        n = accepted[idx]
        old = hist[np.maximum(n - cfg.window, 0), idx]
        stop |= (n >= cfg.window) & (old - f[idx] <= cfg.tol * np.maximum(np.abs(old), 1e-300))
        stopped = idx[stop]
        active[stopped] = False
        converged[stopped] = True
        iters[stopped] = it
        idx = idx[~stop]
        if len(idx) == 0:
            break
        ceiling = cfg.lr * cfg.decay ** (it / max(cfg.max_iters - 1, 1))
        lr[idx] = np.minimum(lr[idx], ceiling)
        tt = t[idx] + 1
        bc1 = 1.0 - b1 ** tt
        bc2 = 1.0 - b2 ** tt
        cand = {k: x[k][idx] for k in x}
        new_m, new_v = {}, {}
        for k in keys:
            gk = g[k][idx]
            mk = b1 * m[k][idx] + (1.0 - b1) * gk
            vk = b2 * v2[k][idx] + (1.0 - b2) * gk * gk
            new_m[k], new_v[k] = mk, vk
            shape = (len(idx),) + (1,) * (gk.ndim - 1)
            step = (mk / bc1.reshape(shape)) / (np.sqrt(vk / bc2.reshape(shape)) + eps)
            cand[k] = cand[k] - (lr[idx] * cfg.lr_scale.get(k, 1.0)).reshape(shape) * step
        f_new, g_new = objective(cand, idx)
        f_new = np.asarray(f_new, dtype=float)
        g_new = {k: np.asarray(g_new[k], dtype=float) for k in keys}
        bad = ~_finite_rows(f_new, g_new)
        if bad.any():
            i = int(idx[np.flatnonzero(bad)[0]])
            raise NonFiniteObjective(f"objective became non-finite at iteration {it} (row {i})",
                                     {k: v[i] for k, v in x.items()}, float(f[i]))
        ok = f_new <= f[idx]
        acc, rej = idx[ok], idx[~ok]
        for k in x:
            if k in keys:
                m[k][acc] = new_m[k][ok]
                v2[k][acc] = new_v[k][ok]
                g[k][acc] = g_new[k][ok]
            x[k][acc] = cand[k][ok]
        f[acc] = f_new[ok]
        t[acc] += 1
        accepted[acc] += 1
        hist[accepted[acc], acc] = f[acc]
        lr[acc] = np.minimum(lr[acc] * cfg.regrow, ceiling)
        lr[rej] *= 0.5
        # a stale momentum need not point downhill; restart it from the gradient
        for k in keys:
            m[k][rej] = 0.0
        done = rej[lr[rej] < cfg.min_lr]
        active[done] = False
        converged[done] = True
        iters[done] = it + 1
    return [
        MinimizeResult({k: x[k][i] for k in x}, float(f[i]), hist[: accepted[i] + 1, i].tolist(),
                       int(accepted[i]), int(iters[i]),
                       bool(converged[i]))
        for i in range(B)
    ]


def _finite_rows(f, grads) -> np.ndarray:
    ok = np.isfinite(f)
    for gk in grads.values():
        ok &= np.all(np.isfinite(gk.reshape(len(gk), -1)), axis=1)
    return ok


def minimize(objective: Callable, params: dict, cfg: MinimizeConfig | None = None,
             keys=None) -> MinimizeResult:
    """Adam with step rejection: a step that raises the objective is undone and
    the step size halved.

    ``objective(params) -> (value, grads)`` where ``grads`` has the keys being
    optimized. ``keys`` restricts which entries move (default: all).
    """

    def batched(xb, idx):
        value, grads = objective({k: v[0] for k, v in xb.items()})
        return np.array([value], dtype=float), {k: np.asarray(gk, dtype=float)[None] for k, gk in grads.items()}

    stacked = {k: np.asarray(v, dtype=float)[None] for k, v in params.items()}
    return minimize_batched(batched, stacked, cfg, keys)[0]


class PlateauScheduler:
    """Divide the learning rate by ``1/factor`` when the smoothed loss stalls.

    The loss is smoothed with a trailing mean over ``smooth`` evaluations; a
    decay fires when the relative improvement of the smoothed loss across the
    last ``window`` evaluations drops below ``threshold``. History restarts
    after each decay, and at most ``max_decays`` decays happen.
    """

    def __init__(self, factor: float = 0.1, window: int = 10, threshold: float = 1e-3,
                 smooth: int = 3, max_decays: int = 1):
        self.factor = factor
        self.window = window
        self.threshold = threshold
        self.smooth = smooth
        self.max_decays = max_decays
        self.n_decays = 0
        self._raw: list = []
        self._smoothed: list = []

    def step(self, loss: float) -> bool:
        self._raw.append(float(loss))
        self._smoothed.append(float(np.mean(self._raw[-self.smooth:])))
        if self.n_decays >= self.max_decays or len(self._smoothed) <= self.window:
            return False
        old, new = self._smoothed[-self.window - 1], self._smoothed[-1]
        if (old - new) < self.threshold * abs(old):
            self.n_decays += 1
            self._raw.clear()
            self._smoothed.clear()
            return True
        return False


@dataclass
class LMConfig:
    max_iters: int = 40
    mu: float = 1e-3  # initial damping, relative to the mean Hessian diagonal
    tol: float = 1e-13  # relative objective decrease that counts as stalled
    max_mu: float = 1e12
    atol: float = 1e-14  # objective considered optimal below this


def minimize_lm(model_fn: Callable, x0, cfg: LMConfig | None = None) -> list:
    """Batched Levenberg-Marquardt with monotone acceptance.

    ``model_fn(x, idx, second_order)`` returns ``values`` of shape ``(b,)``
    and, when ``second_order`` is true, also the gradient ``(b, P)`` and a
    positive semi-definite curvature ``(b, P, P)`` (Gauss-Newton). ``x0`` is
    ``(B, P)``. Steps that do not lower a row's objective are rejected and
    that row's damping raised.
    """
    cfg = cfg or LMConfig()
    x = np.array(x0, dtype=float, copy=True)
    B, P = x.shape
    everyone = np.arange(B)
    f, g, H = model_fn(x, everyone, True)
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise NonFiniteObjective("objective is not finite at the starting point", x, None)
    hist = [[float(v)] for v in f]
    scale = np.maximum(np.mean(np.diagonal(H, axis1=1, axis2=2), axis=1), 1e-12)
    mu = cfg.mu * scale
    active = np.ones(B, dtype=bool)
    iters = np.full(B, cfg.max_iters, dtype=np.int64)
    stall = np.zeros(B, dtype=np.int64)
    eye = np.eye(P)
    for it in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        optimal = idx[f[idx] <= cfg.atol]
        active[optimal] = False
        iters[optimal] = it
        idx = idx[f[idx] > cfg.atol]
        if len(idx) == 0:
            break
        A = H[idx] + mu[idx, None, None] * eye
        step = -np.linalg.solve(A, g[idx][..., None])[..., 0]
        cand = x[idx] + step
        f_new = np.asarray(model_fn(cand, idx, False), dtype=float)
        ok = np.isfinite(f_new) & (f_new <= f[idx])
        acc, rej = idx[ok], idx[~ok]
        if len(acc):
            rel = (f[acc] - f_new[ok]) / np.maximum(np.abs(f[acc]), 1e-300)
            x[acc] = cand[ok]
            fa, ga, Ha = model_fn(x[acc], acc, True)
            f[acc], g[acc], H[acc] = fa, ga, Ha
            mu[acc] = np.maximum(mu[acc] / 3.0, 1e-15 * scale[acc])
            stall[acc] = np.where(rel <= cfg.tol, stall[acc] + 1, 0)
            for i in acc:
                hist[i].append(float(f[i]))
        mu[rej] *= 4.0
        done = (stall[idx] >= 2) | (mu[idx] > cfg.max_mu * scale[idx])
        active[idx[done]] = False
        iters[idx[done]] = it + 1
    return [MinimizeResult(x[i], float(f[i]), hist[i], len(hist[i]) - 1, int(iters[i]), bool(not active[i]))
            for i in range(B)]
