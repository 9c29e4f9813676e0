"""Dynamic parameter inference by multiple shooting.

The observed trajectory is cut into windows.  Each window is simulated from
its own start state; the loss is the Gaussian pose likelihood plus a
quadratic penalty on the mismatch (defect) between one window's end state and
the next window's start, minus the log of a uniform prior on the parameter
box.  Gradients come from finite differences: a parameter probe needs a full
re-simulation, a window-start probe only its own window, and all probes of
all particles go to the compiled kernel in a single batch.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .dynamics import Mechanism, states_from_observations
from .errors import ConfigError, DimensionMismatch, LimitViolation, NonFiniteLoss
from .params import ParamSpec, nmae
from .se3 import ObservationSet, rotvec_to_matrix

log = logging.getLogger(__name__)


@dataclass
class ShootingConfig:
    window_length: int = 10
    rho: float = 100.0
    sigma_obs: float = 0.01
    learn_x0: bool = True
    rotation_weight: float = 1.0
    substeps: int = 1
    fd_step: float = 1e-6  # forward-difference step used by the optimisers

    def validate(self):
        if int(self.window_length) < 2:
            raise ConfigError("window_length must be >= 2")
        if not self.rho > 0:
            raise ConfigError("rho must be > 0")
        if not self.sigma_obs > 0:
            raise ConfigError("sigma_obs must be > 0")
        if int(self.substeps) < 1:
            raise ConfigError("substeps must be >= 1")
        return self


class ShootingProblem:
    """Loss and gradients for one mechanism, observation set and parameter spec."""

    def __init__(self, mech: Mechanism, spec: ParamSpec, obs: ObservationSet,
                 cfg: Optional[ShootingConfig] = None, controls=None):
        self.cfg = (cfg or ShootingConfig()).validate()
        self.mech = mech
        self.spec = spec
        self.obs = obs
        cm = mech.compile()
        self.cm = cm
        if obs.n_bodies != mech.n_links:
            raise ConfigError(f"{obs.n_bodies} observed bodies for {mech.n_links} links")
        self.T = obs.n_frames
        self.dt = obs.dt
        self.nd = cm.n_dof
        self.P0 = mech.param_vector()
        self.index = np.array([mech.param_index(n) for n in spec.names], dtype=np.int64)
        if controls is None:
            controls = mech.controls_matrix(obs.controls, self.T)
        self.controls = np.ascontiguousarray(controls, dtype=float)
        data = np.stack([b.data for b in obs.bodies], axis=1)  # (T, nb, 6)
        self.obs_R = np.ascontiguousarray(rotvec_to_matrix(data[..., :3]))
        self.obs_p = np.ascontiguousarray(data[..., 3:])
        self.body_link = cm.link_body.copy()
        self.off_R = np.ascontiguousarray(np.stack([l.body_offset.R for l in mech.links]))
        self.off_p = np.ascontiguousarray(np.stack([l.body_offset.p for l in mech.links]))
        W = int(self.cfg.window_length)
        self.first = np.arange(0, self.T, W, dtype=np.int64)
        self.length = np.minimum(W, self.T - self.first).astype(np.int64)
        self.n_windows = len(self.first)
        self.observed_states = states_from_observations(mech, obs, self.cfg.rotation_weight)
        self.log_volume = float(np.sum(np.log(spec.span)))

    # -- parameter handling ------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.spec)

    @property
    def start_shape(self):
        return (self.n_windows, 2 * self.nd)

    def initial_starts(self) -> np.ndarray:
        return self.observed_states[self.first].copy()

    def param_vectors(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        P = np.repeat(self.P0[None], len(theta), axis=0)
        P[:, self.index] = theta
        return P

    def check_limits(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self.spec.contains(theta, tol=1e-12):
            raise LimitViolation(f"parameters outside their limits: {theta}")

    # -- evaluation ----------------------------------------------------------

    def _shoot(self, P_batch, starts, first, length):
        B = len(first)
        data = np.empty(B)
        end = np.empty((B, 2 * self.nd))
        status = np.empty(B, dtype=np.int64)
        K.shoot_windows(*self.cm.tree[:-1], self.cm.gravity, self.cm.n_links,
                        np.ascontiguousarray(P_batch), np.ascontiguousarray(starts),
                        np.ascontiguousarray(first), np.ascontiguousarray(length),
                        self.controls, self.obs_R, self.obs_p, self.body_link, self.off_R, self.off_p,
                        float(self.cfg.rotation_weight), float(self.dt), int(self.cfg.substeps),
                        data, end, status)
        return data, end

    def _windows(self, theta_batch, starts_batch):
        """Per-window data terms and end states for a batch of points."""
        M = len(theta_batch)
        nw = self.n_windows
        P = np.repeat(self.param_vectors(theta_batch), nw, axis=0)
        data, end = self._shoot(P, starts_batch.reshape(M * nw, -1), np.tile(self.first, M),
                                np.tile(self.length, M))
        return data.reshape(M, nw), end.reshape(M, nw, -1)

    def _combine(self, data, end, starts):
        c = self.cfg
        defect = end[:, :-1] - starts[:, 1:]
        d2 = np.sum(defect * defect, axis=-1)
        total = data.sum(axis=1) / (2 * c.sigma_obs ** 2) + c.rho * d2.sum(axis=1) + self.log_volume
        return np.where(np.isfinite(total), total, np.inf), defect

    def loss(self, theta, starts=None):
        """Negative log posterior and the per-window defects."""
        self.check_limits(theta)
        starts = self.initial_starts() if starts is None else np.asarray(starts, dtype=float)
        data, end = self._windows(np.atleast_2d(theta), starts[None])
        total, defect = self._combine(data, end, starts[None])
        return float(total[0]), defect[0]

    def data_term(self, theta, starts=None) -> float:
        starts = self.initial_starts() if starts is None else np.asarray(starts, dtype=float)
        data, _ = self._windows(np.atleast_2d(theta), starts[None])
        return float(data.sum())

    def loss_batch(self, theta_batch, starts_batch) -> np.ndarray:
        data, end = self._windows(np.asarray(theta_batch, dtype=float), np.asarray(starts_batch, dtype=float))
        return self._combine(data, end, starts_batch)[0]

    def parameter_influence(self, theta, starts=None) -> np.ndarray:
        """Largest loss change from moving each parameter alone to either limit.

        A zero entry means the observations cannot constrain that parameter
        at all (for instance the rotational inertia of a body that never
        rotates).
        """
        theta = np.asarray(theta, dtype=float)
        starts = self.initial_starts() if starts is None else np.asarray(starts, dtype=float)
        probes = [theta]
        for i in range(self.dim):
            for edge in (self.spec.lo[i], self.spec.hi[i]):
                x = theta.copy()
                x[i] = edge
                probes.append(x)
        f = self.loss_batch(np.array(probes), np.repeat(starts[None], len(probes), axis=0))
        return np.abs(f[1:] - f[0]).reshape(self.dim, 2).max(axis=1)

    def value_and_grad(self, u_batch, starts_batch, h: Optional[float] = None):
        """Loss and forward-difference gradients for a batch of points.

        ``u_batch`` holds normalised parameters in ``[0, 1]``; probes that
        would leave the box step backwards instead.  Returns ``(loss (M,),
        g_u (M, d), g_starts (M, n_windows, 2 n_dof))``.  Window-start probes
        re-simulate only the probed window; the defect it feeds from the
        previous window is differentiated exactly.
        """
        h = self.cfg.fd_step if h is None else h
        u = np.asarray(u_batch, dtype=float)
        S = np.asarray(starts_batch, dtype=float)
        M, d = u.shape
        nw, ns = self.n_windows, 2 * self.nd
        span = self.spec.span

        # parameter probes: one forward step per coordinate, backwards at the upper bound
        step_u = np.where(u + h <= 1.0, h, -h)
        U = np.repeat(u[:, None, :], d + 1, axis=1)
        for k in range(d):
            U[:, k + 1, k] += step_u[:, k]
        theta = self.spec.denormalize(U.reshape(-1, d))
        S_rep = np.repeat(S[:, None], d + 1, axis=1).reshape(-1, nw, ns)
        data, end = self._windows(theta, S_rep)
        data = data.reshape(M, d + 1, nw)
        end = end.reshape(M, d + 1, nw, ns)
        totals, _ = self._combine(data.reshape(-1, nw), end.reshape(-1, nw, ns), S_rep)
        totals = totals.reshape(M, d + 1)
        f0 = totals[:, 0]
        g_u = (totals[:, 1:] - f0[:, None]) / step_u

        g_S = np.zeros_like(S)
        if self.cfg.learn_x0:
            # window-start probes: window w, state coordinate k
            scale = h * np.maximum(np.abs(S), 1.0)
            probes = np.repeat(S[:, :, None, :], ns, axis=2)  # (M, nw, ns, ns)
            idx = np.arange(ns)
            probes[:, :, idx, idx] += scale
            P = np.repeat(self.param_vectors(self.spec.denormalize(u)), nw * ns, axis=0)
            first = np.tile(np.repeat(self.first, ns), M)
            length = np.tile(np.repeat(self.length, ns), M)
            pdata, pend = self._shoot(P, probes.reshape(-1, ns), first, length)
            pdata = pdata.reshape(M, nw, ns)
            pend = pend.reshape(M, nw, ns, ns)
            c = self.cfg
            base_data = data[:, 0]  # (M, nw)
            base_end = end[:, 0]  # (M, nw, ns)
            # own data term and outgoing defect of window w (the last window has none)
            has_next = np.r_[np.ones(nw - 1), 0.0]
            nxt = np.concatenate([S[:, 1:], S[:, -1:]], axis=1)
            out0 = np.sum((base_end - nxt) ** 2, axis=-1) * has_next
            out1 = np.sum((pend - nxt[:, :, None, :]) ** 2, axis=-1) * has_next[:, None]
            own0 = base_data / (2 * c.sigma_obs ** 2) + c.rho * out0
            own1 = pdata / (2 * c.sigma_obs ** 2) + c.rho * out1
            g_S = (own1 - own0[:, :, None]) / scale
            # incoming defect: d/dS_w of rho * |end_{w-1} - S_w|^2
            g_S[:, 1:] += -2.0 * c.rho * (base_end[:, :-1] - S[:, 1:])
            g_S = np.where(np.isfinite(g_S), g_S, np.nan)
        return f0, g_u, g_S


def shooting_loss(problem: ShootingProblem, theta, window_starts=None):
    """Negative log posterior at physical parameters ``theta`` and the window defects."""
    return problem.loss(theta, window_starts)


def gradient_fd(loss: Callable, x, h: float = 1e-5, lo=None, hi=None) -> np.ndarray:
    """Central finite differences with step ``h * max(|x_i|, 1)``.

    Probes that would leave ``[lo, hi]`` fall back to one-sided differences.
    """
    x = np.asarray(x, dtype=float)
    lo = np.full(x.shape, -np.inf) if lo is None else np.asarray(lo, dtype=float)
    hi = np.full(x.shape, np.inf) if hi is None else np.asarray(hi, dtype=float)
    f0 = None
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * max(abs(x.flat[i]), 1.0)
        up = x.flat[i] + step <= hi.flat[i]
        down = x.flat[i] - step >= lo.flat[i]
        xp = x.copy()
        xm = x.copy()
        if up:
            xp.flat[i] += step
        if down:
            xm.flat[i] -= step
        if up and down:
            fp, fm, denom = loss(xp), loss(xm), 2 * step
        else:
            if f0 is None:
                f0 = loss(x)
                if not np.isfinite(f0):
                    raise NonFiniteLoss("loss is not finite at the evaluation point", i)
            fp, fm, denom = (loss(xp), f0, step) if up else (f0, loss(xm), step)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteLoss(f"non-finite loss when probing coordinate {i}", i)
        g.flat[i] = (fp - fm) / denom
    return g


# --------------------------------------------------------------------------
# optimisers


@dataclass
class ParticleSet:
    """Particles ``x`` (n, D); the first ``kernel_dims`` columns interact through the kernel."""

    x: np.ndarray
    kernel_dims: int
    lo: np.ndarray
    hi: np.ndarray
    log_posteriors: np.ndarray = None
    iteration: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float, ndmin=2)
        n, D = self.x.shape
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (D,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (D,)).copy()
        if self.log_posteriors is None:
            self.log_posteriors = np.full(n, -np.inf)
        if self.m is None:
            self.m = np.zeros_like(self.x)
            self.v = np.zeros_like(self.x)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def rbf_kernel(X):
    """RBF kernel matrix, bandwidth and summed kernel gradients.

    Bandwidth ``h = median squared distance / log(n + 1)``.  Returns
    ``(Kmat, h, repulse)`` with ``repulse[i] = sum_j grad_{x_j} k(x_j, x_i)``.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    diff = X[:, None, :] - X[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    if n > 1:
        med = np.median(sq[np.triu_indices(n, 1)])
        h = med / np.log(n + 1) if med > 0 else 1.0
    else:
        h = 1.0
    Km = np.exp(-sq / h)
    # grad_{x_j} k(x_j, x_i) = -2 (x_j - x_i) k / h
    repulse = (2.0 / h) * np.einsum("ji,ijd->id", Km, diff)
    return Km, h, repulse


def svgd_direction(X, G, kernel_dims=None):
    """Stein variational direction; non-kernel columns follow their own gradient."""
    X = np.asarray(X, dtype=float)
    G = np.asarray(G, dtype=float)
    n, D = X.shape
    d = D if kernel_dims is None else kernel_dims
    phi = G.copy()
    Xk = X[:, :d]
    Km, h, repulse = rbf_kernel(Xk)
    phi[:, :d] = (Km.T @ G[:, :d] + repulse) / n
    return phi


def _separate_duplicates(X, d, lo, hi, seed):
    """Nudge coincident particles apart; the kernel has no gradient between them."""
    n = len(X)
    if n < 2:
        return X
    rng = None
    for i in range(1, n):
        if np.any(np.all(np.abs(X[:i, :d] - X[i, :d]) < 1e-12, axis=1)):
            rng = rng or np.random.default_rng([seed, i])
            span = np.where(np.isfinite(hi[:d] - lo[:d]), hi[:d] - lo[:d], 1.0)
            X[i, :d] = np.clip(X[i, :d] + 1e-6 * span * rng.standard_normal(d), lo[:d], hi[:d])
    return X


def svgd_step(ps: ParticleSet, grad_logp: Callable, lr=0.05, optimizer: str = "adam",
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, seed: int = 0) -> ParticleSet:
    """One projected SVGD update.

    ``grad_logp(X) -> (log_p (n,), G (n, D))``.  With ``optimizer='sgd'`` the
    step is ``x + lr * phi``; with ``'adam'`` phi is preconditioned by Adam
    moments (as an ascent direction).  Particles are clipped to the box.
    """
    X = _separate_duplicates(ps.x.copy(), ps.kernel_dims, ps.lo, ps.hi, seed + ps.iteration)
    logp, G = grad_logp(X)
    G = np.nan_to_num(np.asarray(G, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
    phi = svgd_direction(X, G, ps.kernel_dims)
    t = ps.iteration + 1
    m, v = ps.m, ps.v
    if optimizer == "sgd":
        step = lr * phi
    elif optimizer == "adam":
        m = beta1 * m + (1 - beta1) * phi
        v = beta2 * v + (1 - beta2) * phi * phi
        step = lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    Xn = np.clip(X + step, ps.lo, ps.hi)
    return ParticleSet(Xn, ps.kernel_dims, ps.lo, ps.hi, np.asarray(logp, dtype=float), t, m, v)


def _lr_at(lr, lr_final, t, steps):
    if lr_final is None:
        return lr
    return lr_final + (lr - lr_final) * 0.5 * (1 + np.cos(np.pi * t / max(steps, 1)))


def optimize_adam(grad_loss: Callable, init, steps: int = 500, lr=0.05, lo=None, hi=None,
                  lr_final=None, callback=None):
    """Projected Adam descent; returns ``(best x, loss trace)``.

    ``grad_loss(x) -> (loss, gradient)``.  The best-ever iterate is returned.
    """
    x0 = np.asarray(init, dtype=float)
    lo = -np.inf if lo is None else lo
    hi = np.inf if hi is None else hi
    ps = ParticleSet(x0[None], 0, lo, hi)

    def ascent(X):
        f, g = grad_loss(X[0])
        return np.array([-f]), -np.asarray(g, dtype=float)[None]

    best, best_f, trace = x0.copy(), np.inf, []
    for t in range(int(steps)):
        x_cur = ps.x[0].copy()
        ps = svgd_step(ps, ascent, _lr_at(np.asarray(lr), lr_final, t, steps), "adam")
        f = -ps.log_posteriors[0]
        trace.append(f)
        if f < best_f:
            best_f, best = f, x_cur
        if callback is not None:
            callback(t, x_cur, f)
    return best, np.array(trace)


# --------------------------------------------------------------------------
# estimation driver


@dataclass
class EstimateConfig:
    method: str = "svgd"
    particles: int = 16
    steps: int = 2000
    lr: float = 0.05
    lr_final: Optional[float] = 0.001
    state_lr_scale: float = 0.2
    seed: int = 0
    patience: int = 300
    tol: float = 1e-9
    init: Optional[tuple] = None  # physical starting parameters for every particle
    shooting: ShootingConfig = field(default_factory=ShootingConfig)

    def validate(self):
        if self.method not in ("adam", "svgd"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.particles < 1 or self.steps < 1 or not self.lr > 0:
            raise ConfigError("particles, steps and lr must be positive")
        self.shooting.validate()
        return self


@dataclass
class EstimateResult:
    theta: np.ndarray
    best_loss: float
    particles: np.ndarray
    particle_losses: np.ndarray
    loss_trace: np.ndarray  # (steps, n_particles)
    nmae: Optional[float]
    steps_run: int
    seconds: float
    names: list
    starts: np.ndarray

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "theta": self.theta.tolist(),
            "best_loss": self.best_loss,
            "particles": self.particles.tolist(),
            "particle_losses": self.particle_losses.tolist(),
            "nmae": self.nmae,
            "steps_run": self.steps_run,
            "seconds": self.seconds,
        }


def estimate(obs: ObservationSet, mech: Mechanism, spec: ParamSpec,
             cfg: Optional[EstimateConfig] = None, controls=None, starts=None) -> EstimateResult:
    """Fit the parameters in ``spec`` by Adam (one particle) or SVGD.

    Particles start uniformly in the box unless ``cfg.init`` is given;
    window start states start from the observations unless ``starts``
    (``(n_windows, 2 n_dof)``) is given.
    """
    cfg = (cfg or EstimateConfig()).validate()
    t0 = time.perf_counter()
    prob = ShootingProblem(mech, spec, obs, cfg.shooting, controls)
    n = 1 if cfg.method == "adam" else int(cfg.particles)
    d = prob.dim
    ns = prob.n_windows * 2 * prob.nd
    rng = np.random.default_rng(cfg.seed)
    u0 = rng.uniform(size=(n, d))
    if cfg.init is not None:
        prob.check_limits(cfg.init)
        u0 = np.repeat(spec.normalize(cfg.init).reshape(1, d), n, axis=0)
    S_init = prob.initial_starts() if starts is None else np.asarray(starts, dtype=float)
    if S_init.shape != prob.start_shape:
        raise DimensionMismatch(f"window starts have shape {S_init.shape}, expected {prob.start_shape}")
    S0 = np.repeat(S_init[None], n, axis=0)
    X0 = np.hstack([u0, S0.reshape(n, ns)])
    lo = np.r_[np.zeros(d), np.full(ns, -np.inf)]
    hi = np.r_[np.ones(d), np.full(ns, np.inf)]
    lr = np.r_[np.full(d, cfg.lr), np.full(ns, cfg.lr * cfg.state_lr_scale)]
    lr_final = None if cfg.lr_final is None else lr * (cfg.lr_final / cfg.lr)
    ps = ParticleSet(X0, d, lo, hi)

    last = {}

    def grad_logp(X):
        u = X[:, :d]
        S = X[:, d:].reshape(n, prob.n_windows, -1)
        f, gu, gS = prob.value_and_grad(u, S)
        bad = ~np.isfinite(f)
        G = -np.hstack([gu, gS.reshape(n, ns)])
        G[bad] = 0.0
        last["f"] = f
        last["X"] = X
        return -f, G

    best_f, best_x = np.inf, X0[0].copy()
    trace = []
    stall = 0
    steps_run = 0
    for t in range(int(cfg.steps)):
        ps = svgd_step(ps, grad_logp, _lr_at(lr, lr_final, t, cfg.steps), "adam", seed=cfg.seed)
        steps_run = t + 1
        f = last["f"]
        trace.append(f.copy())
        i = int(np.argmin(f))
        if f[i] < best_f - cfg.tol * max(1.0, abs(best_f)):
            stall = 0
        else:
            stall += 1
        if f[i] < best_f:
            best_f, best_x = float(f[i]), last["X"][i].copy()
        if cfg.patience and stall >= cfg.patience:
            log.info("stopping after %d steps without improvement", stall)
            break
        if t % 100 == 0:
            log.debug("step %d best loss %.6g", t, best_f)
    # evaluate the final particles once more so the returned set is scored
    uF = ps.x[:, :d]
    SF = ps.x[:, d:].reshape(n, prob.n_windows, -1)
    fF = prob.loss_batch(spec.denormalize(uF), SF)
    j = int(np.argmin(fF))
    if fF[j] < best_f:
        best_f, best_x = float(fF[j]), ps.x[j].copy()
    theta = spec.denormalize(best_x[:d])
    truth = spec.ground_truth
    err = nmae(theta, truth, spec) if truth is not None else None
    return EstimateResult(theta, best_f, spec.denormalize(uF), fF, np.array(trace), err, steps_run,
                          time.perf_counter() - t0, spec.names,
                          best_x[d:].reshape(prob.n_windows, -1))
