"""Model-predictive path-integral (MPPI) control on a simulated mechanism."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .dynamics import Mechanism, SimState
from .errors import AllRolloutsDiverged, ConfigError, Diverged, SingularInertia

log = logging.getLogger(__name__)


@dataclass
class MppiConfig:
    samples: int = 200
    horizon: int = 60
    dt: float = 0.05
    beta: float = 1.0
    sigma_u: float = 2.0
    control_limit: float = 10.0
    actuated: tuple = (0,)  # DoF indices receiving control; others get none
    seed: int = 0
    substeps: int = 1
    noise_corr: float = 0.8  # AR(1) coefficient of the exploration noise along the horizon
    keep_nominal: bool = True  # sample 0 replays the nominal sequence unperturbed

    def validate(self):
        if self.samples < 1 or self.horizon < 1:
            raise ConfigError("samples and horizon must be >= 1")
        if not self.beta > 0 or not self.sigma_u > 0 or not self.dt > 0:
            raise ConfigError("beta, sigma_u and dt must be > 0")
        if not 0.0 <= self.noise_corr < 1.0:
            raise ConfigError("noise_corr must lie in [0, 1)")
        if not self.control_limit > 0:
            raise ConfigError("control_limit must be > 0")
        return self

    def limits(self, n_dof):
        hi = np.zeros(n_dof)
        hi[list(self.actuated)] = self.control_limit
        return -hi, hi

    def sigma(self, n_dof):
        s = np.zeros(n_dof)
        s[list(self.actuated)] = self.sigma_u
        return s


@dataclass
class TaskSpec:
    name: str
    initial_state: SimState
    w_upright: float = 1.0
    w_cart: float = 0.1
    w_qd: float = 0.01
    episode_length: int = 200
    cart_dof: int = 0
    pole_dof: int = 1
    # planning cost weights; the reward's squared upright term is nearly flat
    # close to the goal, so the planner uses the unsquared form
    plan_upright: float = 5.0
    plan_cart: float = 0.5
    plan_qd: float = 0.01
    discount: float = 0.9  # per-step weight decay of the planning cost along the horizon

    def __post_init__(self):
        if min(self.w_upright, self.w_cart, self.w_qd, self.plan_upright, self.plan_cart,
               self.plan_qd) < 0:
            raise ConfigError("task weights must be >= 0")

    def planning_cost(self, states):
        """Per-state cost minimised by the controller, ``(...,)``."""
        states = np.asarray(states, dtype=float)
        nd = states.shape[-1] // 2
        qd = states[..., nd:]
        x = states[..., self.cart_dof]
        return (self.plan_upright * (1.0 + np.cos(states[..., self.pole_dof]))
                + self.plan_cart * x * x + self.plan_qd * np.sum(qd * qd, axis=-1))

    def trajectory_cost(self, states):
        """Discounted planning cost summed over the horizon axis of ``(K, H, 2n)``."""
        c = self.planning_cost(states)
        return c @ (self.discount ** np.arange(c.shape[-1]))

    def stage_cost(self, states):
        """Negative log reward of states ``(..., 2 n_dof)``."""
        states = np.asarray(states, dtype=float)
        nd = states.shape[-1] // 2
        theta = states[..., self.pole_dof]
        x = states[..., self.cart_dof]
        qd = states[..., nd:]
        return (self.w_upright * (1.0 + np.cos(theta)) ** 2 + self.w_cart * x * x
                + self.w_qd * np.sum(qd * qd, axis=-1))

    def reward(self, states):
        return np.exp(-self.stage_cost(states))


def swing_up_task(**kw) -> TaskSpec:
    """Pole hanging at rest; the goal is the upright position."""
    return TaskSpec("swing_up", SimState([0.0, 0.0], [0.0, 0.0]), **kw)


def balance_task(**kw) -> TaskSpec:
    """Pole 20 degrees from upright with the cart moving at 0.1 m/s."""
    return TaskSpec("balance", SimState([0.0, np.pi - np.radians(20.0)], [0.1, 0.0]), **kw)


TASKS = {"swing_up": swing_up_task, "balance": balance_task}


def upright_error(theta):
    """Angle between the pole and the upright direction, in ``[0, pi]``."""
    return np.abs((np.asarray(theta) - np.pi + np.pi) % (2 * np.pi) - np.pi)


def importance_weights(costs, beta):
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise AllRolloutsDiverged("every sampled rollout diverged")
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / beta)
    return w / w.sum()


@dataclass
class PlanInfo:
    weights: np.ndarray
    costs: np.ndarray


def _sample_noise(cfg, n_dof, step):
    sig = cfg.sigma(n_dof)
    eps = np.empty((cfg.samples, cfg.horizon, n_dof))
    for k in range(cfg.samples):
        eps[k] = np.random.default_rng([cfg.seed, step, k]).standard_normal((cfg.horizon, n_dof))
    a = cfg.noise_corr
    if a > 0:
        # stationary AR(1): marginal std stays sigma, neighbouring steps correlate
        scale = np.sqrt(1.0 - a * a)
        for t in range(1, cfg.horizon):
            eps[:, t] = a * eps[:, t - 1] + scale * eps[:, t]
    if cfg.keep_nominal:
        eps[0] = 0.0
    return eps * sig


def mppi_plan(mech: Mechanism, params, state: SimState, nominal, cfg: MppiConfig,
              cost_fn: Callable, step: int = 0):
    """One MPPI update.

    ``cost_fn(states (K, H, 2n), controls (K, H, n)) -> (K,)`` scores the
    sampled rollouts.  Returns the clipped first action, the updated and
    shifted nominal sequence, and the importance weights.
    """
    cm = mech.compile()
    nd = cm.n_dof
    nominal = np.asarray(nominal, dtype=float)
    if nominal.shape != (cfg.horizon, nd):
        raise ConfigError(f"nominal must have shape {(cfg.horizon, nd)}, got {nominal.shape}")
    P = mech.params_with(params)
    lo, hi = cfg.limits(nd)
    eps = _sample_noise(cfg, nd, step)
    U = np.clip(nominal[None] + eps, lo, hi)
    states = np.empty((cfg.samples, cfg.horizon, 2 * nd))
    status = np.empty(cfg.samples, dtype=np.int64)
    K.rollout_controls_batch(*cm.tree, P, cm.n_links, state.as_vector(), U, float(cfg.dt),
                             int(cfg.substeps), states, status)
    costs = np.asarray(cost_fn(states, U), dtype=float)
    costs = np.where(status == K.OK, costs, np.inf)
    w = importance_weights(costs, cfg.beta)
    updated = nominal + np.einsum("k,khd->hd", w, U - nominal[None])
    updated = np.clip(updated, lo, hi)
    action = updated[0].copy()
    shifted = np.vstack([updated[1:], updated[-1:]])
    return action, shifted, PlanInfo(w, costs)


@dataclass
class TaskResult:
    rewards: np.ndarray
    mean_reward: float
    states: np.ndarray  # (episode_length + 1, 2 n_dof)
    actions: np.ndarray  # (episode_length, n_dof)

    def swing_up_success(self, task: TaskSpec, dwell: int = 50, tol: float = 0.2) -> bool:
        err = upright_error(self.states[-dwell:, task.pole_dof])
        return bool(np.all(err < tol))

    def balance_success(self, task: TaskSpec) -> bool:
        return bool(np.all(upright_error(self.states[:, task.pole_dof]) < np.pi / 2))

    def success(self, task: TaskSpec) -> bool:
        return self.swing_up_success(task) if task.name == "swing_up" else self.balance_success(task)


def run_task(mech: Mechanism, params, task: TaskSpec, cfg: Optional[MppiConfig] = None,
             true_mech: Optional[Mechanism] = None, true_params=None) -> TaskResult:
    """Closed-loop MPPI: plan on ``(mech, params)``, execute on the true system.

    The true system defaults to the planning model.  Reward ``r_t`` is
    evaluated on the state reached after each executed action.
    """
    cfg = (cfg or MppiConfig()).validate()
    true_mech = true_mech or mech
    P_true = true_mech.params_with(true_params if true_mech is not mech or true_params is not None
                                   else params)
    cm = true_mech.compile()
    nd = cm.n_dof

    def cost_fn(states, U):
        return task.trajectory_cost(states)

    x = task.initial_state
    nominal = np.zeros((cfg.horizon, nd))
    traj = [x.as_vector()]
    actions = []
    buf = np.empty((2, 2 * nd))
    for t in range(task.episode_length):
        a, nominal, _ = mppi_plan(mech, params, x, nominal, cfg, cost_fn, step=t)
        status = K.rollout(*cm.tree, P_true, cm.n_links, x.as_vector(), np.vstack([a, a]),
                           float(cfg.dt), int(cfg.substeps), buf)
        if status == K.DIVERGED:
            raise Diverged("executed system diverged")
        if status == K.SINGULAR:
            raise SingularInertia("executed system has singular inertia")
        x = SimState.from_vector(buf[1])
        traj.append(buf[1].copy())
        actions.append(a)
    states = np.array(traj)
    rewards = task.reward(states[1:])
    return TaskResult(rewards, float(rewards.mean()), states, np.array(actions))


@dataclass
class Sim2SimResult:
    inferred_rewards: np.ndarray
    true_rewards: np.ndarray
    inferred_success: np.ndarray
    true_success: np.ndarray

    def summary(self) -> dict:
        return {
            "inferred_mean": float(self.inferred_rewards.mean()),
            "inferred_std": float(self.inferred_rewards.std()),
            "true_mean": float(self.true_rewards.mean()),
            "true_std": float(self.true_rewards.std()),
            "inferred_success": int(self.inferred_success.sum()),
            "true_success": int(self.true_success.sum()),
            "runs": int(len(self.inferred_success)),
        }


def sim2sim_eval(mech: Mechanism, theta_inferred, theta_true, task: TaskSpec,
                 cfg: Optional[MppiConfig] = None, seeds=range(10),
                 true_mech: Optional[Mechanism] = None) -> Sim2SimResult:
    """Plan on inferred parameters and on the truth, execute both on the truth."""
    cfg = (cfg or MppiConfig()).validate()
    true_mech = true_mech or mech
    inf_r, true_r, inf_s, true_s = [], [], [], []
    for seed in seeds:
        c = MppiConfig(**{**cfg.__dict__, "seed": int(seed)})
        a = run_task(mech, theta_inferred, task, c, true_mech, theta_true)
        b = run_task(true_mech, theta_true, task, c, true_mech, theta_true)
        inf_r.append(a.mean_reward)
        true_r.append(b.mean_reward)
        inf_s.append(a.success(task))
        true_s.append(b.success(task))
    return Sim2SimResult(np.array(inf_r), np.array(true_r), np.array(inf_s), np.array(true_s))
