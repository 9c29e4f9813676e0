"""Built-in scenes: cartpole, coupled pendulum, three-link chain, free body."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import (Joint, Link, Mechanism, NoiseConfig, SimState, generate_observations,
                       rollout)
from .errors import UnknownPreset
from .params import ParamEntry, ParamSpec
from .se3 import Pose

X_AXIS = (1.0, 0.0, 0.0)
Y_AXIS = (0.0, 1.0, 0.0)


def rod_inertia(mass, length, radius=0.02):
    """Diagonal inertia of a solid cylinder along z about its centre."""
    side = mass * (3 * radius ** 2 + length ** 2) / 12.0
    return np.array([side, side, 0.5 * mass * radius ** 2])


def box_inertia(mass, size):
    a, b, c = size
    return mass / 12.0 * np.array([b * b + c * c, a * a + c * c, a * a + b * b])


@dataclass
class Scene:
    name: str
    mechanism: Mechanism
    x0: SimState
    params: ParamSpec
    forcing: Optional[Callable] = None  # forcing(t_array, rng) -> (T, n_dof)
    x0_jitter: float = 0.0
    substeps: int = 1

    def initial_state(self, seed: Optional[int] = None) -> SimState:
        """Default start state, jittered reproducibly when a seed is given."""
        if seed is None or self.x0_jitter == 0.0:
            return SimState(self.x0.q, self.x0.qd)
        rng = np.random.default_rng([seed, 17])
        n = self.x0.q.size
        return SimState(self.x0.q + self.x0_jitter * rng.uniform(-1, 1, n),
                        self.x0.qd + self.x0_jitter * rng.uniform(-1, 1, n))

    def controls(self, T: int, dt: float, seed: Optional[int] = None) -> np.ndarray:
        """Known excitation forces applied during data generation."""
        if self.forcing is None:
            return np.zeros((T, self.mechanism.n_dof))
        rng = np.random.default_rng([0 if seed is None else seed, 29])
        return self.forcing(np.arange(T) * dt, rng)

    def simulate(self, T: int = 200, dt: float = 0.05, seed: Optional[int] = 0,
                 noise: Optional[NoiseConfig] = None):
        """Ground-truth rollout and its pose observations for one seed."""
        res = rollout(self.mechanism, None, self.initial_state(seed), self.controls(T, dt, seed), T, dt,
                      self.substeps)
        noise = noise or NoiseConfig(seed=0 if seed is None else seed)
        obs = generate_observations(res, noise, self.name)
        obs.seed = seed
        return res, obs


def _sled_forcing(n_dof, amp=(2.0, 1.5), freq=(1.3, 3.1)):
    def forcing(t, rng):
        phase = rng.uniform(0, 2 * np.pi, 2)
        u = np.zeros((len(t), n_dof))
        u[:, 0] = amp[0] * np.sin(freq[0] * t + phase[0]) + amp[1] * np.sin(freq[1] * t + phase[1])
        return u
    return forcing


def cartpole() -> Scene:
    cart = Link("cart", 1.0, box_inertia(1.0, (0.4, 0.2, 0.15)), geometry="box")
    pole_inertia = rod_inertia(0.2, 1.0)
    pole = Link("pole", 0.2, pole_inertia, com=(0.0, 0.0, -0.5), geometry="capsule")
    joints = [
        Joint("prismatic", -1, X_AXIS, Pose(p=(0.0, 0.0, 0.5)), damping=0.1),
        Joint("revolute", 0, Y_AXIS, Pose(), damping=0.005),
    ]
    mech = Mechanism([cart, pole], joints, name="cartpole").validate()
    spec = ParamSpec([
        ParamEntry("cart.mass", 0.2, 2.0, 1.0),
        ParamEntry("pole.mass", 0.05, 0.5, 0.2),
        ParamEntry("cart.inertia[1]", 0.002, 0.05, float(cart.inertia[1])),
        ParamEntry("pole.inertia[1]", 0.005, 0.05, float(pole_inertia[1])),
    ])
    return Scene("cartpole", mech, SimState([0.0, 0.6], [0.0, 0.0]), spec,
                 _sled_forcing(2), x0_jitter=0.1)


# length of the lower pendulum giving normal-mode frequencies in ratio 2:1
DOUBLE_PENDULUM_L2 = 0.211


def double_pendulum(l2: float = DOUBLE_PENDULUM_L2) -> Scene:
    # the L-shaped upper link is lumped into one body with an offset centre of mass
    upper = Link("upper", 1.0, np.array([0.08, 0.08, 0.01]), com=(0.0, 0.0, -0.5), geometry="lshape")
    lower = Link("lower", 0.3, rod_inertia(0.3, 2 * l2, 0.01), com=(0.0, 0.0, -l2), geometry="capsule")
    joints = [
        Joint("revolute", -1, Y_AXIS, Pose(p=(0.0, 0.0, 1.5)), damping=0.001),
        Joint("revolute", 0, Y_AXIS, Pose(p=(0.0, 0.0, -0.7)), damping=0.001),
    ]
    mech = Mechanism([upper, lower], joints, name="double_pendulum").validate()
    spec = ParamSpec([
        ParamEntry("upper.mass", 0.2, 2.0, 1.0),
        ParamEntry("lower.mass", 0.05, 1.0, 0.3),
        ParamEntry("upper.inertia[1]", 0.02, 0.2, 0.08),
        ParamEntry("lower.inertia[1]", float(0.2 * lower.inertia[1]), float(5 * lower.inertia[1]),
                   float(lower.inertia[1])),
    ])
    return Scene("double_pendulum", mech, SimState([1.8, -2.2], [0.0, 0.0]), spec, x0_jitter=0.1,
                 substeps=4)


def three_link() -> Scene:
    sled = Link("sled", 0.8, box_inertia(0.8, (0.3, 0.2, 0.1)), geometry="box")
    upper = Link("upper", 0.3, rod_inertia(0.3, 0.5), com=(0.0, 0.0, -0.25), geometry="capsule")
    lower = Link("lower", 0.2, rod_inertia(0.2, 0.4), com=(0.0, 0.0, -0.2), geometry="capsule")
    joints = [
        Joint("prismatic", -1, X_AXIS, Pose(p=(0.0, 0.0, 1.0)), damping=0.1),
        Joint("revolute", 0, Y_AXIS, Pose(), damping=0.003),
        Joint("revolute", 1, Y_AXIS, Pose(p=(0.0, 0.0, -0.5)), damping=0.003),
    ]
    mech = Mechanism([sled, upper, lower], joints, name="three_link").validate()
    spec = ParamSpec([
        ParamEntry("sled.mass", 0.2, 2.0, 0.8),
        ParamEntry("upper.mass", 0.05, 1.0, 0.3),
        ParamEntry("lower.mass", 0.05, 1.0, 0.2),
        ParamEntry("upper.inertia[1]", 0.002, 0.05, float(upper.inertia[1])),
    ])
    return Scene("three_link", mech, SimState([0.0, 0.6, -0.4], [0.0, 0.0, 0.0]), spec,
                 _sled_forcing(3), x0_jitter=0.1, substeps=2)


def free_body() -> Scene:
    block = Link("block", 1.0, np.array([0.02, 0.05, 0.065]), geometry="box")
    mech = Mechanism([block], [Joint("free", -1)], name="free_body").validate()
    spec = ParamSpec([
        ParamEntry("block.inertia[0]", 0.005, 0.05, 0.02),
        ParamEntry("block.inertia[1]", 0.02, 0.08, 0.05),
    ])
    x0 = SimState([0.0, 0.0, 1.0, 0.1, -0.1, 0.2], [0.4, -0.2, 4.0, 0.1, 0.1, 2.0])
    return Scene("free_body", mech, x0, spec, x0_jitter=0.05, substeps=10)


PRESETS = {
    "cartpole": cartpole,
    "double_pendulum": double_pendulum,
    "three_link": three_link,
    "free_body": free_body,
}


def preset(name: str) -> Scene:
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
