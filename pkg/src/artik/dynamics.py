"""Articulated rigid-body mechanisms: kinematics, dynamics and simulation.

A ``Mechanism`` is a list of links, each attached to its parent by one joint
(``joints[i]`` moves ``links[i]``).  The child link frame is

    parent_frame * joint.mount * J(q)

with ``J`` a rotation about ``joint.axis`` (revolute) or a translation along
it (prismatic).  A ``free`` joint makes its link a floating base; it is
expanded into three prismatic and three revolute virtual joints (intrinsic
x-y-z order) with massless intermediate bodies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatch, Diverged, SingularInertia
from .se3 import (BodyTrajectory, Controls, ObservationSet, Pose, matrix_to_rotvec,
                  rotvec_to_matrix)

log = logging.getLogger(__name__)

GRAVITY = (0.0, 0.0, -9.81)
_TYPE_CODE = {"static": K.FIXED, "revolute": K.REVOLUTE, "prismatic": K.PRISMATIC}


@dataclass
class Link:
    name: str
    mass: float
    inertia: np.ndarray
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    geometry: str = "box"
    body_offset: Pose = field(default_factory=Pose)

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3)
        self.com = np.asarray(self.com, dtype=float).reshape(3)


@dataclass
class Joint:
    type: str
    parent: int
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    mount: Pose = field(default_factory=Pose)
    damping: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        self.axis = a / np.linalg.norm(a)


@dataclass
class CompiledModel:
    parent: np.ndarray
    jtype: np.ndarray
    dof: np.ndarray
    axis: np.ndarray
    mount_R: np.ndarray
    mount_p: np.ndarray
    slot: np.ndarray
    gravity: np.ndarray
    n_links: int
    n_dof: int
    link_body: np.ndarray  # real link -> compiled body index
    link_dof: np.ndarray  # real link -> dof of its joint (-1 static, first of six if free)

    @property
    def tree(self):
        return (self.parent, self.jtype, self.dof, self.axis, self.mount_R, self.mount_p,
                self.slot, self.gravity)


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1).copy()
        self.qd = np.asarray(self.qd, dtype=float).reshape(-1).copy()
        if self.q.shape != self.qd.shape:
            raise DimensionMismatch(f"q has {self.q.size} entries, qd has {self.qd.size}")

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n], x[n:])

    def as_vector(self):
        return np.concatenate([self.q, self.qd])


@dataclass
class Mechanism:
    links: list
    joints: list
    gravity: np.ndarray = field(default_factory=lambda: np.array(GRAVITY))
    name: str = ""

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        self._compiled = None

    # -- structure ---------------------------------------------------------

    @property
    def base(self) -> str:
        return "floating" if any(j.type == "free" for j in self.joints) else "fixed"

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_dof(self) -> int:
        return self.compile().n_dof

    def validate(self):
        if len(self.links) != len(self.joints):
            raise ValueError("one joint per link required")
        for i, (link, joint) in enumerate(zip(self.links, self.joints)):
            if not link.mass > 0:
                raise ValueError(f"{link.name}: mass must be positive")
            I = link.inertia
            if np.any(I <= 0):
                raise ValueError(f"{link.name}: inertia must be positive")
            if I[0] > I[1] + I[2] + 1e-12 or I[1] > I[0] + I[2] + 1e-12 or I[2] > I[0] + I[1] + 1e-12:
                raise ValueError(f"{link.name}: inertia violates the triangle inequality")
            if not joint.parent < i:
                raise ValueError(f"joint {i}: parent {joint.parent} must precede its child")
            if joint.type not in ("revolute", "prismatic", "static", "free"):
                raise ValueError(f"joint {i}: unknown type {joint.type!r}")
            if joint.type == "free" and joint.parent != -1:
                raise ValueError("free joints attach to the world only")
        return self

    def compile(self) -> CompiledModel:
        if self._compiled is not None:
            return self._compiled
        parent, jtype, axis, mR, mp, slot = [], [], [], [], [], []
        link_body = np.zeros(self.n_links, dtype=np.int64)
        link_dof = np.full(self.n_links, -1, dtype=np.int64)
        eye = np.eye(3)
        for k, (link, joint) in enumerate(zip(self.links, self.joints)):
            par = -1 if joint.parent < 0 else int(link_body[joint.parent])
            if joint.type == "free":
                for v in range(6):
                    parent.append(par if v == 0 else len(parent) - 1)
                    jtype.append(K.PRISMATIC if v < 3 else K.REVOLUTE)
                    axis.append(eye[v % 3])
                    mount = joint.mount if v == 0 else Pose()
                    mR.append(mount.R)
                    mp.append(mount.p)
                    slot.append(-1)
                par = len(parent) - 1
                parent.append(par)
                jtype.append(K.FIXED)
                axis.append(eye[2])
                mR.append(eye)
                mp.append(np.zeros(3))
            else:
                parent.append(par)
                jtype.append(_TYPE_CODE[joint.type])
                axis.append(joint.axis)
                mR.append(joint.mount.R)
                mp.append(joint.mount.p)
            slot.append(k)
            link_body[k] = len(parent) - 1
        dof = np.full(len(parent), -1, dtype=np.int64)
        n_dof = 0
        for i, t in enumerate(jtype):
            if t != K.FIXED:
                dof[i] = n_dof
                n_dof += 1
        for k, joint in enumerate(self.joints):
            b = link_body[k]
            if joint.type == "free":
                link_dof[k] = dof[b - 6]
            elif joint.type != "static":
                link_dof[k] = dof[b]
        self._compiled = CompiledModel(
            np.array(parent, dtype=np.int64), np.array(jtype, dtype=np.int64), dof,
            np.array(axis, dtype=float), np.array(mR, dtype=float), np.array(mp, dtype=float),
            np.array(slot, dtype=np.int64), self.gravity.copy(), self.n_links, n_dof,
            link_body, link_dof)
        return self._compiled

    def dof_names(self) -> list:
        names = []
        for link, joint in zip(self.links, self.joints):
            if joint.type == "free":
                names += [f"{link.name}.{c}" for c in ("x", "y", "z", "rx", "ry", "rz")]
            elif joint.type != "static":
                names.append(f"{link.name}.q")
        return names

    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(name)

    # -- dynamic parameters ------------------------------------------------

    def param_vector(self) -> np.ndarray:
        cm = self.compile()
        P = np.zeros(7 * self.n_links + cm.n_dof)
        for k, link in enumerate(self.links):
            P[7 * k] = link.mass
            P[7 * k + 1:7 * k + 4] = link.com
            P[7 * k + 4:7 * k + 7] = link.inertia
            if cm.link_dof[k] >= 0 and self.joints[k].type != "free":
                P[7 * self.n_links + cm.link_dof[k]] = self.joints[k].damping
        return P

    def param_index(self, name: str) -> int:
        """Index into ``param_vector`` for ``link.mass``, ``link.com[i]``,
        ``link.inertia[i]`` or ``link.damping``."""
        link_name, _, attr = name.partition(".")
        k = self.link_index(link_name)
        comp = 0
        if "[" in attr:
            attr, _, rest = attr.partition("[")
            comp = int(rest.rstrip("]"))
        if attr == "mass":
            return 7 * k
        if attr == "com":
            return 7 * k + 1 + comp
        if attr == "inertia":
            return 7 * k + 4 + comp
        if attr == "damping":
            d = self.compile().link_dof[k]
            if d < 0:
                raise KeyError(f"{link_name} has no damped joint")
            return 7 * self.n_links + d
        raise KeyError(name)

    def params_with(self, overrides=None, base=None) -> np.ndarray:
        """Parameter vector with named overrides applied (dict or full vector)."""
        P = self.param_vector() if base is None else np.array(base, dtype=float)
        if overrides is None:
            return P
        if isinstance(overrides, dict):
            for name, value in overrides.items():
                P[self.param_index(name)] = value
            return P
        arr = np.asarray(overrides, dtype=float)
        if arr.shape != P.shape:
            raise DimensionMismatch(f"parameter vector has {arr.size} entries, expected {P.size}")
        return arr.copy()

    def with_params(self, overrides) -> "Mechanism":
        """Copy of the mechanism with named dynamic parameters replaced."""
        P = self.params_with(overrides)
        links = []
        for k, link in enumerate(self.links):
            links.append(replace(link, mass=P[7 * k], com=P[7 * k + 1:7 * k + 4].copy(),
                                 inertia=P[7 * k + 4:7 * k + 7].copy()))
        joints = list(self.joints)
        cm = self.compile()
        for k, j in enumerate(joints):
            if cm.link_dof[k] >= 0 and j.type != "free":
                joints[k] = replace(j, damping=float(P[7 * self.n_links + cm.link_dof[k]]))
        return Mechanism(links, joints, self.gravity.copy(), self.name)

    def undamped(self) -> "Mechanism":
        joints = [replace(j, damping=0.0) for j in self.joints]
        return Mechanism(list(self.links), joints, self.gravity.copy(), self.name)

    # -- conversions -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "gravity": self.gravity.tolist(),
            "links": [{"name": l.name, "mass": float(l.mass), "inertia": l.inertia.tolist(),
                       "com": l.com.tolist(), "geometry": l.geometry,
                       "body_offset": l.body_offset.as_vector().tolist()} for l in self.links],
            "joints": [{"type": j.type, "parent": int(j.parent), "axis": j.axis.tolist(),
                        "mount": j.mount.as_vector().tolist(), "damping": float(j.damping)}
                       for j in self.joints],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Mechanism":
        links = [Link(d["name"], float(d["mass"]), d["inertia"], d.get("com", (0.0, 0.0, 0.0)),
                      d.get("geometry", "box"), Pose.from_vector(d.get("body_offset", np.zeros(6))))
                 for d in doc["links"]]
        joints = [Joint(d["type"], int(d["parent"]), d.get("axis", (0.0, 0.0, 1.0)),
                        Pose.from_vector(d.get("mount", np.zeros(6))), float(d.get("damping", 0.0)))
                  for d in doc["joints"]]
        return cls(links, joints, doc.get("gravity", GRAVITY), doc.get("name", "")).validate()

    def controls_matrix(self, controls: Optional[Controls], T: int) -> np.ndarray:
        """Dense ``(T, n_dof)`` generalized forces from per-body control columns."""
        out = np.zeros((T, self.n_dof))
        if controls is None:
            return out
        cm = self.compile()
        for col, body in enumerate(controls.bodies):
            if not 0 <= body < self.n_links:
                raise DimensionMismatch(f"control column for unknown body {body}")
            d = cm.link_dof[body]
            if d < 0 or self.joints[body].type == "free":
                raise DimensionMismatch(f"body {body} has no actuated joint")
            sign = 1.0
            if controls.axes is not None:
                sign = float(np.sign(controls.axes[col] @ joint_axis_in_parent(self, body))) or 1.0
            out[:, d] = sign * controls.values[:T, col]
        return out


# --------------------------------------------------------------------------
# kinematics and dynamics


def _check_dim(mech, name, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != mech.n_dof:
        raise DimensionMismatch(f"{name} has {x.size} entries, mechanism has {mech.n_dof} DoF")
    return x


def _world_frames(mech, q):
    cm = mech.compile()
    n = cm.parent.shape[0]
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    K.fk(cm.parent, cm.jtype, cm.dof, cm.axis, cm.mount_R, cm.mount_p, q, R, p)
    return R[cm.link_body], p[cm.link_body]


def body_frames(mech: Mechanism, q):
    """World rotation matrices and positions of observed body frames."""
    q = _check_dim(mech, "q", q)
    R, p = _world_frames(mech, q)
    for k, link in enumerate(mech.links):
        off = link.body_offset
        if np.any(off.r) or np.any(off.p):
            p[k] = p[k] + R[k] @ off.p
            R[k] = R[k] @ off.R
    return R, p


def forward_kinematics(mech: Mechanism, q) -> list:
    """World pose of every link's body frame."""
    R, p = body_frames(mech, q)
    r = matrix_to_rotvec(R)
    return [Pose(r[k], p[k]) for k in range(mech.n_links)]


def forward_dynamics(mech: Mechanism, state: SimState, tau=None, params=None) -> np.ndarray:
    """Joint accelerations from the articulated-body algorithm."""
    cm = mech.compile()
    q = _check_dim(mech, "q", state.q)
    qd = _check_dim(mech, "qd", state.qd)
    tau = np.zeros(cm.n_dof) if tau is None else _check_dim(mech, "tau", tau)
    P = mech.params_with(params)
    qdd = np.zeros(cm.n_dof)
    status = K.forward_dynamics(*cm.tree, P, cm.n_links, q, qd, tau, qdd)
    if status == K.SINGULAR:
        raise SingularInertia("articulated inertia is not positive definite")
    return qdd


def step(mech: Mechanism, state: SimState, tau, dt: float, params=None, substeps: int = 1) -> SimState:
    """Semi-implicit Euler: ``qd += qdd * h`` then ``q += qd * h``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    res = rollout(mech, params, state, np.vstack([np.asarray(tau, dtype=float).reshape(1, -1)] * 2),
                  2, dt, substeps)
    return SimState.from_vector(res.states[1])


@dataclass
class RolloutResult:
    states: np.ndarray  # (T, 2 * n_dof)
    poses: np.ndarray  # (T, n_links, 6) body-frame world poses
    controls: np.ndarray  # (T, n_dof)
    dt: float
    mechanism: Mechanism

    @property
    def q(self):
        return self.states[:, :self.states.shape[1] // 2]

    @property
    def qd(self):
        return self.states[:, self.states.shape[1] // 2:]


def body_pose_series(mech: Mechanism, states) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    nd = mech.n_dof
    T = len(states)
    Rs = np.empty((T, mech.n_links, 3, 3))
    ps = np.empty((T, mech.n_links, 3))
    for t in range(T):
        Rs[t], ps[t] = body_frames(mech, states[t, :nd])
    if T == 0:
        return np.zeros((0, mech.n_links, 6))
    return np.concatenate([matrix_to_rotvec(Rs), ps], axis=-1)


def rollout(mech: Mechanism, params_override, x0, controls, T: int, dt: float,
            substeps: int = 1) -> RolloutResult:
    """Simulate ``T`` frames; frame 0 is ``x0`` and ``controls[t]`` drives t -> t+1.

    Raises ``Diverged`` when a coordinate exceeds 1e6 in magnitude and
    ``SingularInertia`` when the parameters make the dynamics ill-posed.
    """
    cm = mech.compile()
    x0 = x0.as_vector() if isinstance(x0, SimState) else np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != 2 * cm.n_dof:
        raise DimensionMismatch(f"x0 has {x0.size} entries, expected {2 * cm.n_dof}")
    if controls is None:
        controls = np.zeros((T, cm.n_dof))
    controls = np.asarray(controls, dtype=float).reshape(-1, cm.n_dof)
    if len(controls) < T:
        raise DimensionMismatch(f"{len(controls)} controls for {T} frames")
    P = mech.params_with(params_override)
    states = np.zeros((T, 2 * cm.n_dof))
    status = K.rollout(*cm.tree, P, cm.n_links, x0, np.ascontiguousarray(controls[:T]), float(dt),
                       int(substeps), states)
    if status == K.DIVERGED:
        raise Diverged("rollout exceeded the divergence limit")
    if status == K.SINGULAR:
        raise SingularInertia("articulated inertia is not positive definite")
    return RolloutResult(states, body_pose_series(mech, states), controls[:T].copy(), float(dt), mech)


def mass_matrix(mech: Mechanism, q, params=None) -> np.ndarray:
    """Joint-space inertia, recovered column by column from unit torques at rest."""
    cm = mech.compile()
    q = _check_dim(mech, "q", q)
    P = mech.params_with(params)
    nd = cm.n_dof
    zero = np.zeros(nd)
    base = np.zeros(nd)
    K.forward_dynamics(*cm.tree, P, cm.n_links, q, zero, zero, base)
    Minv = np.zeros((nd, nd))
    col = np.zeros(nd)
    for k in range(nd):
        e = np.zeros(nd)
        e[k] = 1.0
        K.forward_dynamics(*cm.tree, P, cm.n_links, q, zero, e, col)
        Minv[:, k] = col - base
    return np.linalg.inv(Minv)


def total_energy(mech: Mechanism, state: SimState, params=None) -> float:
    """Kinetic plus gravitational potential energy."""
    mech_p = mech if params is None else mech.with_params(params)
    M = mass_matrix(mech_p, state.q)
    kinetic = 0.5 * state.qd @ M @ state.qd
    R, p = _world_frames(mech_p, state.q)
    potential = 0.0
    for k, link in enumerate(mech_p.links):
        com = p[k] + R[k] @ link.com
        potential -= link.mass * (mech_p.gravity @ com)
    return float(kinetic + potential)


# --------------------------------------------------------------------------
# synthetic observations


def joint_axis_in_parent(mech: Mechanism, k: int) -> np.ndarray:
    """Axis of the joint moving link ``k``, in its parent's body frame."""
    joint = mech.joints[k]
    axis = joint.mount.R @ joint.axis
    if joint.parent >= 0:
        axis = mech.links[joint.parent].body_offset.R.T @ axis
    return axis


@dataclass
class NoiseConfig:
    sigma_p: float = 0.0
    sigma_r: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_p < 0 or self.sigma_r < 0:
            raise ValueError("noise scales must be non-negative")


def perturb_poses(poses, noise: NoiseConfig) -> np.ndarray:
    """Gaussian translation noise and isotropic random-axis rotation noise."""
    poses = np.asarray(poses, dtype=float)
    flat = poses.reshape(-1, 6)
    rng = np.random.default_rng(noise.seed)
    dp = rng.normal(0.0, 1.0, size=(len(flat), 3)) * noise.sigma_p
    direction = rng.normal(size=(len(flat), 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    angle = np.abs(rng.normal(0.0, 1.0, size=len(flat))) * noise.sigma_r
    out = flat.copy()
    if noise.sigma_r > 0:
        Rn = rotvec_to_matrix(direction * angle[:, None])
        out[:, :3] = matrix_to_rotvec(Rn @ rotvec_to_matrix(flat[:, :3]))
    out[:, 3:] += dp
    return out.reshape(poses.shape)


def generate_observations(result: RolloutResult, noise: Optional[NoiseConfig] = None,
                          scene: str = "", actuated=None) -> ObservationSet:
    """Pose observations of every link, optionally corrupted by noise.

    ``actuated`` lists body ids whose joint forces are recorded as known
    controls; by default every body whose control column is nonzero.
    """
    noise = noise or NoiseConfig()
    mech = result.mechanism
    poses = result.poses
    if noise.sigma_p > 0 or noise.sigma_r > 0:
        poses = perturb_poses(poses, noise)
    bodies = [BodyTrajectory(k, poses[:, k], result.dt, link.name) for k, link in enumerate(mech.links)]
    cm = mech.compile()
    if actuated is None:
        actuated = [k for k in range(mech.n_links)
                    if cm.link_dof[k] >= 0 and mech.joints[k].type != "free"
                    and np.any(result.controls[:, cm.link_dof[k]] != 0)]
    controls = None
    if actuated:
        values = np.stack([result.controls[:, cm.link_dof[k]] for k in actuated], axis=1)
        controls = Controls(list(actuated), values, [joint_axis_in_parent(mech, k) for k in actuated])
    return ObservationSet(bodies, scene or mech.name, noise.seed, controls)


# --------------------------------------------------------------------------
# inverse kinematics from observed body poses


def joint_models(mech: Mechanism) -> list:
    """Relative-pose model of every joint, expressed between observed body frames.

    Entry ``k`` maps the parent's body frame (the world for roots) to link
    ``k``'s body frame; its coordinate is the mechanism's own joint
    coordinate, so projecting observations gives ``q`` directly.
    """
    from .joints import Free, Prismatic, Revolute, Static
    from .se3 import compose_arrays, inverse_arrays

    out = []
    for k, (link, joint) in enumerate(zip(mech.links, mech.joints)):
        A = joint.mount.as_vector()
        if joint.parent >= 0:
            A = compose_arrays(inverse_arrays(mech.links[joint.parent].body_offset.as_vector()), A)
        A = Pose.from_vector(A)
        origin = Pose.from_vector(compose_arrays(A.as_vector(), link.body_offset.as_vector()))
        if joint.type == "revolute":
            out.append(Revolute(A.R @ joint.axis, A.p, origin))
        elif joint.type == "prismatic":
            out.append(Prismatic(A.R @ joint.axis, origin))
        elif joint.type == "static":
            out.append(Static(origin))
        else:
            out.append(Free())
    return out


def states_from_observations(mech: Mechanism, obs: ObservationSet, lam: float = 1.0) -> np.ndarray:
    """Joint positions by projection and velocities by central differences, ``(T, 2 n_dof)``."""
    from scipy.spatial.transform import Rotation

    from .joints import Free, Revolute, Static, project_array
    from .se3 import compose_arrays, inverse_arrays, relative_arrays

    if obs.n_bodies != mech.n_links:
        raise DimensionMismatch(f"{obs.n_bodies} observed bodies for {mech.n_links} links")
    cm = mech.compile()
    T = obs.n_frames
    q = np.zeros((T, cm.n_dof))
    for k, model in enumerate(joint_models(mech)):
        data = obs.body(k).data
        parent = mech.joints[k].parent
        d = cm.link_dof[k]
        if isinstance(model, Free):
            link = compose_arrays(data, inverse_arrays(np.broadcast_to(
                mech.links[k].body_offset.as_vector(), data.shape)))
            local = relative_arrays(np.broadcast_to(mech.joints[k].mount.as_vector(), data.shape), link)
            q[:, d:d + 3] = local[:, 3:]
            q[:, d + 3:d + 6] = np.unwrap(Rotation.from_rotvec(local[:, :3]).as_euler("XYZ"), axis=0)
            continue
        if isinstance(model, Static):
            continue
        seq = data if parent < 0 else relative_arrays(obs.body(parent).data, data)
        qk, _, _ = project_array(model, seq, lam)
        q[:, d] = np.unwrap(qk) if isinstance(model, Revolute) else qk
    qd = np.gradient(q, obs.dt, axis=0)
    return np.hstack([q, qd])
