"""Rigid transforms stored as axis-angle rotation plus translation.

Poses are kept in the canonical range ``|r| <= pi``.  Batch helpers work on
``(N, 6)`` arrays whose rows are ``[rx, ry, rz, px, py, pz]``; the ``Pose``
dataclass is the scalar surface used by the rest of the API.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.spatial.transform import Rotation

_PI_TOL = 1e-9
_ZERO_TOL = 1e-12


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def first_nonzero_positive(v, tol=_ZERO_TOL):
    """Return +1 or -1 so that ``sign * v`` has its first nonzero entry positive."""
    for c in np.asarray(v, dtype=float):
        if abs(c) > tol:
            return 1.0 if c > 0 else -1.0
    return 1.0


def canonical_rotvec(r):
    """Map rotation vectors to ``|r| <= pi``; at exactly pi pick the sign rule.

    Vectors already inside the ball are returned bit-for-bit, so the map is
    idempotent.
    """
    r = np.array(r, dtype=float)
    flat = r.reshape(-1, 3)
    ang = np.linalg.norm(flat, axis=1)
    long = ang > np.pi + _PI_TOL
    if np.any(long):
        a = ang[long]
        wrapped = np.mod(a + np.pi, 2 * np.pi) - np.pi
        flat[long] *= (wrapped / a)[:, None]
        ang[long] = np.abs(wrapped)
    for k in np.nonzero(np.abs(ang - np.pi) < _PI_TOL)[0]:
        flat[k] *= first_nonzero_positive(flat[k])
    return flat.reshape(r.shape)


def rotvec_to_matrix(r):
    """Rodrigues formula, vectorised over leading dimensions."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = r / safe[..., None]
    K = skew(k)
    s = np.where(small, 0.0, np.sin(theta))[..., None, None]
    c = np.where(small, 0.0, 1.0 - np.cos(theta))[..., None, None]
    R = np.eye(3) + s * K + c * (K @ K)
    if np.any(small):
        # second-order expansion keeps tiny rotations orthogonal to rounding
        Ks = skew(r)
        Rs = np.eye(3) + Ks + 0.5 * (Ks @ Ks)
        R = np.where(small[..., None, None], Rs, R)
    return R


def matrix_to_rotvec(R):
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = canonical_rotvec(Rotation.from_matrix(flat).as_rotvec())
    return out.reshape(R.shape[:-2] + (3,))


def axis_rotation(axis, angle):
    """Rotation matrices about a fixed unit ``axis`` for an array of angles."""
    angle = np.asarray(angle, dtype=float)
    return rotvec_to_matrix(angle[..., None] * np.asarray(axis, dtype=float))


def rotation_angle(Ra, Rb):
    """Angle of ``Ra^T Rb`` computed from both sine and cosine for accuracy."""
    D = np.swapaxes(Ra, -1, -2) @ Rb
    tr = D[..., 0, 0] + D[..., 1, 1] + D[..., 2, 2]
    v = np.stack([D[..., 2, 1] - D[..., 1, 2],
                  D[..., 0, 2] - D[..., 2, 0],
                  D[..., 1, 0] - D[..., 0, 1]], axis=-1)
    return np.arctan2(0.5 * np.linalg.norm(v, axis=-1), 0.5 * (tr - 1.0))


# --------------------------------------------------------------------------
# batch array form


def as_pose_array(seq) -> np.ndarray:
    """Accept a list of ``Pose`` or an ``(N, 6)`` array and return the array."""
    if isinstance(seq, Pose):
        return seq.as_vector()[None]
    if isinstance(seq, np.ndarray):
        arr = np.asarray(seq, dtype=float)
    else:
        seq = list(seq)
        if seq and isinstance(seq[0], Pose):
            arr = np.array([p.as_vector() for p in seq])
        else:
            arr = np.asarray(seq, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 6:
        raise ValueError(f"expected (N, 6) pose array, got shape {arr.shape}")
    return arr


def split(arr):
    """Return rotation matrices and translations of an ``(N, 6)`` pose array."""
    arr = np.asarray(arr, dtype=float)
    return rotvec_to_matrix(arr[..., :3]), arr[..., 3:]


def join(R, p):
    return np.concatenate([matrix_to_rotvec(R), np.asarray(p, dtype=float)], axis=-1)


def compose_arrays(a, b):
    Ra, pa = split(a)
    Rb, pb = split(b)
    return join(Ra @ Rb, pa + np.einsum("...ij,...j->...i", Ra, pb))


def inverse_arrays(a):
    R, p = split(a)
    Rt = np.swapaxes(R, -1, -2)
    return join(Rt, -np.einsum("...ij,...j->...i", Rt, p))


def relative_arrays(t0i, t0j):
    """Per-row transform of frame ``j`` expressed in frame ``i``."""
    Ri, pi_ = split(t0i)
    Rj, pj = split(t0j)
    Rit = np.swapaxes(Ri, -1, -2)
    return join(Rit @ Rj, np.einsum("...ij,...j->...i", Rit, pj - pi_))


# --------------------------------------------------------------------------
# scalar surface


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: axis-angle rotation ``r`` (rad) and translation ``p`` (m)."""

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "r", canonical_rotvec(np.array(self.r, dtype=float).reshape(3)))
        object.__setattr__(self, "p", np.array(self.p, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    @classmethod
    def from_matrix(cls, R, p=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(matrix_to_rotvec(R), p)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.p])

    @property
    def R(self) -> np.ndarray:
        return rotvec_to_matrix(self.r)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def apply(self, x):
        """Map points from this frame into the parent frame."""
        return np.asarray(x, dtype=float) @ self.R.T + self.p

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        return bool(np.allclose(self.r, other.r, atol=atol) and np.allclose(self.p, other.p, atol=atol))

    def __repr__(self):
        r = np.array2string(self.r, precision=6)
        p = np.array2string(self.p, precision=6)
        return f"Pose(r={r}, p={p})"


def canonicalize(a: Pose) -> Pose:
    return Pose(canonical_rotvec(a.r), a.p)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose.from_vector(compose_arrays(a.as_vector(), b.as_vector()))


def inverse(a: Pose) -> Pose:
    return Pose.from_vector(inverse_arrays(a.as_vector()))


def relative_transform(t0i: Pose, t0j: Pose) -> Pose:
    """Transform ``T_i^j`` with ``compose(t0i, T_i^j) == t0j``."""
    return Pose.from_vector(relative_arrays(t0i.as_vector(), t0j.as_vector()))


def rot_z(angle) -> Pose:
    return Pose([0.0, 0.0, angle])


def translation(x, y, z) -> Pose:
    return Pose(np.zeros(3), [x, y, z])


# --------------------------------------------------------------------------
# trajectories


@dataclass
class BodyTrajectory:
    """World poses of one body, one row per frame."""

    body_id: int
    data: np.ndarray
    dt: float
    name: str = ""

    def __post_init__(self):
        self.data = as_pose_array(self.data)
        if not self.name:
            self.name = f"body{self.body_id}"

    @property
    def poses(self) -> list:
        return [Pose.from_vector(row) for row in self.data]

    def __len__(self):
        return len(self.data)


@dataclass
class Controls:
    """Known generalized forces, one column per actuated body's parent joint.

    ``axes`` optionally gives, per column, the direction (in the parent body
    frame) along which the force or torque acts, so a model whose joint axis
    has the opposite sign can map the values onto its own coordinate.
    """

    bodies: list
    values: np.ndarray
    axes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.values), len(self.bodies))
        if self.axes is not None:
            self.axes = np.asarray(self.axes, dtype=float).reshape(len(self.bodies), 3)


@dataclass
class ObservationSet:
    bodies: list
    scene: str = ""
    seed: Optional[int] = None
    controls: Optional[Controls] = None

    def __post_init__(self):
        ids = [b.body_id for b in self.bodies]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"body ids must be unique and contiguous from 0, got {ids}")
        self.bodies = sorted(self.bodies, key=lambda b: b.body_id)
        lengths = {len(b) for b in self.bodies}
        if len(lengths) > 1:
            raise ValueError(f"trajectories differ in length: {sorted(lengths)}")
        if self.bodies:
            if self.n_frames < 2:
                raise ValueError("trajectories need at least 2 frames")
            dts = {b.dt for b in self.bodies}
            if len(dts) > 1 or min(dts) <= 0:
                raise ValueError(f"inconsistent or non-positive dt: {sorted(dts)}")

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def n_frames(self) -> int:
        return len(self.bodies[0]) if self.bodies else 0

    @property
    def dt(self) -> float:
        return self.bodies[0].dt

    def body(self, body_id: int) -> BodyTrajectory:
        return self.bodies[body_id]

    def transformed(self, world: Pose) -> "ObservationSet":
        """Left-multiply every trajectory by one fixed world transform."""
        w = np.broadcast_to(world.as_vector(), (self.n_frames, 6))
        bodies = [BodyTrajectory(b.body_id, compose_arrays(w, b.data), b.dt, b.name) for b in self.bodies]
        return ObservationSet(bodies, self.scene, self.seed, self.controls)

    def to_json(self) -> dict:
        doc = {
            "dt": float(self.dt),
            "bodies": [
                {"id": b.body_id, "name": b.name, "poses": b.data.tolist()} for b in self.bodies
            ],
            "seed": self.seed,
        }
        if self.scene:
            doc["scene"] = self.scene
        if self.controls is not None:
            doc["controls"] = {
                "bodies": list(self.controls.bodies),
                "values": self.controls.values.tolist(),
            }
            if self.controls.axes is not None:
                doc["controls"]["axes"] = self.controls.axes.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ObservationSet":
        dt = float(doc["dt"])
        bodies = [
            BodyTrajectory(int(b["id"]), np.asarray(b["poses"], dtype=float), dt, b.get("name", ""))
            for b in doc["bodies"]
        ]
        controls = None
        if doc.get("controls") is not None:
            c = doc["controls"]
            controls = Controls([int(i) for i in c["bodies"]], np.asarray(c["values"], dtype=float),
                                c.get("axes"))
        return cls(bodies, doc.get("scene", ""), doc.get("seed"), controls)


def world_frame_sequence(poses: Iterable[Pose]) -> np.ndarray:
    return as_pose_array(list(poses))


def relative_sequence(obs: ObservationSet, i: int, j: int) -> np.ndarray:
    """Relative transform sequence ``T_i^j`` for bodies ``i`` and ``j``."""
    return relative_arrays(obs.body(i).data, obs.body(j).data)


__all__ = [
    "Pose", "BodyTrajectory", "ObservationSet", "Controls",
    "compose", "inverse", "relative_transform", "canonicalize",
    "compose_arrays", "inverse_arrays", "relative_arrays", "relative_sequence",
    "rotvec_to_matrix", "matrix_to_rotvec", "axis_rotation", "rotation_angle",
    "canonical_rotvec", "skew", "rot_z", "translation", "as_pose_array",
]
