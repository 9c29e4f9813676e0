"""Joint models and their RANSAC estimation from relative pose sequences.

A 1-DoF joint is a one-parameter family of relative poses.  Revolute and
prismatic models carry an ``origin`` pose (the relative pose at ``q = 0``) in
addition to their axis so that every frame can be reconstructed from ``q``:

    revolute:   T(q) = Rot(axis, pivot, q) * origin
    prismatic:  T(q) = Trans(axis * q) * origin
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DegenerateRotation, DegenerateTranslation
from .se3 import (
    Pose,
    as_pose_array,
    axis_rotation,
    canonical_rotvec,
    first_nonzero_positive,
    matrix_to_rotvec,
    rotation_angle,
    rotvec_to_matrix,
    split,
)

JOINT_TYPES = ("revolute", "prismatic", "static")


@dataclass(eq=False)
class Revolute:
    axis: np.ndarray
    pivot: np.ndarray
    origin: Pose = field(default_factory=Pose)

    type = "revolute"

    def __post_init__(self):
        self.axis = _unit(self.axis)
        self.pivot = np.asarray(self.pivot, dtype=float).reshape(3)

    def pose_array(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        Rq = axis_rotation(self.axis, q)
        R0, p0 = self.origin.R, self.origin.p
        p = self.pivot + (Rq @ (p0 - self.pivot))
        return np.concatenate([matrix_to_rotvec(Rq @ R0), p], axis=-1)


@dataclass(eq=False)
class Prismatic:
    axis: np.ndarray
    origin: Pose = field(default_factory=Pose)

    type = "prismatic"

    def __post_init__(self):
        self.axis = _unit(self.axis)

    def pose_array(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = self.origin.p + q[:, None] * self.axis
        r = np.broadcast_to(self.origin.r, (len(q), 3))
        return np.concatenate([r, p], axis=-1)


@dataclass(eq=False)
class Static:
    pose: Pose

    type = "static"

    def __post_init__(self):
        self.pose = Pose(canonical_rotvec(self.pose.r), self.pose.p)

    def pose_array(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return np.broadcast_to(self.pose.as_vector(), (len(q), 6)).copy()


@dataclass(eq=False)
class Free:
    type = "free"


JointModel = Union[Revolute, Prismatic, Static, Free]


def model_to_json(model: JointModel) -> dict:
    if isinstance(model, Revolute):
        return {"type": "revolute", "axis": model.axis.tolist(), "pivot": model.pivot.tolist(),
                "origin": model.origin.as_vector().tolist()}
    if isinstance(model, Prismatic):
        return {"type": "prismatic", "axis": model.axis.tolist(),
                "origin": model.origin.as_vector().tolist()}
    if isinstance(model, Static):
        return {"type": "static", "pose": model.pose.as_vector().tolist()}
    return {"type": "free"}


def model_from_json(doc: dict) -> JointModel:
    kind = doc.get("type")
    origin = Pose.from_vector(doc["origin"]) if "origin" in doc else Pose()
    if kind == "revolute":
        return Revolute(doc["axis"], doc["pivot"], origin)
    if kind == "prismatic":
        return Prismatic(doc["axis"], origin)
    if kind == "static":
        return Static(Pose.from_vector(doc["pose"]))
    if kind == "free":
        return Free()
    raise ValueError(f"unknown joint type {kind!r}")


@dataclass
class RansacConfig:
    """Hyperparameters of the per-type RANSAC estimators.

    ``min_inliers`` is a count of consecutive frame pairs; ``None`` means half
    of the pairs in the sequence.
    """

    iterations: int = 200
    inlier_threshold: float = 0.01
    min_inliers: Optional[int] = None
    rotation_weight: float = 1.0
    min_motion: float = 1e-6
    seed: int = 0
    threads: int = 1

    def validate(self):
        if int(self.iterations) < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("inlier_threshold", "min_motion"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.rotation_weight < 0:
            raise ConfigError("rotation_weight must be >= 0")
        if self.min_inliers is not None and self.min_inliers < 0:
            raise ConfigError("min_inliers must be >= 0")
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def required_inliers(self, n_frames: int) -> int:
        if self.min_inliers is not None:
            return int(self.min_inliers)
        return int(np.ceil(0.5 * (n_frames - 1)))

    @classmethod
    def for_noise(cls, sigma_p: float, sigma_r: float, **kw) -> "RansacConfig":
        """Threshold sized to the residual of a relative pose under given noise.

        A relative pose mixes the noise of two bodies; its expected residual is
        roughly ``sqrt(2) * (E|n_r| * lambda + E|n_p|)`` with half/chi means.
        Six of those comfortably contains the residual tail.
        """
        lam = kw.get("rotation_weight", 1.0)
        scale = np.sqrt(2.0) * (lam * 1.6 * sigma_r + 1.6 * sigma_p)
        thr = max(cls.inlier_threshold, 6.0 * scale)
        kw.setdefault("inlier_threshold", thr)
        return cls(**kw)


@dataclass
class JointFitResult:
    model: JointModel
    cost: float
    inlier_count: int
    q_series: np.ndarray

    @property
    def type(self) -> str:
        return self.model.type


def _unit(v):
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("axis must be nonzero")
    return v / n


# --------------------------------------------------------------------------
# closed-form two-frame hypotheses


def fit_revolute_pair(t_a: Pose, t_b: Pose, min_motion: float = 1e-6):
    """Axis, pivot and angle increment from two consecutive relative poses."""
    dr = t_b.r - t_a.r
    dp = t_b.p - t_a.p
    n = np.linalg.norm(dr)
    if not n > min_motion:
        raise DegenerateRotation(f"|dr| = {n:.3g} <= {min_motion:.3g}")
    axis = dr / n
    pivot = t_a.p + np.cross(dr, dp) / (n * n)
    return axis, pivot, float(n)


def revolute_from_relative_rotation(t_a: Pose, t_b: Pose, min_motion: float = 1e-6):
    """Exact two-frame revolute hypothesis for any reference orientation.

    With ``T(q) = Rot(s, c, q) T0`` the increment ``R_b R_a^T`` is a pure
    rotation about ``s`` and ``(I - R_b R_a^T) c = p_b - R_b R_a^T p_a``; the
    pivot is the minimum-norm solution.  Unlike the rotation-vector
    difference used by ``fit_revolute_pair``, this does not assume that the
    reference orientation shares the joint axis.
    """
    D = t_b.R @ t_a.R.T
    dr = matrix_to_rotvec(D)
    n = np.linalg.norm(dr)
    if not n > min_motion:
        raise DegenerateRotation(f"relative rotation {n:.3g} <= {min_motion:.3g}")
    axis = dr / n
    pivot, *_ = np.linalg.lstsq(np.eye(3) - D, t_b.p - D @ t_a.p, rcond=None)
    return axis, pivot - axis * (axis @ pivot), float(n)


def fit_prismatic_pair(t_a: Pose, t_b: Pose, min_motion: float = 1e-6):
    """Axis and position from two consecutive relative poses."""
    dp = t_b.p - t_a.p
    n = np.linalg.norm(dp)
    if not n > min_motion:
        raise DegenerateTranslation(f"|dp| = {n:.3g} <= {min_motion:.3g}")
    axis = dp / n
    return axis, float(axis @ t_b.p)


def _chordal_mean(rotvecs, weights=None):
    return canonical_rotvec(Rotation.from_rotvec(rotvecs).mean(weights=weights).as_rotvec())


def fit_static(seq) -> Pose:
    """Constant transform: mean translation and chordal-mean rotation."""
    arr = as_pose_array(seq)
    if len(arr) == 0:
        raise ValueError("fit_static needs at least one pose")
    if np.all(arr == arr[0]):
        return Pose(canonical_rotvec(arr[0, :3]), arr[0, 3:])
    return Pose(_chordal_mean(arr[:, :3]), arr[:, 3:].mean(axis=0))


# --------------------------------------------------------------------------
# projection onto a model


def _twist_angle(R, axis):
    """Signed rotation of ``R`` about ``axis`` (swing-twist decomposition)."""
    quat = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()  # x, y, z, w
    return 2.0 * np.arctan2(quat[:, :3] @ axis, quat[:, 3])


def _revolute_residual(model: Revolute, q, R_t, p_t, lam):
    Rq = axis_rotation(model.axis, q)
    rot = rotation_angle(Rq @ model.origin.R, R_t)
    pos = model.pivot + np.einsum("nij,j->ni", Rq, model.origin.p - model.pivot)
    return lam * rot + np.linalg.norm(pos - p_t, axis=1)


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _revolute_profile(model: Revolute, R_t, p_t, lam):
    """Cheap closed form of the per-frame residual as a function of ``q``.

    With ``M = R_t R0^T`` the trace of ``Rot(q)^T M`` is
    ``a cos q + b sin q + d`` and the position traces a circle, so each
    evaluation is a handful of elementwise operations.  The rotation term
    goes through ``arccos`` and is only used to locate the minimiser.
    """
    s = model.axis
    M = R_t @ model.origin.R.T
    d = np.einsum("i,nij,j->n", s, M, s)
    a = np.trace(M, axis1=1, axis2=2) - d
    Ksk = np.array([[0.0, -s[2], s[1]], [s[2], 0.0, -s[0]], [-s[1], s[0], 0.0]])
    b = np.einsum("ij,nij->n", Ksk, M)
    off = model.origin.p - model.pivot
    along = s * (s @ off)
    perp = off - along
    side = np.cross(s, off)
    base = model.pivot + along - p_t

    def f(q):
        c, sn = np.cos(q), np.sin(q)
        cos_ang = np.clip(0.5 * (a * c + b * sn + d - 1.0), -1.0, 1.0)
        pos = base + c[:, None] * perp + sn[:, None] * side
        return lam * np.arccos(cos_ang) + np.linalg.norm(pos, axis=1)
    return f


def _project_revolute(model: Revolute, arr, lam, iters=30):
    R_t, p_t = split(arr)
    R0 = model.origin.R
    q_rot = _twist_angle(R_t @ R0.T, model.axis)
    s = model.axis
    d0 = model.origin.p - model.pivot
    dt = p_t - model.pivot
    d0 = d0 - s * (s @ d0)
    dt = dt - np.outer(dt @ s, s)
    if lam == 0 or np.linalg.norm(d0) > 1e-9:
        num = np.cross(d0, dt) @ s
        den = dt @ d0
        q_pos = np.arctan2(num, den)
        far = np.linalg.norm(dt, axis=1) < 1e-12
        q_pos = np.where(far, q_rot, q_pos)
    else:
        q_pos = q_rot
    q_pos = q_rot + _wrap(q_pos - q_rot)
    lo = np.minimum(q_rot, q_pos)
    hi = np.maximum(q_rot, q_pos)
    if lam == 0:
        q = q_pos
    elif np.all(hi - lo < 1e-13):
        q = q_rot
    else:
        # the residual is a sum of two terms minimised at q_rot and q_pos; its
        # minimiser on the bracketing interval is found by golden section
        f = _revolute_profile(model, R_t, p_t, lam)
        a, b = lo.copy(), hi.copy()
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc, fd = f(c), f(d)
        for _ in range(iters):
            left = fc < fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            new = np.where(left, b - _GOLDEN * (b - a), a + _GOLDEN * (b - a))
            fn = f(new)
            d, fd, c, fc = (np.where(left, c, new), np.where(left, fc, fn),
                            np.where(left, new, d), np.where(left, fn, fd))
        q = 0.5 * (a + b)
        cand = np.stack([q, q_rot, q_pos])
        res = np.stack([_revolute_residual(model, cq, R_t, p_t, lam) for cq in cand])
        q = cand[np.argmin(res, axis=0), np.arange(len(q))]
        return q, res.min(axis=0)
    res = _revolute_residual(model, q, R_t, p_t, lam)
    return q, res


def project_array(model: JointModel, seq, lam: float = 1.0):
    """Vectorised projection: ``(q, reconstructed (N, 6), residual)``."""
    arr = as_pose_array(seq)
    if isinstance(model, Free):
        raise ValueError("cannot project onto a free joint")
    if isinstance(model, Revolute):
        q, res = _project_revolute(model, arr, lam)
        return q, model.pose_array(q), res
    if isinstance(model, Prismatic):
        q = (arr[:, 3:] - model.origin.p) @ model.axis
        recon = model.pose_array(q)
    else:
        q = np.zeros(len(arr))
        recon = model.pose_array(q)
    R_t, p_t = split(arr)
    R_m, p_m = split(recon)
    res = lam * rotation_angle(R_m, R_t) + np.linalg.norm(p_m - p_t, axis=1)
    return q, recon, res


def project_to_joint(model: JointModel, t: Pose, lam: float = 1.0):
    """Best 1-DoF coordinate for ``t`` under ``model`` and the resulting residual."""
    q, recon, res = project_array(model, [t], lam)
    return float(q[0]), Pose.from_vector(recon[0]), float(res[0])


def model_error(model: JointModel, seq, lam: float = 1.0):
    """Mean per-frame residual and the residual vector."""
    _, _, res = project_array(model, seq, lam)
    return float(np.mean(res)), res


# --------------------------------------------------------------------------
# model construction helpers


def canonical_revolute(axis, pivot, reference: Pose) -> Revolute:
    """Revolute model whose origin is ``reference`` with its twist removed.

    The axis is signed so its first nonzero component is positive and the
    pivot is moved to the point on the axis line closest to the frame origin.
    """
    s = _unit(axis)
    s = s * first_nonzero_positive(s)
    c = np.asarray(pivot, dtype=float)
    c = c - s * (s @ c)
    R = reference.R
    tau = _twist_angle(R, s)[0]
    Rm = axis_rotation(s, -tau)
    origin = Pose(matrix_to_rotvec(Rm @ R), c + Rm @ (reference.p - c))
    return Revolute(s, c, origin)


def canonical_prismatic(axis, rotation, position) -> Prismatic:
    s = _unit(axis)
    s = s * first_nonzero_positive(s)
    p0 = np.asarray(position, dtype=float)
    return Prismatic(s, Pose(canonical_rotvec(rotation), p0 - s * (s @ p0)))


def invert_model(model: JointModel) -> JointModel:
    """Model of the parent pose seen from the child, ``T(q)^-1`` re-parameterised.

    The returned model's coordinate is the negated coordinate of ``model``
    before sign canonicalisation; callers recompute q series by projection.
    """
    if isinstance(model, Static):
        R, p = model.pose.R, model.pose.p
        return Static(Pose(matrix_to_rotvec(R.T), -R.T @ p))
    if isinstance(model, Free):
        return model
    Ro, po = model.origin.R, model.origin.p
    inv_origin = Pose(matrix_to_rotvec(Ro.T), -Ro.T @ po)
    axis = Ro.T @ model.axis
    if isinstance(model, Revolute):
        pivot = Ro.T @ (model.pivot - po)
        return canonical_revolute(axis, pivot, inv_origin)
    return canonical_prismatic(axis, inv_origin.r, inv_origin.p)


# --------------------------------------------------------------------------
# RANSAC


def _hypothesis(kind, arr, t, cfg):
    a = Pose.from_vector(arr[t])
    b = Pose.from_vector(arr[t + 1])
    if kind == "revolute":
        axis, pivot, _ = revolute_from_relative_rotation(a, b, cfg.min_motion)
        return canonical_revolute(axis, pivot, a)
    if kind == "prismatic":
        axis, _ = fit_prismatic_pair(a, b, cfg.min_motion)
        return canonical_prismatic(axis, a.r, a.p)
    return Static(fit_static(arr[t:t + 2]))


def _valid_pairs(kind, arr, cfg):
    n = len(arr) - 1
    if kind == "revolute":
        R = rotvec_to_matrix(arr[:, :3])
        motion = rotation_angle(R[:-1], R[1:])
    elif kind == "prismatic":
        motion = np.linalg.norm(np.diff(arr[:, 3:], axis=0), axis=1)
    else:
        return np.arange(n)
    return np.nonzero(motion > cfg.min_motion)[0]


def _score(model, arr, cfg):
    _, _, res = project_array(model, arr, cfg.rotation_weight)
    pair_res = np.maximum(res[:-1], res[1:])
    inliers = pair_res < cfg.inlier_threshold
    return int(inliers.sum()), float(res.mean()), inliers, pair_res


def _untwisted_origin(axis, pivot, arr):
    """Average of the frames' poses with their rotation about the joint removed."""
    R, p = split(arr)
    tau = _twist_angle(R, axis)
    Rm = axis_rotation(axis, -tau)
    Ro = Rm @ R
    po = pivot + np.einsum("nij,nj->ni", Rm, p - pivot)
    return Pose(_chordal_mean(matrix_to_rotvec(Ro)), po.mean(axis=0))


def _refit(kind, model, arr, inliers, cfg):
    """Re-estimate the model from every frame touched by an inlier pair.

    Revolute: the relative rotations are ``Rot(s, q_t) R0``, so ``s`` is the
    dominant eigenvector of ``B B^T`` with ``B`` the sum of the rotations;
    the pivot solves ``(I - R_t R_u^T) c = p_t - R_t R_u^T p_u`` in least
    squares over widely separated frame pairs.  Prismatic: the axis is the
    principal direction of the positions.  Using all frames instead of
    consecutive pairs keeps the noise on the axis small.
    """
    idx = np.nonzero(inliers)[0]
    frames = np.unique(np.concatenate([idx, idx + 1]))
    sub = arr[frames]
    if kind == "static":
        return Static(fit_static(sub))
    if len(frames) < 3:
        return model
    R, p = split(sub)
    if kind == "prismatic":
        centred = p - p.mean(axis=0)
        _, sv, vt = np.linalg.svd(centred, full_matrices=False)
        if not sv[0] > cfg.min_motion:
            return model
        s = vt[0] * np.sign(vt[0] @ model.axis or 1.0)
        rot = _chordal_mean(sub[:, :3])
        p0 = (p - np.outer(p @ s, s)).mean(axis=0)
        return canonical_prismatic(s, rot, p0)
    B = R.sum(axis=0)
    w, V = np.linalg.eigh(B @ B.T)
    s = V[:, -1]
    if not w[-1] - w[-2] > 1e-12 * len(frames) ** 2:
        return model
    s = s * np.sign(s @ model.axis or 1.0)
    # pair every frame with one half a sequence away: large relative rotations
    n = len(frames)
    half = max(1, n // 2)
    ia = np.arange(n - half)
    ib = ia + half
    D = R[ib] @ np.swapaxes(R[ia], -1, -2)
    A = np.eye(3) - D
    y = p[ib] - np.einsum("nij,nj->ni", D, p[ia])
    c, *_ = np.linalg.lstsq(A.reshape(-1, 3), y.reshape(-1), rcond=None)
    c = c - s * (s @ c)
    return Revolute(s * first_nonzero_positive(s), c, _untwisted_origin(s * first_nonzero_positive(s), c, sub))


def ransac_fit(seq, joint_type: str, cfg: Optional[RansacConfig] = None) -> Optional[JointFitResult]:
    """Robustly fit one joint type to a relative pose sequence.

    Hypotheses are consecutive frame pairs drawn uniformly (with a per-index
    seed so results do not depend on evaluation order).  Returns ``None``
    when no valid hypothesis exists or the best one has fewer than the
    required inlier pairs.
    """
    cfg = (cfg or RansacConfig()).validate()
    if joint_type not in JOINT_TYPES:
        raise ConfigError(f"unknown joint type {joint_type!r}")
    arr = as_pose_array(seq)
    if len(arr) < 2:
        raise ValueError("ransac_fit needs at least two frames")
    valid = _valid_pairs(joint_type, arr, cfg)
    if len(valid) == 0:
        return None

    picks = [valid[np.random.default_rng([cfg.seed, k]).integers(len(valid))]
             for k in range(int(cfg.iterations))]
    unique = sorted(set(int(t) for t in picks))

    def evaluate(t):
        model = _hypothesis(joint_type, arr, t, cfg)
        return t, model, _score(model, arr, cfg)

    if cfg.threads > 1 and len(unique) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            scored = list(pool.map(evaluate, unique))
    else:
        scored = [evaluate(t) for t in unique]

    # ties broken by pair index so the winner is independent of scheduling
    t, model, (count, cost, inliers, pair_res) = min(scored, key=lambda s: (-s[2][0], s[2][1], s[0]))
    if count < cfg.required_inliers(len(arr)) or count == 0:
        return None

    refit = _refit(joint_type, model, arr, inliers, cfg)
    r_count, r_cost, _, _ = _score(refit, arr, cfg)
    if (r_count, -r_cost) >= (count, -cost):
        model, count, cost = refit, r_count, r_cost
    if count < cfg.required_inliers(len(arr)):
        return None
    q, _, res = project_array(model, arr, cfg.rotation_weight)
    if joint_type == "revolute":
        q = np.unwrap(q)
    return JointFitResult(model, float(res.mean()), int(count), q)


def fit_all(seq, cfg: Optional[RansacConfig] = None) -> dict:
    """Run every joint-type estimator; missing types map to ``None``."""
    return {kind: ransac_fit(seq, kind, cfg) for kind in JOINT_TYPES}


def best_fit(seq, cfg: Optional[RansacConfig] = None) -> Optional[JointFitResult]:
    fits = [f for f in fit_all(seq, cfg).values() if f is not None]
    if not fits:
        return None
    order = {k: i for i, k in enumerate(JOINT_TYPES)}
    return min(fits, key=lambda f: (f.cost, order[f.type]))


def reconstruct(model: JointModel, q_series) -> np.ndarray:
    """Relative pose array of ``model`` driven by ``q_series``."""
    return model.pose_array(q_series)
