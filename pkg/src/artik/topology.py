"""Kinematic forests from observed body trajectories.

Every body pair is scored by the cheapest joint model that explains their
relative motion.  A minimum spanning forest over those costs gives the
articulation; each tree is rooted at the body that best attaches to the
world, and its edges are re-expressed parent-to-child.
"""
from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import BodyMismatch
from .joints import (Free, JointFitResult, Prismatic, RansacConfig, Revolute, Static, best_fit,
                     invert_model, model_from_json, model_to_json, project_array)
from .se3 import (BodyTrajectory, ObservationSet, Pose, compose_arrays, inverse_arrays, relative_sequence)

log = logging.getLogger(__name__)


@dataclass
class CostMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, ij):
        return self.values[ij]


def build_cost_matrix(obs: ObservationSet, cfg: Optional[RansacConfig] = None):
    """Pairwise joint costs and the winning fit for each pair ``(i, j)``, ``i < j``.

    Fits are made on the sequence of ``j`` expressed in ``i``.
    """
    cfg = (cfg or RansacConfig()).validate()
    n = obs.n_bodies
    C = np.full((n, n), np.inf)
    memo = {}
    for i in range(n):
        for j in range(i + 1, n):
            fit = best_fit(relative_sequence(obs, i, j), cfg)
            if fit is not None:
                C[i, j] = C[j, i] = fit.cost
                memo[(i, j)] = fit
            log.debug("pair (%d, %d): %s", i, j, "none" if fit is None else f"{fit.type} {fit.cost:.3g}")
    return CostMatrix(C), memo


@dataclass
class Forest:
    components: list  # sorted body ids per tree
    edges: list  # per tree, list of (i, j) with i < j


def minimum_spanning_forest(c: CostMatrix) -> Forest:
    """Prim's algorithm on each component of the finite-cost graph.

    Components are grown from their lowest body id; ties between equal-cost
    edges go to the lexicographically smaller edge.
    """
    C = np.asarray(c.values if isinstance(c, CostMatrix) else c, dtype=float)
    n = C.shape[0]
    seen = np.zeros(n, dtype=bool)
    components, edges = [], []
    for start in range(n):
        if seen[start]:
            continue
        seen[start] = True
        members, tree = [start], []
        heap = [(C[start, j], min(start, j), max(start, j), j) for j in range(n)
                if j != start and np.isfinite(C[start, j])]
        heapq.heapify(heap)
        while heap:
            cost, a, b, node = heapq.heappop(heap)
            if seen[node]:
                continue
            seen[node] = True
            members.append(node)
            tree.append((a, b))
            for j in range(n):
                if not seen[j] and j != node and np.isfinite(C[node, j]):
                    heapq.heappush(heap, (C[node, j], min(node, j), max(node, j), j))
        components.append(sorted(members))
        edges.append(tree)
    return Forest(components, edges)


# --------------------------------------------------------------------------
# trees


@dataclass
class Edge:
    parent: int
    child: int
    model: object
    q_series: np.ndarray
    cost: float = 0.0

    @property
    def type(self) -> str:
        return self.model.type


@dataclass
class FixedBase:
    model: object
    q_series: np.ndarray
    cost: float = 0.0

    floating = False

    @property
    def type(self) -> str:
        return self.model.type


@dataclass
class FloatingBase:
    pose_series: np.ndarray

    floating = True
    type = "free"
    cost = np.inf
    model = Free()


Base = Union[FixedBase, FloatingBase]


@dataclass
class KinematicTree:
    root: int
    edges: list
    base: Base

    @property
    def bodies(self) -> list:
        return [self.root] + [e.child for e in self.edges]

    def parent_of(self, body: int) -> Optional[int]:
        for e in self.edges:
            if e.child == body:
                return e.parent
        return None

    def world_poses(self, base_q=None, q=None) -> dict:
        """World pose arrays ``(T, 6)`` of every body in the tree.

        ``q`` maps child id to its joint series; by default the stored series.
        """
        if isinstance(self.base, FloatingBase):
            root = np.asarray(self.base.pose_series, dtype=float)
        else:
            bq = self.base.q_series if base_q is None else base_q
            root = self.base.model.pose_array(bq)
        out = {self.root: root}
        for e in self.edges:
            series = e.q_series if q is None or e.child not in q else q[e.child]
            out[e.child] = compose_arrays(out[e.parent], e.model.pose_array(series))
        return out

    def paths(self) -> list:
        """Root-to-leaf chains as lists of (parent, child, type)."""
        children = {}
        for e in self.edges:
            children.setdefault(e.parent, []).append(e)
        out = []

        def walk(node, chain):
            kids = sorted(children.get(node, []), key=lambda e: e.child)
            if not kids:
                out.append(chain)
            for e in kids:
                walk(e.child, chain + [(e.parent, e.child, e.type)])
        walk(self.root, [])
        return out


@dataclass
class WorldModel:
    trees: list
    n_bodies: int
    names: list = field(default_factory=list)

    def name(self, body: int) -> str:
        return f"body{body}"

    def tree_of(self, body: int) -> KinematicTree:
        for t in self.trees:
            if body in t.bodies:
                return t
        raise BodyMismatch(f"body {body} not in model")

    def joints(self) -> list:
        """``(label, parent, child, model)`` for every joint, bases first per tree."""
        out = []
        for t in self.trees:
            out.append((f"world->{self.name(t.root)}", -1, t.root, t.base.model))
            for e in t.edges:
                out.append((f"{self.name(e.parent)}->{self.name(e.child)}", e.parent, e.child, e.model))
        return out

    def joint_types(self) -> list:
        return sorted(e.type for t in self.trees for e in t.edges)

    def adjacency(self) -> set:
        return {frozenset((e.parent, e.child)) for t in self.trees for e in t.edges}

    def summary(self) -> str:
        lines = []
        for t in self.trees:
            head = f"world -[{t.base.type}]-> {self.name(t.root)}"
            for chain in t.paths():
                lines.append(head + "".join(f" -[{k}]-> {self.name(c)}" for _, c, k in chain))
        return "\n".join(lines)

    def forward_kinematics(self, joint_q: Optional[dict] = None) -> np.ndarray:
        """World poses ``(n_bodies, T, 6)``; ``joint_q`` maps child id (or ``-1-root`` for a base) to q."""
        T = None
        out = [None] * self.n_bodies
        joint_q = joint_q or {}
        for t in self.trees:
            q = {e.child: joint_q[e.child] for e in t.edges if e.child in joint_q}
            poses = t.world_poses(joint_q.get(-1 - t.root), q)
            for b, arr in poses.items():
                out[b] = arr
                T = len(arr)
        return np.stack([np.broadcast_to(a, (T, 6)) for a in out])

    def to_json(self) -> dict:
        trees = []
        for t in self.trees:
            base = {"type": "floating"} if isinstance(t.base, FloatingBase) else {
                "type": "fixed", "joint": model_to_json(t.base.model), "cost": _finite(t.base.cost),
                "q": np.asarray(t.base.q_series, dtype=float).tolist()}
            trees.append({
                "root": t.root,
                "base": base,
                "edges": [{"parent": e.parent, "child": e.child, "joint": model_to_json(e.model),
                           "cost": _finite(e.cost), "q": np.asarray(e.q_series, dtype=float).tolist()}
                          for e in t.edges],
            })
        return {"n_bodies": self.n_bodies, "names": list(self.names), "trees": trees}

    @classmethod
    def from_json(cls, doc: dict, obs: Optional[ObservationSet] = None) -> "WorldModel":
        """Rebuild a model; joint series are re-extracted when observations are given."""
        trees = []
        for td in doc["trees"]:
            b = td["base"]
            if b["type"] == "floating":
                root_series = obs.body(td["root"]).data if obs is not None else np.zeros((1, 6))
                base = FloatingBase(root_series)
            else:
                base = FixedBase(model_from_json(b["joint"]), np.asarray(b.get("q", [0.0]), dtype=float),
                                 b.get("cost") or 0.0)
            edges = [Edge(e["parent"], e["child"], model_from_json(e["joint"]),
                          np.asarray(e.get("q", [0.0]), dtype=float), e.get("cost") or 0.0)
                     for e in td["edges"]]
            trees.append(KinematicTree(td["root"], edges, base))
        model = cls(trees, int(doc["n_bodies"]), list(doc.get("names", [])))
        if obs is not None:
            extract_joint_positions(model, obs, update=True)
        return model


def _finite(x):
    return float(x) if np.isfinite(x) else None


# --------------------------------------------------------------------------
# Algorithm steps


def _series(model, seq, lam):
    if isinstance(model, Static):
        return np.zeros(len(seq))
    q, _, _ = project_array(model, seq, lam)
    return np.unwrap(q) if isinstance(model, Revolute) else q


def orient_tree(root: int, mst_edges, memo: dict, obs: Optional[ObservationSet] = None,
                lam: float = 1.0) -> list:
    """Breadth-first parent-to-child edges; memoised fits are inverted when needed.

    With observations the joint series are re-projected; otherwise an
    inverted 1-DoF series is negated (its sign is then only approximate
    under axis canonicalisation).
    """
    nbrs = {}
    for a, b in mst_edges:
        nbrs.setdefault(a, []).append(b)
        nbrs.setdefault(b, []).append(a)
    out = []
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(nbrs.get(u, [])):
            if v in seen:
                continue
            seen.add(v)
            queue.append(v)
            fit: JointFitResult = memo[(min(u, v), max(u, v))]
            model = fit.model if u < v else invert_model(fit.model)
            if obs is not None:
                q = _series(model, relative_sequence(obs, u, v), lam)
            else:
                q = fit.q_series if u < v else -fit.q_series
            out.append(Edge(u, v, model, np.asarray(q, dtype=float), fit.cost))
    return out


def attach_to_world(root_traj, cfg: Optional[RansacConfig] = None) -> Base:
    """Best world joint for a root body, or a floating base if none fits."""
    data = root_traj.data if isinstance(root_traj, BodyTrajectory) else np.asarray(root_traj, dtype=float)
    fit = best_fit(data, cfg)
    if fit is None:
        return FloatingBase(np.array(data, copy=True))
    return FixedBase(fit.model, fit.q_series, fit.cost)


def infer_articulation(obs: ObservationSet, cfg: Optional[RansacConfig] = None) -> WorldModel:
    """Joint types, parameters and tree structure of all observed bodies."""
    cfg = (cfg or RansacConfig()).validate()
    C, memo = build_cost_matrix(obs, cfg)
    forest = minimum_spanning_forest(C)
    attach = {b: attach_to_world(obs.body(b), cfg) for b in range(obs.n_bodies)}
    trees = []
    for members, edges in zip(forest.components, forest.edges):
        root = min(members, key=lambda b: (attach[b].cost, b))
        oriented = orient_tree(root, edges, memo, obs, cfg.rotation_weight)
        trees.append(KinematicTree(root, oriented, attach[root]))
    names = [b.name for b in obs.bodies]
    return WorldModel(trees, obs.n_bodies, names)


def extract_joint_positions(model: WorldModel, obs: ObservationSet, lam: float = 1.0,
                            update: bool = False) -> dict:
    """Joint coordinate series keyed by joint label (``parent->child``).

    Static joints give zeros; a floating base has no single coordinate and is
    omitted.  With ``update`` the series stored in the model are replaced.
    """
    if model.n_bodies != obs.n_bodies:
        raise BodyMismatch(f"model has {model.n_bodies} bodies, observations {obs.n_bodies}")
    out = {}
    for t in model.trees:
        label = f"world->{model.name(t.root)}"
        if isinstance(t.base, FloatingBase):
            if update:
                t.base.pose_series = obs.body(t.root).data.copy()
        else:
            q = _series(t.base.model, obs.body(t.root).data, lam)
            out[label] = q
            if update:
                t.base.q_series = q
        for e in t.edges:
            q = _series(e.model, relative_sequence(obs, e.parent, e.child), lam)
            out[f"{model.name(e.parent)}->{model.name(e.child)}"] = q
            if update:
                e.q_series = q
    return out


# --------------------------------------------------------------------------
# simulation skeleton


def _joint_placement(model):
    """Mount pose, joint axis (in the mount frame) and body offset of a joint model."""
    if isinstance(model, Revolute):
        O = model.origin
        c_local = O.R.T @ (model.pivot - O.p)  # pivot in the child body frame at q = 0
        mount = Pose.from_vector(compose_arrays(O.as_vector(), np.r_[0, 0, 0, c_local]))
        return "revolute", mount, O.R.T @ model.axis, Pose(p=-c_local)
    if isinstance(model, Prismatic):
        O = model.origin
        return "prismatic", O, O.R.T @ model.axis, Pose()
    if isinstance(model, Static):
        return "static", model.pose, np.array([0.0, 0.0, 1.0]), Pose()
    return "free", Pose(), np.array([0.0, 0.0, 1.0]), Pose()


def skeleton_from_world(world: WorldModel, template):
    """Simulatable ``Mechanism`` with the inferred joints and template link inertia.

    Link ``k`` of the result is observed body ``k``; its frame sits at the
    joint (pivot for revolute joints) with the body's orientation, and its
    mass, inertia, damping and centre of mass come from ``template.links[k]``
    re-expressed in the new frame.  Free roots get ``Free`` joints.
    """
    from .dynamics import Joint, Link, Mechanism

    n = world.n_bodies
    if template.n_links != n:
        raise BodyMismatch(f"template has {template.n_links} links, model {n} bodies")
    parent = {}
    model_of = {}
    for t in world.trees:
        parent[t.root] = -1
        model_of[t.root] = t.base.model
        for e in t.edges:
            parent[e.child] = e.parent
            model_of[e.child] = e.model
    # links must be ordered parent-before-child; keep body ids via a permutation
    order = []
    placed = set()
    while len(order) < n:
        for b in range(n):
            if b not in placed and (parent[b] < 0 or parent[b] in placed):
                order.append(b)
                placed.add(b)
    if order != list(range(n)):
        raise BodyMismatch("body ids must be numbered parent-first to build a skeleton")

    offsets = {}
    joints = []
    links = []
    for b in range(n):
        kind, mount, axis, offset = _joint_placement(model_of[b])
        offsets[b] = offset
        if parent[b] >= 0:
            # mount is expressed in the parent body frame; move it to the parent link frame
            mount = Pose.from_vector(compose_arrays(offsets[parent[b]].as_vector(), mount.as_vector()))
        tl = template.links[b]
        # template centre of mass -> body frame -> new link frame
        com_body = inverse_arrays(tl.body_offset.as_vector())
        com_body = Pose.from_vector(com_body).apply(tl.com)
        com_new = offset.apply(com_body)
        links.append(Link(tl.name, tl.mass, tl.inertia.copy(), com_new, tl.geometry, offset))
        joints.append(Joint(kind, parent[b], axis, mount, template.joints[b].damping))
    return Mechanism(links, joints, template.gravity.copy(), template.name).validate()


# --------------------------------------------------------------------------
# comparison against a known mechanism


@dataclass
class TopologyCheck:
    types_match: bool
    adjacency_match: bool
    bases_match: bool
    max_axis_error: float  # radians, up to sign, over all 1-DoF joints

    @property
    def exact(self) -> bool:
        return self.types_match and self.adjacency_match and self.bases_match

    def to_json(self) -> dict:
        return {"exact": self.exact, "types_match": self.types_match,
                "adjacency_match": self.adjacency_match, "bases_match": self.bases_match,
                "max_axis_error": self.max_axis_error}


def compare_topology(world: WorldModel, mech) -> TopologyCheck:
    """Joint types, adjacency, base kinds and axis errors against a mechanism.

    Link ``k`` of the mechanism is taken to be observed body ``k``.
    """
    from .dynamics import body_frames, joint_axis_in_parent

    truth_types = sorted(j.type for j in mech.joints if j.parent >= 0)
    truth_adj = {frozenset((j.parent, k)) for k, j in enumerate(mech.joints) if j.parent >= 0}
    truth_roots = {k: ("floating" if j.type == "free" else "fixed")
                   for k, j in enumerate(mech.joints) if j.parent < 0}
    inferred_roots = {t.root: ("floating" if isinstance(t.base, FloatingBase) else "fixed")
                      for t in world.trees}
    types_match = world.joint_types() == truth_types
    adjacency_match = world.adjacency() == truth_adj
    # a tree may be rooted at a different body than the mechanism's; compare the kinds only
    bases_match = sorted(inferred_roots.values()) == sorted(truth_roots.values())

    R, _ = body_frames(mech, np.zeros(mech.n_dof))
    worst = 0.0
    if adjacency_match:
        for t in world.trees:
            if (isinstance(t.base, FixedBase) and t.base.type in ("revolute", "prismatic")
                    and mech.joints[t.root].parent < 0 and mech.joints[t.root].type == t.base.type):
                ref = joint_axis_in_parent(mech, t.root)
                c = abs(float(np.clip(t.base.model.axis @ ref / np.linalg.norm(ref), -1.0, 1.0)))
                worst = max(worst, float(np.arccos(min(1.0, c))))
            for e in t.edges:
                if e.type not in ("revolute", "prismatic"):
                    continue
                if mech.joints[e.child].parent == e.parent:
                    ref = joint_axis_in_parent(mech, e.child)
                else:
                    # the edge runs against the mechanism; re-express its axis
                    ref = R[e.parent].T @ R[e.child] @ joint_axis_in_parent(mech, e.parent)
                c = abs(float(np.clip(e.model.axis @ ref / np.linalg.norm(ref), -1.0, 1.0)))
                worst = max(worst, float(np.arccos(min(1.0, c))))
    else:
        worst = float("nan")
    return TopologyCheck(types_match, adjacency_match, bases_match, worst)
