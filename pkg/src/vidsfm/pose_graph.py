"""Keyframe pose graph and pose-only bundle adjustment on SE(3).

Vertices are keyframes, edges carry relative-pose measurements
Z_ij = P_j * P_i^-1 (world-to-camera convention) with diagonal information
weights: sequential edges at offset tau weigh 1/tau, co-visible edges weigh
1. Optimization is dense Levenberg-Marquardt over left-multiplicative twist
updates with the first keyframe anchored; Jacobians are central differences
evaluated in batch, which keeps the solver deterministic and exact enough
that the damped normal equations converge to the same optimum as analytic
derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .geometry import Pose, se3_exp, se3_log_batch

_LM_LAMBDA_INIT = 1e-4
_LM_LAMBDA_MAX = 1e8
_LM_REL_DECREASE = 1e-9
_GRAD_TOL = 1e-12
_FD_STEP = 1e-6


@dataclass(frozen=True)
class PoseGraphEdge:
    """Relative-pose constraint between vertex positions i and j."""

    i: int
    j: int
    z: Pose  # measured P_j * P_i^-1
    weight: np.ndarray  # (6,) diagonal information entries

    def __post_init__(self):
        if self.i == self.j:
            raise DataError(f"self edge at vertex {self.i}")
        w = np.asarray(self.weight, dtype=np.float64)
        if w.shape != (6,) or not np.all(w > 0):
            raise DataError("edge weight must be 6 positive diagonal entries")
        object.__setattr__(self, "weight", w)


@dataclass
class PoseGraph:
    keyframes: list  # frame indices, strictly increasing
    initial_poses: list  # Pose per vertex, world-to-camera
    edges: list = field(default_factory=list)
    anchor: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.keyframes)


def build_graph(keyframes, tau_set, accepted_pairs, initial_poses, measured) -> PoseGraph:
    """Assemble sequential and co-visible edges over the keyframe list.

    measured maps ordered frame-index pairs to relative poses Z_ij; every
    sequential offset in range and every accepted pair must be present.
    Co-visible pairs arrive as frame indices and are mapped to vertex
    positions here.
    """
    keyframes = list(keyframes)
    initial_poses = list(initial_poses)
    if len(keyframes) != len(initial_poses):
        raise DataError(
            f"{len(keyframes)} keyframes but {len(initial_poses)} initial poses"
        )
    if len(keyframes) < 2:
        raise DataError("pose graph needs at least 2 keyframes")
    k = len(keyframes)
    pos_of = {f: p for p, f in enumerate(keyframes)}

    def lookup(fi, fj):
        z = measured.get((fi, fj))
        if z is None:
            raise DataError(f"missing relative pose measurement for ({fi}, {fj})")
        return z

    edges = []
    for tau in tau_set:
        w = np.full(6, 1.0 / tau)
        for p in range(k - tau):
            fi, fj = keyframes[p], keyframes[p + tau]
            edges.append(PoseGraphEdge(p, p + tau, lookup(fi, fj), w))
    for fi, fj in accepted_pairs:
        if fi not in pos_of or fj not in pos_of:
            raise DataError(f"accepted pair ({fi}, {fj}) references non-keyframes")
        edges.append(
            PoseGraphEdge(pos_of[fi], pos_of[fj], lookup(fi, fj), np.ones(6))
        )

    graph = PoseGraph(keyframes, initial_poses, edges, anchor=0)
    _check_connected(graph)
    return graph


def _check_connected(graph: PoseGraph) -> None:
    adj = [[] for _ in range(graph.n_vertices)]
    for e in graph.edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = {graph.anchor}
    stack = [graph.anchor]
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    if len(seen) != graph.n_vertices:
        missing = sorted(set(range(graph.n_vertices)) - seen)
        raise DataError(f"pose graph disconnected: vertices {missing} unreachable")


def edge_residual(edge: PoseGraphEdge, t_i: Pose, t_j: Pose) -> np.ndarray:
    """r = se3_log(Z^-1 * T_j * T_i^-1); zero iff the pair realizes Z."""
    m = edge.z.inverse().matrix() @ t_j.matrix() @ t_i.inverse().matrix()
    return se3_log_batch(m[None])[0]


def _inv_se3_batch(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    rt = np.swapaxes(t[:, :3, :3], 1, 2)
    out[:, :3, :3] = rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", rt, t[:, :3, 3])
    out[:, 3, :] = t[:, 3, :]
    return out


class _Residuals:
    """Batched residual/Jacobian evaluation over the edge list."""

    def __init__(self, graph: PoseGraph):
        self.ei = np.array([e.i for e in graph.edges])
        self.ej = np.array([e.j for e in graph.edges])
        self.z_inv = np.stack([e.z.inverse().matrix() for e in graph.edges])
        self.w = np.stack([e.weight for e in graph.edges])  # (E, 6)

    def residuals(self, t: np.ndarray) -> np.ndarray:
        m = self.z_inv @ t[self.ej] @ _inv_se3_batch(t[self.ei])
        return se3_log_batch(m)

    def cost(self, t: np.ndarray) -> float:
        r = self.residuals(t)
        return float(np.sum(self.w * r * r))

    def jacobian(self, t: np.ndarray) -> np.ndarray:
        """Central differences wrt left-multiplicative twists, (E, 6, 2, 6).

        Axis layout: edge, residual component, side (0 = i, 1 = j),
        perturbed twist component.
        """
        e = len(self.ei)
        jac = np.empty((e, 6, 2, 6))
        t_i_inv = _inv_se3_batch(t[self.ei])
        t_j = t[self.ej]
        for d in range(6):
            basis = np.zeros(6)
            basis[d] = _FD_STEP
            g_plus = se3_exp(basis).matrix()
            g_minus = se3_exp(-basis).matrix()  # exact group inverse of g_plus
            # perturb vertex i: T_i -> G T_i, so T_i^-1 -> T_i^-1 G^-1
            rp = se3_log_batch(self.z_inv @ t_j @ t_i_inv @ g_minus)
            rm = se3_log_batch(self.z_inv @ t_j @ t_i_inv @ g_plus)
            jac[:, :, 0, d] = (rp - rm) / (2.0 * _FD_STEP)
            # perturb vertex j: T_j -> G T_j
            rp = se3_log_batch(self.z_inv @ (g_plus @ t_j) @ t_i_inv)
            rm = se3_log_batch(self.z_inv @ (g_minus @ t_j) @ t_i_inv)
            jac[:, :, 1, d] = (rp - rm) / (2.0 * _FD_STEP)
        return jac


def optimize_pose_graph(graph: PoseGraph, max_iter: int = 100):
    """LM minimization of the weighted residual sum; anchor stays fixed.

    Returns (refined pose list, final cost). Cost never increases across
    accepted steps; terminates on relative decrease < 1e-9, a vanishing
    gradient, or max_iter.
    """
    k = graph.n_vertices
    t = np.stack([p.matrix() for p in graph.initial_poses])
    ev = _Residuals(graph)
    free = np.array([v for v in range(k) if v != graph.anchor])
    free_cols = np.concatenate([np.arange(6 * v, 6 * v + 6) for v in free])

    cost = ev.cost(t)
    lam = _LM_LAMBDA_INIT
    for _ in range(max_iter):
        r = ev.residuals(t)  # (E, 6)
        jac = ev.jacobian(t)  # (E, 6, 2, 6)
        n_e = len(graph.edges)
        j_full = np.zeros((n_e, 6, k, 6))
        j_full[np.arange(n_e), :, ev.ei, :] += jac[:, :, 0, :]
        j_full[np.arange(n_e), :, ev.ej, :] += jac[:, :, 1, :]
        j_mat = j_full.reshape(6 * n_e, 6 * k)[:, free_cols]
        w_flat = ev.w.reshape(-1)
        jw = j_mat * w_flat[:, None]
        h = jw.T @ j_mat
        g = jw.T @ r.reshape(-1)
        if float(np.max(np.abs(g))) < _GRAD_TOL:
            break

        accepted = False
        while not accepted:
            try:
                delta = np.linalg.solve(h + lam * np.eye(h.shape[0]), -g)
                solved = np.all(np.isfinite(delta))
            except np.linalg.LinAlgError:
                solved = False
            if solved:
                t_try = t.copy()
                for idx, v in enumerate(free):
                    step = se3_exp(delta[6 * idx : 6 * idx + 6]).matrix()
                    t_try[v] = step @ t[v]
                new_cost = ev.cost(t_try)
                if new_cost <= cost:
                    t = t_try
                    lam = max(lam * 0.5, 1e-12)
                    accepted = True
                    break
            lam *= 10.0
            if lam > _LM_LAMBDA_MAX:
                # Damping exhausted: legitimate convergence if the gradient
                # has vanished, otherwise the problem is ill-posed.
                if float(np.max(np.abs(g))) < 1e-10:
                    return [Pose.from_matrix(m) for m in t], cost
                raise NumericalError("LM diverged")
        decrease = cost - new_cost
        converged = decrease < _LM_REL_DECREASE * max(cost, 1e-300)
        cost = new_cost
        if converged:
            break
    return [Pose.from_matrix(m) for m in t], cost


def dump_graph(graph: PoseGraph) -> str:
    """One edge per line: i, j, the 3x4 measurement row-major, 6 weights."""
    lines = []
    for e in graph.edges:
        m = e.z.matrix()[:3, :].reshape(-1)
        nums = [f"{v:.9g}" for v in m] + [f"{v:.9g}" for v in e.weight]
        lines.append(f"{e.i} {e.j} " + " ".join(nums))
    return "\n".join(lines) + "\n"
