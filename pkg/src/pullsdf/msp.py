"""Multi-step pulling: the shared SDF head, level-conditioned fields and the
pulling recurrence ``Q_i = Q_{i-1} - s * g / max(|g|, 1e-8)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .fftnet import FilterStack, LeafCache, encode_nodes
from .pointcloud import NearestNeighborIndex

GRAD_FLOOR = 1e-8
FEATURE_MODES = ("moving", "frozen-q0")


def init_head(width_in: int, hidden: int = 512, layers: int = 3, seed: int = 0) -> dict[str, np.ndarray]:
    """Rectifier MLP ``width_in -> hidden x layers -> 1``, uniform fan-in init."""
    rng = np.random.default_rng([seed, 0x5DF])
    dims = [width_in] + [hidden] * layers + [1]
    params = {}
    for j, (a, b) in enumerate(zip(dims, dims[1:])):
        r = 1.0 / math.sqrt(a)
        params[f"head.w{j}"] = rng.uniform(-r, r, (b, a))
        params[f"head.b{j}"] = rng.uniform(-r, r, b)
    return params


def head_nodes(features: dc.Node, n_layers: int, leaves: LeafCache) -> dc.Node:
    h = features
    for j in range(n_layers):
        h = dc.affine(h, leaves(f"head.w{j}"), leaves(f"head.b{j}"))
        if j < n_layers - 1:
            h = dc.relu(h)
    return h


def pull_positions(q: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Numpy mirror of the graph recurrence; bitwise identical to it."""
    s = np.asarray(s).reshape(-1, 1)
    norm = np.sqrt(np.maximum(np.sum(g * g, axis=-1, keepdims=True), dc.NORM_FLOOR**2))
    return q + (s * g) * (1.0 / np.maximum(norm, GRAD_FLOOR)) * -1.0


def pull_nodes(q: dc.Node, s: dc.Node, g: dc.Node) -> dc.Node:
    norm = dc.maximum(dc.euclidean_norm(g, keepdims=True), GRAD_FLOOR)
    return q + (s * g) / norm * -1.0


class FieldBase:
    """Anything that can emit a scalar field as a diffcore graph.

    Subclasses implement :meth:`field_node` returning a K x 1 node.
    """

    step_levels: tuple[int, ...] = (0,)
    features: str = "moving"

    def __init__(self):
        self._graphs: dict = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def final_level(self) -> int:
        return self.step_levels[-1]

    def field_node(self, pts: dc.Node, level: int) -> dc.Node:
        raise NotImplementedError

    def _check_level(self, level):
        level = self.final_level if level is None else int(level)
        if level not in self.step_levels:
            raise ValueError(f"unknown level {level}; available {self.step_levels}")
        return level

    def graph(self, level: int | None = None) -> dc.ExprGraph:
        level = self._check_level(level)
        if level not in self._graphs:
            p = dc.points("p")
            f = self.field_node(p, level)
            self._graphs[level] = dc.ExprGraph({"f": f, "g": dc.spatial_gradient(f, p)})
        return self._graphs[level]

    def _run(self, pts, level, outputs, chunk):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite query points")
        g = self.graph(level)
        nodes = [g.outputs[o] for o in outputs]
        params = self.params
        res = [[] for _ in outputs]
        for start in range(0, max(len(pts), 1), chunk):
            ev = dc.Evaluation({**params, "p": pts[start : start + chunk]})
            for acc, v in zip(res, ev.values(nodes)):
                acc.append(v)
        return [np.concatenate(r, axis=0) for r in res]

    def sdf(self, pts, level: int | None = None, chunk: int = 65536) -> np.ndarray:
        return self._run(pts, level, ["f"], chunk)[0][:, 0]

    def sdf_gradient(self, pts, level: int | None = None, chunk: int = 32768) -> np.ndarray:
        return self._run(pts, level, ["g"], chunk)[0]

    def sdf_and_gradient(self, pts, level: int | None = None, chunk: int = 32768):
        f, g = self._run(pts, level, ["f", "g"], chunk)
        return f[:, 0], g


class FieldEvaluator(FieldBase):
    """Frequency encoder plus shared head; step ``i`` reads tap ``step_levels[i]``."""

    def __init__(
        self,
        stack: FilterStack,
        head: dict[str, np.ndarray],
        step_levels: Sequence[int] | None = None,
        features: str = "moving",
    ):
        super().__init__()
        self.stack = stack
        self.head = head
        self.step_levels = tuple(int(l) for l in (step_levels or stack.taps))
        if stack.config.encoder == "fft" and not set(self.step_levels) <= set(stack.taps):
            raise ValueError(f"step levels {self.step_levels} not among taps {stack.taps}")
        if features not in FEATURE_MODES:
            raise ValueError(f"features must be one of {FEATURE_MODES}")
        self.features = features
        self.head_layers = len([k for k in head if k.startswith("head.w")])
        self.leaves = LeafCache()
        self._traj = {}

    @property
    def steps(self) -> int:
        return len(self.step_levels)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.stack.params, **self.head}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k in self.head:
                self.head[k] = v
            elif k in self.stack.params:
                self.stack.params[k] = v
            else:
                raise KeyError(k)

    def feature_nodes(self, pts: dc.Node, levels) -> dict[int, dc.Node]:
        return encode_nodes(self.stack.config, pts, levels, self.leaves)

    def head_node(self, feat: dc.Node) -> dc.Node:
        return head_nodes(feat, self.head_layers, self.leaves)

    def field_node(self, pts: dc.Node, level: int) -> dc.Node:
        return self.head_node(self.feature_nodes(pts, [level])[level])

    def trajectory(self, steps: int | None = None) -> "TrajectoryNodes":
        steps = self.steps if steps is None else steps
        if steps not in self._traj:
            self._traj[steps] = build_trajectory(self, steps)
        return self._traj[steps]


class AnalyticField(FieldBase):
    """Closed-form field built from diffcore primitives (test oracle)."""

    def __init__(self, builder, step_levels=(0,), name: str = "analytic"):
        super().__init__()
        self.builder = builder
        self.step_levels = tuple(step_levels)
        self.name = name
        self._traj = {}

    def field_node(self, pts, level):
        return self.builder(pts, level)

    @property
    def steps(self) -> int:
        return len(self.step_levels)

    def trajectory(self, steps: int | None = None) -> "TrajectoryNodes":
        steps = self.steps if steps is None else steps
        if steps not in self._traj:
            self._traj[steps] = build_trajectory(self, steps)
        return self._traj[steps]


def sphere_field(radius: float = 1.0, center=(0.0, 0.0, 0.0), step_levels=(0,)) -> AnalyticField:
    c = np.asarray(center, dtype=np.float64)
    return AnalyticField(
        lambda p, level: dc.euclidean_norm(p - c, keepdims=True) - radius, step_levels, "sphere"
    )


def torus_field(major: float = 0.7, minor: float = 0.25, step_levels=(0,)) -> AnalyticField:
    """Torus around the z axis."""

    def build(p, level):
        xy = dc.hadamard(p, np.array([1.0, 1.0, 0.0]))
        z = dc.hadamard(p, np.array([0.0, 0.0, 1.0]))
        ring = dc.euclidean_norm(xy, keepdims=True) - major
        tube = dc.concatenate([ring, dc.sum(z, axis=-1, keepdims=True)], axis=-1)
        return dc.euclidean_norm(tube, keepdims=True) - minor

    return AnalyticField(build, step_levels, "torus")


def constant_field(value: float, step_levels=(0,)) -> AnalyticField:
    return AnalyticField(lambda p, level: dc.sum(p * 0.0, axis=-1, keepdims=True) + value, step_levels, "constant")


# -- trajectories -----------------------------------------------------------


@dataclass
class TrajectoryNodes:
    """Symbolic pulling trajectory. ``targets[i]`` are leaves bound per batch."""

    q0: dc.Node
    Q: list[dc.Node]
    s: list[dc.Node]
    g: list[dc.Node]
    targets: list[dc.Node | None]
    D: list[dc.Node | None]
    levels: tuple[int, ...]

    @property
    def steps(self) -> int:
        return len(self.Q) - 1


def _step_levels(evaluator: FieldBase, steps: int) -> tuple[int, ...]:
    levels = tuple(evaluator.step_levels)
    if steps != len(levels):
        raise ValueError(f"{steps} steps requested but evaluator has levels {levels}")
    return levels


def build_trajectory(evaluator: FieldBase, steps: int | None = None) -> TrajectoryNodes:
    steps = len(evaluator.step_levels) if steps is None else steps
    levels = _step_levels(evaluator, steps)
    q0 = dc.points("Q0")
    Q, s, g = [q0], [], []
    targets: list = [None]
    D: list = [None]
    frozen = evaluator.features == "frozen-q0"
    read_levels = list(levels) + [levels[-1]]
    cache: dict[int, tuple] = {}
    for i, level in enumerate(read_levels):
        if frozen:
            # features and gradients both taken at Q0
            if level not in cache:
                f = evaluator.field_node(q0, level)
                cache[level] = (f, dc.spatial_gradient(f, q0))
            fi, gi = cache[level]
        else:
            fi = evaluator.field_node(Q[i], level)
            gi = dc.spatial_gradient(fi, Q[i]) if i == 0 else dc.gradients(fi, [Q[i]])[0]
        s.append(fi)
        g.append(gi)
        if i == steps:
            break
        q_next = pull_nodes(Q[i], fi, gi)
        Q.append(q_next)
        t = dc.leaf(f"target.{i + 1}", "input")
        targets.append(t)
        D.append(dc.squared_norm(q_next - dc.stop_gradient(t), keepdims=True))
    return TrajectoryNodes(q0, Q, s, g, targets, D, levels)


@dataclass
class PullTrajectory:
    """Numeric record of one pulling pass.

    ``Q`` has I+1 entries; ``s``/``g`` hold I+1 entries, the last evaluated at
    Q_I with the final level; ``q`` and ``D`` are indexed 1..I (entry 0 is None).
    """

    Q: list[np.ndarray]
    s: list[np.ndarray]
    g: list[np.ndarray]
    q: list[np.ndarray | None]
    D: list[np.ndarray | None]
    levels: tuple[int, ...]
    session: dc.Evaluation | None = field(default=None, repr=False)
    nodes: TrajectoryNodes | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.Q) - 1


def run_msp(
    evaluator: FieldBase,
    q0: np.ndarray,
    index: NearestNeighborIndex,
    nodes: TrajectoryNodes | None = None,
    check_finite: bool = True,
) -> PullTrajectory:
    """Pull ``q0`` through every step; targets are nearest cloud points of each Q_i."""
    nodes = nodes or evaluator.trajectory()
    ev = dc.Evaluation({**evaluator.params, "Q0": np.asarray(q0, dtype=np.float64)})
    qs = [ev.values([nodes.Q[0]], check_finite)[0]]
    targets: list = [None]
    for i in range(1, nodes.steps + 1):
        qi = ev.values([nodes.Q[i]], check_finite)[0]
        tgt, _, _ = index.nearest(qi)
        ev.bind({nodes.targets[i].name: tgt})
        qs.append(qi)
        targets.append(tgt)
    rest = ev.values(nodes.s + nodes.g + nodes.D[1:], check_finite)
    n = len(nodes.s)
    s = [v[:, 0] for v in rest[:n]]
    g = rest[n : 2 * n]
    d = [None] + [v[:, 0] for v in rest[2 * n :]]
    return PullTrajectory(qs, s, g, targets, d, nodes.levels, ev, nodes)


def pull_step(evaluator: FieldBase, q: np.ndarray, level: int | None = None) -> np.ndarray:
    s, g = evaluator.sdf_and_gradient(q, level)
    return pull_positions(np.asarray(q, dtype=np.float64), s, g)
