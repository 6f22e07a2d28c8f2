"""Training objectives over pulling trajectories.

Every builder returns diffcore nodes so the trainer can differentiate them;
the array-level helpers (``recon_loss`` etc.) evaluate the same builders on
plain per-query arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .msp import TrajectoryNodes

MODES = ("full", "pull-only", "recon-only", "recon+grad")
ALPHA_GRAD = ("stop", "through")
GRAD_REFERENCE = ("q0", "target")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    beta: float = 0.1
    delta: float = 0.01
    mode: str = "full"
    alpha_grad: str = "stop"
    grad_reference: str = "q0"

    def validate(self) -> None:
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.beta < 0 or self.delta < 0:
            raise ValueError("beta and delta must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}")
        if self.alpha_grad not in ALPHA_GRAD:
            raise ValueError(f"alpha_grad must be one of {ALPHA_GRAD}")
        if self.grad_reference not in GRAD_REFERENCE:
            raise ValueError(f"grad_reference must be one of {GRAD_REFERENCE}")


@dataclass
class LossTerms:
    recon: float
    grad: float
    surf: float
    pull: float
    total: float
    alpha1: np.ndarray | None = None
    alpha2: np.ndarray | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("alpha1")
        d.pop("alpha2")
        return d


# -- graph builders ---------------------------------------------------------


def recon_nodes(D, gamma: float = 2.0, alpha_grad: str = "stop"):
    """Distance-weighted pull loss over per-step squared distances.

    ``D`` lists per-query columns D_1..D_I. The first two steps are weighted by
    a two-way softmax of their distances (the second weight raised to
    ``gamma``); later steps enter unweighted. Returns (loss, alpha1, alpha2).
    """
    D = [dc._as_node(d) for d in D]
    if len(D) == 1:
        return dc.mean(D[0]), None, None
    logits = D[:2] if alpha_grad == "through" else [dc.stop_gradient(d) for d in D[:2]]
    a1, a2 = dc.softmax2(*logits)
    term = a1 * D[0] + dc.power(a2, gamma) * D[1]
    for d in D[2:]:
        term = term + d
    return dc.mean(term), a1, a2


def grad_consistency_nodes(grads, reference):
    """Mean over queries of 1 - min_i cos(g_i, reference)."""
    cos = [dc.cosine_similarity(g, reference) for g in grads]
    worst = cos[0]
    for c in cos[1:]:
        worst = dc.minimum(worst, c)
    return dc.mean(1.0 - worst)


def surface_nodes(s_final):
    return dc.mean(dc.absolute(s_final))


def pull_nodes(D):
    total = dc._as_node(D[0])
    for d in D[1:]:
        total = total + d
    return dc.mean(total)


@dataclass
class LossGraph:
    total: dc.Node
    recon: dc.Node
    grad: dc.Node
    surf: dc.Node
    pull: dc.Node
    alpha1: dc.Node | None
    alpha2: dc.Node | None

    def term_nodes(self) -> list[dc.Node]:
        return [self.recon, self.grad, self.surf, self.pull, self.total]


def build_loss(traj: TrajectoryNodes, config: LossConfig, evaluator=None) -> LossGraph:
    """Loss nodes over a symbolic trajectory.

    ``evaluator`` is needed only for ``grad_reference='target'``, where each
    step's gradient is compared with the field gradient at its target point.
    """
    config.validate()
    D = traj.D[1:]
    recon, a1, a2 = recon_nodes(D, config.gamma, config.alpha_grad)
    if config.grad_reference == "q0":
        grad = grad_consistency_nodes(traj.g[1:], traj.g[0])
    else:
        if evaluator is None:
            raise ValueError("grad_reference='target' needs the evaluator")
        terms = []
        for i in range(1, traj.steps + 1):
            t = traj.targets[i]
            ft = evaluator.field_node(t, traj.levels[i - 1])
            gt = dc.stop_gradient(dc.spatial_gradient(ft, t))
            terms.append(dc.cosine_similarity(traj.g[i], gt))
        worst = terms[0]
        for c in terms[1:]:
            worst = dc.minimum(worst, c)
        grad = dc.mean(1.0 - worst)
    surf = surface_nodes(traj.s[-1])
    pull = pull_nodes(D)
    total = combine(recon, grad, surf, pull, config)
    return LossGraph(total, recon, grad, surf, pull, a1, a2)


def combine(recon, grad, surf, pull, config: LossConfig):
    """Mode-selected total; works on nodes and on plain floats alike."""
    if config.mode == "pull-only":
        return pull
    if config.mode == "recon-only":
        return recon
    if config.mode == "recon+grad":
        return recon + config.beta * grad
    return recon + config.beta * grad + config.delta * surf


# -- array-level helpers ----------------------------------------------------


def _eval(*nodes):
    return dc.Evaluation().values([n for n in nodes])


def _col(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1, 1)


def recon_loss(D1, D2, D3=None, gamma: float = 2.0):
    """(loss, alpha1, alpha2) for per-query distance arrays."""
    cols = [_col(D1), _col(D2)] + ([_col(D3)] if D3 is not None else [])
    if len({len(c) for c in cols}) != 1:
        raise ValueError("distance arrays differ in length")
    if any(np.any(c < 0) for c in cols):
        raise ValueError("distances must be non-negative")
    loss, a1, a2 = recon_nodes([dc.const(c) for c in cols], gamma)
    lv, a1v, a2v = _eval(loss, a1, a2)
    return float(lv), a1v[:, 0], a2v[:, 0]


def grad_consistency_loss(grads, reference) -> float:
    if len(grads) == 0:
        raise ValueError("missing gradients")
    node = grad_consistency_nodes([dc.const(g) for g in grads], dc.const(reference))
    return float(_eval(node)[0])


def surface_loss(s_final) -> float:
    return float(_eval(surface_nodes(dc.const(_col(s_final))))[0])


def pull_loss(D) -> float:
    return float(_eval(pull_nodes([dc.const(_col(d)) for d in D]))[0])


def total_loss(terms: LossTerms | dict, config: LossConfig) -> float:
    t = terms if isinstance(terms, dict) else terms.as_dict()
    return float(combine(t["recon"], t["grad"], t["surf"], t["pull"], config))


def trajectory_terms(traj, config: LossConfig) -> LossTerms:
    """Loss values for a numeric :class:`~pullsdf.msp.PullTrajectory`."""
    D = [dc.const(_col(d)) for d in traj.D[1:]]
    recon, a1, a2 = recon_nodes(D, config.gamma)
    grad = grad_consistency_nodes([dc.const(g) for g in traj.g[1:]], dc.const(traj.g[0]))
    surf = surface_nodes(dc.const(_col(traj.s[-1])))
    pull = pull_nodes(D)
    vals = [float(v) for v in _eval(recon, grad, surf, pull)]
    alphas = _eval(a1, a2) if a1 is not None else (None, None)
    return LossTerms(*vals, float(combine(*vals, config)), *[None if a is None else a[:, 0] for a in alphas])
