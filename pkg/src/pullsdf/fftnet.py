"""Multiplicative frequency encoder with per-level taps.

Layer ``i`` owns a Fourier filter ``h_i(p) = sin(omega_i p + phi_i)``. Features
compose by Hadamard products::

    z_0 = h_0(p)
    z_i = h_i(p) * (Wz_i z_{i-1} + bz_i)        i = 1 .. n_layers-1
    y_i = Wy_i z_i + by_i

Products of sines turn into sums of sines at summed/differenced frequencies,
so deeper taps carry wider bandwidth. Mixer weights of layer ``i`` are drawn
from ``U[-psi_i/sqrt(M), psi_i/sqrt(M)]`` with
``psi_i = sqrt(eta * sin(i*pi/n_layers))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc

INIT_SCHEMES = ("multipull", "random-uniform", "bacon-style")
ENCODERS = ("fft", "linear")


@dataclass(frozen=True)
class StackConfig:
    n_layers: int = 9
    width: int = 256
    taps: tuple[int, ...] = (4, 6, 8)
    eta: float = 9.0
    omega_bound: float = 1.0
    omega_bound_first: float = 1.0
    init: str = "multipull"
    encoder: str = "fft"
    seed: int = 0

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.omega_bound < 0 or self.omega_bound_first < 0:
            raise ValueError("omega bounds must be non-negative")
        taps = tuple(self.taps)
        if not taps:
            raise ValueError("need at least one tap")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"taps must be strictly increasing: {taps}")
        if taps[0] < 1 or taps[-1] > self.n_layers - 1:
            raise ValueError(f"taps must lie in [1, n_layers-1] (n_layers={self.n_layers})")


def psi_schedule(n_layers: int, eta: float) -> np.ndarray:
    """Mixer init range multiplier for layers 1 .. n_layers-1 (index 0 unused, NaN)."""
    i = np.arange(n_layers, dtype=np.float64)
    out = np.sqrt(eta * np.sin(i * np.pi / n_layers))
    out[0] = np.nan
    return out


@dataclass
class FilterStack:
    config: StackConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(self.config.taps)

    def copy(self) -> "FilterStack":
        return FilterStack(self.config, {k: v.copy() for k, v in self.params.items()})


def init_stack(config: StackConfig | None = None, **overrides) -> FilterStack:
    """Draw all encoder parameters deterministically from ``config.seed``."""
    config = replace(config or StackConfig(), **overrides)
    config = replace(config, taps=tuple(int(t) for t in config.taps))
    config.validate()
    rng = np.random.default_rng([config.seed, 0xF17])
    m = config.width
    params: dict[str, np.ndarray] = {}
    if config.encoder == "linear":
        bound = 1.0 / math.sqrt(3.0)
        params["lin.w"] = rng.uniform(-bound, bound, (m, 3))
        params["lin.b"] = rng.uniform(-bound, bound, m)
        return FilterStack(config, params)

    n = config.n_layers
    psi = psi_schedule(n, config.eta)
    for i in range(n):
        bound = config.omega_bound_first if i == 0 else config.omega_bound
        if config.init == "bacon-style":
            bound /= math.sqrt(n)
        params[f"fft.omega.{i}"] = rng.uniform(-bound, bound, (m, 3))
        params[f"fft.phi.{i}"] = rng.uniform(-np.pi, np.pi, m)
    for i in range(1, n):
        for role in ("z", "y"):
            if config.init == "multipull":
                r = psi[i] / math.sqrt(m)
                w, b = rng.uniform(-r, r, (m, m)), rng.uniform(-r, r, m)
            elif config.init == "bacon-style":
                r = 1.0 / math.sqrt(m)
                w, b = rng.uniform(-r, r, (m, m)), rng.uniform(-r, r, m)
            else:
                s = 1.0 / math.sqrt(m)
                w, b = rng.normal(0.0, s, (m, m)), rng.normal(0.0, s, m)
            params[f"fft.w{role}.{i}"] = w
            params[f"fft.b{role}.{i}"] = b
    return FilterStack(config, params)


class LeafCache:
    """One leaf node per parameter name, so every graph built by a model
    refers to the same leaves and parameter gradients collect in one place."""

    def __init__(self):
        self._leaves: dict[str, dc.Node] = {}

    def __call__(self, name: str) -> dc.Node:
        node = self._leaves.get(name)
        if node is None:
            node = self._leaves[name] = dc.parameter(name)
        return node


def encode_nodes(config: StackConfig, pts: dc.Node, levels, leaves: LeafCache) -> dict[int, dc.Node]:
    """Graph nodes for the tap features ``y_level`` of ``pts`` at each level."""
    levels = sorted(set(int(l) for l in levels))
    if config.encoder == "linear":
        y = dc.affine(pts, leaves("lin.w"), leaves("lin.b"))
        return {l: y for l in levels}
    if levels and (levels[0] < 1 or levels[-1] > config.n_layers - 1):
        raise ValueError(f"levels {levels} outside [1, {config.n_layers - 1}]")

    def h(i):
        return dc.sin(dc.affine(pts, leaves(f"fft.omega.{i}"), leaves(f"fft.phi.{i}")))

    out = {}
    z = h(0)
    for i in range(1, (levels[-1] if levels else 0) + 1):
        z = h(i) * dc.affine(z, leaves(f"fft.wz.{i}"), leaves(f"fft.bz.{i}"))
        if i in levels:
            out[i] = dc.affine(z, leaves(f"fft.wy.{i}"), leaves(f"fft.by.{i}"))
    return out


def encode(stack: FilterStack, pts: np.ndarray, levels=None) -> dict[int, np.ndarray]:
    """Tap features for an array of points (defaults to the configured taps)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite input points")
    levels = stack.taps if levels is None else levels
    node = dc.points("p")
    nodes = encode_nodes(stack.config, node, levels, LeafCache())
    graph = dc.ExprGraph({str(k): v for k, v in nodes.items()})
    vals = dc.evaluate(graph, {"p": pts, **stack.params})
    return {int(k): v for k, v in vals.items()}


def activation_stats(stack: FilterStack, pts: np.ndarray, layers=(2, 4, 6, 8)) -> dict[int, float]:
    """Standard deviation of every tap-projected feature ``y_i`` over ``pts``."""
    feats = encode(stack, pts, layers)
    return {i: float(np.std(feats[i])) for i in layers}


def spectral_report(
    stack: FilterStack,
    axis: int = 0,
    samples: int = 512,
    levels=None,
    feature: int = 0,
    extent: float = 1.0,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Amplitude spectrum of one feature of each tap along a coordinate axis.

    The axis is sampled on ``[-extent, extent)``; frequencies are in cycles per
    unit length.
    """
    levels = stack.taps if levels is None else levels
    t = np.linspace(-extent, extent, samples, endpoint=False)
    pts = np.zeros((samples, 3))
    pts[:, axis] = t
    feats = encode(stack, pts, levels)
    freqs = np.fft.rfftfreq(samples, d=t[1] - t[0])
    return {l: (freqs, np.abs(np.fft.rfft(feats[l][:, feature])) / samples) for l in levels}


def occupied_bandwidth(freqs: np.ndarray, amps: np.ndarray, fraction: float = 0.99) -> float:
    """Smallest frequency below which ``fraction`` of the non-DC energy lies."""
    energy = amps[1:] ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    idx = int(np.searchsorted(np.cumsum(energy) / total, fraction))
    return float(freqs[1:][min(idx, len(energy) - 1)])


def config_dict(config: StackConfig) -> dict:
    d = asdict(config)
    d["taps"] = list(config.taps)
    return d
