"""Per-shape overfitting loop, checkpoints and ablation configurations."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, TextIO

import numpy as np

from . import diffcore as dc
from .fftnet import FilterStack, StackConfig, init_stack
from .losses import LossConfig, build_loss
from .msp import FieldEvaluator, init_head, run_msp
from .pointcloud import NearestNeighborIndex, NormalizeTransform, PointCloud, sample_queries

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPUL"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 40000
    batch_queries: int = 5000
    learning_rate: float = 1e-4
    lr_decay: float = 0.5
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    per_point: int = 40
    sigma_k: int = 50
    head_hidden: int = 512
    head_layers: int = 3
    step_levels: tuple[int, ...] = (4, 6, 8)
    features: str = "moving"
    orient_sign: bool = True
    log_every: int = 100
    stack: StackConfig = field(default_factory=StackConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_queries < 1:
            raise ConfigError("batch_queries must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.per_point < 1:
            raise ConfigError("per_point must be >= 1")
        if self.head_layers < 1 or self.head_hidden < 1:
            raise ConfigError("head needs at least one hidden layer of width >= 1")
        if not self.step_levels:
            raise ConfigError("need at least one pulling step")
        try:
            self.stack.validate()
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.stack.encoder == "fft" and not set(self.step_levels) <= set(self.stack.taps):
            raise ConfigError(f"step_levels {self.step_levels} must be among taps {self.stack.taps}")

    @property
    def milestones(self) -> list[int]:
        return [int(round(f * self.iterations)) for f in self.lr_milestones]

    def learning_rate_at(self, iteration: int) -> float:
        """Rate used for the update made at (0-based) ``iteration``."""
        n = sum(1 for m in self.milestones if iteration >= m)
        return self.learning_rate * self.lr_decay**n

    # flat ``key = value`` view, dotted keys for nested sections
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("stack", "loss"):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = list(sub) if isinstance(sub, tuple) else sub
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        top, stack, loss = {}, {}, {}
        for key, value in flat.items():
            if key.startswith("stack."):
                stack[key[6:]] = value
            elif key.startswith("loss."):
                loss[key[5:]] = value
            else:
                top[key] = value
        try:
            st = _coerce_dataclass(base.stack, stack)
            lo = _coerce_dataclass(base.loss, loss)
            return _coerce_dataclass(base, top, stack=st, loss=lo)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(like, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        inner = like[0] if like else 0
        return tuple(_coerce(v, inner) for v in value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def _coerce_dataclass(obj, updates: dict, **extra):
    names = {f.name for f in fields(obj)}
    unknown = set(updates) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw = {k: _coerce(v, getattr(obj, k)) for k, v in updates.items()}
    kw.update(extra)
    return replace(obj, **kw)


# -- optimizer --------------------------------------------------------------


class Adam:
    """Adaptive-moment updates over a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training ---------------------------------------------------------------


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    stream: TextIO | None = None

    def emit(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("run log iterations must increase")
        self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")
            self.stream.flush()


def build_evaluator(config: TrainConfig) -> FieldEvaluator:
    stack_cfg = replace(config.stack, seed=config.seed)
    if stack_cfg.encoder == "fft":
        stack_cfg = replace(stack_cfg, taps=tuple(sorted(set(stack_cfg.taps) | set(config.step_levels))))
    stack = init_stack(stack_cfg)
    head = init_head(stack.width, config.head_hidden, config.head_layers, config.seed)
    return FieldEvaluator(stack, head, config.step_levels, config.features)


class QueryBatcher:
    """Shuffled slices over a fixed query pool; every query is visited once
    per epoch, and an epoch's tail forms a short final batch."""

    def __init__(self, pool: np.ndarray, batch: int, seed: int):
        self.pool = pool
        self.batch = min(batch, len(pool))
        self.rng = np.random.default_rng([seed, 0xBA7C])
        self.perm = self.rng.permutation(len(pool))
        self.pos = 0
        self.epoch = 0

    def next(self) -> np.ndarray:
        if self.pos >= len(self.perm):
            self.perm = self.rng.permutation(len(self.pool))
            self.pos = 0
            self.epoch += 1
        idx = self.perm[self.pos : self.pos + self.batch]
        self.pos += len(idx)
        return idx


def orient_field(evaluator: FieldEvaluator, samples: int = 2000) -> bool:
    """Make the field positive far from the shape by flipping the head's output
    layer if needed. The pulling objective is invariant to this flip."""
    rng = np.random.default_rng(0x0_5161)
    pts = rng.uniform(-1.0, 1.0, (samples, 3))
    axis = rng.integers(0, 3, samples)
    pts[np.arange(samples), axis] = rng.choice([-1.0, 1.0], samples)
    if np.median(evaluator.sdf(pts)) >= 0:
        return False
    last = evaluator.head_layers - 1
    evaluator.head[f"head.w{last}"] = -evaluator.head[f"head.w{last}"]
    evaluator.head[f"head.b{last}"] = -evaluator.head[f"head.b{last}"]
    return True


def train(
    cloud: PointCloud,
    config: TrainConfig,
    log_stream: TextIO | None = None,
    callback: Callable[[int, dict], None] | None = None,
    dump_path: str | None = None,
) -> tuple[FieldEvaluator, RunLog]:
    """Overfit a field to a normalized cloud."""
    config.validate()
    index = NearestNeighborIndex(cloud.points)
    pool = sample_queries(cloud, index, config.per_point, config.sigma_k, seed=config.seed)
    if config.batch_queries > len(pool):
        raise ConfigError(f"batch_queries {config.batch_queries} exceeds query pool of {len(pool)}")
    evaluator = build_evaluator(config)
    nodes = evaluator.trajectory()
    loss = build_loss(nodes, config.loss, evaluator)
    params = evaluator.params
    names = sorted(params)
    grad_nodes = dc.gradients(loss.total, [evaluator.leaves(n) for n in names])
    terms = loss.term_nodes()

    opt = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    batcher = QueryBatcher(pool.queries, config.batch_queries, config.seed)
    runlog = RunLog(stream=log_stream)
    t0 = time.perf_counter()
    for it in range(config.iterations):
        batch = pool.queries[batcher.next()]
        try:
            traj = run_msp(evaluator, batch, index, nodes)
            vals = traj.session.values(terms + grad_nodes)
        except dc.NonFiniteError as exc:
            _dump(dump_path, batch, it)
            raise TrainingAborted(f"iteration {it}: {exc}") from None
        term_vals = [float(v) for v in vals[: len(terms)]]
        grads = dict(zip(names, vals[len(terms) :]))
        opt.step(params, grads, config.learning_rate_at(it))
        bad = [k for k in names if not np.all(np.isfinite(params[k]))]
        if bad:
            _dump(dump_path, batch, it)
            raise TrainingAborted(f"iteration {it}: parameters {bad[:3]} became non-finite")
        if it == 0 or (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            rec = dict(zip(["recon", "grad", "surf", "pull", "total"], term_vals))
            rec.update(iteration=it + 1, lr=config.learning_rate_at(it), wall=time.perf_counter() - t0)
            runlog.emit(rec)
            if callback:
                callback(it + 1, rec)
    evaluator.set_params(params)
    if config.orient_sign:
        orient_field(evaluator)
    return evaluator, runlog


def _dump(path: str | None, batch: np.ndarray, it: int) -> None:
    if path:
        np.savetxt(path, batch, header=f"offending batch at iteration {it}")


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    evaluator: FieldEvaluator
    config: TrainConfig
    transform: NormalizeTransform
    iteration: int
    seed: int


def _header(evaluator, config, transform, iteration) -> dict:
    params = evaluator.params
    return {
        "config": config.to_flat(),
        "stack_config": {**asdict(evaluator.stack.config), "taps": list(evaluator.stack.taps)},
        "step_levels": list(evaluator.step_levels),
        "features": evaluator.features,
        "transform": {"translation": [float(v) for v in transform.translation], "scale": float(transform.scale)},
        "iteration": int(iteration),
        "seed": int(config.seed),
        "params": [[k, list(params[k].shape)] for k in sorted(params)],
    }


def checkpoint_bytes(evaluator, config, transform=None, iteration=None) -> bytes:
    transform = transform or NormalizeTransform.identity()
    iteration = config.iterations if iteration is None else iteration
    header = json.dumps(_header(evaluator, config, transform, iteration), sort_keys=True).encode()
    params = evaluator.params
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for k in sorted(params):
        arr = params[k]
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to write non-finite parameter {k}")
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(evaluator, config, path, transform=None, iteration=None) -> None:
    data = checkpoint_bytes(evaluator, config, transform, iteration)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12 + 32 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError("not a checkpoint (bad magic or too short)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported version {version} (expected {CHECKPOINT_VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch (truncated or corrupt checkpoint)")
    header = json.loads(body[12 : 12 + hlen])
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(body, "<f8", n, offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointCorruptError("parameter block size mismatch")
    config = TrainConfig.from_flat(header["config"])
    sc = dict(header["stack_config"])
    sc["taps"] = tuple(sc["taps"])
    stack = FilterStack(StackConfig(**sc), {k: v for k, v in params.items() if not k.startswith("head.")})
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    ev = FieldEvaluator(stack, head, header["step_levels"], header["features"])
    tf = NormalizeTransform(np.array(header["transform"]["translation"]), header["transform"]["scale"])
    return Checkpoint(ev, config, tf, header["iteration"], header["seed"])


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# -- ablations --------------------------------------------------------------

ABLATION_AXES = ("steps", "taps", "loss-mode", "init")


def levels_for_steps(steps: int, first: int = 4, last: int = 8) -> tuple[int, ...]:
    """Evenly spread tap levels for a given number of pulling steps."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if steps == 1:
        return (last,)
    return tuple(int(round(v)) for v in np.linspace(first, last, steps))


def ablation_matrix(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    """Labelled configs, one per table row of the chosen axis."""
    if axis == "steps":
        rows = []
        for i in range(1, 6):
            lv = levels_for_steps(i)
            rows.append((f"steps={i}", replace(base, step_levels=lv, stack=replace(base.stack, taps=lv))))
        return rows
    if axis == "taps":
        rows = [("Linear", replace(base, step_levels=(4, 6, 8), stack=replace(base.stack, encoder="linear")))]
        for lv in [(4,), (4, 6), (4, 6, 8)]:
            label = "".join(f"L{l}" for l in lv)
            rows.append((label, replace(base, step_levels=lv, stack=replace(base.stack, encoder="fft", taps=lv))))
        return rows
    if axis == "loss-mode":
        return [(m, replace(base, loss=replace(base.loss, mode=m))) for m in ("pull-only", "recon-only", "recon+grad", "full")]
    if axis == "init":
        return [(i, replace(base, stack=replace(base.stack, init=i))) for i in ("random-uniform", "bacon-style", "multipull")]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
