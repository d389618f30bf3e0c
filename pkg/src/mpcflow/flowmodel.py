"""Time-conditioned MLP velocity field, flow-matching training and checkpoints."""

from __future__ import annotations

import contextlib
import logging
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from .data import make_rng, standard_normal

log = logging.getLogger(__name__)

N_FREQS = 6
CKPT_MAGIC = b"FLOWCKPT"
CKPT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# evaluation counters


@dataclass
class EvalCounter:
    """Velocity-field evaluations split by whether they entered a differentiated graph."""

    graph: int = 0
    frozen: int = 0


_counters = threading.local()


@contextlib.contextmanager
def count_evals():
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    counter = EvalCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _record(in_graph: bool) -> None:
    for c in getattr(_counters, "stack", ()):
        if in_graph:
            c.graph += 1
        else:
            c.frozen += 1


# ---------------------------------------------------------------------------
# model


def time_freqs(n: int = N_FREQS) -> np.ndarray:
    return np.pi * 2.0 ** np.arange(n)


@dataclass(eq=False)
class MlpVectorField:
    """v(x, t): an MLP on ``[x, sin(w t), cos(w t)]`` with tanh hidden layers.

    ``weights[i]`` has shape ``(out, in)``; the output layer is linear.
    """

    dim: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    freqs: np.ndarray = field(default_factory=time_freqs)
    activation: str = "tanh"

    def __post_init__(self):
        expected_in = self.dim + 2 * len(self.freqs)
        prev = expected_in
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} breaks the shape chain")
            prev = w.shape[0]
        if prev != self.dim:
            raise ValueError(f"output width {prev} != state dim {self.dim}")
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("model parameters must be finite")
        self._frozen = None

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def hidden(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpVectorField":
        return replace(self, weights=[np.array(p) for p in params[0::2]],
                       biases=[np.array(p) for p in params[1::2]])

    def frozen_params(self) -> list[de.Node]:
        if self._frozen is None:
            self._frozen = [de.const(p) for p in self.params]
        return self._frozen

    def __call__(self, x, t, params: Sequence[de.Node] | None = None) -> de.Node:
        return velocity(self, x, t, params)


class ZeroField:
    """The field v = 0; controls alone move the state."""

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, x, t, params=None) -> de.Node:
        x = de.as_node(x)
        _record(x.requires_grad)
        with de.scope("vfield"):
            return de.scale(x, 0.0)


def init_mlp(dim: int, hidden: Sequence[int], seed: int, n_freqs: int = N_FREQS) -> MlpVectorField:
    rng = make_rng(seed, 3)
    widths = [dim + 2 * n_freqs, *hidden, dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-s, s, size=fan_out))
    return MlpVectorField(dim, weights, biases, time_freqs(n_freqs))


def velocity(model: MlpVectorField, x, t, params: Sequence[de.Node] | None = None) -> de.Node:
    """Evaluate the field at a state ``(d,)`` or a batch ``(B, d)``.

    ``t`` is a scalar for a single state, or a ``(B,)`` vector for a batch.
    Differentiable in ``x``, ``t`` and (when given as leaves) ``params``.
    """
    x, t = de.as_node(x), de.as_node(t)
    single = x.value.ndim == 1
    if x.value.shape[-1] != model.dim or x.value.ndim not in (1, 2):
        raise de.ShapeError(f"velocity: state shape {x.shape} does not match model dim {model.dim}")
    if np.any(t.value < 0.0) or np.any(t.value > 1.0):
        raise ValueError(f"velocity: time {t.value} outside [0, 1]")
    batch = 1 if single else x.value.shape[0]
    if t.value.size != batch:
        raise de.ShapeError(f"velocity: {t.value.size} times for a batch of {batch}")
    if params is None:
        params = model.frozen_params()
    in_graph = x.requires_grad or t.requires_grad or any(p.requires_grad for p in params)
    _record(in_graph)
    with de.scope("vfield"):
        xb = de.reshape(x, (batch, model.dim))
        wt = de.matmul(de.reshape(t, (batch, 1)), de.const(model.freqs[None, :]))
        h = de.concat([xb, de.sin(wt), de.cos(wt)], axis=1)
        n_layers = len(params) // 2
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            h = de.add(de.matmul(h, de.transpose(w)), de.broadcast_rows(b, batch))
            if i < n_layers - 1:
                h = de.tanh(h)
        return de.reshape(h, (model.dim,)) if single else h


# ---------------------------------------------------------------------------
# training


def cfm_loss(model: MlpVectorField, x0, x1, t, params: Sequence[de.Node] | None = None) -> de.Node:
    """Mean over the batch of ||v(x_t, t) - (x1 - x0)||^2 on the straight path."""
    x0, x1, t = np.atleast_2d(x0), np.atleast_2d(x1), np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("cfm_loss: empty batch")
    if x0.shape != x1.shape or t.shape != (x0.shape[0],):
        raise de.ShapeError(f"cfm_loss: x0 {x0.shape}, x1 {x1.shape}, t {t.shape} disagree")
    tc = t[:, None]
    xt = (1.0 - tc) * x0 + tc * x1
    resid = de.sub(velocity(model, xt, t, params), x1 - x0)
    return de.scale(de.sum(de.square(resid)), 1.0 / x0.shape[0])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays and a new state."""
    if len(params) != len(grads):
        raise de.ShapeError(f"adam_step: {len(params)} parameter blocks but {len(grads)} gradients")
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise de.ShapeError(f"adam_step: gradient {g.shape} vs parameter {np.shape(p)} in block {i}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient in parameter block {i}")
        mi = b1 * m[i]
        mi += (1.0 - b1) * g
        vi = b2 * v[i]
        vi += (1.0 - b2) * (g * g)
        denom = np.sqrt(vi / c2)
        denom += state.eps
        step_ = mi / c1
        step_ /= denom
        step_ *= state.lr
        new_p.append(p - step_)
        new_m.append(mi)
        new_v.append(vi)
    return new_p, replace(state, step=step, m=new_m, v=new_v)


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 5000
    lr: float = 1e-3
    seed: int = 0
    dataset: str = "hexagon"
    hidden: tuple[int, ...] = (64, 64)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1 (got {self.iterations})")


Sampler = Callable[[np.random.Generator, int], np.ndarray]


def train(sampler: Sampler, dim: int, config: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> tuple[MlpVectorField, list[float]]:
    """Fit a velocity field by conditional flow matching.

    ``sampler(rng, n)`` returns ``n`` data points of dimension ``dim``; base
    points are standard normal and ``t`` is uniform on [0, 1].
    """
    config.validate()
    model = init_mlp(dim, config.hidden, config.seed)
    rng = make_rng(config.seed, 4)
    state = AdamState(lr=config.lr)
    params = model.params
    losses = []
    B = config.batch_size
    for it in range(config.iterations):
        x1 = np.asarray(sampler(rng, B), dtype=np.float64).reshape(B, dim)
        x0 = standard_normal(rng, B * dim).reshape(B, dim)
        t = rng.random(B)
        leaves = [de.leaf(p) for p in params]
        loss = cfm_loss(model, x0, x1, t, leaves)
        value = float(loss.value)
        if not np.isfinite(value):
            raise DivergenceError(it, value)
        de.backward(loss)
        params, state = adam_step(params, [p.grad for p in leaves], state)
        losses.append(value)
        if callback is not None:
            callback(it, value)
        if it % 500 == 0:
            log.debug("iter %d loss %.6f", it, value)
    return model.with_params(params), losses


# ---------------------------------------------------------------------------
# checkpoint I/O


def checkpoint_bytes(model: MlpVectorField) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, model.dim, len(model.weights))]
    out += [struct.pack("<II", *w.shape) for w in model.weights]
    for w, b in zip(model.weights, model.biases):
        out += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
    return b"".join(out)


def save_checkpoint(model: MlpVectorField, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MlpVectorField:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(buf: bytes) -> MlpVectorField:
    if buf[:8] != CKPT_MAGIC:
        raise BadMagic(f"bad magic {buf[:8]!r}")
    if len(buf) < 20:
        raise Truncated("checkpoint header truncated")
    version, dim, n_layers = struct.unpack("<III", buf[8:20])
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 20
    if len(buf) < pos + 8 * n_layers:
        raise Truncated("layer table truncated")
    shapes = [struct.unpack("<II", buf[pos + 8 * i: pos + 8 * i + 8]) for i in range(n_layers)]
    pos += 8 * n_layers
    need = sum(8 * (r * c + r) for r, c in shapes)
    if len(buf) - pos != need:
        raise Truncated(f"payload is {len(buf) - pos} bytes, header declares {need}")
    weights, biases = [], []
    for r, c in shapes:
        weights.append(np.frombuffer(buf, "<f8", r * c, pos).reshape(r, c).astype(np.float64))
        pos += 8 * r * c
        biases.append(np.frombuffer(buf, "<f8", r, pos).astype(np.float64))
        pos += 8 * r
    n_freqs, rem = divmod(shapes[0][1] - dim, 2) if shapes else (0, 1)
    if rem or n_freqs < 0:
        raise CheckpointError(f"first layer width {shapes[0][1] if shapes else None} inconsistent with dim {dim}")
    return MlpVectorField(dim, weights, biases, time_freqs(n_freqs))
