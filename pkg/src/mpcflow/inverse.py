"""Forward operators, simulated measurements and terminal losses.

Images are handled as flattened row-major vectors of length ``h * w``.
Every linear operator carries a structured ``apply``/``adjoint`` pair and
can materialize itself as a sparse matrix for cross-checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import diffengine as de
from .data import make_rng, standard_normal

TAGS = ("identity", "mask", "box-mask", "gaussian-blur", "downsample2", "radon", "nonlinear-blur")
LINEAR_TAGS = TAGS[:-1]

TerminalLoss = Callable[[de.Node], de.Node]


class NonlinearAdjointError(TypeError):
    pass


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    r = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def radon_matrix(h: int, w: int, n_angles: int) -> sp.csr_matrix:
    """Pixel-midpoint ray sums for parallel beams over ``n_angles`` angles in [0, pi).

    Each pixel centre is projected onto a detector with ``w`` unit bins
    centred on the image centre and adds its value to the bin it lands in.
    Rows are ordered angle-major.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    px = (xx + 0.5 - w / 2.0).ravel()
    py = (h / 2.0 - (yy + 0.5)).ravel()
    rows, cols = [], []
    for a, theta in enumerate(np.arange(n_angles) * np.pi / n_angles):
        s = px * np.cos(theta) + py * np.sin(theta)
        bins = np.floor(s + w / 2.0).astype(np.int64)
        keep = (bins >= 0) & (bins < w)
        rows.append(a * w + bins[keep])
        cols.append(np.flatnonzero(keep))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_angles * w, h * w))


@dataclass(eq=False)
class ForwardOperator:
    tag: str
    shape: tuple[int, int]
    keep: np.ndarray | None = None           # mask / box-mask / downsample2: kept flat indices
    blur_sigma: float = 1.0
    n_angles: int = 18
    gamma: float = 2.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown operator tag {self.tag!r}; expected one of {TAGS}")
        self._kernel = gaussian_kernel(self.blur_sigma) if "blur" in self.tag else None
        self._radon = radon_matrix(*self.shape, self.n_angles) if self.tag == "radon" else None

    @property
    def in_dim(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def out_dim(self) -> int:
        if self.keep is not None:
            return len(self.keep)
        if self.tag == "radon":
            return self._radon.shape[0]
        return self.in_dim

    @property
    def linear(self) -> bool:
        return self.tag in LINEAR_TAGS

    # structured numpy maps ---------------------------------------------------

    def _blur(self, x: np.ndarray) -> np.ndarray:
        img = x.reshape(self.shape)
        return ndimage.correlate(img, self._kernel, mode="constant", cval=0.0).ravel()

    def _fwd(self, x: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return x.copy()
        if self.keep is not None:
            return x[self.keep]
        if self.tag == "gaussian-blur":
            return self._blur(x)
        if self.tag == "radon":
            return self._radon @ x
        raise NonlinearAdjointError(f"{self.tag} is not linear")

    def _adj(self, y: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return y.copy()
        if self.keep is not None:
            out = np.zeros(self.in_dim)
            out[self.keep] = y
            return out
        if self.tag == "gaussian-blur":
            return self._blur(y)  # symmetric kernel, zero padding: self-adjoint
        if self.tag == "radon":
            return self._radon.T @ y
        raise NonlinearAdjointError("nonlinear operator has no adjoint")

    # public ------------------------------------------------------------------

    def apply(self, x):
        """A(x). Nodes in, nodes out; arrays in, arrays out."""
        if isinstance(x, de.Node):
            if x.shape != (self.in_dim,):
                raise de.ShapeError(f"{self.tag}.apply: input {x.shape}, expected ({self.in_dim},)")
            if self.tag == "nonlinear-blur":
                return de.tanh(de.scale(de.linop(x, self._blur, self._blur, "blur"), self.gamma))
            return de.linop(x, self._fwd, self._adj, self.tag)
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.shape != (self.in_dim,):
            raise de.ShapeError(f"{self.tag}.apply: input {x.shape}, expected ({self.in_dim},)")
        if self.tag == "nonlinear-blur":
            return np.tanh(self.gamma * self._blur(x))
        return self._fwd(x)

    def apply_adjoint(self, y) -> np.ndarray:
        if not self.linear:
            raise NonlinearAdjointError("nonlinear operator has no adjoint")
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape != (self.out_dim,):
            raise de.ShapeError(f"{self.tag}.apply_adjoint: input {y.shape}, expected ({self.out_dim},)")
        return self._adj(y)

    def matrix(self) -> sp.csr_matrix:
        """Explicit (sparse) matrix of a linear operator."""
        if not self.linear:
            raise NonlinearAdjointError(f"{self.tag} has no matrix representation")
        if self.tag == "radon":
            return self._radon.copy()
        if self.tag == "identity":
            return sp.identity(self.in_dim, format="csr")
        if self.keep is not None:
            m = len(self.keep)
            return sp.csr_matrix((np.ones(m), (np.arange(m), self.keep)), shape=(m, self.in_dim))
        cols = [self._blur(e) for e in np.eye(self.in_dim)]
        return sp.csr_matrix(np.array(cols).T)

    def mask_bitmap(self) -> np.ndarray:
        """Kept pixels as a 0/1 image (all ones for operators that observe every pixel)."""
        out = np.zeros(self.in_dim)
        out[self.keep if self.keep is not None else slice(None)] = 1.0
        return out.reshape(self.shape)

    def to_spec(self) -> dict:
        return {"op": self.tag, **self.params}


# ---------------------------------------------------------------------------
# constructors


def identity(shape) -> ForwardOperator:
    return ForwardOperator("identity", tuple(shape))


def random_mask(shape, keep_fraction: float, seed: int) -> ForwardOperator:
    """Observe a random ``keep_fraction`` of the pixels (0.3 means 70% removed)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1] (got {keep_fraction})")
    n = shape[0] * shape[1]
    kept = np.sort(make_rng(seed, 6).permutation(n)[: int(round(keep_fraction * n))])
    return ForwardOperator("mask", tuple(shape), keep=kept,
                           params={"keep_fraction": keep_fraction, "seed": seed})


def index_mask(shape, keep) -> ForwardOperator:
    return ForwardOperator("mask", tuple(shape), keep=np.sort(np.asarray(keep, dtype=np.int64)))


def box_mask(shape, box: int) -> ForwardOperator:
    h, w = shape
    inside = np.zeros(shape, dtype=bool)
    r0, c0 = (h - box) // 2, (w - box) // 2
    inside[r0:r0 + box, c0:c0 + box] = True
    return ForwardOperator("box-mask", tuple(shape), keep=np.flatnonzero(~inside.ravel()),
                           params={"box": box})


def downsample2(shape) -> ForwardOperator:
    idx = np.arange(shape[0] * shape[1]).reshape(shape)[::2, ::2].ravel()
    return ForwardOperator("downsample2", tuple(shape), keep=idx)


def gaussian_blur(shape, sigma: float) -> ForwardOperator:
    return ForwardOperator("gaussian-blur", tuple(shape), blur_sigma=sigma, params={"sigma": sigma})


def radon(shape, n_angles: int = 18) -> ForwardOperator:
    return ForwardOperator("radon", tuple(shape), n_angles=n_angles, params={"n_angles": n_angles})


def nonlinear_blur(shape, sigma: float = 1.0, gamma: float = 2.0) -> ForwardOperator:
    return ForwardOperator("nonlinear-blur", tuple(shape), blur_sigma=sigma, gamma=gamma,
                           params={"sigma": sigma, "gamma": gamma})


def operator_from_spec(spec: dict, shape) -> ForwardOperator:
    """Build an operator from a config block such as ``{"op": "mask", "keep_fraction": 0.3, "seed": 7}``."""
    spec = dict(spec)
    tag = spec.pop("op", None)
    builders = {
        "identity": lambda: identity(shape),
        "mask": lambda: random_mask(shape, float(spec["keep_fraction"]), int(spec.get("seed", 0))),
        "box-mask": lambda: box_mask(shape, int(spec.get("box", shape[0] // 2))),
        "gaussian-blur": lambda: gaussian_blur(shape, float(spec.get("sigma", 1.0))),
        "downsample2": lambda: downsample2(shape),
        "radon": lambda: radon(shape, int(spec.get("n_angles", 18))),
        "nonlinear-blur": lambda: nonlinear_blur(shape, float(spec.get("sigma", 1.0)),
                                                 float(spec.get("gamma", 2.0))),
    }
    if tag not in builders:
        raise ValueError(f"unknown operator {tag!r}; expected one of {sorted(builders)}")
    try:
        return builders[tag]()
    except KeyError as e:
        raise ValueError(f"operator {tag!r} is missing field {e.args[0]!r}") from None


# ---------------------------------------------------------------------------
# measurements and losses


@dataclass(eq=False)
class Observation:
    y: np.ndarray
    sigma: float
    op: ForwardOperator
    x_true: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != (self.op.out_dim,):
            raise de.ShapeError(f"Observation: y {self.y.shape} vs operator output ({self.op.out_dim},)")
        if self.sigma < 0:
            raise ValueError(f"noise level must be >= 0 (got {self.sigma})")


def simulate_measurement(op: ForwardOperator, x_true, sigma: float, seed: int) -> Observation:
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0 (got {sigma})")
    x_true = np.asarray(x_true, dtype=np.float64).ravel()
    clean = op.apply(x_true)
    y = clean + sigma * standard_normal(make_rng(seed, 5), clean.size) if sigma > 0 else clean
    return Observation(y, sigma, op, x_true)


def terminal_loss(obs: Observation, prefactor: bool = True) -> TerminalLoss:
    """x -> c ||A(x) - y||^2 with c = 1/(2 sigma^2) (1/2 if sigma = 0), or c = 1 without prefactor."""
    if not prefactor:
        c = 1.0
    elif obs.sigma > 0:
        c = 1.0 / (2.0 * obs.sigma ** 2)
    else:
        c = 0.5
    y = obs.y

    def phi(x) -> de.Node:
        return de.scale(de.sqnorm(de.sub(obs.op.apply(de.as_node(x)), y)), c)

    phi.weight = c
    return phi


def corner_target_loss(x_target) -> TerminalLoss:
    target = np.asarray(x_target, dtype=np.float64)

    def phi(x) -> de.Node:
        return de.sqnorm(de.sub(x, target))

    return phi


def degraded_image(obs: Observation) -> np.ndarray:
    """The measurement laid out on the image grid (zeros where unobserved), for display and baselines."""
    op = obs.op
    if op.tag in ("identity", "gaussian-blur", "nonlinear-blur"):
        return obs.y.reshape(op.shape).copy()
    if op.keep is not None:
        return op.apply_adjoint(obs.y).reshape(op.shape)
    return op.apply_adjoint(obs.y).reshape(op.shape) / max(op.n_angles, 1)
