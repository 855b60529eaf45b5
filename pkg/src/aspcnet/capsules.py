"""Capsule layers and dynamic routing.

Capsule activations are ordinary tensors with the capsule dimension last:
``(N, H, W, types, dim)`` for spatial capsule maps and ``(N, count, dim)``
after flattening.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .aspconv import BRANCH_KERNEL, asp_sample, build_dilated_grid, mask_activation
from .rng import Rng
from .tensor import Tensor, as_tensor, get_default_dtype, record

SQUASH_EPS = 1e-9
CAPS_INITS = ("routing", "glorot")
# The "1" in |s|^2 / (1 + |s|^2). Exposed so the self-test can inject a fault.
SQUASH_ONE = 1.0


def squash(s, axis: int = -1) -> Tensor:
    """``v = |s|^2 / (1 + |s|^2) * s / |s|`` along ``axis``."""
    s = as_tensor(s)
    ax = axis % s.ndim
    sd = s.data
    n = np.sqrt((sd * sd).sum(axis=ax, keepdims=True))
    one = SQUASH_ONE
    denom = (one + n * n) * (n + SQUASH_EPS)
    f = n * n / denom
    out = f * sd

    def vjp(g):
        # d f / d n, then chain through n = |s|
        d_denom = 2 * n * (n + SQUASH_EPS) + (one + n * n)
        df = (2 * n * denom - n * n * d_denom) / (denom * denom)
        sg = (sd * g).sum(axis=ax, keepdims=True)
        safe_n = np.where(n > 0, n, 1)
        radial = np.where(n > 0, df * sg / safe_n, 0)
        return (f * g + radial * sd,)

    return record("squash", out.astype(sd.dtype, copy=False), (s,), vjp)


@dataclass
class RoutingState:
    """Logits and coupling coefficients seen at each routing iteration."""

    logits: list = field(default_factory=list)
    couplings: list = field(default_factory=list)


def dynamic_routing(votes, iterations: int = 3, state: Optional[RoutingState] = None) -> Tensor:
    """Route ``(B, I, J, D)`` votes to ``(B, J, D)`` output capsules.

    Logits start at zero for every call. Each iteration takes a softmax over
    the output capsules ``j``, forms the coupled vote sum, squashes it and,
    except after the last iteration, adds the vote/output agreement to the
    logits. Gradients flow through every iteration.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    votes = as_tensor(votes)
    if votes.ndim != 4:
        raise ValueError(f"votes must be (batch, inputs, outputs, dim), got {votes.shape}")
    B, I, J, D = votes.shape
    logits = Tensor(np.zeros((B, I, J), dtype=votes.dtype), dtype=votes.dtype)
    v = None
    for it in range(iterations):
        c = ops.softmax(logits, axis=2)
        if state is not None:
            state.logits.append(logits.data)
            state.couplings.append(c.data)
        s = ops.einsum("bijd,bij->bjd", votes, c)
        v = squash(s, axis=-1)
        if it < iterations - 1:
            logits = ops.add(logits, ops.einsum("bijd,bjd->bij", votes, v))
    return v


def convert_to_caps(x) -> Tensor:
    """``(N, H, W, C) -> (N, H, W, C, 1)``: every channel becomes a 1-D capsule."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected (N, H, W, C), got {x.shape}")
    return ops.reshape(x, x.shape + (1,))


def flatten_caps(c) -> Tensor:
    """``(N, H, W, T, D) -> (N, H*W*T, D)``."""
    c = as_tensor(c)
    if c.ndim != 5:
        raise ValueError(f"expected (N, H, W, T, D), got {c.shape}")
    N, H, W, T, D = c.shape
    return ops.reshape(c, (N, H * W * T, D))


def caps_to_scalars(c, keepdims: bool = False) -> Tensor:
    """Length of each class capsule: ``(N, T, D) -> (N, T)``."""
    return ops.l2norm(c, axis=-1, keepdims=keepdims)


def _transform_init(rng: Rng, init: str, shape, fan_in: int, fan_out: int, outputs: int) -> np.ndarray:
    if init == "routing":
        return rng.routing_uniform(shape, fan_in, outputs)
    if init == "glorot":
        return rng.glorot_uniform(shape, fan_in, fan_out)
    raise ValueError(f"unknown capsule init {init!r}; expected one of {CAPS_INITS}")


class AspCapsLayer:
    """Convolutional capsule layer whose receptive field is an ASP grid.

    Input capsules at the ``p x q`` grid positions (displaced by the offset
    field and scaled by the mask, both computed from the input flattened to
    ``types * dim`` channels) vote for every output capsule type through a
    transform matrix shared across positions. Routing runs independently at
    every output position.
    """

    def __init__(self, in_types: int, in_dim: int, out_types: int, out_dim: int,
                 kernel: int = 3, routing_iters: int = 3, rng: Optional[Rng] = None, init: str = "routing"):
        self.in_types, self.in_dim = in_types, in_dim
        self.out_types, self.out_dim = out_types, out_dim
        self.routing_iters = routing_iters
        self.grid = build_dilated_grid(kernel, kernel, 1)
        rng = rng or Rng(0)
        kk = kernel * kernel
        shape = (kernel, kernel, in_types, out_types, out_dim, in_dim)
        self.weight = Tensor(_transform_init(rng, init, shape, kk * in_types * in_dim,
                                             kk * out_types * out_dim, out_types), requires_grad=True)
        C, K, b = in_types * in_dim, len(self.grid), BRANCH_KERNEL
        dt = get_default_dtype()
        self.offset_weight = Tensor(np.zeros((b, b, C, 2 * K), dt), requires_grad=True)
        self.offset_bias = Tensor(np.zeros(2 * K, dt), requires_grad=True)
        self.mask_weight = Tensor(np.zeros((b, b, C, K), dt), requires_grad=True)
        self.mask_bias = Tensor(np.zeros(K, dt), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "offset_weight": self.offset_weight, "offset_bias": self.offset_bias,
                "mask_weight": self.mask_weight, "mask_bias": self.mask_bias}

    def _check(self, caps: Tensor) -> None:
        if caps.ndim != 5 or caps.shape[3:] != (self.in_types, self.in_dim):
            raise ValueError(f"expected capsules (N, H, W, {self.in_types}, {self.in_dim}), got {caps.shape}")

    def gather(self, caps) -> Tensor:
        """Input capsules at every grid point: ``(N, H, W, p*q, T_in, D_in)``."""
        caps = as_tensor(caps)
        self._check(caps)
        N, H, W, T, D = caps.shape
        flat = ops.reshape(caps, (N, H, W, T * D))
        offsets = ops.bias_add(ops.conv2d(flat, self.offset_weight, 1, "same"), self.offset_bias)
        raw = ops.bias_add(ops.conv2d(flat, self.mask_weight, 1, "same"), self.mask_bias)
        cols = asp_sample(flat, self.grid, offsets, mask_activation(raw), 1)
        return ops.reshape(cols, (N, H, W, len(self.grid), T, D))

    def predict_votes(self, caps) -> Tensor:
        """Votes ``(N, H, W, p, q, T_in, T_out, D_out)``."""
        cols = self.gather(caps)
        votes = self._votes(cols)
        N, H, W = votes.shape[:3]
        p, q = self.grid.p, self.grid.q
        return ops.reshape(votes, (N, H, W, p, q, self.in_types, self.out_types, self.out_dim))

    def _votes(self, cols: Tensor) -> Tensor:
        p, q = self.grid.p, self.grid.q
        w = ops.reshape(self.weight, (p * q, self.in_types, self.out_types, self.out_dim, self.in_dim))
        return ops.einsum("nhwkie,kijde->nhwkijd", cols, w)

    def __call__(self, caps, state: Optional[RoutingState] = None) -> Tensor:
        cols = self.gather(caps)
        votes = self._votes(cols)
        N, H, W, K, Ti, To, Do = votes.shape
        votes = ops.reshape(votes, (N * H * W, K * Ti, To, Do))
        v = dynamic_routing(votes, self.routing_iters, state)
        return ops.reshape(v, (N, H, W, To, Do))


def asp_caps_forward(layer: AspCapsLayer, caps, state: Optional[RoutingState] = None) -> Tensor:
    return layer(caps, state)


class DigitalCapsLayer:
    """Fully connected capsule layer: one capsule per class."""

    def __init__(self, in_caps: int, in_dim: int, classes: int, out_dim: int = 16,
                 routing_iters: int = 3, rng: Optional[Rng] = None, init: str = "routing"):
        self.in_caps, self.in_dim = in_caps, in_dim
        self.classes, self.out_dim = classes, out_dim
        self.routing_iters = routing_iters
        rng = rng or Rng(0)
        shape = (classes, in_caps, out_dim, in_dim)
        self.weight = Tensor(_transform_init(rng, init, shape, in_caps * in_dim, classes * out_dim, classes),
                             requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def predict_votes(self, caps) -> Tensor:
        """Votes ``(N, in_caps, classes, out_dim)``."""
        caps = as_tensor(caps)
        if caps.ndim != 3 or caps.shape[1:] != (self.in_caps, self.in_dim):
            raise ValueError(f"expected capsules (N, {self.in_caps}, {self.in_dim}), got {caps.shape}")
        return ops.einsum("nie,jide->nijd", caps, self.weight)

    def __call__(self, caps, state: Optional[RoutingState] = None) -> Tensor:
        return dynamic_routing(self.predict_votes(caps), self.routing_iters, state)


def digital_caps_forward(layer: DigitalCapsLayer, caps, state: Optional[RoutingState] = None) -> Tensor:
    return layer(caps, state)
