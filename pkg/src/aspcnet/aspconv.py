"""Adaptive spatial pattern (ASP) convolution.

An ASP layer samples its input on a dilated ``p x q`` grid around each
output pixel, displaces every sampling point by a learned fractional offset,
reads the displaced location by bilinear interpolation, scales it by a
learned modulation mask and contracts the result with the kernel weights.
Offsets and masks come from two small regular convolutions applied to the
same input. With those branches at zero the layer is a plain dilated
convolution, and with dilation 1 it is a modulated deformable convolution.

Sampling happens in the zero-padded coordinate frame: the input is padded
by the "same" amount for the dilated extent and every sampling coordinate
is clamped to the bounds of the padded map. Undisplaced grid points thus
always land inside the frame (reproducing zero-padded convolution), and
offsets that run off the frame saturate against the zero border.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .ops import conv_output_geometry
from .rng import Rng
from .tensor import Tensor, as_tensor, get_default_dtype, record


@dataclass(frozen=True)
class DilatedGrid:
    """Sampling offsets of a ``p x q`` kernel at dilation ``rate``.

    ``points`` is a ``(p*q, 2)`` integer array of (row, col) displacements
    from the output pixel, in row-major kernel order.
    """

    p: int
    q: int
    rate: int
    points: np.ndarray

    @property
    def extent(self) -> tuple[int, int]:
        return (self.p + (self.p - 1) * (self.rate - 1), self.q + (self.q - 1) * (self.rate - 1))

    def __len__(self) -> int:
        return self.p * self.q


def dilated_extent(k: int, rate: int) -> int:
    return k + (k - 1) * (rate - 1)


def build_dilated_grid(p: int, q: int, rate: int = 1) -> DilatedGrid:
    if p < 1 or q < 1 or p % 2 == 0 or q % 2 == 0:
        raise ValueError(f"kernel extents must be odd and positive, got {p}x{q}")
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    rows = (np.arange(p) - (p - 1) // 2) * rate
    cols = (np.arange(q) - (q - 1) // 2) * rate
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    points = np.stack([rr.ravel(), cc.ravel()], axis=1)
    points.setflags(write=False)
    return DilatedGrid(p, q, rate, points)


# ---------------------------------------------------------------------------
# bilinear interpolation
# ---------------------------------------------------------------------------

class _Corners:
    """Corner indices and fractional weights for a batch of coordinates."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, H: int, W: int):
        if np.isnan(rows).any() or np.isnan(cols).any():
            raise ValueError("NaN sampling coordinate")
        self.inside_r = (rows >= 0) & (rows <= H - 1)
        self.inside_c = (cols >= 0) & (cols <= W - 1)
        r = np.clip(rows, 0, H - 1)
        c = np.clip(cols, 0, W - 1)
        r0 = np.floor(r).astype(np.int64)
        c0 = np.floor(c).astype(np.int64)
        # keep r0 + 1 inside the map; at the last row the weight moves to r1
        if H > 1:
            np.minimum(r0, H - 2, out=r0)
        if W > 1:
            np.minimum(c0, W - 2, out=c0)
        self.r0, self.c0 = r0, c0
        self.r1 = np.minimum(r0 + 1, H - 1)
        self.c1 = np.minimum(c0 + 1, W - 1)
        self.fr = (r - r0).astype(rows.dtype)[..., None]
        self.fc = (c - c0).astype(cols.dtype)[..., None]


def _bilinear_values(flat: np.ndarray, base: np.ndarray, W: int, k: _Corners):
    """Corner values of ``flat`` ((N*H*W, C)); ``base`` offsets each batch item."""
    v00 = flat[base + k.r0 * W + k.c0]
    v01 = flat[base + k.r0 * W + k.c1]
    v10 = flat[base + k.r1 * W + k.c0]
    v11 = flat[base + k.r1 * W + k.c1]
    return v00, v01, v10, v11


def _interp(k: _Corners, v00, v01, v10, v11):
    fr, fc = k.fr, k.fc
    return (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11)


def _scatter_corners(gflat: np.ndarray, base: np.ndarray, W: int, k: _Corners, g: np.ndarray) -> None:
    fr, fc = k.fr, k.fc
    C = gflat.shape[1]
    for ri, ci, w in (
        (k.r0, k.c0, (1 - fr) * (1 - fc)),
        (k.r0, k.c1, (1 - fr) * fc),
        (k.r1, k.c0, fr * (1 - fc)),
        (k.r1, k.c1, fr * fc),
    ):
        idx = (base + ri * W + ci).reshape(-1)
        np.add.at(gflat, idx, (g * w).reshape(-1, C))


def _coord_grads(k: _Corners, g: np.ndarray, v00, v01, v10, v11):
    """d(value)/d(row), d(value)/d(col) contracted with ``g`` over channels."""
    fr, fc = k.fr, k.fc
    d_r = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
    d_c = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
    gr = (g * d_r).sum(axis=-1) * k.inside_r
    gc = (g * d_c).sum(axis=-1) * k.inside_c
    return gr, gc


def bilinear_sample(feature_map, rows, cols) -> Tensor:
    """Sample an ``(H, W, C)`` map at fractional (row, col) coordinates.

    Coordinates are clamped to ``[0, H-1] x [0, W-1]``; each result is the
    area-weighted mix of the four surrounding pixels. Differentiable in the
    map and in both coordinate arrays (zero through a saturated clamp).
    Returns shape ``rows.shape + (C,)``.
    """
    fm, rows, cols = as_tensor(feature_map), as_tensor(rows), as_tensor(cols)
    if fm.ndim != 3:
        raise ValueError(f"bilinear_sample expects an (H, W, C) map, got {fm.shape}")
    if rows.shape != cols.shape:
        raise ValueError("row and column coordinate arrays differ in shape")
    H, W, C = fm.shape
    flat = fm.data.reshape(H * W, C)
    k = _Corners(rows.data, cols.data, H, W)
    base = np.zeros((), dtype=np.int64)
    corners = _bilinear_values(flat, base, W, k)
    out = _interp(k, *corners)

    def vjp(g):
        gm = None
        if fm.requires_grad:
            gflat = np.zeros_like(flat)
            _scatter_corners(gflat, base, W, k, g)
            gm = gflat.reshape(H, W, C)
        gr, gc = _coord_grads(k, g, *corners)
        return gm, gr.astype(rows.dtype), gc.astype(cols.dtype)

    return record("bilinear_sample", out, (fm, rows, cols), vjp)


# ---------------------------------------------------------------------------
# grid samplers
# ---------------------------------------------------------------------------

def _frame(x: Tensor, grid: DilatedGrid, stride: int):
    N, H, W, C = x.shape
    Ho, Wo, pads = conv_output_geometry(H, W, grid.p, grid.q, stride, "same", grid.rate)
    return Ho, Wo, pads


def _grid_coords(grid: DilatedGrid, Ho: int, Wo: int, stride: int, dtype):
    """Undisplaced sampling coordinates in the padded frame, ``(Ho, Wo, K)`` each."""
    ekh, ekw = grid.extent
    cr = np.arange(Ho) * stride + (ekh - 1) // 2
    cc = np.arange(Wo) * stride + (ekw - 1) // 2
    rows = cr[:, None, None] + grid.points[None, None, :, 0]
    cols = cc[None, :, None] + grid.points[None, None, :, 1]
    rows = np.broadcast_to(rows, (Ho, Wo, len(grid)))
    cols = np.broadcast_to(cols, (Ho, Wo, len(grid)))
    return rows.astype(dtype), cols.astype(dtype)


def grid_gather(x, grid: DilatedGrid, stride: int = 1) -> Tensor:
    """Integer gather of every grid point: ``(N,H,W,C) -> (N,Ho,Wo,K,C)``.

    Out-of-map points read the zero padding.
    """
    x = as_tensor(x)
    N, H, W, C = x.shape
    Ho, Wo, (pt, pb, pl, pr) = _frame(x, grid, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ekh, ekw = grid.extent
    r_c, c_c = (ekh - 1) // 2, (ekw - 1) // 2
    rspan, cspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    K = len(grid)

    def window(arr, k):
        r0 = r_c + grid.points[k, 0]
        c0 = c_c + grid.points[k, 1]
        return arr[:, r0:r0 + rspan:stride, c0:c0 + cspan:stride, :]

    out = np.empty((N, Ho, Wo, K, C), dtype=x.dtype)
    for k in range(K):
        out[:, :, :, k, :] = window(xp, k)

    def vjp(g):
        gxp = np.zeros_like(xp)
        for k in range(K):
            window(gxp, k)[...] += g[:, :, :, k, :]
        return (gxp[:, pt:pt + H, pl:pl + W, :],)

    return record("grid_gather", out, (x,), vjp)


def asp_sample(x, grid: DilatedGrid, offsets=None, mask=None, stride: int = 1) -> Tensor:
    """Displaced, modulated grid sampling: ``(N,H,W,C) -> (N,Ho,Wo,K,C)``.

    ``offsets`` holds ``2*K`` channels per output pixel ordered
    ``(row_0, col_0, row_1, col_1, ...)``; ``mask`` holds ``K`` channels of
    multiplicative weights. Either may be ``None`` (zero offsets, unit
    mask).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) input, got {x.shape}")
    N, H, W, C = x.shape
    K = len(grid)
    Ho, Wo, (pt, pb, pl, pr) = _frame(x, grid, stride)
    if offsets is not None:
        offsets = as_tensor(offsets)
        if offsets.shape != (N, Ho, Wo, 2 * K):
            raise ValueError(f"offsets must have shape {(N, Ho, Wo, 2 * K)}, got {offsets.shape}")
    if mask is not None:
        mask = as_tensor(mask)
        if mask.shape != (N, Ho, Wo, K):
            raise ValueError(f"mask must have shape {(N, Ho, Wo, K)}, got {mask.shape}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    Hp, Wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(N * Hp * Wp, C)
    rows, cols = _grid_coords(grid, Ho, Wo, stride, x.dtype)
    rows = np.broadcast_to(rows, (N, Ho, Wo, K))
    cols = np.broadcast_to(cols, (N, Ho, Wo, K))
    if offsets is not None:
        off = offsets.data.reshape(N, Ho, Wo, K, 2)
        rows = rows + off[..., 0]
        cols = cols + off[..., 1]
    k = _Corners(rows, cols, Hp, Wp)
    base = (np.arange(N) * (Hp * Wp)).reshape(N, 1, 1, 1)
    corners = _bilinear_values(flat, base, Wp, k)
    sampled = _interp(k, *corners)
    m = mask.data[..., None] if mask is not None else None
    out = sampled * m if m is not None else sampled

    inputs = [x]
    if offsets is not None:
        inputs.append(offsets)
    if mask is not None:
        inputs.append(mask)

    def vjp(g):
        gs = g * m if m is not None else g
        grads = []
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            _scatter_corners(gflat, base, Wp, k, gs)
            grads.append(gflat.reshape(N, Hp, Wp, C)[:, pt:pt + H, pl:pl + W, :])
        else:
            grads.append(None)
        if offsets is not None:
            gr, gc = _coord_grads(k, gs, *corners)
            grads.append(np.stack([gr, gc], axis=-1).reshape(N, Ho, Wo, 2 * K).astype(x.dtype))
        if mask is not None:
            grads.append((g * sampled).sum(axis=-1))
        return grads

    return record("asp_sample", out.astype(x.dtype, copy=False), tuple(inputs), vjp)


# ---------------------------------------------------------------------------
# convolutions built on the samplers
# ---------------------------------------------------------------------------

def _contract(cols: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    p, q, C, F = weight.shape
    w = ops.reshape(weight, (p * q, C, F))
    out = ops.einsum("nhwkc,kcf->nhwf", cols, w)
    return ops.bias_add(out, bias) if bias is not None else out


def _check_weight(weight: Tensor, x: Tensor) -> None:
    if weight.ndim != 4 or weight.shape[2] != x.shape[-1]:
        raise ValueError(f"kernel {weight.shape} does not match input channels {x.shape[-1]}")


def dilated_conv_forward(weight, x, rate: int = 1, stride: int = 1, bias=None) -> Tensor:
    """Zero-padded dilated convolution computed by gathering grid points."""
    weight, x = as_tensor(weight), as_tensor(x)
    _check_weight(weight, x)
    grid = build_dilated_grid(weight.shape[0], weight.shape[1], rate)
    return _contract(grid_gather(x, grid, stride), weight, bias)


def deformable_conv_forward(weight, x, offsets, stride: int = 1, bias=None) -> Tensor:
    """Deformable convolution: every tap displaced by its own offset field."""
    weight, x = as_tensor(weight), as_tensor(x)
    _check_weight(weight, x)
    grid = build_dilated_grid(weight.shape[0], weight.shape[1], 1)
    offsets = as_tensor(offsets)
    if offsets.ndim != 4 or offsets.shape[-1] != 2 * len(grid):
        raise ValueError(f"offset field needs {2 * len(grid)} channels, got shape {offsets.shape}")
    return _contract(asp_sample(x, grid, offsets, None, stride), weight, bias)


def mask_activation(raw) -> Tensor:
    """Modulation in ``(0, 2)``: ``2 * sigmoid(raw)``, exactly 1 at zero."""
    return ops.scale(ops.sigmoid(raw), 2.0)


BRANCH_KERNEL = 3


class AspConvLayer:
    """Trainable ASP convolution with its offset and mask branches.

    Args:
        in_channels: input channel count.
        out_channels: number of filters.
        kernel: odd base kernel extent (square).
        rate: dilation rate of the sampling grid.
        stride: output stride ("same" padding).
        rng: initializer stream for the main kernel (Glorot uniform).
        bias: whether to add a per-filter bias (zero-initialized).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, rate: int = 1,
                 stride: int = 1, rng: Optional[Rng] = None, bias: bool = True):
        self.grid = build_dilated_grid(kernel, kernel, rate)
        self.stride = stride
        K = len(self.grid)
        kk = kernel * kernel
        rng = rng or Rng(0)
        self.weight = Tensor(rng.glorot_uniform((kernel, kernel, in_channels, out_channels),
                                                kk * in_channels, kk * out_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, get_default_dtype()), requires_grad=True) if bias else None
        b = BRANCH_KERNEL
        self.offset_weight = Tensor(np.zeros((b, b, in_channels, 2 * K), get_default_dtype()), requires_grad=True)
        self.offset_bias = Tensor(np.zeros(2 * K, get_default_dtype()), requires_grad=True)
        self.mask_weight = Tensor(np.zeros((b, b, in_channels, K), get_default_dtype()), requires_grad=True)
        self.mask_bias = Tensor(np.zeros(K, get_default_dtype()), requires_grad=True)

    @property
    def rate(self) -> int:
        return self.grid.rate

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        params.update(offset_weight=self.offset_weight, offset_bias=self.offset_bias,
                      mask_weight=self.mask_weight, mask_bias=self.mask_bias)
        return params

    def branches(self, x) -> tuple[Tensor, Tensor]:
        """Offset field ``(N,Ho,Wo,2K)`` and mask ``(N,Ho,Wo,K)`` for input ``x``."""
        offsets = ops.bias_add(ops.conv2d(x, self.offset_weight, self.stride, "same"), self.offset_bias)
        raw = ops.bias_add(ops.conv2d(x, self.mask_weight, self.stride, "same"), self.mask_bias)
        return offsets, mask_activation(raw)

    def sample(self, x) -> Tensor:
        offsets, mask = self.branches(x)
        return asp_sample(x, self.grid, offsets, mask, self.stride)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        _check_weight(self.weight, x)
        return _contract(self.sample(x), self.weight, self.bias)


def asp_conv_forward(layer: AspConvLayer, x) -> Tensor:
    return layer(x)
