"""Hyperspectral data handling: file formats, PCA, patches, splits, maps.

File formats (all integers little-endian):

* cube: ASCII line ``HSICUBE1 <H> <W> <D>\\n`` then ``H*W*D`` float32 values,
  band-sequential (``[band][row][col]``).
* labels: ASCII line ``HSIGT1 <H> <W> <T>\\n`` then ``H*W`` uint16 labels,
  row-major, 0 meaning unlabeled.
* palette: text lines ``class,r,g,b``.
* split: ``HSISPLIT1 <seed> <n_train>\\n`` then one ``row col`` line per
  training pixel.
* maps: binary PPM (``P6``).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """A file does not follow its documented format."""


# ---------------------------------------------------------------------------
# cube and label rasters
# ---------------------------------------------------------------------------

@dataclass
class HsiCube:
    """Band-sequential hyperspectral cube, ``data[band, row, col]``."""

    data: np.ndarray
    wavelengths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be (bands, height, width), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        if self.wavelengths is not None and len(self.wavelengths) != self.bands:
            raise ValueError("one wavelength per band required")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channels_last(self) -> np.ndarray:
        """``(H, W, D)`` view-copy used for patch extraction."""
        return np.ascontiguousarray(self.data.transpose(1, 2, 0))

    def pixels(self) -> np.ndarray:
        """``(H*W, D)`` matrix of spectra in row-major pixel order."""
        return self.data.reshape(self.bands, -1).T


@dataclass
class LabelRaster:
    """Per-pixel class labels in ``0..classes`` with 0 = unlabeled."""

    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("label raster must be 2-D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.classes):
            raise ValueError(f"labels must lie in 0..{self.classes}, found max {self.labels.max()}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def labeled_positions(self) -> np.ndarray:
        """``(K, 2)`` (row, col) of labeled pixels in row-major order."""
        return np.argwhere(self.labels > 0)


def _read_header(fh, magic: str, fields: int, path) -> list[int]:
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: missing header line")
    parts = line.decode("ascii", errors="replace").split()
    if not parts or parts[0] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic}")
    if len(parts) != fields + 1:
        raise FormatError(f"{path}: header needs {fields} extents")
    try:
        values = [int(v) for v in parts[1:]]
    except ValueError:
        raise FormatError(f"{path}: non-integer header field") from None
    if any(v < 0 for v in values):
        raise FormatError(f"{path}: negative header field")
    return values


def save_cube(cube: HsiCube, path: PathLike) -> None:
    D, H, W = cube.data.shape
    with open(path, "wb") as fh:
        fh.write(f"HSICUBE1 {H} {W} {D}\n".encode("ascii"))
        fh.write(cube.data.astype("<f4").tobytes())


def load_cube(path: PathLike) -> HsiCube:
    with open(path, "rb") as fh:
        H, W, D = _read_header(fh, "HSICUBE1", 3, path)
        payload = fh.read()
    n = H * W * D
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(D, H, W)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: cube contains non-finite values")
    return HsiCube(data.astype(np.float32))


def save_labels(labels: LabelRaster, path: PathLike) -> None:
    H, W = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"HSIGT1 {H} {W} {labels.classes}\n".encode("ascii"))
        fh.write(labels.labels.astype("<u2").tobytes())


def load_labels(path: PathLike) -> LabelRaster:
    with open(path, "rb") as fh:
        H, W, T = _read_header(fh, "HSIGT1", 3, path)
        payload = fh.read()
    if len(payload) != 2 * H * W:
        raise FormatError(f"{path}: expected {2 * H * W} payload bytes, found {len(payload)}")
    lab = np.frombuffer(payload, dtype="<u2").reshape(H, W).astype(np.int64)
    if lab.size and lab.max() > T:
        raise FormatError(f"{path}: label {lab.max()} exceeds class count {T}")
    return LabelRaster(lab, T)


def check_compatible(cube: HsiCube, labels: LabelRaster) -> None:
    if (cube.height, cube.width) != labels.shape:
        raise ValueError(f"cube is {cube.height}x{cube.width} but labels are {labels.shape[0]}x{labels.shape[1]}")


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    """Band means, ``(D, d)`` projection and output standardization."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @property
    def dims(self) -> int:
        return self.components.shape[1]

    def transform(self, pixels: np.ndarray) -> np.ndarray:
        proj = (pixels - self.mean) @ self.components
        return (proj - self.out_mean) / self.out_std


def fit_pca(cube: HsiCube, d: int, mask: Optional[np.ndarray] = None) -> PcaModel:
    """Principal components of the band covariance.

    Pixels are all of them by default, or those where ``mask`` is true.
    Eigenvectors are signed so their largest-magnitude entry is positive;
    each retained component is standardized to zero mean and unit variance
    over the same pixels.
    """
    D = cube.bands
    if not 1 <= d <= D:
        raise ValueError(f"cannot keep {d} components of a {D}-band cube")
    X = cube.pixels().astype(np.float64)
    if mask is not None:
        X = X[np.asarray(mask).reshape(-1)]
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two pixels")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if not np.all(np.isfinite(cov)):
        raise ValueError("non-finite band covariance")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    evals, evecs = evals[order], evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(d)])
    proj = Xc @ evecs
    out_mean = proj.mean(axis=0)
    out_std = proj.std(axis=0)
    out_std[out_std == 0] = 1.0
    return PcaModel(mean, evecs, np.maximum(evals, 0.0), out_mean, out_std)


def apply_pca(model: PcaModel, cube: HsiCube) -> HsiCube:
    if cube.bands != model.components.shape[0]:
        raise ValueError(f"PCA was fitted on {model.components.shape[0]} bands, cube has {cube.bands}")
    reduced = model.transform(cube.pixels().astype(np.float64))
    return HsiCube(reduced.T.reshape(model.dims, cube.height, cube.width))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _check_window(m: int) -> None:
    if m < 1 or m % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {m}")


class PatchExtractor:
    """Mirror-padded ``m x m`` windows of an ``(H, W, d)`` image.

    Borders reflect about the edge pixel (``c b | a b c``), so interior
    windows are plain slices and every window is centered on its pixel.
    """

    def __init__(self, image: np.ndarray, m: int):
        _check_window(m)
        self.image = np.asarray(image)
        self.m = m
        h = m // 2
        self.H, self.W = self.image.shape[:2]
        self.padded = np.pad(self.image, ((h, h), (h, h), (0, 0)), mode="reflect") if h else self.image

    def patches(self, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        if rows.size and (rows.min() < 0 or rows.max() >= self.H or cols.min() < 0 or cols.max() >= self.W):
            raise IndexError("patch center out of bounds")
        off = np.arange(self.m)
        r = rows[:, None, None] + off[None, :, None]
        c = cols[:, None, None] + off[None, None, :]
        return self.padded[r, c]

    def patch(self, row: int, col: int) -> np.ndarray:
        return self.patches([row], [col])[0]


def extract_patch(cube: Union[HsiCube, np.ndarray], row: int, col: int, m: int) -> np.ndarray:
    """``m x m x d`` window centered on ``(row, col)``, mirror-padded at borders."""
    image = cube.channels_last() if isinstance(cube, HsiCube) else np.asarray(cube)
    return PatchExtractor(image, m).patch(row, col)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Seeded train/test partition of the labeled pixels."""

    seed: int
    train: np.ndarray
    test: np.ndarray
    per_class: Optional[int] = None
    fraction: Optional[float] = None

    @property
    def n_train(self) -> int:
        return len(self.train)


def class_quota(population: int, per_class: Optional[int], fraction: Optional[float]) -> int:
    if per_class is not None:
        if per_class > population:
            log.warning("class has %d pixels, fewer than the %d requested; taking all", population, per_class)
        return min(per_class, population)
    return min(population, max(1, int(np.floor(fraction * population + 0.5))))


def stratified_split(labels: LabelRaster, per_class: Optional[int] = None,
                     fraction: Optional[float] = None, seed: int = 0) -> SplitSpec:
    """Draw ``per_class`` pixels (or ``fraction`` of each class, rounded
    half up, at least one) for training; the rest of the labeled pixels are
    the test set. Positions come back in row-major order.
    """
    if (per_class is None) == (fraction is None):
        raise ValueError("give exactly one of per_class or fraction")
    if per_class is not None and per_class < 1:
        raise ValueError("per_class must be positive")
    if fraction is not None and not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    flat = labels.labels.reshape(-1)
    rng = Rng(seed)
    train = []
    for cls in range(1, labels.classes + 1):
        idx = np.flatnonzero(flat == cls)
        if idx.size == 0:
            raise ValueError(f"class {cls} has no labeled pixels")
        k = class_quota(idx.size, per_class, fraction)
        train.append(idx[rng.spawn(cls).permutation(idx.size)[:k]])
    train_idx = np.sort(np.concatenate(train))
    labeled = np.flatnonzero(flat > 0)
    test_idx = np.setdiff1d(labeled, train_idx, assume_unique=True)
    W = labels.shape[1]
    to_rc = lambda ix: np.stack([ix // W, ix % W], axis=1)  # noqa: E731
    return SplitSpec(seed, to_rc(train_idx), to_rc(test_idx), per_class, fraction)


def save_split(split: SplitSpec, path: PathLike) -> None:
    lines = [f"HSISPLIT1 {split.seed} {split.n_train}"]
    lines += [f"{r} {c}" for r, c in split.train]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(path: PathLike, labels: LabelRaster) -> SplitSpec:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty split file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "HSISPLIT1":
        raise FormatError(f"{path}: bad magic, expected HSISPLIT1")
    seed, n = int(head[1]), int(head[2])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise FormatError(f"{path}: header promises {n} pixels, found {len(body)}")
    train = np.array([[int(v) for v in ln.split()] for ln in body], dtype=np.int64).reshape(-1, 2)
    H, W = labels.shape
    if train.size and (train.min() < 0 or (train[:, 0] >= H).any() or (train[:, 1] >= W).any()):
        raise FormatError(f"{path}: training pixel outside the {H}x{W} raster")
    if train.size and (labels.labels[train[:, 0], train[:, 1]] == 0).any():
        raise FormatError(f"{path}: training pixel is unlabeled")
    flat_train = train[:, 0] * W + train[:, 1]
    labeled = np.flatnonzero(labels.labels.reshape(-1) > 0)
    test = np.setdiff1d(labeled, flat_train)
    return SplitSpec(seed, train, np.stack([test // W, test % W], axis=1))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class PatchDataset:
    """Patch source plus the positions and 0-based targets of one partition."""

    extractor: PatchExtractor
    positions: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_split(cls, image: np.ndarray, labels: LabelRaster, positions: np.ndarray, m: int) -> "PatchDataset":
        positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        targets = labels.labels[positions[:, 0], positions[:, 1]] - 1
        return cls(PatchExtractor(image, m), positions, targets)

    def __len__(self) -> int:
        return len(self.positions)

    def patches(self, idx=None) -> np.ndarray:
        pos = self.positions if idx is None else self.positions[idx]
        return self.extractor.patches(pos[:, 0], pos[:, 1])


def batch_iterator(dataset: PatchDataset, batch: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(patches, targets)`` batches; the order depends only on
    ``(seed, epoch)`` and the final partial batch is kept."""
    if batch < 1:
        raise ValueError("batch size must be positive")
    order = Rng(seed, 0x5EED, epoch).permutation(len(dataset))
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        yield dataset.patches(idx), dataset.targets[idx]


# ---------------------------------------------------------------------------
# palettes and maps
# ---------------------------------------------------------------------------

Palette = dict


def load_palette(path: PathLike) -> Palette:
    palette = {}
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{n}: expected class,r,g,b")
            cls, r, g, b = (int(p) for p in parts)
            if not all(0 <= v <= 255 for v in (r, g, b)):
                raise FormatError(f"{path}:{n}: color component out of 0..255")
            palette[cls] = (r, g, b)
    return palette


def save_palette(palette: Palette, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cls in sorted(palette):
            r, g, b = palette[cls]
            fh.write(f"{cls},{r},{g},{b}\n")


def default_palette(classes: int) -> Palette:
    """Evenly spaced hues, full saturation."""
    import colorsys

    out = {}
    for c in range(1, classes + 1):
        r, g, b = colorsys.hsv_to_rgb((c - 1) / classes, 1.0, 1.0)
        out[c] = (round(r * 255), round(g * 255), round(b * 255))
    return out


def write_ppm(rgb: np.ndarray, path: PathLike) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    data = raw[pos + 1:]
    if len(data) != 3 * W * H:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3)


def export_map(predicted: np.ndarray, palette: Palette, path: PathLike) -> None:
    """Render a class raster (0 = background, drawn black) as P6."""
    predicted = np.asarray(predicted)
    classes = {int(c) for c in np.unique(predicted) if c != 0}
    missing = sorted(classes - set(palette))
    if missing:
        raise ValueError(f"palette has no color for classes {missing}")
    lut = np.zeros((max([0, *classes, *palette]) + 1, 3), dtype=np.uint8)
    for cls, rgb in palette.items():
        if cls > 0:
            lut[cls] = rgb
    write_ppm(lut[predicted], path)


RAMP_LOW = (255, 0, 0)
RAMP_HIGH = (0, 0, 255)


def ramp_colors(values: np.ndarray, low=RAMP_LOW, high=RAMP_HIGH) -> np.ndarray:
    """Linear RGB ramp from ``low`` at 0 to ``high`` at 1 (inputs clipped)."""
    t = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    rgb = (1 - t) * np.asarray(low, dtype=np.float64) + t * np.asarray(high, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)


def invert_palette(rgb: np.ndarray, palette: Palette) -> np.ndarray:
    """Map an RGB raster back to class indices (unknown colors -> 0)."""
    out = np.zeros(rgb.shape[:2], dtype=np.int64)
    for cls, color in palette.items():
        out[np.all(rgb == np.array(color, dtype=np.uint8), axis=-1)] = cls
    return out


# ---------------------------------------------------------------------------
# synthetic scene
# ---------------------------------------------------------------------------

def make_synthetic_scene(height: int = 48, width: int = 48, bands: int = 10, classes: int = 4,
                         snr_db: float = 20.0, block: int = 24, seed: int = 0) -> tuple[HsiCube, LabelRaster]:
    """Blocky scene with one Gaussian-shaped spectral signature per class.

    The image is tiled into ``block x block`` squares; tiles are dealt to
    classes as evenly as possible in a seeded random order. Class ``c`` has
    a Gaussian bump over the band axis centred at ``(c + 0.5) * bands /
    classes``. White noise is added at ``snr_db`` relative to the mean
    signal power. Every pixel is labeled.

    The default tiles are larger than the patches used on this scene, so
    most windows lie inside a single region as they do in real scenes.
    """
    rng = Rng(seed)
    bh, bw = -(-height // block), -(-width // block)
    tiles = np.arange(bh * bw) % classes
    tiles = tiles[rng.permutation(tiles.size)].reshape(bh, bw)
    cls_map = np.kron(tiles, np.ones((block, block), dtype=np.int64))[:height, :width]
    b = np.arange(bands, dtype=np.float64)
    width_b = bands / (2.0 * classes)
    centers = (np.arange(classes) + 0.5) * bands / classes
    signatures = np.exp(-((b[None, :] - centers[:, None]) ** 2) / (2 * width_b ** 2))
    clean = signatures[cls_map]
    power = np.mean(clean ** 2)
    noise_std = np.sqrt(power / 10 ** (snr_db / 10))
    noisy = clean + rng.normal(0.0, noise_std, clean.shape, dtype=np.float64)
    cube = HsiCube(noisy.transpose(2, 0, 1).astype(np.float32))
    return cube, LabelRaster(cls_map + 1, classes)
