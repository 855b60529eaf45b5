"""Binary checkpoint format.

Layout (integers little-endian)::

    b"ASPCKPT1\\n"
    u32 length, UTF-8 block of key=value lines (network config, then meta.* keys)
    u32 record count
    per record: u32 name length, name, u8 dtype code, u32 rank, rank x u32 extents, payload

Records hold the parameters under their network names, batch-norm running
statistics under ``bn.*``, optional Adam moments under ``adam.m.*`` /
``adam.v.*`` and optional PCA arrays under ``pca.*``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .dataio import PcaModel
from .model import Adam, AspcNet, AspcNetConfig
from .tensor import precision

MAGIC = b"ASPCKPT1\n"
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}
PCA_FIELDS = ("mean", "components", "explained_variance", "out_mean", "out_std")

PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    config: dict
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def network_config(self) -> AspcNetConfig:
        return AspcNetConfig.from_dict(self.config)

    def pca(self) -> Optional[PcaModel]:
        if not all(f"pca.{k}" in self.arrays for k in PCA_FIELDS):
            return None
        return PcaModel(*(self.arrays[f"pca.{k}"] for k in PCA_FIELDS))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_record(fh, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise CheckpointError(f"{name}: unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BI", DTYPE_CODES[dt], array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=dt).tobytes())


def write_checkpoint(path: PathLike, config: dict, arrays: dict, meta: Optional[dict] = None) -> None:
    lines = [f"{k}={_format_value(v)}" for k, v in config.items()]
    lines += [f"meta.{k}={_format_value(v)}" for k, v in (meta or {}).items()]
    block = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        fh.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            _write_record(fh, name, array)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: PathLike) -> CheckpointData:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        if buf.startswith(b"ASPCKPT"):
            raise CheckpointError(f"{path}: unsupported checkpoint version {buf[:9]!r}")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rd = _Reader(buf, path)
    rd.take(len(MAGIC))
    (n,) = rd.unpack("<I")
    try:
        text = rd.take(n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config block is not UTF-8") from exc
    config, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed config line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            config[key] = value
    (count,) = rd.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = rd.unpack("<I")
        name = rd.take(ln).decode("utf-8")
        code, rank = rd.unpack("<BI")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: {name}: unknown dtype code {code}")
        dt = CODE_DTYPES[code]
        shape = rd.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(rd.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if rd.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - rd.pos} trailing bytes after the last record")
    return CheckpointData(config, meta, arrays)


def save_checkpoint(net: AspcNet, path: PathLike, optimizer: Optional[Adam] = None,
                    pca: Optional[PcaModel] = None, meta: Optional[dict] = None) -> None:
    arrays = {name: p.data for name, p in net.named_parameters().items()}
    arrays.update(net.buffers())
    meta = dict(meta or {})
    meta.setdefault("precision", "f64" if net.asp1.weight.dtype == np.float64 else "f32")
    if optimizer is not None:
        meta.setdefault("optimizer_step", optimizer.t)
        for name in arrays.copy():
            if name in optimizer.m:
                arrays[f"adam.m.{name}"] = optimizer.m[name]
                arrays[f"adam.v.{name}"] = optimizer.v[name]
    if pca is not None:
        for k in PCA_FIELDS:
            arrays[f"pca.{k}"] = getattr(pca, k)
    write_checkpoint(path, net.cfg.to_dict(), arrays, meta)


def apply_arrays(net: AspcNet, arrays: dict, source="checkpoint") -> None:
    """Copy parameter and buffer arrays into ``net``, checking names and shapes."""
    targets = {name: p.data for name, p in net.named_parameters().items()}
    targets.update(net.buffers())
    for name, dest in targets.items():
        if name not in arrays:
            raise CheckpointError(f"{source}: missing parameter {name}")
        src = arrays[name]
        if src.shape != dest.shape:
            raise CheckpointError(f"{source}: parameter {name} has shape {src.shape}, network expects {dest.shape}")
        if src.dtype != dest.dtype:
            raise CheckpointError(f"{source}: parameter {name} stored as {src.dtype}, network uses {dest.dtype}")
        dest[...] = src


def load_checkpoint(path: PathLike, cfg: Optional[AspcNetConfig] = None) -> AspcNet:
    """Rebuild the network stored at ``path``.

    With ``cfg`` the arrays are loaded into a network built from that
    config instead, and any shape disagreement is reported by parameter
    name.
    """
    data = read_checkpoint(path)
    with precision(data.meta.get("precision", "f32")):
        net = AspcNet(cfg if cfg is not None else data.network_config())
    apply_arrays(net, data.arrays, os.fspath(path))
    net.checkpoint = data
    return net


def restore_optimizer(net: AspcNet, data: CheckpointData) -> Adam:
    cfg = net.cfg
    opt = Adam(net.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt.t = int(data.meta.get("optimizer_step", 0))
    for name in opt.m:
        if f"adam.m.{name}" in data.arrays:
            opt.m[name][...] = data.arrays[f"adam.m.{name}"]
            opt.v[name][...] = data.arrays[f"adam.v.{name}"]
    return opt
