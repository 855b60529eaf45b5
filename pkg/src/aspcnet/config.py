"""Run configuration: key=value files, flag overrides and thread control.

Precedence is flags > file > defaults. Every key is checked against
``RUN_KEYS``; unknown keys are errors.
"""

from __future__ import annotations

import contextlib
import dataclasses
import os
from typing import Any, Iterator, Mapping, Optional

from threadpoolctl import threadpool_limits

from .model import AspcNetConfig

THREADS_ENV = "ASPCNET_THREADS"


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _opt(kind):
    def parse(raw):
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
            return None
        return kind(raw)
    return parse


def _precision(raw) -> str:
    if raw not in ("f32", "f64"):
        raise ValueError(f"precision must be f32 or f64, got {raw!r}")
    return raw


_PATH = _opt(str)

# key -> (parser, default). Network keys mirror AspcNetConfig; the data
# width is called pca_dims here because it is the PCA output size.
RUN_KEYS: dict[str, tuple[Any, Any]] = {
    "cube": (_PATH, None),
    "labels": (_PATH, None),
    "palette": (_PATH, None),
    "split": (_PATH, None),
    "checkpoint": (_PATH, None),
    "out": (_PATH, None),
    "seed": (int, 0),
    "per_class": (_opt(int), None),
    "fraction": (_opt(float), None),
    "pca_dims": (int, 15),
    "pca_labeled_only": (_bool, False),
    "deterministic": (_bool, False),
    "precision": (_precision, "f32"),
    "threads": (_opt(int), None),
}

_NET_SKIP = {"bands", "classes", "seed"}
for _f in dataclasses.fields(AspcNetConfig):
    if _f.name in _NET_SKIP:
        continue
    _kind = {"int": int, "float": float, "bool": _bool, "str": str}[_f.type]
    RUN_KEYS[_f.name] = (_kind, _f.default)


def _normalize(key: str) -> str:
    return key.strip().replace("-", "_")


@dataclasses.dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def network_config(self, classes: int) -> AspcNetConfig:
        kwargs = {k: self.values[k] for k in RUN_KEYS if hasattr(AspcNetConfig, k) and k not in _NET_SKIP}
        return AspcNetConfig(bands=self.pca_dims, classes=classes, seed=self.seed, **kwargs).validate()


def parse_config_file(path) -> dict:
    """Raw ``key -> string`` pairs from a key=value file ('#' starts a comment)."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key = _normalize(key)
            if key not in RUN_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value.strip()
    return out


def resolve_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Merge defaults, the optional file and non-None ``overrides``."""
    values = {k: default for k, (_, default) in RUN_KEYS.items()}
    layers = [parse_config_file(path)] if path else []
    layers.append({_normalize(k): v for k, v in (overrides or {}).items() if v is not None})
    for layer in layers:
        for key, raw in layer.items():
            if key not in RUN_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            parser = RUN_KEYS[key][0]
            try:
                values[key] = parser(raw)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"bad value for {key}: {exc}") from exc
    if values["per_class"] is not None and values["fraction"] is not None:
        raise ValueError("per_class and fraction are mutually exclusive")
    if values["threads"] is not None and values["threads"] < 1:
        raise ValueError("threads must be positive")
    return RunConfig(values)


def thread_count(threads: Optional[int] = None, deterministic: bool = False) -> Optional[int]:
    """Thread budget: 1 in deterministic mode, else the flag, else ``ASPCNET_THREADS``."""
    if deterministic:
        return 1
    if threads is not None:
        return threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be positive")
        return value
    return None


@contextlib.contextmanager
def thread_limit(threads: Optional[int] = None, deterministic: bool = False) -> Iterator[Optional[int]]:
    """Cap the BLAS/OpenMP pools for the duration of the block."""
    n = thread_count(threads, deterministic)
    if n is None:
        yield None
        return
    with threadpool_limits(limits=n):
        yield n
