"""ASPCNet assembly, margin loss, Adam, training and inference."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import ops
from .aspconv import AspConvLayer
from .capsules import CAPS_INITS, AspCapsLayer, DigitalCapsLayer, caps_to_scalars, convert_to_caps, flatten_caps
from .dataio import PatchDataset, batch_iterator
from .rng import Rng
from .tensor import Tape, Tensor, get_default_dtype, no_grad

log = logging.getLogger(__name__)


@dataclass
class AspcNetConfig:
    """Network, loss and optimizer hyperparameters.

    Widths are the full-size values; ``width_scale`` multiplies the filter
    counts and the number of capsule types (capsule dimensions stay fixed).
    """

    bands: int = 15
    patch: int = 27
    classes: int = 9
    dilation: int = 3
    width_scale: float = 1.0
    asp1_filters: int = 128
    asp2_filters: int = 256
    caps_types: int = 32
    caps_dim: int = 4
    digital_dim: int = 16
    routing_iters: int = 3
    caps_relu: bool = True
    caps_init: str = "routing"
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 96
    epochs: int = 200
    bn_momentum: float = 0.9
    seed: int = 0
    early_stopping: int = 0

    def validate(self) -> "AspcNetConfig":
        positive = ("bands", "patch", "dilation", "asp1_filters", "asp2_filters", "caps_types",
                    "caps_dim", "digital_dim", "routing_iters", "batch")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patch % 2 == 0:
            raise ValueError(f"patch size must be odd, got {self.patch}")
        if self.classes < 2:
            raise ValueError(f"need at least two classes, got {self.classes}")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if self.epochs < 0 or self.early_stopping < 0:
            raise ValueError("epochs and early_stopping must be non-negative")
        if self.caps_init not in CAPS_INITS:
            raise ValueError(f"caps_init must be one of {CAPS_INITS}, got {self.caps_init!r}")
        if not 0 <= self.bn_momentum <= 1:
            raise ValueError("bn_momentum must lie in [0, 1]")
        return self

    def scaled(self, width: int) -> int:
        return max(1, int(round(width * self.width_scale)))

    @property
    def widths(self) -> dict[str, int]:
        return {
            "asp1": self.scaled(self.asp1_filters),
            "asp2": self.scaled(self.asp2_filters),
            "caps_types": self.scaled(self.caps_types),
        }

    @property
    def caps_grid(self) -> int:
        """Spatial extent after the two stride-2 convolutions."""
        return -(-(-(-self.patch // 2)) // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "AspcNetConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(fields[key].type, raw)
        return cls(**kwargs)


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


class Conv2dLayer:
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, stride: int = 1,
                 rng: Optional[Rng] = None):
        rng = rng or Rng(0)
        kk = kernel * kernel
        self.stride = stride
        self.weight = Tensor(rng.glorot_uniform((kernel, kernel, in_channels, out_channels),
                                                kk * in_channels, kk * out_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, get_default_dtype()), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x) -> Tensor:
        return ops.bias_add(ops.conv2d(x, self.weight, self.stride, "same"), self.bias)


class BatchNormLayer:
    def __init__(self, channels: int, momentum: float = 0.9):
        dt = get_default_dtype()
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dt)
        self.running_var = np.ones(channels, dt)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.momentum, training)


LAYER_NAMES = ("asp1", "conv1", "asp2", "conv2", "bn", "caps1", "caps2", "digital")


class AspcNet:
    """ASPConv x2 -> BN -> ConvertToCaps -> ASPCaps x2 -> DigitalCaps -> lengths."""

    def __init__(self, cfg: AspcNetConfig):
        self.cfg = cfg.validate()
        w = cfg.widths
        rng = Rng(cfg.seed)
        self.asp1 = AspConvLayer(cfg.bands, w["asp1"], 3, cfg.dilation, 1, rng.spawn(1))
        self.conv1 = Conv2dLayer(w["asp1"], w["asp1"], 1, 2, rng.spawn(2))
        self.asp2 = AspConvLayer(w["asp1"], w["asp2"], 3, cfg.dilation, 1, rng.spawn(3))
        self.conv2 = Conv2dLayer(w["asp2"], w["asp2"], 1, 2, rng.spawn(4))
        self.bn = BatchNormLayer(w["asp2"], cfg.bn_momentum)
        self.caps1 = AspCapsLayer(w["asp2"], 1, w["caps_types"], cfg.caps_dim, 3, cfg.routing_iters,
                                  rng.spawn(5), cfg.caps_init)
        self.caps2 = AspCapsLayer(w["caps_types"], cfg.caps_dim, w["caps_types"], cfg.caps_dim, 3,
                                  cfg.routing_iters, rng.spawn(6), cfg.caps_init)
        n_caps = cfg.caps_grid ** 2 * w["caps_types"]
        self.digital = DigitalCapsLayer(n_caps, cfg.caps_dim, cfg.classes, cfg.digital_dim,
                                        cfg.routing_iters, rng.spawn(7), cfg.caps_init)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in LAYER_NAMES:
            for pname, p in getattr(self, name).parameters().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def forward(self, x, training: bool = False, trace: Optional[list] = None) -> Tensor:
        """Class scores ``(N, T)`` for patches ``(N, m, m, d)``.

        When ``trace`` is a list, ``(layer name, per-sample shape)`` pairs
        are appended to it.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.patch, cfg.patch, cfg.bands):
            raise ValueError(f"expected patches (N, {cfg.patch}, {cfg.patch}, {cfg.bands}), got {x.shape}")

        def note(name, t):
            if trace is not None:
                trace.append((name, tuple(t.shape[1:])))
            return t

        note("Input", x)
        h = note("ASP Layer 1", self.asp1(x))
        h = note("Conv Layer 1", ops.relu(self.conv1(h)))
        h = note("ASP Layer 2", self.asp2(h))
        h = ops.relu(self.conv2(h))
        note("Conv Layer 2", h)
        h = note("BN Layer", self.bn(h, training))
        caps = note("ConvertToCaps", convert_to_caps(h))
        caps = self.caps1(caps)
        if cfg.caps_relu:
            caps = ops.relu(caps)
        note("ASPCaps Layer 1", caps)
        caps = note("ASPCaps Layer 2", self.caps2(caps))
        flat = note("FlattenCaps", flatten_caps(caps))
        digits = note("DigitalCaps", self.digital(flat))
        scores = note("CapsToScalars", caps_to_scalars(digits, keepdims=True))
        return ops.reshape(scores, scores.shape[:2])

    __call__ = forward


def build_network(cfg: AspcNetConfig) -> AspcNet:
    return AspcNet(cfg)


def shape_trace(net: AspcNet, batch: int = 1) -> list[tuple[str, tuple]]:
    """Per-layer output shapes (batch axis dropped) for a zero batch."""
    cfg = net.cfg
    x = np.zeros((batch, cfg.patch, cfg.patch, cfg.bands), dtype=get_default_dtype())
    trace: list = []
    with no_grad():
        net.forward(x, training=False, trace=trace)
    return trace


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def one_hot(labels, classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label outside 0..{classes - 1}")
    out = np.zeros((labels.size, classes), dtype=dtype or get_default_dtype())
    out[np.arange(labels.size), labels] = 1
    return out


def margin_loss(scores, labels, m_plus: float = 0.9, m_minus: float = 0.1, lam: float = 0.5) -> Tensor:
    """Capsule margin loss, summed over classes and averaged over the batch."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    N, T = scores.shape
    t = one_hot(labels, T, scores.dtype)
    if len(t) != N:
        raise ValueError("one label per sample required")
    present = ops.square(ops.relu(ops.add(ops.scale(scores, -1.0), m_plus)))
    absent = ops.square(ops.relu(ops.sub(scores, m_minus)))
    per_class = ops.add(ops.mul(present, Tensor(t, dtype=scores.dtype)),
                        ops.mul(absent, Tensor(lam * (1 - t), dtype=scores.dtype)))
    return ops.scale(ops.sum(per_class), 1.0 / N)


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam step, updating ``param``, ``m`` and ``v`` in place."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(f"Adam state shape mismatch for parameter of shape {param.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


def adam_step(params: dict, grads: dict, state: dict, t: int, lr: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Functional Adam: returns updated copies of ``params`` (name -> array).

    ``state`` maps names to ``(m, v)`` pairs and is created and updated in
    place.
    """
    out = {}
    for name, p in params.items():
        p = np.array(p, copy=True)
        m, v = state.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
        adam_update(p, np.asarray(grads[name]), m, v, t, lr, beta1, beta2, eps)
        out[name] = p
    return out


class Adam:
    """Adam over a dict of named tensors, reading their ``.grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, self.m[name], self.v[name], self.t,
                        self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_oa: float
    wall_time: float


def fit(net: AspcNet, dataset: PatchDataset, cfg: Optional[AspcNetConfig] = None,
        callbacks: Sequence[Callable[[EpochRecord], None]] = (), optimizer: Optional[Adam] = None,
        start_epoch: int = 0, deterministic: bool = False,
        on_best: Optional[Callable[[EpochRecord], None]] = None) -> list[EpochRecord]:
    """Train with Adam on margin loss; returns one record per epoch.

    ``on_best`` runs whenever the training accuracy reaches a new best
    (the hook the CLI uses to write the best checkpoint). With
    ``cfg.early_stopping > 0`` training stops once the training accuracy
    has not improved for that many epochs. In deterministic mode wall
    times are reported as zero.
    """
    cfg = cfg or net.cfg
    if len(dataset) == 0:
        raise ValueError("empty training set")
    params = net.named_parameters()
    opt = optimizer or Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[EpochRecord] = []
    best, stale = -1.0, 0
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        total_loss, correct = 0.0, 0
        for patches, targets in batch_iterator(dataset, cfg.batch, cfg.seed, epoch):
            opt.zero_grad()
            x = Tensor(patches)
            with Tape() as tape:
                scores = net.forward(x, training=True)
                loss = margin_loss(scores, targets, cfg.m_plus, cfg.m_minus, cfg.lam)
            tape.backward(loss)
            opt.step()
            total_loss += float(loss.item()) * len(targets)
            correct += int((ops.argmax(scores, -1) == targets).sum())
        rec = EpochRecord(epoch + 1, total_loss / len(dataset), correct / len(dataset),
                          0.0 if deterministic else time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.5f train OA %.4f", rec.epoch, rec.loss, rec.train_oa)
        for cb in callbacks:
            cb(rec)
        if rec.train_oa > best:
            best, stale = rec.train_oa, 0
            if on_best is not None:
                on_best(rec)
        else:
            stale += 1
            if cfg.early_stopping and stale >= cfg.early_stopping:
                log.info("early stopping after epoch %d", rec.epoch)
                break
    net.optimizer = opt
    return history


def predict_scores(net: AspcNet, patches: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(patches), batch):
            out.append(net.forward(Tensor(patches[start:start + batch]), training=False).data)
    if not out:
        return np.zeros((0, net.cfg.classes), dtype=get_default_dtype())
    return np.concatenate(out)


def classify(net: AspcNet, patches: np.ndarray, batch: int = 128) -> np.ndarray:
    """Most probable class (0-based, lowest index on ties) per patch."""
    return ops.argmax(predict_scores(net, patches, batch), -1)


def classify_dataset(net: AspcNet, dataset: PatchDataset, batch: int = 128) -> np.ndarray:
    preds = []
    for start in range(0, len(dataset), batch):
        idx = np.arange(start, min(start + batch, len(dataset)))
        preds.append(classify(net, dataset.patches(idx), batch))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def saliency(net, patch: np.ndarray, cls: int) -> np.ndarray:
    """Input-gradient contribution map of one class score.

    ``|d score_cls / d patch|`` summed over bands and min-max scaled to
    ``[0, 1]`` (all zeros when the gradient is constant).
    """
    patch = np.asarray(patch)
    T = net.cfg.classes
    if not 0 <= cls < T:
        raise ValueError(f"class {cls} outside 0..{T - 1}")
    x = Tensor(patch[None], requires_grad=True)
    with Tape() as tape:
        scores = net.forward(x, training=False)
        target = ops.sum(ops.mul(scores, Tensor(one_hot([cls], T, scores.dtype), dtype=scores.dtype)))
    tape.backward(target)
    heat = np.abs(x.grad[0]).sum(axis=-1).astype(np.float64)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def evaluate_positions(net: AspcNet, dataset: PatchDataset, batch: int = 128) -> Iterable:
    return classify_dataset(net, dataset, batch)
