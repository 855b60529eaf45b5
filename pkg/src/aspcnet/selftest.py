"""Embedded invariant suite behind ``aspcnet selftest``.

Each criterion returns a list of property results; the runner prints one
line per property and a verdict per criterion. Oracles here are written
independently of the implementation they check (loops over corners,
marginals and routing steps instead of the vectorized code paths).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, TextIO

import numpy as np

from . import capsules, ops
from .aspconv import (AspConvLayer, bilinear_sample, build_dilated_grid, deformable_conv_forward,
                      dilated_conv_forward, dilated_extent)
from .capsules import DigitalCapsLayer, RoutingState, dynamic_routing, squash
from .gradcheck import check_params
from .metrics import ConfusionMatrix
from .model import AspcNet, AspcNetConfig, margin_loss, shape_trace
from .rng import Rng
from .tensor import Tensor, no_grad, precision

GRAD_TOL = 1e-4
NETWORK_GRAD_TOL = 1e-3
EQUIV_TOL = 1e-6


@dataclass
class PropertyResult:
    criterion: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.criterion} {self.name}" + (f" ({self.detail})" if self.detail else "")


def _normal(rng: Rng, *shape) -> np.ndarray:
    return rng.normal(0.0, 1.0, shape, dtype=np.float64)


def _param(rng: Rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * _normal(rng, *shape), requires_grad=True, dtype=np.float64)


# ---------------------------------------------------------------------------
# A1 operator equivalences
# ---------------------------------------------------------------------------

def check_operator_equivalence(instances: int = 100, seed: int = 0) -> list[PropertyResult]:
    worst = {"asp_vs_dilated": 0.0, "dilated_rate1_vs_conv": 0.0, "deformable_zero_vs_conv": 0.0}
    with precision("f64"), no_grad():
        for n in range(instances):
            rng = Rng(seed, 0xA1, n)
            N, H, W = int(rng.integers(1, 3)), int(rng.integers(3, 10)), int(rng.integers(3, 10))
            C, F = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = (1, 3, 5)[int(rng.integers(0, 3))]
            rate = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            x = Tensor(_normal(rng, N, H, W, C))
            layer = AspConvLayer(C, F, k, rate, stride, rng.spawn(1))
            layer.bias.data[...] = _normal(rng, F)
            a = layer(x).data
            b = dilated_conv_forward(layer.weight, x, rate, stride, layer.bias).data
            worst["asp_vs_dilated"] = max(worst["asp_vs_dilated"], float(np.abs(a - b).max()))

            w = Tensor(_normal(rng, k, k, C, F))
            ref = ops.conv2d(x, w, stride, "same").data
            d1 = dilated_conv_forward(w, x, 1, stride).data
            worst["dilated_rate1_vs_conv"] = max(worst["dilated_rate1_vs_conv"], float(np.abs(d1 - ref).max()))
            Ho, Wo = -(-H // stride), -(-W // stride)
            zero = Tensor(np.zeros((N, Ho, Wo, 2 * k * k)))
            df = deformable_conv_forward(w, x, zero, stride).data
            worst["deformable_zero_vs_conv"] = max(worst["deformable_zero_vs_conv"], float(np.abs(df - ref).max()))
    return [PropertyResult("A1", name, err <= EQUIV_TOL, f"max abs err {err:.2e} over {instances} instances")
            for name, err in worst.items()]


# ---------------------------------------------------------------------------
# A2 gradient suite
# ---------------------------------------------------------------------------

def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights, dtype=np.float64)))


def _grad_cases(seed: int) -> list[tuple[str, Callable[[], float], float]]:
    rng = Rng(seed, 0xA2)
    cases = []

    def case(name, tol=GRAD_TOL, coords=None):
        def wrap(build):
            key = len(cases)

            def run():
                f, params = build(rng.spawn(key))
                return max(check_params(f, params, 1e-5, coords).values())
            cases.append((name, run, tol))
            return build
        return wrap

    for kind in ("add", "sub", "mul", "div"):
        @case(f"elementwise {kind}")
        def _(r, kind=kind):
            a, b = _param(r, 3, 4), _param(r, 3, 4)
            if kind == "div":
                b.data[...] = np.sign(b.data) * (0.5 + np.abs(b.data))
            w = _normal(r, 3, 4)
            return (lambda: _weighted(ops.elementwise(kind, a, b), w)), [a, b]

    for kind in ("relu", "sigmoid", "square", "sqrt", "exp", "scale"):
        @case(f"elementwise {kind}")
        def _(r, kind=kind):
            a = _param(r, 3, 4)
            if kind == "sqrt":
                a.data[...] = 0.5 + np.abs(a.data)
            if kind == "relu":
                a.data[np.abs(a.data) < 0.05] += 0.1
            w = _normal(r, 3, 4)
            op = (lambda: ops.scale(a, -1.7)) if kind == "scale" else (lambda: ops.elementwise(kind, a))
            return (lambda: _weighted(op(), w)), [a]

    @case("matmul")
    def _(r):
        a, b, w = _param(r, 3, 5), _param(r, 5, 2), _normal(r, 3, 2)
        return (lambda: _weighted(ops.matmul(a, b), w)), [a, b]

    @case("conv2d stride 2 dilation 2")
    def _(r):
        x, k, w = _param(r, 2, 7, 6, 3), _param(r, 3, 3, 3, 2), _normal(r, 2, 4, 3, 2)
        return (lambda: _weighted(ops.conv2d(x, k, 2, "same", 2), w)), [x, k]

    @case("batch norm (train)")
    def _(r):
        x, g, b = _param(r, 4, 3, 3, 2), _param(r, 2), _param(r, 2)
        w = _normal(r, 4, 3, 3, 2)

        def f():
            return _weighted(ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), 0.9, True), w)
        return f, [x, g, b]

    @case("bilinear sampling (map and coordinates)")
    def _(r):
        fm = _param(r, 5, 6, 3)
        rows = Tensor(r.uniform(0.1, 3.9, (7,)).astype(np.float64), requires_grad=True, dtype=np.float64)
        cols = Tensor(r.uniform(0.1, 4.9, (7,)).astype(np.float64), requires_grad=True, dtype=np.float64)
        for t in (rows, cols):
            frac = t.data - np.floor(t.data)
            t.data[np.minimum(frac, 1 - frac) < 0.02] += 0.05
        w = _normal(r, 7, 3)
        return (lambda: _weighted(bilinear_sample(fm, rows, cols), w)), [fm, rows, cols]

    @case("ASP forward (weight, bias, offset branch, mask branch, input)")
    def _(r):
        layer = AspConvLayer(2, 3, 3, 2, 1, r.spawn(0))
        params = list(layer.parameters().values())
        for p in params[1:]:
            p.data[...] = 0.3 * _normal(r, *p.shape)
        x = _param(r, 1, 7, 7, 2)
        w = _normal(r, 1, 7, 7, 3)
        return (lambda: _weighted(layer(x), w)), params + [x]

    @case("squash")
    def _(r):
        s, w = _param(r, 5, 4), _normal(r, 5, 4)
        return (lambda: _weighted(squash(s), w)), [s]

    @case("dynamic routing (unrolled, 3 iterations)")
    def _(r):
        u, w = _param(r, 2, 5, 3, 4, scale=0.7), _normal(r, 2, 3, 4)
        return (lambda: _weighted(dynamic_routing(u, 3), w)), [u]

    @case("digital capsules")
    def _(r):
        layer = DigitalCapsLayer(6, 4, 3, 5, 3, r.spawn(0))
        u, w = _param(r, 2, 6, 4, scale=0.5), _normal(r, 2, 3, 5)
        return (lambda: _weighted(layer(u), w)), [layer.weight, u]

    @case("margin loss")
    def _(r):
        scores = Tensor(r.uniform(0.0, 1.0, (6, 4)).astype(np.float64), requires_grad=True, dtype=np.float64)
        for bound in (0.1, 0.9):
            near = np.abs(scores.data - bound) < 0.02
            scores.data[near] += 0.05
        labels = r.integers(0, 4, 6)
        return (lambda: margin_loss(scores, labels)), [scores]

    @case("end-to-end network (width 0.125)", NETWORK_GRAD_TOL, coords=6)
    def _(r):
        cfg = AspcNetConfig(bands=4, patch=15, classes=3, width_scale=0.125, seed=int(r.integers(0, 1 << 30)))
        net = AspcNet(cfg)
        params = net.named_parameters()
        for name, p in params.items():
            if "offset" in name or "mask" in name or name.endswith("bias"):
                p.data[...] = 0.1 * _normal(r, *p.shape)
        x = Tensor(_normal(r, 2, 15, 15, 4))
        labels = np.array([0, 2])
        return (lambda: margin_loss(net.forward(x, training=True), labels)), list(params.values())

    return cases


def check_gradients(seed: int = 0) -> list[PropertyResult]:
    results = []
    with precision("f64"):
        for name, run, tol in _grad_cases(seed):
            err = run()
            results.append(PropertyResult("A2", name, err <= tol, f"max rel err {err:.2e}, tol {tol:.0e}"))
    return results


# ---------------------------------------------------------------------------
# A3 routing invariants
# ---------------------------------------------------------------------------

def check_routing(instances: int = 1000, seed: int = 0) -> list[PropertyResult]:
    worst_sum, worst_norm, worst_sym = 0.0, 0.0, 0.0
    with precision("f64"), no_grad():
        for n in range(instances):
            rng = Rng(seed, 0xA3, n)
            B, I, J = int(rng.integers(1, 3)), int(rng.integers(1, 7)), int(rng.integers(2, 6))
            D, r = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            votes = _normal(rng, B, I, J, D) * 10.0 ** rng.uniform(-2, 1.5)
            state = RoutingState()
            v = dynamic_routing(Tensor(votes), r, state)
            for c in state.couplings:
                worst_sum = max(worst_sum, float(np.abs(c.sum(axis=2) - 1).max()))
            worst_norm = max(worst_norm, float(np.linalg.norm(v.data, axis=-1).max()))

            same = np.repeat(_normal(rng, B, I, 1, D), J, axis=2)
            state = RoutingState()
            dynamic_routing(Tensor(same), r, state)
            for c in state.couplings:
                worst_sym = max(worst_sym, float(np.abs(c - 1.0 / J).max()))
        s = _normal(Rng(seed, 0xA3), 2000, 4) * 10.0 ** Rng(seed, 0xA3, 1).uniform(-3, 2, (2000, 1))
        worst_norm = max(worst_norm, float(np.linalg.norm(squash(Tensor(s)).data, axis=-1).max()))
    return [
        PropertyResult("A3", "coupling sums to 1", worst_sum <= EQUIV_TOL, f"max dev {worst_sum:.2e}"),
        PropertyResult("A3", "squashed norms < 1", worst_norm < 1.0, f"max norm {worst_norm:.6f}"),
        PropertyResult("A3", "equal votes give uniform coupling", worst_sym <= EQUIV_TOL, f"max dev {worst_sym:.2e}"),
    ]


# ---------------------------------------------------------------------------
# A4 shape conformance
# ---------------------------------------------------------------------------

def expected_trace(T: int, d: int = 15) -> list[tuple]:
    """The layer table for a 27x27 patch, written out by hand."""
    return [(27, 27, d), (27, 27, 128), (14, 14, 128), (14, 14, 256), (7, 7, 256), (7, 7, 256),
            (7, 7, 256, 1), (7, 7, 32, 4), (7, 7, 32, 4), (1568, 4), (T, 16), (T, 1)]


def check_shapes(classes=(9, 15, 16)) -> list[PropertyResult]:
    results = []
    for T in classes:
        got = [shape for _, shape in shape_trace(AspcNet(AspcNetConfig(bands=15, patch=27, classes=T)))]
        want = expected_trace(T)
        detail = "12 layers" if got == want else f"got {got}"
        results.append(PropertyResult("A4", f"layer trace T={T}", got == want, detail))
    return results


# ---------------------------------------------------------------------------
# A6 formula spot checks
# ---------------------------------------------------------------------------

def check_formulas() -> list[PropertyResult]:
    results = []
    g = build_dilated_grid(3, 3, 3)
    span = int(g.points[:, 0].max() - g.points[:, 0].min() + 1)
    results.append(PropertyResult("A6", "dilated extent (3,3,h=3) is 7", g.extent == (7, 7) and span == 7,
                                  f"extent {g.extent}, span {span}"))
    bad = []
    for k in (1, 3, 5):
        for h in range(1, 6):
            pts = build_dilated_grid(k, k, h).points
            spans = pts.max(axis=0) - pts.min(axis=0) + 1
            closed = k + (k - 1) * (h - 1)
            if not (dilated_extent(k, h) == closed == spans[0] == spans[1] and len(pts) == k * k):
                bad.append((k, h))
    results.append(PropertyResult("A6", "dilated extents over {1,3,5}x{1..5}", not bad, f"mismatches {bad}"))
    with precision("f64"):
        scores = np.full((3, 4), 0.1)
        labels = np.array([0, 1, 3])
        scores[np.arange(3), labels] = 0.9
        loss = float(margin_loss(scores, labels).item())
    results.append(PropertyResult("A6", "margin loss is 0 at the (0.9, 0.1) bounds", loss == 0.0, f"loss {loss}"))
    k = ConfusionMatrix(2, np.array([[50, 0], [50, 0]])).kappa()
    results.append(PropertyResult("A6", "kappa of [[50,0],[50,0]] is 0", abs(k) <= 1e-12, f"kappa {k}"))
    return results


# ---------------------------------------------------------------------------
# A7 oracle equivalences
# ---------------------------------------------------------------------------

def bilinear_oracle(fm: np.ndarray, r: float, c: float) -> np.ndarray:
    """Weighted sum over the integer corners within distance 1."""
    H, W, _ = fm.shape
    r = min(max(r, 0.0), H - 1.0)
    c = min(max(c, 0.0), W - 1.0)
    out = np.zeros(fm.shape[2])
    for i in range(int(math.floor(r)), int(math.floor(r)) + 2):
        for j in range(int(math.floor(c)), int(math.floor(c)) + 2):
            if 0 <= i < H and 0 <= j < W:
                wgt = max(0.0, 1 - abs(r - i)) * max(0.0, 1 - abs(c - j))
                out += wgt * fm[i, j]
    return out


def kappa_oracle(counts: np.ndarray) -> float:
    T = len(counts)
    n = sum(int(counts[i][j]) for i in range(T) for j in range(T))
    agree = sum(int(counts[i][i]) for i in range(T)) / n
    chance = 0.0
    for k in range(T):
        row = sum(int(counts[k][j]) for j in range(T))
        col = sum(int(counts[i][k]) for i in range(T))
        chance += (row / n) * (col / n)
    return (agree - chance) / (1 - chance)


def routing_oracle(u: list, W: list, iters: int) -> list:
    """Scripted digital-capsule forward with plain Python lists.

    ``u[i]`` are input capsules, ``W[j][i]`` the transform matrices; returns
    the output capsules ``v[j]``.
    """
    I, J = len(u), len(W)
    votes = [[[sum(W[j][i][d][e] * u[i][e] for e in range(len(u[i]))) for d in range(len(W[j][i]))]
              for j in range(J)] for i in range(I)]
    b = [[0.0] * J for _ in range(I)]
    v = None
    for it in range(iters):
        c = []
        for i in range(I):
            z = [math.exp(x) for x in b[i]]
            c.append([x / sum(z) for x in z])
        v = []
        for j in range(J):
            D = len(votes[0][j])
            s = [sum(c[i][j] * votes[i][j][d] for i in range(I)) for d in range(D)]
            n2 = sum(x * x for x in s)
            n = math.sqrt(n2)
            v.append([n2 / (1 + n2) * x / (n + 1e-9) for x in s])
        if it < iters - 1:
            for i in range(I):
                for j in range(J):
                    b[i][j] += sum(votes[i][j][d] * v[j][d] for d in range(len(v[j])))
    return v


def check_oracles(points: int = 10_000, matrices: int = 1000, seed: int = 0) -> list[PropertyResult]:
    rng = Rng(seed, 0xA7)
    with precision("f64"), no_grad():
        fm = _normal(rng, 9, 11, 3)
        rows = rng.uniform(-0.5, 8.5, (points,)).astype(np.float64)
        cols = rng.uniform(-0.5, 10.5, (points,)).astype(np.float64)
        got = bilinear_sample(Tensor(fm), Tensor(rows), Tensor(cols)).data
        want = np.stack([bilinear_oracle(fm, r, c) for r, c in zip(rows, cols)])
        bil = float(np.abs(got - want).max())

        kap = 0.0
        for n in range(matrices):
            r = rng.spawn(n)
            T = int(r.integers(2, 7))
            counts = r.integers(0, 40, (T, T))
            counts[0, 0] += 1
            cm = ConfusionMatrix(T, counts)
            kap = max(kap, abs(cm.kappa() - kappa_oracle(counts.tolist())))

        r = rng.spawn(1 << 20)
        layer = DigitalCapsLayer(2, 2, 2, 2, 3, r.spawn(0))
        layer.weight.data[...] = _normal(r, 2, 2, 2, 2)
        u = _normal(r, 1, 2, 2)
        got = capsules.digital_caps_forward(layer, Tensor(u)).data[0]
        want = np.array(routing_oracle(u[0].tolist(), layer.weight.data.tolist(), 3))
        dig = float(np.abs(got - want).max())
    return [
        PropertyResult("A7", "bilinear vs 4-corner oracle", bil <= EQUIV_TOL, f"max err {bil:.2e} over {points} points"),
        PropertyResult("A7", "kappa vs marginal oracle", kap <= 1e-10, f"max err {kap:.2e} over {matrices} matrices"),
        PropertyResult("A7", "digital caps vs scripted routing oracle", dig <= EQUIV_TOL, f"max err {dig:.2e}"),
    ]


CRITERIA: dict[str, tuple[str, Callable[[], list[PropertyResult]]]] = {
    "A1": ("operator equivalence chain", check_operator_equivalence),
    "A2": ("gradient suite", check_gradients),
    "A3": ("routing invariants", check_routing),
    "A4": ("shape conformance", check_shapes),
    "A6": ("formula spot checks", check_formulas),
    "A7": ("oracle equivalences", check_oracles),
}


def run_criterion(code: str) -> tuple[bool, list[PropertyResult], float]:
    _, fn = CRITERIA[code]
    t0 = time.perf_counter()
    try:
        results = fn()
    except Exception as exc:  # a crash counts as a failure of that criterion
        results = [PropertyResult(code, "raised", False, f"{type(exc).__name__}: {exc}")]
    return all(r.passed for r in results), results, time.perf_counter() - t0


def run_selftest(out: Optional[TextIO] = None, criteria=None) -> bool:
    """Run the suite, printing one line per property; True when all pass."""
    import sys
    out = out or sys.stdout
    ok_all = True
    for code in criteria or CRITERIA:
        ok, results, secs = run_criterion(code)
        for r in results:
            print("  " + r.line(), file=out)
        print(f"{'PASS' if ok else 'FAIL'} {code} {CRITERIA[code][0]} [{secs:.1f}s]", file=out, flush=True)
        ok_all &= ok
    return ok_all
