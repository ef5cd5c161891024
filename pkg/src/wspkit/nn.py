"""Minimal dense layer catalog with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values with a leading batch axis.  A network
is a sequence of :class:`LayerSpec`; parameters live in a :class:`ParamStore`
keyed by ``"<layer name>.weight"`` / ``"<layer name>.bias"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

KINDS = ("conv2d", "transposed_conv2d", "relu", "sigmoid", "fully_connected", "avgpool", "softmax")


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_features: int = 0  # channels for conv layers
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "transposed_conv2d", "fully_connected"):
            if self.in_features < 1 or self.out_features < 1:
                raise ValueError(f"layer {self.name}: fan-in/out must be positive")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"layer {self.name}: bad kernel/stride/padding")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "transposed_conv2d", "fully_connected")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "conv2d":
            w = (self.out_features, self.in_features, k, k)
        elif self.kind == "transposed_conv2d":
            w = (self.in_features, self.out_features, k, k)
        elif self.kind == "fully_connected":
            w = (self.out_features, self.in_features)
        else:
            return {}
        return {f"{self.name}.weight": w, f"{self.name}.bias": (self.out_features,)}

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis); raises ShapeError on mismatch."""
        in_shape = tuple(in_shape)
        k, s, p = self.kernel, self.stride, self.padding
        if self.kind in ("conv2d", "transposed_conv2d", "avgpool"):
            if len(in_shape) != 3:
                raise ShapeError(f"layer {self.name}: expected (C, H, W), got {in_shape}")
            c, h, w = in_shape
            if self.kind != "avgpool" and c != self.in_features:
                raise ShapeError(f"layer {self.name}: expected {self.in_features} channels, got {c}")
            if self.kind == "conv2d":
                ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {self.name}: input {in_shape} too small")
                return (self.out_features, ho, wo)
            if self.kind == "transposed_conv2d":
                return (self.out_features, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
            if h % k or w % k:
                raise ShapeError(f"layer {self.name}: {h}x{w} not divisible by pool size {k}")
            return (c, h // k, w // k)
        if self.kind == "fully_connected":
            if in_shape != (self.in_features,):
                raise ShapeError(f"layer {self.name}: expected ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        return in_shape


def conv2d(name, cin, cout, kernel=3, stride=1, padding=None) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("conv2d", name, cin, cout, kernel, stride, padding)


def transposed_conv2d(name, cin, cout, kernel=4, stride=2, padding=1) -> LayerSpec:
    return LayerSpec("transposed_conv2d", name, cin, cout, kernel, stride, padding)


def fully_connected(name, fin, fout) -> LayerSpec:
    return LayerSpec("fully_connected", name, fin, fout)


def relu(name="relu") -> LayerSpec:
    return LayerSpec("relu", name)


def sigmoid(name="sigmoid") -> LayerSpec:
    return LayerSpec("sigmoid", name)


def softmax(name="softmax") -> LayerSpec:
    return LayerSpec("softmax", name)


def avgpool(name, kernel=2) -> LayerSpec:
    return LayerSpec("avgpool", name, kernel=kernel, stride=kernel)


def output_shape(net: Sequence[LayerSpec], in_shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(in_shape)
    for spec in net:
        shape = spec.output_shape(shape)
    return shape


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(seed=self.seed)
        for k, v in self.params.items():
            out.add(k, v.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(seed=self.seed)
        for k, v in self.params.items():
            out.add(k, v.copy())
            out.grads[k][...] = self.grads[k]
        for k, v in self.velocity.items():
            out.velocity[k] = v.copy()
        return out


def init_params(net: Sequence[LayerSpec], seed: int, dtype=np.float64, store: ParamStore | None = None) -> ParamStore:
    """He-style uniform init, bound sqrt(6 / fan_in); biases start at zero."""
    store = store if store is not None else ParamStore(seed=seed)
    rng = np.random.default_rng(seed)
    for spec in net:
        if not spec.has_params:
            continue
        k2 = spec.kernel * spec.kernel
        if spec.kind == "conv2d":
            fan_in = spec.in_features * k2
        elif spec.kind == "transposed_conv2d":
            # each output pixel sees about cin * k^2 / stride^2 taps
            fan_in = max(1, spec.in_features * k2 // (spec.stride * spec.stride))
        else:
            fan_in = spec.in_features
        bound = np.sqrt(6.0 / fan_in)
        shapes = spec.param_shapes()
        wname, bname = f"{spec.name}.weight", f"{spec.name}.bias"
        store.add(wname, rng.uniform(-bound, bound, size=shapes[wname]).astype(dtype))
        store.add(bname, np.zeros(shapes[bname], dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# im2col helpers (kernel-offset loops; k*k strided copies instead of index math)


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, k, k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# ---------------------------------------------------------------------------
# per-kind forward / backward


def _conv_fwd(spec, params, x):
    w, b = params[f"{spec.name}.weight"], params[f"{spec.name}.bias"]
    n, _, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    _, ho, wo = spec.output_shape(x.shape[1:])
    cols = _im2col(_pad(x, p), k, s, ho, wo)
    y = cols @ w.reshape(w.shape[0], -1).T + b
    y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def _conv_bwd(spec, params, cache, dy):
    cols, xshape = cache
    w = params[f"{spec.name}.weight"]
    n, c, h, wd = xshape
    k, s, p = spec.kernel, spec.stride, spec.padding
    o, ho, wo = dy.shape[1:]
    dyf = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    params.grads[f"{spec.name}.weight"] += (dyf.T @ cols).reshape(w.shape)
    params.grads[f"{spec.name}.bias"] += dyf.sum(axis=0)
    dcols = dyf @ w.reshape(o, -1)
    dxp = _col2im(dcols, n, c, h + 2 * p, wd + 2 * p, k, s, ho, wo)
    return dxp[:, :, p:p + h, p:p + wd] if p else dxp


def _tconv_fwd(spec, params, x):
    w, b = params[f"{spec.name}.weight"], params[f"{spec.name}.bias"]
    n, cin, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    cout = spec.out_features
    ho_full, wo_full = (h - 1) * s + k, (wd - 1) * s + k
    xf = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = xf @ w.reshape(cin, -1)
    full = _col2im(cols, n, cout, ho_full, wo_full, k, s, h, wd)
    y = full[:, :, p:ho_full - p, p:wo_full - p] + b[None, :, None, None]
    return np.ascontiguousarray(y), (xf, x.shape)


def _tconv_bwd(spec, params, cache, dy):
    xf, xshape = cache
    w = params[f"{spec.name}.weight"]
    n, cin, h, wd = xshape
    k, s, p = spec.kernel, spec.stride, spec.padding
    params.grads[f"{spec.name}.bias"] += dy.sum(axis=(0, 2, 3))
    dcols = _im2col(_pad(dy, p), k, s, h, wd)  # (n*h*w, cout*k*k)
    params.grads[f"{spec.name}.weight"] += (xf.T @ dcols).reshape(w.shape)
    dx = dcols @ w.reshape(cin, -1).T
    return dx.reshape(n, h, wd, cin).transpose(0, 3, 1, 2)


def _fc_fwd(spec, params, x):
    w, b = params[f"{spec.name}.weight"], params[f"{spec.name}.bias"]
    return x @ w.T + b, x


def _fc_bwd(spec, params, x, dy):
    w = params[f"{spec.name}.weight"]
    params.grads[f"{spec.name}.weight"] += dy.T @ x
    params.grads[f"{spec.name}.bias"] += dy.sum(axis=0)
    return dy @ w


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_lastaxis(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward_layer(spec: LayerSpec, params: ParamStore, x: np.ndarray):
    kind = spec.kind
    if kind == "conv2d":
        return _conv_fwd(spec, params, x)
    if kind == "transposed_conv2d":
        return _tconv_fwd(spec, params, x)
    if kind == "fully_connected":
        return _fc_fwd(spec, params, x)
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "sigmoid":
        y = _sigmoid(x)
        return y, y
    if kind == "softmax":
        y = _softmax_lastaxis(x)
        return y, y
    # avgpool
    k = spec.kernel
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return y, x.shape


def _backward_layer(spec: LayerSpec, params: ParamStore, cache, dy: np.ndarray) -> np.ndarray:
    kind = spec.kind
    if kind == "conv2d":
        return _conv_bwd(spec, params, cache, dy)
    if kind == "transposed_conv2d":
        return _tconv_bwd(spec, params, cache, dy)
    if kind == "fully_connected":
        return _fc_bwd(spec, params, cache, dy)
    if kind == "relu":
        return dy * cache
    if kind == "sigmoid":
        return dy * cache * (1.0 - cache)
    if kind == "softmax":
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    k = spec.kernel
    n, c, h, w = cache
    dx = np.repeat(np.repeat(dy / (k * k), k, axis=2), k, axis=3)
    return dx.reshape(n, c, h, w)


class Tape:
    """Cached intermediates from one forward pass."""

    def __init__(self):
        self.records: list[tuple[LayerSpec, object]] = []
        self.out_shape: tuple[int, ...] | None = None
        self.in_shape: tuple[int, ...] | None = None


def forward(net: Sequence[LayerSpec], params: ParamStore, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    tape = Tape()
    tape.in_shape = x.shape
    for spec in net:
        try:
            spec.output_shape(x.shape[1:])
        except ShapeError as exc:
            raise ShapeError(f"{exc} (input batch shape {x.shape})") from None
        x, cache = _forward_layer(spec, params, x)
        tape.records.append((spec, cache))
    tape.out_shape = x.shape
    return x, tape


def backward(tape: Tape | None, dy: np.ndarray, params: ParamStore) -> np.ndarray:
    """Propagate ``dy`` back through ``tape``; parameter gradients accumulate."""
    if tape is None or tape.out_shape is None:
        raise RuntimeError("backward called before forward")
    if dy.shape != tape.out_shape:
        raise ShapeError(f"dy shape {dy.shape} != forward output {tape.out_shape}")
    for spec, cache in reversed(tape.records):
        dy = _backward_layer(spec, params, cache, dy)
    return dy


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9) -> None:
    """p <- p - lr * v,  v <- momentum * v + grad.  Gradients are zeroed afterwards."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    for name, p in params.params.items():
        g = params.grads[name]
        v = params.velocity.get(name)
        if v is None:
            v = params.velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v
        g.fill(0.0)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    max_abs_err: float
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format(self) -> str:
        lines = [f"{'tensor':<32} {'checked':>7} {'max_abs':>11} {'max_rel':>11}  result"]
        for e in self.entries:
            lines.append(f"{e.name:<32} {e.checked:>7d} {e.max_abs_err:>11.3e} {e.max_rel_err:>11.3e}  "
                         f"{'pass' if e.passed else 'FAIL'}")
        lines.append("overall: " + ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)


def grad_check(objective: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5,
               rtol: float = 1e-4, atol: float = 1e-7, max_entries: int | None = None,
               seed: int = 0, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients against central differences.

    ``objective(params)`` must return the scalar loss and leave d(loss)/d(param)
    accumulated in ``params.grads`` (it is called once on zeroed gradients for
    the analytic pass, then repeatedly for the numeric pass).  An entry passes
    when ``|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)``.
    With ``max_entries`` set, a seeded subset of each tensor is probed.
    """
    for name, p in params.params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters ({name} is {p.dtype})")
    params.zero_grad()
    objective(params)
    analytic = {k: v.copy() for k, v in params.grads.items()}
    rng = np.random.default_rng(seed)
    entries = []
    for name in (names if names is not None else params.names()):
        p = params.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            params.zero_grad()
            lp = objective(params)
            flat[i] = orig - eps
            params.zero_grad()
            lm = objective(params)
            flat[i] = orig
            num[t] = (lp - lm) / (2 * eps)
        diff = np.abs(a - num)
        scale = np.maximum(np.abs(a), np.abs(num))
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
        ok = bool(np.all(diff <= atol + rtol * scale))
        entries.append(GradCheckEntry(name, float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), len(idx), ok))
    params.zero_grad()
    return GradCheckReport(entries)


def net_objective(net: Sequence[LayerSpec], x: np.ndarray,
                  loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> Callable[[ParamStore], float]:
    """Wrap a layer sequence and a ``loss_fn(y) -> (loss, dloss/dy)`` for grad_check."""

    def objective(params: ParamStore) -> float:
        y, tape = forward(net, params, x)
        loss, dy = loss_fn(y)
        backward(tape, dy, params)
        return float(loss)

    return objective
