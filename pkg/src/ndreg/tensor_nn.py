"""Small numpy neural-network core with hand-written backward passes.

Images are NHWC float64 arrays. Every layer caches what it needs during
``forward`` and consumes that cache in ``backward``; there is no autodiff
graph. Parameters live in per-layer ``params`` dicts so the optimizer and the
checkpoint code can treat all layers uniformly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Incompatible tensor shape between consecutive layers."""


class StateError(RuntimeError):
    """Backward called without a cached forward pass."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, name=None, weight_decay=0.0):
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.name = name or self.kind
        self.weight_decay = float(weight_decay)
        self.params: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def build(self, input_shape, rng):
        """Materialize parameters for the given per-example input shape."""
        self.input_shape = tuple(input_shape)
        return self.output_shape(input_shape)

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"layer {self.name!r}: backward without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name, "weight_decay": self.weight_decay}


@dataclass
class NormalInit:
    """Normal initializer; ``std=None`` means He scaling sqrt(2 / fan_in)."""

    std: float | None = None
    mean: float = 0.0

    def sample(self, rng, shape, fan_in):
        std = np.sqrt(2.0 / fan_in) if self.std is None else self.std
        return rng.normal(self.mean, std, size=shape).astype(DTYPE)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, name=None, weight_decay=0.0, init=None):
        super().__init__(name, weight_decay)
        if units <= 0:
            raise ValueError("dense units must be positive")
        self.units = int(units)
        self.init = init or NormalInit()

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(
                f"layer {self.name!r} (dense) expects flat input, got per-example shape {tuple(input_shape)}"
            )
        return (self.units,)

    def build(self, input_shape, rng):
        out = self.output_shape(input_shape)
        fan_in = input_shape[0]
        self.input_shape = tuple(input_shape)
        self.params = {
            "W": self.init.sample(rng, (fan_in, self.units), fan_in),
            "b": np.zeros(self.units, dtype=DTYPE),
        }
        return out

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._pop_cache()
        grads = {"W": x.T @ grad, "b": grad.sum(axis=0)}
        return grads, grad @ self.params["W"].T

    def spec(self):
        return {**super().spec(), "units": self.units, "init_std": self.init.std}


class Conv2D(Layer):
    """2-D convolution on NHWC input with zero 'same' padding of kernel // 2."""

    kind = "conv2d"

    def __init__(self, filters, kernel=3, stride=1, name=None, weight_decay=0.0, init=None):
        super().__init__(name, weight_decay)
        if filters <= 0 or kernel <= 0 or stride <= 0:
            raise ValueError("conv filters, kernel and stride must be positive")
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = self.kernel // 2
        self.init = init or NormalInit()

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(
                f"layer {self.name!r} (conv2d) expects [H, W, C] input, got {tuple(input_shape)}"
            )
        h, w, _ = input_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"layer {self.name!r} (conv2d): input {tuple(input_shape)} too small")
        return (ho, wo, self.filters)

    def build(self, input_shape, rng):
        out = self.output_shape(input_shape)
        cin = input_shape[2]
        k = self.kernel
        self.input_shape = tuple(input_shape)
        self.params = {
            "W": self.init.sample(rng, (k, k, cin, self.filters), k * k * cin),
            "b": np.zeros(self.filters, dtype=DTYPE),
        }
        return out

    def _weight_matrix(self):
        return self.params["W"].reshape(-1, self.filters)

    def forward(self, x, train=False, rng=None):
        p, s, k = self.pad, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        b, ho, wo = win.shape[:3]
        # im2col columns ordered (kh, kw, C) to match W's memory layout
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, -1)
        self._cache = (cols, xp.shape)
        out = cols @ self._weight_matrix() + self.params["b"]
        return out.reshape(b, ho, wo, self.filters)

    def backward(self, grad, need_input_grad=True):
        cols, xp_shape = self._pop_cache()
        p, s, k = self.pad, self.stride, self.kernel
        b, ho, wo, f = grad.shape
        g2 = grad.reshape(-1, f)
        cin = xp_shape[3]
        dW = (cols.T @ g2).reshape(k, k, cin, f)
        if not need_input_grad:
            return {"W": dW, "b": g2.sum(axis=0)}, None
        dcols = (g2 @ self._weight_matrix().T).reshape(b, ho, wo, k, k, cin)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j]
        dx = dxp[:, p:xp_shape[1] - p, p:xp_shape[2] - p, :] if p else dxp
        return {"W": dW, "b": g2.sum(axis=0)}, dx

    def spec(self):
        return {**super().spec(), "filters": self.filters, "kernel": self.kernel,
                "stride": self.stride, "init_std": self.init.std}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        # np.maximum keeps NaN visible so the loss check can catch it
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        mask = self._pop_cache()
        return {}, np.where(mask, grad, 0.0)


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, pool=2, stride=None, name=None):
        super().__init__(name)
        stride = pool if stride is None else stride
        if pool <= 0 or stride <= 0:
            raise ValueError("pool size and stride must be positive")
        self.pool = int(pool)
        self.stride = int(stride)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(
                f"layer {self.name!r} (maxpool2d) expects [H, W, C] input, got {tuple(input_shape)}"
            )
        h, w, c = input_shape
        ho = (h - self.pool) // self.stride + 1
        wo = (w - self.pool) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(
                f"layer {self.name!r} (maxpool2d): input {tuple(input_shape)} too small for pool {self.pool}"
            )
        return (ho, wo, c)

    def forward(self, x, train=False, rng=None):
        k, s = self.pool, self.stride
        if k == s:
            return self._forward_tiled(x)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        b, ho, wo, c = win.shape[:4]
        flat = win.reshape(b, ho, wo, c, k * k)
        # argmax routes the gradient to a single winner, ties go to the first
        idx = flat.argmax(axis=-1)
        self._cache = ("window", idx, x.shape)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _forward_tiled(self, x):
        # non-overlapping windows: elementwise max over the k*k strided views
        k = self.pool
        ho, wo = x.shape[1] // k, x.shape[2] // k
        views = [x[:, i:ho * k:k, j:wo * k:k] for i in range(k) for j in range(k)]
        out = views[0].copy()
        idx = np.zeros(out.shape, dtype=np.int8)
        for n, v in enumerate(views[1:], start=1):
            better = v > out
            out = np.where(better, v, out)
            idx[better] = n
        self._cache = ("tiled", idx, x.shape)
        return out

    def backward(self, grad):
        how, idx, x_shape = self._pop_cache()
        k, s = self.pool, self.stride
        dx = np.zeros(x_shape, dtype=DTYPE)
        if how == "tiled":
            ho, wo = grad.shape[1:3]
            for n in range(k * k):
                i, j = divmod(n, k)
                dx[:, i:ho * k:k, j:wo * k:k] = np.where(idx == n, grad, 0.0)
            return {}, dx
        b, ho, wo, c = grad.shape
        di, dj = np.divmod(idx, k)
        rows = np.arange(ho)[None, :, None, None] * s + di
        cols = np.arange(wo)[None, None, :, None] * s + dj
        bi = np.broadcast_to(np.arange(b)[:, None, None, None], idx.shape)
        ci = np.broadcast_to(np.arange(c)[None, None, None, :], idx.shape)
        np.add.at(dx, (bi, rows, cols, ci), grad)
        return {}, dx

    def spec(self):
        return {**super().spec(), "pool": self.pool, "stride": self.stride}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) at train time."""

    kind = "dropout"

    def __init__(self, rate, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = None if not train else 1.0
            return x
        if rng is None:
            raise ValueError(f"layer {self.name!r}: train-mode dropout needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep) / keep
        self._cache = mask
        return x * mask

    def backward(self, grad):
        if self._cache is None:
            # eval-mode forward caches nothing; dropout is then the identity
            return {}, grad
        mask, self._cache = self._cache, None
        return {}, grad * mask

    def spec(self):
        return {**super().spec(), "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._pop_cache()
        return {}, grad.reshape(shape)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, Dropout, Flatten)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    name = spec.pop("name", None)
    wd = spec.pop("weight_decay", 0.0)
    if kind == "dense":
        return Dense(spec["units"], name, wd, NormalInit(spec.get("init_std")))
    if kind == "conv2d":
        return Conv2D(spec["filters"], spec["kernel"], spec["stride"], name, wd,
                      NormalInit(spec.get("init_std")))
    if kind == "maxpool2d":
        return MaxPool2D(spec["pool"], spec["stride"], name)
    if kind == "dropout":
        return Dropout(spec["rate"], name)
    if kind in ("relu", "flatten"):
        return LAYER_KINDS[kind](name)
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# network


@dataclass
class Network:
    """Ordered stack of layers with shapes checked at construction.

    ``taps`` maps a name to the index of the layer whose output is exposed,
    e.g. ``{"V1": 2}`` for the output of the first conv block.
    """

    layers: list
    input_shape: tuple
    seed: int | None = None
    taps: dict = field(default_factory=dict)
    mode: str = "train"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if any(d <= 0 for d in self.input_shape):
            raise ShapeError(f"input shape must be positive, got {self.input_shape}")
        rng = np.random.default_rng(self.seed)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.name}): {exc}") from None
            self.shapes.append(tuple(shape))
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"tap {name!r} points at missing layer {idx}")
        self._depth = None

    @property
    def output_shape(self):
        return self.shapes[-1]

    def tap_shape(self, tap):
        return self.shapes[self.taps[tap] + 1]

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def _stop(self, upto):
        if upto is None:
            return len(self.layers)
        return self.taps[upto] + 1

    def forward(self, x, rng=None, upto=None):
        """Run the stack (or up to and including tap ``upto``), caching for backward."""
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].name}): expected input [B, {', '.join(map(str, self.input_shape))}], "
                f"got {list(x.shape)}"
            )
        train = self.mode == "train"
        stop = self._stop(upto)
        for layer in self.layers[:stop]:
            x = layer.forward(x, train=train, rng=rng)
        self._depth = stop
        return x

    def backward(self, grad, need_input_grad=True):
        """Backpropagate ``grad`` through the layers touched by the last forward.

        Returns ``(param_grads, input_grad)`` where ``param_grads[i]`` is the
        dict of gradients for ``layers[i]`` (empty for layers not reached).
        With ``need_input_grad=False`` a first conv layer skips computing the
        input gradient and ``None`` is returned in its place.
        """
        if self._depth is None:
            raise StateError("backward called without a preceding forward pass")
        depth, self._depth = self._depth, None
        param_grads = [{} for _ in self.layers]
        for i in range(depth - 1, 0, -1):
            param_grads[i], grad = self.layers[i].backward(grad)
        first = self.layers[0]
        if not need_input_grad and isinstance(first, Conv2D):
            param_grads[0], grad = first.backward(grad, need_input_grad=False)
        else:
            param_grads[0], grad = first.backward(grad)
        return param_grads, grad

    def parameters(self):
        return [layer.params for layer in self.layers]

    def num_parameters(self):
        return int(sum(p.size for layer in self.layers for p in layer.params.values()))

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def copy_params_from(self, other):
        for mine, theirs in zip(self.layers, other.layers):
            for k in mine.params:
                mine.params[k] = theirs.params[k].copy()

    def fingerprint(self):
        h = hashlib.sha256()
        for layer in self.layers:
            for k in sorted(layer.params):
                h.update(np.ascontiguousarray(layer.params[k]).tobytes())
        return h.hexdigest()


def forward(net: Network, x, rng=None, upto=None):
    return net.forward(x, rng=rng, upto=upto)


def backward(net: Network, upstream_grad):
    return net.backward(upstream_grad)


def sgd_step(net: Network, grads, lr, scale=1.0, step=None, layers=None):
    """In-place SGD with per-layer L2 decay: theta -= lr * (scale * grad + wd * theta).

    ``layers`` restricts the update to the given layer indices (the rest of
    the network is left bitwise untouched).
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    indices = range(len(net.layers)) if layers is None else layers
    for i in indices:
        layer, g = net.layers[i], grads[i]
        for k, p in layer.params.items():
            if k not in g:
                continue
            gk = g[k]
            if gk.shape != p.shape:
                raise ShapeError(f"layer {i} ({layer.name}) grad {k}: {gk.shape} != {p.shape}")
            if not np.all(np.isfinite(gk)):
                raise NonFiniteError(f"non-finite gradient in layer {i} ({layer.name}) param {k} at step {step}")
            if lr == 0.0:
                continue
            total = gk if scale == 1.0 else scale * gk
            if layer.weight_decay and k == "W":
                total = total + layer.weight_decay * p
            layer.params[k] = p - lr * total
    return net


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / B."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    b, k = logits.shape
    if k < 2:
        raise ValueError("cross-entropy needs at least two classes")
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be integers in [0, {k}) with shape ({b},)")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b


# ---------------------------------------------------------------------------
# architectures

CORNETZ_AREAS = ("V1", "V2", "V4", "IT")


def build_cornetz(num_classes=100, input_shape=(32, 32, 3), channels=(64, 128, 256, 512),
                  kernel=3, dropout=0.5, weight_decay=0.0, seed=None):
    """CORnet-Z: four conv -> ReLU -> maxpool areas, then a linear classifier.

    The output of each area is exposed as a tap named after it.
    """
    h, w = input_shape[:2]
    if min(h, w) < 2 ** len(CORNETZ_AREAS):
        raise ShapeError(
            f"input {tuple(input_shape)} too small for {len(CORNETZ_AREAS)} 2x2 pooling stages "
            f"(need at least {2 ** len(CORNETZ_AREAS)} pixels per side)"
        )
    if len(channels) != len(CORNETZ_AREAS):
        raise ValueError("need one channel count per area")
    layers, taps = [], {}
    for area, ch in zip(CORNETZ_AREAS, channels):
        layers += [
            Conv2D(ch, kernel, 1, name=f"{area}.conv", weight_decay=weight_decay),
            ReLU(name=f"{area}.relu"),
            MaxPool2D(2, 2, name=f"{area}.pool"),
        ]
        taps[area] = len(layers) - 1
    layers += [
        Flatten(name="flatten"),
        Dropout(dropout, name="dropout"),
        Dense(num_classes, name="classifier", weight_decay=weight_decay),
    ]
    return Network(layers, input_shape, seed=seed, taps=taps)


# ---------------------------------------------------------------------------
# checkpoints


def network_to_arrays(net: Network, prefix=""):
    arrays = {}
    for i, layer in enumerate(net.layers):
        for k, p in layer.params.items():
            arrays[f"{prefix}{i}.{k}"] = p.astype("<f8")
    meta = {"input_shape": list(net.input_shape), "taps": net.taps, "layers": net.specs()}
    return arrays, meta


def network_from_arrays(arrays, meta, prefix=""):
    layers = [layer_from_spec(s) for s in meta["layers"]]
    net = Network(layers, tuple(meta["input_shape"]), seed=0, taps=dict(meta["taps"]))
    for i, layer in enumerate(net.layers):
        for k in layer.params:
            arr = np.asarray(arrays[f"{prefix}{i}.{k}"], dtype=DTYPE)
            if arr.shape != layer.params[k].shape:
                raise ShapeError(f"checkpoint layer {i} param {k}: shape {arr.shape} != {layer.params[k].shape}")
            layer.params[k] = arr.copy()
    return net


def save_network(path, net: Network, config_hash="", rng=None):
    """Write a single network checkpoint (``.npz`` with a JSON header)."""
    arrays, meta = network_to_arrays(net)
    meta["config_hash"] = config_hash
    meta["rng_state"] = rng.bit_generator.state if rng is not None else None
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return network_from_arrays(arrays, meta), meta
