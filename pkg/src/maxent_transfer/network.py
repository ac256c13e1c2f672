"""Sequential feed-forward networks with a hand-written backward pass.

Every dense layer computes ``A = X W^T + 1 b`` with ``W`` of shape
``(fan_out, fan_in)`` and ``b`` of shape ``(1, fan_out)``. The last layer of a
network is always dense and its outputs are the logits fed to softmax.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, StateError
from .tensor import DTYPE, matmul

PRETRAINED = "pretrained"
AUGMENTED = "augmented"
TAGS = (PRETRAINED, AUGMENTED)

TRAIN = "train"
EVAL = "eval"


class Layer:
    kind = "layer"
    param_names = ()

    def __init__(self, tag=PRETRAINED):
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        self._tag = tag

    @property
    def tag(self):
        return self._tag

    def params(self):
        return [getattr(self, name) for name in self.param_names]

    def copy(self, tag=None):
        new = copy.deepcopy(self)
        if tag is not None:
            if tag not in TAGS:
                raise ValueError(f"unknown tag {tag!r}")
            new._tag = tag
        return new

    def forward(self, x, mode, track_stats):
        """Return ``(output, cache)``; ``cache`` is whatever backward needs."""
        raise NotImplementedError

    def backward(self, grad_out, x, cache):
        """Return ``(grad_in, param_grads)``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(tag={self.tag!r})"


class Dense(Layer):
    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, W, b=None, tag=PRETRAINED):
        super().__init__(tag)
        self.W = np.array(W, dtype=DTYPE)
        if self.W.ndim != 2:
            raise DimensionError(f"dense weights must be 2-D, got shape {self.W.shape}")
        if b is None:
            b = np.zeros((1, self.W.shape[0]))
        self.b = np.array(b, dtype=DTYPE).reshape(1, -1)
        if self.b.shape[1] != self.W.shape[0]:
            raise DimensionError(
                f"bias length {self.b.shape[1]} does not match {self.W.shape[0]} weight rows"
            )

    @classmethod
    def zeros(cls, fan_in, fan_out, tag=PRETRAINED):
        return cls(np.zeros((fan_out, fan_in)), np.zeros((1, fan_out)), tag=tag)

    @property
    def fan_in(self):
        return self.W.shape[1]

    @property
    def fan_out(self):
        return self.W.shape[0]

    def forward(self, x, mode, track_stats):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise DimensionError(
                f"dense layer expects input width {self.fan_in}, got shape {x.shape}"
            )
        return matmul(x, self.W.T) + self.b, None

    def backward(self, grad_out, x, cache):
        dW = grad_out.T @ x
        db = grad_out.sum(axis=0, keepdims=True)
        return grad_out @ self.W, [dW, db]

    def __repr__(self):
        return f"Dense({self.fan_in}->{self.fan_out}, tag={self.tag!r})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, track_stats):
        return np.maximum(x, 0.0), None

    def backward(self, grad_out, x, cache):
        # subgradient 0 at exactly 0
        return grad_out * (x > 0), []


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode, track_stats):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out, x, cache):
        return grad_out.reshape(cache), []


class PatchDense(Layer):
    """Dense map shared over non-overlapping ``p x p`` patches of NHWC images.

    Equivalent to a convolution with kernel size and stride both equal to
    ``patch``. ``W`` has shape ``(filters, patch * patch * channels)``.
    """

    kind = "patch_dense"
    param_names = ("W", "b")

    def __init__(self, W, b=None, patch=2, tag=PRETRAINED):
        super().__init__(tag)
        self.W = np.array(W, dtype=DTYPE)
        self.patch = int(patch)
        if b is None:
            b = np.zeros((1, self.W.shape[0]))
        self.b = np.array(b, dtype=DTYPE).reshape(1, -1)
        if self.b.shape[1] != self.W.shape[0]:
            raise DimensionError("bias length does not match filter count")

    @property
    def fan_in(self):
        return self.W.shape[1]

    @property
    def fan_out(self):
        return self.W.shape[0]

    def _patches(self, x):
        n, h, w, c = x.shape
        p = self.patch
        if h % p or w % p or p * p * c != self.fan_in:
            raise DimensionError(
                f"patch layer (patch={p}, fan_in={self.fan_in}) cannot take input {x.shape}"
            )
        cols = x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return cols.reshape(-1, p * p * c)

    def forward(self, x, mode, track_stats):
        if x.ndim != 4:
            raise DimensionError(f"patch layer expects NHWC input, got shape {x.shape}")
        n, h, w, _ = x.shape
        p = self.patch
        out = matmul(self._patches(x), self.W.T) + self.b
        return out.reshape(n, h // p, w // p, self.fan_out), None

    def backward(self, grad_out, x, cache):
        n, h, w, c = x.shape
        p = self.patch
        g = grad_out.reshape(-1, self.fan_out)
        dW = g.T @ self._patches(x)
        db = g.sum(axis=0, keepdims=True)
        gcols = (g @ self.W).reshape(n, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return gcols.reshape(x.shape), [dW, db]


class FeatureNorm(Layer):
    """Correction layer placed in front of a new head.

    Each feature is standardized with batch statistics and the result is
    scaled by ``1/sqrt(N)``, so the batch mean of the per-example energy
    ``sum_k xbar_k**2`` is ``K/N`` for ``K`` non-constant features. Eval mode
    uses running statistics and the batch size of the last training batch.
    """

    kind = "feature_norm"

    def __init__(self, width, momentum=0.9, eps=1e-8, tag=AUGMENTED):
        super().__init__(tag)
        self.width = int(width)
        if self.width < 1:
            raise ValueError("feature_norm needs at least one feature")
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros((1, self.width))
        self.running_var = np.ones((1, self.width))
        self.ref_batch = None

    @property
    def has_running_stats(self):
        return self.ref_batch is not None

    def forward(self, x, mode, track_stats):
        if x.ndim != 2 or x.shape[1] != self.width:
            raise DimensionError(f"feature_norm expects width {self.width}, got shape {x.shape}")
        if mode == TRAIN:
            n = x.shape[0]
            if n < 2:
                raise ValueError("feature_norm needs a batch of at least 2 in batch_stats mode")
            # shifted by the first row so constant columns centre to exactly 0
            shift = x[:1]
            d = x - shift
            d_mean = d.mean(axis=0, keepdims=True)
            centered = d - d_mean
            mean = shift + d_mean
            var = (centered**2).mean(axis=0, keepdims=True)
            if track_stats:
                if self.ref_batch is None:
                    self.running_mean = mean.copy()
                    self.running_var = var + self.eps
                else:
                    m = self.momentum
                    self.running_mean = m * self.running_mean + (1 - m) * mean
                    self.running_var = m * self.running_var + (1 - m) * (var + self.eps)
                self.ref_batch = n
            inv_std = 1.0 / np.sqrt(var + self.eps)
            scale = 1.0 / np.sqrt(n)
        else:
            if self.ref_batch is None:
                raise StateError("feature_norm has no running statistics yet")
            centered = x - self.running_mean
            # running_var already includes eps
            inv_std = 1.0 / np.sqrt(self.running_var)
            scale = 1.0 / np.sqrt(self.ref_batch)
        xhat = centered * inv_std
        return xhat * scale, (mode, xhat, inv_std, scale)

    def backward(self, grad_out, x, cache):
        mode, xhat, inv_std, scale = cache
        g = grad_out * scale
        if mode != TRAIN:
            return g * inv_std, []
        gx = g - g.mean(axis=0, keepdims=True) - xhat * (g * xhat).mean(axis=0, keepdims=True)
        return gx * inv_std, []

    def __repr__(self):
        return f"FeatureNorm({self.width}, tag={self.tag!r})"


def feature_norm_forward(X, state, mode=TRAIN):
    """Functional form of the correction layer; ``state`` is a FeatureNorm."""
    out, _ = state.forward(np.asarray(X, dtype=DTYPE), mode, track_stats=(mode == TRAIN))
    return out


class Network:
    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("a network must end in a dense layer")

    @property
    def head(self):
        return self.layers[-1]

    @property
    def n_classes(self):
        return self.head.fan_out

    def param_groups(self):
        """List of ``(layer_index, name, array)`` in a fixed order."""
        return [
            (i, name, getattr(layer, name))
            for i, layer in enumerate(self.layers)
            for name in layer.param_names
        ]

    def parameters(self):
        return [p for _, _, p in self.param_groups()]

    def param_tags(self):
        return [self.layers[i].tag for i, _, _ in self.param_groups()]

    def copy(self):
        return Network([layer.copy() for layer in self.layers])

    def state_dict(self):
        return {f"{i}.{name}": p.copy() for i, name, p in self.param_groups()}

    def __repr__(self):
        return "Network(" + ", ".join(map(repr, self.layers)) + ")"


@dataclass
class ForwardTrace:
    net: Network
    mode: str
    inputs: list  # X^l for each layer
    outputs: list  # A^l for each layer
    caches: list
    logits: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray

    @property
    def n(self):
        return self.logits.shape[0]

    @property
    def x_last(self):
        """Input to the last dense layer (post correction layer if present)."""
        return self.inputs[-1]


@dataclass
class BackwardTrace:
    deltas: list  # gradient of the loss w.r.t. each layer's output
    grads: list  # per-layer list of parameter gradients
    delta_prev: np.ndarray = field(default=None)  # gradient w.r.t. the head's input
    has_prev_layer: bool = True

    @property
    def delta_last(self):
        return self.deltas[-1]

    def flat_grads(self):
        return [g for layer_grads in self.grads for g in layer_grads]


def softmax(logits):
    """Row-wise softmax with max subtraction; returns ``(probs, log_probs)``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return np.exp(log_probs), log_probs


def forward(net, X, mode=TRAIN, track_stats=True):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(X, dtype=DTYPE)
    if x.shape[0] < 1:
        raise DimensionError("forward needs at least one example")
    inputs, outputs, caches = [], [], []
    for i, layer in enumerate(net.layers):
        inputs.append(x)
        x, cache = layer.forward(x, mode, track_stats and mode == TRAIN)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations in layer {i} ({layer.kind})")
        outputs.append(x)
        caches.append(cache)
    probs, log_probs = softmax(x)
    return ForwardTrace(net, mode, inputs, outputs, caches, x, log_probs, probs)


def _check_one_hot(y):
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows")


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    y = np.zeros((labels.shape[0], n_classes))
    y[np.arange(labels.shape[0]), labels] = 1.0
    return y


def ce_loss(probs, y):
    """Mean over the batch of ``-ln probs`` at the true class."""
    probs = np.asarray(probs, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if probs.shape != y.shape:
        raise DimensionError(f"estimates {probs.shape} and labels {y.shape} differ in shape")
    _check_one_hot(y)
    return float(-np.mean(np.log(probs[y == 1])))


def ce_loss_from_trace(trace, y):
    """Same as ``ce_loss`` but evaluated on log-probabilities (no underflow)."""
    y = np.asarray(y, dtype=DTYPE)
    _check_one_hot(y)
    return float(-np.mean(trace.log_probs[y == 1]))


def backward(trace, y):
    if trace is None or not trace.outputs or trace.probs is None:
        raise StateError("backward needs a complete forward trace")
    net = trace.net
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != trace.probs.shape:
        raise DimensionError(f"labels {y.shape} do not match estimates {trace.probs.shape}")
    _check_one_hot(y)
    n_layers = len(net.layers)
    if len(trace.inputs) != n_layers or len(trace.caches) != n_layers:
        raise StateError("forward trace is missing per-layer tensors")

    deltas = [None] * n_layers
    grads = [None] * n_layers
    delta = (trace.probs - y) / trace.n
    delta_prev = None
    for i in range(n_layers - 1, -1, -1):
        deltas[i] = delta
        layer = net.layers[i]
        delta, grads[i] = layer.backward(delta, trace.inputs[i], trace.caches[i])
        if i == n_layers - 1:
            delta_prev = delta
    return BackwardTrace(deltas, grads, delta_prev, has_prev_layer=n_layers > 1)


def accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def predict(net, X, batch_size=1024):
    """Eval-mode class probabilities, computed in chunks."""
    X = np.asarray(X, dtype=DTYPE)
    chunks = [
        forward(net, X[i : i + batch_size], mode=EVAL).probs
        for i in range(0, X.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def replace_head(net, n_classes, init, rng, use_fn=False):
    """Swap the final dense layer for a fresh ``n_classes``-way head.

    Remaining layers are copied and tagged pretrained; the new head (and the
    correction layer when ``use_fn``) are tagged augmented.
    """
    from .initializers import apply_init

    if not isinstance(net.layers[-1], Dense):
        raise ValueError("network has no dense final layer")
    if int(n_classes) < 2:
        raise ValueError(f"a classification head needs at least 2 classes, got {n_classes}")
    body = [layer.copy(tag=PRETRAINED) for layer in net.layers[:-1]]
    width = net.head.fan_in
    if use_fn:
        body.append(FeatureNorm(width, tag=AUGMENTED))
    head = apply_init(Dense.zeros(width, int(n_classes), tag=AUGMENTED), init, rng)
    return Network(body + [head])


def build_mlp(input_shape, n_classes, rng, hidden=(256, 128), init=None):
    """``D-256-128-C`` ReLU MLP; image inputs are flattened first."""
    from .initializers import InitSpec, apply_init

    init = init or InitSpec("he_fan_in")
    input_shape = tuple(input_shape)
    layers = [Flatten()] if len(input_shape) > 1 else []
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [apply_init(Dense.zeros(width, h), init, rng), ReLU()]
        width = h
    layers.append(apply_init(Dense.zeros(width, n_classes), init, rng))
    return Network(layers)


def build_cnn(input_shape, n_classes, rng, filters=(16, 32), patch=2, hidden=128):
    """Two patch-convolution blocks, then a dense ReLU layer and the head."""
    from .initializers import InitSpec, apply_init, he_variance
    from .tensor import normal_sample

    h, w, c = input_shape
    layers = []
    for f in filters:
        fan_in = patch * patch * c
        W = normal_sample(rng, (f, fan_in), 0.0, he_variance(fan_in, 2.0))
        layers += [PatchDense(W, patch=patch), ReLU()]
        h, w, c = h // patch, w // patch, f
    layers.append(Flatten())
    init = InitSpec("he_fan_in")
    layers += [apply_init(Dense.zeros(h * w * c, hidden), init, rng), ReLU()]
    layers.append(apply_init(Dense.zeros(hidden, n_classes), init, rng))
    return Network(layers)


ARCHITECTURES = {"mlp": build_mlp, "cnn": build_cnn}
