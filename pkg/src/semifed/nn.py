"""Small feed-forward network engine with hand-written backpropagation.

Supports exactly what the federated protocol needs: dense layers, batch
normalisation, ReLU and a softmax head, trained by plain SGD (optionally
with momentum) on weighted sums of cross-entropy and distillation KL terms.
Everything runs in float64 numpy.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError, ParameterError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Dense:
    kind = "dense"

    def __init__(self, weights, biases, live=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"dense weights {self.weights.shape} incompatible with biases {self.biases.shape}"
            )
        # live[i, j] is False for weights frozen at zero by magnitude pruning
        self.live = None if live is None else np.asarray(live, dtype=bool)
        if self.live is not None:
            if self.live.shape != self.weights.shape:
                raise DimensionError("live mask shape differs from weight shape")
            self.weights[~self.live] = 0.0

    @property
    def in_width(self):
        return self.weights.shape[0]

    @property
    def out_width(self):
        return self.weights.shape[1]

    def params(self):
        return [self.weights, self.biases]

    def forward(self, x, train):
        return x @ self.weights + self.biases, x

    def backward(self, cache, dy):
        x = cache
        dw = x.T @ dy
        if self.live is not None:
            dw = dw * self.live
        return dy @ self.weights.T, [dw, dy.sum(axis=0)]

    def __repr__(self):
        return f"Dense({self.in_width}->{self.out_width})"


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, width, scale=None, shift=None, running_mean=None, running_var=None,
                 momentum=BN_MOMENTUM, eps=BN_EPS):
        self.scale = np.ones(width) if scale is None else np.asarray(scale, dtype=np.float64)
        self.shift = np.zeros(width) if shift is None else np.asarray(shift, dtype=np.float64)
        self.running_mean = (np.zeros(width) if running_mean is None
                             else np.asarray(running_mean, dtype=np.float64))
        self.running_var = (np.ones(width) if running_var is None
                            else np.asarray(running_var, dtype=np.float64))
        self.momentum = momentum
        self.eps = eps
        for name in ("scale", "shift", "running_mean", "running_var"):
            if getattr(self, name).shape != (width,):
                raise DimensionError(f"batchnorm {name} must have shape ({width},)")
        if np.any(self.running_var <= 0):
            raise ParameterError("batchnorm running_var must be strictly positive")

    @property
    def width(self):
        return self.scale.shape[0]

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, train):
        if train:
            n = x.shape[0]
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        return self.scale * xhat + self.shift, (xhat, inv_std, train)

    def backward(self, cache, dy):
        xhat, inv_std, train = cache
        dscale = (dy * xhat).sum(axis=0)
        dshift = dy.sum(axis=0)
        dxhat = dy * self.scale
        if train:
            n = dy.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, [dscale, dshift]

    def __repr__(self):
        return f"BatchNorm({self.width})"


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def forward(self, x, train):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, dy):
        return dy * cache, []

    def __repr__(self):
        return "ReLU()"


class Network:
    """Ordered stack of Dense / BatchNorm / ReLU layers ending in a Dense head.

    ``descriptor`` is set by the pruning module and records which reference
    units (or weights) this network retains; ``None`` means unpruned.
    """

    def __init__(self, layers, descriptor=None):
        self.layers = list(layers)
        self.descriptor = descriptor
        self._velocity = None
        self._validate()

    def _validate(self):
        dense = [layer for layer in self.layers if isinstance(layer, Dense)]
        if not dense or not isinstance(self.layers[-1], Dense):
            raise DimensionError("network must end with a dense head")
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if width is not None and layer.in_width != width:
                    raise DimensionError(f"layer {i}: dense expects {layer.in_width} inputs, gets {width}")
                width = layer.out_width
            elif isinstance(layer, BatchNorm):
                if i == 0 or not isinstance(self.layers[i - 1], Dense) or layer.width != width:
                    raise DimensionError(f"layer {i}: batchnorm must follow a dense layer of equal width")
            elif not isinstance(layer, ReLU):
                raise DimensionError(f"layer {i}: unsupported layer {layer!r}")

    @property
    def input_width(self):
        return self.layers[0].in_width

    @property
    def num_classes(self):
        return self.layers[-1].out_width

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self):
        return copy.deepcopy(self)

    def _check_batch(self, x, train):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise DimensionError(f"batch shape {x.shape} does not match input width {self.input_width}")
        if train and x.shape[0] < 2:
            raise DegenerateBatchError("train-mode forward needs at least 2 samples for batch statistics")
        return x

    def forward(self, x, mode="eval"):
        """Logits for a batch. ``mode='train'`` updates batch-norm running statistics."""
        logits, _ = self.forward_cached(x, mode)
        return logits

    def forward_cached(self, x, mode="eval"):
        if mode not in ("train", "eval"):
            raise ParameterError(f"unknown mode {mode!r}")
        train = mode == "train"
        h = self._check_batch(x, train)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, train)
            caches.append(cache)
        if not np.all(np.isfinite(h)):
            raise NumericError("forward")
        return h, caches

    def backward(self, caches, dlogits):
        grads = []
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(cache, d)
            grads.append(g)
        return [g for layer_grads in reversed(grads) for g in layer_grads]

    def __repr__(self):
        return "Network(" + ", ".join(map(repr, self.layers)) + ")"


def mlp(input_width, hidden, num_classes, rng, batchnorm=True):
    """He-initialised MLP: ``[Dense, BatchNorm, ReLU] * len(hidden) + Dense``."""
    layers = []
    width = input_width
    for h in hidden:
        layers.append(Dense(rng.normal(0.0, np.sqrt(2.0 / width), (width, h)), np.zeros(h)))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(rng.normal(0.0, np.sqrt(1.0 / width), (width, num_classes)), np.zeros(num_classes)))
    return Network(layers)


# ---------------------------------------------------------------- losses


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def _as_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return logits[None, :] if logits.ndim == 1 else logits


def cross_entropy_with_grad(logits, labels):
    logits = _as_logits(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross entropy of an empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    return cross_entropy_with_grad(logits, labels)[0]


def kl_distill_with_grad(teacher_logits, student_logits, temperature=1.0, reverse=False):
    """KL between temperature-softmaxed teacher and student, gradient w.r.t. the student.

    ``reverse=False`` computes KL(teacher || student); ``reverse=True`` the
    opposite argument order.
    """
    if not temperature > 0:
        raise ParameterError("temperature must be positive")
    t = _as_logits(teacher_logits)
    s = _as_logits(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {s.shape}")
    n = s.shape[0]
    if n == 0:
        raise DimensionError("KL of an empty batch")
    logp = log_softmax(t / temperature)
    logq = log_softmax(s / temperature)
    p, q = np.exp(logp), np.exp(logq)
    if not reverse:
        per_row = (p * (logp - logq)).sum(axis=1)
        grad = (q - p) / temperature
    else:
        diff = logq - logp
        per_row = (q * diff).sum(axis=1)
        grad = q * (diff - per_row[:, None]) / temperature
    return float(per_row.mean()), grad / n


def kl_distill(teacher_logits, student_logits, temperature=1.0, reverse=False):
    return kl_distill_with_grad(teacher_logits, student_logits, temperature, reverse)[0]


@dataclass
class KLTerm:
    """Distillation target: frozen logits computed on the same batch."""

    target: np.ndarray
    weight: float = 1.0
    name: str = "kl"


@dataclass
class LossSpec:
    """Weighted sum of cross-entropy and KL distillation terms.

    ``bn_l1`` adds an L1 penalty on batch-norm scales (sparsity training
    before channel pruning).
    """

    labels: np.ndarray | None = None
    ce_weight: float = 1.0
    kl_terms: list[KLTerm] = field(default_factory=list)
    temperature: float = 1.0
    reverse_kl: bool = False
    bn_l1: float = 0.0


def loss_and_grad(net, batch, spec, mode="train"):
    logits, caches = net.forward_cached(batch, mode)
    total = 0.0
    dlogits = np.zeros_like(logits)
    if spec.labels is not None and spec.ce_weight != 0.0:
        value, grad = cross_entropy_with_grad(logits, spec.labels)
        if not np.isfinite(value):
            raise NumericError("ce")
        total += spec.ce_weight * value
        dlogits += spec.ce_weight * grad
    for i, term in enumerate(spec.kl_terms):
        if term.weight == 0.0:
            continue
        value, grad = kl_distill_with_grad(term.target, logits, spec.temperature, spec.reverse_kl)
        if not np.isfinite(value):
            raise NumericError(f"{term.name}[{i}]")
        total += term.weight * value
        dlogits += term.weight * grad
    grads = net.backward(caches, dlogits)
    if spec.bn_l1:
        idx = 0
        for layer in net.layers:
            if isinstance(layer, BatchNorm):
                total += spec.bn_l1 * float(np.abs(layer.scale).sum())
                grads[idx] = grads[idx] + spec.bn_l1 * np.sign(layer.scale)
            idx += len(layer.params())
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("grad")
    return total, grads


def train_step(net, batch, spec, lr, momentum=0.0):
    """One forward/backward pass and SGD update, in place. Returns the pre-step loss."""
    if not lr >= 0:
        raise ParameterError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ParameterError("momentum must lie in [0, 1)")
    loss, grads = loss_and_grad(net, batch, spec, mode="train")
    params = net.parameters()
    if momentum:
        if net._velocity is None or [v.shape for v in net._velocity] != [p.shape for p in params]:
            net._velocity = [np.zeros_like(p) for p in params]
        for v, g in zip(net._velocity, grads):
            v *= momentum
            v += g
        grads = net._velocity
    for p, g in zip(params, grads):
        p -= lr * g
    return loss


def minibatches(n, batch_size, rng):
    """Shuffled index batches; a trailing singleton merges into the previous batch."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# ------------------------------------------------------- gradient checking


def grad_check(net, batch, labels, epsilon=1e-4, kl_target=None, temperature=1.0,
               max_params=None, seed=0, mode="eval"):
    """Largest relative error between analytic and central-difference gradients.

    Batch norm defaults to eval mode so the loss is a pure function of the
    parameters; train mode is also a pure function (batch statistics), it only
    drifts the running statistics of ``net``. Frozen (pruned) weights are
    skipped. With ``max_params`` a seeded subsample of at least 200
    parameters is checked.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ParameterError("epsilon must lie in [1e-6, 1e-3]")
    spec = LossSpec(labels=np.asarray(labels), temperature=temperature)
    if kl_target is not None:
        spec.kl_terms.append(KLTerm(np.asarray(kl_target, dtype=np.float64)))

    def loss():
        return loss_and_grad(net, batch, spec, mode=mode)[0]

    _, analytic = loss_and_grad(net, batch, spec, mode=mode)
    params = net.parameters()
    live = []
    for layer in net.layers:
        for k, p in enumerate(layer.params()):
            mask = np.ones(p.shape, dtype=bool)
            if k == 0 and isinstance(layer, Dense) and layer.live is not None:
                mask = layer.live.copy()
            live.append(mask)
    coords = [(i, j) for i, m in enumerate(live) for j in np.flatnonzero(m.ravel())]
    if max_params is not None and len(coords) > max_params:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(coords), size=max(max_params, 200), replace=False)
        coords = [coords[k] for k in sorted(keep)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].reshape(-1)
        original = flat[j]
        flat[j] = original + epsilon
        up = loss()
        flat[j] = original - epsilon
        down = loss()
        flat[j] = original
        numeric = (up - down) / (2 * epsilon)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def random_network(rng, input_width=None, num_classes=None):
    """Random Dense/BatchNorm/ReLU stack with non-trivial BN statistics."""
    d = int(input_width or rng.integers(2, 7))
    c = int(num_classes or rng.integers(2, 5))
    layers = []
    width = d
    for _ in range(int(rng.integers(0, 3))):
        h = int(rng.integers(2, 7))
        layers.append(Dense(rng.normal(0, 1.0, (width, h)), rng.normal(0, 0.5, h)))
        if rng.random() < 0.7:
            layers.append(BatchNorm(h, scale=rng.normal(1.0, 0.5, h), shift=rng.normal(0, 0.5, h),
                                    running_mean=rng.normal(0, 0.5, h),
                                    running_var=rng.uniform(0.5, 2.0, h)))
        if rng.random() < 0.8:
            layers.append(ReLU())
        width = h
    layers.append(Dense(rng.normal(0, 1.0, (width, c)), rng.normal(0, 0.5, c)))
    return Network(layers)


def gradcheck_suite(n_architectures=20, seed=0, epsilon=1e-4, batch_size=6):
    """Grad-check seeded random architectures under CE and CE+KL losses.

    Returns a list of ``(label, max_relative_error)`` pairs.
    """
    rng = np.random.default_rng(seed)
    results = []
    for a in range(n_architectures):
        net = random_network(rng)
        x = rng.normal(size=(batch_size, net.input_width))
        y = rng.integers(0, net.num_classes, batch_size)
        with_kl = a % 2 == 1
        target = rng.normal(size=(batch_size, net.num_classes)) if with_kl else None
        temperature = float(rng.choice([1.0, 2.0])) if with_kl else 1.0
        err = grad_check(net, x, y, epsilon, kl_target=target, temperature=temperature)
        label = f"arch {a:02d} {'ce+kl' if with_kl else 'ce':5s} " + ",".join(
            layer.kind for layer in net.layers)
        results.append((label, err))
    return results


def accuracy(net, x, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(net, x) == np.asarray(labels)))


def predict(net, x):
    return np.argmax(net.forward(x, "eval"), axis=1)

