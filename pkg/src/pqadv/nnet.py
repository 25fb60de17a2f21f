"""A small 1D convolutional classifier written directly in numpy.

Supports six layer kinds (conv1d, batchnorm, relu, maxpool1d, flatten, dense)
with exact backward passes for parameters and inputs, Adam training, and a
single-file model format (JSON manifest followed by a little-endian float32
weight blob).

Activations are kept channels-last, ``(batch, length, channels)``, internally.
Flatten emits channel-major order, i.e. the same order as flattening a
``(channels, length)`` array.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import IoFailure, ManifestMismatch, ShapeMismatch
from .rng import substream

KINDS = ("conv1d", "batchnorm", "relu", "maxpool1d", "flatten", "dense")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MAGIC = b"PQM1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: Optional[int] = None  # out_channels for conv1d, out_features for dense
    kernel: Optional[int] = None
    stride: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def conv(out_channels, kernel, stride=1):
    return LayerSpec("conv1d", out_channels, kernel, stride)


def pool(kernel, stride=None):
    return LayerSpec("maxpool1d", kernel=kernel, stride=stride or kernel)


def dense(out_features):
    return LayerSpec("dense", out_features)


BN, RELU, FLATTEN = LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("flatten")


def conv_block(out_channels, kernel, pool_size):
    return [conv(out_channels, kernel), BN, RELU, pool(pool_size)]


def default_specs(n_classes=17):
    """Conv(16,9,1)-BN-ReLU-MaxPool(4,4) -> Conv(32,7,1)-... -> Conv(64,5,1)-...
    -> Flatten -> Dense(128)-ReLU -> Dense(n_classes)."""
    return (conv_block(16, 9, 4) + conv_block(32, 7, 4) + conv_block(64, 5, 2)
            + [FLATTEN, dense(128), RELU, dense(n_classes)])


def _out_shape(spec, shape):
    """Shape after ``spec`` for a per-sample input shape (length, channels) or (features,)."""
    if spec.kind == "conv1d":
        if len(shape) != 2:
            raise ShapeMismatch(f"conv1d needs (length, channels) input, got {shape}")
        L = shape[0]
        pad = (spec.kernel - 1) // 2
        out_len = (L + 2 * pad - spec.kernel) // spec.stride + 1
        if out_len < 1:
            raise ShapeMismatch(f"conv1d kernel {spec.kernel} too long for length {L}")
        return (out_len, spec.size)
    if spec.kind == "maxpool1d":
        if len(shape) != 2 or shape[0] < spec.kernel:
            raise ShapeMismatch(f"maxpool1d({spec.kernel}) cannot pool shape {shape}")
        return ((shape[0] - spec.kernel) // spec.stride + 1, shape[1])
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ShapeMismatch(f"dense needs flat input, got {shape}")
        return (spec.size,)
    return shape


def _param_shapes(spec, shape):
    if spec.kind == "conv1d":
        return {"W": (spec.size, shape[1], spec.kernel), "b": (spec.size,)}
    if spec.kind == "dense":
        return {"W": (spec.size, shape[0]), "b": (spec.size,)}
    if spec.kind == "batchnorm":
        c = shape[-1]
        return {"gamma": (c,), "beta": (c,)}
    return {}


# --- layer kernels ---------------------------------------------------------
# Each forward returns (output, cache); each backward returns (dx, grads).

def _conv_forward(x, p, spec):
    B, L, C = x.shape
    k, s = spec.kernel, spec.stride
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, k - 1 - pad), (0, 0)))
    out_len = (L + 2 * pad - k) // s + 1
    win = sliding_window_view(xp, k, axis=1)[:, : s * (out_len - 1) + 1 : s]
    cols = win.reshape(B * out_len, C * k)
    W = p["W"].reshape(spec.size, C * k)
    out = (cols @ W.T + p["b"]).reshape(B, out_len, spec.size)
    return out, (cols, x.shape, out_len)


def _conv_backward(dout, cache, p, spec, need_params=True):
    cols, (B, L, C), out_len = cache
    k, s = spec.kernel, spec.stride
    pad = (k - 1) // 2
    d = dout.reshape(B * out_len, spec.size)
    W = p["W"].reshape(spec.size, C * k)
    grads = {}
    if need_params:
        grads = {"W": (d.T @ cols).reshape(p["W"].shape), "b": d.sum(axis=0)}
    dcols = (d @ W).reshape(B, out_len, C, k)
    dxp = np.zeros((B, L + k - 1, C), dtype=dout.dtype)
    stop = s * (out_len - 1) + 1
    for j in range(k):
        dxp[:, j : j + stop : s] += dcols[..., j]
    return dxp[:, pad : pad + L], grads


def _axes(x):
    return (0, 1) if x.ndim == 3 else (0,)


def _bn_forward(x, p, state, train, update):
    if train:
        axes = _axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        if update:
            n = x.size // x.shape[-1]
            unbiased = var * n / max(n - 1, 1)
            state["mean"] = ((1 - BN_MOMENTUM) * state["mean"] + BN_MOMENTUM * mean).astype(x.dtype)
            state["var"] = ((1 - BN_MOMENTUM) * state["var"] + BN_MOMENTUM * unbiased).astype(x.dtype)
    else:
        inv = 1.0 / np.sqrt(state["var"] + BN_EPS)
        xhat = (x - state["mean"]) * inv
    return p["gamma"] * xhat + p["beta"], (xhat, inv, train)


def _bn_backward(dout, cache, p, need_params=True):
    xhat, inv, train = cache
    axes = _axes(dout)
    grads = {}
    if need_params:
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    dxhat = dout * p["gamma"]
    if not train:
        return dxhat * inv, grads
    n = dout.size // dout.shape[-1]
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes)
                      - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, grads


def _pool_forward(x, spec):
    B, L, C = x.shape
    k, s = spec.kernel, spec.stride
    out_len = (L - k) // s + 1
    win = sliding_window_view(x, k, axis=1)[:, : s * (out_len - 1) + 1 : s]
    # argmax returns the earliest maximal index, which also receives the gradient
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, out_len)


def _pool_backward(dout, cache, spec):
    idx, (B, L, C), out_len = cache
    k, s = spec.kernel, spec.stride
    dx = np.zeros((B, L, C), dtype=dout.dtype)
    stop = s * (out_len - 1) + 1
    for j in range(k):
        dx[:, j : j + stop : s] += np.where(idx == j, dout, 0)
    return dx


class NetworkModel:
    """Layer specs, learnable parameters and batch-norm running statistics."""

    def __init__(self, specs=None, input_length=640, seed=0, dtype=np.float32):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s)
                      for s in (specs if specs is not None else default_specs())]
        self.input_length = int(input_length)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.training_config = {}
        self.shapes = []
        shape = (self.input_length, 1)
        for spec in self.specs:
            self.shapes.append(shape)
            shape = _out_shape(spec, shape)
        self.output_shape = shape
        if len(shape) != 1:
            raise ShapeMismatch(f"network must end in a flat output, got {shape}")
        self.n_classes = shape[0]
        self.params, self.state = [], []
        self._init_params(seed)

    def _init_params(self, seed):
        rng = substream(seed, "init")
        for spec, shape in zip(self.specs, self.shapes):
            p, st = {}, {}
            shapes = _param_shapes(spec, shape)
            if spec.kind in ("conv1d", "dense"):
                fan_in = int(np.prod(shapes["W"][1:]))
                wb = np.sqrt(6.0 / fan_in)
                bb = 1.0 / np.sqrt(fan_in)
                p["W"] = rng.uniform(-wb, wb, shapes["W"]).astype(self.dtype)
                p["b"] = rng.uniform(-bb, bb, shapes["b"]).astype(self.dtype)
            elif spec.kind == "batchnorm":
                c = shapes["gamma"][0]
                p["gamma"] = np.ones(c, self.dtype)
                p["beta"] = np.zeros(c, self.dtype)
                st["mean"] = np.zeros(c, self.dtype)
                st["var"] = np.ones(c, self.dtype)
            self.params.append(p)
            self.state.append(st)

    # -- structure ----------------------------------------------------------

    def param_items(self):
        """Yield ``(name, array)`` for every learnable tensor, in a fixed order."""
        for i, p in enumerate(self.params):
            for key in sorted(p):
                yield f"{i}.{key}", p[key]

    def state_items(self):
        for i, st in enumerate(self.state):
            for key in sorted(st):
                yield f"{i}.{key}", st[key]

    def copy(self):
        other = NetworkModel.__new__(NetworkModel)
        other.__dict__.update(self.__dict__)
        other.params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        other.state = [{k: v.copy() for k, v in st.items()} for st in self.state]
        other.training_config = dict(self.training_config)
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = [{k: v.astype(dtype) for k, v in p.items()} for p in other.params]
        other.state = [{k: v.astype(dtype) for k, v in st.items()} for st in other.state]
        return other

    def feature_layer_index(self):
        """Index of the output of the last hidden layer (the ReLU before the final dense)."""
        dense_idx = [i for i, s in enumerate(self.specs) if s.kind == "dense"]
        if len(dense_idx) < 2:
            raise ShapeMismatch("model has no hidden dense layer")
        last = dense_idx[-1]
        return last - 1

    # -- forward / backward -------------------------------------------------

    def _as_batch(self, X):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_length:
            raise ShapeMismatch(
                f"expected signals of length {self.input_length}, got array of shape {X.shape}")
        return X

    def _forward(self, X, train=False, update=False, stop=None):
        h = self._as_batch(X)[:, :, None]
        caches = []
        n = len(self.specs) if stop is None else stop + 1
        for spec, p, st in zip(self.specs[:n], self.params[:n], self.state[:n]):
            kind = spec.kind
            if kind == "conv1d":
                h, cache = _conv_forward(h, p, spec)
            elif kind == "batchnorm":
                h, cache = _bn_forward(h, p, st, train, update)
            elif kind == "relu":
                cache = h > 0
                h = h * cache
            elif kind == "maxpool1d":
                h, cache = _pool_forward(h, spec)
            elif kind == "flatten":
                cache = h.shape
                h = h.transpose(0, 2, 1).reshape(h.shape[0], -1)
            else:
                cache = h
                h = h @ p["W"].T + p["b"]
            caches.append(cache)
        return h, caches

    def _backward(self, dout, caches, need_params=True, rep=1):
        """Backpropagate ``dout`` through ``caches``.

        With ``rep > 1`` every cached sample serves ``rep`` consecutive rows of
        ``dout`` (used to push several output seeds through one forward pass);
        only input gradients are available in that case.
        """
        if rep > 1 and need_params:
            raise ValueError("parameter gradients need rep == 1")
        grads = [dict() for _ in self.specs]
        d = dout
        for i in range(len(caches) - 1, -1, -1):
            spec, p, cache = self.specs[i], self.params[i], caches[i]
            kind = spec.kind
            if kind == "conv1d":
                if rep > 1:
                    cols, (B, L, C), out_len = cache
                    cache = (None, (B * rep, L, C), out_len)
                d, grads[i] = _conv_backward(d, cache, p, spec, need_params)
            elif kind == "batchnorm":
                d, grads[i] = _bn_backward(d, cache, p, need_params)
            elif kind == "relu":
                d = d * (np.repeat(cache, rep, axis=0) if rep > 1 else cache)
            elif kind == "maxpool1d":
                if rep > 1:
                    idx, (B, L, C), out_len = cache
                    cache = (np.repeat(idx, rep, axis=0), (B * rep, L, C), out_len)
                d = _pool_backward(d, cache, spec)
            elif kind == "flatten":
                B, L, C = cache
                d = d.reshape(B * rep, C, L).transpose(0, 2, 1)
            else:
                if need_params:
                    grads[i] = {"W": d.T @ cache, "b": d.sum(axis=0)}
                d = d @ p["W"]
        return d[:, :, 0], grads

    def forward(self, X, train=False):
        """Logits of shape (n, n_classes). Eval mode uses running BN statistics."""
        return self._forward(X, train=train)[0]

    def logits(self, X, batch_size=512):
        X = self._as_batch(X)
        if len(X) <= batch_size:
            return self._forward(X)[0]
        return np.concatenate([self._forward(X[i:i + batch_size])[0]
                               for i in range(0, len(X), batch_size)])

    def predict(self, X, batch_size=512):
        """Class labels 1..K; ties go to the lowest class index."""
        return np.argmax(self.logits(X, batch_size), axis=1) + 1

    def features(self, X, batch_size=512):
        """Post-activation output of the last hidden layer."""
        X = self._as_batch(X)
        stop = self.feature_layer_index()
        return np.concatenate([self._forward(X[i:i + batch_size], stop=stop)[0]
                               for i in range(0, len(X), batch_size)])

    def loss_and_gradients(self, X, labels, train=True, update_stats=False):
        """Mean softmax cross-entropy and its gradients w.r.t. every parameter.

        Returns ``(loss, grads, logits)`` where grads mirrors ``self.params``.
        """
        logits, caches = self._forward(X, train=train, update=update_stats)
        loss, dlogits = cross_entropy(logits, labels)
        _, grads = self._backward(dlogits, caches)
        return loss, grads, logits

    def loss_input_gradient(self, X, labels):
        """Gradient of the per-signal cross-entropy w.r.t. each input (eval mode)."""
        logits, caches = self._forward(X)
        _, dlogits = cross_entropy(logits, labels)
        dx, _ = self._backward(dlogits * len(logits), caches, need_params=False)
        return dx

    def input_gradient(self, x, k):
        """Gradient of logit ``k`` (label 1..K) w.r.t. the input signal."""
        logits, caches = self._forward(x)
        seed = np.zeros_like(logits)
        seed[:, k - 1] = 1.0
        dx, _ = self._backward(seed, caches, need_params=False)
        return dx[0]

    def logit_jacobian(self, X):
        """Logits (n, K) and their input Jacobians (n, K, input_length)."""
        X = self._as_batch(X)
        n, K = len(X), self.n_classes
        logits, caches = self._forward(X)
        seed = np.tile(np.eye(K, dtype=self.dtype), (n, 1))
        dx, _ = self._backward(seed, caches, need_params=False, rep=K)
        return logits, dx.reshape(n, K, self.input_length)

    # -- summaries ------------------------------------------------------------

    def manifest(self):
        return {
            "format": "pqm-1",
            "input_length": self.input_length,
            "specs": [s.to_dict() for s in self.specs],
            "seed": self.seed,
            "training_config": self.training_config,
        }

    def digest(self):
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for _, arr in list(self.param_items()) + list(self.state_items()):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"{n} logits rows but labels of shape {labels.shape}")
    if labels.min() < 1 or labels.max() > K:
        raise ValueError(f"labels must lie in 1..{K}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels - 1]))
    d = softmax(logits)
    d[rows, labels - 1] -= 1.0
    return loss, d / n


# --- training ----------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 15

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Adam:
    def __init__(self, model, cfg):
        self.cfg = cfg
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]

    def step(self, model, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(model.params, grads, self.m, self.v):
            for k in p:
                m[k] = c.beta1 * m[k] + (1 - c.beta1) * g[k]
                v[k] = c.beta2 * v[k] + (1 - c.beta2) * g[k] * g[k]
                update = c.lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + c.eps)
                p[k] = (p[k] - update).astype(model.dtype)


def accuracy(model, X, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(X) == np.asarray(y)))


def train_step(model, opt, X, y):
    loss, grads, logits = model.loss_and_gradients(X, y, train=True, update_stats=True)
    opt.step(model, grads)
    return loss, logits


def train(model, X, y, adam=None, seed=0, X_test=None, y_test=None, log=None):
    """Train ``model`` in place with Adam on shuffled mini-batches.

    Returns the model and a per-epoch trace of dicts with keys ``epoch``,
    ``loss``, ``train_acc`` (running, train mode) and ``test_acc`` (eval mode,
    NaN without a test set).
    """
    adam = adam or AdamConfig()
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = Adam(model, adam)
    trace = []
    for epoch in range(1, adam.epochs + 1):
        order = substream(seed, "shuffle", epoch).permutation(len(X))
        total_loss, correct = 0.0, 0
        for start in range(0, len(X), adam.batch_size):
            idx = order[start:start + adam.batch_size]
            loss, logits = train_step(model, opt, X[idx], y[idx])
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) + 1 == y[idx]))
        entry = {
            "epoch": epoch,
            "loss": total_loss / len(X),
            "train_acc": correct / len(X),
            "test_acc": accuracy(model, X_test, y_test) if X_test is not None else float("nan"),
        }
        trace.append(entry)
        if log:
            log(entry)
    model.training_config = {**asdict(adam), "seed": seed, "n_train": int(len(X))}
    return model, trace


# --- persistence ---------------------------------------------------------------

def save_model(model, path):
    """Write ``model`` as MAGIC, u64 manifest length, JSON manifest, float32 blob.

    Parameters are stored as 32-bit floats; float32 models round-trip exactly.
    """
    tensors, blobs, offset = [], [], 0
    for group, items in (("param", model.param_items()), ("state", model.state_items())):
        for name, arr in items:
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "length": len(data)})
            blobs.append(data)
            offset += len(data)
    manifest = model.manifest()
    manifest["tensors"] = tensors
    manifest["blob_length"] = offset
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise IoFailure(f"cannot write model {path}: {exc}") from exc


def load_model(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read model {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ManifestMismatch(f"{path} is not a pqm model file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + hlen > len(raw):
        raise ManifestMismatch("manifest truncated")
    try:
        manifest = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise ManifestMismatch(f"corrupt manifest: {exc}") from exc
    blob = raw[12 + hlen:]
    if len(blob) != manifest.get("blob_length"):
        raise ManifestMismatch(
            f"weight blob has {len(blob)} bytes, manifest declares {manifest.get('blob_length')}")
    model = NetworkModel(manifest["specs"], manifest["input_length"], seed=manifest.get("seed", 0))
    model.training_config = manifest.get("training_config", {})
    expected = {("param", n): a.shape for n, a in model.param_items()}
    expected.update({("state", n): a.shape for n, a in model.state_items()})
    seen = set()
    for t in manifest["tensors"]:
        key = (t["group"], t["name"])
        shape = tuple(t["shape"])
        if expected.get(key) != shape or t["length"] != 4 * int(np.prod(shape)):
            raise ManifestMismatch(f"tensor {key} shape {shape} disagrees with specs")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)),
                            offset=t["offset"]).reshape(shape).astype(np.float32)
        layer, name = t["name"].split(".")
        target = model.params if t["group"] == "param" else model.state
        target[int(layer)][name] = arr
        seen.add(key)
    if seen != set(expected):
        raise ManifestMismatch(f"missing tensors: {sorted(set(expected) - seen)}")
    return model
