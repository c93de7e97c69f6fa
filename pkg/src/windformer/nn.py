"""Layer building blocks: module tree, norms, and checkpoint archive I/O."""

from __future__ import annotations

import json
import logging
import zipfile

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


def trunc_normal(rng: np.random.Generator, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(T.DEFAULT_DTYPE)


class Module:
    """Minimal module tree: tracks parameters, buffers and train/eval mode.

    Parameters get hierarchical dotted names from attribute paths, which is
    what the checkpoint manifest and the ablation structural checks key on.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _set_buffer(self, name, value: np.ndarray):
        # buffers are rebound, never mutated, so snapshots stay valid
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                if b.dtype.kind == "f":
                    m._set_buffer(name, b.astype(dtype))
        return self

    def state_arrays(self):
        """Ordered (name, array, kind) triples for checkpointing."""
        out = [(n, p.data, "param") for n, p in self.named_parameters()]
        out += [(n, b, "buffer") for n, b in self.named_buffers()]
        return out

    def load_state_arrays(self, state: dict):
        for name, p in self.named_parameters():
            if name not in state:
                raise CheckpointError(f"missing parameter {name!r} in checkpoint")
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model {p.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)
        for m, prefix in _modules_with_prefix(self):
            for bname in list(m._buffers):
                full = prefix + bname
                if full not in state:
                    raise CheckpointError(f"missing buffer {full!r} in checkpoint")
                m._set_buffer(bname, state[full].copy())

    def snapshot(self) -> dict:
        return {name: arr.copy() for name, arr, _ in self.state_arrays()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _modules_with_prefix(root: Module):
    stack = [(root, "")]
    while stack:
        m, prefix = stack.pop()
        yield m, prefix
        for name, child in m._modules.items():
            stack.append((child, prefix + name + "."))


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._order))] = m
        self._order.append(m)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features, dtype=T.DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Same-padded stride-1 convolution (cross-correlation)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, bias=True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel_size}")
        self.weight = Parameter(
            trunc_normal(rng, (out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=T.DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(dim, dtype=T.DEFAULT_DTYPE))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Batch normalization over every axis except the channel axis.

    ``channel_axis=1`` covers both ``[B, C]`` and ``[B, C, H, W]`` inputs.
    Train mode normalizes with batch statistics (eps 1e-5) and updates the
    running buffers with momentum 0.1; eval mode uses the running buffers.
    Before any train step the running buffers are identity stats (mean 0,
    var 1), and eval use in that state is flagged in the log.
    """

    def __init__(self, num_channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(num_channels, dtype=T.DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(num_channels, dtype=T.DEFAULT_DTYPE))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(num_channels, dtype=T.DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(num_channels, dtype=T.DEFAULT_DTYPE))
        self.register_buffer("initialized", np.zeros(1, dtype=T.DEFAULT_DTYPE))
        self._warned_uninitialized = False

    def forward(self, x):
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(
                f"batchnorm: {self.gamma.shape[0]} channels expected, input {x.shape}"
            )
        axes = (0,) + tuple(range(2, x.ndim))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        gamma = T.reshape(self.gamma, shape)
        beta = T.reshape(self.beta, shape)
        if self.training:
            mu = T.tmean(x, axis=axes, keepdims=True)
            xc = T.sub(x, mu)
            var = T.tmean(T.mul(xc, xc), axis=axes, keepdims=True)
            out = T.add(T.mul(T.mul(xc, T.power(T.add(var, self.eps), -0.5)), gamma), beta)
            n = x.size // x.shape[1]
            with_correction = n / (n - 1) if n > 1 else 1.0
            m = self.momentum
            self._set_buffer(
                "running_mean",
                ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(
                    self.running_mean.dtype
                ),
            )
            self._set_buffer(
                "running_var",
                ((1 - m) * self.running_var
                 + m * with_correction * var.data.reshape(-1)).astype(self.running_var.dtype),
            )
            self._set_buffer("initialized", np.ones(1, dtype=self.initialized.dtype))
            return out
        if not self.initialized.any() and not self._warned_uninitialized:
            log.warning("batchnorm evaluated before any train step; using identity stats")
            object.__setattr__(self, "_warned_uninitialized", True)
        mean = self.running_mean.reshape(shape)
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape).astype(x.dtype)
        return T.add(T.mul(T.mul(T.sub(x, mean.astype(x.dtype)), inv), gamma), beta)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Functional batchnorm used by the tests; stats arrays are updated in place."""
    bn = BatchNorm(gamma.shape[0], momentum=momentum, eps=eps)
    bn.gamma, bn.beta = gamma, beta
    bn._set_buffer("running_mean", running_mean.copy())
    bn._set_buffer("running_var", running_var.copy())
    bn._set_buffer("initialized", np.ones(1, dtype=T.DEFAULT_DTYPE))
    bn.train(training)
    out = bn(x)
    running_mean[...] = bn.running_mean
    running_var[...] = bn.running_var
    return out


class Mlp(Module):
    """linear -> ReLU -> linear, the feed-forward half of an attention block."""

    def __init__(self, dim, hidden_dim, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, dim, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))


# ----------------------------------------------------------------------
# checkpoint archive: manifest + raw little-endian payloads
# ----------------------------------------------------------------------

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: Module, path):
    """Write a zip archive: ``manifest.json`` plus one raw payload per entry."""
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, arr, kind) in enumerate(model.state_arrays()):
            tag = _DTYPE_TAGS.get(arr.dtype.name)
            if tag is None:
                raise CheckpointError(f"{name!r}: unsupported dtype {arr.dtype}")
            fname = f"data/{i:05d}.bin"
            zf.writestr(fname, np.ascontiguousarray(arr, dtype=tag).tobytes())
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": tag,
                 "kind": kind, "file": fname}
            )
        zf.writestr("manifest.json", json.dumps({"format": 1, "entries": entries}, indent=1))


def read_manifest(path) -> list[dict]:
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as e:
            raise CheckpointError(f"{path}: no manifest.json") from e
    return manifest["entries"]


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    out = {}
    with zipfile.ZipFile(path) as zf:
        for entry in read_manifest(path):
            raw = zf.read(entry["file"])
            arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
            out[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out


def load_checkpoint(model: Module, path):
    model.load_state_arrays(read_checkpoint_arrays(path))
    return model
