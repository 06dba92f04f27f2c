"""Trainable layer primitives and the module/parameter registry.

Modules register child modules, parameters, and buffers on attribute
assignment, so checkpoints and optimizers can walk the tree by name in a
deterministic order. Weight initialization draws from an explicit
``numpy.random.Generator`` passed to each constructor; constructing the
same model twice from the same seed yields identical parameters.
"""

import numpy as np

from . import autograd as ag
from .errors import CheckpointError, ShapeError


class Parameter(ag.Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal -------------------------------------------------------
    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def num_trainable(self):
        return int(sum(p.data.size for p in self.trainable_parameters()))

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, mode=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def to_dtype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for name, buf in mod._buffers.items():
                mod.register_buffer(name, buf.astype(dtype))
        return self

    # -- serialization -----------------------------------------------------
    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state["buffer:" + name] = b
        return state

    def load_state_dict(self, state):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(own_params) | {"buffer:" + n for n in own_buffers}
        given = set(state)
        if expected != given:
            missing = sorted(expected - given)[:5]
            extra = sorted(given - expected)[:5]
            raise CheckpointError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own_params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for name in own_buffers:
            arr = np.asarray(state["buffer:" + name])
            # walk to the owning module so the attribute alias stays in sync
            mod = self
            parts = name.split(".")
            for part in parts[:-1]:
                mod = mod._modules[part]
            mod.register_buffer(parts[-1], arr.astype(own_buffers[name].dtype, copy=True))


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for mod in mods:
            self.append(mod)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def he_normal(rng, shape, fan_in, dtype=np.float32):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding="same", bias=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        kh, kw = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = (kh // 2, kw // 2) if padding == "same" else _pair(padding)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size, rng, stride=1, padding="same", bias=False):
        super().__init__()
        self.channels = channels
        kh, kw = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = (kh // 2, kw // 2) if padding == "same" else _pair(padding)
        self.weight = Parameter(he_normal(rng, (channels, kh, kw), kh * kw))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ag.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return ag.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
