"""Small reverse-mode autodiff over numpy, with masked sparse layers.

Only the operations needed by the SHARP architectures are provided: masked
linear and masked 2-D convolution (mask granularity is one whole kernel per
(out, in) filter pair), ReLU, max-pooling, reshape/concat and two fused losses
defined in :mod:`sharpcl.objective`.

Operations are recorded on the active :class:`GradientTape` when at least one
input requires a gradient. Because records are appended in execution order,
walking them backwards is a valid reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ConfigurationError(ValueError):
    """Raised for shape or hyperparameter inconsistencies."""


class TapeUsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Records primitive ops executed inside a ``with`` block.

    >>> with GradientTape() as tape:
    ...     y = tsum(x)
    >>> (gx,) = tape.gradient(y, [x])

    A tape can be consumed once; call :meth:`gradient` a second time and a
    :class:`TapeUsageError` is raised.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if self._consumed:
            raise TapeUsageError("tape already consumed by a previous gradient() call")
        if not self.records or not any(r.output is loss for r in self.records):
            raise TapeUsageError("loss was not produced by an operation recorded on this tape")
        if loss.data.size != 1:
            raise TapeUsageError("gradient() needs a scalar loss")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(DTYPE, copy=False))
        self.records.clear()
        return out


def backward(tape: GradientTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias of :meth:`GradientTape.gradient`."""
    return tape.gradient(loss, params)


def record_op(output: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE_STACK[-1].records.append(_Record(output, inputs, vjp))
    return output


# ---------------------------------------------------------------------------
# primitive ops


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, DTYPE(0)))
    return record_op(out, (x,), lambda g: (g * pos,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    out = Tensor(x.data.reshape(shape))
    return record_op(out, (x,), lambda g: (g.reshape(orig),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    splits = np.cumsum(sizes)[:-1]
    return record_op(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(dtype=np.float64))
    return record_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(DTYPE),))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if x.shape != y.shape:
        raise ConfigurationError(f"mul shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data * y.data)
    return record_op(out, (x, y), lambda g: (g * y.data, g * x.data))


def masked_linear(x: Tensor, weight: Tensor, bias: Tensor, mask: np.ndarray) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"linear expects (N, {weight.shape[1]}), got {x.shape}")
    w_eff = weight.data * mask
    out = Tensor(x.data @ w_eff.T + bias.data)

    def vjp(g):
        gx = g @ w_eff if x.requires_grad else None
        gw = (g.T @ x.data) * mask
        return gx, gw, g.sum(axis=0)

    return record_op(out, (x, weight, bias), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patches as [N, C*kh*kw, Ho*Wo] so the GEMM output is already NCHW."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def masked_conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, mask: np.ndarray, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D convolution whose (out, in) kernel slices are gated by ``mask``.

    Computed with im2col + batched GEMM. Masked kernels are zeros in the
    effective weight, so their gradient is exactly zero.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ConfigurationError(f"conv expects {ci} input channels, got {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError("conv kernel larger than padded input")
    kmask = mask[:, :, None, None]
    w_eff = (kernel.data * kmask).reshape(o, -1)
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    y = np.matmul(w_eff, cols) + bias.data[:, None]
    out = Tensor(y.reshape(n, o, ho, wo))

    def vjp(g):
        gf = np.ascontiguousarray(g).reshape(n, o, ho * wo)
        gk = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) * kmask
        gb = gf.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w_eff.T, gf).reshape(n, c, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gk, gb

    return record_op(out, (x, kernel, bias), vjp)


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or size
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ConfigurationError(f"pool window {size} larger than input {h}x{w}")
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    tiled = stride == size
    if tiled:
        # non-overlapping windows: a reshape is enough
        flat = (x.data[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size))
    else:
        win = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def vjp(g):
        if tiled:
            gw = np.zeros((n, c, ho, wo, size * size), dtype=DTYPE)
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gx = np.zeros_like(x.data)
            gx[:, :, : ho * size, : wo * size] = (gw.reshape(n, c, ho, wo, size, size)
                                                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size))
            return (gx,)
        gx = np.zeros_like(x.data)
        for k in range(size * size):
            i, j = divmod(k, size)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == k)
        return (gx,)

    return record_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# layers


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass
class MaskedLinear:
    """Fully connected layer with a per-weight connection mask.

    ``in_unit_of[j]`` names the upstream unit that feature ``j`` belongs to;
    after a conv block the 49 features of one 7x7 map share a unit.
    """

    weight: Tensor
    bias: Tensor
    conn_mask: np.ndarray
    freeze_mask: np.ndarray
    bias_freeze: np.ndarray
    in_unit_of: np.ndarray
    relu: bool = True
    pool: int | None = None
    prunable: bool = True
    kind: str = field(default="linear", init=False)

    @classmethod
    def create(cls, n_in, n_out, rng, in_unit_of=None, relu=True):
        return cls(
            weight=Tensor(_uniform_init(rng, (n_out, n_in), n_in), name="weight"),
            bias=Tensor(_uniform_init(rng, (n_out,), n_in), name="bias"),
            conn_mask=np.ones((n_out, n_in), dtype=bool),
            freeze_mask=np.zeros((n_out, n_in), dtype=bool),
            bias_freeze=np.zeros(n_out, dtype=bool),
            in_unit_of=np.arange(n_in) if in_unit_of is None else np.asarray(in_unit_of),
            relu=relu,
        )

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in_units(self) -> int:
        return int(self.in_unit_of.max()) + 1

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    def linear(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            x = reshape(x, (x.shape[0], -1))
        return masked_linear(x, self.weight, self.bias, self.conn_mask)

    def unit_adjacency(self) -> np.ndarray:
        """Boolean [out_units x in_units]: any live weight between the two units."""
        adj = np.zeros((self.n_out, self.n_in_units), dtype=bool)
        np.logical_or.at(adj.T, self.in_unit_of, self.conn_mask.T)
        return adj

    def expand_freeze(self) -> np.ndarray:
        return self.freeze_mask

    def expand_mask(self, m: np.ndarray) -> np.ndarray:
        return m

    def reinit_rows(self, rows: np.ndarray, rng: np.random.Generator) -> None:
        k = int(rows.sum())
        if k == 0:
            return
        self.weight.data[rows] = _uniform_init(rng, (k, self.fan_in), self.fan_in)
        self.bias.data[rows] = _uniform_init(rng, (k,), self.fan_in)


@dataclass
class MaskedConv2d:
    """Convolution with one mask bit per (out filter, in filter) kernel."""

    weight: Tensor
    bias: Tensor
    conn_mask: np.ndarray
    freeze_mask: np.ndarray
    bias_freeze: np.ndarray
    stride: int = 1
    padding: int = 0
    relu: bool = True
    pool: int | None = None
    prunable: bool = True
    kind: str = field(default="conv", init=False)

    @classmethod
    def create(cls, c_in, c_out, kernel_size, rng, stride=1, padding=0, relu=True, pool=None):
        fan_in = c_in * kernel_size * kernel_size
        shape = (c_out, c_in, kernel_size, kernel_size)
        return cls(
            weight=Tensor(_uniform_init(rng, shape, fan_in), name="kernel"),
            bias=Tensor(_uniform_init(rng, (c_out,), fan_in), name="bias"),
            conn_mask=np.ones((c_out, c_in), dtype=bool),
            freeze_mask=np.zeros((c_out, c_in), dtype=bool),
            bias_freeze=np.zeros(c_out, dtype=bool),
            stride=stride,
            padding=padding,
            relu=relu,
            pool=pool,
        )

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_in_units(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))

    @property
    def in_unit_of(self) -> np.ndarray:
        return np.arange(self.n_in_units)

    def linear(self, x: Tensor) -> Tensor:
        return masked_conv2d(x, self.weight, self.bias, self.conn_mask, self.stride, self.padding)

    def unit_adjacency(self) -> np.ndarray:
        return self.conn_mask.copy()

    def expand_freeze(self) -> np.ndarray:
        return self.expand_mask(self.freeze_mask)

    def expand_mask(self, m: np.ndarray) -> np.ndarray:
        return np.broadcast_to(m[:, :, None, None], self.weight.shape)

    def reinit_rows(self, rows: np.ndarray, rng: np.random.Generator) -> None:
        k = int(rows.sum())
        if k == 0:
            return
        self.weight.data[rows] = _uniform_init(rng, (k,) + self.weight.shape[1:], self.fan_in)
        self.bias.data[rows] = _uniform_init(rng, (k,), self.fan_in)


Layer = MaskedLinear | MaskedConv2d


@dataclass
class LayerOutput:
    activation: Tensor  # post-ReLU, before pooling: what unit statistics see
    output: Tensor  # what the next layer consumes


def layer_forward(layer: Layer, x: Tensor) -> LayerOutput:
    y = layer.linear(x)
    if layer.relu:
        y = relu(y)
    out = maxpool2d(y, layer.pool) if layer.pool else y
    return LayerOutput(y, out)


@dataclass
class Network:
    """Sequential stack of masked layers split into G = layers[:split] and F."""

    layers: list[Layer]
    split: int
    input_shape: tuple[int, ...]

    def forward(self, x: Tensor, start: int = 0, stop: int | None = None):
        """Run layers ``start:stop``; returns (per-layer activations, output)."""
        stop = len(self.layers) if stop is None else stop
        if start == 0 and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ConfigurationError(f"input shape {x.shape[1:]} != {self.input_shape}")
        acts = []
        for layer in self.layers[start:stop]:
            lo = layer_forward(layer, x)
            acts.append(lo.activation)
            x = lo.output
        return acts, x

    def g(self, x: Tensor) -> Tensor:
        return self.forward(x, 0, self.split)[1]

    def f(self, h: Tensor) -> Tensor:
        return self.forward(h, self.split)[1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def freeze_masks(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.expand_freeze())
            out.append(layer.bias_freeze)
        return out

    def requires_grad_(self, flag: bool = True) -> "Network":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    @property
    def unit_counts(self) -> list[int]:
        """Units per unit-layer; index 0 is the input layer."""
        return [self.layers[0].n_in_units] + [layer.n_out for layer in self.layers]


def predict_batches(fn: Callable[[Tensor], Tensor], x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Apply ``fn`` to ``x`` in chunks, outside any tape."""
    outs = [fn(Tensor(x[i : i + batch])).data for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,), dtype=DTYPE)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """SGD with momentum or Adadelta; never touches frozen entries.

    Frozen entries are restored with ``np.where`` so they stay bit-identical
    regardless of the gradient they received.
    """

    def __init__(self, params: Sequence[Tensor], kind: str = "adadelta", lr: float = 1.0,
                 momentum: float = 0.9, rho: float = 0.9, eps: float = 1e-6):
        if kind not in ("adadelta", "sgd_momentum", "sgd"):
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = "sgd_momentum" if kind == "sgd" else kind
        self.lr, self.momentum, self.rho, self.eps = lr, momentum, rho, eps
        zeros = lambda: [np.zeros_like(p.data) for p in self.params]
        if self.kind == "adadelta":
            self.square_avg, self.acc_delta = zeros(), zeros()
        else:
            self.velocity = zeros()

    def state_arrays(self) -> list[list[np.ndarray]]:
        if self.kind == "adadelta":
            return [self.square_avg, self.acc_delta]
        return [self.velocity]

    def step(self, grads: Sequence[np.ndarray], freeze_masks: Sequence[np.ndarray] | None = None):
        if len(grads) != len(self.params):
            raise ConfigurationError("one gradient per parameter required")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ConfigurationError(f"grad shape {g.shape} != param shape {p.shape}")
            frozen = None if freeze_masks is None else freeze_masks[i]
            if frozen is not None and frozen.all():
                continue
            if self.kind == "adadelta":
                sq = self.rho * self.square_avg[i] + (1 - self.rho) * g * g
                delta = np.sqrt(self.acc_delta[i] + self.eps) / np.sqrt(sq + self.eps) * g
                acc = self.rho * self.acc_delta[i] + (1 - self.rho) * delta * delta
                new = p.data - self.lr * delta
                if frozen is not None and frozen.any():
                    sq = np.where(frozen, self.square_avg[i], sq)
                    acc = np.where(frozen, self.acc_delta[i], acc)
                self.square_avg[i], self.acc_delta[i] = sq.astype(DTYPE), acc.astype(DTYPE)
            else:
                v = self.momentum * self.velocity[i] + g
                new = p.data - self.lr * v
                if frozen is not None and frozen.any():
                    v = np.where(frozen, self.velocity[i], v)
                self.velocity[i] = v.astype(DTYPE)
            if frozen is not None and frozen.any():
                new = np.where(frozen, p.data, new)
            p.data[...] = new

    def reset_entries(self, param: Tensor, where: np.ndarray) -> None:
        """Zero optimizer state for entries of ``param`` selected by ``where``."""
        for i, p in enumerate(self.params):
            if p is param:
                for state in self.state_arrays():
                    state[i][where] = 0
