"""Neural-network operations and a small layer/module system.

Functional ops take and return :class:`~sliceset.tensor.Tensor` and register
their own backward rules.  Layers own parameters (and, for batch norm,
running-statistic buffers) and expose them through hierarchical dotted names
such as ``conv1.weight`` or ``layer2.0.bn1.running_mean``; those names are
the unit of checkpointing and cross-model weight transfer.

Convolution is explicit cross-correlation, evaluated through an
im2col/matmul rearrangement that stays within 1e-5 of a direct six-loop
reference.  Reductions inside the norm layers and losses accumulate in
64-bit and store results in 32-bit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, no_grad

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward_fn(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    return x._make(data, (x,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; rows sum to 1 and all entries lie in (0, 1)."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    s = (e / denom).astype(x.dtype)

    def backward_fn(out):
        if x.requires_grad:
            inner = (out.grad * s).sum(axis=axis, keepdims=True, dtype=np.float64)
            x.accumulate_grad(s * (out.grad - inner.astype(x.dtype)))

    return x._make(s, (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, din)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input has {x.shape[1]} features, weight expects {weight.shape[1]}"
        )
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match output dim {weight.shape[0]}")
        data = data + bias.data

    def backward_fn(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(out.grad.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(out.grad.sum(axis=0, dtype=np.float64).astype(bias.dtype))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(data, parents, backward_fn)


def pad2d(x: Tensor, pad: int | tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the two trailing spatial axes of an (N, C, H, W) tensor.

    ``pad`` is either a single symmetric amount or (top, bottom, left, right).
    """
    if isinstance(pad, int):
        top = bottom = left = right = pad
    else:
        top, bottom, left, right = pad
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad amounts must be non-negative")
    if top == bottom == left == right == 0:
        return x
    data = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    H, W = x.shape[2], x.shape[3]

    def backward_fn(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad[:, :, top:top + H, left:left + W])

    return x._make(data, (x,), backward_fn)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, n, c, hp, wp, kh, kw, stride, oh, ow) -> np.ndarray:
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d6[:, :, i, j]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with an (F, C, kh, kw) kernel.

    Output spatial extent is ``floor((H + 2*padding - kh)/stride) + 1`` (same
    for W).  Internally an im2col/matmul rearrangement of the direct loop.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ck}")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (N, C*kh*kw, oh*ow)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols)                          # (N, F, oh*ow)
    if bias is not None:
        if bias.shape != (f,):
            raise ValueError(f"conv2d bias shape {bias.shape} does not match {f} filters")
        out = out + bias.data[:, None]
    out = out.reshape(n, f, oh, ow)

    def backward_fn(o):
        dout = o.grad.reshape(n, f, oh * ow)
        if kernel.requires_grad:
            dw = np.tensordot(dout, cols, axes=((0, 2), (0, 2)))
            kernel.accumulate_grad(dw.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(dout.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, dout)
            dxp = _col2im(dcols, n, c, hp, wp, kh, kw, stride, oh, ow)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate_grad(dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return x._make(out, parents, backward_fn)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max over kernel x kernel windows; zero padding (intended for post-relu maps).

    Ties within a window route the gradient to the first maximal element in
    row-major window order.
    """
    if stride is None:
        stride = kernel
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise ValueError(f"max_pool2d window {kernel} exceeds padded input {hp}x{wp}")
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, oh, ow, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(o):
        dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        for m in range(kernel * kernel):
            i, j = divmod(m, kernel)
            sel = idx == m
            if sel.any():
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += o.grad * sel
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        x.accumulate_grad(dxp)

    def backward_guard(o):
        if x.requires_grad:
            backward_fn(o)

    return x._make(np.ascontiguousarray(out), (x,), backward_guard)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Spatial mean of an (N, C, H, W) tensor, giving (N, C)."""
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward_fn(out):
        if x.requires_grad:
            g = out.grad[:, :, None, None] / (h * w)
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype))

    return x._make(data, (x,), backward_fn)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization with running statistics.

    In training mode normalizes by batch moments and updates the running
    buffers in place (running variance uses the unbiased estimate); in eval
    mode normalizes by the running buffers.
    """
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        count = n * h * w
        with np.errstate(invalid="ignore"):
            unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(o):
        dy = o.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((dy * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype))
        if beta.requires_grad:
            beta.accumulate_grad(dy.sum(axis=axes, dtype=np.float64).astype(beta.dtype))
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                m = dy.mean(axis=axes, dtype=np.float64).astype(x.dtype)[None, :, None, None]
                mx = (dy * xhat).mean(axis=axes, dtype=np.float64).astype(x.dtype)[None, :, None, None]
                x.accumulate_grad(scale * (dy - m - xhat * mx))
            else:
                x.accumulate_grad(scale * dy)

    return x._make(out.astype(x.dtype), (x, gamma, beta), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis to zero mean/unit variance, then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if gain.shape != (d,) or offset.shape != (d,):
        raise ValueError(f"layer_norm gain/offset must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mean).astype(x.dtype)) * inv_std
    out = gain.data * xhat + offset.data

    def backward_fn(o):
        dy = o.grad
        reduce_axes = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            gain.accumulate_grad((dy * xhat).sum(axis=reduce_axes, dtype=np.float64).astype(gain.dtype))
        if offset.requires_grad:
            offset.accumulate_grad(dy.sum(axis=reduce_axes, dtype=np.float64).astype(offset.dtype))
        if x.requires_grad:
            h = dy * gain.data
            m = h.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
            mx = (h * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
            x.accumulate_grad((h - m - xhat * mx) * inv_std)

    return x._make(out, (x, gain, offset), backward_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true-class logit.

    ``logits`` is (N, K); ``labels`` an integer sequence of length N with
    values in [0, K).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy requires at least one sample")
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy labels must be integers")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy label outside [0, {k}): {labels.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    logp = shifted - np.log(denom).astype(logits.dtype)
    loss = np.asarray(-logp[np.arange(n), labels].mean(dtype=np.float64), dtype=logits.dtype)

    def backward_fn(out):
        if logits.requires_grad:
            p = (e / denom).astype(logits.dtype)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(p * (out.grad / n))

    return logits._make(loss, (logits,), backward_fn)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# module system
# ---------------------------------------------------------------------------

class Module:
    """Base class for anything with parameters.

    Assigning a ``Tensor`` attribute registers it as a parameter, a
    ``Module`` as a child; numpy buffers (running statistics) go through
    :meth:`register_buffer`.  Registration order is deterministic and defines
    the parameter naming and initialization order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for group in ("_params", "_buffers", "_children"):
            d = object.__getattribute__(self, group)
            if name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children.items():
            child_prefix = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(child_prefix)

    def named_parameters(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def named_buffers(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def named_state(self, prefix: str = ""):
        """Parameters then buffers, as (name, numpy array, is_param) triples."""
        for name, p in self.named_parameters(prefix):
            yield name, p.data, True
        for name, b in self.named_buffers(prefix):
            yield name, b, False

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    """Sequence of child modules addressed by integer index (``layer.0`` etc.)."""

    def __init__(self, modules=()):
        super().__init__()
        self._order = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._order))] = module
        self._order.append(module)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_features


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True
        )
        if bias:
            self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    @property
    def fan_in(self) -> int:
        _, c, kh, kw = self.weight.shape
        return c * kh * kw


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    When ``freeze_stats`` is set (e.g. after importing pretrained weights)
    the stored statistics are used even in training mode and never updated;
    the affine scale/shift stays trainable either way.
    """

    def __init__(self, num_features: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.freeze_stats = False
        self.weight = Tensor(np.ones(num_features), requires_grad=True)
        self.bias = Tensor(np.zeros(num_features), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm2d(
            x, self.weight, self.bias,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training and not self.freeze_stats,
            momentum=self.momentum, eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, eps=self.eps)


def load_state(module: Module, state: dict[str, np.ndarray]):
    """Copy arrays from ``state`` into matching parameters/buffers by name."""
    for name, array, is_param in module.named_state():
        if name not in state:
            continue
        src = np.asarray(state[name])
        if src.shape != array.shape:
            raise ValueError(f"state entry {name!r} has shape {src.shape}, expected {array.shape}")
        array[...] = src
