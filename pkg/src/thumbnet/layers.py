"""Neural-network layers with hand-written backward passes.

Convolution is cross-correlation (no kernel flip) over NCHW tensors with
symmetric zero padding. Transposed convolution stores its kernel as
``in_channels x out_channels x k x k`` and is exactly the input-gradient
operator of a convolution with that kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryError, ShapeError, UsageError
from .tensor import Function, Tensor, default_dtype

KINDS = (
    "conv",
    "deconv",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "globalavgpool",
    "flatten",
    "fullyconnected",
    "softmax",
    "residual",
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# -- geometry --------------------------------------------------------------
def conv_out(m, kernel, stride, padding):
    return (m + 2 * padding - kernel) // stride + 1


def deconv_out(m, kernel, stride, padding):
    return (m - 1) * stride - 2 * padding + kernel


def _windows(x, k, stride, pad):
    """View of shape N,C,Ho,Wo,k,k over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, k, stride, pad):
    """Channel-major patch matrix of shape C,k,k,N,Ho,Wo."""
    n, c, h, w = x.shape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def col2im(cols, stride, pad, out_hw):
    """Scatter-add a C,k,k,N,Ho,Wo patch matrix back into an N,C,H,W image."""
    c, k, _, n, ho, wo = cols.shape
    h, w = out_hw
    img = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            img[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    if pad:
        img = img[:, :, pad : pad + h, pad : pad + w]
    return img.transpose(1, 0, 2, 3)


# -- differentiable kernels ----------------------------------------------
class Conv2d(Function):
    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected NCHW input and OIkk weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        k = w.shape[2]
        ho, wo = conv_out(x.shape[2], k, stride, padding), conv_out(x.shape[3], k, stride, padding)
        if ho < 1 or wo < 1:
            raise GeometryError(f"conv2d: input {x.shape[2:]} too small for kernel {k} with padding {padding}")
        self.in_shape, self.stride, self.padding = x.shape, stride, padding
        self.cols = im2col(x, k, stride, padding)
        self.w = w
        out = w.reshape(w.shape[0], -1) @ self.cols.reshape(-1, x.shape[0] * ho * wo)
        return out.reshape(w.shape[0], x.shape[0], ho, wo).transpose(1, 0, 2, 3)

    def backward(self, g):
        o = g.shape[1]
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        rows = self.cols.shape[0] * self.cols.shape[1] * self.cols.shape[2]
        dw = (gt @ self.cols.reshape(rows, -1).T).reshape(self.w.shape)
        dcols = (self.w.reshape(o, -1).T @ gt).reshape(self.cols.shape)
        dx = col2im(dcols, self.stride, self.padding, self.in_shape[2:])
        return dx, dw


class ConvTranspose2d(Function):
    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"deconv2d: expected NCHW input and IOkk weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"deconv2d: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
        n, cin, h0, w0 = x.shape
        cout, k = w.shape[1], w.shape[2]
        h, wd = deconv_out(h0, k, stride, padding), deconv_out(w0, k, stride, padding)
        if h < 1 or wd < 1:
            raise GeometryError(f"deconv2d: output extent {h}x{wd} < 1")
        self.xt = x.transpose(1, 0, 2, 3).reshape(cin, -1)
        self.w, self.stride, self.padding, self.in_shape = w, stride, padding, x.shape
        cols = (w.reshape(cin, -1).T @ self.xt).reshape(cout, k, k, n, h0, w0)
        return col2im(cols, stride, padding, (h, wd))

    def backward(self, g):
        cin, k = self.w.shape[0], self.w.shape[2]
        cols = im2col(g, k, self.stride, self.padding).reshape(self.w[0].size, -1)
        n, _, h0, w0 = self.in_shape
        dx = (self.w.reshape(cin, -1) @ cols).reshape(cin, n, h0, w0).transpose(1, 0, 2, 3)
        dw = (self.xt @ cols.T).reshape(self.w.shape)
        return dx, dw


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, mean, var, eps):
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.x, self.mean, self.gamma = x, mean.astype(x.dtype), gamma
        scale = gamma * self.inv_std
        shift = beta - self.mean * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(self, g):
        axes = (0, 2, 3)
        m = g.size // g.shape[1]
        xhat = (self.x - self.mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        coef = (self.gamma * self.inv_std / m)[None, :, None, None]
        dx = coef * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, mean, var, eps):
        self.inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
        self.xhat = (x - mean[None, :, None, None]) * self.inv_std
        self.gamma = gamma[None, :, None, None]
        return self.xhat * self.gamma + beta[None, :, None, None]

    def backward(self, g):
        return g * self.gamma * self.inv_std, (g * self.xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


class MaxPool2d(Function):
    """Ties go to the first (row-major lowest) position in each window."""

    def forward(self, x, kernel, stride, padding=0):
        n, c, h, w = x.shape
        ho, wo = conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding)
        if ho < 1 or wo < 1:
            raise GeometryError(f"maxpool: input {h}x{w} smaller than kernel {kernel}")
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        win = _windows(x, kernel, stride, 0).reshape(n, c, ho, wo, kernel * kernel)
        self.arg = np.argmax(win, axis=-1)
        self.padded_shape, self.padding = x.shape, padding
        self.kernel, self.stride = kernel, stride
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        k, s, p = self.kernel, self.stride, self.padding
        dx = np.zeros(self.padded_shape, dtype=g.dtype)
        ho, wo = g.shape[2:]
        for pos in range(k * k):
            i, j = divmod(pos, k)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += g * (self.arg == pos)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return (dx,)


class AvgPool2d(Function):
    def forward(self, x, kernel, stride):
        h, w = x.shape[2:]
        if conv_out(h, kernel, stride, 0) < 1 or conv_out(w, kernel, stride, 0) < 1:
            raise GeometryError(f"avgpool: input {h}x{w} smaller than kernel {kernel}")
        self.in_shape, self.kernel, self.stride = x.shape, kernel, stride
        return _windows(x, kernel, stride, 0).mean(axis=(4, 5))

    def backward(self, g):
        k, s = self.kernel, self.stride
        dx = np.zeros(self.in_shape, dtype=g.dtype)
        ho, wo = g.shape[2:]
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
        return (dx,)


class Softmax(Function):
    def forward(self, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.out = shifted - lse
        return self.out

    def backward(self, g):
        return (g - np.exp(self.out) * g.sum(axis=-1, keepdims=True),)


# -- functional API ----------------------------------------------------------
def conv2d(x, w, b=None, stride=1, padding=0):
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    return out if b is None else out + b.reshape(1, -1, 1, 1)


def deconv2d(x, w, b=None, stride=1, padding=0):
    out = ConvTranspose2d.apply(x, w, stride=stride, padding=padding)
    return out if b is None else out + b.reshape(1, -1, 1, 1)


def relu(x):
    return ReLU.apply(x)


def maxpool2d(x, kernel=2, stride=2, padding=0):
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


def avgpool2d(x, kernel=2, stride=2):
    return AvgPool2d.apply(x, kernel=kernel, stride=stride)


def global_avgpool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x, w, b=None):
    out = x @ w.transpose(1, 0)
    return out if b is None else out + b


def softmax(x):
    return Softmax.apply(x)


def log_softmax(x):
    return LogSoftmax.apply(x)


def batchnorm(x, params, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization; train mode also updates the running statistics."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm: expected NCHW input, got {x.shape}")
    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise UsageError("batchnorm: train mode needs at least 2 values per channel")
        data = x.data
        with np.errstate(all="ignore"):
            mean = data.mean(axis=(0, 2, 3))
            var = data.var(axis=(0, 2, 3))
        out = BatchNormTrain.apply(x, params.gamma, params.beta, mean=mean, var=var, eps=eps)
        # running statistics only move once the batch passed the non-finite scan
        params.running_mean *= momentum
        params.running_mean += (1 - momentum) * mean
        params.running_var *= momentum
        params.running_var += (1 - momentum) * var
        return out
    if mode != "eval":
        raise UsageError(f"batchnorm: unknown mode {mode!r}")
    mean = params.running_mean.astype(x.dtype, copy=False)
    var = params.running_var.astype(x.dtype, copy=False)
    return BatchNormEval.apply(x, params.gamma, params.beta, mean=mean, var=var, eps=eps)


# -- layer specifications ----------------------------------------------------
@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network graph.

    ``residual`` layers hold a ``body`` and an optional ``shortcut`` (identity
    when empty); their output is the sum of both branches.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    body: tuple = ()
    shortcut: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise UsageError(f"{self.kind}: kernel/stride must be >= 1 and padding >= 0")
        if self.kind in ("conv", "deconv", "fullyconnected", "batchnorm"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise UsageError(f"{self.kind}: channel counts must be >= 1")
        if self.kind == "batchnorm" and self.in_channels != self.out_channels:
            raise UsageError("batchnorm: in_channels must equal out_channels")

    def with_in_channels(self, n):
        return replace(self, in_channels=n)


def conv(cin, cout, kernel=3, stride=1, padding=None, bias=False):
    pad = kernel // 2 if padding is None else padding
    return LayerSpec("conv", cin, cout, kernel, stride, pad, bias)


def deconv(cin, cout, kernel=4, stride=2, padding=1, bias=False):
    return LayerSpec("deconv", cin, cout, kernel, stride, padding, bias)


def bn(c):
    return LayerSpec("batchnorm", c, c)


def fc(fin, fout, bias=True):
    return LayerSpec("fullyconnected", fin, fout, has_bias=bias)


def simple(kind, kernel=1, stride=1):
    return LayerSpec(kind, kernel=kernel, stride=stride)


def output_shape(spec: LayerSpec, shape):
    """Shape inference for a single (unbatched) sample shape."""
    k, s, p = spec.kernel, spec.stride, spec.padding
    kind = spec.kind
    if kind in ("conv", "deconv", "batchnorm", "maxpool", "avgpool", "globalavgpool"):
        if len(shape) != 3:
            raise ShapeError(f"{kind}: expects a CxHxW feature map, got {shape}")
        c, h, w = shape
        if kind in ("conv", "deconv", "batchnorm") and c != spec.in_channels:
            raise ShapeError(f"{kind}: input has {c} channels, layer expects {spec.in_channels}")
        if kind == "conv":
            out = (spec.out_channels, conv_out(h, k, s, p), conv_out(w, k, s, p))
        elif kind == "deconv":
            out = (spec.out_channels, deconv_out(h, k, s, p), deconv_out(w, k, s, p))
        elif kind == "maxpool":
            out = (c, conv_out(h, k, s, p), conv_out(w, k, s, p))
        elif kind == "avgpool":
            out = (c, conv_out(h, k, s, 0), conv_out(w, k, s, 0))
        elif kind == "globalavgpool":
            out = (c, 1, 1)
        else:
            out = shape
        if min(out[1:]) < 1:
            raise GeometryError(f"{kind}: input {h}x{w} yields empty output {out}")
        return tuple(out)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "fullyconnected":
        if len(shape) != 1 or shape[0] != spec.in_channels:
            raise ShapeError(f"fullyconnected: input {shape} does not match in_features {spec.in_channels}")
        return (spec.out_channels,)
    if kind == "residual":
        main = shape
        for sub in spec.body:
            main = output_shape(sub, main)
        side = shape
        for sub in spec.shortcut:
            side = output_shape(sub, side)
        if main != side:
            raise ShapeError(f"residual: body output {main} differs from shortcut output {side}")
        return main
    return tuple(shape)  # relu, softmax


@dataclass
class LayerParams:
    weight: Tensor | None = None
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def tensors(self):
        """Learnable tensors keyed by slot name."""
        slots = {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}
        return {k: v for k, v in slots.items() if v is not None}


def param_shapes(spec: LayerSpec):
    if spec.kind == "conv":
        shapes = {"weight": (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)}
    elif spec.kind == "deconv":
        shapes = {"weight": (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)}
    elif spec.kind == "fullyconnected":
        shapes = {"weight": (spec.out_channels, spec.in_channels)}
    elif spec.kind == "batchnorm":
        return {"gamma": (spec.in_channels,), "beta": (spec.in_channels,)}
    else:
        return {}
    if spec.has_bias:
        shapes["bias"] = (spec.out_channels,)
    return shapes


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=None) -> LayerParams:
    """He-normal weights, zero biases, unit BN scale; running var starts at 1."""
    dtype = dtype or default_dtype()
    shapes = param_shapes(spec)
    params = LayerParams()
    if spec.kind == "batchnorm":
        c = spec.in_channels
        params.gamma = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        params.beta = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        params.running_mean = np.zeros(c, dtype=np.float64)
        params.running_var = np.ones(c, dtype=np.float64)
        return params
    if "weight" in shapes:
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        params.weight = Tensor(rng.normal(0.0, std, size=shapes["weight"]), requires_grad=True, dtype=dtype)
    if "bias" in shapes:
        params.bias = Tensor(np.zeros(shapes["bias"]), requires_grad=True, dtype=dtype)
    return params


def apply_layer(spec: LayerSpec, x, params: LayerParams | None, mode="train", bn_momentum=BN_MOMENTUM, eps=BN_EPS):
    """Run one non-residual layer. Residual blocks are expanded by the graph."""
    kind = spec.kind
    if kind == "conv":
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"conv: input has {x.shape[1]} channels, layer expects {spec.in_channels}")
        return conv2d(x, params.weight, params.bias, spec.stride, spec.padding)
    if kind == "deconv":
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"deconv: input has {x.shape[1]} channels, layer expects {spec.in_channels}")
        return deconv2d(x, params.weight, params.bias, spec.stride, spec.padding)
    if kind == "batchnorm":
        return batchnorm(x, params, mode, bn_momentum, eps)
    if kind == "relu":
        return relu(x)
    if kind == "maxpool":
        return maxpool2d(x, spec.kernel, spec.stride, spec.padding)
    if kind == "avgpool":
        return avgpool2d(x, spec.kernel, spec.stride)
    if kind == "globalavgpool":
        return global_avgpool(x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "fullyconnected":
        if x.ndim != 2 or x.shape[1] != spec.in_channels:
            raise ShapeError(f"fullyconnected: input {x.shape} does not match in_features {spec.in_channels}")
        return linear(x, params.weight, params.bias)
    if kind == "softmax":
        return softmax(x)
    raise UsageError(f"apply_layer cannot run {kind!r} directly")
