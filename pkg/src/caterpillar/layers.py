"""Differentiable primitive layers with explicit forward/backward.

There is no tape: every layer caches what its own backward needs, and
composite modules chain child backwards in reverse order.  All layers are
built in float64 and can be cast with Module.astype for float32 training.

Gradient convention: backward(dy) accumulates into each Parameter.grad and
returns the gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import InsufficientBatchError, NumericError, ShapeError
from .tensor import Rng, ensure_nhwc, max_rel_error, project_channels


class Parameter:
    """A named weight array paired with a same-shaped gradient accumulator."""

    __slots__ = ("value", "grad", "weight_decay")

    def __init__(self, value: np.ndarray, weight_decay: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.weight_decay = weight_decay


class Module:
    """Base class: parameter/buffer discovery, dtype casting, MAC accounting.

    Subclasses implement forward(x, training) and backward(dy); composites
    override _children() to fix child names and order.
    """

    buffer_names: tuple[str, ...] = ()

    def _children(self) -> list[tuple[str, "Module"]]:
        out = []
        for name, obj in self.__dict__.items():
            if isinstance(obj, Module):
                out.append((name, obj))
        return out

    def _local_params(self) -> list[tuple[str, Parameter]]:
        return [(n, o) for n, o in self.__dict__.items() if isinstance(o, Parameter)]

    def named_parameters(self, prefix: str = ""):
        for name, p in self._local_params():
            yield (f"{prefix}.{name}" if prefix else name, p)
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name in type(self).buffer_names:
            yield (f"{prefix}.{name}" if prefix else name, self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.value)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for _, owner, name in self.named_buffers():
            setattr(owner, name, getattr(owner, name).astype(dtype))
        return self

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def macs(self, in_shape: tuple) -> int:
        """Multiply-accumulates for one forward pass on in_shape (weight applications)."""
        return 0

    def __call__(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.forward(x, training)


def trunc_normal_init(rng: Rng, shape: tuple, std: float = 0.02) -> np.ndarray:
    """Truncated-normal weight init: std 0.02, clipped at two sigmas."""
    return rng.truncated_normal(int(np.prod(shape)), std=std, clip=2.0).reshape(shape)


class Identity(Module):
    def forward(self, x, training=False):
        return x

    def backward(self, dy):
        return dy


class Linear(Module):
    """Per-pillar fully connected layer: (..., cin) -> (..., cout)."""

    def __init__(self, cin: int, cout: int, bias: bool = True, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.cin = cin
        self.cout = cout
        self.w = Parameter(trunc_normal_init(rng, (cin, cout)))
        self.b = Parameter(np.zeros(cout), weight_decay=False) if bias else None

    def _local_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.shape[-1] != self.cin:
            raise ShapeError(f"linear: input channels {x.shape[-1]} != cin {self.cin}")
        self._x = x
        out = x @ self.w.value
        if self.b is not None:
            out = out + self.b.value
        return out

    def backward(self, dy):
        x = self._x
        flat_x = x.reshape(-1, self.cin)
        flat_dy = dy.reshape(-1, self.cout)
        self.w.grad += flat_x.T @ flat_dy
        if self.b is not None:
            self.b.grad += flat_dy.sum(axis=0)
        return dy @ self.w.value.T

    def out_shape(self, in_shape):
        return tuple(in_shape[:-1]) + (self.cout,)

    def macs(self, in_shape):
        return int(np.prod(in_shape[:-1])) * self.cin * self.cout


class BatchNorm2d(Module):
    """Channel-wise batch normalization over (N, H, W); eps 1e-5, momentum 0.1.

    Training mode normalizes with batch statistics and updates running stats;
    eval mode is a deterministic affine map using the running statistics.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(c), weight_decay=False)
        self.beta = Parameter(np.zeros(c), weight_decay=False)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "batchnorm input")
        if x.shape[3] != self.c:
            raise ShapeError(f"batchnorm: channels {x.shape[3]} != {self.c}")
        if training:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            if m < 2:
                raise InsufficientBatchError(
                    f"batchnorm training needs N*H*W >= 2, got {m}"
                )
            mean = x.reshape(-1, self.c).mean(axis=0)
            centered = x - mean
            sq = centered.reshape(-1, self.c)
            var = np.mean(sq * sq, axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv
            self._cache = (xhat, inv, m, True)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(x.dtype)
            unbiased = var * (m / (m - 1))
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
            self._cache = (xhat, inv, 0, False)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy):
        xhat, inv, m, was_training = self._cache
        flat_dy = dy.reshape(-1, self.c)
        prod_sum = (flat_dy * xhat.reshape(-1, self.c)).sum(axis=0)
        dy_sum = flat_dy.sum(axis=0)
        self.gamma.grad += prod_sum
        self.beta.grad += dy_sum
        g = self.gamma.value * inv
        if not was_training:
            return dy * g
        return g * (dy - dy_sum / m - xhat * (prod_sum / m))

    def macs(self, in_shape):
        return int(np.prod(in_shape[:3])) * self.c


class LayerNorm(Module):
    """Per-pillar normalization over the channel axis; eps 1e-5."""

    def __init__(self, c: int, eps: float = 1e-5):
        self.c = c
        self.eps = eps
        self.gamma = Parameter(np.ones(c), weight_decay=False)
        self.beta = Parameter(np.zeros(c), weight_decay=False)

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.shape[-1] != self.c:
            raise ShapeError(f"layernorm: channels {x.shape[-1]} != {self.c}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy):
        xhat, inv = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        g = dy * self.gamma.value
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - g_mean - xhat * proj)

    def macs(self, in_shape):
        return int(np.prod(in_shape))


class GELU(Module):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""

    def forward(self, x, training=False):
        x = np.asarray(x)
        self._x = x
        self._phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype)))
        return x * self._phi

    def backward(self, dy):
        x = self._x
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi).astype(x.dtype)
        return dy * (self._phi + x * pdf)


class ReLU(Module):
    def forward(self, x, training=False):
        x = np.asarray(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0).astype(dy.dtype)


class FFN(Module):
    """Channel-mixing block: per-pillar Linear -> GELU -> Linear."""

    def __init__(self, c: int, ratio: int = 3, bias: bool = True, rng: Rng | None = None):
        if ratio < 1:
            raise ShapeError(f"ffn: expansion ratio must be >= 1, got {ratio}")
        rng = rng or Rng(0)
        self.fc1 = Linear(c, ratio * c, bias=bias, rng=rng)
        self.act = GELU()
        self.fc2 = Linear(ratio * c, c, bias=bias, rng=rng)

    def _children(self):
        return [("fc1", self.fc1), ("act", self.act), ("fc2", self.fc2)]

    def forward(self, x, training=False):
        return self.fc2(self.act(self.fc1(x, training), training), training)

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))

    def macs(self, in_shape):
        return self.fc1.macs(in_shape) + self.fc2.macs(self.fc1.out_shape(in_shape))


def _conv_geometry(h, w, k, stride, padding):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"conv: same padding needs odd kernel, got {k}")
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ShapeError(f"conv: unknown padding {padding!r}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(
            f"conv: kernel {k} larger than padded input {(h + 2 * pad, w + 2 * pad)}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return pad, ho, wo


class Conv2d(Module):
    """Standard cross-correlation, kernel (k, k, cin, cout), zero padding."""

    def __init__(
        self,
        k: int,
        cin: int,
        cout: int,
        stride: int = 1,
        padding: str = "same",
        bias: bool = True,
        rng: Rng | None = None,
    ):
        rng = rng or Rng(0)
        self.k, self.cin, self.cout = k, cin, cout
        self.stride, self.padding = stride, padding
        self.w = Parameter(trunc_normal_init(rng, (k, k, cin, cout)))
        self.b = Parameter(np.zeros(cout), weight_decay=False) if bias else None

    def _local_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "conv input")
        n, h, w, c = x.shape
        if c != self.cin:
            raise ShapeError(f"conv: input channels {c} != cin {self.cin}")
        pad, ho, wo = _conv_geometry(h, w, self.k, self.stride, self.padding)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        self._cache = (xp, pad, ho, wo, x.shape)
        out = np.zeros((n, ho, wo, self.cout), dtype=x.dtype)
        s = self.stride
        for di in range(self.k):
            for dj in range(self.k):
                patch = xp[:, di : di + s * ho : s, dj : dj + s * wo : s, :]
                out += patch @ self.w.value[di, dj]
        if self.b is not None:
            out += self.b.value
        return out

    def backward(self, dy):
        xp, pad, ho, wo, in_shape = self._cache
        s = self.stride
        dxp = np.zeros_like(xp)
        flat_dy = dy.reshape(-1, self.cout)
        for di in range(self.k):
            for dj in range(self.k):
                patch = xp[:, di : di + s * ho : s, dj : dj + s * wo : s, :]
                self.w.grad[di, dj] += patch.reshape(-1, self.cin).T @ flat_dy
                dxp[:, di : di + s * ho : s, dj : dj + s * wo : s, :] += (
                    dy @ self.w.value[di, dj].T
                )
        if self.b is not None:
            self.b.grad += flat_dy.sum(axis=0)
        if pad:
            return dxp[:, pad:-pad, pad:-pad, :]
        return dxp

    def out_shape(self, in_shape):
        _, ho, wo = _conv_geometry(in_shape[1], in_shape[2], self.k, self.stride, self.padding)
        return (in_shape[0], ho, wo, self.cout)

    def macs(self, in_shape):
        n, ho, wo, _ = self.out_shape(in_shape)
        return n * ho * wo * self.k * self.k * self.cin * self.cout


class DWConv2d(Module):
    """Depthwise convolution: kernel (k, k, c), channel c sees only slice c."""

    def __init__(self, k: int, c: int, bias: bool = True, rng: Rng | None = None):
        if k % 2 == 0:
            raise ShapeError(f"dwconv: kernel must be odd, got {k}")
        rng = rng or Rng(0)
        self.k, self.c = k, c
        self.w = Parameter(trunc_normal_init(rng, (k, k, c)))
        self.b = Parameter(np.zeros(c), weight_decay=False) if bias else None

    def _local_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "dwconv input")
        n, h, w, c = x.shape
        if c != self.c:
            raise ShapeError(f"dwconv: input channels {c} != {self.c}")
        pad, ho, wo = _conv_geometry(h, w, self.k, 1, "same")
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        self._cache = (xp, pad, ho, wo)
        out = np.zeros_like(x)
        for di in range(self.k):
            for dj in range(self.k):
                out += xp[:, di : di + ho, dj : dj + wo, :] * self.w.value[di, dj]
        if self.b is not None:
            out += self.b.value
        return out

    def backward(self, dy):
        xp, pad, ho, wo = self._cache
        dxp = np.zeros_like(xp)
        for di in range(self.k):
            for dj in range(self.k):
                patch = xp[:, di : di + ho, dj : dj + wo, :]
                self.w.grad[di, dj] += (patch * dy).sum(axis=(0, 1, 2))
                dxp[:, di : di + ho, dj : dj + wo, :] += dy * self.w.value[di, dj]
        if self.b is not None:
            self.b.grad += dy.sum(axis=(0, 1, 2))
        return dxp[:, pad:-pad, pad:-pad, :]

    def macs(self, in_shape):
        return int(np.prod(in_shape)) * self.k * self.k


class AvgPool2d(Module):
    """Non-overlapping k x k mean pooling (floor on odd extents)."""

    def __init__(self, k: int = 2):
        self.k = k

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "avgpool input")
        n, h, w, c = x.shape
        k = self.k
        ho, wo = h // k, w // k
        if ho < 1 or wo < 1:
            raise ShapeError(f"avgpool: window {k} larger than input {(h, w)}")
        self._cache = (x.shape, ho, wo)
        trimmed = x[:, : ho * k, : wo * k, :]
        return trimmed.reshape(n, ho, k, wo, k, c).mean(axis=(2, 4))

    def backward(self, dy):
        in_shape, ho, wo = self._cache
        k = self.k
        dx = np.zeros(in_shape, dtype=dy.dtype)
        spread = np.broadcast_to(
            dy[:, :, None, :, None, :] / (k * k),
            (in_shape[0], ho, k, wo, k, in_shape[3]),
        )
        dx[:, : ho * k, : wo * k, :] = spread.reshape(in_shape[0], ho * k, wo * k, in_shape[3])
        return dx

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // self.k, in_shape[2] // self.k, in_shape[3])


class MaxPool2d(Module):
    """k x k max pooling with stride and symmetric zero-region padding."""

    def __init__(self, k: int = 3, stride: int = 2, pad: int = 1):
        self.k, self.stride, self.pad = k, stride, pad

    def out_shape(self, in_shape):
        n, h, w, c = in_shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        return (n, ho, wo, c)

    def forward(self, x, training=False):
        x = ensure_nhwc(x, "maxpool input")
        n, h, w, c = x.shape
        k, s, p = self.k, self.stride, self.pad
        _, ho, wo, _ = self.out_shape(x.shape)
        xp = np.full((n, h + 2 * p, w + 2 * p, c), -np.inf, dtype=x.dtype)
        xp[:, p : p + h, p : p + w, :] = x
        stack = np.stack(
            [
                xp[:, di : di + s * ho : s, dj : dj + s * wo : s, :]
                for di in range(k)
                for dj in range(k)
            ]
        )
        self._arg = stack.argmax(axis=0)
        self._geom = (x.shape, ho, wo)
        return stack.max(axis=0)

    def backward(self, dy):
        in_shape, ho, wo = self._geom
        n, h, w, c = in_shape
        k, s, p = self.k, self.stride, self.pad
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for idx in range(k * k):
            di, dj = divmod(idx, k)
            mask = self._arg == idx
            dxp[:, di : di + s * ho : s, dj : dj + s * wo : s, :] += np.where(mask, dy, 0.0)
        return dxp[:, p : p + h, p : p + w, :]


class GlobalAvgPool(Module):
    def forward(self, x, training=False):
        x = ensure_nhwc(x, "gap input")
        self._hw = (x.shape[1], x.shape[2])
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, dy):
        h, w = self._hw
        return np.broadcast_to(dy / (h * w), (dy.shape[0], h, w, dy.shape[3])).astype(dy.dtype)

    def out_shape(self, in_shape):
        return (in_shape[0], 1, 1, in_shape[3])


def finite_diff_check(
    module: Module,
    x: np.ndarray,
    eps: float = 1e-5,
    seed: int = 0,
    training: bool = True,
) -> float:
    """Max relative gap between analytic gradients and central differences.

    The scalar objective is sum(forward(x) * R) for a fixed random R.  All
    input elements and all parameter elements are perturbed; the relative
    error is |a - n| / max(1, |a|, |n|).  Requires float64 throughout.
    """
    x = np.asarray(x, dtype=np.float64)
    y0 = module.forward(x, training)
    r = Rng(seed).normal(y0.size).reshape(y0.shape)

    def objective() -> float:
        return float(np.sum(module.forward(x, training) * r))

    numeric_dx = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = objective()
        flat[i] = orig - eps
        lo = objective()
        flat[i] = orig
        numeric_dx.reshape(-1)[i] = (hi - lo) / (2 * eps)

    numeric_params = []
    for _, p in module.named_parameters():
        num = np.zeros_like(p.value)
        pflat = p.value.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(pflat.size):
            orig = pflat[i]
            pflat[i] = orig + eps
            hi = objective()
            pflat[i] = orig - eps
            lo = objective()
            pflat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        numeric_params.append(num)

    module.forward(x, training)
    module.zero_grad()
    analytic_dx = module.backward(r)
    if not np.all(np.isfinite(analytic_dx)):
        raise NumericError("finite_diff_check: non-finite input gradient")
    worst = max_rel_error(analytic_dx, numeric_dx)
    for (name, p), num in zip(module.named_parameters(), numeric_params):
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"finite_diff_check: non-finite gradient for {name}")
        worst = max(worst, max_rel_error(p.grad, num))
    return worst
