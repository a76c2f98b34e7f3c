"""Dense 5-D tensor layers with hand-written backward passes.

Only the layer set the 3D conditional GAN needs is provided: strided 3D
convolution and its transpose, 3D batch normalization, pointwise
activations, the two losses, and Adam.  Tensors are plain numpy arrays
laid out as ``(batch, channels, depth, height, width)``.

Every layer follows the same protocol::

    y, cache = layer.forward(x, training)
    dx = layer.backward(dy, cache)     # accumulates into layer.grads

Caches are returned rather than stored on the layer so that one layer can
be run on several batches (real and generated maps) before a single
backward sweep.  All kernels work in whatever float dtype they are given;
the gradient checks run them in float64.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _im2col(xp: np.ndarray, kernel: int, stride: int, out_spatial) -> np.ndarray:
    """Gather strided patches of padded ``xp`` into a (C*k^3, B*Do*Ho*Wo) matrix."""
    b, c = xp.shape[:2]
    d, h, w = out_spatial
    cols = np.empty((c, kernel, kernel, kernel, b, d, h, w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    span_d, span_h, span_w = stride * (d - 1) + 1, stride * (h - 1) + 1, stride * (w - 1) + 1
    for kd in range(kernel):
        for kh in range(kernel):
            for kw in range(kernel):
                cols[:, kd, kh, kw] = xt[:, :, kd:kd + span_d:stride, kh:kh + span_h:stride,
                                         kw:kw + span_w:stride]
    return cols.reshape(c * kernel ** 3, b * d * h * w)


def _col2im(cols: np.ndarray, channels: int, kernel: int, batch: int, in_spatial,
            out_spatial, stride: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add a (C*k^3, B*D*H*W) matrix into a volume."""
    d, h, w = in_spatial
    cols = cols.reshape(channels, kernel, kernel, kernel, batch, d, h, w)
    out = np.zeros((channels, batch) + tuple(out_spatial), dtype=cols.dtype)
    span_d, span_h, span_w = stride * (d - 1) + 1, stride * (h - 1) + 1, stride * (w - 1) + 1
    # fixed loop order over kernel taps keeps accumulation deterministic
    for kd in range(kernel):
        for kh in range(kernel):
            for kw in range(kernel):
                out[:, :, kd:kd + span_d:stride, kh:kh + span_h:stride, kw:kw + span_w:stride] += \
                    cols[:, kd, kh, kw]
    return out.transpose(1, 0, 2, 3, 4)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _channels_first(x: np.ndarray) -> np.ndarray:
    # (B, C, ...) -> (C, B*...) matrix
    return x.transpose(1, 0, 2, 3, 4).reshape(x.shape[1], -1)


def _batch_first(m: np.ndarray, batch: int, spatial) -> np.ndarray:
    # (C, B*...) matrix -> contiguous (B, C, ...)
    out = m.reshape((m.shape[0], batch) + tuple(spatial)).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out)


def _crop(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return x[:, :, p:x.shape[2] - p, p:x.shape[3] - p, p:x.shape[4] - p]


def conv3d_forward(x, weight, bias, stride=2, padding=1):
    """Cross-correlation of ``x`` (B, Cin, D, H, W) with ``weight`` (Cout, Cin, k, k, k).

    Returns the output and a cache for :func:`conv3d_backward`.
    """
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weight {weight.shape}")
    k = weight.shape[2]
    if any(s + 2 * padding < k for s in x.shape[2:]):
        raise ValueError(f"input spatial dims {x.shape[2:]} smaller than kernel {k}")
    out_spatial = tuple(conv_output_size(s, k, stride, padding) for s in x.shape[2:])
    cols = _im2col(_pad(x, padding), k, stride, out_spatial)
    out = _batch_first(weight.reshape(weight.shape[0], -1) @ cols, x.shape[0], out_spatial)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out, (x.shape, cols, weight, stride, padding)


def conv3d_backward(dy, cache, need_weight_grad=True):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weight and bias."""
    x_shape, cols, weight, stride, padding = cache
    cout, cin, k = weight.shape[:3]
    dy_mat = _channels_first(dy)
    dw = db = None
    if need_weight_grad:
        dw = (dy_mat @ cols.T).reshape(weight.shape)
        db = dy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dy.dtype)
    dcols = weight.reshape(cout, -1).T @ dy_mat
    padded = tuple(s + 2 * padding for s in x_shape[2:])
    dxp = _col2im(dcols, cin, k, x_shape[0], dy.shape[2:], padded, stride)
    return np.ascontiguousarray(_crop(dxp, padding)), dw, db


def convtranspose3d_forward(x, weight, bias, stride=2, padding=1):
    """Transposed convolution; ``weight`` is laid out (Cin, Cout, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"convtranspose3d shape mismatch: input {x.shape}, weight {weight.shape}")
    cin, cout, k = weight.shape[:3]
    x_mat = _channels_first(x)
    cols = weight.reshape(cin, -1).T @ x_mat
    full = tuple((s - 1) * stride + k for s in x.shape[2:])
    out = np.ascontiguousarray(_crop(_col2im(cols, cout, k, x.shape[0], x.shape[2:], full, stride),
                                     padding))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out, (x_mat, x.shape, weight, stride, padding)


def convtranspose3d_backward(dy, cache, need_weight_grad=True):
    x_mat, x_shape, weight, stride, padding = cache
    cin, cout, k = weight.shape[:3]
    # re-pad the cropped border so patches line up with the uncropped output
    cols = _im2col(_pad(dy, padding), k, stride, x_shape[2:])
    dx = _batch_first(weight.reshape(cin, -1) @ cols, x_shape[0], x_shape[2:])
    dw = db = None
    if need_weight_grad:
        dw = (x_mat @ cols.T).reshape(weight.shape)
        db = dy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, training,
                        momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch and spatial axes.

    In training mode the running statistics are updated in place.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if training:
        n = x.size // x.shape[1]
        mean = x.mean(axis=axes, dtype=np.float64)
        var = ((x - mean.reshape(shape).astype(x.dtype)) ** 2).mean(axis=axes, dtype=np.float64)
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y, (xhat, inv_std, gamma, training)


def batchnorm3d_backward(dy, cache, need_weight_grad=True):
    xhat, inv_std, gamma, training = cache
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dgamma = dbeta = None
    sum_dy = dy.sum(axis=axes, dtype=np.float64)
    sum_dy_xhat = (dy * xhat).sum(axis=axes, dtype=np.float64)
    if need_weight_grad:
        dgamma = sum_dy_xhat.astype(dy.dtype)
        dbeta = sum_dy.astype(dy.dtype)
    scale = (gamma * inv_std).reshape(shape)
    if not training:
        return dy * scale, dgamma, dbeta
    n = dy.size // dy.shape[1]
    mean_dy = (sum_dy / n).astype(dy.dtype).reshape(shape)
    mean_dy_xhat = (sum_dy_xhat / n).astype(dy.dtype).reshape(shape)
    dx = scale * (dy - mean_dy - xhat * mean_dy_xhat)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def leaky_relu_forward(x, slope=0.2):
    mask = x > 0
    return np.where(mask, x, x * slope), (mask, slope)


def leaky_relu_backward(dy, cache):
    mask, slope = cache
    return np.where(mask, dy, dy * slope)


def sigmoid_forward(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1 - y * y)


def mse(a, b):
    """Mean squared difference and its gradient with respect to ``a``."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    value = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return value, grad.astype(np.result_type(a, np.float32))


def lsgan_term(d_out, target):
    """Least-squares adversarial term ``mean((d_out - target)**2)`` and its gradient."""
    return mse(d_out, np.full(np.shape(d_out), target))


# ---------------------------------------------------------------------------
# Layer objects


class Layer:
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def __init__(self) -> None:
        self.params = {}
        self.buffers = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def _accumulate(self, name: str, g) -> None:
        if g is None:
            return
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def forward(self, x, training):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dy, cache, need_weight_grad=True):  # pragma: no cover
        raise NotImplementedError


class Conv3d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1, rng: np.random.Generator | None = None,
                 init_std: float = 0.02, dtype=DTYPE) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.params["weight"] = (rng.standard_normal((out_ch, in_ch, kernel, kernel, kernel))
                                 * init_std).astype(dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def output_shape(self, in_shape):
        c = self.params["weight"].shape[0]
        k = self.params["weight"].shape[2]
        return (c,) + tuple(conv_output_size(s, k, self.stride, self.padding) for s in in_shape[1:])

    def forward(self, x, training):
        return conv3d_forward(x, self.params["weight"], self.params["bias"],
                              self.stride, self.padding)

    def backward(self, dy, cache, need_weight_grad=True):
        dx, dw, db = conv3d_backward(dy, cache, need_weight_grad)
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class ConvTranspose3d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1, rng: np.random.Generator | None = None,
                 init_std: float = 0.02, dtype=DTYPE) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.params["weight"] = (rng.standard_normal((in_ch, out_ch, kernel, kernel, kernel))
                                 * init_std).astype(dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def output_shape(self, in_shape):
        c = self.params["weight"].shape[1]
        k = self.params["weight"].shape[2]
        return (c,) + tuple(conv_transpose_output_size(s, k, self.stride, self.padding)
                            for s in in_shape[1:])

    def forward(self, x, training):
        return convtranspose3d_forward(x, self.params["weight"], self.params["bias"],
                                       self.stride, self.padding)

    def backward(self, dy, cache, need_weight_grad=True):
        dx, dw, db = convtranspose3d_backward(dy, cache, need_weight_grad)
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class BatchNorm3d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 rng: np.random.Generator | None = None, init_std: float = 0.02,
                 dtype=DTYPE) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.momentum, self.eps = momentum, eps
        # scale ~ N(1, 0.02) as in the usual DCGAN initialisation
        self.params["weight"] = (1.0 + rng.standard_normal(channels) * init_std).astype(dtype)
        self.params["bias"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, training):
        return batchnorm3d_forward(x, self.params["weight"], self.params["bias"],
                                   self.buffers["running_mean"], self.buffers["running_var"],
                                   training, self.momentum, self.eps)

    def backward(self, dy, cache, need_weight_grad=True):
        dx, dg, db = batchnorm3d_backward(dy, cache, need_weight_grad)
        self._accumulate("weight", dg)
        self._accumulate("bias", db)
        return dx


class _Activation(Layer):
    _fwd = staticmethod(relu_forward)
    _bwd = staticmethod(relu_backward)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, training):
        return type(self)._fwd(x)

    def backward(self, dy, cache, need_weight_grad=True):
        return type(self)._bwd(dy, cache)


class ReLU(_Activation):
    _fwd = staticmethod(relu_forward)
    _bwd = staticmethod(relu_backward)


class Sigmoid(_Activation):
    _fwd = staticmethod(sigmoid_forward)
    _bwd = staticmethod(sigmoid_backward)


class Tanh(_Activation):
    _fwd = staticmethod(tanh_forward)
    _bwd = staticmethod(tanh_backward)


class LeakyReLU(_Activation):
    def __init__(self, slope: float = 0.2) -> None:
        super().__init__()
        self.slope = slope

    def forward(self, x, training):
        return leaky_relu_forward(x, self.slope)

    def backward(self, dy, cache, need_weight_grad=True):
        return leaky_relu_backward(dy, cache)


class Sequential:
    """Ordered stack of named layers sharing the forward/backward protocol."""

    def __init__(self, layers: Sequence[tuple[str, Layer]]) -> None:
        self.layers = list(layers)

    def forward(self, x, training=True):
        tape = []
        for _, layer in self.layers:
            x, cache = layer.forward(x, training)
            tape.append(cache)
        return x, tape

    def backward(self, dy, tape, need_weight_grad=True):
        for (_, layer), cache in zip(reversed(self.layers), reversed(tape)):
            dy = layer.backward(dy, cache, need_weight_grad)
        return dy

    def zero_grad(self) -> None:
        for _, layer in self.layers:
            layer.zero_grad()

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{lname}.{pname}", p) for lname, layer in self.layers
                for pname, p in layer.params.items()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{lname}.{bname}", b) for lname, layer in self.layers
                for bname, b in layer.buffers.items()]

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for lname, layer in self.layers:
            for pname, p in layer.params.items():
                g = layer.grads.get(pname)
                out.append((f"{lname}.{pname}", g if g is not None else np.zeros_like(p)))
        return out

    def param_count(self) -> int:
        return int(sum(p.size for _, p in self.named_params()))


# ---------------------------------------------------------------------------
# Optimiser


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, params: Sequence[tuple[str, np.ndarray]], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.names = [name for name, _ in params]
        self.m = {name: np.zeros_like(p) for name, p in params}
        self.v = {name: np.zeros_like(p) for name, p in params}

    def step(self, params: Iterable[tuple[str, np.ndarray]],
             grads: Iterable[tuple[str, np.ndarray]]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        grads = dict(grads)
        for name, p in params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p -= step.astype(p.dtype)

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.names:
            out.append((f"adam.m.{name}", self.m[name]))
            out.append((f"adam.v.{name}", self.v[name]))
        return out


# ---------------------------------------------------------------------------
# Checkpoint container

CKPT_MAGIC = b"CGANCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, metadata_json: bytes, tensors: Sequence[tuple[str, np.ndarray]]) -> int:
    """Write the versioned checkpoint container; returns the byte count.

    Layout (little endian): magic, u32 version, u32 metadata length, metadata
    bytes, u32 tensor count, then per tensor: u16 name length, name, u8 rank,
    rank x u32 dims, float32 values in C order.
    """
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(metadata_json)), metadata_json,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_tensors(path) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        meta = blob[pos:pos + meta_len]
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return meta, tensors
