"""Small convolutional encoder/decoder with hand-rolled reverse-mode gradients.

The encoder maps one 28x28 grayscale glyph to a two-way softmax read as
the probability that the depicted atom is positive.  All math is float64
numpy; convolutions go through ``sliding_window_view`` plus ``tensordot``
so batches stay vectorized.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EncoderArch",
    "EncoderNet",
    "DecoderNet",
    "AdamState",
    "adam_step",
    "xavier_init",
    "gumbel_softmax",
    "gumbel_softmax_forward",
    "gumbel_softmax_backward",
    "softmax",
    "save_checkpoint",
    "load_checkpoint",
    "TrainingDiverged",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"NSEVNET1"


class TrainingDiverged(RuntimeError):
    """Raised when gradients or losses stop being finite."""


# ---------------------------------------------------------------------------
# primitive layers


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold x (B,C,H,W) into (B, H', W', C*k*k) correlation columns.

    Depends only on the input, not the kernel weights, so callers may
    compute it once and reuse it across optimizer steps.
    """
    b, c, h, w = x.shape
    hp, wp = h - k + 1, w - k + 1
    col = np.empty((b, hp, wp, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, :, :, i, j] = x[:, :, i : i + hp, j : j + wp].transpose(0, 2, 3, 1)
    return col.reshape(b, hp, wp, c * k * k)


def conv2d_forward(x, w, b, col=None):
    """Valid cross-correlation: x (B,C,H,W), w (O,C,kh,kw) -> (B,O,H',W')."""
    k = w.shape[2]
    if col is None:
        col = im2col(x, k)
    bsz, hp, wp, _ = col.shape
    w_mat = w.reshape(w.shape[0], -1)
    y = col.reshape(-1, col.shape[-1]) @ w_mat.T
    y = np.ascontiguousarray(y.reshape(bsz, hp, wp, -1).transpose(0, 3, 1, 2))
    y += b[None, :, None, None]
    return y, (col, x.shape)


def conv2d_backward(cache, w, dy, need_dx=True):
    col, x_shape = cache
    k = w.shape[2]
    bsz, hp, wp, _ = col.shape
    db = dy.sum(axis=(0, 2, 3))
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, dy.shape[1])
    col_mat = col.reshape(-1, col.shape[-1])
    dw = (dy_mat.T @ col_mat).reshape(w.shape)
    if not need_dx:
        return None, dw, db
    dcol = (dy_mat @ w.reshape(w.shape[0], -1)).reshape(bsz, hp, wp, x_shape[1], k, k)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + hp, j : j + wp] += dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def maxpool2_forward(x):
    """2x2 max pooling, stride 2, trailing row/col dropped when odd.

    Ties route the gradient to the first element in row-major order.
    """
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    top = x[:, :, 0 : h2 * 2 : 2, : w2 * 2]
    bottom = x[:, :, 1 : h2 * 2 : 2, : w2 * 2]
    row_from_bottom = bottom > top
    rows = np.where(row_from_bottom, bottom, top)
    left = rows[:, :, :, 0::2]
    right = rows[:, :, :, 1::2]
    col_from_right = right > left
    y = np.where(col_from_right, right, left)
    return y, (x.shape, row_from_bottom, col_from_right)


def maxpool2_backward(cache, dy):
    (b, c, h, w), row_from_bottom, col_from_right = cache
    h2, w2 = h // 2, w // 2
    drows = np.zeros((b, c, h2, w2 * 2), dtype=dy.dtype)
    drows[:, :, :, 0::2] = np.where(col_from_right, 0.0, dy)
    drows[:, :, :, 1::2] = np.where(col_from_right, dy, 0.0)
    dx = np.zeros((b, c, h, w), dtype=dy.dtype)
    dx[:, :, 0 : h2 * 2 : 2, : w2 * 2] = np.where(row_from_bottom, 0.0, drows)
    dx[:, :, 1 : h2 * 2 : 2, : w2 * 2] = np.where(row_from_bottom, drows, 0.0)
    return dx


def dense_forward(x, w, b):
    return x @ w + b, x


def dense_backward(cache, w, dy):
    x = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(pre, dy):
    return np.where(pre > 0, dy, 0.0)


def upsample2_forward(x):
    """Nearest-neighbour doubling of both spatial dims."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class EncoderArch:
    """Layer widths of the glyph encoder.

    Defaults give the reference stack: two 3x3 conv layers (8 then 16
    channels) with 2x2 max pooling, then fully connected 400 -> 120 -> 84
    -> 2.  Widths are configurable; the desk profile uses a narrower net.
    """

    conv_channels: tuple[int, int] = (8, 16)
    fc_dims: tuple[int, int] = (120, 84)
    kernel: int = 3
    image_hw: int = 28

    @property
    def pooled_hw(self) -> tuple[int, int]:
        h1 = self.image_hw - self.kernel + 1
        p1 = h1 // 2
        h2 = p1 - self.kernel + 1
        return p1, h2 // 2

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[1] * self.pooled_hw[1] ** 2

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv_channels
        f1, f2 = self.fc_dims
        k = self.kernel
        return {
            "conv1_w": (c1, 1, k, k),
            "conv1_b": (c1,),
            "conv2_w": (c2, c1, k, k),
            "conv2_b": (c2,),
            "fc1_w": (self.flat_dim, f1),
            "fc1_b": (f1,),
            "fc2_w": (f1, f2),
            "fc2_b": (f2,),
            "out_w": (f2, 2),
            "out_b": (2,),
        }

    def describe(self) -> str:
        shapes = ";".join(f"{k}={v}" for k, v in self.param_shapes().items())
        return f"encoder[{shapes}]"


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.endswith("_b"):
        return shape[0], shape[0]
    if len(shape) == 4:  # conv: (out, in, kh, kw)
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]  # dense: (in, out)


def xavier_init(
    shapes: dict[str, tuple[int, ...]], seed, dtype=np.float64
) -> dict[str, np.ndarray]:
    """Uniform[-b, b] weights with b = sqrt(6 / (fan_in + fan_out)); zero biases.

    Drawing follows declaration order, so equal seeds give equal nets.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


class EncoderNet:
    """Glyph encoder; ``forward`` yields the per-image two-way softmax."""

    def __init__(self, arch: EncoderArch = EncoderArch(), seed=0, params=None,
                 dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        if params is not None:
            self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        else:
            self.params = xavier_init(arch.param_shapes(), seed, self.dtype)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "EncoderNet":
        return EncoderNet(
            self.arch,
            params={k: v.copy() for k, v in self.params.items()},
            dtype=self.dtype,
        )

    def input_columns(self, images: np.ndarray) -> np.ndarray:
        """First-layer im2col of a glyph batch; reusable across steps."""
        x = np.ascontiguousarray(np.asarray(images, dtype=self.dtype)[:, None, :, :])
        return im2col(x, self.arch.kernel)

    def forward(self, images: np.ndarray, col1: np.ndarray | None = None):
        """images (B, 28, 28) -> (probs2 (B, 2), cache).

        probs2[:, 0] is the probability the glyph reads as a positive atom.
        ``col1`` may carry precomputed :meth:`input_columns`.
        """
        p = self.params
        x = np.asarray(images, dtype=self.dtype)[:, None, :, :]
        z1, c_conv1 = conv2d_forward(x, p["conv1_w"], p["conv1_b"], col=col1)
        a1 = relu(z1)
        p1, c_pool1 = maxpool2_forward(a1)
        z2, c_conv2 = conv2d_forward(p1, p["conv2_w"], p["conv2_b"])
        a2 = relu(z2)
        p2, c_pool2 = maxpool2_forward(a2)
        flat = p2.reshape(p2.shape[0], -1)
        z3, c_fc1 = dense_forward(flat, p["fc1_w"], p["fc1_b"])
        a3 = relu(z3)
        z4, c_fc2 = dense_forward(a3, p["fc2_w"], p["fc2_b"])
        a4 = relu(z4)
        logits, c_out = dense_forward(a4, p["out_w"], p["out_b"])
        probs = softmax(logits)
        cache = (c_conv1, z1, c_pool1, c_conv2, z2, c_pool2, p2.shape,
                 c_fc1, z3, c_fc2, z4, c_out, logits, probs)
        return probs, cache

    def backward(self, cache, dprobs2: np.ndarray,
                 dlogits_extra: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Parameter gradients for upstream d(loss)/d(probs2), shape (B, 2).

        ``dlogits_extra`` adds a gradient entering at the pre-softmax
        logits (the reconstruction path taps the network there).
        """
        (c_conv1, z1, c_pool1, c_conv2, z2, c_pool2, p2_shape,
         c_fc1, z3, c_fc2, z4, c_out, logits, probs) = cache
        p = self.params
        grads = {}
        dz = softmax_backward(probs, np.asarray(dprobs2, dtype=self.dtype))
        if dlogits_extra is not None:
            dz = dz + np.asarray(dlogits_extra, dtype=self.dtype)
        da4, grads["out_w"], grads["out_b"] = dense_backward(c_out, p["out_w"], dz)
        dz4 = relu_backward(z4, da4)
        da3, grads["fc2_w"], grads["fc2_b"] = dense_backward(c_fc2, p["fc2_w"], dz4)
        dz3 = relu_backward(z3, da3)
        dflat, grads["fc1_w"], grads["fc1_b"] = dense_backward(c_fc1, p["fc1_w"], dz3)
        dp2 = dflat.reshape(p2_shape)
        da2 = maxpool2_backward(c_pool2, dp2)
        dz2 = relu_backward(z2, da2)
        dp1, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(
            c_conv2, p["conv2_w"], dz2
        )
        da1 = maxpool2_backward(c_pool1, dp1)
        dz1 = relu_backward(z1, da1)
        _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(
            c_conv1, p["conv1_w"], dz1, need_dx=False
        )
        return grads

    def prob_positive(self, images: np.ndarray, col1: np.ndarray | None = None) -> np.ndarray:
        probs, _ = self.forward(images, col1=col1)
        return probs[:, 0]


def encode_sequence(net: EncoderNet, images: np.ndarray) -> np.ndarray:
    """Per-atom positive probabilities for one instance (n, 28, 28)."""
    return net.prob_positive(np.asarray(images))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def clone(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    for g in grads.values():
        if not np.isfinite(g).all():
            raise TrainingDiverged("non-finite gradient")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Gumbel-Softmax


def gumbel_softmax_forward(logits: np.ndarray, temperature: float, rng):
    """softmax((log softmax(logits) + g) / tau) with Gumbel noise g."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    u = rng.random(logits.shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    g = -np.log(-np.log(u))
    shifted = logits - logits.max(-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
    scaled = (log_probs + g) / temperature
    y = softmax(scaled)
    cache = (softmax(logits), y, temperature)
    return y, cache


def gumbel_softmax_backward(cache, dy):
    probs, y, temperature = cache
    dscaled = softmax_backward(y, dy)
    dlog_probs = dscaled / temperature
    # log-softmax jacobian: dz = ds - softmax(z) * sum(ds)
    return dlog_probs - probs * dlog_probs.sum(axis=-1, keepdims=True)


def gumbel_softmax(logits: np.ndarray, temperature: float, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y, _ = gumbel_softmax_forward(logits, temperature, rng)
    return y


# ---------------------------------------------------------------------------
# decoder (optional reconstruction path)


class DecoderNet:
    """Mirror of the encoder: code (B, 2) -> reconstructed 28x28 images.

    Dense mirror back to the pooled feature map, then two rounds of
    nearest-neighbour upsampling and transposed convolution, sigmoid
    output.  Only used when the reconstruction loss ratio is nonzero.
    """

    def __init__(self, arch: EncoderArch = EncoderArch(), seed=0, params=None):
        if arch.image_hw != 28:
            raise ValueError("decoder mirror is laid out for 28x28 glyphs")
        self.arch = arch
        self.params = params if params is not None else xavier_init(self.param_shapes(arch), seed)

    @staticmethod
    def param_shapes(arch: EncoderArch) -> dict[str, tuple[int, ...]]:
        c1, c2 = arch.conv_channels
        f1, f2 = arch.fc_dims
        return {
            "fc1_w": (2, f2),
            "fc1_b": (f2,),
            "fc2_w": (f2, f1),
            "fc2_b": (f1,),
            "fc3_w": (f1, arch.flat_dim),
            "fc3_b": (arch.flat_dim,),
            "deconv1_w": (c1, c2, 3, 3),  # (out, in, kh, kw); 10 -> 12
            "deconv1_b": (c1,),
            "deconv2_w": (1, c1, 5, 5),  # 24 -> 28
            "deconv2_b": (1,),
        }

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "DecoderNet":
        return DecoderNet(self.arch, params={k: v.copy() for k, v in self.params.items()})

    @staticmethod
    def _convt_forward(x, w, b):
        # Transposed conv: full convolution, i.e. correlation of the padded
        # input with the spatially flipped kernel.  w is (out, in, kh, kw).
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1])
        y, cache = conv2d_forward(xp, wf, b)
        return y, (cache, wf, k, x.shape)

    @staticmethod
    def _convt_backward(cache, dy):
        inner, wf, k, x_shape = cache
        dxp, dwf, db = conv2d_backward(inner, wf, dy)
        dx = dxp[:, :, k - 1 : k - 1 + x_shape[2], k - 1 : k - 1 + x_shape[3]]
        dw = np.ascontiguousarray(dwf[:, :, ::-1, ::-1])
        return dx, dw, db

    def forward(self, code: np.ndarray):
        p = self.params
        c2 = self.arch.conv_channels[1]
        side = self.arch.pooled_hw[1]
        z1, c1f = dense_forward(np.asarray(code, dtype=np.float64), p["fc1_w"], p["fc1_b"])
        a1 = relu(z1)
        z2, c2f = dense_forward(a1, p["fc2_w"], p["fc2_b"])
        a2 = relu(z2)
        z3, c3f = dense_forward(a2, p["fc3_w"], p["fc3_b"])
        a3 = relu(z3)
        grid = a3.reshape(-1, c2, side, side)
        up1 = upsample2_forward(grid)
        z4, c4 = self._convt_forward(up1, p["deconv1_w"], p["deconv1_b"])
        a4 = relu(z4)
        up2 = upsample2_forward(a4)
        z5, c5 = self._convt_forward(up2, p["deconv2_w"], p["deconv2_b"])
        out = 1.0 / (1.0 + np.exp(-z5))
        cache = (c1f, z1, c2f, z2, c3f, z3, grid.shape, c4, z4, c5, out)
        return out[:, 0, :, :], cache

    def backward(self, cache, dout):
        (c1f, z1, c2f, z2, c3f, z3, grid_shape, c4, z4, c5, out) = cache
        p = self.params
        grads = {}
        dz5 = (dout[:, None, :, :]) * out * (1.0 - out)
        dup2, grads["deconv2_w"], grads["deconv2_b"] = self._convt_backward(c5, dz5)
        da4 = upsample2_backward(dup2)
        dz4 = relu_backward(z4, da4)
        dup1, grads["deconv1_w"], grads["deconv1_b"] = self._convt_backward(c4, dz4)
        dgrid = upsample2_backward(dup1)
        da3 = dgrid.reshape(dgrid.shape[0], -1)
        dz3 = relu_backward(z3, da3)
        da2, grads["fc3_w"], grads["fc3_b"] = dense_backward(c3f, p["fc3_w"], dz3)
        dz2 = relu_backward(z2, da2)
        da1, grads["fc2_w"], grads["fc2_b"] = dense_backward(c2f, p["fc2_w"], dz2)
        dz1 = relu_backward(z1, da1)
        dcode, grads["fc1_w"], grads["fc1_b"] = dense_backward(c1f, p["fc1_w"], dz1)
        return dcode, grads


def reconstruction_loss(recon: np.ndarray, images: np.ndarray):
    """Mean squared error per image and its gradient w.r.t. ``recon``."""
    diff = recon - np.asarray(images, dtype=np.float64)
    per_image = (diff**2).mean(axis=(1, 2))
    drecon = 2.0 * diff / (diff.shape[1] * diff.shape[2])
    return per_image, drecon


# ---------------------------------------------------------------------------
# checkpoints


def _arch_hash(describe: str) -> bytes:
    return hashlib.blake2b(describe.encode(), digest_size=16).digest()


def save_checkpoint(path, params: dict[str, np.ndarray], describe: str) -> None:
    """Versioned binary blob: magic, architecture hash, f32 LE params."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_arch_hash(describe))
        for name in params:
            fh.write(params[name].astype("<f4").tobytes())


def load_checkpoint(path, shapes: dict[str, tuple[int, ...]], describe: str):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        stored_hash = fh.read(16)
        if stored_hash != _arch_hash(describe):
            raise ValueError("checkpoint architecture does not match")
        params = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError("truncated checkpoint")
            flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            params[name] = flat.reshape(shape)
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return params
