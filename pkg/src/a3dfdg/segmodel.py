"""Tiny 3D segmentation network with hand-written gradients.

Architecture (fixed)::

    clip/scale HU -> conv3x3x3(1->8) -> ReLU -> conv3x3x3(8->8) -> ReLU
                  -> per-voxel linear(8->C) -> softmax

Convolutions use zero padding and stride 1.  All parameters live in one flat
vector so federated averaging is plain vector arithmetic.  Activations are
channels-last internally; :func:`forward` returns ``(B, C, H, W, D)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Tuple

import numpy as np

from ._rng import make_rng
from .errors import FormatError

HIDDEN = 8
KERNEL = 3
# HU window mapped onto [-1, 1] before the first convolution
INPUT_WINDOW = (-300.0, 500.0)
DICE_EPS = 1e-5

CKPT_MAGIC = b"A3DM"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIIQ")


def _layout(n_classes: int):
    k3 = KERNEL ** 3
    return [
        ("w1", (KERNEL, KERNEL, KERNEL, 1, HIDDEN)),
        ("b1", (HIDDEN,)),
        ("w2", (KERNEL, KERNEL, KERNEL, HIDDEN, HIDDEN)),
        ("b2", (HIDDEN,)),
        ("w3", (HIDDEN, n_classes)),
        ("b3", (n_classes,)),
    ], {"w1": k3, "w2": k3 * HIDDEN, "w3": HIDDEN}


def n_params(n_classes: int) -> int:
    layout, _ = _layout(n_classes)
    return int(sum(np.prod(shape) for _, shape in layout))


@dataclass(frozen=True, eq=False)
class SegModel:
    params: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least background and one organ class")
        params = np.asarray(self.params)
        if params.ndim != 1 or params.size != n_params(self.n_classes):
            raise ValueError(f"expected {n_params(self.n_classes)} params for C={self.n_classes}, got {params.shape}")
        object.__setattr__(self, "params", params)

    def unpack(self) -> dict:
        layout, _ = _layout(self.n_classes)
        out, pos = {}, 0
        for name, shape in layout:
            size = int(np.prod(shape))
            out[name] = self.params[pos:pos + size].reshape(shape)
            pos += size
        return out

    def astype(self, dtype) -> "SegModel":
        return SegModel(self.params.astype(dtype), self.n_classes)

    def copy(self) -> "SegModel":
        return SegModel(self.params.copy(), self.n_classes)


def zeros_model(n_classes: int) -> SegModel:
    return SegModel(np.zeros(n_params(n_classes), dtype=np.float32), n_classes)


def init_model(n_classes: int, seed: int = 0) -> SegModel:
    """He initialisation: weights ~ N(0, 2 / fan_in), biases zero."""
    layout, fan_in = _layout(n_classes)
    rng = make_rng(seed, "init")
    chunks = []
    for name, shape in layout:
        if name in fan_in:
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in[name]), size=shape).ravel())
        else:
            chunks.append(np.zeros(int(np.prod(shape))))
    return SegModel(np.concatenate(chunks).astype(np.float32), n_classes)


def normalize_intensity(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    lo, hi = INPUT_WINDOW
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return ((np.clip(x, lo, hi) - mid) / half).astype(dtype)


# Convolutions run over the zero-padded volume flattened to rows of channels:
# a 3x3x3 neighbour is then a constant row offset, and each chunk of rows is
# one contiguous 2D gemm per kernel tap.
_CHUNK = 8192


def _pad_flat(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0))).reshape(-1, x.shape[-1])


def _offsets(shape) -> list:
    _, H, W, D = shape[:4]
    sw, sh = D + 2, (W + 2) * (D + 2)
    r = KERNEL // 2
    return [
        (i - r) * sh + (j - r) * sw + (k - r)
        for i in range(KERNEL) for j in range(KERNEL) for k in range(KERNEL)
    ]


def _interior(flat: np.ndarray, shape) -> np.ndarray:
    B, H, W, D = shape[:4]
    return flat.reshape(B, H + 2, W + 2, D + 2, -1)[:, 1:-1, 1:-1, 1:-1]


def _correlate_rows(src: np.ndarray, taps: np.ndarray, offsets, margin: int) -> np.ndarray:
    n, cout = src.shape[0], taps.shape[-1]
    out = np.zeros((n, cout), dtype=src.dtype)
    scalar_in = src.shape[1] == 1
    for r0 in range(margin, n - margin, _CHUNK):
        r1 = min(r0 + _CHUNK, n - margin)
        acc = np.zeros((r1 - r0, cout), dtype=src.dtype)
        for o, tap in zip(offsets, taps):
            block = src[r0 + o:r1 + o]
            acc += block * tap[0] if scalar_in else block @ tap
        out[r0:r1] = acc
    return out


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    offsets = _offsets(x.shape)
    taps = w.reshape(len(offsets), w.shape[-2], w.shape[-1])
    if x.shape[-1] == 1:
        # single input channel: gather the 27 neighbours and do one gemm
        flat = _pad_flat(x)[:, 0]
        margin = max(offsets)
        rows = np.arange(margin, flat.size - margin)
        cols = flat[rows[:, None] + np.asarray(offsets)[None, :]]
        out = np.zeros((flat.size, taps.shape[-1]), dtype=x.dtype)
        out[margin:flat.size - margin] = cols @ taps[:, 0, :]
    else:
        out = _correlate_rows(_pad_flat(x), taps, offsets, max(offsets))
    return np.ascontiguousarray(_interior(out, x.shape))


def _conv_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool):
    offsets = _offsets(x.shape)
    margin = max(offsets)
    taps = w.reshape(len(offsets), w.shape[-2], w.shape[-1])
    xp = _pad_flat(x)
    dp = _pad_flat(dout)  # zero on padding rows, so border taps get no gradient
    n = xp.shape[0]
    dw = np.zeros_like(taps)
    for r0 in range(margin, n - margin, _CHUNK):
        r1 = min(r0 + _CHUNK, n - margin)
        d_block = dp[r0:r1]
        for t, o in enumerate(offsets):
            dw[t] += xp[r0 + o:r1 + o].T @ d_block
    dx = None
    if need_dx:
        flipped = [-o for o in offsets]
        dxp = _correlate_rows(dp, np.transpose(taps, (0, 2, 1)), flipped, margin)
        dx = _interior(dxp, x.shape)
    return dw.reshape(w.shape), dx


class _Cache(NamedTuple):
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray


def _logits(m: SegModel, x: np.ndarray) -> Tuple[np.ndarray, _Cache]:
    if x.ndim != 4:
        raise ValueError(f"expected a (B, H, W, D) batch, got shape {x.shape}")
    p = m.unpack()
    xn = normalize_intensity(x, m.params.dtype)[..., None]
    z1 = _conv(xn, p["w1"]) + p["b1"]
    a1 = np.maximum(z1, 0)
    z2 = _conv(a1, p["w2"]) + p["b2"]
    a2 = np.maximum(z2, 0)
    logits = a2 @ p["w3"] + p["b3"]
    return logits, _Cache(xn, z1, a1, z2, a2)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(m: SegModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities of shape ``(B, C, H, W, D)``."""
    logits, _ = _logits(m, np.asarray(x))
    return np.moveaxis(_softmax(logits), -1, 1)


def predict(m: SegModel, x: np.ndarray) -> np.ndarray:
    """Arg-max labels ``(B, H, W, D)``; ties resolve to the lowest class id."""
    logits, _ = _logits(m, np.asarray(x))
    return logits.argmax(axis=-1).astype(np.uint8)


class LossValue(NamedTuple):
    total: float
    dice_term: float
    ce_term: float


def dice_ce_loss(probs_last: np.ndarray, labels: np.ndarray, n_classes: int):
    """Soft-Dice (foreground classes) + mean cross-entropy.

    ``probs_last`` is channels-last.  Returns the loss and its gradient with
    respect to the probabilities, excluding the cross-entropy part (which is
    folded into the logit gradient by the caller).
    """
    onehot = np.eye(n_classes, dtype=probs_last.dtype)[labels]
    axes = tuple(range(probs_last.ndim - 1))
    inter = (probs_last * onehot).sum(axis=axes)
    denom = probs_last.sum(axis=axes) + onehot.sum(axis=axes)
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    n_fg = n_classes - 1
    dice_term = 1.0 - dice[1:].mean()
    ddice_dp = (2.0 * onehot * (denom + DICE_EPS) - (2.0 * inter + DICE_EPS)) / (denom + DICE_EPS) ** 2
    dp = -ddice_dp / n_fg
    dp[..., 0] = 0.0
    return float(dice_term), dp, onehot


def loss_and_grad(m: SegModel, x: np.ndarray, labels: np.ndarray) -> Tuple[LossValue, np.ndarray]:
    x = np.asarray(x)
    labels = np.asarray(labels)
    if labels.shape != x.shape:
        raise ValueError(f"label shape {labels.shape} != input shape {x.shape}")
    if labels.min() < 0 or labels.max() >= m.n_classes:
        raise ValueError(f"labels must lie in [0, {m.n_classes - 1}]")
    logits, c = _logits(m, x)
    logits = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    log_p = logits - log_norm
    probs = np.exp(log_p)

    dice_term, dp, onehot = dice_ce_loss(probs, labels, m.n_classes)
    n_vox = labels.size
    ce_term = float(-(log_p * onehot).sum() / n_vox)

    dlogits = probs * (dp - (probs * dp).sum(axis=-1, keepdims=True))
    dlogits += (probs - onehot) / n_vox

    p = m.unpack()
    C = m.n_classes
    dw3 = c.a2.reshape(-1, HIDDEN).T @ dlogits.reshape(-1, C)
    db3 = dlogits.reshape(-1, C).sum(axis=0)
    dz2 = (dlogits @ p["w3"].T) * (c.z2 > 0)
    db2 = dz2.reshape(-1, HIDDEN).sum(axis=0)
    dw2, da1 = _conv_backward(c.a1, p["w2"], dz2, need_dx=True)
    dz1 = da1 * (c.z1 > 0)
    db1 = dz1.reshape(-1, HIDDEN).sum(axis=0)
    dw1, _ = _conv_backward(c.x, p["w1"], dz1, need_dx=False)

    grad = np.concatenate([g.ravel() for g in (dw1, db1, dw2, db2, dw3, db3)]).astype(m.params.dtype)
    return LossValue(dice_term + ce_term, dice_term, ce_term), grad


def sgd_step(m: SegModel, grad: np.ndarray, lr: float) -> SegModel:
    grad = np.asarray(grad)
    if grad.shape != m.params.shape:
        raise ValueError(f"gradient length {grad.shape} != params length {m.params.shape}")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return SegModel((m.params - lr * grad).astype(m.params.dtype), m.n_classes)


# -- checkpoints -----------------------------------------------------------

def model_to_bytes(m: SegModel) -> bytes:
    head = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, m.n_classes, m.params.size)
    return head + m.params.astype("<f4").tobytes()


def model_from_bytes(buf: bytes) -> SegModel:
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, n_classes, count = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(buf) != _CKPT_HEAD.size + 4 * count:
        raise FormatError(f"expected {_CKPT_HEAD.size + 4 * count} bytes, got {len(buf)}")
    if count != n_params(n_classes):
        raise FormatError(f"param count {count} inconsistent with C={n_classes}")
    params = np.frombuffer(buf, dtype="<f4", offset=_CKPT_HEAD.size).astype(np.float32)
    return SegModel(params, n_classes)


def model_size_bytes(m: SegModel) -> int:
    return _CKPT_HEAD.size + 4 * m.params.size


def save_model(path, m: SegModel) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path) -> SegModel:
    return model_from_bytes(Path(path).read_bytes())
