"""Minimal reverse-mode autodiff over numpy for 3D segmentation networks.

Tensors carry ``(batch, channels, depth, height, width)`` arrays plus an
optional gradient buffer.  Each op builds a tape node with a backward
closure; ``backward(loss)`` walks the tape in reverse topological order.
Everything runs in the dtype of its inputs, so gradient checks can be done
in float64 while training stays in float32.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    IndivisibleDimError,
    LengthMismatchError,
    NonDifferentiablePointError,
    ShapeMismatchError,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array with an optional gradient slot and tape linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(values), requires_grad=requires_grad)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; records the tape edge only when gradients are live."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(values)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every tensor on its tape."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _check_5d(x: Tensor, name: str) -> None:
    if x.values.ndim != 5:
        raise ShapeMismatchError(f"{name} must be (b, c, d, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv3d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """3D convolution, stride 1, "same" zero padding of (k - 1) / 2.

    ``weights`` has shape (out_ch, in_ch, k, k, k) with k odd; output
    spatial dims equal input spatial dims.
    """
    _check_5d(x, "conv3d input")
    w = weights.values
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ShapeMismatchError(f"weights must be (out, in, k, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeMismatchError(f"kernel size must be odd, got {k}")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels, weights expect {w.shape[1]}"
        )
    if bias.values.shape != (w.shape[0],):
        raise ShapeMismatchError(
            f"bias must have shape ({w.shape[0]},), got {bias.values.shape}"
        )
    pad = (k - 1) // 2
    xv = x.values
    nb, ci = xv.shape[:2]
    co = w.shape[0]
    spatial = xv.shape[2:]
    cols = _unfold(xv, k, pad)  # (ci * k^3, voxels), cached for the backward GEMMs
    out = _fold(np.matmul(w.reshape(co, -1), cols), nb, co, spatial)
    out += bias.values[None, :, None, None, None]

    def bwd(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3, 4))
        gflat = _flatten_channels(g)
        gw = np.matmul(gflat, cols.T).reshape(co, ci, k, k, k)
        gcols = _unfold(g, k, pad)  # (co * k^3, voxels)
        wback = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(ci, -1)
        gx = _fold(np.matmul(wback, gcols), nb, ci, spatial)
        return gx, gw, gb

    return _node(out, (x, weights, bias), bwd)


def _unfold(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Unfold k^3 "same"-padded windows into (channels * k^3, voxels).

    Pads along z only, so each tap row is one contiguous flat-slice copy of
    the channel volume; y/x window positions that wrapped across rows in the
    flat view are then zeroed in thin margin slabs.
    """
    nb, c, d, h, w = x.shape
    hw = h * w
    # z padding deep enough that every tap's flat offset stays inside bounds
    q = pad + 1 + (pad * (w + 1)) // hw
    xp = np.pad(x, ((0, 0), (0, 0), (q, q), (0, 0), (0, 0)))
    n_vox = d * hw
    out = np.empty((c * k * k * k, nb * n_vox), dtype=x.dtype)
    row = 0
    for ch in range(c):
        flat = xp[:, ch].reshape(nb, -1)
        for dz in range(k):
            base = (dz - pad + q) * hw
            for dy in range(k):
                for dx in range(k):
                    off = base + (dy - pad) * w + (dx - pad)
                    dst = out[row].reshape(nb, d, h, w)
                    np.copyto(dst.reshape(nb, n_vox), flat[:, off : off + n_vox])
                    if dy < pad:
                        dst[:, :, : pad - dy, :] = 0
                    elif dy > pad:
                        dst[:, :, max(0, h - (dy - pad)) :, :] = 0
                    if dx < pad:
                        dst[:, :, :, : pad - dx] = 0
                    elif dx > pad:
                        dst[:, :, :, max(0, w - (dx - pad)) :] = 0
                    row += 1
    return out


def _fold(flat: np.ndarray, nb: int, c: int, spatial: tuple[int, int, int]) -> np.ndarray:
    """Reshape a (c, batch * voxels) GEMM result back to (b, c, d, h, w)."""
    if nb == 1:
        return flat.reshape(1, c, *spatial)
    return np.ascontiguousarray(
        flat.reshape(c, nb, *spatial).transpose(1, 0, 2, 3, 4)
    )


def _flatten_channels(x: np.ndarray) -> np.ndarray:
    """View/copy of (b, c, d, h, w) as (c, b * voxels), matching _unfold order."""
    nb, c = x.shape[:2]
    if nb == 1:
        return x.reshape(c, -1)
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(c, -1)


# ---------------------------------------------------------------------------
# pooling / upsampling


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2; gradient routes to the window argmax
    (ties broken toward the lowest x-fastest linear index)."""
    _check_5d(x, "maxpool3d input")
    b, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise IndivisibleDimError(f"spatial dims {(d, h, w)} not divisible by 2")
    xv = x.values
    # trailing window axes in (dz, dy, dx) order; C-order flattening of the
    # window matches the volume's x-fastest linearization
    blocks = (
        xv.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(b, c, d // 2, h // 2, w // 2, 8)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(b, c, d // 2, h // 2, w // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(b, c, d, h, w)
        )
        return (gx,)

    return _node(out, (x,), bwd)


def upsample_nearest(x: Tensor) -> Tensor:
    """Double each spatial dim by replicating voxels into 2x2x2 blocks."""
    _check_5d(x, "upsample input")
    b, c, d, h, w = x.shape
    out = x.values.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def bwd(g: np.ndarray):
        gx = g.reshape(b, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7))
        return (gx,)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance for eval-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.9) -> "RunningStats":
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


BN_EPS = 1e-5


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    running: RunningStats,
) -> Tensor:
    """Per-channel batch normalization over (batch, d, h, w).

    Train mode normalizes with biased batch statistics (epsilon 1e-5) and
    updates ``running`` in place with momentum 0.9; eval mode normalizes
    with the running statistics.
    """
    _check_5d(x, "batchnorm input")
    c = x.shape[1]
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise ShapeMismatchError(f"gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xv = x.values
    axes = (0, 2, 3, 4)
    if mode == "train":
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = running.momentum
        running.mean[:] = m * running.mean + (1.0 - m) * mu
        running.var[:] = m * running.var + (1.0 - m) * var
    else:
        mu = running.mean.astype(xv.dtype)
        var = running.var.astype(xv.dtype)
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mu[None, :, None, None, None]) * ivar[None, :, None, None, None]
    out = gamma.values[None, :, None, None, None] * xhat
    out += beta.values[None, :, None, None, None]
    n = xv.shape[0] * xv.shape[2] * xv.shape[3] * xv.shape[4]

    def bwd(g: np.ndarray):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.values[None, :, None, None, None]
        if mode == "eval":
            gx = gxhat * ivar[None, :, None, None, None]
            return gx, ggamma, gbeta
        s1 = gxhat.sum(axis=axes)
        s2 = (gxhat * xhat).sum(axis=axes)
        gx = (
            gxhat
            - s1[None, :, None, None, None] / n
            - xhat * s2[None, :, None, None, None] / n
        ) * ivar[None, :, None, None, None]
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# activations / stacking


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    out = np.maximum(x.values, 0)

    def bwd(g: np.ndarray):
        return (g * (x.values > 0),)

    return _node(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs stay strictly inside (0, 1)."""
    xv = x.values
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    # saturation guard: keep the open interval even where float rounding
    # would land exactly on 0 or 1
    tiny = np.finfo(out.dtype).tiny
    np.clip(out, tiny, 1.0 - np.finfo(out.dtype).epsneg, out=out)

    def bwd(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two tensors along the channel axis, a's channels first."""
    _check_5d(a, "concat input a")
    _check_5d(b, "concat input b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(
            f"concat needs equal batch and spatial dims, got {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)

    def bwd(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return _node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# loss

DICE_EPS = 1e-6


def soft_dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps),
    summed over every voxel of the batch."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs target {target.shape}")
    p = pred.values
    t = target.values
    inter = float((p * t).sum())
    a = 2.0 * inter + DICE_EPS
    b = float(p.sum()) + float(t.sum()) + DICE_EPS
    out = np.asarray(1.0 - a / b, dtype=p.dtype)

    def bwd(g: np.ndarray):
        gp = ((a - 2.0 * t * b) / (b * b)) * g
        return gp.astype(p.dtype, copy=False), None

    return _node(out, (pred, target), bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for Adam."""

    step_count: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_params: int, lr: float = 1e-3, dtype=np.float32) -> "AdamState":
        return cls(
            step_count=0,
            m=np.zeros(n_params, dtype=dtype),
            v=np.zeros(n_params, dtype=dtype),
            lr=lr,
        )


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LengthMismatchError(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(
        step_count=t,
        m=m,
        v=v,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_params.astype(params.dtype, copy=False), new_state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    per_input: list[float] = field(default_factory=list)

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def _relu_kink(inputs) -> None:
    if np.any(np.abs(inputs[0].values) <= 1e-5):
        raise NonDifferentiablePointError("relu probed at (or within step of) 0")


def _maxpool_kink(inputs) -> None:
    x = inputs[0].values
    b, c, d, h, w = x.shape
    blocks = (
        x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(-1, 8)
    )
    top2 = np.sort(blocks, axis=-1)[:, -2:]
    if np.any(top2[:, 1] - top2[:, 0] <= 2e-5):
        raise NonDifferentiablePointError("maxpool window has a (near-)tied max")


KINK_CHECKS = {relu: _relu_kink, maxpool3d: _maxpool_kink}


def grad_check(
    op,
    inputs,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 7,
) -> GradCheckReport:
    """Compare analytic gradients of ``op`` against central differences.

    ``inputs`` is a sequence of Tensors (all treated as differentiable
    leaves); everything is evaluated in float64.  The op's output is
    reduced to a scalar through a fixed random projection so any output
    shape can be probed.  ``max_probes`` limits the number of coordinates
    differenced per input (seeded random subset); by default every
    coordinate is probed.  Raises NonDifferentiablePointError when the
    sample sits on a known kink or tie of the op.
    """
    checker = KINK_CHECKS.get(op)
    leaves = [Tensor(t.values.astype(np.float64), requires_grad=True) for t in inputs]
    if checker is not None:
        checker(leaves)
    rng = np.random.default_rng(seed)
    out0 = op(*leaves)
    proj = rng.standard_normal(out0.values.shape)

    def scalar_at(arrays: list[np.ndarray]) -> float:
        with no_grad():
            res = op(*[Tensor(a) for a in arrays])
        return float((res.values * proj).sum())

    loss = _node(
        np.asarray((out0.values * proj).sum()),
        (out0,),
        lambda g: (g * proj,),
    )
    backward(loss)

    base = [leaf.values.copy() for leaf in leaves]
    max_rel = 0.0
    per_input = []
    for i, leaf in enumerate(leaves):
        analytic = (
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
        ).reshape(-1)
        flat = base[i].reshape(-1)
        if max_probes is None or flat.size <= max_probes:
            probes = np.arange(flat.size)
        else:
            probes = rng.choice(flat.size, size=max_probes, replace=False)
        rel = 0.0
        for j in probes:
            orig = flat[j]
            flat[j] = orig + step
            up = scalar_at(base)
            flat[j] = orig - step
            down = scalar_at(base)
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(analytic[j]), abs(numeric), 1e-6)
            rel = max(rel, abs(analytic[j] - numeric) / denom)
        per_input.append(rel)
        max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_error=max_rel, per_input=per_input)
