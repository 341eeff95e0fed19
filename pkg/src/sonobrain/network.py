"""Parametric 3D encoder-decoder segmentation networks.

A network is described by four hyperparameters: input size ``n`` per axis,
pooling levels ``l``, kernel size ``k``, and first-convolution filters
``f``.  The frozen layout, calibrated against the published parameter
budgets of the eight candidate architectures:

* encoder level i: one conv-BN-ReLU block, then 2x2x2 max pooling; filter
  widths run f, 2f, then 4f for every later convolution;
* decoder level j: nearest upsampling, channel concat with the matching
  encoder level's pre-pool features, then two conv-BN-ReLU blocks at 4f;
* head: 1x1x1 convolution to one channel plus sigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    BadMagicError,
    InvalidSpecError,
    IoFailureError,
    ShapeMismatchError,
    SpecMismatchError,
    TruncatedPayloadError,
)

CKPT_MAGIC = b"NNCK1\n"


@dataclass(frozen=True)
class NetworkSpec:
    """Hyperparameter quadruple: input size n, levels l, kernel k, filters f."""

    n: int
    l: int
    k: int
    f: int

    def __post_init__(self) -> None:
        if self.l < 1 or self.f < 1:
            raise InvalidSpecError(f"l and f must be >= 1, got l={self.l}, f={self.f}")
        if self.k < 1 or self.k % 2 == 0:
            raise InvalidSpecError(f"kernel size must be odd, got k={self.k}")
        if self.n < 1 or self.n % (2**self.l) != 0:
            raise InvalidSpecError(
                f"input size n={self.n} must be divisible by 2^l={2 ** self.l}"
            )


def encoder_widths(spec: NetworkSpec) -> list[int]:
    """Filter counts of the encoder convolutions: f, 2f, then 4f."""
    return [spec.f if i == 0 else 2 * spec.f if i == 1 else 4 * spec.f for i in range(spec.l)]


def _conv_blob(name: str, cin: int, cout: int, k: int):
    yield f"{name}.w", (cout, cin, k, k, k)
    yield f"{name}.b", (cout,)
    yield f"{name}.gamma", (cout,)
    yield f"{name}.beta", (cout,)


def _head_blob(cin: int):
    yield "head.w", (1, cin, 1, 1, 1)
    yield "head.b", (1,)


def param_layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs of every trainable blob."""
    widths = encoder_widths(spec)
    wide = 4 * spec.f
    layout: list[tuple[str, tuple[int, ...]]] = []
    cin = 1
    for i, cout in enumerate(widths):
        layout.extend(_conv_blob(f"enc{i}.conv", cin, cout, spec.k))
        cin = cout
    prev = widths[-1]
    for j in range(spec.l):
        skip = widths[spec.l - 1 - j]
        layout.extend(_conv_blob(f"dec{j}.conv1", prev + skip, wide, spec.k))
        layout.extend(_conv_blob(f"dec{j}.conv2", wide, wide, spec.k))
        prev = wide
    layout.extend(_head_blob(wide))
    return layout


def param_count(spec: NetworkSpec) -> int:
    """Exact number of trainable scalars, computed from the layout alone."""
    return sum(int(np.prod(shape)) for _, shape in param_layout(spec))


class Network:
    """A built network: named parameter tensors plus batch-norm running stats."""

    def __init__(self, spec: NetworkSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.step = 0
        self.params: dict[str, ad.Tensor] = {}
        self.running: dict[str, ad.RunningStats] = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int) -> "Network":
        net = cls(spec, seed)
        rng = np.random.default_rng(seed)
        for name, shape in param_layout(spec):
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            elif name.endswith(".gamma"):
                values = np.ones(shape, dtype=np.float32)
            else:  # biases and betas
                values = np.zeros(shape, dtype=np.float32)
            net.params[name] = ad.Tensor(values, requires_grad=True)
            if name.endswith(".gamma"):
                net.running[name[: -len(".gamma")]] = ad.RunningStats.create(shape[0])
        return net

    # -- parameter plumbing ------------------------------------------------

    @property
    def param_names(self) -> list[str]:
        return [name for name, _ in param_layout(self.spec)]

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].values.ravel() for n in self.param_names])

    def grad_vector(self) -> np.ndarray:
        chunks = []
        for n in self.param_names:
            t = self.params[n]
            g = t.grad if t.grad is not None else np.zeros_like(t.values)
            chunks.append(np.asarray(g, dtype=t.values.dtype).ravel())
        return np.concatenate(chunks)

    def set_param_vector(self, vec: np.ndarray) -> None:
        at = 0
        for n in self.param_names:
            t = self.params[n]
            size = t.values.size
            t.values = vec[at : at + size].reshape(t.values.shape).astype(np.float32)
            at += size
        if at != vec.size:
            raise ShapeMismatchError(f"vector has {vec.size} scalars, layout needs {at}")

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- inference ---------------------------------------------------------

    def _block(self, x: ad.Tensor, name: str, mode: str) -> ad.Tensor:
        p = self.params
        y = ad.conv3d(x, p[f"{name}.w"], p[f"{name}.b"])
        y = ad.batchnorm3d(y, p[f"{name}.gamma"], p[f"{name}.beta"], mode, self.running[name])
        return ad.relu(y)

    def forward(self, x: ad.Tensor, mode: str = "eval") -> ad.Tensor:
        n = self.spec.n
        if x.values.ndim != 5 or x.shape[2:] != (n, n, n):
            raise ShapeMismatchError(
                f"input spatial dims must be {(n, n, n)}, got {x.shape}"
            )
        skips = []
        for i in range(self.spec.l):
            x = self._block(x, f"enc{i}.conv", mode)
            skips.append(x)
            x = ad.maxpool3d(x)
        for j in range(self.spec.l):
            x = ad.upsample_nearest(x)
            x = ad.concat_channels(x, skips[self.spec.l - 1 - j])
            x = self._block(x, f"dec{j}.conv1", mode)
            x = self._block(x, f"dec{j}.conv2", mode)
        x = ad.conv3d(x, self.params["head.w"], self.params["head.b"])
        return ad.sigmoid(x)


def build_network(spec: NetworkSpec, seed: int) -> Network:
    return Network.build(spec, seed)


def forward(net: Network, batch: ad.Tensor, mode: str = "eval") -> ad.Tensor:
    return net.forward(batch, mode)


# ---------------------------------------------------------------------------
# checkpoint IO


def _checkpoint_blobs(net: Network) -> list[tuple[str, np.ndarray]]:
    blobs = [(name, net.params[name].values) for name in net.param_names]
    for bn_name in sorted(net.running):
        blobs.append((f"{bn_name}.run_mean", net.running[bn_name].mean))
        blobs.append((f"{bn_name}.run_var", net.running[bn_name].var))
    return blobs


def save_checkpoint(net: Network, path) -> None:
    """Serialize spec, step, seed, parameters, and running stats (NNCK1)."""
    blobs = _checkpoint_blobs(net)
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            s = net.spec
            fh.write(struct.pack("<4I2QI", s.n, s.l, s.k, s.f, net.step, net.seed, len(blobs)))
            for name, arr in blobs:
                raw = name.encode()
                arr32 = np.ascontiguousarray(arr, dtype="<f4")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr32.ndim))
                fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
                fh.write(arr32.tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> Network:
    """Rebuild a Network from an NNCK1 file; blob names and shapes must
    match the layout implied by the stored spec."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not an NNCK1 checkpoint")
    at = len(CKPT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal at
        if at + n > len(blob):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated at byte {at}")
        chunk = blob[at : at + n]
        at += n
        return chunk

    n, l, k, f, step, seed, blob_count = struct.unpack("<4I2QI", take(36))
    spec = NetworkSpec(n=n, l=l, k=k, f=f)
    net = Network(spec, seed)
    net.step = int(step)
    stored: dict[str, np.ndarray] = {}
    for _ in range(blob_count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        stored[name] = arr
    for name, shape in param_layout(spec):
        if name not in stored or stored[name].shape != shape:
            raise SpecMismatchError(f"{path}: blob {name!r} missing or misshaped")
        net.params[name] = ad.Tensor(stored[name], requires_grad=True)
        if name.endswith(".gamma"):
            bn = name[: -len(".gamma")]
            for suffix in (".run_mean", ".run_var"):
                if bn + suffix not in stored or stored[bn + suffix].shape != shape:
                    raise SpecMismatchError(f"{path}: blob {bn + suffix!r} missing or misshaped")
            net.running[bn] = ad.RunningStats(
                mean=stored[bn + ".run_mean"].copy(), var=stored[bn + ".run_var"].copy()
            )
    return net
