"""Differentiable tensor operations, gradient checking and checkpoint I/O.

The operator basis is backed by torch (CPU); gradients come from its
reverse-mode autograd.  A DiffTensor is simply a torch.Tensor: `shape` /
`grad` / `grad_fn` map onto the fields named in the module contract.
Two precisions are used throughout the project: float64 for property and
gradient tests, float32 for training throughput.

The checkpoint format (shared by model weights, optimizer state and
persisted scenes) is a flat named-tensor container:

    magic 'GIBR' | u32 version | u32 tensor count
    per tensor: u32 name length | name (UTF-8) | u32 rank | u64 dims...
                | float32 payload

all little-endian, tensors ordered by name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

DiffTensor = torch.Tensor

TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32

CHECKPOINT_MAGIC = b"GIBR"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable or incompatible checkpoint files."""


def dtype_for(precision: str) -> torch.dtype:
    if precision == "f64":
        return TEST_DTYPE
    if precision == "f32":
        return TRAIN_DTYPE
    raise ValueError(f"unknown precision {precision!r} (expected 'f32' or 'f64')")


def tensor(data, dtype=TEST_DTYPE, requires_grad=False) -> DiffTensor:
    return torch.as_tensor(np.asarray(data), dtype=dtype).clone().requires_grad_(requires_grad)


def _require_same_shape(a: DiffTensor, b: DiffTensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# --- elementwise / linear-algebra basis ------------------------------------

def add(a, b):
    _require_same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _require_same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    _require_same_shape(a, b, "mul")
    return a * b


def div(a, b):
    _require_same_shape(a, b, "div")
    return a / b


def exp(a):
    return torch.exp(a)


def log(a):
    return torch.log(a)


def sigmoid(a):
    return torch.sigmoid(a)


def softplus(a):
    return torch.nn.functional.softplus(a)


def relu(a):
    return torch.relu(a)


def gelu(a):
    return torch.nn.functional.gelu(a)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.shape[-3] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input channels {tuple(x.shape)} do not match kernel {tuple(weight.shape)}"
        )
    return torch.nn.functional.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0):
    return torch.nn.functional.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of an (..., C, H, W) tensor."""
    return torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")


def group_norm(x, groups, weight=None, bias=None, eps=1e-5):
    return torch.nn.functional.group_norm(x, groups, weight, bias, eps)


def instance_norm(x, weight=None, bias=None, eps=1e-5):
    return torch.nn.functional.group_norm(x, x.shape[-3], weight, bias, eps)


def softmax(a, dim=-1):
    return torch.softmax(a, dim=dim)


def max_reduce(a, dim=0):
    """Max over one dimension with argument tracking.

    Ties route the gradient to the lowest index: the result is built with
    gather() on the argmax, so backward touches exactly one input element
    per output element.
    """
    idx = torch.argmax(a, dim=dim, keepdim=True)
    values = torch.gather(a, dim, idx)
    return values.squeeze(dim), idx.squeeze(dim)


def sum_reduce(a, dim=None):
    return a.sum() if dim is None else a.sum(dim=dim)


def mean_reduce(a, dim=None):
    return a.mean() if dim is None else a.mean(dim=dim)


def concat(parts, dim=0):
    return torch.cat(list(parts), dim=dim)


def slice_along(a, dim, start, length):
    return a.narrow(dim, start, length)


def where(cond, a, b):
    return torch.where(cond, a, b)


def bilinear_interpolate(plane: DiffTensor, x, y, wrap_x: bool = False) -> DiffTensor:
    """Sample a (C, H, W) feature plane at continuous positions.

    Coordinates are in texel units with texel (row i, col j) centered at
    (x=j, y=i).  Out-of-range coordinates are clamped to the border texels;
    with `wrap_x` the x axis instead wraps around (for equirectangular
    planes, x in [0, W)).

    Returns an (N, C) tensor; gradients flow into `plane`.
    """
    if plane.ndim != 3:
        raise ValueError(f"bilinear_interpolate: expected (C, H, W) plane, got {tuple(plane.shape)}")
    C, H, W = plane.shape
    x = torch.as_tensor(x, dtype=plane.dtype).reshape(-1)
    y = torch.as_tensor(y, dtype=plane.dtype).reshape(-1)
    _require_same_shape(x, y, "bilinear_interpolate coords")

    if wrap_x:
        x = torch.remainder(x, W)
        x0 = torch.floor(x)
        fx = x - x0
        x0 = x0.long() % W
        x1 = (x0 + 1) % W
    else:
        x = x.clamp(0.0, W - 1.0)
        x0 = torch.floor(x).long().clamp(0, W - 2) if W > 1 else torch.zeros_like(x, dtype=torch.long)
        fx = (x - x0).clamp(0.0, 1.0)
        x1 = (x0 + 1).clamp(0, W - 1)
    y = y.clamp(0.0, H - 1.0)
    y0 = torch.floor(y).long().clamp(0, H - 2) if H > 1 else torch.zeros_like(y, dtype=torch.long)
    fy = (y - y0).clamp(0.0, 1.0)
    y1 = (y0 + 1).clamp(0, H - 1)

    flat = plane.reshape(C, H * W)

    def take(iy, ix):
        idx = (iy * W + ix).unsqueeze(0).expand(C, -1)
        return torch.gather(flat, 1, idx)  # (C, N)

    fx = fx.unsqueeze(0)
    fy = fy.unsqueeze(0)
    out = (
        take(y0, x0) * (1 - fx) * (1 - fy)
        + take(y0, x1) * fx * (1 - fy)
        + take(y1, x0) * (1 - fx) * fy
        + take(y1, x1) * fx * fy
    )
    return out.transpose(0, 1)  # (N, C)


# --- backward & gradient checking -------------------------------------------

def backward(loss: DiffTensor):
    """Reverse-mode pass from a scalar loss; grads accumulate on leaves."""
    if loss.numel() != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward(retain_graph=False)


def zero_grad(tensors):
    for t in tensors:
        if t.grad is not None:
            t.grad.detach_()
            t.grad.zero_()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    failing: list = field(default_factory=list)  # (flat index, analytic, numeric)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "OK" if self.ok else f"FAIL ({len(self.failing)} elements)"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tol:g})"


def grad_check(f, x: DiffTensor, step: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    The numeric side evaluates f twice per element of `x` at x +- step; the
    per-element error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = (
        x.grad.detach().clone().reshape(-1)
        if x.grad is not None
        else torch.zeros(x.numel(), dtype=x.dtype)
    )

    numeric = torch.zeros_like(analytic)
    probe = x.detach().clone()
    flat = probe.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(f(probe))
            flat[i] = orig - step
            f_minus = float(f(probe))
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)

    denom = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    rel = (analytic - numeric).abs() / denom
    failing = [
        (int(i), float(analytic[i]), float(numeric[i]))
        for i in torch.nonzero(rel >= tol).reshape(-1)
    ]
    return GradCheckReport(float(rel.max()) if rel.numel() else 0.0, tol, failing)


# --- checkpoint serialization ------------------------------------------------

def save_tensors(path, tensors: dict):
    """Write a name->tensor mapping in the GIBR checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    """Read a GIBR checkpoint into a name -> float32 torch.Tensor dict."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a GIBR checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def encode_uint(value: int) -> np.ndarray:
    """Encode a non-negative integer exactly as four float32 u16 chunks."""
    if value < 0 or value >= 1 << 64:
        raise ValueError(f"cannot encode {value} as uint64")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def decode_uint(arr) -> int:
    chunks = np.asarray(arr).reshape(4).astype(np.uint64)
    return int(sum(int(c) << (16 * i) for i, c in enumerate(chunks)))
