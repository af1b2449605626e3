"""Resize operators for patch-embedding weights.

Builds dense linear maps between flattened patch spaces: the bilinear
interpolation matrix B (resampling a patch from one shape to another) and
its pseudoinverse counterpart P = pinv(B^T), which resizes embedding
weights so that patch/weight inner products are preserved exactly under
upsampling and least-squares-optimally under downsampling.

Both maps are separable: B factors as a Kronecker product of 1-D
interpolation matrices along the frequency and time axes, and the
Moore-Penrose pseudoinverse of a Kronecker product is the Kronecker
product of the factor pseudoinverses.  Operators are therefore built
per axis, which keeps even the largest patch pairs cheap to construct.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

# Relative singular-value cutoff for the pseudoinverse.  The bilinear
# factors are well conditioned at the patch sizes used here, so this
# never truncates in practice; it only guards degenerate inputs.
PINV_RTOL = 1e-6


class ResizeKind(Enum):
    BILINEAR = "bl"
    PSEUDO_INVERSE = "pi"


class AxisMode(Enum):
    FULL = "full"
    TIME_ONLY = "time"
    FREQ_ONLY = "freq"


@dataclass(frozen=True, order=True)
class PatchShape:
    """Patch extent in frequency bins x time frames."""

    freq: int
    time: int

    def __post_init__(self):
        if self.freq < 1 or self.time < 1:
            raise ValueError(f"patch shape must be positive, got {self}")

    @property
    def size(self) -> int:
        return self.freq * self.time

    @classmethod
    def square(cls, p: int) -> "PatchShape":
        return cls(p, p)

    def __str__(self) -> str:
        return f"{self.freq}x{self.time}"


@dataclass(frozen=True)
class ResizeOperator:
    """Dense linear map from flattened source patches to target patches.

    ``matrix`` has shape (target.size, source.size) and acts on row-major
    (frequency-major) flattened patches.  Instances are immutable; the
    matrix is marked read-only at construction.
    """

    source: PatchShape
    target: PatchShape
    matrix: np.ndarray
    kind: ResizeKind

    def __post_init__(self):
        expect = (self.target.size, self.source.size)
        if self.matrix.shape != expect:
            raise ValueError(f"operator matrix {self.matrix.shape} != {expect}")
        self.matrix.setflags(write=False)


def bilinear_matrix_1d(n_src: int, n_dst: int) -> np.ndarray:
    """1-D bilinear interpolation matrix (n_dst, n_src), align-corners.

    Output sample i reads source position i*(n_src-1)/(n_dst-1), so the
    endpoints of source and target grids coincide and same-size resizing
    is the exact identity.  Every row sums to 1.
    """
    if n_src < 1 or n_dst < 1:
        raise ValueError("grid sizes must be positive")
    mat = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        pos = i * (n_src - 1) / (n_dst - 1) if n_dst > 1 else 0.0
        lo = int(np.floor(pos))
        hi = min(lo + 1, n_src - 1)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def _axis_factors(source: PatchShape, target: PatchShape,
                  axis_mode: AxisMode) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis bilinear factors; the frozen axis gets an exact identity."""
    if axis_mode is AxisMode.TIME_ONLY:
        if source.freq != target.freq:
            raise ValueError(
                f"time-only resize cannot change frequency axis: {source} -> {target}")
        return np.eye(source.freq), bilinear_matrix_1d(source.time, target.time)
    if axis_mode is AxisMode.FREQ_ONLY:
        if source.time != target.time:
            raise ValueError(
                f"freq-only resize cannot change time axis: {source} -> {target}")
        return bilinear_matrix_1d(source.freq, target.freq), np.eye(source.time)
    return (bilinear_matrix_1d(source.freq, target.freq),
            bilinear_matrix_1d(source.time, target.time))


def build_operator(source: PatchShape, target: PatchShape, kind: ResizeKind,
                   axis_mode: AxisMode = AxisMode.FULL) -> ResizeOperator:
    """General operator constructor covering both kinds and axis modes."""
    if source == target:
        # Same-size resizing is the identity for both kinds; returning the
        # exact identity keeps degenerate configurations bit-reproducible.
        _axis_factors(source, target, axis_mode)  # still validate axis preconditions
        return ResizeOperator(source, target, np.eye(source.size), kind)
    b_freq, b_time = _axis_factors(source, target, axis_mode)
    if kind is ResizeKind.BILINEAR:
        matrix = np.kron(b_freq, b_time)
    else:
        # pinv of a Kronecker product factors; LinAlgError from a
        # non-converging SVD propagates as a hard failure.
        matrix = np.kron(np.linalg.pinv(b_freq.T, rcond=PINV_RTOL),
                         np.linalg.pinv(b_time.T, rcond=PINV_RTOL))
    return ResizeOperator(source, target, matrix, kind)


def build_bilinear(source: PatchShape, target: PatchShape) -> ResizeOperator:
    """Matrix form of separable bilinear resampling from source to target."""
    return build_operator(source, target, ResizeKind.BILINEAR)


def build_pi_resize(source: PatchShape, target: PatchShape) -> ResizeOperator:
    """Pseudoinverse resize: P = pinv(B^T) for B = build_bilinear(...)."""
    return build_operator(source, target, ResizeKind.PSEUDO_INVERSE)


def build_axis_restricted(source: PatchShape, target: PatchShape,
                          axis: AxisMode) -> ResizeOperator:
    """PI-resize acting on one axis only; the other axis must not change."""
    if axis is AxisMode.FULL:
        raise ValueError("axis must be TIME_ONLY or FREQ_ONLY")
    return build_operator(source, target, ResizeKind.PSEUDO_INVERSE, axis)


def apply(op: ResizeOperator, stack: np.ndarray) -> np.ndarray:
    """Apply the operator to a stack of flattened patches.

    ``stack`` has shape (..., source.size); each slice is mapped through
    the operator matrix.  The result keeps the input dtype.
    """
    if stack.shape[-1] != op.source.size:
        raise ValueError(
            f"stack trailing dim {stack.shape[-1]} != source size {op.source.size}")
    mat = op.matrix.astype(stack.dtype, copy=False)
    return stack @ mat.T


def apply_adjoint(op: ResizeOperator, stack: np.ndarray) -> np.ndarray:
    """Apply the transpose map; propagates gradients back to source space."""
    if stack.shape[-1] != op.target.size:
        raise ValueError(
            f"stack trailing dim {stack.shape[-1]} != target size {op.target.size}")
    mat = op.matrix.astype(stack.dtype, copy=False)
    return stack @ mat


def dump_matrix_csv(op: ResizeOperator, path) -> None:
    """Debug dump of the operator matrix, row-major, full-precision decimal."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in op.matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


class OperatorCache:
    """Memoizes constructed operators keyed by (source, target, kind, axis).

    Operators are immutable, so sharing them across threads is safe; the
    lock only serializes cache fills.
    """

    def __init__(self):
        self._ops: dict[tuple, ResizeOperator] = {}
        self._lock = threading.Lock()

    def get(self, source: PatchShape, target: PatchShape, kind: ResizeKind,
            axis_mode: AxisMode = AxisMode.FULL) -> ResizeOperator:
        key = (source, target, kind, axis_mode)
        op = self._ops.get(key)
        if op is None:
            op = build_operator(source, target, kind, axis_mode)
            with self._lock:
                self._ops.setdefault(key, op)
                op = self._ops[key]
        return op

    def precompute(self, base: PatchShape, shapes, kind: ResizeKind,
                   axis_mode: AxisMode = AxisMode.FULL) -> None:
        """Build base->shape operators for every shape up front."""
        for shape in shapes:
            self.get(base, shape, kind, axis_mode)

    def __len__(self) -> int:
        return len(self._ops)
