"""Spectrogram tokenization and patch embedding at arbitrary patch shapes.

A spectrogram is zero-padded to the next patch multiple, split into
non-overlapping patches (frequency-major order), and embedded by inner
products with the patch-embedding weights.  Weights live in a single
base-shape parameterization; any other patch shape is served by resizing
the weights through a fixed linear operator and the positional grid
through bilinear interpolation.  Both resizes expose their adjoints so
gradients flow back into the base parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .resize import (
    AxisMode,
    OperatorCache,
    PatchShape,
    ResizeKind,
    apply,
    apply_adjoint,
    bilinear_matrix_1d,
)


@dataclass
class Spectrogram:
    """Log-mel magnitudes (freq bins x time frames) with a label.

    ``label`` is an integer class index for one-hot datasets or a
    {0,1} vector for multi-hot datasets.
    """

    data: np.ndarray
    label: object

    def __post_init__(self):
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"spectrogram must be 2-D and non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectrogram contains non-finite values")


@dataclass
class EmbeddingBank:
    """The only patch-size-dependent parameters.

    omega: (d, base_freq, base_time) embedding filters.
    pos:   (h0, w0, d) positional grid for the canonical input size.
    cls:   (d,) learned sequence-initial token.
    """

    omega: np.ndarray
    base_shape: PatchShape
    pos: np.ndarray
    cls: np.ndarray
    canonical_input: tuple[int, int]

    def __post_init__(self):
        d = self.omega.shape[0]
        if self.omega.shape != (d, self.base_shape.freq, self.base_shape.time):
            raise ValueError(f"omega shape {self.omega.shape} does not match base {self.base_shape}")
        h0, w0 = grid_dims(*self.canonical_input, self.base_shape)
        if self.pos.shape != (h0, w0, d):
            raise ValueError(f"pos grid {self.pos.shape} != canonical grid {(h0, w0, d)}")
        if self.cls.shape != (d,):
            raise ValueError(f"cls shape {self.cls.shape} != ({d},)")
        for name, arr in (("omega", self.omega), ("pos", self.pos), ("cls", self.cls)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in bank.{name}")

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    @property
    def dtype(self):
        return self.omega.dtype

    def copy(self) -> "EmbeddingBank":
        return EmbeddingBank(self.omega.copy(), self.base_shape, self.pos.copy(),
                             self.cls.copy(), self.canonical_input)

    def astype(self, dtype) -> "EmbeddingBank":
        return EmbeddingBank(self.omega.astype(dtype), self.base_shape,
                             self.pos.astype(dtype), self.cls.astype(dtype),
                             self.canonical_input)


@dataclass
class TokenSequence:
    """CLS token plus h*w patch tokens of width d (CLS first)."""

    tokens: np.ndarray
    grid: tuple[int, int]
    patch_shape: PatchShape


@dataclass
class BankGrads:
    """Gradients mirroring EmbeddingBank's trainable arrays."""

    omega: np.ndarray
    pos: np.ndarray
    cls: np.ndarray


def init_bank(d: int, base_shape: PatchShape, canonical_input: tuple[int, int],
              rng: np.random.Generator, dtype=np.float32) -> EmbeddingBank:
    """Randomly initialized bank; filters scaled by 1/sqrt(patch area)."""
    scale = 1.0 / math.sqrt(base_shape.size)
    omega = (rng.standard_normal((d, base_shape.freq, base_shape.time)) * scale)
    h0, w0 = grid_dims(*canonical_input, base_shape)
    pos = rng.standard_normal((h0, w0, d)) * 0.02
    cls = rng.standard_normal(d) * 0.02
    return EmbeddingBank(omega.astype(dtype), base_shape, pos.astype(dtype),
                         cls.astype(dtype), canonical_input)


def grid_dims(f: int, t: int, shape: PatchShape) -> tuple[int, int]:
    """Token grid (h, w) after padding f x t up to patch multiples."""
    return -(-f // shape.freq), -(-t // shape.time)


def patchify(data: np.ndarray, shape: PatchShape) -> tuple[np.ndarray, tuple[int, int]]:
    """Split one spectrogram (or a (B, f, t) batch) into flattened patches.

    Zero-pads on the right/bottom to the next multiple of the patch shape,
    then tiles row-major: patch i covers grid cell (i // w, i % w).
    Returns (patches, (h, w)) with patches shaped (..., h*w, freq*time).
    """
    single = data.ndim == 2
    if single:
        data = data[None]
    b, f, t = data.shape
    h, w = grid_dims(f, t, shape)
    fp, tp = h * shape.freq, w * shape.time
    if (fp, tp) != (f, t):
        padded = np.zeros((b, fp, tp), dtype=data.dtype)
        padded[:, :f, :t] = data
        data = padded
    patches = (data.reshape(b, h, shape.freq, w, shape.time)
               .transpose(0, 1, 3, 2, 4)
               .reshape(b, h * w, shape.size))
    return (patches[0] if single else patches), (h, w)


def _pos_factors(old_grid, new_grid, dtype):
    bh = bilinear_matrix_1d(old_grid[0], new_grid[0]).astype(dtype)
    bw = bilinear_matrix_1d(old_grid[1], new_grid[1]).astype(dtype)
    return bh, bw


def resize_positions(pos: np.ndarray, new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample an (h0, w0, d) positional grid to (h, w, d)."""
    h0, w0, _ = pos.shape
    if tuple(new_grid) == (h0, w0):
        return pos
    bh, bw = _pos_factors((h0, w0), new_grid, pos.dtype)
    out = np.tensordot(bh, pos, axes=(1, 0))          # (h, w0, d)
    out = np.tensordot(out, bw, axes=(1, 1))          # (h, d, w)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def resize_positions_adjoint(grad: np.ndarray, old_grid: tuple[int, int]) -> np.ndarray:
    """Adjoint of resize_positions: maps an (h, w, d) gradient to (h0, w0, d)."""
    h, w, _ = grad.shape
    if tuple(old_grid) == (h, w):
        return grad
    bh, bw = _pos_factors(old_grid, (h, w), grad.dtype)
    out = np.tensordot(bh.T, grad, axes=(1, 0))       # (h0, w, d)
    out = np.tensordot(out, bw, axes=(1, 0))          # (h0, d, w0)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


@dataclass
class EmbedCache:
    """Intermediates retained for the backward pass of one embed call."""

    patches: np.ndarray             # (B, hw, patch_size)
    grid: tuple[int, int]
    op: object                      # ResizeOperator or None when at base shape
    pos_grid: tuple[int, int]
    base_shape: PatchShape
    d: int


def _resolve_op(bank: EmbeddingBank, shape: PatchShape, resize_kind: ResizeKind,
                axis_mode: AxisMode, ops: OperatorCache | None):
    if shape == bank.base_shape:
        return None
    if axis_mode is AxisMode.TIME_ONLY and shape.freq != bank.base_shape.freq:
        raise ValueError(
            f"time-only mode cannot change freq axis: base {bank.base_shape}, requested {shape}")
    cache = ops if ops is not None else OperatorCache()
    return cache.get(bank.base_shape, shape, resize_kind, axis_mode)


def resized_weights(bank: EmbeddingBank, shape: PatchShape,
                    resize_kind: ResizeKind = ResizeKind.PSEUDO_INVERSE,
                    axis_mode: AxisMode = AxisMode.FULL,
                    ops: OperatorCache | None = None) -> np.ndarray:
    """Flattened embedding filters (d, shape.size) for the requested shape."""
    op = _resolve_op(bank, shape, resize_kind, axis_mode, ops)
    omega_flat = bank.omega.reshape(bank.d, -1)
    return omega_flat if op is None else apply(op, omega_flat)


def embed_batch(data: np.ndarray, bank: EmbeddingBank, shape: PatchShape,
                resize_kind: ResizeKind = ResizeKind.PSEUDO_INVERSE,
                axis_mode: AxisMode = AxisMode.FULL,
                ops: OperatorCache | None = None,
                ) -> tuple[np.ndarray, tuple[int, int], EmbedCache]:
    """Tokenize and embed a (B, f, t) batch at one patch shape.

    Returns (tokens (B, 1+hw, d), grid, cache).  Token 0 is the CLS token
    (no positional addition); patch token i is <x_i, w_hat> + pi_i.
    """
    op = _resolve_op(bank, shape, resize_kind, axis_mode, ops)
    patches, grid = patchify(data.astype(bank.dtype, copy=False), shape)
    omega_flat = bank.omega.reshape(bank.d, -1)
    what = omega_flat if op is None else apply(op, omega_flat)
    e = patches @ what.T                                   # (B, hw, d)
    pos = resize_positions(bank.pos, grid)
    tokens = np.empty((data.shape[0], 1 + grid[0] * grid[1], bank.d), dtype=bank.dtype)
    tokens[:, 0] = bank.cls
    tokens[:, 1:] = e + pos.reshape(-1, bank.d)
    cache = EmbedCache(patches, grid, op, bank.pos.shape[:2], bank.base_shape, bank.d)
    return tokens, grid, cache


def embed(spec: Spectrogram, bank: EmbeddingBank, shape: PatchShape,
          resize_kind: ResizeKind = ResizeKind.PSEUDO_INVERSE,
          axis_mode: AxisMode = AxisMode.FULL,
          ops: OperatorCache | None = None) -> TokenSequence:
    """Embed one spectrogram into a CLS-first token sequence."""
    tokens, grid, _ = embed_batch(spec.data[None], bank, shape, resize_kind,
                                  axis_mode, ops)
    return TokenSequence(tokens[0], grid, shape)


def embed_backward(cache: EmbedCache, token_grads: np.ndarray) -> BankGrads:
    """Pull token gradients back into base bank parameters.

    ``token_grads`` is (B, 1+hw, d), matching the tokens from embed_batch.
    Gradients pass through the fixed resize operators via their adjoints.
    """
    if token_grads.ndim == 2:
        token_grads = token_grads[None]
    cls_grad = token_grads[:, 0].sum(axis=0)
    ge = token_grads[:, 1:, :]
    # e[b,i,k] = sum_s patches[b,i,s] * what[k,s]
    what_grad = np.einsum("bik,bis->ks", ge, cache.patches)
    omega_flat_grad = (what_grad if cache.op is None
                       else apply_adjoint(cache.op, what_grad))
    h, w = cache.grid
    pos_grad = resize_positions_adjoint(
        ge.sum(axis=0).reshape(h, w, cache.d), cache.pos_grid)
    omega_grad = omega_flat_grad.reshape(
        cache.d, cache.base_shape.freq, cache.base_shape.time)
    return BankGrads(omega_grad, pos_grad, cls_grad)


def init_from_fixed(bank_src: EmbeddingBank, base_shape: PatchShape) -> EmbeddingBank:
    """Re-parameterize a bank at a new base patch shape.

    Filters are resized with the pseudoinverse operator and the positional
    grid bilinearly, matching how a fixed-patch model's weights seed a
    flexible one.
    """
    if bank_src.base_shape == base_shape:
        return bank_src.copy()
    from .resize import build_pi_resize

    op = build_pi_resize(bank_src.base_shape, base_shape)
    omega = apply(op, bank_src.omega.reshape(bank_src.d, -1)).reshape(
        bank_src.d, base_shape.freq, base_shape.time).astype(bank_src.dtype)
    new_grid = grid_dims(*bank_src.canonical_input, base_shape)
    pos = resize_positions(bank_src.pos, new_grid).astype(bank_src.dtype)
    return EmbeddingBank(omega, base_shape, pos, bank_src.cls.copy(),
                         bank_src.canonical_input)
