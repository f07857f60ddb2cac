"""Deterministic CPU tensor ops with analytic gradients, plus the ADAM optimizer.

Tensors are C-contiguous float64 ``numpy`` arrays of shape (H, W, C): row-major
with the channel axis fastest. All ops are pure functions of their inputs; the
only mutable state is :class:`AdamState`, which is touched exclusively by
:func:`adam_step`.

Convolutions are stride-1 with zero padding, so spatial dims are preserved.
They are computed as one batched matmul per kernel tap over strided views of
the padded input, which avoids materializing im2col buffers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

# Kernel-tap matmuls release the GIL, so a fixed two-way split with ordered
# accumulation uses a second core while staying bit-deterministic.
_WORKERS = min(2, os.cpu_count() or 1)
_POOL = ThreadPoolExecutor(max_workers=1) if _WORKERS > 1 else None


class NonFiniteError(ValueError):
    """A tensor operation produced or received NaN/Inf values."""


def _assert_finite(arr: np.ndarray, what: str) -> None:
    # One fused reduction pass; NaN/Inf in the data poisons the sum.
    if not np.isfinite(np.sum(arr)):
        bad = np.count_nonzero(~np.isfinite(arr))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) of {arr.size}")


def as_tensor(values, channels: int | None = None) -> np.ndarray:
    """Coerce to a float64 (H, W, C) tensor and validate the invariants."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected (H, W, C) with positive dims, got {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[2]}")
    _assert_finite(arr, "tensor")
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# convolution


def _check_conv_args(x: np.ndarray, kernel: np.ndarray) -> None:
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
    kh, kw = kernel.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if x.ndim != 3 or x.shape[2] != kernel.shape[2]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[2] if x.ndim == 3 else '?'}, "
            f"kernel expects {kernel.shape[2]}"
        )


def _zero_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # Hand-rolled np.pad: fill only the border strips instead of zeroing it all.
    h, w, c = x.shape
    out = np.empty((h + 2 * ph, w + 2 * pw, c))
    out[ph : ph + h, pw : pw + w, :] = x
    out[:ph, :, :] = 0.0
    out[ph + h :, :, :] = 0.0
    out[ph : ph + h, :pw, :] = 0.0
    out[ph : ph + h, pw + w :, :] = 0.0
    return out


def _tap_accumulate(xpad: np.ndarray, taps, h: int, w: int, cout: int) -> np.ndarray:
    """Sum of slice@kernel products over kernel taps, in fixed tap order."""
    out = np.zeros((h, w, cout))
    tmp = np.empty((h, w, cout))
    for ty, tx, mat in taps:
        np.matmul(xpad[ty : ty + h, tx : tx + w, :], mat, out=tmp)
        out += tmp
    return out


def _tap_sum(xpad: np.ndarray, taps, h: int, w: int, cout: int) -> np.ndarray:
    if _POOL is None or len(taps) < 8 or h * w * cout < 65536:
        return _tap_accumulate(xpad, taps, h, w, cout)
    half = len(taps) // 2
    future = _POOL.submit(_tap_accumulate, xpad, taps[:half], h, w, cout)
    back = _tap_accumulate(xpad, taps[half:], h, w, cout)
    return future.result() + back


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 correlation; output keeps the input's spatial dims."""
    _check_conv_args(x, kernel)
    kh, kw, _, cout = kernel.shape
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    h, w = x.shape[:2]
    xpad = _zero_pad(x, kh // 2, kw // 2)
    taps = [(ty, tx, kernel[ty, tx]) for ty in range(kh) for tx in range(kw)]
    out = _tap_sum(xpad, taps, h, w, cout)
    out += bias
    _assert_finite(out, "conv2d output")
    return out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, kernel, bias) given d(loss)/d(output)."""
    _check_conv_args(x, kernel)
    kh, kw, cin, cout = kernel.shape
    h, w = x.shape[:2]
    if grad_out.shape != (h, w, cout):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(h, w, cout)}")
    ph, pw = kh // 2, kw // 2
    xpad = _zero_pad(x, ph, pw)

    grad_k = np.empty_like(kernel)

    def _fill_grad_k(tap_list) -> None:
        for ty, tx in tap_list:
            sl = xpad[ty : ty + h, tx : tx + w, :]
            # (H, Cin, W) @ (H, W, Cout) batched over rows, then summed.
            grad_k[ty, tx] = np.matmul(sl.transpose(0, 2, 1), grad_out).sum(axis=0)

    all_taps = [(ty, tx) for ty in range(kh) for tx in range(kw)]
    if _POOL is not None and len(all_taps) >= 8 and h * w * cin >= 65536:
        half = len(all_taps) // 2
        future = _POOL.submit(_fill_grad_k, all_taps[:half])
        _fill_grad_k(all_taps[half:])
        future.result()
    else:
        _fill_grad_k(all_taps)
    grad_b = grad_out.sum(axis=(0, 1))

    grad_x = None
    if need_input_grad:
        # Correlation of the output gradient with the spatially flipped,
        # channel-swapped kernel: same tap-matmul pattern as the forward pass.
        gpad = _zero_pad(grad_out, ph, pw)
        taps = [
            (ty, tx, np.ascontiguousarray(kernel[kh - 1 - ty, kw - 1 - tx].T))
            for ty in range(kh)
            for tx in range(kw)
        ]
        grad_x = _tap_sum(gpad, taps, h, w, cin)
    return grad_x, grad_k, grad_b


# ---------------------------------------------------------------------------
# ReLU


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Pass-through where the input was strictly positive, zero elsewhere.
    return np.where(x > 0.0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# 2x2 max pooling / unpooling


@dataclass(frozen=True)
class PoolSwitches:
    """Argmax positions of a 2x2 max-pool, one offset in {0,1,2,3} per cell.

    Offsets index the cell positions (top-left, top-right, bottom-left,
    bottom-right). ``in_height``/``in_width`` are the pre-pad input dims so the
    unpooling side can crop replicate padding added for odd inputs.
    """

    offsets: np.ndarray  # (H/2 ceil, W/2 ceil, C) uint8
    in_height: int
    in_width: int

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return self.offsets.shape


def _pad_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    if h % 2 == 0 and w % 2 == 0:
        return x
    return np.pad(x, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")


def _cells(x: np.ndarray) -> np.ndarray:
    """View (H, W, C) as (H/2, W/2, 4, C) cells; offset order matches switches."""
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(
        h // 2, w // 2, 4, c
    )


def max_pool_2x2(x: np.ndarray) -> tuple[np.ndarray, PoolSwitches]:
    """2x2 max pooling. Odd dims are edge-replicated first; ties pick the
    smallest offset (np.argmax keeps the first maximum)."""
    h, w, _ = x.shape
    cells = _cells(_pad_even(x))
    offsets = cells.argmax(axis=2).astype(np.uint8)
    out = np.take_along_axis(cells, offsets[:, :, None, :].astype(np.intp), axis=2)[
        :, :, 0, :
    ]
    return np.ascontiguousarray(out), PoolSwitches(offsets, h, w)


def max_pool_2x2_backward(switches: PoolSwitches, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != switches.offsets.shape:
        raise ValueError(
            f"grad shape {grad_out.shape} != pooled shape {switches.offsets.shape}"
        )
    hp, wp, c = switches.offsets.shape
    buf = np.zeros((hp, wp, 4, c))
    np.put_along_axis(
        buf, switches.offsets[:, :, None, :].astype(np.intp), grad_out[:, :, None, :], axis=2
    )
    full = buf.reshape(hp, wp, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * hp, 2 * wp, c)
    # Replicate-padded rows/cols fold their gradient back onto the edge pixel.
    h, w = switches.in_height, switches.in_width
    if 2 * hp > h:
        full[h - 1, :, :] += full[h, :, :]
    if 2 * wp > w:
        full[:, w - 1, :] += full[:, w, :]
    return np.ascontiguousarray(full[:h, :w, :])


def unpool_2x2(x: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    """Scatter each pooled value back to its argmax position, zeros elsewhere."""
    if x.shape != switches.offsets.shape:
        raise ValueError(f"input shape {x.shape} != switch shape {switches.offsets.shape}")
    hp, wp, c = x.shape
    buf = np.zeros((hp, wp, 4, c))
    np.put_along_axis(buf, switches.offsets[:, :, None, :].astype(np.intp), x[:, :, None, :], axis=2)
    full = buf.reshape(hp, wp, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * hp, 2 * wp, c)
    return np.ascontiguousarray(full[: switches.in_height, : switches.in_width, :])


def unpool_2x2_backward(switches: PoolSwitches, grad_out: np.ndarray) -> np.ndarray:
    h, w = switches.in_height, switches.in_width
    if grad_out.shape[:2] != (h, w):
        raise ValueError(f"grad spatial dims {grad_out.shape[:2]} != {(h, w)}")
    cells = _cells(_pad_even_zeros(grad_out))
    return np.ascontiguousarray(
        np.take_along_axis(cells, switches.offsets[:, :, None, :].astype(np.intp), axis=2)[
            :, :, 0, :
        ]
    )


def _pad_even_zeros(x: np.ndarray) -> np.ndarray:
    # Padded positions were created by unpool's crop, so their gradient is zero.
    h, w = x.shape[:2]
    if h % 2 == 0 and w % 2 == 0:
        return x
    return np.pad(x, ((0, h % 2), (0, w % 2), (0, 0)))


# ---------------------------------------------------------------------------
# channel L2 normalization

NORM_EPS = 1e-12


def l2_normalize_channels(x: np.ndarray) -> np.ndarray:
    """Scale each spatial location's channel vector to unit L2 norm.

    Vectors with norm <= NORM_EPS are divided by NORM_EPS instead, so the op
    stays finite at the zero vector while every non-degenerate vector comes out
    exactly unit-norm.
    """
    norms = np.sqrt(np.einsum("hwc,hwc->hw", x, x))[:, :, None]
    out = x / np.maximum(norms, NORM_EPS)
    _assert_finite(out, "l2_normalize_channels output")
    return out


def l2_normalize_channels_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("hwc,hwc->hw", x, x))[:, :, None]
    safe = np.maximum(norms, NORM_EPS)
    y = x / safe
    radial = np.einsum("hwc,hwc->hw", y, grad_out)[:, :, None]
    grad = (grad_out - y * radial) / safe
    # Below the epsilon floor the op is a fixed 1/eps scaling.
    tiny = norms <= NORM_EPS
    if np.any(tiny):
        grad = np.where(tiny, grad_out / NORM_EPS, grad)
    return grad


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    """Per-parameter-set ADAM state. Moments are keyed like the parameter dict."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One ADAM update with bias correction. Mutates params and state in place."""
    if set(grads) != set(params):
        raise ValueError(f"grad keys {sorted(grads)} != param keys {sorted(params)}")
    for key, g in grads.items():
        if g.shape != params[key].shape:
            raise ValueError(f"{key}: grad shape {g.shape} != param shape {params[key].shape}")
        if not np.isfinite(np.sum(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for '{key}' at t={state.t}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for key, g in grads.items():
        m = state.m.setdefault(key, np.zeros_like(params[key]))
        v = state.v.setdefault(key, np.zeros_like(params[key]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[key] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
