"""Low-level numerical operations: 2-D convolutions, their adjoints and
weight gradients, a moment-based gradient-descent optimizer, and a central
finite-difference oracle.

Array conventions
-----------------
Feature maps are float64, channels last: ``(batch, height, width, channels)``.
Convolution kernels are ``(k, k, c_in, c_out)`` and act as cross-correlation.
"""

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError, TrainingError

ACTIVATIONS = ("relu", "identity")


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def _as_f64(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def apply_activation(x, activation):
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(preact, activation):
    """Derivative of the activation evaluated at the pre-activation.

    relu uses the zero subgradient at the kink.
    """
    if activation == "relu":
        return (preact > 0.0).astype(np.float64)
    if activation == "identity":
        return np.ones_like(preact)
    raise ValueError(f"unknown activation {activation!r}")


def _padding_amount(ksize, padding):
    if padding == "same":
        return (ksize - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def _check_conv_args(x, kernels, bias):
    if x.ndim != 4:
        raise DimensionError(f"feature map must be 4-D (n,h,w,c), got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(
            f"kernels must be (k,k,c_in,c_out) with square window, got {kernels.shape}"
        )
    if kernels.shape[0] % 2 != 1:
        raise DimensionError(f"kernel size must be odd, got {kernels.shape[0]}")
    if bias.ndim != 1:
        raise DimensionError(f"bias must be 1-D per-channel, got shape {bias.shape}")
    _require_finite("input", x)
    _require_finite("kernels", kernels)
    _require_finite("bias", bias)


def conv2d(x, kernels, bias, stride=1, padding="same", activation="relu"):
    """2-D convolution over a batch of feature maps.

    Parameters
    ----------
    x : array, shape (n, h, w, c_in)
    kernels : array, shape (k, k, c_in, c_out), k odd
    bias : array, shape (c_out,)
    stride : int
    padding : "same" or "valid"
    activation : "relu" or "identity"
    """
    x, kernels, bias = _as_f64(x), _as_f64(kernels), _as_f64(bias)
    _check_conv_args(x, kernels, bias)
    if x.shape[3] != kernels.shape[2]:
        raise DimensionError(
            f"input channel axis ({x.shape[3]}) does not match kernel c_in axis "
            f"({kernels.shape[2]})"
        )
    if bias.shape[0] != kernels.shape[3]:
        raise DimensionError(
            f"bias length ({bias.shape[0]}) does not match kernel c_out axis "
            f"({kernels.shape[3]})"
        )
    pad = _padding_amount(kernels.shape[0], padding)
    if x.shape[1] + 2 * pad < kernels.shape[0] or x.shape[2] + 2 * pad < kernels.shape[0]:
        raise DimensionError(
            f"spatial axes {x.shape[1:3]} too small for kernel {kernels.shape[0]} "
            f"with padding={padding!r}"
        )
    y = _kernels.conv2d_forward(x, kernels, stride, pad)
    y += bias
    return apply_activation(y, activation)


def conv2d_transpose(x, kernels, bias, stride=1, output_shape=None,
                     activation="identity", padding="same"):
    """Transposed convolution: the exact adjoint of :func:`conv2d`.

    ``kernels`` is the (k, k, c_out_here, c_in_here) tensor of the mirrored
    forward convolution, so the input must carry ``kernels.shape[3]`` channels
    and the output carries ``kernels.shape[2]``.

    For stride 1, zero bias and identity activation this satisfies
    ``<conv2d(a, K), b> == <a, conv2d_transpose(b, K)>`` for all a, b.
    """
    x, kernels, bias = _as_f64(x), _as_f64(kernels), _as_f64(bias)
    _check_conv_args(x, kernels, bias)
    if x.shape[3] != kernels.shape[3]:
        raise DimensionError(
            f"input channel axis ({x.shape[3]}) does not match kernel c_out axis "
            f"({kernels.shape[3]})"
        )
    if bias.shape[0] != kernels.shape[2]:
        raise DimensionError(
            f"bias length ({bias.shape[0]}) does not match kernel c_in axis "
            f"({kernels.shape[2]})"
        )
    if output_shape is None:
        if stride != 1:
            raise DimensionError("output_shape is required when stride > 1")
        output_shape = (x.shape[1], x.shape[2])
    out_h, out_w = output_shape
    pad = _padding_amount(kernels.shape[0], padding)
    k = kernels.shape[0]
    exp_h = (out_h + 2 * pad - k) // stride + 1
    exp_w = (out_w + 2 * pad - k) // stride + 1
    if (exp_h, exp_w) != (x.shape[1], x.shape[2]):
        raise DimensionError(
            f"output_shape {output_shape} is inconsistent: forward pass would "
            f"produce spatial axes {(exp_h, exp_w)}, input has {x.shape[1:3]}"
        )
    y = _kernels.conv2d_input_grad(x, kernels, stride, pad, out_h, out_w)
    y += bias
    return apply_activation(y, activation)


def conv2d_kernel_grad(x, gy, ksize, stride=1, padding="same"):
    """Gradient of an unactivated conv2d w.r.t. its kernels."""
    x, gy = _as_f64(x), _as_f64(gy)
    pad = _padding_amount(ksize, padding)
    return _kernels.conv2d_kernel_grad(x, gy, ksize, stride, pad)


def conv2d_input_grad(gy, kernels, out_hw, stride=1, padding="same"):
    """Gradient of an unactivated conv2d w.r.t. its input feature map."""
    gy, kernels = _as_f64(gy), _as_f64(kernels)
    pad = _padding_amount(kernels.shape[0], padding)
    return _kernels.conv2d_input_grad(gy, kernels, stride, pad, out_hw[0], out_hw[1])


class Adam:
    """Bias-corrected moment optimizer over a dict of parameter blocks.

    One ``step`` call advances the shared step counter by one and updates
    every block present in ``grads``; blocks are independent, so the update
    does not depend on dict ordering.
    """

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("decay rates must lie in (0, 1)")
        if learning_rate <= 0.0 or eps <= 0.0:
            raise ValueError("learning_rate and eps must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (same keys required)."""
        if set(params) != set(grads):
            raise TrainingError(
                f"parameter/gradient key mismatch: {sorted(set(params) ^ set(grads))}"
            )
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in block {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in params:
            g = grads[name]
            m = self.first_moment.setdefault(name, np.zeros_like(params[name]))
            v = self.second_moment.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            params[name] -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params

    def state_blocks(self):
        """Moment arrays keyed for checkpointing, plus the step counter."""
        blocks = {}
        for name, m in self.first_moment.items():
            blocks[f"m1:{name}"] = m
        for name, v in self.second_moment.items():
            blocks[f"m2:{name}"] = v
        return blocks

    def load_state_blocks(self, blocks, step_count):
        self.step_count = int(step_count)
        self.first_moment = {
            k[3:]: np.array(v) for k, v in blocks.items() if k.startswith("m1:")
        }
        self.second_moment = {
            k[3:]: np.array(v) for k, v in blocks.items() if k.startswith("m2:")
        }


def adam_step(params, grads, state):
    """Single optimizer step; mutates and returns ``params`` and ``state``."""
    state.step(params, grads)
    return params, state


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central-difference gradient estimate of a scalar function.

    ``params`` is a dict of float64 arrays; the estimate perturbs one
    coordinate at a time, so this is strictly a small-model testing oracle.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.ravel()
        gflat = g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_fn(params)
            flat[idx] = orig - h
            fm = loss_fn(params)
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"non-finite loss while differencing {name!r} at index {idx}"
                )
            gflat[idx] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
