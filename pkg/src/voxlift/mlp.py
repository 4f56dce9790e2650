"""Small dense-layer toolkit shared by the position encoder, decoder and box head.

All products go through :func:`dense`, which uses ``np.einsum`` rather than
``@``. BLAS picks different kernels for one row and for many rows, so ``@``
is not row-exact; einsum accumulates each output in a fixed order, which makes
results independent of batch size and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

ACTIVATION = "relu"


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = np.einsum("...k,kd->...d", x, w)
    if b is not None:
        out = out + b
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class MlpWeights:
    """Two-layer perceptron ``relu(x @ w1 + b1) @ w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = ACTIVATION

    def __post_init__(self):
        if self.activation != ACTIVATION:
            raise InvalidArgument(f"unsupported activation {self.activation!r}")
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise InvalidArgument("w1 and w2 must be matrices")
        d_in, d_hidden = self.w1.shape
        if self.b1.shape != (d_hidden,) or self.w2.shape[0] != d_hidden:
            raise InvalidArgument(
                f"inconsistent hidden width: w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}"
            )
        if self.b2.shape != (self.w2.shape[1],):
            raise InvalidArgument(f"b2 shape {self.b2.shape} does not match w2 {self.w2.shape}")
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgument(f"{name} has non-finite entries")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def astype(self, dtype) -> "MlpWeights":
        return MlpWeights(*(np.asarray(t, dtype=dtype) for t in (self.w1, self.b1, self.w2, self.b2)))

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, d_out: int, dtype=np.float32) -> "MlpWeights":
        return cls(
            np.zeros((d_in, d_hidden), dtype),
            np.zeros(d_hidden, dtype),
            np.zeros((d_hidden, d_out), dtype),
            np.zeros(d_out, dtype),
        )

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> "MlpWeights":
        """Uniform in +-1/sqrt(fan_in) per layer, float32."""
        w1, b1 = uniform_layer(rng, d_in, d_hidden)
        w2, b2 = uniform_layer(rng, d_hidden, d_out)
        return cls(w1, b1, w2, b2)


def uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    if not bias:
        return w
    b = rng.uniform(-bound, bound, size=fan_out).astype(np.float32)
    return w, b


def mlp_forward(mlp: MlpWeights, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != mlp.d_in:
        raise InvalidArgument(f"input width {x.shape[-1]} != mlp input width {mlp.d_in}")
    return dense(relu(dense(x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2)


def mlp_forward_cached(mlp: MlpWeights, x: np.ndarray):
    """Forward pass that also returns the hidden pre-activation for backprop."""
    pre = dense(x, mlp.w1, mlp.b1)
    hidden = relu(pre)
    return dense(hidden, mlp.w2, mlp.b2), pre, hidden


def mlp_backward(mlp: MlpWeights, x: np.ndarray, pre: np.ndarray, hidden: np.ndarray, grad_out: np.ndarray):
    """Gradients of a scalar loss w.r.t. the four MLP tensors, given dL/d(output).

    ``x`` is (n, d_in), ``grad_out`` is (n, d_out). The relu derivative at 0 is 0.
    """
    g_w2 = np.einsum("nh,nd->hd", hidden, grad_out)
    g_b2 = grad_out.sum(axis=0)
    g_hidden = np.einsum("nd,hd->nh", grad_out, mlp.w2)
    g_pre = g_hidden * (pre > 0)
    g_w1 = np.einsum("ni,nh->ih", x, g_pre)
    g_b1 = g_pre.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}
