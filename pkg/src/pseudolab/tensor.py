"""Dense float64 tensors and the convolution parameter container.

All numeric kernels operate on 64-bit reals in row-major order. Trainable
parameters are held in :class:`Tensor`, which pairs a value buffer with an
optional same-shape gradient buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError


def as_f64(values) -> np.ndarray:
    """Row-major float64 array for ``values`` (copies only when needed)."""
    return np.ascontiguousarray(values, dtype=np.float64)


def ensure_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise :class:`NumericsError` if ``arr`` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise NumericsError(f"{name} produced non-finite values")
    return arr


class Tensor:
    """A float64 n-d array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = as_f64(data)
        self.grad = None if grad is None else as_f64(grad)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {self.grad.shape} does not match value shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


@dataclass
class ConvParams:
    """Kernel weights (OutCh x InCh x Kh x Kw), per-channel bias, stride and padding."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d (OutCh,InCh,Kh,Kw), got shape {self.kernel.shape}")
        if self.bias.data.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError(
                f"conv bias must have length OutCh={self.kernel.shape[0]}, got shape {self.bias.shape}"
            )
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"conv padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_hw(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]
