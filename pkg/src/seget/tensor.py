"""Dense 4-D tensors, trainable parameters, and convolution specs.

Everything numeric in the network flows through these three types. A
Tensor is a batch of feature maps in row-major N,C,H,W order with an
optional gradient buffer; a Parameter is a trainable array with an
additively-accumulated gradient; a ConvSpec pins down one convolution's
geometry (kernel size, stride, dilation, channel counts).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLE_CONV_KERNEL = "conv-kernel"
ROLE_CONV_BIAS = "conv-bias"
ROLE_BN_GAMMA = "bn-gamma"
ROLE_BN_BETA = "bn-beta"

_ROLES = (ROLE_CONV_KERNEL, ROLE_CONV_BIAS, ROLE_BN_GAMMA, ROLE_BN_BETA)


@dataclass
class Tensor:
    """Batch of feature maps, shape (N, C, H, W), plus an optional grad buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"Tensor data must be 4-D (N,C,H,W), got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValueError(f"Tensor extents must all be >= 1, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            raise ValueError(f"Tensor data must be floating point, got {self.data.dtype}")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(
                f"grad shape {self.grad.shape} must equal data shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)


def tensor4d(array: np.ndarray, dtype: np.dtype | str | None = None) -> Tensor:
    """Wrap a 2-D (H,W), 3-D (C,H,W), or 4-D array as a Tensor, adding leading axes."""
    a = np.asarray(array, dtype=dtype)
    while a.ndim < 4:
        a = a[np.newaxis]
    return Tensor(a)


@dataclass
class Parameter:
    """Trainable array with role tag and additively-accumulated gradient.

    grad is None until first touched; zero_grad() allocates it. Backward
    passes add into it, and the optimizer zeroes it after each step.
    """

    value: np.ndarray
    role: str
    regularized: bool = False
    grad: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}")
        if self.regularized and self.role != ROLE_CONV_KERNEL:
            raise ValueError("only conv kernels are regularized")

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad.fill(0.0)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution: "same" padding, 3x3 or 1x1 kernel."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.dilation > 1 and self.stride != 1:
            raise ValueError("dilated convolutions require stride 1")

    @property
    def effective_kernel(self) -> int:
        """Kernel footprint after dilation: k + (k-1)(d-1)."""
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        """"same" semantics: output extent = ceil(extent / stride)."""
        return -(-h // self.stride), -(-w // self.stride)

    @property
    def param_count(self) -> int:
        return self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels


def init_conv_params(
    spec: ConvSpec, rng: np.random.Generator, dtype: np.dtype | str = np.float32
) -> tuple[Parameter, Parameter]:
    """He-scaled kernel (std sqrt(2/fan_in)) and a zero bias."""
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    kernel = rng.normal(
        0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    ).astype(dtype)
    bias = np.zeros(spec.out_channels, dtype=dtype)
    return (
        Parameter(kernel, ROLE_CONV_KERNEL, regularized=True),
        Parameter(bias, ROLE_CONV_BIAS),
    )


def init_bn_params(channels: int, dtype: np.dtype | str = np.float32) -> tuple[Parameter, Parameter]:
    """gamma = 1, beta = 0."""
    return (
        Parameter(np.ones(channels, dtype=dtype), ROLE_BN_GAMMA),
        Parameter(np.zeros(channels, dtype=dtype), ROLE_BN_BETA),
    )
