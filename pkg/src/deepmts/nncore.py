"""Differentiable compute primitives for small 3D networks.

Thin functional layer over torch with explicit shape contracts: every op
validates its input rank/channels and raises ``ShapeError`` instead of
letting a backend error surface. Reverse-mode gradients come from the
autograd tape recorded during the forward pass; ``run_backward`` seeds the
tape and fills the gradient slots of a ``ParamStore``.

Numeric modes: float32 is the training default, float64 is used by the
gradient/oracle test suites (pass ``dtype`` at tensor creation; all ops
follow their input dtype).
"""

from __future__ import annotations

from typing import Iterable

import torch
import torch.nn.functional as F

BN_MOMENTUM = 0.9  # running = m*running + (1-m)*batch
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Input rank, extent or channel count violates an op contract."""


def seed_all(seed: int) -> None:
    """Seed the torch RNG that drives dropout and weight init."""
    torch.manual_seed(seed)


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    out = (extent + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"non-positive spatial extent {out} from extent={extent} "
            f"kernel={kernel} stride={stride} pad={pad}"
        )
    return out


def same_padding(kernel: int) -> int:
    """Padding that keeps the spatial extent at stride 1 (odd kernels only)."""
    if kernel % 2 == 0:
        raise ShapeError(f"same padding undefined for even kernel {kernel}")
    return (kernel - 1) // 2


def conv3d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int | tuple[int, int, int] = 1,
    padding: int | tuple[int, int, int] | str = "same",
) -> torch.Tensor:
    """3D convolution over a (batch, channels, D, H, W) tensor.

    ``padding="same"`` resolves per-axis from the kernel extents and keeps
    spatial extents unchanged at stride 1. Output extents follow
    floor((in + 2*pad - k)/stride) + 1 and must stay positive.
    """
    if x.dim() != 5:
        raise ShapeError(f"conv3d expects a 5-D input, got {x.dim()}-D")
    if weight.dim() != 5:
        raise ShapeError(f"conv3d expects a 5-D kernel, got {weight.dim()}-D")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}"
        )
    stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    if padding == "same":
        pad = tuple(same_padding(k) for k in weight.shape[2:])
    elif isinstance(padding, int):
        pad = (padding,) * 3
    else:
        pad = tuple(padding)
    for e, k, s, p in zip(x.shape[2:], weight.shape[2:], stride, pad):
        conv_output_extent(e, k, s, p)
    return F.conv3d(x, weight, bias, stride=stride, padding=pad)


def batchnorm(
    x: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_running: bool = True,
) -> torch.Tensor:
    """Per-channel batch normalization for 2-D or 5-D tensors.

    Train mode normalizes with (biased) batch statistics and, when
    ``update_running`` is set, folds them into the running stats via
    exponential moving average; eval mode normalizes with the running stats.
    """
    if x.dim() not in (2, 5):
        raise ShapeError(f"batchnorm expects 2-D or 5-D input, got {x.dim()}-D")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axes = (0,) if x.dim() == 2 else (0, 2, 3, 4)
    count = x.numel() // x.shape[1]
    if mode == "train":
        if count < 2:
            raise ShapeError("batchnorm train mode needs >= 2 values per channel")
        mean = x.mean(dim=axes)
        var = x.var(dim=axes, unbiased=False)
        if update_running:
            with torch.no_grad():
                unbiased = var.detach() * count / (count - 1)
                running_mean.mul_(momentum).add_((1 - momentum) * mean.detach())
                running_var.mul_(momentum).add_((1 - momentum) * unbiased)
    else:
        mean, var = running_mean, running_var
    view = (1, -1) if x.dim() == 2 else (1, -1, 1, 1, 1)
    xhat = (x - mean.view(view)) / torch.sqrt(var.view(view) + eps)
    return scale.view(view) * xhat + shift.view(view)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def maxpool2(x: torch.Tensor) -> torch.Tensor:
    """2x2x2 max pooling; every spatial extent must be even."""
    if x.dim() != 5:
        raise ShapeError(f"maxpool2 expects 5-D input, got {x.dim()}-D")
    for e in x.shape[2:]:
        if e % 2 != 0:
            raise ShapeError(f"odd extent {e} into 2x2x2 pool")
    return F.max_pool3d(x, kernel_size=2)


def avgpool2(x: torch.Tensor) -> torch.Tensor:
    """2x2x2 average pooling; every spatial extent must be even."""
    if x.dim() != 5:
        raise ShapeError(f"avgpool2 expects 5-D input, got {x.dim()}-D")
    for e in x.shape[2:]:
        if e % 2 != 0:
            raise ShapeError(f"odd extent {e} into 2x2x2 pool")
    return F.avg_pool3d(x, kernel_size=2)


def upsample2(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor upsampling that doubles each spatial extent."""
    if x.dim() != 5:
        raise ShapeError(f"upsample2 expects 5-D input, got {x.dim()}-D")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pooling to (batch, channels)."""
    if x.dim() != 5:
        raise ShapeError(f"gap expects 5-D input, got {x.dim()}-D")
    return x.mean(dim=(2, 3, 4))


def softmax_channels(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=1)


def dropout(x: torch.Tensor, p: float, mode: str) -> torch.Tensor:
    """Inverted dropout: train mode zeros inputs with probability ``p`` and
    rescales survivors by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    return F.dropout(x, p=p, training=mode == "train")


def dense(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    activation: str = "linear",
) -> torch.Tensor:
    """Affine map on (batch, features) with optional ReLU."""
    if x.dim() != 2:
        raise ShapeError(f"dense expects 2-D input, got {x.dim()}-D")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"feature mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    y = F.linear(x, weight, bias)
    if activation == "relu":
        return F.relu(y)
    if activation == "linear":
        return y
    raise ValueError(f"unknown activation {activation!r}")


def dense_dropout_head(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None,
    activation: str,
    dropout_p: float,
    mode: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Dropout on the inputs followed by an affine map.

    Returns (output, sum-of-squared-weights) so callers can accumulate the
    L2 term of each fully-connected layer into the loss.
    """
    y = dense(dropout(x, dropout_p, mode), weight, bias, activation)
    return y, (weight * weight).sum()


class ParamStore:
    """Named parameter tensors with gradient slots of identical shape.

    Keys are stable layer-path strings (module attribute paths). Buffers
    such as BN running statistics live in a separate map and never receive
    gradients.
    """

    def __init__(self, params: dict[str, torch.Tensor] | None = None,
                 buffers: dict[str, torch.Tensor] | None = None):
        self.params: dict[str, torch.Tensor] = dict(params or {})
        self.buffers: dict[str, torch.Tensor] = dict(buffers or {})

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(
            params=dict(module.named_parameters()),
            buffers=dict(module.named_buffers()),
        )

    def grad(self, key: str) -> torch.Tensor:
        """Gradient of a parameter; zeros when it did not participate."""
        p = self.params[key]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, torch.Tensor]:
        """Parameters and buffers merged, for checkpointing."""
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def __len__(self) -> int:
        return len(self.params)

    def keys(self) -> Iterable[str]:
        return self.params.keys()


def run_backward(output: torch.Tensor, output_grad: torch.Tensor | None = None) -> None:
    """Backpropagate through the tape recorded by the forward pass.

    ``output_grad`` must match the output shape; it defaults to ones for
    scalar outputs. Raises if no forward pass was recorded for ``output``.
    """
    if output.grad_fn is None and not output.requires_grad:
        raise RuntimeError("backward without a recorded forward pass")
    if output_grad is None:
        if output.numel() != 1:
            raise ShapeError("non-scalar output needs an explicit output_grad")
        output.backward()
        return
    if output_grad.shape != output.shape:
        raise ShapeError(
            f"output_grad shape {tuple(output_grad.shape)} does not match "
            f"output shape {tuple(output.shape)}"
        )
    output.backward(gradient=output_grad)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{what} contains NaN/Inf")
    return x
