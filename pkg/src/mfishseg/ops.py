"""Differentiable numerical kernels and the Adam optimizer.

All operations work on rank-4 torch tensors laid out as (batch, channel,
height, width). Gradients come from autograd; ``grad_check`` verifies them
against central finite differences in double precision.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

Tensor4 = torch.Tensor


@dataclass
class ConvParams:
    """Weights and geometry of a 2-D (optionally dilated) convolution."""

    weights: torch.Tensor  # (C_out, C_in, k_h, k_w)
    bias: torch.Tensor  # (C_out,)
    dilation: int = 1
    stride: int = 1
    padding: str = "same"  # "same" or "valid"

    def receptive_field(self) -> Tuple[int, int]:
        """Effective receptive field per axis: k + (k-1)(l-1)."""
        kh, kw = self.weights.shape[-2:]
        l = self.dilation
        return (kh + (kh - 1) * (l - 1), kw + (kw - 1) * (l - 1))


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: torch.Tensor
    beta: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    momentum: float = 0.9
    epsilon: float = 1e-5


def make_batch_norm_state(channels: int, momentum: float = 0.9,
                          epsilon: float = 1e-5,
                          dtype: torch.dtype = torch.float32) -> BatchNormState:
    return BatchNormState(
        gamma=torch.ones(channels, dtype=dtype, requires_grad=True),
        beta=torch.zeros(channels, dtype=dtype, requires_grad=True),
        running_mean=torch.zeros(channels, dtype=dtype),
        running_var=torch.ones(channels, dtype=dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


@dataclass
class AdamState:
    """Adam optimizer state shared across a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def conv2d(input: Tensor4, params: ConvParams) -> Tensor4:
    """Dilated 2-D convolution (true convolution, kernel flipped).

    output(x) = bias + sum over channels and taps of input sampled at
    dilation-spaced offsets around x. With dilation 1 this is the standard
    discrete convolution.
    """
    if input.dim() != 4:
        raise ValueError(f"expected rank-4 input, got shape {tuple(input.shape)}")
    c_out, c_in, kh, kw = params.weights.shape
    if input.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {input.shape[1]}, kernel expects {c_in}")
    if params.dilation < 1:
        raise ValueError(f"dilation must be positive, got {params.dilation}")
    if params.padding == "same":
        pad = (params.dilation * (kh - 1) // 2, params.dilation * (kw - 1) // 2)
    elif params.padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding mode {params.padding!r}")
    # torch convolution is cross-correlation; flip taps to get true convolution
    w = torch.flip(params.weights, dims=(-2, -1))
    return F.conv2d(input, w, params.bias, stride=params.stride,
                    padding=pad, dilation=params.dilation)


def max_pool(input: Tensor4, pool_size: int, stride: int) -> Tensor4:
    """Per-window max. Gradient routes to the first maximal element
    (row-major order) within each window."""
    n, c, h, w = input.shape
    if h < pool_size or w < pool_size:
        raise ValueError(f"input {h}x{w} smaller than pool size {pool_size}")
    patches = input.unfold(2, pool_size, stride).unfold(3, pool_size, stride)
    flat = patches.reshape(n, c, patches.shape[2], patches.shape[3], -1)
    # torch.max returns the first maximal index, which fixes the tie rule
    out, _ = flat.max(dim=-1)
    return out


def batch_norm(input: Tensor4, state: BatchNormState, mode: str) -> Tensor4:
    """Normalize per channel; train mode uses batch statistics and updates
    the running ones, infer mode uses the running statistics."""
    n, c, h, w = input.shape
    if mode == "train":
        if n * h * w < 2:
            raise ValueError("batch_norm train mode needs at least 2 values per channel")
        mean = input.mean(dim=(0, 2, 3))
        var = input.var(dim=(0, 2, 3), unbiased=False)
        with torch.no_grad():
            mom = state.momentum
            state.running_mean.mul_(mom).add_((1.0 - mom) * mean)
            state.running_var.mul_(mom).add_((1.0 - mom) * var)
    elif mode == "infer":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = torch.rsqrt(var + state.epsilon)
    x = (input - mean[None, :, None, None]) * inv[None, :, None, None]
    return x * state.gamma[None, :, None, None] + state.beta[None, :, None, None]


def relu(input: Tensor4) -> Tensor4:
    return torch.relu(input)


def dropout(input: Tensor4, rate: float, mode: str,
            rng: Optional[torch.Generator] = None) -> Tensor4:
    """Inverted dropout: zeros units with probability ``rate`` in train mode
    and scales survivors by 1/(1-rate); identity in infer mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return input
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    keep = (torch.rand(input.shape, generator=rng, dtype=input.dtype,
                       device=input.device) >= rate).to(input.dtype)
    return input * keep / (1.0 - rate)


def bilinear_upsample(input: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Separable bilinear interpolation, align-corners convention."""
    h, w = input.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"output {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return input
    return F.interpolate(input, size=(out_h, out_w), mode="bilinear",
                         align_corners=True)


def softmax_channels(logits: Tensor4) -> Tensor4:
    """Per-pixel softmax over the channel axis (max-subtracted for stability)."""
    return torch.softmax(logits, dim=1)


def masked_cross_entropy(pred: Tensor4, target: Tensor4, mask: Tensor4) -> torch.Tensor:
    """Cross entropy between predicted probabilities and one-hot targets,
    averaged over masked-in pixels only.

    The loss is built from boolean-indexed pixels, so masked-out pixels have
    exactly zero gradient and perturbing them leaves the loss bit-identical.
    """
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    sel = (mask > 0.5)[:, 0]  # (N, H, W)
    count = int(sel.sum())
    if count == 0:
        raise ValueError("mask selects no pixels; mean loss undefined")
    p = pred.permute(0, 2, 3, 1)[sel]
    t = target.permute(0, 2, 3, 1)[sel]
    return -torch.xlogy(t, p).sum() / count


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match "
                             f"parameter {name} shape {tuple(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = torch.zeros_like(p)
        with torch.no_grad():
            m.mul_(state.beta1).add_((1.0 - state.beta1) * g)
            v.mul_(state.beta2).add_((1.0 - state.beta2) * g * g)
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.sub_(state.lr * m_hat / (torch.sqrt(v_hat) + state.epsilon))
    return state


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: List[float]


def grad_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients of a scalar-valued ``op`` against central
    finite differences. Inputs must be double precision leaves."""
    leaves = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = op(*leaves)
    if out.numel() != 1:
        raise ValueError("grad_check expects a scalar-valued op")
    out.backward()
    per_input = []
    for x in leaves:
        analytic = x.grad if x.grad is not None else torch.zeros_like(x)
        numeric = torch.zeros_like(x)
        flat = x.detach().reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            with torch.no_grad():
                hi = op(*[l.detach() for l in leaves]).item()
            flat[i] = orig - step
            with torch.no_grad():
                lo = op(*[l.detach() for l in leaves]).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        denom = torch.clamp(analytic.abs() + numeric.abs(), min=1.0)
        err = ((analytic - numeric).abs() / denom).max().item()
        per_input.append(err)
    return GradCheckReport(max_rel_error=max(per_input) if per_input else 0.0,
                           per_input=per_input)
