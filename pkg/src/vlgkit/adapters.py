"""Linear and causal-convolutional low-rank adapters with modality routing.

The routed wrapper splits a hidden-state sequence by target modality, sends
text-target positions through a linear low-rank path, image-target positions
through either a second linear path ("moe") or a causal 2D conv path
("lateral"), and reassembles the outputs in the original order. "shared" uses
a single linear path for everything. All adapter B factors start at zero, so a
freshly initialized adapter changes nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, StructureError
from .seqcore import Modality, ModelConfig

DTYPE = torch.float64


def causal_conv2d(grid: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Stride-1 conv over an (H, W, C_in) grid with (k-1) zero padding on the
    top and left only, so output (r, c) sees inputs (r-a, c-b), 0 <= a,b < k.

    kernel: (r, C_in, k, k). Returns (H, W, r).
    """
    h, w, c_in = grid.shape
    r, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ContractError(f"kernel expects {kc} channels, grid has {c_in}")
    if kh != kw:
        raise ContractError("kernel must be square")
    k = kh
    if k > h + 1 or k > w + 1:
        raise ConfigError(f"kernel size {k} exceeds padded grid extent")
    x = grid.permute(2, 0, 1).unsqueeze(0)  # (1, C_in, H, W)
    x = F.pad(x, (k - 1, 0, k - 1, 0))      # (left, right, top, bottom)
    out = F.conv2d(x, kernel, stride=1)
    return out.squeeze(0).permute(1, 2, 0)  # (H, W, r)


class LinearLoRA(nn.Module):
    """Low-rank delta alpha * h A^T B^T; B starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 dropout_p: float, generator: torch.Generator):
        super().__init__()
        if not 1 <= rank < min(d_in, d_out):
            raise ConfigError("rank must satisfy 1 <= r < min(d_in, d_out)")
        self.alpha = float(alpha)
        bound = 1.0 / math.sqrt(d_in)
        a = (torch.rand(rank, d_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))
        self.dropout = nn.Dropout(dropout_p)

    def delta(self, h: torch.Tensor) -> torch.Tensor:
        """Adapter contribution for h of shape (..., d_in)."""
        return self.alpha * (self.dropout(h) @ self.A.t() @ self.B.t())


class CausalConvLoRA(nn.Module):
    """Low-rank delta alpha * CausalConv(grid) B^T over one image grid."""

    def __init__(self, c_in: int, d_out: int, rank: int, kernel_size: int,
                 alpha: float, dropout_p: float, generator: torch.Generator):
        super().__init__()
        if kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        self.alpha = float(alpha)
        self.kernel_size = kernel_size
        bound = 1.0 / math.sqrt(c_in * kernel_size * kernel_size)
        w = (torch.rand(rank, c_in, kernel_size, kernel_size,
                        generator=generator, dtype=DTYPE) * 2 - 1) * bound
        self.kernel = nn.Parameter(w)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))
        self.dropout = nn.Dropout(dropout_p)

    def delta_grid(self, grid: torch.Tensor) -> torch.Tensor:
        """Adapter contribution for an (H, W, C_in) grid; returns (H, W, d_out)."""
        conv = causal_conv2d(self.dropout(grid), self.kernel)
        return self.alpha * (conv @ self.B.t())


@dataclass
class RoutingPlan:
    """Routing context for one flattened sequence.

    mask: per-position target modality. image_spans: per-image (start, length)
    runs of image-target positions; a span shorter than n_patches is a
    partially generated trailing image whose grid is zero-padded to full size.
    """

    mask: list[Modality]
    image_spans: list[tuple[int, int]]
    grid_height: int
    grid_width: int

    @property
    def n_patches(self) -> int:
        return self.grid_height * self.grid_width

    def validate(self, n: int) -> None:
        if len(self.mask) != n:
            raise StructureError(f"mask length {len(self.mask)} != sequence length {n}")
        covered = set()
        for si, (start, length) in enumerate(self.image_spans):
            if not 1 <= length <= self.n_patches:
                raise StructureError(
                    f"image span {si} has length {length}, expected 1..{self.n_patches}")
            if si < len(self.image_spans) - 1 and length != self.n_patches:
                raise StructureError(f"non-trailing image span {si} is partial")
            if start < 0 or start + length > n:
                raise StructureError(f"image span {si} out of bounds")
            covered.update(range(start, start + length))
        image_positions = {i for i, m in enumerate(self.mask) if m is Modality.IMAGE}
        if covered != image_positions:
            raise StructureError("image spans do not match image-target positions")


class RoutedLinear(nn.Module):
    """A frozen linear layer plus a modality-routed adapter variant."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.base = nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)
        self.variant: str | None = None
        self.text_lora: LinearLoRA | None = None
        self.image_lora: LinearLoRA | None = None
        self.image_conv: CausalConvLoRA | None = None

    def init_adapters(self, variant: str, config: ModelConfig,
                      generator: torch.Generator) -> None:
        """Attach freshly zero-initialized adapters for the given variant."""
        mk = lambda: LinearLoRA(self.d_in, self.d_out, config.lora_rank,
                                config.lora_alpha, config.dropout_p, generator)
        self.variant = variant
        self.text_lora = mk()
        self.image_lora = None
        self.image_conv = None
        if variant == "shared":
            pass
        elif variant == "moe":
            self.image_lora = mk()
        elif variant == "lateral":
            self.image_conv = CausalConvLoRA(
                self.d_in, self.d_out, config.lora_rank, config.conv_kernel,
                config.lora_alpha, config.dropout_p, generator)
        else:
            raise ConfigError(f"unknown adapter variant {variant!r}")

    def adapter_parameters(self):
        for m in (self.text_lora, self.image_lora, self.image_conv):
            if m is not None:
                yield from m.parameters()

    def forward(self, h: torch.Tensor, plan: RoutingPlan | None = None) -> torch.Tensor:
        """h: (N, d_in). plan may be omitted only when no adapters are attached
        or every position is text-target."""
        out = self.base(h)
        if self.variant is None:
            return out
        if self.variant == "shared":
            return out + self.text_lora.delta(h)
        if plan is None:
            raise ContractError(f"{self.variant} adapter requires a routing plan")
        text_idx = [i for i, m in enumerate(plan.mask) if m is Modality.TEXT]
        if text_idx:
            idx = torch.tensor(text_idx, dtype=torch.long)
            out[idx] = out[idx] + self.text_lora.delta(h[idx])
        for start, length in plan.image_spans:
            span = h[start:start + length]
            if self.variant == "moe":
                out[start:start + length] = out[start:start + length] + \
                    self.image_lora.delta(span)
            else:
                hp, wp = plan.grid_height, plan.grid_width
                grid = torch.zeros(hp * wp, self.d_in, dtype=h.dtype)
                grid[:length] = span
                delta = self.image_conv.delta_grid(grid.view(hp, wp, self.d_in))
                delta = delta.reshape(hp * wp, self.d_out)[:length]
                out[start:start + length] = out[start:start + length] + delta
        return out
