"""Neural building blocks shared by the duration path and the token decoder.

All blocks take (batch, length, dim) tensors plus an optional boolean
padding mask with True at padded positions. Padded positions are zeroed
after every residual stage and before every convolution, so a padded batch
computes exactly what the same sequences would compute unbatched.

Activations are smooth (GELU / SiLU) so analytic gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import math

import torch
from torch import nn

__all__ = [
    "sinusoidal_positions",
    "zero_padded",
    "FFTBlock",
    "PromptEncoderLayer",
    "DurationAttentionLayer",
    "CrossAttention",
    "ConformerBlock",
]


def sinusoidal_positions(length: int, dim: int, *, device=None, dtype=None) -> torch.Tensor:
    """Standard interleaved sine/cosine position table of shape (length, dim)."""
    dtype = dtype or torch.get_default_dtype()
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, device=device, dtype=dtype)
    div = torch.exp(half * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, device=device, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table


def zero_padded(x: torch.Tensor, pad: torch.Tensor | None) -> torch.Tensor:
    """Zero out padded positions; pad is (B, L) with True at padding."""
    if pad is None:
        return x
    return x * (~pad).unsqueeze(-1).to(x.dtype)


class _ConvPair(nn.Module):
    """Two 1-D convolutions over time with a GELU in between.

    The intermediate activation is re-zeroed at padded positions so the
    second convolution sees exactly the zero padding an unbatched sequence
    would have past its end.
    """

    def __init__(self, dim: int, filter_size: int, kernel: int, out_kernel: int | None = None):
        super().__init__()
        out_kernel = kernel if out_kernel is None else out_kernel
        self.conv1 = nn.Conv1d(dim, filter_size, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filter_size, dim, out_kernel, padding=out_kernel // 2)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        h = self.act(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        h = zero_padded(h, pad)
        return self.conv2(h.transpose(1, 2)).transpose(1, 2)


class FFTBlock(nn.Module):
    """Feed-forward transformer block: self-attention plus a conv pair.

    Post-norm residual layout; padded positions are zeroed between stages
    so the convolutions never read padding garbage.
    """

    def __init__(self, dim: int, heads: int, filter_size: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.convs = _ConvPair(dim, filter_size, kernel)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        a, _ = self.attn(x, x, x, key_padding_mask=pad, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        x = zero_padded(x, pad)
        x = self.norm2(x + self.dropout(self.convs(x, pad)))
        return zero_padded(x, pad)


class PromptEncoderLayer(nn.Module):
    """Pre-norm transformer layer with a convolutional feed-forward."""

    def __init__(self, dim: int, heads: int, filter_size: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.convs = _ConvPair(dim, filter_size, kernel)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, key_padding_mask=pad, need_weights=False)
        x = zero_padded(x + self.dropout(a), pad)
        h = zero_padded(self.norm2(x), pad)
        x = x + self.dropout(self.convs(h, pad))
        return zero_padded(x, pad)


class DurationAttentionLayer(nn.Module):
    """One block of the duration extractor/predictor.

    The running text state is normalized and mapped to queries; keys and
    values come from a fixed conditioning sequence (prompt acoustics for
    the extractor, encoded prompt durations for the predictor). Attention
    output goes through a convolution and is added back to the text.
    """

    def __init__(self, dim: int, heads: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        pad: torch.Tensor | None = None,
        memory_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        q = zero_padded(self.norm(x), pad)
        a, _ = self.attn(q, memory, memory, key_padding_mask=memory_pad, need_weights=False)
        a = zero_padded(a, pad)
        h = self.conv(a.transpose(1, 2)).transpose(1, 2)
        return zero_padded(x + self.dropout(h), pad)


class CrossAttention(nn.Module):
    """Residual cross-attention used to leak prompt information into text."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        pad: torch.Tensor | None = None,
        memory_pad: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        q = self.norm(x)
        a, w = self.attn(q, memory, memory, key_padding_mask=memory_pad, need_weights=need_weights)
        out = zero_padded(x + self.dropout(a), pad)
        return (out, w) if need_weights else out


class _ConformerConvModule(nn.Module):
    """Pointwise GLU, depthwise conv over time, norm, SiLU, pointwise out."""

    def __init__(self, dim: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.act = nn.SiLU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        h = x.transpose(1, 2)
        h = nn.functional.glu(self.pointwise1(h), dim=1)
        h = h.transpose(1, 2)
        h = zero_padded(h, pad)  # depthwise conv must not read padding
        h = self.depthwise(h.transpose(1, 2)).transpose(1, 2)
        h = self.act(self.norm(h))
        h = self.pointwise2(h.transpose(1, 2)).transpose(1, 2)
        return self.dropout(h)


class _FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(hidden, dim)
        self.act = nn.SiLU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(self.dropout(self.act(self.w1(x))))


class ConformerBlock(nn.Module):
    """Macaron-style conformer layer: FF/2, self-attention, conv, FF/2."""

    def __init__(self, dim: int, heads: int, linear_units: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.ff1 = _FeedForward(dim, linear_units, dropout)
        self.ff2 = _FeedForward(dim, linear_units, dropout)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = _ConformerConvModule(dim, kernel, dropout)
        self.norm_ff1 = nn.LayerNorm(dim)
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_conv = nn.LayerNorm(dim)
        self.norm_ff2 = nn.LayerNorm(dim)
        self.norm_final = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        x = x + 0.5 * self.dropout(self.ff1(self.norm_ff1(x)))
        h = self.norm_attn(x)
        a, _ = self.attn(h, h, h, key_padding_mask=pad, need_weights=False)
        x = x + self.dropout(a)
        x = x + self.conv(zero_padded(self.norm_conv(x), pad), pad)
        x = x + 0.5 * self.dropout(self.ff2(self.norm_ff2(x)))
        return zero_padded(self.norm_final(x), pad)
