"""Visual state-space blocks and the patch-grid plumbing around them.

An SS2D block runs four directional selective scans over a 2D feature
map (see :mod:`ssmseg.ssm` for the scan order) between a gated linear
expansion and a depthwise convolution, mirroring the usual visual
state-space design. Patch embed/merge/expand layers come from the
hierarchical windowed-attention lineage and keep the same shapes here.

All blocks operate channels-last: (B, H, W, C).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .scan_kernel import selective_scan_batched


def cross_scan_batch(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 4, C, H*W) in row-fwd/row-bwd/col-fwd/col-bwd order."""
    b, c, h, w = x.shape
    row = x.reshape(b, c, h * w)
    col = x.transpose(2, 3).reshape(b, c, h * w)
    return torch.stack([row, row.flip(-1), col, col.flip(-1)], dim=1)


def cross_merge_batch(ys: torch.Tensor, h: int, w: int, reduction: str = "mean") -> torch.Tensor:
    """Invert :func:`cross_scan_batch` and reduce: (B, 4, C, L) -> (B, C, H, W)."""
    b, _, c, L = ys.shape
    row = ys[:, 0] + ys[:, 1].flip(-1)
    col = (ys[:, 2] + ys[:, 3].flip(-1)).reshape(b, c, w, h).transpose(2, 3).reshape(b, c, L)
    out = (row + col).reshape(b, c, h, w)
    return out / 4 if reduction == "mean" else out


class SS2D(nn.Module):
    """Four-direction selective-scan mixer with gating and local conv."""

    def __init__(self, d_model, d_state=16, expand=2, d_conv=3, dt_rank=None,
                 dt_min=0.001, dt_max=0.1, merge="mean"):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = int(expand * d_model)
        self.dt_rank = math.ceil(d_model / 16) if dt_rank is None else dt_rank
        self.merge = merge

        self.in_proj = nn.Linear(d_model, self.d_inner * 2, bias=False)
        self.conv2d = nn.Conv2d(self.d_inner, self.d_inner, d_conv,
                                padding=(d_conv - 1) // 2, groups=self.d_inner, bias=True)
        self.act = nn.SiLU()

        k = 4
        self.x_proj_weight = nn.Parameter(
            torch.empty(k, self.dt_rank + 2 * d_state, self.d_inner))
        self.dt_projs_weight = nn.Parameter(torch.empty(k, self.d_inner, self.dt_rank))
        self.dt_projs_bias = nn.Parameter(torch.empty(k, self.d_inner))
        self.A_logs = nn.Parameter(torch.empty(k, self.d_inner, d_state))
        self.Ds = nn.Parameter(torch.ones(k, self.d_inner))

        self.out_norm = nn.LayerNorm(self.d_inner)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)
        self._init_scan_params(dt_min, dt_max)

    def _init_scan_params(self, dt_min, dt_max):
        for i in range(4):
            nn.init.kaiming_uniform_(self.x_proj_weight.data[i], a=math.sqrt(5))
        # timescale projection: small uniform weights, bias set so softplus
        # lands log-uniformly in [dt_min, dt_max]
        dt_std = self.dt_rank ** -0.5
        nn.init.uniform_(self.dt_projs_weight.data, -dt_std, dt_std)
        dt = torch.exp(torch.rand(4, self.d_inner)
                       * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_projs_bias.data.copy_(dt + torch.log(-torch.expm1(-dt)))
        # evolution diagonal starts at -(1..N) for every channel and direction
        a = torch.arange(1, self.d_state + 1, dtype=torch.float32)
        self.A_logs.data.copy_(torch.log(a).expand(4, self.d_inner, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, _ = x.shape
        xz = self.in_proj(x)
        x, z = xz.chunk(2, dim=-1)
        x = x.permute(0, 3, 1, 2)
        x = self.act(self.conv2d(x))

        xs = cross_scan_batch(x)                                    # (B, 4, D, L)
        x_dbl = torch.einsum("bkdl,kcd->bklc", xs, self.x_proj_weight)
        dts, bs, cs = torch.split(
            x_dbl, [self.dt_rank, self.d_state, self.d_state], dim=-1)
        dts = torch.einsum("bklr,kdr->bkdl", dts, self.dt_projs_weight)
        dts = F.softplus(dts + self.dt_projs_bias[None, :, :, None])
        a = -torch.exp(self.A_logs)

        ys = selective_scan_batched(xs, dts, a, bs, cs, self.Ds)
        y = cross_merge_batch(ys, h, w, self.merge)                 # (B, D, H, W)
        y = y.permute(0, 2, 3, 1)
        y = self.out_norm(y)
        y = y * F.silu(z)
        return self.out_proj(y)


class VSSBlock(nn.Module):
    """Pre-norm SS2D with a residual connection."""

    def __init__(self, dim, d_state=16, expand=2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mixer = SS2D(dim, d_state=d_state, expand=expand)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mixer(self.norm(x))


def vss_block_forward(x: torch.Tensor, block: VSSBlock) -> torch.Tensor:
    """Apply one block to a single (C, H, W) map, preserving its shape."""
    if block is None:
        raise ValueError("block parameters are not initialized")
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(x.shape)}")
    y = block(x.permute(1, 2, 0).unsqueeze(0))
    return y.squeeze(0).permute(2, 0, 1)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection: (B, C_in, H, W) -> (B, H/p, W/p, C)."""

    def __init__(self, in_channels, embed_dim, patch_size=4):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ValueError("input size must be divisible by the patch size")
        x = self.proj(x).permute(0, 2, 3, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """Downsample x2 and double channels: (B, H, W, C) -> (B, H/2, W/2, 2C)."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """Upsample x2 and halve channels: (B, H, W, C) -> (B, 2H, 2W, C/2)."""

    def __init__(self, dim):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x):
        x = self.expand(x)
        x = rearrange(x, "b h w (p1 p2 c) -> b (h p1) (w p2) c", p1=2, p2=2)
        return self.norm(x)


class FinalPatchExpand(nn.Module):
    """Upsample x4 keeping channels: (B, H, W, C) -> (B, 4H, 4W, C)."""

    def __init__(self, dim, scale=4):
        super().__init__()
        self.scale = scale
        self.expand = nn.Linear(dim, scale * scale * dim, bias=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.expand(x)
        x = rearrange(x, "b h w (p1 p2 c) -> b (h p1) (w p2) c",
                      p1=self.scale, p2=self.scale)
        return self.norm(x)
