"""Encoder architectures and deterministic weight construction.

Two frozen encoders are registered:

* ``m730``: a 3D convolutional encoder, ten conv+ReLU blocks with stride-2
  downsampling at blocks 3, 5, 7 and 9.
* ``vit2d``: a slicewise 2D vision transformer applied to each axial slice
  independently, patch size 16, fixed sinusoidal positional encoding.

Weights are generated deterministically from the model id, so every
installation materializes bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import LayerRangeError, UnknownModelError

_M730_WIDTHS = (16, 16, 32, 32, 32, 64, 64, 64, 64, 64)
_M730_STRIDES = (1, 1, 2, 1, 2, 1, 2, 1, 2, 1)

_VIT_DIM = 96
_VIT_HEADS = 3
_VIT_DEPTH = 2
_VIT_PATCH = 16


class M730Encoder(nn.Module):
    """3D conv encoder; layer k is the activation after block k (1-based)."""

    def __init__(self) -> None:
        super().__init__()
        blocks = []
        cin = 1
        for width, stride in zip(_M730_WIDTHS, _M730_STRIDES):
            blocks.append(nn.Conv3d(cin, width, kernel_size=3, stride=stride, padding=1))
            cin = width
        self.blocks = nn.ModuleList(blocks)

    def layer_output(self, x: torch.Tensor, layer_index: int) -> torch.Tensor:
        """Run the encoder up to a layer.

        Args:
            x: input of shape (1, 1, Z, Y, X).
            layer_index: 1-based block index.

        Returns:
            Feature map of shape (1, C, z, y, x) at that block's resolution.
        """
        if not 1 <= layer_index <= len(self.blocks):
            raise LayerRangeError(
                f"layer {layer_index} out of range 1..{len(self.blocks)}"
            )
        for i, block in enumerate(self.blocks, start=1):
            x = torch.relu(block(x))
            if i == layer_index:
                return x
        raise AssertionError("unreachable")

    @staticmethod
    def layer_table() -> tuple[dict, ...]:
        rows = []
        factor = 1
        for i, (width, stride) in enumerate(zip(_M730_WIDTHS, _M730_STRIDES), start=1):
            factor *= stride
            rows.append(
                {"index": i, "channels": width, "downsample": (factor, factor, factor)}
            )
        return tuple(rows)


def _sinusoidal_grid(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2D positional encoding, half the channels per image axis."""
    quarter = dim // 4
    freq = torch.exp(
        torch.arange(quarter, dtype=torch.float32)
        * (-math.log(10000.0) / max(quarter - 1, 1))
    )
    ys = torch.arange(h, dtype=torch.float32)[:, None] * freq[None, :]
    xs = torch.arange(w, dtype=torch.float32)[:, None] * freq[None, :]
    py = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)
    px = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)
    grid = torch.cat(
        [
            py[:, None, :].expand(h, w, dim // 2),
            px[None, :, :].expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return grid.reshape(1, h * w, dim)


class _TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=0.0, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm1(tokens)
        attended, _ = self.attn(h, h, h, need_weights=False)
        tokens = tokens + attended
        return tokens + self.mlp(self.norm2(tokens))


class Vit2dEncoder(nn.Module):
    """Slicewise 2D transformer; layer 1 is the patch embedding, layers 2..
    depth+1 are the transformer blocks. The z axis is never downsampled.
    """

    def __init__(self) -> None:
        super().__init__()
        self.patch_embed = nn.Conv2d(1, _VIT_DIM, kernel_size=_VIT_PATCH, stride=_VIT_PATCH)
        self.blocks = nn.ModuleList(
            _TransformerBlock(_VIT_DIM, _VIT_HEADS) for _ in range(_VIT_DEPTH)
        )

    def layer_output(self, x: torch.Tensor, layer_index: int) -> torch.Tensor:
        """Run the encoder slicewise up to a layer.

        Args:
            x: input of shape (1, 1, Z, Y, X).
            layer_index: 1 for the patch embedding, 2..depth+1 for blocks.

        Returns:
            Feature map of shape (1, dim, Z, ceil(Y/16), ceil(X/16)).
        """
        if not 1 <= layer_index <= len(self.blocks) + 1:
            raise LayerRangeError(
                f"layer {layer_index} out of range 1..{len(self.blocks) + 1}"
            )
        _, _, nz, ny, nx = x.shape
        pad_y = (-ny) % _VIT_PATCH
        pad_x = (-nx) % _VIT_PATCH
        slices = x[0].permute(1, 0, 2, 3)
        if pad_y or pad_x:
            slices = F.pad(slices, (0, pad_x, 0, pad_y))
        embedded = self.patch_embed(slices)
        _, _, h, w = embedded.shape
        if layer_index == 1:
            return embedded.permute(1, 0, 2, 3)[None]
        tokens = embedded.flatten(2).transpose(1, 2)
        tokens = tokens + _sinusoidal_grid(h, w, _VIT_DIM).to(tokens.dtype)
        for i, block in enumerate(self.blocks, start=2):
            tokens = block(tokens)
            if i == layer_index:
                break
        feat = tokens.transpose(1, 2).reshape(nz, _VIT_DIM, h, w)
        return feat.permute(1, 0, 2, 3)[None]

    @staticmethod
    def layer_table() -> tuple[dict, ...]:
        rows = [{"index": 1, "channels": _VIT_DIM, "downsample": (_VIT_PATCH, _VIT_PATCH, 1)}]
        for i in range(2, _VIT_DEPTH + 2):
            rows.append(
                {"index": i, "channels": _VIT_DIM, "downsample": (_VIT_PATCH, _VIT_PATCH, 1)}
            )
        return tuple(rows)


_REGISTRY = {
    "m730": M730Encoder,
    "vit2d": Vit2dEncoder,
}


def model_ids() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def _require_model(model_id: str) -> type:
    try:
        return _REGISTRY[model_id]
    except KeyError:
        raise UnknownModelError(
            f"unknown model {model_id!r}; available: {', '.join(model_ids())}"
        ) from None


def layer_table(model_id: str) -> tuple[dict, ...]:
    """Per-layer channel counts and per-axis (x, y, z) downsample factors.

    Args:
        model_id: registered model name.

    Returns:
        Tuple of rows, each {"index", "channels", "downsample"}.
    """
    return _require_model(model_id).layer_table()


def _seed_for(model_id: str) -> int:
    digest = hashlib.sha256(model_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def build_model(model_id: str) -> nn.Module:
    """Construct a model with its deterministic frozen weights.

    Convolution and linear weights are Kaiming-normal with a small positive
    bias; all parameters derive from a generator seeded by the model id, so
    repeated builds are bit-identical.

    Args:
        model_id: registered model name.

    Returns:
        The encoder in eval mode.
    """
    cls = _require_model(model_id)
    torch.manual_seed(_seed_for(model_id))
    model = cls()
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
            if module.bias is not None:
                nn.init.constant_(module.bias, 0.01)
    model.eval()
    return model
