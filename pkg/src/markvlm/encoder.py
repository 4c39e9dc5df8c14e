"""Shared multi-scale visual encoding.

Two architecturally distinct toy encoders look at every input: a conv net
(two stride-2 patchified conv stages, a pointwise stage, then average-pool)
and a patch transformer (linear patch embedding plus one self-attention
block, then average-pool). Each runs on every configured downsample of the
image and emits a (token_grid^2, embed_dim) token grid; the outputs are
concatenated channel-wise, scale-major and encoder-minor with the conv
encoder first, giving (token_grid^2, n_encoders * embed_dim * n_scales).

The same parameter tensors serve the camera image and the prompt raster, so
both views are embedded by one set of weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .prompts import Level
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    tensor,
    transpose_last,
)

N_ENCODERS = 2
_CONV_STRIDES = 4  # two stride-2 stages


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: tuple[int, int, int] = (8, 16, 16)
    patch_size: int = 4
    embed_dim: int = 16
    token_grid: int = 8
    scales: tuple[int, ...] = (1, 2)

    def __post_init__(self) -> None:
        if len(self.conv_channels) != 3 or any(c < 1 for c in self.conv_channels):
            raise EncoderConfigError(f"conv_channels must be 3 positive ints, got {self.conv_channels}")
        if self.conv_channels[-1] != self.embed_dim:
            raise EncoderConfigError(
                f"last conv channel count ({self.conv_channels[-1]}) must equal embed_dim ({self.embed_dim})"
            )
        if self.patch_size < 1 or self.embed_dim < 1 or self.token_grid < 1:
            raise EncoderConfigError("patch_size, embed_dim and token_grid must be positive")
        if not self.scales or any(s < 1 for s in self.scales):
            raise EncoderConfigError(f"scales must be positive ints, got {self.scales}")
        if len(set(self.scales)) != len(self.scales):
            raise EncoderConfigError(f"duplicate scales: {self.scales}")

    @property
    def total_dim(self) -> int:
        return N_ENCODERS * self.embed_dim * len(self.scales)

    @property
    def pad_multiple(self) -> int:
        """Side length quantum making every scale/grid division exact."""
        return self.token_grid * math.lcm(_CONV_STRIDES, self.patch_size) * math.lcm(*self.scales)

    def padded_side(self, height: int, width: int) -> int:
        m = self.pad_multiple
        return m * max(1, math.ceil(max(height, width) / m))


@dataclass
class MoVFeatures:
    tokens: Tensor  # (token_grid^2, total_dim)
    grid: int
    dim: int
    level: Level | None = None


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool an (H, W, 3) array with window == stride == factor."""
    if factor == 1:
        return np.array(image, dtype=np.float64)
    return avg_pool2d(tensor(image), factor).data


def pad_to_square(image: np.ndarray, side: int) -> np.ndarray:
    h, w, c = image.shape
    if h > side or w > side:
        raise EncoderConfigError(f"image {h}x{w} larger than target side {side}")
    out = np.zeros((side, side, c), dtype=np.float64)
    out[:h, :w] = image
    return out


def patchify(x: Tensor, k: int) -> Tensor:
    """(H, W, C) -> (H/k * W/k, k*k*C), patch contents in row-major order."""
    h, w, c = x.shape
    if h % k or w % k:
        raise EncoderConfigError(f"patchify: {k} does not divide {(h, w)}")
    a, b = h // k, w // k
    t = reshape(x, (a, k, b * k * c))
    t = transpose_last(t)             # (a, b*k*c, k)
    t = reshape(t, (a, b, k * c, k))
    t = transpose_last(t)             # (a, b, k, k*c)
    return reshape(t, (a * b, k * k * c))


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh weights for both encoders, keyed by dotted names."""
    c1, c2, c3 = cfg.conv_channels
    e = cfg.embed_dim
    p = cfg.patch_size

    def w(shape):
        return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)

    params: dict[str, np.ndarray] = {
        "conv.stage1.w": w((12, c1)),
        "conv.stage1.b": np.zeros(c1),
        "conv.stage2.w": w((4 * c1, c2)),
        "conv.stage2.b": np.zeros(c2),
        "conv.stage3.w": w((c2, c3)),
        "conv.stage3.b": np.zeros(c3),
        "patch.embed.w": w((p * p * 3, e)),
        "patch.embed.b": np.zeros(e),
        "patch.ln1.gain": np.ones(e),
        "patch.ln1.bias": np.zeros(e),
        "patch.attn.wq": w((e, e)),
        "patch.attn.bq": np.zeros(e),
        "patch.attn.wk": w((e, e)),
        "patch.attn.bk": np.zeros(e),
        "patch.attn.wv": w((e, e)),
        "patch.attn.bv": np.zeros(e),
        "patch.attn.wo": w((e, e)),
        "patch.ln2.gain": np.ones(e),
        "patch.ln2.bias": np.zeros(e),
        "patch.ff.w1": w((e, 2 * e)),
        "patch.ff.b1": np.zeros(2 * e),
        "patch.ff.w2": w((2 * e, e)),
        "patch.ff.b2": np.zeros(e),
    }
    return params


def _affine(x: Tensor, params: Mapping[str, Tensor], stem: str) -> Tensor:
    return add(matmul(x, params[f"{stem}.w"]), params[f"{stem}.b"])


def _pool_tokens(tokens: Tensor, grid: int, target: int, dim: int) -> Tensor:
    if grid == target:
        return tokens
    spatial = reshape(tokens, (grid, grid, dim))
    pooled = avg_pool2d(spatial, grid // target)
    return reshape(pooled, (target * target, dim))


def _conv_path(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    side = x.shape[0]
    c1, c2, _ = cfg.conv_channels
    t = gelu(_affine(patchify(x, 2), params, "conv.stage1"))
    t = gelu(_affine(patchify(reshape(t, (side // 2, side // 2, c1)), 2), params, "conv.stage2"))
    t = gelu(_affine(t, params, "conv.stage3"))
    return _pool_tokens(t, side // _CONV_STRIDES, cfg.token_grid, cfg.embed_dim)


def _patch_path(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    side = x.shape[0]
    e = cfg.embed_dim
    tok = _affine(patchify(x, cfg.patch_size), params, "patch.embed")
    h = layer_norm(tok, params["patch.ln1.gain"], params["patch.ln1.bias"])
    q = add(matmul(h, params["patch.attn.wq"]), params["patch.attn.bq"])
    k = add(matmul(h, params["patch.attn.wk"]), params["patch.attn.bk"])
    v = add(matmul(h, params["patch.attn.wv"]), params["patch.attn.bv"])
    scores = mul(matmul(q, transpose_last(k)), tensor(1.0 / math.sqrt(e)))
    tok = add(tok, matmul(matmul(softmax(scores), v), params["patch.attn.wo"]))
    h = layer_norm(tok, params["patch.ln2.gain"], params["patch.ln2.bias"])
    inner = gelu(add(matmul(h, params["patch.ff.w1"]), params["patch.ff.b1"]))
    tok = add(tok, add(matmul(inner, params["patch.ff.w2"]), params["patch.ff.b2"]))
    return _pool_tokens(tok, side // cfg.patch_size, cfg.token_grid, e)


def encode(
    image: np.ndarray,
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    level: Level | None = None,
) -> MoVFeatures:
    """Run both encoders over every scale of `image`.

    The input is zero-padded to a square side that every scale divides
    cleanly; the output token count is always token_grid^2 regardless of the
    input size.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise EncoderConfigError(f"encode expects (H, W, 3), got {arr.shape}")
    side = cfg.padded_side(arr.shape[0], arr.shape[1])
    padded = pad_to_square(arr, side)
    blocks: list[Tensor] = []
    for s in cfg.scales:
        x = tensor(downsample(padded, s))
        blocks.append(_conv_path(x, params, cfg))
        blocks.append(_patch_path(x, params, cfg))
    tokens = concat(blocks, axis=1)
    return MoVFeatures(tokens=tokens, grid=cfg.token_grid, dim=cfg.total_dim, level=level)
