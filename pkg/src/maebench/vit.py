"""Vision Transformer building blocks.

Images are ``[c, H, W]`` (or batched ``[b, c, H, W]``) float arrays. They
are cut into non-overlapping square patches in row-major patch order, each
flattened as ``(row, col, channel)``. Patch vectors are projected to tokens,
offset by fixed 2-D sine-cosine positional embeddings, and processed by
pre-norm Transformer blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module
from .rng import truncated_normal
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 32
    patch_side: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    in_channels: int = 1
    class_token: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid ViT configuration", details=problems)

    def problems(self) -> list:
        out = []
        for name in ("image_side", "patch_side", "embed_dim", "num_heads", "in_channels"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.depth < 0:
            out.append("depth must be >= 0")
        if self.mlp_ratio <= 0:
            out.append("mlp_ratio must be > 0")
        if self.patch_side >= 1 and self.image_side % self.patch_side:
            out.append(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.num_heads >= 1 and self.embed_dim % self.num_heads:
            out.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        return out

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2 * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ViTConfig":
        return replace(self, **changes)


PRESETS = {
    "paper-encoder": ViTConfig(image_side=224, patch_side=16, embed_dim=1024, depth=24, num_heads=16),
    "paper-decoder": ViTConfig(image_side=224, patch_side=16, embed_dim=512, depth=8, num_heads=16),
    "desk-tiny": ViTConfig(image_side=32, patch_side=4, embed_dim=64, depth=4, num_heads=4),
    "desk-tiny-decoder": ViTConfig(image_side=32, patch_side=4, embed_dim=32, depth=2, num_heads=4),
}

# decoder paired with each encoder preset when no decoder preset is named
DECODER_FOR = {"paper-encoder": "paper-decoder", "desk-tiny": "desk-tiny-decoder"}


def preset(name: str) -> ViTConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}", details=sorted(PRESETS)) from None


# -- patches -------------------------------------------------------------
def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """``[c, H, W] -> [n, p*p*c]`` (or batched ``[b, c, H, W] -> [b, n, p*p*c]``)."""
    images = np.asarray(images)
    batched = images.ndim == 4
    if not batched:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"patchify expects [c,H,W] or [b,c,H,W], got {images.shape}")
    b, c, h, w = images.shape
    p = patch_side
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch side {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
    out = x.reshape(b, gh * gw, p * p * c)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, patch_side: int, height: int, width: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
    b, n, d = patches.shape
    p = patch_side
    if height % p or width % p:
        raise ShapeError(f"image {height}x{width} not divisible by patch side {p}")
    gh, gw = height // p, width // p
    if n != gh * gw or d % (p * p):
        raise ShapeError(
            f"{n} patches of {d} values cannot form a {height}x{width} image with patch {p}"
        )
    c = d // (p * p)
    x = patches.reshape(b, gh, gw, p, p, c).transpose(0, 5, 1, 3, 2, 4)
    out = x.reshape(b, c, height, width)
    return out if batched else out[0]


def sincos_pos_embed(embed_dim: int, grid_side: int, class_token: bool = False) -> np.ndarray:
    """Fixed 2-D sine-cosine table, ``[grid_side**2 (+1), embed_dim]``.

    The first half of the channels encodes the column coordinate, the second
    half the row coordinate; each half is ``[sin(pos*w), cos(pos*w)]`` with
    frequencies ``w_k = 10000**(-k / (D/4))``. The class-token row is zeros.
    """
    if embed_dim % 4:
        raise ConfigError(f"sine-cosine embedding needs embed_dim divisible by 4, got {embed_dim}")
    rows, cols = np.meshgrid(np.arange(grid_side, dtype=np.float64),
                             np.arange(grid_side, dtype=np.float64), indexing="ij")
    quarter = embed_dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([encode(cols), encode(rows)], axis=1)
    if class_token:
        table = np.concatenate([np.zeros((1, embed_dim)), table], axis=0)
    return table


def embed_patches(patches: Tensor, projection: Linear, pos_embed: np.ndarray,
                  cls_token: Tensor | None = None) -> Tensor:
    """Project patch vectors and add positions; optionally prepend the class token.

    ``pos_embed`` has one row per patch, plus a leading class-token row when
    ``cls_token`` is given.
    """
    if patches.shape[-1] != projection.in_features:
        raise ShapeError(
            f"patch vectors have {patches.shape[-1]} values, projection expects {projection.in_features}"
        )
    n = patches.shape[-2]
    offset = 1 if cls_token is not None else 0
    if pos_embed.shape[0] != n + offset:
        raise ShapeError(f"pos_embed has {pos_embed.shape[0]} rows for {n} patches (+{offset})")
    pos = pos_embed.astype(patches.dtype, copy=False)
    x = projection(patches) + Tensor(pos[offset:])
    if cls_token is None:
        return x
    cls = cls_token + Tensor(pos[:1])
    return prepend_token(x, cls)


def prepend_token(x: Tensor, token: Tensor) -> Tensor:
    """``x [b, n, d]`` with ``token [1, d]`` -> ``[b, n+1, d]``."""
    b, _, d = x.shape
    tok = T.broadcast_to(T.reshape(token, (1, 1, d)), (b, 1, d))
    return T.concat([tok, x], axis=1)


# -- blocks --------------------------------------------------------------
class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng):
        if dim % num_heads:
            raise ConfigError(f"embed_dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._last_weights = None

    @property
    def last_weights(self) -> np.ndarray | None:
        """Attention probabilities ``[b, heads, n, n]`` from the most recent call."""
        return self._last_weights

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.num_heads, self.head_dim
        qkv = T.transpose(T.reshape(self.qkv(x), (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (dh ** -0.5)
        weights = T.softmax(scores, axis=-1)
        self._last_weights = weights.data
        out = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm residual block: ``x + attn(ln(x))`` then ``+ mlp(ln(.))``."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def attention_block(tokens: Tensor, block: Block) -> Tensor:
    return block(tokens)


class ViTEncoder(Module):
    """Patch projection, optional class token, ``depth`` blocks and a final norm."""

    def __init__(self, config: ViTConfig, rng):
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng)
        if config.class_token:
            self.cls_token = Tensor(
                truncated_normal(rng, (1, d), dtype=T.get_default_dtype()), requires_grad=True
            )
        else:
            self.cls_token = None
        self._pos_embed = sincos_pos_embed(d, config.grid_side, config.class_token).astype(
            T.get_default_dtype()
        )
        self.blocks = [Block(d, config.num_heads, config.mlp_ratio, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(d)

    @property
    def pos_embed(self) -> np.ndarray:
        return self._pos_embed

    @property
    def prefix_tokens(self) -> int:
        return 1 if self.cls_token is not None else 0

    def embed(self, patches: Tensor) -> Tensor:
        """Patch tokens with positions, ``[b, n, d]``; class token not yet attached."""
        off = self.prefix_tokens
        return self.patch_embed(patches) + Tensor(self._pos_embed[off:].astype(patches.dtype, copy=False))

    def attach_cls(self, x: Tensor) -> Tensor:
        if self.cls_token is None:
            return x
        cls = self.cls_token + Tensor(self._pos_embed[:1].astype(x.dtype, copy=False))
        return prepend_token(x, cls)

    def encode(self, tokens: Tensor) -> Tensor:
        """Run the blocks and final norm on any number of tokens (shape-preserving)."""
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)

    def forward(self, images) -> Tensor:
        """All-visible forward pass: ``[b, c, H, W] -> [b, prefix + n, d]``."""
        patches = Tensor(patchify(_as_array(images), self.config.patch_side))
        return self.encode(self.attach_cls(self.embed(patches)))

    def features(self, images, pool: str | None = None) -> Tensor:
        """Pooled image representation ``[b, d]``.

        ``pool="cls"`` takes the class-token output, ``"mean"`` averages the
        patch tokens. ``None`` picks the class token when there is one.
        """
        tokens = self.forward(images)
        if pool is None:
            pool = "cls" if self.cls_token is not None else "mean"
        if pool == "cls":
            if self.cls_token is None:
                raise ConfigError("class-token pooling on an encoder without a class token")
            return tokens[:, 0, :]
        return T.mean(tokens[:, self.prefix_tokens:, :], axis=1)


def encoder_forward(tokens: Tensor, encoder: ViTEncoder) -> Tensor:
    return encoder.encode(tokens)


def _as_array(images) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(T.get_default_dtype(), copy=False)
