"""A small configurable Vision-Transformer family.

Supports three forward modes: full tokens, visible-tokens-only, and a
prefix-truncated forward that never executes blocks above the stop layer.
Per-block outputs (taps) can be collected for feature alignment.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 0  # 0: no classifier head

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(self.width * self.mlp_ratio)

    def param_count(self) -> int:
        """Exact trainable-parameter count implied by this config."""
        c, p, L = self.width, self.patch_dim, self.num_patches
        n = p * c + c  # patch embedding
        n += c + (L + 1) * c  # class token + positional table
        per_block = (
            2 * c  # norm1
            + c * 3 * c + 3 * c  # qkv
            + c * c + c  # attn out
            + 2 * c  # norm2
            + c * self.mlp_hidden + self.mlp_hidden  # fc1
            + self.mlp_hidden * c + c  # fc2
        )
        n += self.depth * per_block
        n += 2 * c  # final norm
        if self.num_classes:
            n += c * self.num_classes + self.num_classes
        return n


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(3, H, W) -> (L, 3*p*p) rows in row-major patch order; batched input allowed."""
    batched = image.ndim == 4
    x = image if batched else image[None]
    b, ch, h, w = x.shape
    if ch != 3:
        raise ValueError(f"expected 3 channels, got {ch}")
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    out = x.reshape(b, 3, gh, patch_size, gw, patch_size)
    out = out.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, 3 * patch_size * patch_size)
    return out if batched else out[0]


def unpatchify(rows: np.ndarray, patch_size: int, image_size: int) -> np.ndarray:
    """Inverse of patchify, bit-exact."""
    batched = rows.ndim == 3
    x = rows if batched else rows[None]
    g = image_size // patch_size
    b = x.shape[0]
    if x.shape[1] != g * g or x.shape[2] != 3 * patch_size * patch_size:
        raise ValueError(f"rows {x.shape[1:]} inconsistent with image {image_size}, patch {patch_size}")
    out = x.reshape(b, g, g, 3, patch_size, patch_size).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(b, 3, image_size, image_size)
    return out if batched else out[0]


class Linear:
    def __init__(self, params: "ParamRegistry", name: str, d_in: int, d_out: int, rng, dtype):
        self.w = params.add(f"{name}.w", rng.normal(0.0, 0.02, (d_in, d_out)).astype(dtype))
        self.b = params.add(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        y = T.matmul(flat, self.w) + self.b
        return y.reshape(lead + (self.w.shape[1],)) if x.ndim != 2 else y


class LayerNorm:
    def __init__(self, params: "ParamRegistry", name: str, dim: int, dtype, eps: float = 1e-6):
        self.g = params.add(f"{name}.g", np.ones(dim, dtype=dtype))
        self.b = params.add(f"{name}.b", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b, self.eps)


class Attention:
    def __init__(self, params, name, width: int, heads: int, rng, dtype):
        self.heads = heads
        self.head_dim = width // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.qkv = Linear(params, f"{name}.qkv", width, 3 * width, rng, dtype)
        self.out = Linear(params, f"{name}.out", width, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x).reshape((b, t, 3, self.heads, self.head_dim))
        qkv = qkv.transpose((2, 0, 3, 1, 4))  # (3, B, H, T, hd)
        q = T.slice_axis(qkv, 0, 0, 1).reshape((b, self.heads, t, self.head_dim))
        k = T.slice_axis(qkv, 0, 1, 2).reshape((b, self.heads, t, self.head_dim))
        v = T.slice_axis(qkv, 0, 2, 3).reshape((b, self.heads, t, self.head_dim))
        attn = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * self.scale, axis=-1)
        y = T.matmul(attn, v).transpose((0, 2, 1, 3)).reshape((b, t, c))
        return self.out(y)


class TransformerBlock:
    def __init__(self, params, name, width, heads, mlp_hidden, rng, dtype):
        self.norm1 = LayerNorm(params, f"{name}.norm1", width, dtype)
        self.attn = Attention(params, f"{name}.attn", width, heads, rng, dtype)
        self.norm2 = LayerNorm(params, f"{name}.norm2", width, dtype)
        self.fc1 = Linear(params, f"{name}.mlp.fc1", width, mlp_hidden, rng, dtype)
        self.fc2 = Linear(params, f"{name}.mlp.fc2", mlp_hidden, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class ParamRegistry:
    """Ordered, uniquely named trainable tensors of one model."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def param_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> list[str]:
        """Copy arrays into matching params; returns the names that were loaded."""
        loaded = []
        for name, t in self._params.items():
            key = prefix + name
            if key in arrays:
                src = arrays[key]
                if src.shape != t.data.shape:
                    raise ValueError(f"shape mismatch for {key}: {src.shape} vs {t.data.shape}")
                t.data = src.astype(t.data.dtype).copy()
                loaded.append(name)
            elif strict:
                raise KeyError(f"missing parameter {key!r} in checkpoint")
        return loaded


class ViTModel:
    """Patch-embedding transformer encoder with optional classifier head."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.params = ParamRegistry()
        c = config.width
        self.patch_embed = Linear(self.params, "patch_embed", config.patch_dim, c, rng, dtype)
        self.cls_token = self.params.add("cls_token", rng.normal(0.0, 0.02, (1, 1, c)).astype(dtype))
        self.pos_embed = self.params.add(
            "pos_embed", rng.normal(0.0, 0.02, (config.num_patches + 1, c)).astype(dtype)
        )
        self.blocks = [
            TransformerBlock(self.params, f"blocks.{i}", c, config.heads, config.mlp_hidden, rng, dtype)
            for i in range(config.depth)
        ]
        self.final_norm = LayerNorm(self.params, "norm", c, dtype)
        self.head = (
            Linear(self.params, "head", c, config.num_classes, rng, dtype) if config.num_classes else None
        )
        self.last_blocks_executed = 0

    # -- token assembly ----------------------------------------------------
    def embed_patches(self, patch_rows: np.ndarray, positions: np.ndarray) -> Tensor:
        """Project patch rows, add positional embeddings by original position,
        and prepend the class token: (B, K, 3p^2) -> (B, K+1, C)."""
        if patch_rows.ndim != 3 or positions.ndim != 2:
            raise T.ShapeError(f"expected batched rows/positions, got {patch_rows.shape}/{positions.shape}")
        b = patch_rows.shape[0]
        x = self.patch_embed(Tensor(patch_rows))
        x = x + T.embedding_rows(self.pos_embed, positions + 1)
        cls = self.cls_token + T.slice_axis(self.pos_embed, 0, 0, 1)
        cls = T.broadcast_to(cls, (b, 1, self.config.width))
        return T.concat([cls, x], axis=1)

    def embed_image(self, images: np.ndarray) -> Tensor:
        """Full-token embedding of (B, 3, H, W) images (no masking)."""
        rows = patchify(images, self.config.patch_size)
        pos = np.broadcast_to(np.arange(self.config.num_patches), rows.shape[:2])
        return self.embed_patches(rows, pos)

    # -- forward modes -------------------------------------------------------
    def forward_visible(self, tokens: Tensor, want_taps: bool = False):
        """Run every block over the given tokens; returns (pre-norm output, taps).

        taps[l-1] is the output of block l (before the final norm); empty list
        unless requested.
        """
        return self._run(tokens, stop_layer=self.config.depth, want_taps=want_taps)

    def forward_truncated(self, tokens: Tensor, stop_layer: int) -> Tensor:
        """Execute only blocks 1..stop_layer and return that tap."""
        if not 1 <= stop_layer <= self.config.depth:
            raise ValueError(f"stop_layer {stop_layer} out of range 1..{self.config.depth}")
        out, _ = self._run(tokens, stop_layer=stop_layer, want_taps=False)
        return out

    def _run(self, tokens: Tensor, stop_layer: int, want_taps: bool):
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.width:
            raise T.ShapeError(f"tokens {tokens.shape} do not match model width {self.config.width}")
        taps: list[Tensor] = []
        x = tokens
        executed = 0
        for block in self.blocks[:stop_layer]:
            x = block(x)
            executed += 1
            if want_taps:
                taps.append(x)
        self.last_blocks_executed = executed
        return x, taps

    def classify(self, images: np.ndarray) -> Tensor:
        """Logits from the class-token feature after the final norm."""
        if self.head is None:
            raise ValueError("model has no classifier head (num_classes == 0)")
        x, _ = self.forward_visible(self.embed_image(images))
        x = self.final_norm(x)
        cls = T.slice_axis(x, 1, 0, 1).reshape((x.shape[0], self.config.width))
        return self.head(cls)


def flops_forward(config: ViTConfig, n_tokens: int, n_blocks: int | None = None) -> float:
    """Closed-form forward FLOP estimate for running n_blocks over n_tokens."""
    c, t = config.width, n_tokens
    blocks = config.depth if n_blocks is None else n_blocks
    per_block = 2 * t * c * (3 * c) + 2 * t * c * c  # qkv + out projections
    per_block += 2 * 2 * t * t * c  # attention scores + weighted sum
    per_block += 2 * 2 * t * c * config.mlp_hidden  # mlp
    embed = 2 * t * config.patch_dim * c
    return float(blocks * per_block + embed)
