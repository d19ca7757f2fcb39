"""Forward-only Vision Transformer encoder with parameters loaded from an
NSTA archive: patchify, linear embedding, interpolated positional grid,
pre-norm attention/MLP blocks with optional LayerScale, CLS + GAP outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .archive import load_tensor_archive, save_tensor_archive
from .errors import MissingTensor, NonDivisibleInput, ShapeMismatch
from .patching import resize_bilinear


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 504
    patch_size: int = 14
    embed_dim: int = 1024
    depth: int = 24
    num_heads: int = 16
    mlp_ratio: float = 4.0
    pretrain_grid: int = 16

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise NonDivisibleInput(
                f"image_size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise NonDivisibleInput(
                f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ShapeMismatch("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "pretrain_grid": self.pretrain_grid,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def required_tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, p = config.embed_dim, config.patch_size
    hidden = int(config.mlp_ratio * d)
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3 * p * p),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (1 + config.pretrain_grid ** 2, d),
        "norm.weight": (d,),
        "norm.bias": (d,),
    }
    for i in range(config.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.weight"] = (d,)
        shapes[b + "ln1.bias"] = (d,)
        shapes[b + "attn.qkv.weight"] = (3 * d, d)
        shapes[b + "attn.qkv.bias"] = (3 * d,)
        shapes[b + "attn.proj.weight"] = (d, d)
        shapes[b + "attn.proj.bias"] = (d,)
        shapes[b + "ln2.weight"] = (d,)
        shapes[b + "ln2.bias"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (hidden, d)
        shapes[b + "mlp.fc1.bias"] = (hidden,)
        shapes[b + "mlp.fc2.weight"] = (d, hidden)
        shapes[b + "mlp.fc2.bias"] = (d,)
    return shapes


def load_encoder(archive_bytes: bytes) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    """Load and validate encoder parameters from NSTA bytes."""
    metadata, tensors = load_tensor_archive(archive_bytes)
    config = EncoderConfig.from_dict(metadata)
    for name, shape in required_tensor_shapes(config).items():
        if name not in tensors:
            raise MissingTensor(name)
        if tensors[name].shape != shape:
            raise ShapeMismatch(
                f"{name}: expected {shape}, got {tensors[name].shape}"
            )
    for i in range(config.depth):
        for ls in (f"blocks.{i}.ls1.gamma", f"blocks.{i}.ls2.gamma"):
            if ls in tensors and tensors[ls].shape != (config.embed_dim,):
                raise ShapeMismatch(f"{ls}: expected ({config.embed_dim},)")
    return config, tensors


def save_encoder(config: EncoderConfig, tensors: dict[str, np.ndarray]) -> bytes:
    return save_tensor_archive(config.to_dict(), tensors)


def random_encoder_params(
    config: EncoderConfig, seed: int = 0, scale: float = 0.02
) -> dict[str, np.ndarray]:
    """Seeded random parameters with the full required tensor set."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in required_tensor_shapes(config).items():
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "norm.weight":
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") or name == "norm.bias":
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(0, scale, shape).astype(np.float32)
    return params


# --- forward ops ---

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a (3, S, S) image into row-major patch vectors.

    Each patch flattens in (channel, row, col) order, so the result is
    (N, 3 * p * p) with N = (S / p)^2.
    """
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise NonDivisibleInput(f"image {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(c, gh, patch_size, gw, patch_size)
    patches = patches.transpose(1, 3, 0, 2, 4)
    return patches.reshape(gh * gw, c * patch_size * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    n, vec = patches.shape
    g = int(round(np.sqrt(n)))
    out = patches.reshape(g, g, channels, patch_size, patch_size)
    out = out.transpose(2, 0, 3, 1, 4)
    return out.reshape(channels, g * patch_size, g * patch_size)


def interpolate_pos_grid(pos_grid: np.ndarray, src_side: int, dst_side: int) -> np.ndarray:
    """Bilinearly resample a (src^2, D) positional grid to (dst^2, D)."""
    if src_side == dst_side:
        return pos_grid
    d = pos_grid.shape[1]
    grid = pos_grid.reshape(src_side, src_side, d).transpose(2, 0, 1)
    resized = resize_bilinear(grid, dst_side, dst_side)
    return resized.transpose(1, 2, 0).reshape(dst_side * dst_side, d)


def embed_tokens(
    patches: np.ndarray, params: dict[str, np.ndarray], config: EncoderConfig
) -> np.ndarray:
    """Linear patch embedding plus CLS token plus positional rows."""
    w = params["patch_embed.weight"].astype(np.float64)
    b = params["patch_embed.bias"].astype(np.float64)
    if patches.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"patch vectors of length {patches.shape[1]}, expected {w.shape[1]}"
        )
    tokens = patches.astype(np.float64) @ w.T + b
    cls = params["cls_token"].astype(np.float64)
    seq = np.vstack([cls, tokens])

    pos = params["pos_embed"].astype(np.float64)
    grid_rows = interpolate_pos_grid(pos[1:], config.pretrain_grid, config.grid)
    seq[0] += pos[0]
    seq[1:] += grid_rows
    return seq


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Per-token normalization over the feature axis (population variance)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def multi_head_attention(
    x: np.ndarray,
    qkv_weight: np.ndarray,
    qkv_bias: np.ndarray,
    proj_weight: np.ndarray,
    proj_bias: np.ndarray,
    num_heads: int,
) -> np.ndarray:
    """Scaled dot-product attention over a (T, D) token sequence."""
    t, d = x.shape
    head_dim = d // num_heads
    qkv = x @ qkv_weight.T.astype(np.float64) + qkv_bias.astype(np.float64)
    q, k, v = np.split(qkv, 3, axis=-1)

    def heads(m):
        return m.reshape(t, num_heads, head_dim).transpose(1, 0, 2)

    q, k, v = heads(q), heads(k), heads(v)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(head_dim)
    attn = softmax_rows(scores)
    out = attn @ v
    out = out.transpose(1, 0, 2).reshape(t, d)
    return out @ proj_weight.T.astype(np.float64) + proj_bias.astype(np.float64)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def transformer_block(
    x: np.ndarray, params: dict[str, np.ndarray], index: int, config: EncoderConfig
) -> np.ndarray:
    """Pre-norm residual block with optional LayerScale gammas."""
    b = f"blocks.{index}."
    h = layer_norm(x, params[b + "ln1.weight"], params[b + "ln1.bias"])
    h = multi_head_attention(
        h,
        params[b + "attn.qkv.weight"],
        params[b + "attn.qkv.bias"],
        params[b + "attn.proj.weight"],
        params[b + "attn.proj.bias"],
        config.num_heads,
    )
    if b + "ls1.gamma" in params:
        h = h * params[b + "ls1.gamma"].astype(np.float64)
    x = x + h

    h = layer_norm(x, params[b + "ln2.weight"], params[b + "ln2.bias"])
    h = h @ params[b + "mlp.fc1.weight"].T.astype(np.float64) + params[b + "mlp.fc1.bias"].astype(np.float64)
    h = gelu(h)
    h = h @ params[b + "mlp.fc2.weight"].T.astype(np.float64) + params[b + "mlp.fc2.bias"].astype(np.float64)
    if b + "ls2.gamma" in params:
        h = h * params[b + "ls2.gamma"].astype(np.float64)
    return x + h


def encoder_forward(
    image: np.ndarray, params: dict[str, np.ndarray], config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the full encoder on a (3, S, S) image.

    Returns (cls, patch_tokens, gap) as float32; gap is the mean of the
    patch tokens only (CLS excluded).
    """
    if image.shape != (3, config.image_size, config.image_size):
        raise ShapeMismatch(
            f"image shape {image.shape}, expected (3, {config.image_size}, {config.image_size})"
        )
    patches = patchify(image, config.patch_size)
    x = embed_tokens(patches, params, config)
    for i in range(config.depth):
        x = transformer_block(x, params, i, config)
    x = layer_norm(x, params["norm.weight"], params["norm.bias"])
    cls, patch_tokens = x[0], x[1:]
    gap = patch_tokens.mean(axis=0)
    return cls.astype(np.float32), patch_tokens.astype(np.float32), gap.astype(np.float32)
