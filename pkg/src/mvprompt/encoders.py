"""Toy, seed-initialized encoders behind pluggable interfaces.

All encoders are deterministic pure functions of their weights and inputs.
Weights are float64 torch tensors drawn from per-component derived seeds;
pretrained backends can be swapped in by loading a checkpoint with the same
array names (see `checkpoint`).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, ShapeError
from .seeding import derive_seed, string_seed, torch_generator

HIDDEN_TOKEN_COUNT = 257  # 1 class token + 16x16 patch grid
LOCAL_TOKEN_COUNT = 16


def image_content_hash(rgb: np.ndarray) -> str:
    arr = np.ascontiguousarray(rgb, dtype=np.float64)
    return hashlib.blake2b(arr.tobytes(), digest_size=16).hexdigest()


def _randn(gen: torch.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


def _as_image_tensor(rgb) -> torch.Tensor:
    t = torch.tensor(np.asarray(rgb, dtype=np.float64), dtype=torch.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
    if t.shape[0] != t.shape[1]:
        raise ShapeError(f"expected a square image, got {tuple(t.shape)}")
    return t


@dataclass(frozen=True)
class HiddenTokens:
    """Pre-pooling image-encoder tokens: one class token plus a 16x16 patch grid."""

    tokens: torch.Tensor  # (257, d_enc)
    source_hash: str | None = None

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != HIDDEN_TOKEN_COUNT:
            raise ShapeError(
                f"hidden tokens must be ({HIDDEN_TOKEN_COUNT}, d_enc), got {tuple(self.tokens.shape)}"
            )
        if not torch.isfinite(self.tokens).all():
            raise ValueError("hidden tokens contain non-finite entries")


@dataclass(frozen=True)
class LocalTokens:
    """Resampled per-image conditioning tokens, 16 per source image."""

    tokens: torch.Tensor  # (16, d_ctx)
    source_hash: str | None = None

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != LOCAL_TOKEN_COUNT:
            raise ShapeError(
                f"local tokens must be ({LOCAL_TOKEN_COUNT}, d_ctx), got {tuple(self.tokens.shape)}"
            )


@dataclass(frozen=True)
class PixelLatent:
    """Clean autoencoder latent of a prompt image, (c, h_l, w_l)."""

    data: torch.Tensor
    source_hash: str | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"pixel latent must be (c, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("pixel latent contains non-finite entries")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def spatial(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


@dataclass(frozen=True)
class TextContext:
    """Toy text conditioning tokens, deterministic per prompt string."""

    tokens: torch.Tensor  # (T, d_ctx)
    prompt: str

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"text context must be (T, d_ctx), got {tuple(self.tokens.shape)}")


class ImageHiddenEncoder:
    """Patch-embedding encoder producing 257 hidden tokens.

    Patchify -> linear embed -> add class token -> add positional embedding ->
    per-token MLP residual. A zero image therefore lands on the pure bias
    pathway, which tests evaluate independently from the raw weights.
    """

    def __init__(self, image_size: int, patch_size: int, d_enc: int, seed: int):
        if image_size % patch_size != 0:
            raise ConfigError("image size must be divisible by the patch size")
        grid = image_size // patch_size
        if grid * grid + 1 != HIDDEN_TOKEN_COUNT:
            raise ConfigError(
                f"image {image_size} / patch {patch_size} gives {grid * grid + 1} tokens, "
                f"need {HIDDEN_TOKEN_COUNT}"
            )
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_enc = d_enc
        gen = torch_generator(seed)
        patch_dim = patch_size * patch_size * 3
        s = 1.0 / math.sqrt(patch_dim)
        self.w_embed = _randn(gen, d_enc, patch_dim, scale=s)
        self.b_embed = _randn(gen, d_enc, scale=0.1)
        self.cls_token = _randn(gen, d_enc, scale=0.5)
        self.pos_embed = _randn(gen, HIDDEN_TOKEN_COUNT, d_enc, scale=0.1)
        s = 1.0 / math.sqrt(d_enc)
        self.w1 = _randn(gen, d_enc, d_enc, scale=s)
        self.b1 = _randn(gen, d_enc, scale=0.1)
        self.w2 = _randn(gen, d_enc, d_enc, scale=s)
        self.b2 = _randn(gen, d_enc, scale=0.1)

    def named_arrays(self, prefix: str = "image_encoder") -> dict[str, torch.Tensor]:
        names = ["w_embed", "b_embed", "cls_token", "pos_embed", "w1", "b1", "w2", "b2"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def encode(self, rgb) -> HiddenTokens:
        img = _as_image_tensor(rgb)
        if img.shape[0] != self.image_size:
            raise ShapeError(
                f"encoder expects {self.image_size}x{self.image_size} images, got {tuple(img.shape)}"
            )
        p = self.patch_size
        g = self.image_size // p
        patches = img.reshape(g, p, g, p, 3).permute(0, 2, 1, 3, 4).reshape(g * g, -1)
        tok = patches @ self.w_embed.T + self.b_embed
        tok = torch.cat([self.cls_token[None, :], tok], dim=0)
        tok = tok + self.pos_embed
        tok = tok + (F.gelu(tok @ self.w1.T + self.b1) @ self.w2.T + self.b2)
        return HiddenTokens(tokens=tok, source_hash=image_content_hash(np.asarray(rgb)))


class TokenResampler:
    """Cross-attention from learned latent queries onto the hidden tokens.

    Reduces 257 input tokens to 16. No positional encoding is applied to the
    inputs, so the output is invariant to their order.
    """

    def __init__(
        self,
        d_enc: int,
        d_ctx: int,
        seed: int,
        num_queries: int = LOCAL_TOKEN_COUNT,
        expected_tokens: int | None = HIDDEN_TOKEN_COUNT,
    ):
        self.d_enc = d_enc
        self.d_ctx = d_ctx
        self.num_queries = num_queries
        self.expected_tokens = expected_tokens
        gen = torch_generator(seed)
        self.queries = _randn(gen, num_queries, d_ctx, scale=0.5)
        self.w_q = _randn(gen, d_ctx, d_ctx, scale=1.0 / math.sqrt(d_ctx))
        self.w_k = _randn(gen, d_ctx, d_enc, scale=1.0 / math.sqrt(d_enc))
        self.w_v = _randn(gen, d_ctx, d_enc, scale=1.0 / math.sqrt(d_enc))

    def named_arrays(self, prefix: str = "resampler") -> dict[str, torch.Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ["queries", "w_q", "w_k", "w_v"]}

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 2 or tokens.shape[1] != self.d_enc:
            raise ShapeError(f"expected (n, {self.d_enc}) tokens, got {tuple(tokens.shape)}")
        if self.expected_tokens is not None and tokens.shape[0] != self.expected_tokens:
            raise ShapeError(
                f"expected {self.expected_tokens} input tokens, got {tokens.shape[0]}"
            )
        q = self.queries @ self.w_q.T
        k = tokens @ self.w_k.T
        v = tokens @ self.w_v.T
        attn = torch.softmax(q @ k.T / math.sqrt(q.shape[1]), dim=-1)
        return attn @ v

    def resample(self, hidden: HiddenTokens) -> LocalTokens:
        return LocalTokens(tokens=self.forward(hidden.tokens), source_hash=hidden.source_hash)


class LocalTokenAdaptor:
    """Two-layer MLP mapping resampled tokens into the cross-attention context space."""

    def __init__(self, d_ctx: int, seed: int, hidden: int | None = None):
        self.d_ctx = d_ctx
        self.hidden = hidden or 2 * d_ctx
        gen = torch_generator(seed)
        self.w1 = _randn(gen, self.hidden, d_ctx, scale=1.0 / math.sqrt(d_ctx))
        self.b1 = _randn(gen, self.hidden, scale=0.1)
        self.w2 = _randn(gen, d_ctx, self.hidden, scale=1.0 / math.sqrt(self.hidden))
        self.b2 = _randn(gen, d_ctx, scale=0.1)

    def named_arrays(self, prefix: str = "local_adaptor") -> dict[str, torch.Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ["w1", "b1", "w2", "b2"]}

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 2 or tokens.shape[1] != self.d_ctx:
            raise ShapeError(f"expected (n, {self.d_ctx}) tokens, got {tuple(tokens.shape)}")
        return F.gelu(tokens @ self.w1.T + self.b1) @ self.w2.T + self.b2

    def adapt(self, local: LocalTokens) -> LocalTokens:
        return LocalTokens(tokens=self.forward(local.tokens), source_hash=local.source_hash)

    def zero_biases(self) -> "LocalTokenAdaptor":
        self.b1 = torch.zeros_like(self.b1)
        self.b2 = torch.zeros_like(self.b2)
        return self


class PixelAutoencoder:
    """Linear block autoencoder between images and diffusion latents.

    Encode: split the centered image into downsample x downsample blocks and
    project each 3*d*d block onto `channels` orthonormal directions; decode is
    the transpose. The first three directions are the per-channel block means
    (so decode(encode(x)) keeps the blockwise color content); any further
    directions are seed-drawn and orthogonalized against the earlier ones.
    """

    def __init__(self, image_size: int, seed: int, channels: int = 4, downsample: int = 4):
        if image_size % downsample != 0:
            raise ConfigError("image size must be divisible by the downsample factor")
        self.image_size = image_size
        self.channels = channels
        self.downsample = downsample
        self.latent_size = image_size // downsample
        block_dim = downsample * downsample * 3
        if channels > block_dim:
            raise ConfigError("latent channels cannot exceed the block dimension")
        rows = []
        for ch in range(min(3, channels)):
            row = np.zeros(block_dim)
            row[ch::3] = 1.0 / downsample  # block layout is (d, d, 3) row-major
            rows.append(row)
        gen = np.random.Generator(np.random.PCG64(seed))
        while len(rows) < channels:
            row = gen.standard_normal(block_dim)
            for prev in rows:
                row = row - (row @ prev) * prev
            rows.append(row / np.linalg.norm(row))
        self.w = torch.tensor(np.stack(rows), dtype=torch.float64)  # (c, block_dim)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.latent_size, self.latent_size)

    def named_arrays(self, prefix: str = "pixel_ae") -> dict[str, torch.Tensor]:
        return {f"{prefix}.w": self.w}

    def encode_t(self, img: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) image tensor -> (c, h_l, w_l) latent; differentiable."""
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(img.shape)}")
        if img.shape[0] != self.image_size or img.shape[1] != self.image_size:
            raise ShapeError(
                f"autoencoder expects {self.image_size}x{self.image_size}, got {tuple(img.shape)}"
            )
        d = self.downsample
        n = self.latent_size
        blocks = img.reshape(n, d, n, d, 3).permute(0, 2, 1, 3, 4).reshape(n * n, -1)
        z = (blocks - 0.5) @ self.w.T
        return z.reshape(n, n, self.channels).permute(2, 0, 1)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 3 or z.shape[0] != self.channels or z.shape[1] != self.latent_size:
            raise ShapeError(f"expected {self.latent_shape} latent, got {tuple(z.shape)}")
        d = self.downsample
        n = self.latent_size
        blocks = z.permute(1, 2, 0).reshape(n * n, self.channels) @ self.w + 0.5
        return blocks.reshape(n, n, d, d, 3).permute(0, 2, 1, 3, 4).reshape(n * d, n * d, 3)

    def encode(self, rgb) -> PixelLatent:
        img = _as_image_tensor(rgb)
        return PixelLatent(data=self.encode_t(img), source_hash=image_content_hash(np.asarray(rgb)))

    def decode(self, latent: PixelLatent | torch.Tensor) -> np.ndarray:
        z = latent.data if isinstance(latent, PixelLatent) else latent
        img = self.decode_t(z)
        return np.clip(img.detach().numpy(), 0.0, 1.0)


class TextEncoder:
    """Hash-seeded toy text embedding: a fixed random token matrix per string."""

    def __init__(self, d_ctx: int, num_tokens: int = 8):
        self.d_ctx = d_ctx
        self.num_tokens = num_tokens

    def encode(self, prompt: str) -> TextContext:
        if not isinstance(prompt, str) or prompt == "":
            raise ValueError("text prompt must be a non-empty string")
        gen = torch_generator(string_seed(prompt, salt="text"))
        tokens = _randn(gen, self.num_tokens, self.d_ctx, scale=0.5)
        return TextContext(tokens=tokens, prompt=prompt)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 2
    d_enc: int = 32
    d_ctx: int = 16
    latent_channels: int = 4
    downsample: int = 4
    text_tokens: int = 8


@dataclass
class EncoderStack:
    """The full encoder bundle used by the controllers and pipeline."""

    config: EncoderConfig
    image_encoder: ImageHiddenEncoder
    resampler: TokenResampler
    local_adaptor: LocalTokenAdaptor
    pixel_ae: PixelAutoencoder
    text_encoder: TextEncoder = field(repr=False, default=None)

    @classmethod
    def build(cls, config: EncoderConfig, master_seed: int) -> "EncoderStack":
        return cls(
            config=config,
            image_encoder=ImageHiddenEncoder(
                config.image_size, config.patch_size, config.d_enc,
                seed=derive_seed(master_seed, "image_encoder"),
            ),
            resampler=TokenResampler(
                config.d_enc, config.d_ctx, seed=derive_seed(master_seed, "resampler"),
            ),
            local_adaptor=LocalTokenAdaptor(
                config.d_ctx, seed=derive_seed(master_seed, "local_adaptor"),
            ),
            pixel_ae=PixelAutoencoder(
                config.image_size, seed=derive_seed(master_seed, "pixel_ae"),
                channels=config.latent_channels, downsample=config.downsample,
            ),
            text_encoder=TextEncoder(config.d_ctx, num_tokens=config.text_tokens),
        )

    def named_arrays(self) -> dict[str, torch.Tensor]:
        arrays: dict[str, torch.Tensor] = {}
        arrays.update(self.image_encoder.named_arrays())
        arrays.update(self.resampler.named_arrays())
        arrays.update(self.local_adaptor.named_arrays())
        arrays.update(self.pixel_ae.named_arrays())
        return arrays

    def save_weights(self, path) -> None:
        checkpoint.save_arrays(path, {k: v.numpy() for k, v in self.named_arrays().items()})

    def load_weights(self, path) -> None:
        arrays = checkpoint.load_arrays(path)
        for name, tensor in self.named_arrays().items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing array {name!r}")
            loaded = torch.as_tensor(arrays[name], dtype=torch.float64)
            if tuple(loaded.shape) != tuple(tensor.shape):
                raise ShapeError(f"array {name!r}: checkpoint shape {tuple(loaded.shape)} "
                                 f"!= model shape {tuple(tensor.shape)}")
            tensor.copy_(loaded)
