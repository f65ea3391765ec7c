"""Multi-view denoising U-Net and deterministic DDIM sampler.

Every block runs dense 3D self-attention over the flattened
(frames x spatial) token set of the stacked view+prompt latents, then
cross-attention onto the concatenated text and local-controller tokens.
Prompt frames travel through the network as live hidden states conditioned
on timestep 0; only the four view slots are returned as noise predictions.
No positional encoding is applied over the frame axis, so view outputs are
invariant to the order of prompt slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .controllers import (
    StackedFrames,
    VIEW_SLOT_COUNT,
    build_local_context,
    stack_pixel_latents,
    unstack_views,
    view_frame_roles,
)
from .encoders import EncoderConfig, EncoderStack, TextContext
from .errors import ConfigError, NumericsError, ShapeError
from .prompting import (
    CameraEmbedder,
    CameraEmbedding,
    ControllerConfig,
    PromptSet,
    RIG_VIEW_ORDER,
    rig_pose,
)
from .seeding import derive_seed, torch_generator


@dataclass(frozen=True)
class MultiViewLatent:
    """Latents for the four rig views, (b, 4, c, h_l, w_l)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 5 or self.data.shape[1] != VIEW_SLOT_COUNT:
            raise ShapeError(f"expected (b, 4, c, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("view latents contain non-finite entries")


@dataclass(frozen=True)
class DenoiserOutput:
    """Noise prediction for the four view slots."""

    eps_hat: torch.Tensor  # (b, 4, c, h, w)

    def __post_init__(self):
        if self.eps_hat.ndim != 5 or self.eps_hat.shape[1] != VIEW_SLOT_COUNT:
            raise ShapeError(f"expected (b, 4, c, h, w), got {tuple(self.eps_hat.shape)}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative alpha schedule; alpha_bar strictly decreasing in (0, 1]."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise ConfigError("alpha_bar must be a nonempty 1-d sequence")
        if ab.min() <= 0.0 or ab.max() > 1.0:
            raise ConfigError("alpha_bar values must lie in (0, 1]")
        if len(ab) > 1 and not (np.diff(ab) < 0).all():
            raise ConfigError("alpha_bar must be strictly decreasing")
        if ab[0] < 0.99:
            raise ConfigError(f"alpha_bar[0] must be near 1, got {ab[0]}")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    @classmethod
    def linear_beta(cls, T: int = 100, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(alpha_bar=np.cumprod(1.0 - betas))

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Evenly spaced timesteps from T-1 down to 0."""
        if steps < 1:
            raise ConfigError("steps must be >= 1")
        if steps > self.T:
            raise ConfigError(f"{steps} sampling steps exceed schedule length {self.T}")
        ts = np.round(np.linspace(0, self.T - 1, steps)).astype(int)
        return [int(t) for t in ts[::-1]]


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, abar_t: float,
              abar_prev: float) -> tuple[torch.Tensor, torch.Tensor]:
    """One eta=0 DDIM update; returns (x_prev, x0_hat)."""
    x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    x_prev = math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    return x_prev, x0_hat


def _check_finite(tokens: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tokens).all():
        raise NumericsError(f"{what} contains non-finite values")


class DenseFrameAttention(nn.Module):
    """Self-attention over all (frame, spatial) tokens with shared projections.

    Bare attention: softmax(Q K^T / sqrt(d)) V with square projection
    matrices and no output projection, so tiny instances can be checked
    against a brute-force oracle.
    """

    def __init__(self, dim: int, seed: int | None = None):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Parameter(torch.zeros(dim, dim, dtype=torch.float64), requires_grad=False)
        self.w_k = nn.Parameter(torch.zeros(dim, dim, dtype=torch.float64), requires_grad=False)
        self.w_v = nn.Parameter(torch.zeros(dim, dim, dtype=torch.float64), requires_grad=False)
        if seed is not None:
            self.reset(torch_generator(seed))

    def reset(self, gen: torch.Generator) -> None:
        scale = 1.0 / math.sqrt(self.dim)
        for w in (self.w_q, self.w_k, self.w_v):
            w.data = torch.randn(self.dim, self.dim, generator=gen, dtype=torch.float64) * scale

    def attention_weights(self, tokens: torch.Tensor) -> torch.Tensor:
        _check_finite(tokens, "attention input")
        q = tokens @ self.w_q.T
        k = tokens @ self.w_k.T
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.dim:
            raise ShapeError(f"expected token dim {self.dim}, got {tokens.shape[-1]}")
        attn = self.attention_weights(tokens)
        return attn @ (tokens @ self.w_v.T)

    def forward(self, stacked: StackedFrames) -> StackedFrames:
        b, f, c, h, w = stacked.data.shape
        if c != self.dim:
            raise ShapeError(f"expected channel dim {self.dim}, got {c}")
        tokens = stacked.data.permute(0, 1, 3, 4, 2).reshape(b, f * h * w, c)
        out = self.forward_tokens(tokens)
        out = out.reshape(b, f, h, w, c).permute(0, 1, 4, 2, 3)
        return stacked.with_data(out)


class ContextCrossAttention(nn.Module):
    """Frame tokens query the concatenated text + local context tokens."""

    def __init__(self, dim: int, ctx_dim: int, seed: int | None = None):
        super().__init__()
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.w_q = nn.Parameter(torch.zeros(dim, dim, dtype=torch.float64), requires_grad=False)
        self.w_k = nn.Parameter(torch.zeros(dim, ctx_dim, dtype=torch.float64), requires_grad=False)
        self.w_v = nn.Parameter(torch.zeros(dim, ctx_dim, dtype=torch.float64), requires_grad=False)
        if seed is not None:
            self.reset(torch_generator(seed))

    def reset(self, gen: torch.Generator) -> None:
        self.w_q.data = torch.randn(self.dim, self.dim, generator=gen,
                                    dtype=torch.float64) / math.sqrt(self.dim)
        for w in (self.w_k, self.w_v):
            w.data = torch.randn(self.dim, self.ctx_dim, generator=gen,
                                 dtype=torch.float64) / math.sqrt(self.ctx_dim)

    def attention_weights(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        _check_finite(tokens, "cross-attention input")
        if context.shape[-1] != self.ctx_dim:
            raise ShapeError(f"expected context dim {self.ctx_dim}, got {context.shape[-1]}")
        q = tokens @ self.w_q.T
        k = context @ self.w_k.T
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)

    def forward_tokens(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(tokens, context)
        return attn @ (context @ self.w_v.T)

    def forward(self, stacked: StackedFrames, context: torch.Tensor) -> StackedFrames:
        b, f, c, h, w = stacked.data.shape
        if c != self.dim:
            raise ShapeError(f"expected channel dim {self.dim}, got {c}")
        if context.ndim == 2:
            context = context[None, :, :]
        tokens = stacked.data.permute(0, 1, 3, 4, 2).reshape(b, f * h * w, c)
        out = self.forward_tokens(tokens, context)
        out = out.reshape(b, f, h, w, c).permute(0, 1, 4, 2, 3)
        return stacked.with_data(out)


def concat_context(text: TextContext, local_tokens: torch.Tensor) -> torch.Tensor:
    if text.tokens.shape[1] != local_tokens.shape[1]:
        raise ShapeError("text and local tokens must share d_ctx")
    return torch.cat([text.tokens, local_tokens], dim=0)


class TimeEmbedding(nn.Module):
    """Sinusoidal timestep features followed by a learned two-layer adaptor."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def sinusoidal(self, t: float) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
        )
        args = float(t) * freqs
        return torch.cat([torch.sin(args), torch.cos(args)])

    def forward(self, t: float) -> torch.Tensor:
        return self.lin2(F.silu(self.lin1(self.sinusoidal(t))))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int = 4):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnPair(nn.Module):
    """Pre-norm dense 3D attention + context cross-attention, both residual."""

    def __init__(self, dim: int, ctx_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.dense = DenseFrameAttention(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.cross = ContextCrossAttention(dim, ctx_dim)

    def forward(self, x: torch.Tensor, b: int, f: int, context: torch.Tensor) -> torch.Tensor:
        bf, c, h, w = x.shape
        tokens = x.permute(0, 2, 3, 1).reshape(b, f * h * w, c)
        tokens = tokens + self.dense.forward_tokens(self.ln1(tokens))
        tokens = tokens + self.cross.forward_tokens(self.ln2(tokens), context)
        return tokens.reshape(b * f, h, w, c).permute(0, 3, 1, 2)


class MultiViewUNet(nn.Module):
    """Two down blocks, one mid, two up; attention in every block."""

    def __init__(self, latent_channels: int = 4, base_channels: int = 16,
                 d_ctx: int = 16, emb_dim: int = 32, seed: int = 0):
        super().__init__()
        ch0, ch1 = base_channels, base_channels * 2
        self.d_ctx = d_ctx
        self.emb_dim = emb_dim
        self.time_embed = TimeEmbedding(emb_dim)
        self.conv_in = nn.Conv2d(latent_channels, ch0, 3, padding=1)
        self.down0_res = ResBlock(ch0, ch0, emb_dim)
        self.down0_attn = AttnPair(ch0, d_ctx)
        self.down0_pool = nn.Conv2d(ch0, ch0, 3, stride=2, padding=1)
        self.down1_res = ResBlock(ch0, ch1, emb_dim)
        self.down1_attn = AttnPair(ch1, d_ctx)
        self.down1_pool = nn.Conv2d(ch1, ch1, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(ch1, ch1, emb_dim)
        self.mid_attn = AttnPair(ch1, d_ctx)
        self.mid_res2 = ResBlock(ch1, ch1, emb_dim)
        self.up1_conv = nn.Conv2d(ch1, ch1, 3, padding=1)
        self.up1_res = ResBlock(ch1 + ch1, ch1, emb_dim)
        self.up1_attn = AttnPair(ch1, d_ctx)
        self.up0_conv = nn.Conv2d(ch1, ch0, 3, padding=1)
        self.up0_res = ResBlock(ch0 + ch0, ch0, emb_dim)
        self.up0_attn = AttnPair(ch0, d_ctx)
        self.out_norm = nn.GroupNorm(4, ch0)
        self.out_conv = nn.Conv2d(ch0, latent_channels, 3, padding=1)
        self.double()
        deterministic_init(self, torch_generator(seed))
        self.requires_grad_(False)

    def forward(self, frames: torch.Tensor, frame_emb: torch.Tensor,
                context: torch.Tensor) -> torch.Tensor:
        """frames (b,F,c,h,w), frame_emb (b,F,emb_dim), context (b,Tc,d_ctx)."""
        b, f, c, h, w = frames.shape
        x = frames.reshape(b * f, c, h, w)
        emb = frame_emb.reshape(b * f, self.emb_dim)

        x = self.conv_in(x)
        x = self.down0_attn(self.down0_res(x, emb), b, f, context)
        s0 = x
        x = self.down0_pool(x)
        x = self.down1_attn(self.down1_res(x, emb), b, f, context)
        s1 = x
        x = self.down1_pool(x)

        x = self.mid_res1(x, emb)
        x = self.mid_attn(x, b, f, context)
        x = self.mid_res2(x, emb)

        x = self.up1_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.up1_attn(self.up1_res(torch.cat([x, s1], dim=1), emb), b, f, context)
        x = self.up0_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.up0_attn(self.up0_res(torch.cat([x, s0], dim=1), emb), b, f, context)

        x = self.out_conv(F.silu(self.out_norm(x)))
        return x.reshape(b, f, c, h, w)


def deterministic_init(root: nn.Module, gen: torch.Generator) -> None:
    """Seed every weight in module-definition order, independent of torch's global RNG."""
    for _, m in root.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            m.weight.data = torch.randn(m.weight.shape, generator=gen,
                                        dtype=torch.float64) / math.sqrt(fan_in)
            if m.bias is not None:
                m.bias.data = torch.zeros(m.bias.shape, dtype=torch.float64)
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            m.weight.data = torch.ones(m.weight.shape, dtype=torch.float64)
            m.bias.data = torch.zeros(m.bias.shape, dtype=torch.float64)
        elif isinstance(m, (DenseFrameAttention, ContextCrossAttention)):
            m.reset(gen)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    emb_dim: int = 32


class MultiViewModel:
    """Encoder stack + camera adaptor + multi-view U-Net under one seed."""

    def __init__(self, encoders: EncoderStack, camera_embedder: CameraEmbedder,
                 unet: MultiViewUNet):
        self.encoders = encoders
        self.camera_embedder = camera_embedder
        self.unet = unet

    @classmethod
    def build(cls, master_seed: int, enc_config: EncoderConfig | None = None,
              model_config: ModelConfig | None = None) -> "MultiViewModel":
        enc_config = enc_config or EncoderConfig()
        model_config = model_config or ModelConfig()
        encoders = EncoderStack.build(enc_config, master_seed)
        camera_embedder = CameraEmbedder(model_config.emb_dim,
                                         seed=derive_seed(master_seed, "camera_adaptor"))
        unet = MultiViewUNet(
            latent_channels=enc_config.latent_channels,
            base_channels=model_config.base_channels,
            d_ctx=enc_config.d_ctx,
            emb_dim=model_config.emb_dim,
            seed=derive_seed(master_seed, "unet"),
        )
        return cls(encoders, camera_embedder, unet)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.encoders.pixel_ae.latent_shape

    def rig_camera_embeddings(self) -> list[CameraEmbedding]:
        return [self.camera_embedder.embed(rig_pose(label)) for label in RIG_VIEW_ORDER]

    def _frame_embeddings(self, stacked: StackedFrames, t: int,
                          cams: Sequence[CameraEmbedding]) -> torch.Tensor:
        if len(cams) != VIEW_SLOT_COUNT:
            raise ConfigError(f"expected 4 camera embeddings, got {len(cams)}")
        temb_t = self.unet.time_embed(t)
        temb_zero = self.unet.time_embed(0)
        rows = []
        for slot, role in enumerate(stacked.frame_roles):
            if role.kind == "view":
                cam = torch.tensor(cams[slot].vector, dtype=torch.float64)
                rows.append(temb_t + cam)
            else:
                cam_emb = self.camera_embedder.embed(rig_pose(role.label))
                cam = torch.tensor(cam_emb.vector, dtype=torch.float64)
                rows.append(temb_zero + cam)
        return torch.stack(rows, dim=0)

    def unet_forward(self, noisy: MultiViewLatent | torch.Tensor, t: int,
                     cams: Sequence[CameraEmbedding], text: TextContext,
                     prompts: PromptSet, config: ControllerConfig) -> DenoiserOutput:
        views = noisy.data if isinstance(noisy, MultiViewLatent) else noisy
        config.validate_against(prompts)
        local = build_local_context(prompts, config, self.encoders)
        context = concat_context(text, local.tokens)
        stacked = stack_pixel_latents(views, prompts, config, self.encoders)
        frame_emb = self._frame_embeddings(stacked, t, cams)
        b = views.shape[0]
        eps_all = self.unet(
            stacked.data,
            frame_emb[None, :, :].expand(b, -1, -1),
            context[None, :, :].expand(b, -1, -1),
        )
        return DenoiserOutput(eps_hat=unstack_views(stacked.with_data(eps_all)))

    def unet_forward_unconditional(self, noisy: MultiViewLatent | torch.Tensor, t: int,
                                   cams: Sequence[CameraEmbedding]) -> DenoiserOutput:
        """Baseline branch for guidance: zero text context, no local or pixel prompts."""
        views = noisy.data if isinstance(noisy, MultiViewLatent) else noisy
        stacked = StackedFrames(data=views, frame_roles=view_frame_roles())
        context = torch.zeros(1, self.unet.d_ctx, dtype=torch.float64)
        frame_emb = self._frame_embeddings(stacked, t, cams)
        b = views.shape[0]
        eps_all = self.unet(
            stacked.data,
            frame_emb[None, :, :].expand(b, -1, -1),
            context[None, :, :].expand(b, -1, -1),
        )
        return DenoiserOutput(eps_hat=eps_all)

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"unet.{k}": v.detach().numpy() for k, v in self.unet.state_dict().items()}
        arrays.update(self.camera_embedder.named_arrays())
        arrays.update({k: v.detach().numpy() for k, v in self.encoders.named_arrays().items()})
        return arrays

    def save_weights(self, path) -> None:
        checkpoint.save_arrays(path, self.named_arrays())


def ddim_sample(model, schedule: NoiseSchedule, steps: int, seed: int,
                cams: Sequence[CameraEmbedding], text: TextContext,
                prompts: PromptSet, config: ControllerConfig) -> MultiViewLatent:
    """Deterministic eta=0 DDIM sampling of the four view latents."""
    timesteps = schedule.ddim_timesteps(steps)
    gen = torch_generator(seed)
    c, h, w = model.latent_shape
    x = torch.randn(1, VIEW_SLOT_COUNT, c, h, w, generator=gen, dtype=torch.float64)
    for i, t in enumerate(timesteps):
        eps_hat = model.unet_forward(x, t, cams, text, prompts, config).eps_hat
        abar_t = float(schedule.alpha_bar[t])
        abar_prev = float(schedule.alpha_bar[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
        x, _ = ddim_step(x, eps_hat, abar_t, abar_prev)
    return MultiViewLatent(data=x)
