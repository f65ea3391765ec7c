"""Tiny radiance field, analytic volume renderer, and score distillation.

The field is a positional-encoding MLP small enough for finite-difference
gradient checks. Rendering uses fixed midpoint quadrature (64 samples/ray),
so the whole render -> encode path is smooth and deterministic. The SDS
gradient contracts the stopped-gradient noise residual against that path's
Jacobian via autograd.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .encoders import PixelAutoencoder
from .errors import ConfigError, DivergenceError, NumericsError, ShapeError
from .mv_unet import MultiViewModel, NoiseSchedule, VIEW_SLOT_COUNT
from .prompting import CameraPose, orthogonal_camera_rig
from .seeding import torch_generator


@dataclass(frozen=True)
class RenderConfig:
    resolution: int = 32
    samples_per_ray: int = 64
    near: float = 0.5
    far: float = 3.5
    fov_deg: float = 40.0


class RadianceField:
    """Positional-encoding MLP over one flat parameter vector.

    Density uses softplus (always >= 0), color uses sigmoid (always in [0,1]).
    With hidden=16 and two frequency bands the field has 324 parameters.
    """

    def __init__(self, seed: int, hidden: int = 16, n_freq: int = 2,
                 background: tuple[float, float, float] = (1.0, 1.0, 1.0)):
        self.hidden = hidden
        self.n_freq = n_freq
        self.in_dim = 3 + 3 * 2 * n_freq
        self.background = torch.tensor(background, dtype=torch.float64)
        self._shapes = [
            ("w1", (hidden, self.in_dim)),
            ("b1", (hidden,)),
            ("w2", (4, hidden)),
            ("b2", (4,)),
        ]
        gen = torch_generator(seed)
        chunks = []
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            scale = 0.1 if name.startswith("b") else 1.0 / math.sqrt(shape[-1] if len(shape) > 1 else 1)
            chunks.append(torch.randn(n, generator=gen, dtype=torch.float64) * scale)
        self.params = torch.cat(chunks).requires_grad_(True)

    @property
    def param_count(self) -> int:
        return int(self.params.numel())

    def _unpack(self) -> dict[str, torch.Tensor]:
        out = {}
        offset = 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = self.params[offset : offset + n].reshape(shape)
            offset += n
        return out

    def get_flat(self) -> np.ndarray:
        return self.params.detach().numpy().copy()

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.param_count,):
            raise ShapeError(f"expected {self.param_count} parameters, got {values.shape}")
        with torch.no_grad():
            self.params.copy_(torch.as_tensor(values))

    def positional_encoding(self, points: torch.Tensor) -> torch.Tensor:
        feats = [points]
        for k in range(self.n_freq):
            feats.append(torch.sin((2.0**k) * math.pi * points))
            feats.append(torch.cos((2.0**k) * math.pi * points))
        return torch.cat(feats, dim=-1)

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """points (..., 3) -> density (...,) and color (..., 3)."""
        w = self._unpack()
        h = torch.tanh(self.positional_encoding(points) @ w["w1"].T + w["b1"])
        out = h @ w["w2"].T + w["b2"]
        density = torch.nn.functional.softplus(out[..., 0] - 1.0)
        color = torch.sigmoid(out[..., 1:])
        return density, color


@dataclass(frozen=True)
class RaySamples:
    """Ordered near-to-far quadrature samples along a batch of rays."""

    positions: torch.Tensor  # (R, S, 3)
    deltas: torch.Tensor     # (R, S), all > 0
    densities: torch.Tensor  # (R, S), all >= 0
    colors: torch.Tensor     # (R, S, 3)

    def __post_init__(self):
        if (self.deltas <= 0).any():
            raise ValueError("ray sample deltas must be positive")
        if (self.densities < 0).any():
            raise ValueError("densities must be nonnegative")


def composite(samples: RaySamples, background: torch.Tensor):
    """Alpha-composite ray samples over a background color.

    Returns (color (R,3), opacity (R,), weights (R,S), trans_final (R,)).
    Weights satisfy sum_i w_i + T_final = 1 per ray.
    """
    tau = samples.densities * samples.deltas
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(cum - tau))          # T_i, exclusive cumulative sum
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    trans_final = torch.exp(-cum[..., -1])
    color = (weights[..., None] * samples.colors).sum(dim=-2) + trans_final[..., None] * background
    opacity = weights.sum(dim=-1)
    return color, opacity, weights, trans_final


def generate_rays(pose: CameraPose, resolution: int, fov_deg: float):
    """Pinhole rays through pixel centers; returns origins (R,3), unit dirs (R,3)."""
    half = math.tan(math.radians(fov_deg) / 2.0)
    coords = (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution * 2.0 - 1.0
    ys, xs = torch.meshgrid(-coords * half, coords * half, indexing="ij")
    dirs_cam = torch.stack([xs, ys, -torch.ones_like(xs)], dim=-1).reshape(-1, 3)
    dirs_cam = dirs_cam / dirs_cam.norm(dim=-1, keepdim=True)
    rot = torch.tensor(pose.rotation, dtype=torch.float64)
    dirs = dirs_cam @ rot.T
    origins = torch.tensor(pose.translation, dtype=torch.float64).expand_as(dirs)
    return origins, dirs


def sample_along_rays(field: RadianceField, origins: torch.Tensor, dirs: torch.Tensor,
                      cfg: RenderConfig) -> RaySamples:
    """Fixed midpoint quadrature between near and far."""
    s = cfg.samples_per_ray
    step = (cfg.far - cfg.near) / s
    t_mid = cfg.near + (torch.arange(s, dtype=torch.float64) + 0.5) * step
    positions = origins[:, None, :] + t_mid[None, :, None] * dirs[:, None, :]
    densities, colors = field.query(positions)
    deltas = torch.full(densities.shape, step, dtype=torch.float64)
    return RaySamples(positions=positions, deltas=deltas, densities=densities, colors=colors)


def render(field: RadianceField, pose: CameraPose,
           cfg: RenderConfig | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Render one view; returns (image (res,res,3), opacity (res,res)), differentiable."""
    cfg = cfg or RenderConfig()
    origins, dirs = generate_rays(pose, cfg.resolution, cfg.fov_deg)
    samples = sample_along_rays(field, origins, dirs, cfg)
    color, opacity, _, _ = composite(samples, field.background)
    res = cfg.resolution
    return color.reshape(res, res, 3), opacity.reshape(res, res)


def render_image(field: RadianceField, pose: CameraPose,
                 cfg: RenderConfig | None = None) -> np.ndarray:
    with torch.no_grad():
        image, _ = render(field, pose, cfg)
    return np.clip(image.numpy(), 0.0, 1.0)


def default_weight(abar_t: float) -> float:
    return 1.0 - abar_t


@dataclass
class SDSConfig:
    weight_fn: Callable[[float], float] = default_weight  # w as a function of alpha_bar[t]
    t_range: tuple[int, int] = (2, 97)                    # inclusive timestep interval
    guidance_scale: float = 1.0
    iterations: int = 100
    learning_rate: float | Callable[[int], float] = 2e-2

    def lr_at(self, iteration: int) -> float:
        if callable(self.learning_rate):
            return float(self.learning_rate(iteration))
        return float(self.learning_rate)

    def validate(self, schedule: NoiseSchedule) -> None:
        lo, hi = self.t_range
        if not (0 <= lo <= hi < schedule.T):
            raise ConfigError(f"t_range {self.t_range} outside schedule [0, {schedule.T - 1}]")


class ModelGuidance:
    """Adapts the multi-view diffusion model to the SDS denoiser interface."""

    def __init__(self, model: MultiViewModel, text, prompts, config,
                 guidance_scale: float = 1.0):
        config.validate_against(prompts)
        self.model = model
        self.text = text
        self.prompts = prompts
        self.config = config
        self.guidance_scale = guidance_scale
        self.cams = model.rig_camera_embeddings()

    def predict_noise(self, x_t: torch.Tensor, t: int, x_clean: torch.Tensor,
                      eps: torch.Tensor) -> torch.Tensor:
        cond = self.model.unet_forward(x_t, t, self.cams, self.text,
                                       self.prompts, self.config).eps_hat
        if self.guidance_scale == 1.0:
            return cond
        uncond = self.model.unet_forward_unconditional(x_t, t, self.cams).eps_hat
        return uncond + self.guidance_scale * (cond - uncond)


class OracleNoiseGuidance:
    """Mock denoiser that returns the exact noise; the SDS residual vanishes."""

    def predict_noise(self, x_t, t, x_clean, eps):
        return eps


class ConvexPullGuidance:
    """Mock denoiser whose residual pulls clean latents toward a fixed target.

    With `slot` set (default: the front view) only that view slot is pulled
    and the residual is zero elsewhere; a radiance field cannot show the same
    image from every rig view, so an all-slot pull would fight itself.
    """

    def __init__(self, target: torch.Tensor, strength: float = 1.0,
                 slot: int | None = 0):
        self.target = target
        self.strength = strength
        self.slot = slot

    def predict_noise(self, x_t, t, x_clean, eps):
        if self.slot is None:
            return eps + self.strength * (x_clean - self.target)
        eps_hat = eps.clone()
        eps_hat[:, self.slot] = eps[:, self.slot] + self.strength * (
            x_clean[:, self.slot] - self.target)
        return eps_hat


@dataclass(frozen=True)
class SDSStep:
    grad: torch.Tensor
    t: int
    residual_norm: float


def render_rig_latents(field: RadianceField, encoder: PixelAutoencoder,
                       render_cfg: RenderConfig,
                       poses: Sequence[CameraPose]) -> torch.Tensor:
    """Render the four rig views and encode them; keeps the autograd graph."""
    latents = [encoder.encode_t(render(field, pose, render_cfg)[0]) for pose in poses]
    return torch.stack(latents, dim=0)[None, :, :, :, :]


def sds_gradient(field: RadianceField, denoiser, schedule: NoiseSchedule,
                 cfg: SDSConfig, rng: torch.Generator, *,
                 encoder: PixelAutoencoder,
                 render_cfg: RenderConfig | None = None,
                 poses: Sequence[CameraPose] | None = None,
                 t_override: int | None = None,
                 eps_override: torch.Tensor | None = None) -> SDSStep:
    """One SDS draw: g = w(t) (eps_hat - eps) contracted against d(encode.render)/dtheta.

    No gradient flows through eps_hat (stop-gradient convention); the
    overrides pin t and eps for gradient-checking tests.
    """
    render_cfg = render_cfg or RenderConfig()
    cfg.validate(schedule)
    poses = list(poses) if poses is not None else orthogonal_camera_rig()
    if len(poses) != VIEW_SLOT_COUNT:
        raise ConfigError(f"expected 4 rig poses, got {len(poses)}")

    x = render_rig_latents(field, encoder, render_cfg, poses)

    if t_override is not None:
        t = int(t_override)
    else:
        lo, hi = cfg.t_range
        t = int(torch.randint(lo, hi + 1, (1,), generator=rng).item())
    if eps_override is not None:
        eps = eps_override
    else:
        eps = torch.randn(x.shape, generator=rng, dtype=torch.float64)

    abar_t = float(schedule.alpha_bar[t])
    with torch.no_grad():
        x_t = math.sqrt(abar_t) * x.detach() + math.sqrt(1.0 - abar_t) * eps
        eps_hat = denoiser.predict_noise(x_t, t, x.detach(), eps)
        residual = cfg.weight_fn(abar_t) * (eps_hat - eps)
    if not torch.isfinite(residual).all():
        raise NumericsError("SDS residual is non-finite")

    loss = (x * residual).sum()
    (grad,) = torch.autograd.grad(loss, field.params)
    return SDSStep(grad=grad, t=t, residual_norm=float(residual.norm()))


@dataclass(frozen=True)
class OptLogEntry:
    iteration: int
    residual_norm: float
    update_norm: float


def optimize_nerf(field: RadianceField, denoiser, schedule: NoiseSchedule,
                  cfg: SDSConfig, seed: int, *,
                  encoder: PixelAutoencoder,
                  render_cfg: RenderConfig | None = None,
                  poses: Sequence[CameraPose] | None = None
                  ) -> tuple[RadianceField, list[OptLogEntry]]:
    """Sequential SDS optimization loop; deterministic given the seed."""
    if cfg.iterations < 1:
        raise ConfigError("iterations must be >= 1")
    rng = torch_generator(seed)
    opt = torch.optim.Adam([field.params], lr=cfg.lr_at(0))
    log: list[OptLogEntry] = []
    for i in range(cfg.iterations):
        step = sds_gradient(field, denoiser, schedule, cfg, rng,
                            encoder=encoder, render_cfg=render_cfg, poses=poses)
        opt.param_groups[0]["lr"] = cfg.lr_at(i)
        opt.zero_grad()
        field.params.grad = step.grad
        before = field.params.detach().clone()
        opt.step()
        if not torch.isfinite(field.params).all():
            raise DivergenceError(i)
        update_norm = float((field.params.detach() - before).norm())
        log.append(OptLogEntry(iteration=i, residual_norm=step.residual_norm,
                               update_norm=update_norm))
    return field, log


def write_opt_log_csv(log: Sequence[OptLogEntry], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "residual_norm", "update_norm"])
        for entry in log:
            writer.writerow([entry.iteration, repr(entry.residual_norm),
                             repr(entry.update_norm)])
