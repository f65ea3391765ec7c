"""Multi-image local and pixel controllers.

The local controller resamples each selected prompt to 16 tokens and
concatenates the blocks (16*N tokens total). The pixel controller stacks the
selected prompts' clean latents behind the four view latents, giving the
dense 3D attention a (b, 4+N, c, h, w) feature map. Both are pure functions:
stacking copies, never transforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .encoders import EncoderStack, LOCAL_TOKEN_COUNT
from .errors import ConfigError, ShapeError
from .prompting import ControllerConfig, PromptSet, RIG_VIEW_ORDER, ViewLabel

VIEW_SLOT_COUNT = 4


@dataclass(frozen=True)
class LocalContext:
    """Concatenated adapted local tokens; one 16-token block per selected prompt."""

    tokens: torch.Tensor  # (16 * N_local, d_ctx)
    provenance: tuple[ViewLabel, ...]

    def __post_init__(self):
        expected = LOCAL_TOKEN_COUNT * len(self.provenance)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != expected:
            raise ShapeError(
                f"local context with {len(self.provenance)} blocks must have "
                f"{expected} tokens, got {tuple(self.tokens.shape)}"
            )

    @property
    def n_views(self) -> int:
        return len(self.provenance)


@dataclass(frozen=True)
class FrameRole:
    kind: str  # "view" | "prompt"
    label: ViewLabel


@dataclass(frozen=True)
class StackedFrames:
    """View latents plus prompt latents along the frame axis.

    Slots 0..3 hold the four view latents in rig order; the remaining slots
    hold the selected prompts' clean latents in prompt-set order.
    """

    data: torch.Tensor  # (b, 4 + N_pixel, c, h, w)
    frame_roles: tuple[FrameRole, ...]

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"stacked frames must be (b, F, c, h, w), got {tuple(self.data.shape)}")
        if self.data.shape[1] != len(self.frame_roles):
            raise ShapeError(
                f"{self.data.shape[1]} frames but {len(self.frame_roles)} roles"
            )
        kinds = [r.kind for r in self.frame_roles]
        if kinds[:VIEW_SLOT_COUNT] != ["view"] * VIEW_SLOT_COUNT:
            raise ConfigError("the first 4 slots must be view slots")
        if any(k != "prompt" for k in kinds[VIEW_SLOT_COUNT:]):
            raise ConfigError("slots after the views must be prompt slots")

    @property
    def n_frames(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_prompt_slots(self) -> int:
        return self.n_frames - VIEW_SLOT_COUNT

    def with_data(self, data: torch.Tensor) -> "StackedFrames":
        return StackedFrames(data=data, frame_roles=self.frame_roles)


def view_frame_roles() -> tuple[FrameRole, ...]:
    return tuple(FrameRole("view", label) for label in RIG_VIEW_ORDER)


def build_local_context(prompts: PromptSet, config: ControllerConfig,
                        encoders: EncoderStack) -> LocalContext:
    """Resample + adapt each selected prompt's hidden tokens and concatenate."""
    selected = prompts.restrict(config.local_views)
    blocks = []
    provenance = []
    for prompt in selected:
        hidden = prompt.hidden_tokens or encoders.image_encoder.encode(prompt.rgb)
        local = encoders.resampler.resample(hidden)
        adapted = encoders.local_adaptor.adapt(local)
        blocks.append(adapted.tokens)
        provenance.append(prompt.label)
    return LocalContext(tokens=torch.cat(blocks, dim=0), provenance=tuple(provenance))


def stack_pixel_latents(views: torch.Tensor, prompts: PromptSet,
                        config: ControllerConfig,
                        encoders: EncoderStack) -> StackedFrames:
    """Stack the selected prompts' clean latents behind the view latents."""
    if views.ndim != 5 or views.shape[1] != VIEW_SLOT_COUNT:
        raise ShapeError(f"views must be (b, 4, c, h, w), got {tuple(views.shape)}")
    b, _, c, h, w = views.shape
    selected = prompts.restrict(config.pixel_views)
    frames = [views]
    roles = list(view_frame_roles())
    for prompt in selected:
        latent = prompt.pixel_latent or encoders.pixel_ae.encode(prompt.rgb)
        if tuple(latent.data.shape) != (c, h, w):
            raise ShapeError(
                f"{prompt.label.value} latent shape {tuple(latent.data.shape)} does not "
                f"match view latents {(c, h, w)}"
            )
        frames.append(latent.data.to(views.dtype).expand(b, 1, c, h, w))
        roles.append(FrameRole("prompt", prompt.label))
    return StackedFrames(data=torch.cat(frames, dim=1), frame_roles=tuple(roles))


def unstack_views(stacked: StackedFrames) -> torch.Tensor:
    """Keep only the four view slots; prompt slots are discarded."""
    return stacked.data[:, :VIEW_SLOT_COUNT]
