"""View labels, image prompts, controller configs, and the four-view camera rig.

Two orderings coexist and are both deterministic:
  * canonical label order (front, back, left, right) - used for prompt lists
    and controller-config strings;
  * rig order (front, left, back, right) - the four poses sorted by azimuth
    0/90/180/270, used for view slots and rendered outputs.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoders import HiddenTokens, PixelLatent, image_content_hash
from .errors import ConfigError, ParseError, ShapeError
from .seeding import numpy_generator


class ViewLabel(enum.Enum):
    FRONT = "front"
    BACK = "back"
    LEFT = "left"
    RIGHT = "right"

    @property
    def letter(self) -> str:
        return self.value[0]

    @classmethod
    def from_letter(cls, letter: str) -> "ViewLabel":
        for label in cls:
            if label.letter == letter:
                return label
        raise ParseError(f"unknown letter {letter!r} (expected one of f, b, l, r)")


CANONICAL_LABEL_ORDER = (ViewLabel.FRONT, ViewLabel.BACK, ViewLabel.LEFT, ViewLabel.RIGHT)

VIEW_AZIMUTH_DEG = {
    ViewLabel.FRONT: 0.0,
    ViewLabel.LEFT: 90.0,
    ViewLabel.BACK: 180.0,
    ViewLabel.RIGHT: 270.0,
}

# Rig poses sorted by azimuth; pose index 2 is the back view at 180 degrees.
RIG_VIEW_ORDER = (ViewLabel.FRONT, ViewLabel.LEFT, ViewLabel.BACK, ViewLabel.RIGHT)

DEFAULT_RIG_RADIUS = 2.0


def canonical_labels(labels: Iterable[ViewLabel]) -> tuple[ViewLabel, ...]:
    present = set(labels)
    return tuple(l for l in CANONICAL_LABEL_ORDER if l in present)


@dataclass(frozen=True)
class ImagePrompt:
    """One view-labeled prompt image with optional cached encodings."""

    label: ViewLabel
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    pixel_latent: Optional[PixelLatent] = None
    hidden_tokens: Optional[HiddenTokens] = None

    def __post_init__(self):
        arr = np.asarray(self.rgb, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"prompt image must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"prompt image must be square, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("prompt image values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "rgb", arr)
        own_hash = image_content_hash(arr)
        for cache in (self.pixel_latent, self.hidden_tokens):
            if cache is not None and cache.source_hash is not None and cache.source_hash != own_hash:
                raise ValueError(f"{self.label.value}: cached encoding does not match the image")

    @property
    def content_hash(self) -> str:
        return image_content_hash(self.rgb)

    def with_caches(self, encoders) -> "ImagePrompt":
        """Return a copy with pixel latent and hidden tokens filled in."""
        pixel = self.pixel_latent or encoders.pixel_ae.encode(self.rgb)
        hidden = self.hidden_tokens or encoders.image_encoder.encode(self.rgb)
        return replace(self, pixel_latent=pixel, hidden_tokens=hidden)


@dataclass(frozen=True)
class PromptSet:
    """Ordered, view-labeled prompt images; always contains the front view."""

    prompts: tuple[ImagePrompt, ...]

    def __init__(self, prompts: Sequence[ImagePrompt]):
        object.__setattr__(self, "prompts", tuple(prompts))
        if not 1 <= len(self.prompts) <= 4:
            raise ConfigError(f"a prompt set holds 1..4 prompts, got {len(self.prompts)}")
        labels = [p.label for p in self.prompts]
        if len(set(labels)) != len(labels):
            raise ConfigError("prompt labels must be distinct")
        if ViewLabel.FRONT not in labels:
            raise ConfigError("every prompt set must contain the front view")

    @property
    def n(self) -> int:
        return len(self.prompts)

    @property
    def labels(self) -> tuple[ViewLabel, ...]:
        return tuple(p.label for p in self.prompts)

    def get(self, label: ViewLabel) -> ImagePrompt:
        for p in self.prompts:
            if p.label == label:
                return p
        raise ConfigError(f"prompt set has no {label.value!r} view")

    def restrict(self, labels: Iterable[ViewLabel]) -> tuple[ImagePrompt, ...]:
        """Prompts whose label is selected, in prompt-set order."""
        wanted = set(labels)
        missing = wanted - set(self.labels)
        if missing:
            names = ", ".join(sorted(l.value for l in missing))
            raise ConfigError(f"config references views absent from the prompt set: {names}")
        return tuple(p for p in self.prompts if p.label in wanted)

    def canonical(self) -> "PromptSet":
        order = {l: i for i, l in enumerate(CANONICAL_LABEL_ORDER)}
        return PromptSet(sorted(self.prompts, key=lambda p: order[p.label]))

    def with_caches(self, encoders) -> "PromptSet":
        return PromptSet([p.with_caches(encoders) for p in self.prompts])


@dataclass(frozen=True)
class ControllerConfig:
    """Which views feed the pixel controller and which feed the local controller."""

    pixel_views: frozenset[ViewLabel]
    local_views: frozenset[ViewLabel]

    def __init__(self, pixel_views: Iterable[ViewLabel], local_views: Iterable[ViewLabel]):
        object.__setattr__(self, "pixel_views", frozenset(pixel_views))
        object.__setattr__(self, "local_views", frozenset(local_views))
        for name, views in (("pixel", self.pixel_views), ("local", self.local_views)):
            if not views:
                raise ConfigError(f"{name} view set must be nonempty")
            if ViewLabel.FRONT not in views:
                raise ConfigError(f"{name} view set must contain the front view")

    def canonical_string(self) -> str:
        pixel = "".join(l.letter for l in canonical_labels(self.pixel_views))
        local = "".join(l.letter for l in canonical_labels(self.local_views))
        return f"pixel({pixel}) + local({local})"

    def validate_against(self, prompts: PromptSet) -> None:
        prompts.restrict(self.pixel_views)
        prompts.restrict(self.local_views)

    @property
    def needed_views(self) -> frozenset[ViewLabel]:
        return self.pixel_views | self.local_views


_GROUP_RE = r"\(\s*([a-zA-Z]*)\s*\)"
_CONFIG_RE = re.compile(
    r"^\s*pixel\s*" + _GROUP_RE + r"\s*\+\s*local\s*" + _GROUP_RE + r"\s*$"
)


def _parse_group(name: str, letters: str) -> tuple[ViewLabel, ...]:
    if letters == "":
        raise ParseError(f"empty group {name}()")
    seen: list[ViewLabel] = []
    for ch in letters:
        label = None
        for candidate in ViewLabel:
            if candidate.letter == ch:
                label = candidate
                break
        if label is None:
            raise ParseError(f"unknown letter {ch!r} in {name}({letters})")
        if label in seen:
            raise ParseError(f"duplicate letter {ch!r} in {name}({letters})")
        seen.append(label)
    return tuple(seen)


def parse_controller_config(spec: str) -> ControllerConfig:
    """Parse a config string like "pixel(f) + local(fb)"; whitespace-tolerant."""
    if not isinstance(spec, str):
        raise ParseError(f"config must be a string, got {type(spec).__name__}")
    match = _CONFIG_RE.match(spec)
    if match is None:
        for name in ("pixel", "local"):
            if not re.search(rf"{name}\s*\(", spec):
                raise ParseError(f"missing group '{name}(...)' in config {spec!r}")
        raise ParseError(
            f"config {spec!r} does not match 'pixel(<letters>) + local(<letters>)'"
        )
    pixel = _parse_group("pixel", match.group(1))
    local = _parse_group("local", match.group(2))
    return ControllerConfig(pixel_views=pixel, local_views=local)


@dataclass(frozen=True)
class CameraPose:
    """A camera on the rig sphere; rotation maps camera axes to world axes."""

    azimuth: float
    elevation: float
    radius: float
    rotation: np.ndarray  # (3, 3) orthonormal, columns = right/up/back in world frame
    translation: np.ndarray  # (3,) camera position in world frame

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {rot.shape}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal to 1e-6")
        trans = np.asarray(self.translation, dtype=np.float64)
        if trans.shape != (3,):
            raise ShapeError(f"translation must be a 3-vector, got {trans.shape}")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def extrinsic_matrix(self) -> np.ndarray:
        mat = np.eye(4, dtype=np.float64)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(azimuth=0.0, elevation=0.0, radius=0.0,
                   rotation=np.eye(3), translation=np.zeros(3))


def camera_pose(azimuth_deg: float, elevation_deg: float = 0.0,
                radius: float = DEFAULT_RIG_RADIUS) -> CameraPose:
    """Look-at pose on a sphere around the origin, world up = +z."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    position = radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )
    back = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(up_world, back)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("degenerate pose: looking straight along the up axis")
    right = right / norm
    up = np.cross(back, right)
    rotation = np.stack([right, up, back], axis=1)
    return CameraPose(azimuth=float(azimuth_deg), elevation=float(elevation_deg),
                      radius=float(radius), rotation=rotation, translation=position)


def rig_pose(label: ViewLabel, radius: float = DEFAULT_RIG_RADIUS) -> CameraPose:
    return camera_pose(VIEW_AZIMUTH_DEG[label], 0.0, radius)


def orthogonal_camera_rig(radius: float = DEFAULT_RIG_RADIUS) -> list[CameraPose]:
    """The four orthogonal rig poses at azimuths 0/90/180/270, elevation 0."""
    return [rig_pose(label, radius) for label in RIG_VIEW_ORDER]


@dataclass(frozen=True)
class CameraEmbedding:
    """Conditioning vector derived from a camera pose."""

    vector: np.ndarray  # (d_cam,)

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise ShapeError(f"camera embedding must be a vector, got shape {vec.shape}")
        if not np.isfinite(vec).all():
            raise ValueError("camera embedding contains non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


class CameraEmbedder:
    """Learned adaptor on the flattened 4x4 extrinsic matrix.

    Any deterministic injective embedding works here; the adaptor weights are
    fixed at construction from the derived seed.
    """

    def __init__(self, d_cam: int, seed: int):
        self.d_cam = d_cam
        gen = numpy_generator(seed)
        self.weight = gen.standard_normal((d_cam, 16)) * 0.25
        self.bias = gen.standard_normal(d_cam) * 0.1

    def named_arrays(self, prefix: str = "camera_adaptor") -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def adapt(self, flat_extrinsic: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat_extrinsic, dtype=np.float64)
        if flat.shape != (16,):
            raise ShapeError(f"expected a flattened 4x4 matrix, got shape {flat.shape}")
        return self.weight @ flat + self.bias

    def embed(self, pose: CameraPose) -> CameraEmbedding:
        return CameraEmbedding(vector=self.adapt(pose.extrinsic_matrix().reshape(-1)))


def embed_camera(pose: CameraPose, embedder: CameraEmbedder) -> CameraEmbedding:
    return embedder.embed(pose)
