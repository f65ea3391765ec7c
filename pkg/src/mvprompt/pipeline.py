"""End-to-end runs: multi-view generation, SDS 3D generation, and scoring.

A run is described by a RunManifest. All randomness flows from the single
manifest seed through named derived seeds (one per stage), so identical
manifests produce byte-identical outputs. manifest.json is always written
before any other artifact; PNGs and report.json carry the seed and the
canonical config string.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .encoders import EncoderConfig
from .errors import ConfigError, ParseError
from .imageio import image_grid, load_image, resize_image, save_image
from .mv_unet import MultiViewModel, NoiseSchedule, ddim_sample
from .prompting import (
    CANONICAL_LABEL_ORDER,
    ControllerConfig,
    ImagePrompt,
    PromptSet,
    RIG_VIEW_ORDER,
    ViewLabel,
    camera_pose,
    parse_controller_config,
    rig_pose,
)
from .sds_nerf import (
    ConvexPullGuidance,
    ModelGuidance,
    RadianceField,
    RenderConfig,
    SDSConfig,
    optimize_nerf,
    render_image,
    write_opt_log_csv,
)
from .seeding import derive_seed

MODES = ("mvgen", "gen3d", "eval")
GUIDANCE_KINDS = ("model", "convex-pull")
SINGLE_IMAGE_CONFIG = "pixel(f) + local(f)"
TURNTABLE_AZIMUTHS = tuple(range(0, 360, 45))


@dataclass(frozen=True)
class RunManifest:
    mode: str
    seed: int
    out_dir: str
    config: str | None = None
    image: str | None = None
    images_dir: str | None = None
    real_views: str | None = None
    text: str = "a 3d object"
    image_size: int = 32
    latent_channels: int = 4
    downsample: int = 4
    steps: int = 10
    iterations: int = 100
    guidance: str = "model"
    run_name: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.guidance not in GUIDANCE_KINDS:
            raise ConfigError(f"guidance must be one of {GUIDANCE_KINDS}")
        if self.mode in ("mvgen", "gen3d"):
            if not self.config:
                raise ConfigError(f"{self.mode} requires a controller config string")
            if not self.image:
                raise ConfigError(f"{self.mode} requires an input image")
        if self.mode == "eval":
            if not self.images_dir:
                raise ConfigError("eval requires an images directory")
            if not self.image:
                raise ConfigError("eval requires a prompt image")
        # canonicalize the config string up front so every artifact agrees
        if self.config is not None:
            canonical = parse_controller_config(self.config).canonical_string()
            object.__setattr__(self, "config", canonical)

    @property
    def name(self) -> str:
        return self.run_name or Path(self.out_dir).name

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)


_INT_FIELDS = {"seed", "image_size", "latent_channels", "downsample", "steps", "iterations"}
_KEY_ALIASES = {"out": "out_dir", "iters": "iterations", "images": "images_dir",
                "latent_size": "image_size"}


def load_run_config(path) -> dict:
    """Flat key=value run-configuration file -> manifest field dict."""
    fields: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        value = value.strip()
        fields[key] = int(value) if key in _INT_FIELDS else value
    return fields


def write_manifest(manifest: RunManifest, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    (out / "manifest.json").write_text(text)


def _artifact_metadata(manifest: RunManifest) -> dict[str, str]:
    return {
        "mvprompt_seed": str(manifest.seed),
        "mvprompt_config": manifest.config or "eval",
    }


def build_model(manifest: RunManifest) -> MultiViewModel:
    enc_config = EncoderConfig(
        image_size=manifest.image_size,
        patch_size=manifest.image_size // 16,
        latent_channels=manifest.latent_channels,
        downsample=manifest.downsample,
    )
    return MultiViewModel.build(manifest.seed, enc_config)


def build_metric_backends(manifest: RunManifest):
    classifier = metrics_mod.ToyClassifier(
        manifest.image_size, seed=derive_seed(manifest.seed, "metric_classifier"))
    image_embedder = metrics_mod.ToyImageEmbedder(
        manifest.image_size, seed=derive_seed(manifest.seed, "metric_image_embedder"))
    text_embedder = metrics_mod.ToyTextEmbedder(
        seed=derive_seed(manifest.seed, "metric_text_embedder"))
    return classifier, image_embedder, text_embedder


def score_images(images, prompt_image, text, manifest: RunManifest,
                 label: str) -> metrics_mod.MetricReport:
    classifier, image_embedder, text_embedder = build_metric_backends(manifest)
    qis = metrics_mod.quality_inception_score([classifier(img) for img in images])
    clip_tx = metrics_mod.clip_text_score(images, text, text_embedder, image_embedder)
    clip_im = metrics_mod.clip_image_score(images, prompt_image, image_embedder)
    return metrics_mod.build_report(label, qis, clip_tx, clip_im)


def generate_prompt_set(front_image: np.ndarray, model: MultiViewModel,
                        schedule: NoiseSchedule, seed: int,
                        steps: int = 10, text: str = "a 3d object") -> PromptSet:
    """Sample back/left/right views from the front image; the front prompt
    stays the original image, untouched."""
    front = ImagePrompt(ViewLabel.FRONT, front_image).with_caches(model.encoders)
    single = PromptSet([front])
    config = parse_controller_config(SINGLE_IMAGE_CONFIG)
    text_ctx = model.encoders.text_encoder.encode(text)
    cams = model.rig_camera_embeddings()
    latent = ddim_sample(model, schedule, steps, seed, cams, text_ctx, single, config)
    prompts = {ViewLabel.FRONT: front}
    for slot, label in enumerate(RIG_VIEW_ORDER):
        if label is ViewLabel.FRONT:
            continue
        view = model.encoders.pixel_ae.decode(latent.data[0, slot])
        prompts[label] = ImagePrompt(label, view).with_caches(model.encoders)
    return PromptSet([prompts[label] for label in CANONICAL_LABEL_ORDER])


def _load_real_views(front: ImagePrompt, needed, directory: str, size: int,
                     model: MultiViewModel) -> PromptSet:
    prompts = {ViewLabel.FRONT: front}
    for label in needed:
        if label is ViewLabel.FRONT:
            continue
        path = Path(directory) / f"{label.value}.png"
        if not path.exists():
            raise ConfigError(
                f"config needs the {label.value!r} view but {path} is missing"
            )
        img = resize_image(load_image(path), size)
        prompts[label] = ImagePrompt(label, img).with_caches(model.encoders)
    ordered = [prompts[l] for l in CANONICAL_LABEL_ORDER if l in prompts]
    return PromptSet(ordered)


def assemble_prompts(manifest: RunManifest, model: MultiViewModel,
                     schedule: NoiseSchedule,
                     config: ControllerConfig) -> PromptSet:
    """Build the prompt set a config needs: the front image alone, user-supplied
    real views, or views generated by the single-image model."""
    front_image = resize_image(load_image(manifest.image), manifest.image_size)
    front = ImagePrompt(ViewLabel.FRONT, front_image).with_caches(model.encoders)
    needed = config.needed_views
    if needed == {ViewLabel.FRONT}:
        return PromptSet([front])
    if manifest.real_views:
        return _load_real_views(front, needed, manifest.real_views,
                                manifest.image_size, model)
    return generate_prompt_set(front_image, model, schedule,
                               seed=derive_seed(manifest.seed, "prompt_views"),
                               steps=manifest.steps, text=manifest.text)


def run_mv_generation(manifest: RunManifest) -> metrics_mod.MetricReport:
    """Sample four views under the configured controllers; write grid, views,
    report.json, manifest.json."""
    out = Path(manifest.out_dir)
    write_manifest(manifest, out)
    config = parse_controller_config(manifest.config)
    model = build_model(manifest)
    schedule = NoiseSchedule.linear_beta()
    prompts = assemble_prompts(manifest, model, schedule, config)
    config.validate_against(prompts)

    text_ctx = model.encoders.text_encoder.encode(manifest.text)
    cams = model.rig_camera_embeddings()
    latent = ddim_sample(model, schedule, manifest.steps,
                         derive_seed(manifest.seed, "mvgen_noise"),
                         cams, text_ctx, prompts, config)
    views = [model.encoders.pixel_ae.decode(latent.data[0, i]) for i in range(4)]

    meta = _artifact_metadata(manifest)
    for slot, label in enumerate(RIG_VIEW_ORDER):
        save_image(views[slot], out / f"{manifest.name}_{label.value}.png", metadata=meta)
    save_image(image_grid(views), out / "grid.png", metadata=meta)

    prompt_image = prompts.get(ViewLabel.FRONT).rgb
    report = score_images(views, prompt_image, manifest.text, manifest, manifest.config)
    (out / "report.json").write_text(
        metrics_mod.report_to_json(report, extra={"seed": manifest.seed}))
    return report


def run_3d_generation(manifest: RunManifest) -> metrics_mod.MetricReport:
    """Optimize a radiance field with SDS under the configured controllers;
    write rig renders, a turntable, the optimization log, and a report."""
    out = Path(manifest.out_dir)
    write_manifest(manifest, out)
    config = parse_controller_config(manifest.config)
    model = build_model(manifest)
    schedule = NoiseSchedule.linear_beta()
    prompts = assemble_prompts(manifest, model, schedule, config)
    config.validate_against(prompts)

    render_cfg = RenderConfig(resolution=manifest.image_size)
    field = RadianceField(seed=derive_seed(manifest.seed, "nerf_init"))
    front_prompt = prompts.get(ViewLabel.FRONT)

    if manifest.guidance == "convex-pull":
        guidance = ConvexPullGuidance(target=front_prompt.pixel_latent.data)
    else:
        text_ctx = model.encoders.text_encoder.encode(manifest.text)
        guidance = ModelGuidance(model, text_ctx, prompts, config)

    sds_cfg = SDSConfig(iterations=manifest.iterations)
    if manifest.iterations >= 1:
        field, log = optimize_nerf(field, guidance, schedule, sds_cfg,
                                   seed=derive_seed(manifest.seed, "sds"),
                                   encoder=model.encoders.pixel_ae,
                                   render_cfg=render_cfg)
    else:
        log = []
    write_opt_log_csv(log, out / "optimization.csv")

    meta = _artifact_metadata(manifest)
    rig_renders = []
    for label in RIG_VIEW_ORDER:
        img = render_image(field, rig_pose(label), render_cfg)
        rig_renders.append(img)
        save_image(img, out / f"{manifest.name}_{label.value}.png", metadata=meta)
    for azimuth in TURNTABLE_AZIMUTHS:
        img = render_image(field, camera_pose(float(azimuth)), render_cfg)
        save_image(img, out / f"{manifest.name}_az{azimuth}.png", metadata=meta)

    report = score_images(rig_renders, front_prompt.rgb, manifest.text,
                          manifest, manifest.config)
    (out / "report.json").write_text(
        metrics_mod.report_to_json(report, extra={"seed": manifest.seed}))
    return report


def run_eval(manifest: RunManifest) -> metrics_mod.MetricReport:
    """Score an externally produced image directory against a prompt image
    and a text prompt."""
    out = Path(manifest.out_dir)
    write_manifest(manifest, out)
    image_dir = Path(manifest.images_dir)
    if not image_dir.is_dir():
        raise ConfigError(f"{image_dir} is not a directory")
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ConfigError(f"no images found in {image_dir}")
    images = [resize_image(load_image(p), manifest.image_size) for p in paths]
    prompt_image = resize_image(load_image(manifest.image), manifest.image_size)

    label = manifest.config if manifest.config else "eval"
    report = score_images(images, prompt_image, manifest.text, manifest, label)
    (out / "report.json").write_text(
        metrics_mod.report_to_json(
            report, extra={"seed": manifest.seed, "resized_to": manifest.image_size}))
    return report


def run(manifest: RunManifest) -> metrics_mod.MetricReport:
    if manifest.mode == "mvgen":
        return run_mv_generation(manifest)
    if manifest.mode == "gen3d":
        return run_3d_generation(manifest)
    return run_eval(manifest)
