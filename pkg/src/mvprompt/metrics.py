"""Evaluation metrics: quality-only inception score and CLIP-style scores.

Backends are pluggable callables; the bundled ones are seed-initialized toy
networks, so absolute numbers are meaningless but every algebraic property
of the metrics holds and is tested. The quality-only inception score drops
the usual diversity term: per image it is exp(KL(p(y|x) || uniform)),
computed in product form prod_i (C p_i)^(p_i) so that the uniform -> 1 and
one-hot -> C anchors are exact in floating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError
from .seeding import numpy_generator, string_seed

PROB_TOL = 1e-6


@dataclass(frozen=True)
class ClassProbabilities:
    """One image's class distribution; entries >= 0 summing to 1."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) < 2:
            raise ShapeError(f"expected a probability vector over >= 2 classes, got {p.shape}")
        if (p < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if abs(float(p.sum()) - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities must sum to 1 within {PROB_TOL}, got {p.sum()}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_classes(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class MetricResult:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class MetricReport:
    config: str
    n_images: int
    qis: MetricResult
    clip_tx: MetricResult
    clip_im: MetricResult


def _mean_std(scores: Sequence[float]) -> MetricResult:
    arr = np.asarray(list(scores), dtype=np.float64)
    # population std: single-set reporting, matches the +-0.00 single-image case
    return MetricResult(mean=float(arr.mean()), std=float(arr.std()), n=len(arr))


def confidence_score(p: ClassProbabilities) -> float:
    """exp(KL(p || uniform)) in product form; 1 for uniform, C for one-hot."""
    c = p.n_classes
    score = 1.0
    for pi in p.probs:
        if pi > 0.0:
            score *= (c * pi) ** pi
    return score


def quality_inception_score(probs: Sequence[ClassProbabilities]) -> MetricResult:
    if len(probs) < 1:
        raise ValueError("need at least one image")
    return _mean_std([confidence_score(p) for p in probs])


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    uu = float(u @ u)
    vv = float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise NumericsError("zero-norm embedding")
    return float(u @ v) / math.sqrt(uu * vv)


def clip_image_score(images: Sequence[Any], prompt_image: Any,
                     embedder: Callable[[Any], np.ndarray]) -> MetricResult:
    """100 x cosine between each image embedding and the prompt-image embedding."""
    if len(images) < 1:
        raise ValueError("need at least one image")
    ref = embedder(prompt_image)
    return _mean_std([100.0 * cosine_similarity(embedder(img), ref) for img in images])


def clip_text_score(images: Sequence[Any], text: str,
                    text_embedder: Callable[[str], np.ndarray],
                    image_embedder: Callable[[Any], np.ndarray]) -> MetricResult:
    if len(images) < 1:
        raise ValueError("need at least one image")
    ref = text_embedder(text)
    return _mean_std([100.0 * cosine_similarity(image_embedder(img), ref) for img in images])


def build_report(config: str, qis: MetricResult, clip_tx: MetricResult,
                 clip_im: MetricResult) -> MetricReport:
    counts = {qis.n, clip_tx.n, clip_im.n}
    if len(counts) != 1:
        raise ValueError(f"metrics computed on different image counts: {counts}")
    return MetricReport(config=config, n_images=qis.n, qis=qis,
                        clip_tx=clip_tx, clip_im=clip_im)


def format_entry(mean: float, std: float) -> str:
    """mean to 2 decimals; std to 2 decimals below 10, 1 decimal from 10 up."""
    std_str = f"{std:.1f}" if std >= 10 else f"{std:.2f}"
    return f"{mean:.2f}±{std_str}"


def report_to_dict(report: MetricReport) -> dict:
    return {
        "config": report.config,
        "n_images": report.n_images,
        "qis": {"mean": report.qis.mean, "std": report.qis.std},
        "clip_tx": {"mean": report.clip_tx.mean, "std": report.clip_tx.std},
        "clip_im": {"mean": report.clip_im.mean, "std": report.clip_im.std},
    }


def report_from_dict(data: dict) -> MetricReport:
    def res(key):
        return MetricResult(mean=data[key]["mean"], std=data[key]["std"], n=data["n_images"])
    return MetricReport(config=data["config"], n_images=data["n_images"],
                        qis=res("qis"), clip_tx=res("clip_tx"), clip_im=res("clip_im"))


def report_to_json(report: MetricReport, extra: dict | None = None) -> str:
    data = report_to_dict(report)
    if extra:
        data.update(extra)
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def render_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table with one row per configuration."""
    header = f"{'Model':<28} {'QIS':>14} {'CLIP(TX)':>14} {'CLIP(IM)':>14}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.config:<28} {format_entry(r.qis.mean, r.qis.std):>14} "
            f"{format_entry(r.clip_tx.mean, r.clip_tx.std):>14} "
            f"{format_entry(r.clip_im.mean, r.clip_im.std):>14}"
        )
    return "\n".join(lines) + "\n"


class ToyClassifier:
    """Seed-initialized linear classifier over flattened pixels."""

    def __init__(self, input_size: int, seed: int, n_classes: int = 10):
        self.input_size = input_size
        self.n_classes = n_classes
        gen = numpy_generator(seed)
        dim = input_size * input_size * 3
        self.weight = gen.standard_normal((n_classes, dim)) / math.sqrt(dim)
        self.bias = gen.standard_normal(n_classes) * 0.1

    def __call__(self, image: np.ndarray) -> ClassProbabilities:
        flat = np.asarray(image, dtype=np.float64).reshape(-1)
        if flat.shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"classifier expects {self.input_size}x{self.input_size}x3 images"
            )
        logits = self.weight @ (flat - 0.5) * 8.0 + self.bias
        logits -= logits.max()
        expd = np.exp(logits)
        return ClassProbabilities(probs=expd / expd.sum())


class ToyImageEmbedder:
    """Seed-initialized linear image embedding."""

    def __init__(self, input_size: int, seed: int, dim: int = 32):
        self.input_size = input_size
        self.dim = dim
        gen = numpy_generator(seed)
        in_dim = input_size * input_size * 3
        self.weight = gen.standard_normal((dim, in_dim)) / math.sqrt(in_dim)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        flat = np.asarray(image, dtype=np.float64).reshape(-1)
        if flat.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"embedder expects {self.input_size}x{self.input_size}x3 images")
        return self.weight @ (flat - 0.5)


class ToyTextEmbedder:
    """Hash-seeded text embedding, deterministic per string."""

    def __init__(self, seed: int, dim: int = 32):
        self.seed = seed
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be non-empty")
        gen = numpy_generator(string_seed(text, salt=f"metric-text-{self.seed}"))
        return gen.standard_normal(self.dim)
