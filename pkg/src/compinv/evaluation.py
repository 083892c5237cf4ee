"""Desk-scale metric suite.

Two metrics stand in for pretrained-model backends and say so in every report:
text alignment is measured with detector confidences instead of CLIP text-image
similarity, and image alignment compares handcrafted crop features instead of
CLIP image embeddings.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .boxes import BBox
from .scene_corpus import ConceptDef, _hsv_chroma, _to_unit, concept, detect, detection_for

DETECTION_THRESHOLD = 0.5

SUBSTITUTIONS = {
    "text_align_proxy": "SUBSTITUTED: mean detector confidence over prompt nouns (replaces CLIP text-image similarity)",
    "coi_likelihood": "fraction of images where the analytic detector finds the concept at confidence >= 0.5 "
                      "(analytic detector replaces DETR)",
    "image_align": "SUBSTITUTED: cosine similarity of handcrafted crop features (colour histogram + shape map), "
                   "mapped to [0,1] (replaces CLIP image features)",
}


def _as_concept(c) -> ConceptDef:
    return c if isinstance(c, ConceptDef) else concept(c)


def coi_likelihood(images, target, threshold: float = DETECTION_THRESHOLD, candidates=None) -> float:
    target = _as_concept(target)
    cands = [target] + [_as_concept(c) for c in (candidates or []) if _as_concept(c) != target]
    hits = 0
    for img in images:
        d = detection_for(detect(img, cands), target.name)
        hits += int(d is not None and d.confidence >= threshold)
    return hits / len(images)


def text_alignment_proxy(images, nouns: Sequence) -> float:
    """Mean over images of the mean detector confidence over the prompt nouns."""
    cs = [_as_concept(n) for n in nouns]
    if not cs:
        raise ValueError("prompt has no nouns")
    vals = []
    for img in images:
        dets = detect(img, cs)
        vals.append(np.mean([(d.confidence if (d := detection_for(dets, c.name)) else 0.0) for c in cs]))
    return float(np.mean(vals))


def per_image_text_alignment(images, nouns) -> np.ndarray:
    cs = [_as_concept(n) for n in nouns]
    out = []
    for img in images:
        dets = detect(img, cs)
        out.append(np.mean([(d.confidence if (d := detection_for(dets, c.name)) else 0.0) for c in cs]))
    return np.asarray(out)


# ---------------------------------------------------------- image features


def crop_features(image, box: BBox, hue: float | None = None) -> np.ndarray:
    """Colour histogram (4x4x4) + luminance histogram + 8x8 object-coverage map of a crop."""
    rgb = _to_unit(image)
    h, w = rgb.shape[:2]
    x0 = max(int(math.floor(box.x0 * w)), 0)
    y0 = max(int(math.floor(box.y0 * h)), 0)
    x1 = min(max(int(math.ceil(box.x1 * w)), x0 + 1), w)
    y1 = min(max(int(math.ceil(box.y1 * h)), y0 + 1), h)
    crop = rgb[y0:y1, x0:x1]
    q = np.minimum((crop * 4).astype(int), 3)
    hist = np.bincount((q[..., 0] * 16 + q[..., 1] * 4 + q[..., 2]).ravel(), minlength=64).astype(float)
    lum = crop.mean(axis=2)
    lhist = np.bincount(np.minimum((lum * 8).astype(int), 7).ravel(), minlength=8).astype(float)
    _, chroma = _hsv_chroma(crop)
    ref = max(float(chroma.max()), 1e-6)
    cov = np.clip(chroma / ref, 0, 1)
    ys = np.linspace(0, cov.shape[0] - 1, 8).round().astype(int)
    xs = np.linspace(0, cov.shape[1] - 1, 8).round().astype(int)
    shape = cov[np.ix_(ys, xs)].ravel()
    blocks = [hist, lhist, shape]
    return np.concatenate([b / max(np.linalg.norm(b), 1e-12) for b in blocks])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def reference_feature(user_images, user_boxes: Sequence[BBox]) -> np.ndarray:
    if user_boxes is None or len(user_boxes) != len(user_images) or any(b is None for b in user_boxes):
        raise ValueError("user samples must carry concept boxes")
    return np.mean([crop_features(img, b) for img, b in zip(user_images, user_boxes)], axis=0)


def image_alignment(images, user_images, user_boxes, target, threshold: float = DETECTION_THRESHOLD,
                    per_image: bool = False):
    """Mean over generated images of (cos + 1) / 2 between the detected concept crop
    and the mean user-sample crop feature; undetected images contribute 0."""
    target = _as_concept(target)
    ref = reference_feature(user_images, user_boxes)
    vals = []
    for img in images:
        d = detection_for(detect(img, [target]), target.name)
        if d is None or d.confidence < threshold:
            vals.append(0.0)
        else:
            vals.append(0.5 * (cosine(crop_features(img, d.bbox), ref) + 1.0))
    arr = np.asarray(vals)
    return arr if per_image else float(arr.mean())


# -------------------------------------------------------- attention dynamics


def attention_similarity_series(maps_per_step: Sequence[torch.Tensor], groups: list[list[int]]):
    """Relative attention mass of each noun group across reverse steps.

    maps_per_step: sequence of (B, L, g, g) canonical maps. For each step the
    mean attention mass of group i is divided by the mean over groups.
    Returns (series (steps, N), dominance gap of the final step).
    """
    rows = []
    for maps in maps_per_step:
        mass = torch.stack([maps[:, g].sum(1).mean() for g in groups]).double()
        rows.append((mass / mass.mean()).numpy())
    series = np.asarray(rows)
    gap = float(series[-1].max() - series[-1].min()) if len(series) else 0.0
    return series, gap


# ----------------------------------------------------------------- reports


def bootstrap_ci(values, rng: np.random.Generator, n_boot: int = 1000, alpha: float = 0.05):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return (float("nan"), float("nan"), float("nan"))
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    means = v[idx].mean(1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    m = float(v.mean())
    return m, float(min(lo, m)), float(max(hi, m))


def bootstrap_diff_ci(a, b, rng: np.random.Generator, n_boot: int = 2000, alpha: float = 0.05):
    """Paired bootstrap interval of mean(a - b)."""
    return bootstrap_ci(np.asarray(a, float) - np.asarray(b, float), rng, n_boot, alpha)


@dataclass
class TaskRow:
    method: str
    concept_a: str
    concept_b: str
    text_align_proxy: float
    coi_likelihood_a: float
    coi_likelihood_b: float
    image_align: float


@dataclass
class MetricReport:
    rows: list[TaskRow] = field(default_factory=list)
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)

    COLUMNS = ("text_align_proxy", "coi_likelihood_a", "coi_likelihood_b", "image_align")

    def aggregates(self, seed: int = 0) -> dict:
        out = {}
        rng = np.random.default_rng(seed)
        for method in sorted({r.method for r in self.rows}):
            sel = [r for r in self.rows if r.method == method]
            out[method] = {}
            for col in self.COLUMNS:
                m, lo, hi = bootstrap_ci([getattr(r, col) for r in sel], rng)
                out[method][col] = {"mean": m, "ci95": [lo, hi]}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + " | ".join(f"{k}: {v}" for k, v in SUBSTITUTIONS.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "concept_a", "concept_b", *self.COLUMNS])
        for r in self.rows:
            w.writerow([r.method, r.concept_a, r.concept_b, *(f"{getattr(r, c):.6f}" for c in self.COLUMNS)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "metric_definitions": SUBSTITUTIONS,
            "aggregates": self.aggregates(),
            "n_rows": len(self.rows),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def compositionality_matrix(names: Sequence[str], images_for_pair) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric pairwise text-alignment matrix (NaN diagonal) and per-concept row means.

    ``images_for_pair(a, b)`` returns generated images of the pair prompt.
    """
    n = len(names)
    M = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1, n):
            imgs = images_for_pair(names[i], names[j])
            M[i, j] = M[j, i] = text_alignment_proxy(imgs, [_pair_concept(names[i]), _pair_concept(names[j])])
    means = np.array([np.nanmean(M[i]) if n > 1 else np.nan for i in range(n)])
    return M, means


def _pair_concept(name: str):
    return concept(name.rstrip("*"))


def matrix_csv(names: Sequence[str], M: np.ndarray, means: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("# " + SUBSTITUTIONS["text_align_proxy"] + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["concept", *names, "mean"])
    for i, n in enumerate(names):
        w.writerow([n, *("" if np.isnan(v) else f"{v:.6f}" for v in M[i]), f"{means[i]:.6f}"])
    return buf.getvalue()
