"""Synthetic scene world: concept vocabulary, scene grammar, rasterizer,
captions, the analytic detector, and corpus I/O."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .boxes import BBox, iou
from .errors import ConfigError, DataError, VocabularyError
from .numerics import RngStream, stable_hash

IMAGE_SIZE = 32
SHAPE_KINDS = ("circle", "square", "triangle", "star", "cross", "ring")
TEXTURES = ("solid", "striped", "dotted")
TEXTURE_SHADE = 0.55

PALETTE = {
    "red": (0.92, 0.12, 0.10),
    "yellow": (0.95, 0.85, 0.10),
    "green": (0.12, 0.80, 0.20),
    "cyan": (0.10, 0.82, 0.90),
    "blue": (0.15, 0.30, 0.95),
    "magenta": (0.90, 0.15, 0.85),
}


@dataclass(frozen=True)
class ConceptDef:
    name: str
    shape_kind: str
    color: tuple[float, float, float]
    texture: str = "solid"

    def __post_init__(self):
        if self.shape_kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.shape_kind!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")

    @property
    def hue(self) -> float:
        return colorsys.rgb_to_hsv(*self.color)[0]


def _build_pretrain_concepts() -> dict[str, ConceptDef]:
    out = {}
    for shape in ("circle", "square"):
        for cname, rgb in PALETTE.items():
            out[f"{cname}{shape}"] = ConceptDef(f"{cname}{shape}", shape, rgb)
    return out


PRETRAIN_CONCEPTS: dict[str, ConceptDef] = _build_pretrain_concepts()

# Held-out concepts of interest: a texture never seen in pretraining, each
# paired with the solid noun that serves as its superclass.
HELD_OUT_CONCEPTS: dict[str, ConceptDef] = {
    "zebraball": ConceptDef("zebraball", "circle", PALETTE["red"], "striped"),
    "dicebox": ConceptDef("dicebox", "square", PALETTE["blue"], "dotted"),
    "melon": ConceptDef("melon", "circle", PALETTE["green"], "striped"),
    "cheese": ConceptDef("cheese", "square", PALETTE["yellow"], "dotted"),
}
SUPERCLASS = {"zebraball": "redcircle", "dicebox": "bluesquare", "melon": "greencircle", "cheese": "yellowsquare"}

ALL_CONCEPTS = {**PRETRAIN_CONCEPTS, **HELD_OUT_CONCEPTS}


def concept(name: str) -> ConceptDef:
    try:
        return ALL_CONCEPTS[name]
    except KeyError:
        raise VocabularyError(f"unknown concept {name!r}") from None


@dataclass
class SceneObject:
    concept: ConceptDef
    bbox: BBox


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    background_id: int = 0
    image_size: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)

    def to_json(self) -> dict:
        return {
            "objects": [{"concept": o.concept.name, "bbox": list(o.bbox.as_tuple())} for o in self.objects],
            "background_id": self.background_id,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        objs = [SceneObject(concept(o["concept"]), BBox(*o["bbox"])) for o in d["objects"]]
        return cls(objs, int(d["background_id"]), tuple(d.get("image_size", (IMAGE_SIZE, IMAGE_SIZE))))


@dataclass
class GrammarConfig:
    concepts: list[str] = field(default_factory=lambda: list(PRETRAIN_CONCEPTS))
    two_object_prob: float = 0.6
    size_single: tuple[float, float] = (0.30, 0.45)
    size_pair: tuple[float, float] = (0.26, 0.38)
    n_backgrounds: int = 4
    # Probability that the earlier-listed concept of a pair is placed left/top.
    layout_prior: float = 0.85
    image_size: int = IMAGE_SIZE

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grammar keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("size_single", "size_pair"):
            if k in kw:
                kw[k] = tuple(kw[k])
        g = cls(**kw)
        g.validate()
        return g

    def validate(self):
        if not self.concepts:
            raise ConfigError("grammar lists no concepts")
        for name in self.concepts:
            if name not in ALL_CONCEPTS:
                raise ConfigError(f"grammar references unknown concept {name!r}")
        if not 0.0 <= self.two_object_prob <= 1.0:
            raise ConfigError("two_object_prob must lie in [0, 1]")
        if not (0 < self.size_pair[0] <= self.size_pair[1] <= 0.46):
            raise ConfigError("size_pair must fit inside an image half")
        if not (0 < self.size_single[0] <= self.size_single[1] <= 0.9):
            raise ConfigError("size_single out of range")


def load_grammar(path: str | Path) -> GrammarConfig:
    import tomli

    text = Path(path).read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: line {getattr(exc, 'lineno', '?')}: {exc}") from exc
    return GrammarConfig.from_dict(data.get("grammar", data))


# --------------------------------------------------------------------- sampling


def _place(rng: RngStream, lo: float, hi: float, size: float) -> float:
    return float(rng.uniform(lo, hi - size))


def sample_scene(rng: RngStream, grammar: GrammarConfig, force_objects: Sequence[str] | None = None,
                 size_range: tuple[float, float] | None = None) -> SceneSpec:
    """Draw a scene with one or two objects from the grammar.

    ``force_objects`` fixes the concept list (used for user samples and tests).
    """
    grammar.validate()
    names = list(force_objects) if force_objects else None
    if names is None:
        if len(grammar.concepts) >= 2 and rng.random() < grammar.two_object_prob:
            i, j = (int(k) for k in rng.generator.choice(len(grammar.concepts), 2, replace=False))
            names = [grammar.concepts[i], grammar.concepts[j]]
        else:
            names = [grammar.concepts[int(rng.integers(len(grammar.concepts)))]]
    bg = int(rng.integers(grammar.n_backgrounds))
    m = 0.02
    if len(names) == 1:
        lo, hi = size_range or grammar.size_single
        s = float(rng.uniform(lo, hi))
        x0 = _place(rng, m, 1 - m, s)
        y0 = _place(rng, m, 1 - m, s)
        objs = [SceneObject(concept(names[0]), BBox(x0, y0, x0 + s, y0 + s))]
    elif len(names) == 2:
        ranks = [grammar.concepts.index(n) if n in grammar.concepts else 10**6 for n in names]
        first = 0 if ranks[0] <= ranks[1] else 1
        if rng.random() >= grammar.layout_prior:
            first = 1 - first
        order = [names[first], names[1 - first]]
        horizontal = rng.random() < 0.5
        lo, hi = size_range or grammar.size_pair
        objs = []
        for slot, name in enumerate(order):
            s = float(rng.uniform(lo, hi))
            a0 = _place(rng, m + 0.5 * slot, 0.5 * (slot + 1) - m, s)
            b0 = _place(rng, m, 1 - m, s)
            x0, y0 = (a0, b0) if horizontal else (b0, a0)
            objs.append(SceneObject(concept(name), BBox(x0, y0, x0 + s, y0 + s)))
    else:
        raise ConfigError("scenes hold one or two objects")
    return SceneSpec(objs, bg, (grammar.image_size, grammar.image_size))


# -------------------------------------------------------------------- rendering

_SS = 4  # supersampling factor per axis


def _background(bg_id: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    k = bg_id % 4
    if k == 0:
        g = np.full((h, w), 0.16)
    elif k == 1:
        g = 0.06 + 0.26 * yy / max(h - 1, 1)
    elif k == 2:
        g = np.where(((xx // 4) + (yy // 4)) % 2 == 0, 0.10, 0.22)
    else:
        g = 0.14 + 0.07 * np.sin((xx + yy) * 0.5)
    return np.repeat(g[..., None], 3, axis=2)


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    inb = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    du, dv = u - 0.5, v - 0.5
    r2 = du * du + dv * dv
    if kind == "circle":
        return r2 <= 0.25
    if kind == "square":
        return inb
    if kind == "triangle":
        return inb & (v >= np.abs(2 * u - 1))
    if kind == "ring":
        return (r2 <= 0.25) & (r2 >= 0.09)
    if kind == "cross":
        return inb & ((np.abs(du) <= 1 / 6) | (np.abs(dv) <= 1 / 6))
    if kind == "star":
        theta = np.arctan2(dv, du)
        return np.sqrt(r2) <= 0.5 * (0.62 + 0.38 * np.cos(5 * (theta + np.pi / 2)))
    raise ConfigError(f"unknown shape kind {kind!r}")


def _shade(texture: str, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    if texture == "solid":
        return np.ones_like(px)
    if texture == "striped":
        return np.where(np.floor((px + py) / 3.0) % 2 == 0, 1.0, TEXTURE_SHADE)
    cx, cy = px % 4.0 - 2.0, py % 4.0 - 2.0
    return np.where(cx * cx + cy * cy <= 1.1, TEXTURE_SHADE, 1.0)


def render_object_layer(obj: SceneObject, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Coverage map (h, w) and premultiplied-free color layer (h, w, 3)."""
    offs = (np.arange(_SS) + 0.5) / _SS
    py = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    px = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    PY, PX = np.meshgrid(py, px, indexing="ij")
    b = obj.bbox
    u = (PX / w - b.x0) / (b.x1 - b.x0)
    v = (PY / h - b.y0) / (b.y1 - b.y0)
    ins = _inside(obj.concept.shape_kind, u, v).astype(np.float64)
    shade = _shade(obj.concept.texture, PX, PY)
    cov = ins.reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    tone = (ins * shade).reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    tone = np.where(cov > 0, tone / np.maximum(cov, 1e-12), 1.0)
    color = tone[..., None] * np.asarray(obj.concept.color)[None, None, :]
    return cov, color


def render(scene: SceneSpec) -> torch.Tensor:
    """Rasterize a scene to an (H, W, 3) float32 image in [-1, 1]."""
    h, w = scene.image_size
    img = _background(scene.background_id, h, w)
    for obj in scene.objects:
        cov, color = render_object_layer(obj, h, w)
        img = img * (1 - cov[..., None]) + color * cov[..., None]
    return torch.from_numpy((img * 2.0 - 1.0).astype(np.float32))


# --------------------------------------------------------------------- captions


def caption(scene: SceneSpec, rng: RngStream, vocabulary: Iterable[str] | None = None) -> str:
    vocab = set(PRETRAIN_CONCEPTS if vocabulary is None else vocabulary)
    names = [o.concept.name for o in scene.objects]
    for n in names:
        if n not in vocab:
            raise VocabularyError(f"concept {n!r} has no vocabulary noun")
    if len(names) == 1:
        return f"a photo of a {names[0]}"
    if rng.random() < 0.5:
        names = names[::-1]
    return f"a {names[0]} and a {names[1]}"


# --------------------------------------------------------------------- detector


@dataclass
class DetectionResult:
    concept_name: str
    bbox: BBox
    confidence: float


HUE_SIGMA = 15.0 / 360.0
HUE_GATE = 24.0 / 360.0
MIN_CHROMA = 0.22
MIN_AREA = 4
CORNER_SIGMA = 0.12
ASPECT_SIGMA = 0.35


def _to_unit(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    return np.clip((arr + 1.0) * 0.5, 0.0, 1.0)


def _hsv_chroma(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    c = mx - mn
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(c > 1e-9, c, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 1e-9, h / 6.0, 0.0)
    return h, c


def _hue_dist(a, b):
    d = np.abs(a - b) % 1.0
    return np.minimum(d, 1.0 - d)


@dataclass
class _Blob:
    bbox: BBox
    fill: float
    corner: float
    aspect: float
    color_score: float


def _measure(rgb: np.ndarray, hue: float) -> list[_Blob]:
    """Every connected hue-matching component of at least ``MIN_AREA`` pixels."""
    h, w = rgb.shape[:2]
    hh, cc = _hsv_chroma(rgb)
    dist = _hue_dist(hh, hue)
    mask = (cc >= MIN_CHROMA) & (dist <= HUE_GATE)
    if mask.sum() < MIN_AREA:
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    blobs = []
    for lab in range(1, n + 1):
        comp = labels == lab
        if comp.sum() < MIN_AREA:
            continue
        ref = np.percentile(cc[comp], 90)
        near = ndimage.binary_dilation(comp, structure=np.ones((3, 3))) & (dist <= HUE_GATE)
        alpha = np.where(near, np.clip(cc / max(ref, 1e-6), 0.0, 1.0), 0.0)
        colp = alpha.max(axis=0)
        rowp = alpha.max(axis=1)
        cs = np.nonzero(colp)[0]
        rs = np.nonzero(rowp)[0]
        wid = max(float(colp.sum()), 1.0)
        hgt = max(float(rowp.sum()), 1.0)
        # partial coverage of the outermost column/row gives the sub-pixel edge
        x0 = max(cs[0] + 1.0 - colp[cs[0]], 0.0)
        y0 = max(rs[0] + 1.0 - rowp[rs[0]], 0.0)
        x1, y1 = min(x0 + wid, float(w)), min(y0 + hgt, float(h))
        weights = alpha[near]
        cscore = float(np.sum(weights * np.exp(-0.5 * (dist[near] / HUE_SIGMA) ** 2)) / max(weights.sum(), 1e-9))
        fill = float(alpha.sum() / (wid * hgt))
        # faint fringe and tinted background count as empty for the silhouette test
        solid = np.where(near, np.clip((cc - MIN_CHROMA) / max(ref - MIN_CHROMA, 1e-6), 0.0, 1.0), 0.0)
        corner = _corner_occupancy(solid >= 0.5)
        blobs.append(_Blob(BBox(x0 / w, y0 / h, x1 / w, y1 / h), fill, corner, wid / hgt, cscore))
    return blobs


def _corner_occupancy(solid: np.ndarray) -> float:
    """Fraction of the corner cells (outside the inscribed ellipse) that are solid.

    The box is that of the half-coverage mask, whose straight edges do not move
    under blur; a disk leaves these corners empty while a square keeps them.
    """
    ys, xs = np.nonzero(solid)
    if ys.size == 0:
        return float("nan")
    sub = solid[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    hh, ww = sub.shape
    yy, xx = np.mgrid[0:hh, 0:ww]
    u = (xx + 0.5) / ww * 2 - 1
    v = (yy + 0.5) / hh * 2 - 1
    corner = u * u + v * v > 1.0
    return float(sub[corner].mean()) if corner.any() else float("nan")


_TEMPLATE_CACHE: dict[tuple, tuple[float, float]] = {}


def _template(c: ConceptDef, side_px: float, size: int) -> tuple[float, float]:
    """Corner occupancy and aspect the measurement pipeline reports on a clean render of ``c``."""
    key = (c.shape_kind, c.texture, round(side_px * 2) / 2, size)
    if key not in _TEMPLATE_CACHE:
        s = min(max(key[2] / size, 4.0 / size), 0.9)
        vals = []
        for off in (0.0, 0.3):
            o = (1 - s) / 2 + off / size
            scene = SceneSpec([SceneObject(c, BBox(o, o, o + s, o + s))], 0, (size, size))
            blobs = _measure(_to_unit(render(scene)), c.hue)
            if blobs and not math.isnan(blobs[0].corner):
                vals.append((blobs[0].corner, blobs[0].aspect))
        if not vals:
            # too small to measure: fall back to the ideal silhouette
            vals.append((0.0 if c.shape_kind == "circle" else 1.0, 1.0))
        _TEMPLATE_CACHE[key] = tuple(np.mean(vals, axis=0))
    return _TEMPLATE_CACHE[key]


def _shape_posterior(c: ConceptDef, blob: _Blob, side: float, size: int) -> float:
    """Probability that the blob has ``c``'s silhouette rather than another one in use.

    Each silhouette kind present in the vocabulary contributes a Gaussian
    likelihood of the measured corner occupancy around its clean-render template.
    """
    if math.isnan(blob.corner):
        return 0.0
    logl = {}
    for kind in sorted({d.shape_kind for d in ALL_CONCEPTS.values()} | {c.shape_kind}):
        ref = ConceptDef(c.name, kind, c.color, c.texture)
        logl[kind] = -0.5 * ((blob.corner - _template(ref, side, size)[0]) / CORNER_SIGMA) ** 2
    top = max(logl.values())
    return math.exp(logl[c.shape_kind] - top) / sum(math.exp(v - top) for v in logl.values())


def detect(image, candidates: Sequence[ConceptDef]) -> list[DetectionResult]:
    """Colour segmentation, connected components, and shape-descriptor scoring.

    Returns at most one detection per candidate; confidence is the product of a
    colour-match and a shape-match score.
    """
    if not candidates:
        raise ConfigError("detect() needs at least one candidate concept")
    rgb = _to_unit(image)
    size = rgb.shape[0]
    out = []
    for c in candidates:
        best = None
        for blob in _measure(rgb, c.hue):
            side = math.sqrt((blob.bbox.x1 - blob.bbox.x0) * (blob.bbox.y1 - blob.bbox.y0)) * size
            shape = _shape_posterior(c, blob, side, size)
            t_aspect = _template(c, side, size)[1]
            shape *= math.exp(-0.5 * (math.log(blob.aspect / t_aspect) / ASPECT_SIGMA) ** 2)
            conf = float(np.clip(blob.color_score * shape, 0.0, 1.0))
            if best is None or conf > best.confidence:
                best = DetectionResult(c.name, blob.bbox, conf)
        if best is not None:
            out.append(best)
    return out


def detection_for(detections: Sequence[DetectionResult], name: str) -> DetectionResult | None:
    for d in detections:
        if d.concept_name == name:
            return d
    return None


# ------------------------------------------------------------------- corpus I/O


def save_png(image: torch.Tensor, path: Path) -> None:
    arr = ((image.detach().cpu().numpy() + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0)


def generate_split(rng: RngStream, grammar: GrammarConfig, count: int, out_dir: Path | None = None,
                   force_objects: Sequence[str] | None = None, size_range=None,
                   caption_vocab: Iterable[str] | None = None) -> list[dict]:
    """Sample, render and (optionally) write ``count`` scenes. Returns manifest entries."""
    entries = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(count):
        srng = rng.child(f"scene{k}")
        scene = sample_scene(srng, grammar, force_objects, size_range)
        try:
            cap = caption(scene, srng.child("caption"), caption_vocab)
        except VocabularyError:
            cap = None
        entry = {"file": f"{k:05d}.png", **scene.to_json(), "caption": cap}
        if out_dir is not None:
            save_png(render(scene), out_dir / entry["file"])
        entries.append(entry)
    return entries


@dataclass
class CorpusConfig:
    seed: int = 0
    train_count: int = 5000
    user_samples: int = 5
    user_size: tuple[float, float] = (0.45, 0.62)
    calibration_count: int = 500
    grammar: GrammarConfig = field(default_factory=GrammarConfig)


def write_corpus(cfg: CorpusConfig, out: Path) -> dict:
    """Write train split, per-concept user samples, manifest, and calibration report."""
    out = Path(out)
    rng = RngStream(cfg.seed, "corpus")
    splits = {"train": generate_split(rng.child("train"), cfg.grammar, cfg.train_count, out / "train")}
    for name in HELD_OUT_CONCEPTS:
        splits[f"user/{name}"] = generate_split(
            rng.child(f"user/{name}"), cfg.grammar, cfg.user_samples, out / "user" / name,
            force_objects=[name], size_range=tuple(cfg.user_size), caption_vocab=())
    manifest = {"version": 1, "image_size": cfg.grammar.image_size, "splits": splits}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(text)
    report = calibrate_detector(rng.child("calibration"), cfg.grammar, cfg.calibration_count)
    (out / "detector_calibration.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return {"manifest_hash": stable_hash(text.encode()), "calibration": report}


def load_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"corpus manifest missing at {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc


def load_split(root: Path, split: str) -> tuple[torch.Tensor, list[dict]]:
    """Images as an (N, H, W, 3) tensor plus their manifest entries."""
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise DataError(f"split {split!r} not in corpus {root}")
    entries = manifest["splits"][split]
    base = Path(root) / split
    try:
        images = torch.stack([load_png(base / e["file"]) for e in entries])
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"corpus image unreadable: {exc}") from exc
    return images, entries


def calibrate_detector(rng: RngStream, grammar: GrammarConfig, count: int) -> dict:
    """Precision/recall and box IoU of the detector on clean renders."""
    tp = fp = fn = 0
    ious = []
    cands = [concept(n) for n in grammar.concepts]
    for k in range(count):
        scene = sample_scene(rng.child(f"cal{k}"), grammar)
        dets = {d.concept_name: d for d in detect(render(scene), cands) if d.confidence >= 0.5}
        truth = {o.concept.name: o.bbox for o in scene.objects}
        for name, box in truth.items():
            if name in dets:
                tp += 1
                ious.append(iou(dets[name].bbox, box))
            else:
                fn += 1
        fp += sum(1 for n in dets if n not in truth)
    return {
        "scenes": count,
        "precision": tp / max(tp + fp, 1),
        "recall": tp / max(tp + fn, 1),
        "iou_ge_0.8": float(np.mean([v >= 0.8 for v in ious])) if ious else 0.0,
        "mean_iou": float(np.mean(ious)) if ious else 0.0,
    }
